//! Inference cost accounting.
//!
//! Convention: one fused multiply-accumulate counts as one FLOP. Convolution
//! and linear layers are charged their MACs plus one add per bias output;
//! batch norm costs two ops per element (folded scale and shift), ReLU one,
//! pooling one per kernel element per output, global average pooling one per
//! input element, and element-wise add junctions one per element per merged
//! input. Parameter counts include every stored scalar: weights, biases, and
//! all four batch-norm vectors.

use serde::{Deserialize, Serialize};

use super::{GraphError, LayerKind, NetworkGraph};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityCount {
    pub flops: u64,
    pub params: u64,
}

impl NetworkGraph {
    /// Sums FLOPs and stored parameters over all nodes.
    pub fn count_complexity(&self) -> Result<ComplexityCount, GraphError> {
        let shapes = self.shapes()?;
        let mut flops = 0u64;
        let mut params = 0u64;
        for node in self.nodes() {
            let (c, h, w) = shapes[&node.id];
            let out_elems = (c * h * w) as u64;
            params += super::node_param_count(&node.kind);
            flops += match &node.kind {
                LayerKind::Conv2D { in_channels, kernel_h, kernel_w, bias, .. } => {
                    let macs = out_elems * (*in_channels * *kernel_h * *kernel_w) as u64;
                    macs + if bias.is_some() { out_elems } else { 0 }
                }
                LayerKind::Linear { in_features, out_features, .. } => {
                    (*in_features * *out_features + *out_features) as u64
                }
                LayerKind::BatchNorm { .. } => 2 * out_elems,
                LayerKind::ReLU => out_elems,
                LayerKind::MaxPool { kernel, .. } | LayerKind::AvgPool { kernel, .. } => {
                    out_elems * (*kernel * *kernel) as u64
                }
                LayerKind::GlobalAvgPool => {
                    let (ic, ih, iw) = shapes[&node.inputs[0]];
                    (ic * ih * iw) as u64
                }
                LayerKind::Add => out_elems * (node.inputs.len() as u64 - 1),
                LayerKind::Input
                | LayerKind::Output
                | LayerKind::Concat
                | LayerKind::ChannelSelect { .. } => 0,
            };
        }
        Ok(ComplexityCount { flops, params })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{LayerKind, NetworkGraph};

    fn single_conv(
        input: (usize, usize, usize),
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> NetworkGraph {
        let (in_c, _, _) = input;
        let mut g = NetworkGraph::new(input);
        let i = g.add_node("input", LayerKind::Input, &[]);
        let c = g.add_node(
            "conv",
            LayerKind::Conv2D {
                in_channels: in_c,
                out_channels: out_c,
                kernel_h: k,
                kernel_w: k,
                stride,
                padding,
                weight: vec![0.0; out_c * in_c * k * k],
                bias: None,
            },
            &[i],
        );
        g.add_node("output", LayerKind::Output, &[c]);
        g
    }

    #[test]
    fn conv_macs_match_hand_count() {
        // 8x8 output * 4 out channels * 3x3 kernel * 2 in channels = 4608.
        let g = single_conv((2, 8, 8), 4, 3, 1, 1);
        assert_eq!(g.count_complexity().unwrap().flops, 4608);
    }

    #[test]
    fn one_mac_conv() {
        let g = single_conv((1, 1, 1), 1, 1, 1, 0);
        let c = g.count_complexity().unwrap();
        assert_eq!(c.flops, 1);
        assert_eq!(c.params, 1);
    }

    #[test]
    fn counts_are_additive_over_nodes() {
        let mut g = NetworkGraph::new((2, 4, 4));
        let i = g.add_node("input", LayerKind::Input, &[]);
        let c = g.add_node(
            "conv",
            LayerKind::Conv2D {
                in_channels: 2,
                out_channels: 3,
                kernel_h: 1,
                kernel_w: 1,
                stride: 1,
                padding: 0,
                weight: vec![0.0; 6],
                bias: Some(vec![0.0; 3]),
            },
            &[i],
        );
        let b = g.add_node(
            "bn",
            LayerKind::BatchNorm {
                channels: 3,
                gamma: vec![0.5; 3],
                beta: vec![0.0; 3],
                running_mean: vec![0.0; 3],
                running_var: vec![1.0; 3],
                eps: 1e-5,
            },
            &[c],
        );
        let r = g.add_node("relu", LayerKind::ReLU, &[b]);
        let gap = g.add_node("gap", LayerKind::GlobalAvgPool, &[r]);
        let fc = g.add_node(
            "fc",
            LayerKind::Linear {
                in_features: 3,
                out_features: 2,
                weight: vec![0.0; 6],
                bias: vec![0.0; 2],
            },
            &[gap],
        );
        g.add_node("output", LayerKind::Output, &[fc]);
        let total = g.count_complexity().unwrap();
        // conv: 16*3*2 macs + 48 bias; bn: 2*48; relu: 48; gap: 48; fc: 6+2.
        assert_eq!(total.flops, 96 + 48 + 96 + 48 + 48 + 8);
        // conv 6+3, bn 12, fc 6+2.
        assert_eq!(total.params, 9 + 12 + 8);
    }
}
