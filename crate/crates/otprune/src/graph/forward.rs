//! Inference-mode forward pass. Batch norm uses running statistics.

use std::collections::BTreeMap;

use super::{GraphError, LayerKind, NetworkGraph, NodeId};
use crate::tensor::Tensor;

impl NetworkGraph {
    /// Runs the graph on a batch and returns the output node's tensor
    /// (logits for classifiers). Deterministic: identical inputs produce
    /// bit-identical outputs.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, GraphError> {
        if input.feature_shape() != self.input_shape {
            return Err(GraphError::ShapeMismatch {
                node: "input".into(),
                msg: format!(
                    "graph expects {:?}, batch has {:?}",
                    self.input_shape,
                    input.feature_shape()
                ),
            });
        }
        let order = self.topo_order()?;
        let mut acts: BTreeMap<NodeId, Tensor> = BTreeMap::new();
        for id in order {
            let node = self.node(id)?;
            let out = match &node.kind {
                LayerKind::Input => input.clone(),
                LayerKind::Output => acts[&node.inputs[0]].clone(),
                _ => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &acts[i]).collect();
                    eval_node(&node.kind, &ins, &node.name)?
                }
            };
            acts.insert(id, out);
        }
        let output = self.output_node()?;
        Ok(acts.remove(&output).expect("output evaluated"))
    }
}

pub(crate) fn eval_node(
    kind: &LayerKind,
    inputs: &[&Tensor],
    name: &str,
) -> Result<Tensor, GraphError> {
    let err = |msg: String| GraphError::ShapeMismatch { node: name.to_string(), msg };
    match kind {
        LayerKind::Conv2D { in_channels, out_channels, kernel_h, kernel_w, stride, padding, weight, bias } => {
            let x = inputs[0];
            if x.channels != *in_channels {
                return Err(err(format!("expected {in_channels} channels, got {}", x.channels)));
            }
            Ok(conv2d(x, *out_channels, *kernel_h, *kernel_w, *stride, *padding, weight, bias.as_deref()))
        }
        LayerKind::Linear { in_features, out_features, weight, bias } => {
            let x = inputs[0];
            if x.features_per_sample() != *in_features {
                return Err(err(format!(
                    "expected {in_features} features, got {}",
                    x.features_per_sample()
                )));
            }
            let mut y = Tensor::zeros(x.batch, *out_features, 1, 1);
            for n in 0..x.batch {
                let xs = x.sample(n);
                for o in 0..*out_features {
                    let row = &weight[o * in_features..(o + 1) * in_features];
                    let mut acc = bias[o];
                    for (wv, xv) in row.iter().zip(xs) {
                        acc += wv * xv;
                    }
                    y.data[n * out_features + o] = acc;
                }
            }
            Ok(y)
        }
        LayerKind::BatchNorm { channels, gamma, beta, running_mean, running_var, eps } => {
            let x = inputs[0];
            if x.channels != *channels {
                return Err(err(format!("expected {channels} channels, got {}", x.channels)));
            }
            let mut y = x.clone();
            let plane = x.height * x.width;
            for c in 0..*channels {
                let scale = gamma[c] / (running_var[c] + eps).sqrt();
                let shift = beta[c] - running_mean[c] * scale;
                for n in 0..x.batch {
                    let base = (n * x.channels + c) * plane;
                    for v in &mut y.data[base..base + plane] {
                        *v = *v * scale + shift;
                    }
                }
            }
            Ok(y)
        }
        LayerKind::ReLU => {
            let mut y = inputs[0].clone();
            for v in &mut y.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(y)
        }
        LayerKind::MaxPool { kernel, stride } => Ok(pool(inputs[0], *kernel, *stride, true)),
        LayerKind::AvgPool { kernel, stride } => Ok(pool(inputs[0], *kernel, *stride, false)),
        LayerKind::GlobalAvgPool => {
            let x = inputs[0];
            let plane = (x.height * x.width) as f32;
            let mut y = Tensor::zeros(x.batch, x.channels, 1, 1);
            for n in 0..x.batch {
                for c in 0..x.channels {
                    let base = (n * x.channels + c) * x.height * x.width;
                    let sum: f32 = x.data[base..base + x.height * x.width].iter().sum();
                    y.data[n * x.channels + c] = sum / plane;
                }
            }
            Ok(y)
        }
        LayerKind::Add => {
            let first = inputs[0];
            let mut y = first.clone();
            for x in &inputs[1..] {
                if x.feature_shape() != first.feature_shape() {
                    return Err(err("add inputs disagree in shape".into()));
                }
                for (a, b) in y.data.iter_mut().zip(&x.data) {
                    *a += b;
                }
            }
            Ok(y)
        }
        LayerKind::Concat => {
            let first = inputs[0];
            let total_c: usize = inputs.iter().map(|x| x.channels).sum();
            let mut y = Tensor::zeros(first.batch, total_c, first.height, first.width);
            let plane = first.height * first.width;
            for n in 0..first.batch {
                let mut off = 0;
                for x in inputs {
                    if (x.height, x.width) != (first.height, first.width) {
                        return Err(err("concat spatial dims disagree".into()));
                    }
                    for c in 0..x.channels {
                        let src = (n * x.channels + c) * plane;
                        let dst = (n * total_c + off + c) * plane;
                        y.data[dst..dst + plane].copy_from_slice(&x.data[src..src + plane]);
                    }
                    off += x.channels;
                }
            }
            Ok(y)
        }
        LayerKind::ChannelSelect { mask } => {
            let x = inputs[0];
            if mask.len() != x.channels {
                return Err(err(format!("mask length {} != channels {}", mask.len(), x.channels)));
            }
            let kept: Vec<usize> =
                mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
            let plane = x.height * x.width;
            let mut y = Tensor::zeros(x.batch, kept.len(), x.height, x.width);
            for n in 0..x.batch {
                for (kc, &c) in kept.iter().enumerate() {
                    let src = (n * x.channels + c) * plane;
                    let dst = (n * kept.len() + kc) * plane;
                    y.data[dst..dst + plane].copy_from_slice(&x.data[src..src + plane]);
                }
            }
            Ok(y)
        }
        LayerKind::Input | LayerKind::Output => unreachable!("handled by caller"),
    }
}

pub(crate) fn conv2d(
    x: &Tensor,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
    weight: &[f32],
    bias: Option<&[f32]>,
) -> Tensor {
    let in_c = x.channels;
    let out_h = (x.height + 2 * padding - kernel_h) / stride + 1;
    let out_w = (x.width + 2 * padding - kernel_w) / stride + 1;
    let mut y = Tensor::zeros(x.batch, out_channels, out_h, out_w);
    for n in 0..x.batch {
        for o in 0..out_channels {
            let b = bias.map_or(0.0, |b| b[o]);
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = b;
                    for i in 0..in_c {
                        let wbase = ((o * in_c + i) * kernel_h) * kernel_w;
                        for kh in 0..kernel_h {
                            let ih = (oh * stride + kh) as isize - padding as isize;
                            if ih < 0 || ih >= x.height as isize {
                                continue;
                            }
                            let xbase = ((n * in_c + i) * x.height + ih as usize) * x.width;
                            for kw in 0..kernel_w {
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                if iw < 0 || iw >= x.width as isize {
                                    continue;
                                }
                                acc += weight[wbase + kh * kernel_w + kw]
                                    * x.data[xbase + iw as usize];
                            }
                        }
                    }
                    *y.at_mut(n, o, oh, ow) = acc;
                }
            }
        }
    }
    y
}

fn pool(x: &Tensor, kernel: usize, stride: usize, max: bool) -> Tensor {
    let out_h = (x.height - kernel) / stride + 1;
    let out_w = (x.width - kernel) / stride + 1;
    let mut y = Tensor::zeros(x.batch, x.channels, out_h, out_w);
    for n in 0..x.batch {
        for c in 0..x.channels {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best = f32::NEG_INFINITY;
                    let mut sum = 0.0f32;
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            let v = x.at(n, c, oh * stride + kh, ow * stride + kw);
                            if v > best {
                                best = v;
                            }
                            sum += v;
                        }
                    }
                    *y.at_mut(n, c, oh, ow) =
                        if max { best } else { sum / (kernel * kernel) as f32 };
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::super::{LayerKind, NetworkGraph};
    use crate::tensor::Tensor;

    #[test]
    fn identity_batch_norm_passes_input_through() {
        let mut g = NetworkGraph::new((2, 3, 3));
        let input = g.add_node("input", LayerKind::Input, &[]);
        let bn = g.add_node(
            "bn",
            LayerKind::BatchNorm {
                channels: 2,
                gamma: vec![1.0; 2],
                beta: vec![0.0; 2],
                running_mean: vec![0.0; 2],
                running_var: vec![1.0; 2],
                eps: 1e-12,
            },
            &[input],
        );
        g.add_node("output", LayerKind::Output, &[bn]);
        let x = Tensor::from_vec(1, 2, 3, 3, (0..18).map(|i| i as f32 * 0.37 - 3.0).collect());
        let y = g.forward(&x).unwrap();
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn one_by_one_conv_is_scalar_multiply() {
        let mut g = NetworkGraph::new((1, 1, 1));
        let input = g.add_node("input", LayerKind::Input, &[]);
        let conv = g.add_node(
            "conv",
            LayerKind::Conv2D {
                in_channels: 1,
                out_channels: 1,
                kernel_h: 1,
                kernel_w: 1,
                stride: 1,
                padding: 0,
                weight: vec![2.0],
                bias: Some(vec![0.0]),
            },
            &[input],
        );
        g.add_node("output", LayerKind::Output, &[conv]);
        let y = g.forward(&Tensor::from_vec(1, 1, 1, 1, vec![3.0])).unwrap();
        assert_eq!(y.data, vec![6.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let g = crate::graph::build_preset(crate::graph::Preset::ToyCnn, 4, 7);
        let x = Tensor::from_vec(2, 3, 8, 8, (0..384).map(|i| (i as f32 * 0.611).sin()).collect());
        let a = g.forward(&x).unwrap();
        let b = g.forward(&x).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = crate::graph::build_preset(crate::graph::Preset::ToyCnn, 4, 7);
        let x = Tensor::zeros(1, 3, 9, 9);
        assert!(g.forward(&x).is_err());
    }
}
