//! Structural validity checking. Collects every violation instead of
//! stopping at the first one.

use std::collections::BTreeMap;

use super::{infer_shape, LayerKind, NetworkGraph, NodeId, Shape};

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub node_name: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.node {
            Some(id) => write!(f, "{} ({}): {}", self.node_name, id, self.message),
            None => write!(f, "{}: {}", self.node_name, self.message),
        }
    }
}

fn v(node: Option<NodeId>, name: &str, msg: impl Into<String>) -> Violation {
    Violation { node, node_name: name.to_string(), message: msg.into() }
}

/// Checks every graph invariant. An empty return value means the graph is
/// valid.
pub fn validate(graph: &NetworkGraph) -> Vec<Violation> {
    let mut out = Vec::new();

    let n_inputs = graph.nodes().iter().filter(|n| matches!(n.kind, LayerKind::Input)).count();
    let n_outputs = graph.nodes().iter().filter(|n| matches!(n.kind, LayerKind::Output)).count();
    if n_inputs != 1 {
        out.push(v(None, "graph", format!("expected exactly one input node, found {n_inputs}")));
    }
    if n_outputs != 1 {
        out.push(v(None, "graph", format!("expected exactly one output node, found {n_outputs}")));
    }

    // Dangling input references.
    for node in graph.nodes() {
        for &src in &node.inputs {
            if graph.node(src).is_err() {
                out.push(v(Some(node.id), &node.name, format!("references missing node {src}")));
            }
        }
    }
    if !out.iter().any(|x| x.message.contains("missing node")) {
        out.extend(check_topology(graph));
    }

    // Per-node parameter invariants (independent of shapes).
    for node in graph.nodes() {
        match &node.kind {
            LayerKind::Conv2D {
                in_channels, out_channels, kernel_h, kernel_w, weight, bias, ..
            } => {
                let expected = out_channels * in_channels * kernel_h * kernel_w;
                if weight.len() != expected {
                    out.push(v(
                        Some(node.id),
                        &node.name,
                        format!("conv weight has {} entries, expected {expected}", weight.len()),
                    ));
                }
                if let Some(b) = bias {
                    if b.len() != *out_channels {
                        out.push(v(
                            Some(node.id),
                            &node.name,
                            format!("conv bias has {} entries, expected {out_channels}", b.len()),
                        ));
                    }
                }
            }
            LayerKind::Linear { in_features, out_features, weight, bias } => {
                if weight.len() != in_features * out_features {
                    out.push(v(
                        Some(node.id),
                        &node.name,
                        format!(
                            "linear weight has {} entries, expected {}",
                            weight.len(),
                            in_features * out_features
                        ),
                    ));
                }
                if bias.len() != *out_features {
                    out.push(v(
                        Some(node.id),
                        &node.name,
                        format!("linear bias has {} entries, expected {out_features}", bias.len()),
                    ));
                }
            }
            LayerKind::BatchNorm { channels, gamma, beta, running_mean, running_var, eps } => {
                for (label, vec) in [
                    ("gamma", gamma),
                    ("beta", beta),
                    ("running_mean", running_mean),
                    ("running_var", running_var),
                ] {
                    if vec.len() != *channels {
                        out.push(v(
                            Some(node.id),
                            &node.name,
                            format!("{label} has {} entries, expected {channels}", vec.len()),
                        ));
                    }
                }
                if running_var.iter().any(|&x| x < 0.0) {
                    out.push(v(Some(node.id), &node.name, "running variance has negative entries"));
                }
                if !(*eps > 0.0) {
                    out.push(v(Some(node.id), &node.name, format!("eps must be > 0, got {eps}")));
                }
            }
            _ => {}
        }
    }

    out
}

/// Acyclicity, reachability, and shape/channel compatibility.
fn check_topology(graph: &NetworkGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let order = match graph.topo_order() {
        Ok(o) => o,
        Err(_) => {
            out.push(v(None, "graph", "not acyclic"));
            return out;
        }
    };

    // Best-effort shape inference: skip nodes whose inputs failed.
    let mut shapes: BTreeMap<NodeId, Shape> = BTreeMap::new();
    for id in &order {
        let node = graph.node(*id).expect("node in order");
        match infer_shape(graph, node, &shapes) {
            Ok(s) => {
                shapes.insert(*id, s);
            }
            Err(e) => out.push(v(Some(*id), &node.name, format!("channel mismatch: {e}"))),
        }
    }

    // Batch-norm placement: exactly one producer whose channel count matches.
    for id in graph.bn_nodes() {
        let node = graph.node(id).expect("bn node");
        let LayerKind::BatchNorm { channels, .. } = &node.kind else { unreachable!() };
        if node.inputs.len() != 1 {
            continue; // arity violation already reported
        }
        if let Some(&(c, _, _)) = shapes.get(&node.inputs[0]) {
            if c != *channels {
                out.push(v(
                    Some(id),
                    &node.name,
                    format!("channel mismatch: producer yields {c} channels, batch-norm has {channels}"),
                ));
            }
        }
    }

    // Connectivity: every node lies on some input-to-output path.
    if let (Ok(input), Ok(output)) = (graph.input_node(), graph.output_node()) {
        let consumers = graph.consumers();
        let mut from_input: BTreeMap<NodeId, bool> =
            graph.nodes().iter().map(|n| (n.id, false)).collect();
        let mut stack = vec![input];
        while let Some(id) = stack.pop() {
            if std::mem::replace(from_input.get_mut(&id).unwrap(), true) {
                continue;
            }
            stack.extend(consumers[&id].iter().copied());
        }
        let mut to_output: BTreeMap<NodeId, bool> =
            graph.nodes().iter().map(|n| (n.id, false)).collect();
        let mut stack = vec![output];
        while let Some(id) = stack.pop() {
            if std::mem::replace(to_output.get_mut(&id).unwrap(), true) {
                continue;
            }
            stack.extend(graph.node(id).unwrap().inputs.iter().copied());
        }
        for node in graph.nodes() {
            if !from_input[&node.id] || !to_output[&node.id] {
                out.push(v(Some(node.id), &node.name, "disconnected from the input-output path"));
            }
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::super::{LayerKind, NetworkGraph};
    use super::*;

    fn conv_kind(in_c: usize, out_c: usize) -> LayerKind {
        LayerKind::Conv2D {
            in_channels: in_c,
            out_channels: out_c,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
            weight: vec![0.1; out_c * in_c * 9],
            bias: Some(vec![0.0; out_c]),
        }
    }

    fn bn_kind(c: usize) -> LayerKind {
        LayerKind::BatchNorm {
            channels: c,
            gamma: vec![0.5; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: 1e-5,
        }
    }

    fn three_layer_net() -> NetworkGraph {
        let mut g = NetworkGraph::new((3, 8, 8));
        let input = g.add_node("input", LayerKind::Input, &[]);
        let c1 = g.add_node("conv1", conv_kind(3, 8), &[input]);
        let b1 = g.add_node("bn1", bn_kind(8), &[c1]);
        let r1 = g.add_node("relu1", LayerKind::ReLU, &[b1]);
        let c2 = g.add_node("conv2", conv_kind(8, 8), &[r1]);
        let gap = g.add_node("gap", LayerKind::GlobalAvgPool, &[c2]);
        let fc = g.add_node(
            "fc",
            LayerKind::Linear {
                in_features: 8,
                out_features: 4,
                weight: vec![0.01; 32],
                bias: vec![0.0; 4],
            },
            &[gap],
        );
        g.add_node("output", LayerKind::Output, &[fc]);
        g
    }

    #[test]
    fn well_formed_net_is_ok() {
        assert!(validate(&three_layer_net()).is_empty());
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut g = NetworkGraph::new((3, 8, 8));
        let input = g.add_node("input", LayerKind::Input, &[]);
        let c1 = g.add_node("conv1", conv_kind(3, 8), &[input]);
        let b1 = g.add_node("bn1", bn_kind(4), &[c1]);
        let gap = g.add_node("gap", LayerKind::GlobalAvgPool, &[b1]);
        g.add_node("output", LayerKind::Output, &[gap]);
        let violations = validate(&g);
        assert!(
            violations.iter().any(|v| v.message.contains("channel mismatch")),
            "got: {violations:?}"
        );
    }

    #[test]
    fn cycle_is_reported() {
        let mut g = three_layer_net();
        // Feed relu1's output back into conv1.
        let relu1 = g.node_by_name("relu1").unwrap().id;
        let conv1 = g.node_by_name("conv1").unwrap().id;
        g.node_mut(conv1).unwrap().inputs.push(relu1);
        let violations = validate(&g);
        assert!(violations.iter().any(|v| v.message.contains("not acyclic")), "got: {violations:?}");
    }

    #[test]
    fn negative_variance_is_reported() {
        let mut g = three_layer_net();
        let bn1 = g.node_by_name("bn1").unwrap().id;
        if let LayerKind::BatchNorm { running_var, .. } = &mut g.node_mut(bn1).unwrap().kind {
            running_var[3] = -0.5;
        }
        let violations = validate(&g);
        assert!(violations.iter().any(|v| v.message.contains("negative")), "got: {violations:?}");
    }

    #[test]
    fn bad_weight_length_is_reported() {
        let mut g = three_layer_net();
        let conv1 = g.node_by_name("conv1").unwrap().id;
        if let LayerKind::Conv2D { weight, .. } = &mut g.node_mut(conv1).unwrap().kind {
            weight.pop();
        }
        let violations = validate(&g);
        assert!(violations.iter().any(|v| v.message.contains("weight has")), "got: {violations:?}");
    }
}
