//! Network intermediate representation: a dataflow graph of typed layers.
//!
//! A [`NetworkGraph`] is an acyclic graph with a single input and a single
//! output. Nodes own their parameters (convolution filters, batch-norm
//! scales, ...). Edges are stored as per-node ordered input lists; the order
//! matters for `Add` and `Concat` junctions.

mod complexity;
mod forward;
mod io;
mod presets;
mod validate;

pub use complexity::ComplexityCount;
pub use io::{load, save, ModelIoError, FORMAT_VERSION};
pub use presets::{build_preset, reinitialize, Preset, PresetError};
pub use validate::{validate, Violation};

pub(crate) use forward::eval_node;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stable node identifier. Ids are never reused within a graph, so they
/// survive surgery (node removal / insertion) unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Feature-map shape `(channels, height, width)`.
pub type Shape = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    Output,
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        /// `out_channels * in_channels * kernel_h * kernel_w`, row-major.
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        /// `out_features * in_features`, row-major.
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    BatchNorm {
        channels: usize,
        gamma: Vec<f32>,
        beta: Vec<f32>,
        running_mean: Vec<f32>,
        running_var: Vec<f32>,
        eps: f32,
    },
    ReLU,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Add,
    Concat,
    /// Keeps the channels whose mask entry is `true`, drops the rest.
    /// Used where structural removal would disturb parallel branches.
    ChannelSelect {
        mask: Vec<bool>,
    },
}

impl LayerKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::Output => "Output",
            LayerKind::Conv2D { .. } => "Conv2D",
            LayerKind::Linear { .. } => "Linear",
            LayerKind::BatchNorm { .. } => "BatchNorm",
            LayerKind::ReLU => "ReLU",
            LayerKind::MaxPool { .. } => "MaxPool",
            LayerKind::AvgPool { .. } => "AvgPool",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::Add => "Add",
            LayerKind::Concat => "Concat",
            LayerKind::ChannelSelect { .. } => "ChannelSelect",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph contains a cycle (node {0} unreachable in topological order)")]
    Cycle(String),
    #[error("shape mismatch at node {node}: {msg}")]
    ShapeMismatch { node: String, msg: String },
    #[error("invalid graph: {count} violation(s); first: {first}")]
    Invalid { count: usize, first: String },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("graph has no {0} node")]
    MissingEndpoint(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    pub input_shape: Shape,
    nodes: Vec<LayerNode>,
    next_id: u32,
}

impl NetworkGraph {
    pub fn new(input_shape: Shape) -> Self {
        NetworkGraph { input_shape, nodes: Vec::new(), next_id: 0 }
    }

    pub fn add_node(
        &mut self,
        name: impl Into<String>,
        kind: LayerKind,
        inputs: &[NodeId],
    ) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.push(LayerNode { id, name: name.into(), kind, inputs: inputs.to_vec() });
        id
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&LayerNode, GraphError> {
        self.nodes.iter().find(|n| n.id == id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut LayerNode, GraphError> {
        self.nodes.iter_mut().find(|n| n.id == id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn node_by_name(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Removes a node. Callers must fix up dangling references themselves.
    pub(crate) fn remove_node(&mut self, id: NodeId) {
        self.nodes.retain(|n| n.id != id);
    }

    /// Used by deserialization to rebuild a graph with preserved ids.
    pub(crate) fn from_parts(input_shape: Shape, nodes: Vec<LayerNode>) -> Self {
        let next_id = nodes.iter().map(|n| n.id.0 + 1).max().unwrap_or(0);
        NetworkGraph { input_shape, nodes, next_id }
    }

    pub fn input_node(&self) -> Result<NodeId, GraphError> {
        let mut it = self.nodes.iter().filter(|n| matches!(n.kind, LayerKind::Input));
        match (it.next(), it.next()) {
            (Some(n), None) => Ok(n.id),
            _ => Err(GraphError::MissingEndpoint("single input")),
        }
    }

    pub fn output_node(&self) -> Result<NodeId, GraphError> {
        let mut it = self.nodes.iter().filter(|n| matches!(n.kind, LayerKind::Output));
        match (it.next(), it.next()) {
            (Some(n), None) => Ok(n.id),
            _ => Err(GraphError::MissingEndpoint("single output")),
        }
    }

    /// Map from node id to the ids of nodes that consume its output,
    /// in deterministic (node-list) order.
    pub fn consumers(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut map: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in &self.nodes {
            map.entry(n.id).or_default();
        }
        for n in &self.nodes {
            for &src in &n.inputs {
                map.entry(src).or_default().push(n.id);
            }
        }
        map
    }

    /// Kahn topological order. Fails on cycles.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let mut indeg: BTreeMap<NodeId, usize> =
            self.nodes.iter().map(|n| (n.id, n.inputs.len())).collect();
        let consumers = self.consumers();
        let mut ready: Vec<NodeId> =
            self.nodes.iter().filter(|n| n.inputs.is_empty()).map(|n| n.id).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop() {
            order.push(id);
            for &c in &consumers[&id] {
                let d = indeg.get_mut(&c).expect("consumer tracked");
                *d -= 1;
                if *d == 0 {
                    ready.push(c);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = self
                .nodes
                .iter()
                .find(|n| !order.contains(&n.id))
                .map(|n| n.name.clone())
                .unwrap_or_default();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Infers the output shape of every node. Errors on the first
    /// inconsistency; `validate` reports all of them instead.
    pub fn shapes(&self) -> Result<BTreeMap<NodeId, Shape>, GraphError> {
        let order = self.topo_order()?;
        let mut shapes: BTreeMap<NodeId, Shape> = BTreeMap::new();
        for id in order {
            let node = self.node(id)?;
            let shape = infer_shape(self, node, &shapes)?;
            shapes.insert(id, shape);
        }
        Ok(shapes)
    }

    /// All batch-norm nodes in node-list order.
    pub fn bn_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::BatchNorm { .. }))
            .map(|n| n.id)
            .collect()
    }

    /// The scaling-factor vector of one batch-norm node.
    pub fn bn_gamma(&self, id: NodeId) -> Result<&[f32], GraphError> {
        match &self.node(id)?.kind {
            LayerKind::BatchNorm { gamma, .. } => Ok(gamma),
            _ => Err(GraphError::ShapeMismatch {
                node: self.node(id)?.name.clone(),
                msg: "not a batch-norm node".into(),
            }),
        }
    }

    /// Total parameter count, including batch-norm running statistics.
    pub fn param_count(&self) -> u64 {
        self.nodes.iter().map(|n| node_param_count(&n.kind)).sum()
    }
}

pub(crate) fn node_param_count(kind: &LayerKind) -> u64 {
    match kind {
        LayerKind::Conv2D { weight, bias, .. } => {
            weight.len() as u64 + bias.as_ref().map_or(0, |b| b.len() as u64)
        }
        LayerKind::Linear { weight, bias, .. } => (weight.len() + bias.len()) as u64,
        LayerKind::BatchNorm { channels, .. } => 4 * *channels as u64,
        _ => 0,
    }
}

pub(crate) fn infer_shape(
    graph: &NetworkGraph,
    node: &LayerNode,
    shapes: &BTreeMap<NodeId, Shape>,
) -> Result<Shape, GraphError> {
    let err = |msg: String| GraphError::ShapeMismatch { node: node.name.clone(), msg };
    let input_shape = |i: usize| -> Result<Shape, GraphError> {
        let id = *node
            .inputs
            .get(i)
            .ok_or_else(|| err(format!("missing input #{i}")))?;
        shapes.get(&id).copied().ok_or_else(|| err(format!("input {id} has no shape")))
    };
    let arity = |n: usize| -> Result<(), GraphError> {
        if node.inputs.len() == n {
            Ok(())
        } else {
            Err(err(format!("expected {n} input(s), found {}", node.inputs.len())))
        }
    };
    match &node.kind {
        LayerKind::Input => {
            arity(0)?;
            Ok(graph.input_shape)
        }
        LayerKind::Output => {
            arity(1)?;
            input_shape(0)
        }
        LayerKind::Conv2D { in_channels, out_channels, kernel_h, kernel_w, stride, padding, .. } => {
            arity(1)?;
            let (c, h, w) = input_shape(0)?;
            if c != *in_channels {
                return Err(err(format!("expects {in_channels} input channels, got {c}")));
            }
            if *stride == 0 {
                return Err(err("stride must be >= 1".into()));
            }
            let ph = h + 2 * padding;
            let pw = w + 2 * padding;
            if ph < *kernel_h || pw < *kernel_w {
                return Err(err(format!("kernel {kernel_h}x{kernel_w} larger than padded input {ph}x{pw}")));
            }
            Ok((*out_channels, (ph - kernel_h) / stride + 1, (pw - kernel_w) / stride + 1))
        }
        LayerKind::Linear { in_features, out_features, .. } => {
            arity(1)?;
            let (c, h, w) = input_shape(0)?;
            if c * h * w != *in_features {
                return Err(err(format!(
                    "expects {in_features} input features, got {c}x{h}x{w}={}",
                    c * h * w
                )));
            }
            Ok((*out_features, 1, 1))
        }
        LayerKind::BatchNorm { channels, .. } => {
            arity(1)?;
            let (c, h, w) = input_shape(0)?;
            if c != *channels {
                return Err(err(format!("expects {channels} channels, got {c}")));
            }
            Ok((c, h, w))
        }
        LayerKind::ReLU => {
            arity(1)?;
            input_shape(0)
        }
        LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
            arity(1)?;
            let (c, h, w) = input_shape(0)?;
            if *kernel == 0 || *stride == 0 {
                return Err(err("kernel and stride must be >= 1".into()));
            }
            if h < *kernel || w < *kernel {
                return Err(err(format!("pool kernel {kernel} larger than input {h}x{w}")));
            }
            Ok((c, (h - kernel) / stride + 1, (w - kernel) / stride + 1))
        }
        LayerKind::GlobalAvgPool => {
            arity(1)?;
            let (c, _, _) = input_shape(0)?;
            Ok((c, 1, 1))
        }
        LayerKind::Add => {
            if node.inputs.len() < 2 {
                return Err(err("add needs at least two inputs".into()));
            }
            let first = input_shape(0)?;
            for i in 1..node.inputs.len() {
                let s = input_shape(i)?;
                if s != first {
                    return Err(err(format!("add inputs disagree: {first:?} vs {s:?}")));
                }
            }
            Ok(first)
        }
        LayerKind::Concat => {
            if node.inputs.len() < 2 {
                return Err(err("concat needs at least two inputs".into()));
            }
            let (c0, h0, w0) = input_shape(0)?;
            let mut c = c0;
            for i in 1..node.inputs.len() {
                let (ci, hi, wi) = input_shape(i)?;
                if (hi, wi) != (h0, w0) {
                    return Err(err(format!(
                        "concat spatial dims disagree: {h0}x{w0} vs {hi}x{wi}"
                    )));
                }
                c += ci;
            }
            Ok((c, h0, w0))
        }
        LayerKind::ChannelSelect { mask } => {
            arity(1)?;
            let (c, h, w) = input_shape(0)?;
            if mask.len() != c {
                return Err(err(format!("mask length {} != input channels {c}", mask.len())));
            }
            Ok((mask.iter().filter(|&&m| m).count(), h, w))
        }
    }
}
