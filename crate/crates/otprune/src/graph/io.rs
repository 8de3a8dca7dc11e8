//! Model file format: `<name>.otg.json` holds the structure, `<name>.otg.bin`
//! holds the weights as little-endian f32 blobs, one per tensor, each
//! preceded by its byte length as a little-endian u64. Tensor order follows
//! node order in the JSON document; per node the order is fixed by kind
//! (conv: weight, bias; linear: weight, bias; batch norm: gamma, beta,
//! running mean, running variance).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LayerKind, LayerNode, NetworkGraph, NodeId, Shape};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("format version {found} unsupported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("weight blob mismatch at node `{node}` tensor `{tensor}`: expected {expected} bytes, {detail}")]
    WeightLength { node: String, tensor: &'static str, expected: u64, detail: String },
    #[error("weight sidecar has {0} trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    input_shape: Shape,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: NodeId,
    name: String,
    inputs: Vec<NodeId>,
    #[serde(flatten)]
    layer: LayerDoc,
}

/// Structure-only mirror of [`LayerKind`]; weight vectors live in the sidecar.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind")]
enum LayerDoc {
    Input,
    Output,
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
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
    ChannelSelect {
        mask: Vec<bool>,
    },
}

/// Tensors of one node, in sidecar order.
fn node_tensors(kind: &LayerKind) -> Vec<(&'static str, &[f32])> {
    match kind {
        LayerKind::Conv2D { weight, bias, .. } => {
            let mut v = vec![("weight", weight.as_slice())];
            if let Some(b) = bias {
                v.push(("bias", b.as_slice()));
            }
            v
        }
        LayerKind::Linear { weight, bias, .. } => {
            vec![("weight", weight.as_slice()), ("bias", bias.as_slice())]
        }
        LayerKind::BatchNorm { gamma, beta, running_mean, running_var, .. } => vec![
            ("gamma", gamma.as_slice()),
            ("beta", beta.as_slice()),
            ("running_mean", running_mean.as_slice()),
            ("running_var", running_var.as_slice()),
        ],
        _ => Vec::new(),
    }
}

fn sidecar_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let stem = s
        .strip_suffix(".otg.json")
        .or_else(|| s.strip_suffix(".otg.bin"))
        .or_else(|| s.strip_suffix(".otg"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.otg.json")), PathBuf::from(format!("{stem}.otg.bin")))
}

/// Writes `<base>.otg.json` and `<base>.otg.bin`.
pub fn save(graph: &NetworkGraph, base: impl AsRef<Path>) -> Result<(), ModelIoError> {
    let (json_path, bin_path) = sidecar_paths(base.as_ref());
    let doc = ModelDoc {
        format_version: FORMAT_VERSION,
        input_shape: graph.input_shape,
        nodes: graph
            .nodes()
            .iter()
            .map(|n| NodeDoc {
                id: n.id,
                name: n.name.clone(),
                inputs: n.inputs.clone(),
                layer: to_doc(&n.kind),
            })
            .collect(),
    };
    let json =
        serde_json::to_vec_pretty(&doc).map_err(|e| ModelIoError::Schema(e.to_string()))?;
    fs::write(&json_path, json)?;

    let mut bin = Vec::new();
    for node in graph.nodes() {
        for (_, tensor) in node_tensors(&node.kind) {
            bin.extend_from_slice(&(tensor.len() as u64 * 4).to_le_bytes());
            for v in tensor {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(&bin_path)?;
    f.write_all(&bin)?;
    Ok(())
}

/// Loads a model saved by [`save`]. Round-trips are bit-exact on weights.
pub fn load(base: impl AsRef<Path>) -> Result<NetworkGraph, ModelIoError> {
    let (json_path, bin_path) = sidecar_paths(base.as_ref());
    let json = fs::read(&json_path)?;
    let doc: ModelDoc =
        serde_json::from_slice(&json).map_err(|e| ModelIoError::Schema(e.to_string()))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(ModelIoError::Version { found: doc.format_version });
    }
    let bin = fs::read(&bin_path)?;
    let mut cursor = std::io::Cursor::new(&bin);

    let mut read_tensor = |node: &str, tensor: &'static str, len: usize| -> Result<Vec<f32>, ModelIoError> {
        let expected = len as u64 * 4;
        let mut len_buf = [0u8; 8];
        cursor.read_exact(&mut len_buf).map_err(|_| ModelIoError::WeightLength {
            node: node.to_string(),
            tensor,
            expected,
            detail: "sidecar truncated before length prefix".into(),
        })?;
        let stored = u64::from_le_bytes(len_buf);
        if stored != expected {
            return Err(ModelIoError::WeightLength {
                node: node.to_string(),
                tensor,
                expected,
                detail: format!("length prefix says {stored}"),
            });
        }
        let mut data = vec![0u8; stored as usize];
        cursor.read_exact(&mut data).map_err(|_| ModelIoError::WeightLength {
            node: node.to_string(),
            tensor,
            expected,
            detail: "sidecar truncated inside tensor".into(),
        })?;
        Ok(data.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    };

    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for nd in &doc.nodes {
        let kind = match &nd.layer {
            LayerDoc::Input => LayerKind::Input,
            LayerDoc::Output => LayerKind::Output,
            LayerDoc::Conv2D {
                in_channels, out_channels, kernel_h, kernel_w, stride, padding, has_bias,
            } => {
                let weight = read_tensor(&nd.name, "weight", out_channels * in_channels * kernel_h * kernel_w)?;
                let bias = if *has_bias {
                    Some(read_tensor(&nd.name, "bias", *out_channels)?)
                } else {
                    None
                };
                LayerKind::Conv2D {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel_h: *kernel_h,
                    kernel_w: *kernel_w,
                    stride: *stride,
                    padding: *padding,
                    weight,
                    bias,
                }
            }
            LayerDoc::Linear { in_features, out_features } => LayerKind::Linear {
                in_features: *in_features,
                out_features: *out_features,
                weight: read_tensor(&nd.name, "weight", in_features * out_features)?,
                bias: read_tensor(&nd.name, "bias", *out_features)?,
            },
            LayerDoc::BatchNorm { channels, eps } => LayerKind::BatchNorm {
                channels: *channels,
                gamma: read_tensor(&nd.name, "gamma", *channels)?,
                beta: read_tensor(&nd.name, "beta", *channels)?,
                running_mean: read_tensor(&nd.name, "running_mean", *channels)?,
                running_var: read_tensor(&nd.name, "running_var", *channels)?,
                eps: *eps,
            },
            LayerDoc::ReLU => LayerKind::ReLU,
            LayerDoc::MaxPool { kernel, stride } => {
                LayerKind::MaxPool { kernel: *kernel, stride: *stride }
            }
            LayerDoc::AvgPool { kernel, stride } => {
                LayerKind::AvgPool { kernel: *kernel, stride: *stride }
            }
            LayerDoc::GlobalAvgPool => LayerKind::GlobalAvgPool,
            LayerDoc::Add => LayerKind::Add,
            LayerDoc::Concat => LayerKind::Concat,
            LayerDoc::ChannelSelect { mask } => LayerKind::ChannelSelect { mask: mask.clone() },
        };
        nodes.push(LayerNode { id: nd.id, name: nd.name.clone(), kind, inputs: nd.inputs.clone() });
    }
    let pos = cursor.position() as usize;
    if pos != bin.len() {
        return Err(ModelIoError::TrailingBytes(bin.len() - pos));
    }
    Ok(NetworkGraph::from_parts(doc.input_shape, nodes))
}

fn to_doc(kind: &LayerKind) -> LayerDoc {
    match kind {
        LayerKind::Input => LayerDoc::Input,
        LayerKind::Output => LayerDoc::Output,
        LayerKind::Conv2D { in_channels, out_channels, kernel_h, kernel_w, stride, padding, bias, .. } => {
            LayerDoc::Conv2D {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel_h: *kernel_h,
                kernel_w: *kernel_w,
                stride: *stride,
                padding: *padding,
                has_bias: bias.is_some(),
            }
        }
        LayerKind::Linear { in_features, out_features, .. } => {
            LayerDoc::Linear { in_features: *in_features, out_features: *out_features }
        }
        LayerKind::BatchNorm { channels, eps, .. } => {
            LayerDoc::BatchNorm { channels: *channels, eps: *eps }
        }
        LayerKind::ReLU => LayerDoc::ReLU,
        LayerKind::MaxPool { kernel, stride } => {
            LayerDoc::MaxPool { kernel: *kernel, stride: *stride }
        }
        LayerKind::AvgPool { kernel, stride } => {
            LayerDoc::AvgPool { kernel: *kernel, stride: *stride }
        }
        LayerKind::GlobalAvgPool => LayerDoc::GlobalAvgPool,
        LayerKind::Add => LayerDoc::Add,
        LayerKind::Concat => LayerDoc::Concat,
        LayerKind::ChannelSelect { mask } => LayerDoc::ChannelSelect { mask: mask.clone() },
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_preset, Preset};
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let g = build_preset(Preset::ToyCnn, 4, 42);
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        save(&g, &base).unwrap();
        let loaded = load(&base).unwrap();
        assert_eq!(g, loaded);
    }

    #[test]
    fn truncated_sidecar_is_length_mismatch() {
        let g = build_preset(Preset::ToyMlp, 4, 42);
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        save(&g, &base).unwrap();
        let bin_path = dir.path().join("model.otg.bin");
        let bytes = std::fs::read(&bin_path).unwrap();
        std::fs::write(&bin_path, &bytes[..bytes.len() - 7]).unwrap();
        match load(&base) {
            Err(ModelIoError::WeightLength { .. }) => {}
            other => panic!("expected WeightLength, got {other:?}"),
        }
    }

    #[test]
    fn unknown_layer_kind_is_schema_error_naming_the_kind() {
        let g = build_preset(Preset::ToyMlp, 4, 42);
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        save(&g, &base).unwrap();
        let json_path = dir.path().join("model.otg.json");
        let text = std::fs::read_to_string(&json_path).unwrap();
        std::fs::write(&json_path, text.replace("\"Linear\"", "\"HyperConv\"")).unwrap();
        match load(&base) {
            Err(ModelIoError::Schema(msg)) => assert!(msg.contains("HyperConv"), "msg: {msg}"),
            other => panic!("expected Schema, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let g = build_preset(Preset::ToyMlp, 4, 42);
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        save(&g, &base).unwrap();
        let json_path = dir.path().join("model.otg.json");
        let text = std::fs::read_to_string(&json_path).unwrap();
        std::fs::write(&json_path, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        match load(&base) {
            Err(ModelIoError::Version { found: 9 }) => {}
            other => panic!("expected Version, got {other:?}"),
        }
    }
}
