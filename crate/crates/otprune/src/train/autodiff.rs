//! Reverse-mode differentiation over the network graph. The graph itself is
//! the computation graph: forward caches per-node activations plus what each
//! kind needs for its backward rule, then gradients flow in reverse
//! topological order.

use std::collections::BTreeMap;

use crate::graph::{GraphError, LayerKind, NetworkGraph, NodeId};
use crate::tensor::Tensor;

pub(crate) struct BnBatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance, the one used for normalization.
    pub var_biased: Vec<f32>,
    /// Number of elements per channel (batch * height * width).
    pub count: usize,
}

enum Cache {
    MaxPool { argmax: Vec<u32> },
    BatchNorm { xhat: Tensor, inv_std: Vec<f32> },
}

pub(crate) struct TrainPass {
    pub order: Vec<NodeId>,
    pub acts: BTreeMap<NodeId, Tensor>,
    caches: BTreeMap<NodeId, Cache>,
    pub bn_stats: BTreeMap<NodeId, BnBatchStats>,
}

impl TrainPass {
    pub fn logits(&self, graph: &NetworkGraph) -> Result<&Tensor, GraphError> {
        Ok(&self.acts[&graph.output_node()?])
    }
}

#[derive(Clone)]
pub(crate) enum ParamGrad {
    Conv2D { weight: Vec<f32>, bias: Option<Vec<f32>> },
    Linear { weight: Vec<f32>, bias: Vec<f32> },
    BatchNorm { gamma: Vec<f32>, beta: Vec<f32> },
}

pub(crate) type Gradients = BTreeMap<NodeId, ParamGrad>;

/// Training-mode forward pass. Batch norm normalizes with per-batch
/// statistics; the statistics are returned so the trainer can fold them into
/// the running estimates.
pub(crate) fn forward_train(graph: &NetworkGraph, input: &Tensor) -> Result<TrainPass, GraphError> {
    if input.feature_shape() != graph.input_shape {
        return Err(GraphError::ShapeMismatch {
            node: "input".into(),
            msg: format!(
                "graph expects {:?}, batch has {:?}",
                graph.input_shape,
                input.feature_shape()
            ),
        });
    }
    let order = graph.topo_order()?;
    let mut pass = TrainPass {
        order: order.clone(),
        acts: BTreeMap::new(),
        caches: BTreeMap::new(),
        bn_stats: BTreeMap::new(),
    };
    for id in order {
        let node = graph.node(id)?;
        let out = match &node.kind {
            LayerKind::Input => input.clone(),
            LayerKind::Output => pass.acts[&node.inputs[0]].clone(),
            LayerKind::BatchNorm { channels, gamma, beta, eps, .. } => {
                let x = &pass.acts[&node.inputs[0]];
                let (y, cache, stats) = bn_forward_train(x, *channels, gamma, beta, *eps);
                pass.caches.insert(id, cache);
                pass.bn_stats.insert(id, stats);
                y
            }
            LayerKind::MaxPool { kernel, stride } => {
                let x = &pass.acts[&node.inputs[0]];
                let (y, argmax) = maxpool_with_argmax(x, *kernel, *stride);
                pass.caches.insert(id, Cache::MaxPool { argmax });
                y
            }
            _ => {
                // Every other kind evaluates identically in training and
                // inference mode.
                let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &pass.acts[i]).collect();
                crate::graph::eval_node(&node.kind, &ins, &node.name)?
            }
        };
        pass.acts.insert(id, out);
    }
    Ok(pass)
}

fn bn_forward_train(
    x: &Tensor,
    channels: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Tensor, Cache, BnBatchStats) {
    let plane = x.height * x.width;
    let count = x.batch * plane;
    let mut mean = vec![0.0f32; channels];
    let mut var = vec![0.0f32; channels];
    for c in 0..channels {
        let mut sum = 0.0f64;
        for n in 0..x.batch {
            let base = (n * channels + c) * plane;
            for &v in &x.data[base..base + plane] {
                sum += v as f64;
            }
        }
        let m = sum / count as f64;
        let mut sq = 0.0f64;
        for n in 0..x.batch {
            let base = (n * channels + c) * plane;
            for &v in &x.data[base..base + plane] {
                let d = v as f64 - m;
                sq += d * d;
            }
        }
        mean[c] = m as f32;
        var[c] = (sq / count as f64) as f32;
    }
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for c in 0..channels {
        for n in 0..x.batch {
            let base = (n * channels + c) * plane;
            for i in base..base + plane {
                let h = (x.data[i] - mean[c]) * inv_std[c];
                xhat.data[i] = h;
                y.data[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, Cache::BatchNorm { xhat, inv_std }, BnBatchStats { mean, var_biased: var, count })
}

fn maxpool_with_argmax(x: &Tensor, kernel: usize, stride: usize) -> (Tensor, Vec<u32>) {
    let out_h = (x.height - kernel) / stride + 1;
    let out_w = (x.width - kernel) / stride + 1;
    let mut y = Tensor::zeros(x.batch, x.channels, out_h, out_w);
    let mut argmax = vec![0u32; y.data.len()];
    for n in 0..x.batch {
        for c in 0..x.channels {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            let i = x.idx(n, c, oh * stride + kh, ow * stride + kw);
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = y.idx(n, c, oh, ow);
                    y.data[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
    }
    (y, argmax)
}

/// Backpropagates `dout` (gradient w.r.t. the output node's activation)
/// through the pass, returning parameter gradients.
pub(crate) fn backward(
    graph: &NetworkGraph,
    pass: &TrainPass,
    dout: Tensor,
) -> Result<Gradients, GraphError> {
    let mut grads: Gradients = BTreeMap::new();
    let mut dacts: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    dacts.insert(graph.output_node()?, dout);

    let add_grad = |map: &mut BTreeMap<NodeId, Tensor>, id: NodeId, g: Tensor| {
        match map.get_mut(&id) {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            None => {
                map.insert(id, g);
            }
        }
    };

    for &id in pass.order.iter().rev() {
        let node = graph.node(id)?;
        let Some(dy) = dacts.remove(&id) else { continue };
        match &node.kind {
            LayerKind::Input => {}
            LayerKind::Output | LayerKind::ReLU => {
                let g = if matches!(node.kind, LayerKind::ReLU) {
                    let x = &pass.acts[&node.inputs[0]];
                    let mut g = dy;
                    for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                } else {
                    dy
                };
                add_grad(&mut dacts, node.inputs[0], g);
            }
            LayerKind::Conv2D { in_channels, out_channels, kernel_h, kernel_w, stride, padding, weight, bias } => {
                let x = &pass.acts[&node.inputs[0]];
                let (dw, db, dx) = conv_backward(
                    x, &dy, *in_channels, *out_channels, *kernel_h, *kernel_w, *stride, *padding,
                    weight, bias.is_some(),
                );
                grads.insert(id, ParamGrad::Conv2D { weight: dw, bias: db });
                add_grad(&mut dacts, node.inputs[0], dx);
            }
            LayerKind::Linear { in_features, out_features, weight, .. } => {
                let x = &pass.acts[&node.inputs[0]];
                let mut dw = vec![0.0f32; weight.len()];
                let mut db = vec![0.0f32; *out_features];
                let (c, h, w) = x.feature_shape();
                let mut dx = Tensor::zeros(x.batch, c, h, w);
                for n in 0..x.batch {
                    let xs = x.sample(n);
                    let dys = &dy.data[n * out_features..(n + 1) * out_features];
                    for o in 0..*out_features {
                        let g = dys[o];
                        db[o] += g;
                        let row = &mut dw[o * in_features..(o + 1) * in_features];
                        for (rv, &xv) in row.iter_mut().zip(xs) {
                            *rv += g * xv;
                        }
                        let wrow = &weight[o * in_features..(o + 1) * in_features];
                        let dxs = &mut dx.data[n * in_features..(n + 1) * in_features];
                        for (dv, &wv) in dxs.iter_mut().zip(wrow) {
                            *dv += g * wv;
                        }
                    }
                }
                grads.insert(id, ParamGrad::Linear { weight: dw, bias: db });
                add_grad(&mut dacts, node.inputs[0], dx);
            }
            LayerKind::BatchNorm { channels, gamma, .. } => {
                let Some(Cache::BatchNorm { xhat, inv_std }) = pass.caches.get(&id) else {
                    unreachable!("batch-norm cache present")
                };
                let plane = dy.height * dy.width;
                let m = (dy.batch * plane) as f32;
                let mut dgamma = vec![0.0f32; *channels];
                let mut dbeta = vec![0.0f32; *channels];
                for c in 0..*channels {
                    let mut dg = 0.0f64;
                    let mut db = 0.0f64;
                    for n in 0..dy.batch {
                        let base = (n * channels + c) * plane;
                        for i in base..base + plane {
                            dg += (dy.data[i] * xhat.data[i]) as f64;
                            db += dy.data[i] as f64;
                        }
                    }
                    dgamma[c] = dg as f32;
                    dbeta[c] = db as f32;
                }
                let mut dx = dy.clone();
                for c in 0..*channels {
                    let k = gamma[c] * inv_std[c];
                    let mean_dy = dbeta[c] / m;
                    let mean_dyxhat = dgamma[c] / m;
                    for n in 0..dy.batch {
                        let base = (n * channels + c) * plane;
                        for i in base..base + plane {
                            dx.data[i] = k * (dy.data[i] - mean_dy - xhat.data[i] * mean_dyxhat);
                        }
                    }
                }
                grads.insert(id, ParamGrad::BatchNorm { gamma: dgamma, beta: dbeta });
                add_grad(&mut dacts, node.inputs[0], dx);
            }
            LayerKind::MaxPool { .. } => {
                let Some(Cache::MaxPool { argmax }) = pass.caches.get(&id) else {
                    unreachable!("max-pool cache present")
                };
                let x = &pass.acts[&node.inputs[0]];
                let mut dx = Tensor::zeros(x.batch, x.channels, x.height, x.width);
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data[src as usize] += dy.data[o];
                }
                add_grad(&mut dacts, node.inputs[0], dx);
            }
            LayerKind::AvgPool { kernel, stride } => {
                let x = &pass.acts[&node.inputs[0]];
                let mut dx = Tensor::zeros(x.batch, x.channels, x.height, x.width);
                let scale = 1.0 / (kernel * kernel) as f32;
                for n in 0..dy.batch {
                    for c in 0..dy.channels {
                        for oh in 0..dy.height {
                            for ow in 0..dy.width {
                                let g = dy.at(n, c, oh, ow) * scale;
                                for kh in 0..*kernel {
                                    for kw in 0..*kernel {
                                        *dx.at_mut(n, c, oh * stride + kh, ow * stride + kw) += g;
                                    }
                                }
                            }
                        }
                    }
                }
                add_grad(&mut dacts, node.inputs[0], dx);
            }
            LayerKind::GlobalAvgPool => {
                let x = &pass.acts[&node.inputs[0]];
                let plane = x.height * x.width;
                let scale = 1.0 / plane as f32;
                let mut dx = Tensor::zeros(x.batch, x.channels, x.height, x.width);
                for n in 0..x.batch {
                    for c in 0..x.channels {
                        let g = dy.data[n * x.channels + c] * scale;
                        let base = (n * x.channels + c) * plane;
                        for v in &mut dx.data[base..base + plane] {
                            *v = g;
                        }
                    }
                }
                add_grad(&mut dacts, node.inputs[0], dx);
            }
            LayerKind::Add => {
                for (i, &src) in node.inputs.iter().enumerate() {
                    if i + 1 == node.inputs.len() {
                        add_grad(&mut dacts, src, dy);
                        break;
                    }
                    add_grad(&mut dacts, src, dy.clone());
                }
            }
            LayerKind::Concat => {
                let plane = dy.height * dy.width;
                let mut off = 0;
                for &src in &node.inputs {
                    let x = &pass.acts[&src];
                    let mut dx = Tensor::zeros(x.batch, x.channels, x.height, x.width);
                    for n in 0..dy.batch {
                        for c in 0..x.channels {
                            let from = (n * dy.channels + off + c) * plane;
                            let to = (n * x.channels + c) * plane;
                            dx.data[to..to + plane].copy_from_slice(&dy.data[from..from + plane]);
                        }
                    }
                    off += x.channels;
                    add_grad(&mut dacts, src, dx);
                }
            }
            LayerKind::ChannelSelect { mask } => {
                let x = &pass.acts[&node.inputs[0]];
                let plane = x.height * x.width;
                let kept: Vec<usize> =
                    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
                let mut dx = Tensor::zeros(x.batch, x.channels, x.height, x.width);
                for n in 0..dy.batch {
                    for (kc, &c) in kept.iter().enumerate() {
                        let from = (n * kept.len() + kc) * plane;
                        let to = (n * x.channels + c) * plane;
                        dx.data[to..to + plane].copy_from_slice(&dy.data[from..from + plane]);
                    }
                }
                add_grad(&mut dacts, node.inputs[0], dx);
            }
        }
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    dy: &Tensor,
    in_c: usize,
    out_c: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
    weight: &[f32],
    has_bias: bool,
) -> (Vec<f32>, Option<Vec<f32>>, Tensor) {
    let mut dw = vec![0.0f32; weight.len()];
    let mut db = if has_bias { Some(vec![0.0f32; out_c]) } else { None };
    let mut dx = Tensor::zeros(x.batch, in_c, x.height, x.width);
    for n in 0..x.batch {
        for o in 0..out_c {
            for oh in 0..dy.height {
                for ow in 0..dy.width {
                    let g = dy.at(n, o, oh, ow);
                    if let Some(db) = db.as_mut() {
                        db[o] += g;
                    }
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
                                dw[wbase + kh * kernel_w + kw] += g * x.data[xbase + iw as usize];
                                dx.data[xbase + iw as usize] += g * weight[wbase + kh * kernel_w + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}
