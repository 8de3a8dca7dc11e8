//! Correctness harness for the training engine: central finite differences
//! on every parameter against the analytic gradients.
//!
//! The differencing runs on an independent f64 re-evaluation of the
//! training-mode loss, with the perturbation applied in f64, so the oracle
//! noise floor sits far below the f32 engine's own rounding.

use std::collections::BTreeMap;

use crate::graph::{LayerKind, NetworkGraph, NodeId};
use crate::tensor::Tensor;
use crate::train::autodiff::{backward, forward_train, ParamGrad};
use crate::train::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// Half mean squared error against the one-hot target. Quadratic in the
    /// logits, so central differences are exact for linear models.
    SquaredError,
}

/// Mean loss over the batch plus the gradient w.r.t. the logits.
pub(crate) fn loss_and_grad(logits: &Tensor, labels: &[usize], kind: LossKind) -> (f64, Tensor) {
    let n = logits.batch;
    let classes = logits.channels;
    let mut dlogits = Tensor::zeros(n, classes, 1, 1);
    let mut loss = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits.data[s * classes..(s + 1) * classes];
        match kind {
            LossKind::SoftmaxCrossEntropy => {
                let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let sum: f64 = row.iter().map(|&z| ((z - m) as f64).exp()).sum();
                loss += sum.ln() + m as f64 - row[label] as f64;
                for c in 0..classes {
                    let p = (((row[c] - m) as f64).exp() / sum) as f32;
                    dlogits.data[s * classes + c] =
                        (p - if c == label { 1.0 } else { 0.0 }) / n as f32;
                }
            }
            LossKind::SquaredError => {
                for c in 0..classes {
                    let t = if c == label { 1.0 } else { 0.0 };
                    let d = row[c] - t;
                    loss += 0.5 * (d as f64) * (d as f64);
                    dlogits.data[s * classes + c] = d / n as f32;
                }
            }
        }
    }
    (loss / n as f64, dlogits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    ConvWeight,
    ConvBias,
    LinWeight,
    LinBias,
    Gamma,
    Beta,
}

struct ParamLayout {
    entries: Vec<(NodeId, Slot, usize, usize)>, // (node, slot, offset, len)
    total: usize,
}

fn layout(graph: &NetworkGraph) -> ParamLayout {
    let mut entries = Vec::new();
    let mut off = 0;
    for node in graph.nodes() {
        let mut push = |slot: Slot, len: usize| {
            entries.push((node.id, slot, off, len));
            off += len;
        };
        match &node.kind {
            LayerKind::Conv2D { weight, bias, .. } => {
                push(Slot::ConvWeight, weight.len());
                if let Some(b) = bias {
                    push(Slot::ConvBias, b.len());
                }
            }
            LayerKind::Linear { weight, bias, .. } => {
                push(Slot::LinWeight, weight.len());
                push(Slot::LinBias, bias.len());
            }
            LayerKind::BatchNorm { gamma, beta, .. } => {
                push(Slot::Gamma, gamma.len());
                push(Slot::Beta, beta.len());
            }
            _ => {}
        }
    }
    ParamLayout { entries, total: off }
}

fn flatten_params(graph: &NetworkGraph, lay: &ParamLayout) -> Vec<f64> {
    let mut out = vec![0.0f64; lay.total];
    for &(id, slot, off, _len) in &lay.entries {
        let node = graph.node(id).expect("layout node");
        let src: &[f32] = match (&node.kind, slot) {
            (LayerKind::Conv2D { weight, .. }, Slot::ConvWeight) => weight,
            (LayerKind::Conv2D { bias: Some(b), .. }, Slot::ConvBias) => b,
            (LayerKind::Linear { weight, .. }, Slot::LinWeight) => weight,
            (LayerKind::Linear { bias, .. }, Slot::LinBias) => bias,
            (LayerKind::BatchNorm { gamma, .. }, Slot::Gamma) => gamma,
            (LayerKind::BatchNorm { beta, .. }, Slot::Beta) => beta,
            _ => unreachable!("layout matches graph"),
        };
        for (i, &v) in src.iter().enumerate() {
            out[off + i] = v as f64;
        }
    }
    out
}

fn flatten_grads(
    grads: &BTreeMap<NodeId, ParamGrad>,
    lay: &ParamLayout,
) -> Vec<f64> {
    let mut out = vec![0.0f64; lay.total];
    for &(id, slot, off, _len) in &lay.entries {
        let Some(g) = grads.get(&id) else { continue };
        let src: &[f32] = match (g, slot) {
            (ParamGrad::Conv2D { weight, .. }, Slot::ConvWeight) => weight,
            (ParamGrad::Conv2D { bias: Some(b), .. }, Slot::ConvBias) => b,
            (ParamGrad::Linear { weight, .. }, Slot::LinWeight) => weight,
            (ParamGrad::Linear { bias, .. }, Slot::LinBias) => bias,
            (ParamGrad::BatchNorm { gamma, .. }, Slot::Gamma) => gamma,
            (ParamGrad::BatchNorm { beta, .. }, Slot::Beta) => beta,
            _ => unreachable!("gradient matches layout"),
        };
        for (i, &v) in src.iter().enumerate() {
            out[off + i] = v as f64;
        }
    }
    out
}

/// Central-difference gradient check with softmax cross-entropy.
pub fn gradient_check(
    graph: &NetworkGraph,
    input: &Tensor,
    labels: &[usize],
) -> Result<f64, TrainError> {
    gradient_check_with_loss(graph, input, labels, LossKind::SoftmaxCrossEntropy)
}

/// Compares analytic gradients against central finite differences
/// (step 1e-4) on every parameter; returns the maximum relative error.
///
/// The relative error of parameter `i` is `|a_i - n_i| / max(|a_i|, |n_i|,
/// 1e-3 * g_max)` where `g_max` is the largest gradient magnitude in the
/// graph; the floor keeps f32 round-off on vanishing gradients from
/// dominating the report. Intended for small graphs (a few thousand
/// parameters): cost is two loss evaluations per parameter.
pub fn gradient_check_with_loss(
    graph: &NetworkGraph,
    input: &Tensor,
    labels: &[usize],
    loss_kind: LossKind,
) -> Result<f64, TrainError> {
    const H: f64 = 1e-4;
    let lay = layout(graph);
    let pass = forward_train(graph, input)?;
    let (_, dlogits) = loss_and_grad(pass.logits(graph)?, labels, loss_kind);
    let grads = backward(graph, &pass, dlogits)?;
    let analytic = flatten_grads(&grads, &lay);

    let mut params = flatten_params(graph, &lay);
    let mut numeric = vec![0.0f64; lay.total];
    for i in 0..lay.total {
        let orig = params[i];
        params[i] = orig + H;
        let up = loss_f64(graph, &lay, &params, input, labels, loss_kind)?;
        params[i] = orig - H;
        let down = loss_f64(graph, &lay, &params, input, labels, loss_kind)?;
        params[i] = orig;
        numeric[i] = (up - down) / (2.0 * H);
    }

    let gmax = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let floor = 1e-3 * gmax;
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(&numeric) {
        let denom = a.abs().max(n.abs()).max(floor);
        if denom > 0.0 {
            worst = worst.max((a - n).abs() / denom);
        }
    }
    Ok(worst)
}

/// Smallest margin to a non-differentiable point along the training-mode
/// forward pass: distance of any ReLU input to zero and any max-pool window
/// runner-up to its maximum. Finite differencing is only trustworthy on
/// inputs where this margin comfortably exceeds the step size; the test
/// harness uses it to pick fixtures.
pub fn kink_margin(graph: &NetworkGraph, input: &Tensor) -> Result<f64, TrainError> {
    let pass = forward_train(graph, input)?;
    let mut margin = f64::INFINITY;
    for node in graph.nodes() {
        match &node.kind {
            LayerKind::ReLU => {
                let x = &pass.acts[&node.inputs[0]];
                for &v in &x.data {
                    margin = margin.min(v.abs() as f64);
                }
            }
            LayerKind::MaxPool { kernel, stride } => {
                let x = &pass.acts[&node.inputs[0]];
                let out_h = (x.height - kernel) / stride + 1;
                let out_w = (x.width - kernel) / stride + 1;
                for n in 0..x.batch {
                    for c in 0..x.channels {
                        for oh in 0..out_h {
                            for ow in 0..out_w {
                                let mut best = f32::NEG_INFINITY;
                                let mut second = f32::NEG_INFINITY;
                                for kh in 0..*kernel {
                                    for kw in 0..*kernel {
                                        let v = x.at(n, c, oh * stride + kh, ow * stride + kw);
                                        if v > best {
                                            second = best;
                                            best = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                }
                                // Ties among non-positive values are inert:
                                // an upstream ReLU already blocks their
                                // gradient, so re-routing the argmax between
                                // them changes nothing.
                                if second.is_finite() && best > 0.0 {
                                    margin = margin.min((best - second) as f64);
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(margin)
}

/// f64 re-evaluation of the training-mode loss with parameters taken from a
/// flat override vector. Structure comes from the graph; weights do not.
fn loss_f64(
    graph: &NetworkGraph,
    lay: &ParamLayout,
    params: &[f64],
    input: &Tensor,
    labels: &[usize],
    loss_kind: LossKind,
) -> Result<f64, TrainError> {
    struct Act {
        data: Vec<f64>,
        c: usize,
        h: usize,
        w: usize,
    }
    let batch = input.batch;
    let plane_of = |a: &Act| a.h * a.w;

    let mut slot_of: BTreeMap<(NodeId, u8), (usize, usize)> = BTreeMap::new();
    for &(id, slot, off, len) in &lay.entries {
        slot_of.insert((id, slot_key(slot)), (off, len));
    }
    let fetch = |id: NodeId, slot: Slot| -> &[f64] {
        let (off, len) = slot_of[&(id, slot_key(slot))];
        &params[off..off + len]
    };

    let order = graph.topo_order().map_err(TrainError::from)?;
    let mut acts: BTreeMap<NodeId, Act> = BTreeMap::new();
    for id in order {
        let node = graph.node(id)?;
        let out = match &node.kind {
            LayerKind::Input => Act {
                data: input.data.iter().map(|&v| v as f64).collect(),
                c: input.channels,
                h: input.height,
                w: input.width,
            },
            LayerKind::Output => {
                let x = &acts[&node.inputs[0]];
                Act { data: x.data.clone(), c: x.c, h: x.h, w: x.w }
            }
            LayerKind::Conv2D {
                in_channels, out_channels, kernel_h, kernel_w, stride, padding, bias, ..
            } => {
                let x = &acts[&node.inputs[0]];
                let weight = fetch(id, Slot::ConvWeight);
                let b = bias.as_ref().map(|_| fetch(id, Slot::ConvBias));
                let out_h = (x.h + 2 * padding - kernel_h) / stride + 1;
                let out_w = (x.w + 2 * padding - kernel_w) / stride + 1;
                let mut data = vec![0.0f64; batch * out_channels * out_h * out_w];
                for n in 0..batch {
                    for o in 0..*out_channels {
                        for oh in 0..out_h {
                            for ow in 0..out_w {
                                let mut acc = b.map_or(0.0, |b| b[o]);
                                for i in 0..*in_channels {
                                    for kh in 0..*kernel_h {
                                        let ih = (oh * stride + kh) as isize - *padding as isize;
                                        if ih < 0 || ih >= x.h as isize {
                                            continue;
                                        }
                                        for kw in 0..*kernel_w {
                                            let iw =
                                                (ow * stride + kw) as isize - *padding as isize;
                                            if iw < 0 || iw >= x.w as isize {
                                                continue;
                                            }
                                            let xi = ((n * x.c + i) * x.h + ih as usize) * x.w
                                                + iw as usize;
                                            let wi = ((o * in_channels + i) * kernel_h + kh)
                                                * kernel_w
                                                + kw;
                                            acc += weight[wi] * x.data[xi];
                                        }
                                    }
                                }
                                data[((n * out_channels + o) * out_h + oh) * out_w + ow] = acc;
                            }
                        }
                    }
                }
                Act { data, c: *out_channels, h: out_h, w: out_w }
            }
            LayerKind::Linear { in_features, out_features, .. } => {
                let x = &acts[&node.inputs[0]];
                let weight = fetch(id, Slot::LinWeight);
                let b = fetch(id, Slot::LinBias);
                let mut data = vec![0.0f64; batch * out_features];
                for n in 0..batch {
                    let xs = &x.data[n * in_features..(n + 1) * in_features];
                    for o in 0..*out_features {
                        let row = &weight[o * in_features..(o + 1) * in_features];
                        data[n * out_features + o] =
                            b[o] + row.iter().zip(xs).map(|(w, v)| w * v).sum::<f64>();
                    }
                }
                Act { data, c: *out_features, h: 1, w: 1 }
            }
            LayerKind::BatchNorm { channels, eps, .. } => {
                let x = &acts[&node.inputs[0]];
                let gamma = fetch(id, Slot::Gamma);
                let beta = fetch(id, Slot::Beta);
                let plane = plane_of(x);
                let count = (batch * plane) as f64;
                let mut data = vec![0.0f64; x.data.len()];
                for c in 0..*channels {
                    let mut sum = 0.0;
                    for n in 0..batch {
                        let base = (n * x.c + c) * plane;
                        sum += x.data[base..base + plane].iter().sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for n in 0..batch {
                        let base = (n * x.c + c) * plane;
                        sq += x.data[base..base + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let inv = 1.0 / (sq / count + *eps as f64).sqrt();
                    for n in 0..batch {
                        let base = (n * x.c + c) * plane;
                        for i in base..base + plane {
                            data[i] = gamma[c] * (x.data[i] - mean) * inv + beta[c];
                        }
                    }
                }
                Act { data, c: x.c, h: x.h, w: x.w }
            }
            LayerKind::ReLU => {
                let x = &acts[&node.inputs[0]];
                Act {
                    data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                    c: x.c,
                    h: x.h,
                    w: x.w,
                }
            }
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                let is_max = matches!(node.kind, LayerKind::MaxPool { .. });
                let x = &acts[&node.inputs[0]];
                let out_h = (x.h - kernel) / stride + 1;
                let out_w = (x.w - kernel) / stride + 1;
                let mut data = vec![0.0f64; batch * x.c * out_h * out_w];
                for n in 0..batch {
                    for c in 0..x.c {
                        for oh in 0..out_h {
                            for ow in 0..out_w {
                                let mut best = f64::NEG_INFINITY;
                                let mut sum = 0.0;
                                for kh in 0..*kernel {
                                    for kw in 0..*kernel {
                                        let v = x.data[((n * x.c + c) * x.h + oh * stride + kh)
                                            * x.w
                                            + ow * stride
                                            + kw];
                                        best = best.max(v);
                                        sum += v;
                                    }
                                }
                                data[((n * x.c + c) * out_h + oh) * out_w + ow] = if is_max {
                                    best
                                } else {
                                    sum / (kernel * kernel) as f64
                                };
                            }
                        }
                    }
                }
                Act { data, c: x.c, h: out_h, w: out_w }
            }
            LayerKind::GlobalAvgPool => {
                let x = &acts[&node.inputs[0]];
                let plane = plane_of(x);
                let mut data = vec![0.0f64; batch * x.c];
                for n in 0..batch {
                    for c in 0..x.c {
                        let base = (n * x.c + c) * plane;
                        data[n * x.c + c] =
                            x.data[base..base + plane].iter().sum::<f64>() / plane as f64;
                    }
                }
                Act { data, c: x.c, h: 1, w: 1 }
            }
            LayerKind::Add => {
                let first = &acts[&node.inputs[0]];
                let mut data = first.data.clone();
                for src in &node.inputs[1..] {
                    for (a, b) in data.iter_mut().zip(&acts[src].data) {
                        *a += b;
                    }
                }
                Act { data, c: first.c, h: first.h, w: first.w }
            }
            LayerKind::Concat => {
                let first = &acts[&node.inputs[0]];
                let total_c: usize = node.inputs.iter().map(|i| acts[i].c).sum();
                let plane = plane_of(first);
                let mut data = vec![0.0f64; batch * total_c * plane];
                for n in 0..batch {
                    let mut off = 0;
                    for src in &node.inputs {
                        let x = &acts[src];
                        for c in 0..x.c {
                            let from = (n * x.c + c) * plane;
                            let to = (n * total_c + off + c) * plane;
                            data[to..to + plane].copy_from_slice(&x.data[from..from + plane]);
                        }
                        off += x.c;
                    }
                }
                Act { data, c: total_c, h: first.h, w: first.w }
            }
            LayerKind::ChannelSelect { mask } => {
                let x = &acts[&node.inputs[0]];
                let plane = plane_of(x);
                let kept: Vec<usize> =
                    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
                let mut data = vec![0.0f64; batch * kept.len() * plane];
                for n in 0..batch {
                    for (kc, &c) in kept.iter().enumerate() {
                        let from = (n * x.c + c) * plane;
                        let to = (n * kept.len() + kc) * plane;
                        data[to..to + plane].copy_from_slice(&x.data[from..from + plane]);
                    }
                }
                Act { data, c: kept.len(), h: x.h, w: x.w }
            }
        };
        acts.insert(id, out);
    }

    let out = &acts[&graph.output_node()?];
    let classes = out.c;
    let mut loss = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        let row = &out.data[s * classes..(s + 1) * classes];
        match loss_kind {
            LossKind::SoftmaxCrossEntropy => {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&z| (z - m).exp()).sum();
                loss += sum.ln() + m - row[label];
            }
            LossKind::SquaredError => {
                for c in 0..classes {
                    let t = if c == label { 1.0 } else { 0.0 };
                    loss += 0.5 * (row[c] - t) * (row[c] - t);
                }
            }
        }
    }
    Ok(loss / batch as f64)
}

fn slot_key(s: Slot) -> u8 {
    match s {
        Slot::ConvWeight => 0,
        Slot::ConvBias => 1,
        Slot::LinWeight => 2,
        Slot::LinBias => 3,
        Slot::Gamma => 4,
        Slot::Beta => 5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_preset, LayerKind, NetworkGraph, Preset};
    use crate::rng::substream;
    use rand::Rng;

    fn random_input(shape: (usize, usize, usize), batch: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = substream(seed, "gradcheck_input");
        let (c, h, w) = shape;
        let data: Vec<f32> = (0..batch * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..4)).collect();
        (Tensor::from_vec(batch, c, h, w, data), labels)
    }

    #[test]
    fn toy_mlp_gradients_match_finite_differences() {
        let g = build_preset(Preset::ToyMlp, 4, 5);
        let (input, labels) = random_input(g.input_shape, 3, 5);
        let err = gradient_check(&g, &input, &labels).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn single_linear_with_quadratic_loss_is_exact() {
        let mut g = NetworkGraph::new((2, 1, 1));
        let input = g.add_node("input", LayerKind::Input, &[]);
        let fc = g.add_node(
            "fc",
            LayerKind::Linear {
                in_features: 2,
                out_features: 3,
                weight: vec![0.7, -0.3, 0.2, 0.9, -0.5, 0.4],
                bias: vec![0.1, -0.2, 0.3],
            },
            &[input],
        );
        g.add_node("output", LayerKind::Output, &[fc]);
        let x = Tensor::from_vec(2, 2, 1, 1, vec![0.8, -0.6, 0.3, 1.1]);
        let err = gradient_check_with_loss(&g, &x, &[2, 0], LossKind::SquaredError).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn batch_norm_in_training_mode_checks_out() {
        let g = build_preset(Preset::ToyCnn, 4, 9);
        let (input, labels) = random_input(g.input_shape, 4, 9);
        let err = gradient_check(&g, &input, &labels).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }
}
