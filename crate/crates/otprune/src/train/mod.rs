//! Training engine: SGD with Nesterov momentum, weight decay on conv/linear
//! weights, and an L1 subgradient on every batch-norm scale when sparsity
//! training is active. Deterministic given the seed.

mod autodiff;
mod check;

pub use check::{gradient_check, gradient_check_with_loss, kink_margin, LossKind};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, SplitData};
use crate::graph::{GraphError, LayerKind, NetworkGraph, NodeId};
use crate::rng::substream;
use crate::tensor::Tensor;
use autodiff::{backward, forward_train, Gradients, ParamGrad};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    SparseTrain,
    FineTune,
    TrainFromScratch,
}

/// Learning-rate schedule: an initial rate plus `(epoch, factor)` decay
/// steps. The rate at epoch `e` is the initial rate times every factor whose
/// step epoch is `<= e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn flat(lr: f64) -> Self {
        LrSchedule { initial: lr, steps: Vec::new() }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.initial;
        for &(at, factor) in &self.steps {
            if epoch >= at {
                lr *= factor;
            }
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// L1 coefficient on batch-norm scales.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    /// Nesterov momentum coefficient.
    pub momentum: f64,
    /// L2 coefficient on conv/linear weights.
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Pad-4 random crop and horizontal mirror on training batches.
    pub augment: bool,
    /// Also apply weight decay to batch-norm scales. Off by default; the L1
    /// penalty is the only force on the scales then.
    pub decay_bn_gamma: bool,
}

impl TrainConfig {
    /// CIFAR-scale sparsity-training setup: 160 epochs at batch 64, initial
    /// rate 0.1 decayed tenfold at epochs 80 and 120, momentum 0.9, weight
    /// decay 1e-4.
    pub fn paper_defaults(lambda: f64, seed: u64) -> Self {
        TrainConfig {
            lambda,
            epochs: 160,
            batch_size: 64,
            lr_schedule: LrSchedule { initial: 0.1, steps: vec![(80, 0.1), (120, 0.1)] },
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
            mode: TrainMode::SparseTrain,
            augment: true,
            decay_bn_gamma: false,
        }
    }

    /// Scaled-down schedule for the toy presets: 40 epochs, tenfold decay at
    /// 20 and 30, batch 32. The extra settle epochs at the smallest rate let
    /// the dead scales ring down to a tight negligible mode.
    pub fn toy_defaults(lambda: f64, seed: u64) -> Self {
        TrainConfig {
            lambda,
            epochs: 40,
            batch_size: 32,
            lr_schedule: LrSchedule { initial: 0.1, steps: vec![(20, 0.1), (30, 0.1)] },
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
            mode: TrainMode::SparseTrain,
            augment: false,
            decay_bn_gamma: false,
        }
    }

    /// Recovery setup: flat rate 1e-3, no sparsity penalty.
    pub fn fine_tune_defaults(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            lambda: 0.0,
            epochs,
            batch_size: 32,
            lr_schedule: LrSchedule::flat(1e-3),
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
            mode: TrainMode::FineTune,
            augment: false,
            decay_bn_gamma: false,
        }
    }

    pub fn check(&self) -> Result<(), TrainError> {
        if self.lambda < 0.0 {
            return Err(TrainError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr_schedule.initial > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.lr_schedule.initial
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.mode == TrainMode::FineTune && self.lambda != 0.0 {
            return Err(TrainError::InvalidConfig("fine_tune mode forces lambda = 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    /// lambda * sum of |gamma| over every batch-norm scale, at epoch end.
    pub l1_penalty: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSnapshot {
    pub node: NodeId,
    pub name: String,
    pub gamma: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub final_gammas: Vec<GammaSnapshot>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,l1_penalty,test_acc\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.l1_penalty, r.test_acc));
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Minimizes cross-entropy plus `lambda * sum |gamma|` with SGD. Returns the
/// trained graph and the per-epoch trace. Bit-deterministic for identical
/// `(graph, data, cfg)`.
pub fn train(
    graph: &NetworkGraph,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(NetworkGraph, TrainTrace), TrainError> {
    cfg.check()?;
    let violations = crate::graph::validate(graph);
    if !violations.is_empty() {
        return Err(TrainError::InvalidGraph(violations[0].to_string()));
    }
    let mut g = graph.clone();
    let mut momentum: BTreeMap<NodeId, ParamGrad> = BTreeMap::new();
    let mut order_rng = substream(cfg.seed, "data_order");
    let mut aug_rng = substream(cfg.seed, "augmentation");
    let mut trace = TrainTrace::default();

    let lambda_active = if cfg.mode == TrainMode::SparseTrain { cfg.lambda } else { 0.0 };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.lr_at(epoch);
        let mut indices: Vec<usize> = (0..data.train.len()).collect();
        indices.shuffle(&mut order_rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let (mut images, labels) = data.train.batch(chunk);
            if cfg.augment {
                augment_in_place(&mut images, &mut aug_rng);
            }
            let pass = forward_train(&g, &images)?;
            let logits = pass.logits(&g)?;
            let (loss, dlogits) = check::loss_and_grad(logits, &labels, LossKind::SoftmaxCrossEntropy);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
            let grads = backward(&g, &pass, dlogits)?;
            apply_sgd_step(&mut g, &grads, &mut momentum, cfg, lr, lambda_active);
            update_running_stats(&mut g, &pass);
        }
        trace.rows.push(TraceRow {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            l1_penalty: cfg.lambda * gamma_l1_sum(&g),
            test_acc: evaluate_accuracy(&g, &data.test)?,
        });
    }

    trace.final_gammas = gamma_snapshot(&g);
    Ok((g, trace))
}

/// Recovery training: the same engine with the sparsity penalty off and a
/// flat learning rate, reporting accuracy after every epoch.
pub fn fine_tune(
    graph: &NetworkGraph,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(NetworkGraph, TrainTrace), TrainError> {
    let mut c = cfg.clone();
    c.mode = TrainMode::FineTune;
    c.lambda = 0.0;
    c.lr_schedule.steps.clear();
    train(graph, data, &c)
}

/// Classification accuracy (percent) of inference-mode forward on a split.
pub fn evaluate_accuracy(graph: &NetworkGraph, split: &SplitData) -> Result<f64, GraphError> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..split.len()).collect();
    for chunk in all.chunks(128) {
        let (images, labels) = split.batch(chunk);
        let logits = graph.forward(&images)?;
        let classes = logits.channels;
        for (n, &label) in labels.iter().enumerate() {
            let row = &logits.data[n * classes..(n + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty logits");
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

/// Sum of |gamma| over every batch-norm scale, in f64.
pub fn gamma_l1_sum(graph: &NetworkGraph) -> f64 {
    graph
        .bn_nodes()
        .iter()
        .map(|&id| {
            graph
                .bn_gamma(id)
                .expect("bn node")
                .iter()
                .map(|&g| g.abs() as f64)
                .sum::<f64>()
        })
        .sum()
}

pub fn gamma_snapshot(graph: &NetworkGraph) -> Vec<GammaSnapshot> {
    graph
        .bn_nodes()
        .iter()
        .map(|&id| {
            let node = graph.node(id).expect("bn node");
            GammaSnapshot {
                node: id,
                name: node.name.clone(),
                gamma: graph.bn_gamma(id).expect("bn node").to_vec(),
            }
        })
        .collect()
}

fn apply_sgd_step(
    g: &mut NetworkGraph,
    grads: &Gradients,
    momentum: &mut BTreeMap<NodeId, ParamGrad>,
    cfg: &TrainConfig,
    lr: f64,
    lambda: f64,
) {
    let lr = lr as f32;
    let mu = cfg.momentum as f32;
    let wd = cfg.weight_decay as f32;
    let lam = lambda as f32;
    let gamma_wd = if cfg.decay_bn_gamma { wd } else { 0.0 };

    let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id).collect();
    for id in ids {
        let Some(grad) = grads.get(&id) else { continue };
        let buf = momentum.entry(id).or_insert_with(|| zero_like(grad));
        let node = g.node_mut(id).expect("node exists");
        match (&mut node.kind, grad, buf) {
            (
                LayerKind::Conv2D { weight, bias, .. },
                ParamGrad::Conv2D { weight: gw, bias: gb },
                ParamGrad::Conv2D { weight: bw, bias: bb },
            ) => {
                sgd_slice(weight, gw, bw, lr, mu, wd, |_, _| 0.0);
                if let (Some(bias), Some(gb), Some(bb)) = (bias.as_mut(), gb.as_ref(), bb.as_mut()) {
                    sgd_slice(bias, gb, bb, lr, mu, 0.0, |_, _| 0.0);
                }
            }
            (
                LayerKind::Linear { weight, bias, .. },
                ParamGrad::Linear { weight: gw, bias: gb },
                ParamGrad::Linear { weight: bw, bias: bb },
            ) => {
                sgd_slice(weight, gw, bw, lr, mu, wd, |_, _| 0.0);
                sgd_slice(bias, gb, bb, lr, mu, 0.0, |_, _| 0.0);
            }
            (
                LayerKind::BatchNorm { gamma, beta, .. },
                ParamGrad::BatchNorm { gamma: gg, beta: gb },
                ParamGrad::BatchNorm { gamma: bg, beta: bb },
            ) => {
                // L1 subgradient with sign(0) = 0 rides on the task gradient
                // and through the momentum buffer.
                sgd_slice(gamma, gg, bg, lr, mu, gamma_wd, |_, p| {
                    if p > 0.0 {
                        lam
                    } else if p < 0.0 {
                        -lam
                    } else {
                        0.0
                    }
                });
                sgd_slice(beta, gb, bb, lr, mu, 0.0, |_, _| 0.0);
            }
            _ => unreachable!("gradient kind matches node kind"),
        }
    }
}

fn sgd_slice(
    param: &mut [f32],
    grad: &[f32],
    buf: &mut [f32],
    lr: f32,
    mu: f32,
    wd: f32,
    extra: impl Fn(usize, f32) -> f32,
) {
    for i in 0..param.len() {
        let mut d = grad[i] + wd * param[i] + extra(i, param[i]);
        buf[i] = mu * buf[i] + d;
        d += mu * buf[i];
        param[i] -= lr * d;
    }
}

fn zero_like(g: &ParamGrad) -> ParamGrad {
    match g {
        ParamGrad::Conv2D { weight, bias } => ParamGrad::Conv2D {
            weight: vec![0.0; weight.len()],
            bias: bias.as_ref().map(|b| vec![0.0; b.len()]),
        },
        ParamGrad::Linear { weight, bias } => {
            ParamGrad::Linear { weight: vec![0.0; weight.len()], bias: vec![0.0; bias.len()] }
        }
        ParamGrad::BatchNorm { gamma, beta } => {
            ParamGrad::BatchNorm { gamma: vec![0.0; gamma.len()], beta: vec![0.0; beta.len()] }
        }
    }
}

fn update_running_stats(g: &mut NetworkGraph, pass: &autodiff::TrainPass) {
    const MOMENTUM: f32 = 0.1;
    let ids: Vec<NodeId> = pass.bn_stats.keys().copied().collect();
    for id in ids {
        let stats = &pass.bn_stats[&id];
        let node = g.node_mut(id).expect("bn node");
        let LayerKind::BatchNorm { running_mean, running_var, .. } = &mut node.kind else {
            unreachable!()
        };
        let n = stats.count as f32;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..running_mean.len() {
            running_mean[c] = (1.0 - MOMENTUM) * running_mean[c] + MOMENTUM * stats.mean[c];
            running_var[c] =
                (1.0 - MOMENTUM) * running_var[c] + MOMENTUM * stats.var_biased[c] * unbias;
        }
    }
}

/// Pad-4 random crop plus horizontal mirror, drawn per sample.
fn augment_in_place(images: &mut Tensor, rng: &mut impl Rng) {
    const PAD: usize = 4;
    let (c, h, w) = images.feature_shape();
    let mut out = images.clone();
    for n in 0..images.batch {
        let dy = rng.gen_range(0..=2 * PAD);
        let dx = rng.gen_range(0..=2 * PAD);
        let flip: bool = rng.gen();
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy as isize - PAD as isize;
                    let sx = x as isize + dx as isize - PAD as isize;
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                        images.at(n, ci, sy as usize, sx)
                    };
                    *out.at_mut(n, ci, y, x) = v;
                }
            }
        }
    }
    *images = out;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::graph::{build_preset, Preset};

    #[test]
    fn zero_epochs_is_a_no_op() {
        let g = build_preset(Preset::ToyCnn, 4, 1);
        let data = make_synthetic(4, 10, 8, 1);
        let mut cfg = TrainConfig::toy_defaults(0.0, 1);
        cfg.epochs = 0;
        let (out, trace) = train(&g, &data, &cfg).unwrap();
        assert_eq!(g, out);
        assert!(trace.rows.is_empty());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let g = build_preset(Preset::ToyCnn, 4, 2);
        let data = make_synthetic(4, 12, 8, 2);
        let mut cfg = TrainConfig::toy_defaults(1e-3, 3);
        cfg.epochs = 2;
        let (a, ta) = train(&g, &data, &cfg).unwrap();
        let (b, tb) = train(&g, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn trace_length_equals_epochs_and_penalty_matches_snapshot() {
        let g = build_preset(Preset::ToyCnn, 4, 2);
        let data = make_synthetic(4, 12, 8, 2);
        let mut cfg = TrainConfig::toy_defaults(1e-2, 3);
        cfg.epochs = 3;
        let (_, trace) = train(&g, &data, &cfg).unwrap();
        assert_eq!(trace.rows.len(), 3);
        let recomputed: f64 = trace
            .final_gammas
            .iter()
            .flat_map(|s| s.gamma.iter())
            .map(|&g| g.abs() as f64)
            .sum::<f64>()
            * cfg.lambda;
        let reported = trace.rows.last().unwrap().l1_penalty;
        assert!(
            (reported - recomputed).abs() <= 1e-6 * recomputed.max(1e-12),
            "reported {reported}, recomputed {recomputed}"
        );
    }

    #[test]
    fn fine_tune_rejects_nonzero_lambda_via_config_check() {
        let mut cfg = TrainConfig::fine_tune_defaults(1, 1);
        cfg.lambda = 0.5;
        assert!(cfg.check().is_err());
    }

    #[test]
    fn lr_schedule_applies_factors() {
        let s = LrSchedule { initial: 0.1, steps: vec![(2, 0.1), (4, 0.1)] };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(2), 0.1 * 0.1);
        assert!((s.lr_at(4) - 0.001).abs() < 1e-12);
    }
}
