//! Reference architectures.
//!
//! The three CIFAR-scale presets follow the canonical VGG/ResNet/DenseNet
//! definitions with the usual 32x32 modifications: the first convolution is
//! 3x3 with stride 1 and padding 1, and the stem max-pool is dropped.
//! VGG-14 is VGG-16 with the three fully-connected layers replaced by a
//! single one and a batch-norm layer in front of every ReLU. The two toy
//! presets exist for fast experiments and the training-engine test harness.
//!
//! Batch-norm scales initialize to 0.5, shifts to 0, running statistics to
//! (0, 1). Conv/linear weights draw from a zero-mean uniform distribution
//! scaled by the inverse square root of fan-in; biases start at 0.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LayerKind, NetworkGraph, NodeId};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "vgg14")]
    Vgg14,
    #[serde(rename = "resnet50_cifar")]
    Resnet50Cifar,
    #[serde(rename = "densenet121_cifar")]
    Densenet121Cifar,
    #[serde(rename = "toy_cnn")]
    ToyCnn,
    #[serde(rename = "toy_mlp")]
    ToyMlp,
}

#[derive(Debug, Error)]
#[error("unknown preset `{0}` (expected vgg14, resnet50_cifar, densenet121_cifar, toy_cnn, or toy_mlp)")]
pub struct PresetError(pub String);

impl FromStr for Preset {
    type Err = PresetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vgg14" => Ok(Preset::Vgg14),
            "resnet50_cifar" => Ok(Preset::Resnet50Cifar),
            "densenet121_cifar" => Ok(Preset::Densenet121Cifar),
            "toy_cnn" => Ok(Preset::ToyCnn),
            "toy_mlp" => Ok(Preset::ToyMlp),
            other => Err(PresetError(other.to_string())),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Preset::Vgg14 => "vgg14",
            Preset::Resnet50Cifar => "resnet50_cifar",
            Preset::Densenet121Cifar => "densenet121_cifar",
            Preset::ToyCnn => "toy_cnn",
            Preset::ToyMlp => "toy_mlp",
        };
        f.write_str(s)
    }
}

/// Builds a freshly initialized architecture. Deterministic in `seed`
/// (weights come from the `init` substream).
pub fn build_preset(preset: Preset, num_classes: usize, seed: u64) -> NetworkGraph {
    let mut rng = substream(seed, "init");
    match preset {
        Preset::Vgg14 => vgg14(num_classes, &mut rng),
        Preset::Resnet50Cifar => resnet50_cifar(num_classes, &mut rng),
        Preset::Densenet121Cifar => densenet121_cifar(num_classes, &mut rng),
        Preset::ToyCnn => toy_cnn(num_classes, &mut rng),
        Preset::ToyMlp => toy_mlp(num_classes, &mut rng),
    }
}

struct Builder<'r> {
    g: NetworkGraph,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Builder<'r> {
    fn new(input_shape: (usize, usize, usize), rng: &'r mut ChaCha8Rng) -> (Self, NodeId) {
        let mut g = NetworkGraph::new(input_shape);
        let input = g.add_node("input", LayerKind::Input, &[]);
        (Builder { g, rng }, input)
    }

    fn uniform_fan_in(&mut self, n: usize, fan_in: usize) -> Vec<f32> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
    }

    fn conv(
        &mut self,
        name: impl Into<String>,
        from: NodeId,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> NodeId {
        let fan_in = in_c * k * k;
        let weight = self.uniform_fan_in(out_c * fan_in, fan_in);
        let kind = LayerKind::Conv2D {
            in_channels: in_c,
            out_channels: out_c,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding,
            weight,
            bias: bias.then(|| vec![0.0; out_c]),
        };
        self.g.add_node(name, kind, &[from])
    }

    fn bn(&mut self, name: impl Into<String>, from: NodeId, c: usize) -> NodeId {
        let kind = LayerKind::BatchNorm {
            channels: c,
            gamma: vec![0.5; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: 1e-5,
        };
        self.g.add_node(name, kind, &[from])
    }

    fn relu(&mut self, name: impl Into<String>, from: NodeId) -> NodeId {
        self.g.add_node(name, LayerKind::ReLU, &[from])
    }

    fn linear(&mut self, name: impl Into<String>, from: NodeId, in_f: usize, out_f: usize) -> NodeId {
        let weight = self.uniform_fan_in(in_f * out_f, in_f);
        let kind = LayerKind::Linear {
            in_features: in_f,
            out_features: out_f,
            weight,
            bias: vec![0.0; out_f],
        };
        self.g.add_node(name, kind, &[from])
    }

    fn finish(mut self, last: NodeId) -> NetworkGraph {
        self.g.add_node("output", LayerKind::Output, &[last]);
        self.g
    }
}

fn vgg14(num_classes: usize, rng: &mut ChaCha8Rng) -> NetworkGraph {
    const PLAN: &[usize] = &[64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    let (mut b, input) = Builder::new((3, 32, 32), rng);
    let mut x = input;
    let mut in_c = 3;
    let mut conv_i = 0;
    let mut pool_i = 0;
    for &c in PLAN {
        if c == 0 {
            pool_i += 1;
            x = b.g.add_node(format!("pool{pool_i}"), LayerKind::MaxPool { kernel: 2, stride: 2 }, &[x]);
        } else {
            conv_i += 1;
            x = b.conv(format!("conv{conv_i}"), x, in_c, c, 3, 1, 1, true);
            x = b.bn(format!("bn{conv_i}"), x, c);
            x = b.relu(format!("relu{conv_i}"), x);
            in_c = c;
        }
    }
    let fc = b.linear("fc", x, 512, num_classes);
    b.finish(fc)
}

fn resnet50_cifar(num_classes: usize, rng: &mut ChaCha8Rng) -> NetworkGraph {
    let (mut b, input) = Builder::new((3, 32, 32), rng);
    let mut x = b.conv("stem_conv", input, 3, 64, 3, 1, 1, false);
    x = b.bn("stem_bn", x, 64);
    x = b.relu("stem_relu", x);
    let mut in_c = 64;
    // (mid channels, block count, first-block stride) per stage; out = 4 * mid.
    let stages: [(usize, usize, usize); 4] = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];
    for (s, &(mid, blocks, stride0)) in stages.iter().enumerate() {
        for blk in 0..blocks {
            let p = format!("l{}b{}", s + 1, blk + 1);
            let stride = if blk == 0 { stride0 } else { 1 };
            let out_c = mid * 4;
            // Downsample stride sits on the first 1x1 convolution.
            let mut t = b.conv(format!("{p}_conv1"), x, in_c, mid, 1, stride, 0, false);
            t = b.bn(format!("{p}_bn1"), t, mid);
            t = b.relu(format!("{p}_relu1"), t);
            t = b.conv(format!("{p}_conv2"), t, mid, mid, 3, 1, 1, false);
            t = b.bn(format!("{p}_bn2"), t, mid);
            t = b.relu(format!("{p}_relu2"), t);
            t = b.conv(format!("{p}_conv3"), t, mid, out_c, 1, 1, 0, false);
            t = b.bn(format!("{p}_bn3"), t, out_c);
            let skip = if stride != 1 || in_c != out_c {
                let d = b.conv(format!("{p}_down_conv"), x, in_c, out_c, 1, stride, 0, false);
                b.bn(format!("{p}_down_bn"), d, out_c)
            } else {
                x
            };
            let add = b.g.add_node(format!("{p}_add"), LayerKind::Add, &[skip, t]);
            x = b.relu(format!("{p}_relu3"), add);
            in_c = out_c;
        }
    }
    let gap = b.g.add_node("gap", LayerKind::GlobalAvgPool, &[x]);
    let fc = b.linear("fc", gap, in_c, num_classes);
    b.finish(fc)
}

fn densenet121_cifar(num_classes: usize, rng: &mut ChaCha8Rng) -> NetworkGraph {
    const GROWTH: usize = 32;
    const BN_SIZE: usize = 4;
    const BLOCKS: [usize; 4] = [6, 12, 24, 16];
    let (mut b, input) = Builder::new((3, 32, 32), rng);
    let mut x = b.conv("stem_conv", input, 3, 2 * GROWTH, 3, 1, 1, false);
    x = b.bn("stem_bn", x, 2 * GROWTH);
    x = b.relu("stem_relu", x);
    let mut c = 2 * GROWTH;
    for (bi, &layers) in BLOCKS.iter().enumerate() {
        for li in 0..layers {
            let p = format!("db{}l{}", bi + 1, li + 1);
            let mid = BN_SIZE * GROWTH;
            let mut t = b.bn(format!("{p}_bn1"), x, c);
            t = b.relu(format!("{p}_relu1"), t);
            t = b.conv(format!("{p}_conv1"), t, c, mid, 1, 1, 0, false);
            t = b.bn(format!("{p}_bn2"), t, mid);
            t = b.relu(format!("{p}_relu2"), t);
            t = b.conv(format!("{p}_conv2"), t, mid, GROWTH, 3, 1, 1, false);
            x = b.g.add_node(format!("{p}_concat"), LayerKind::Concat, &[x, t]);
            c += GROWTH;
        }
        if bi + 1 < BLOCKS.len() {
            let p = format!("t{}", bi + 1);
            let mut t = b.bn(format!("{p}_bn"), x, c);
            t = b.relu(format!("{p}_relu"), t);
            c /= 2;
            t = b.conv(format!("{p}_conv"), t, c * 2, c, 1, 1, 0, false);
            x = b.g.add_node(format!("{p}_pool"), LayerKind::AvgPool { kernel: 2, stride: 2 }, &[t]);
        }
    }
    x = b.bn("final_bn", x, c);
    x = b.relu("final_relu", x);
    let gap = b.g.add_node("gap", LayerKind::GlobalAvgPool, &[x]);
    let fc = b.linear("fc", gap, c, num_classes);
    b.finish(fc)
}

fn toy_cnn(num_classes: usize, rng: &mut ChaCha8Rng) -> NetworkGraph {
    let (mut b, input) = Builder::new((3, 8, 8), rng);
    let mut x = b.conv("conv1", input, 3, 8, 3, 1, 1, true);
    x = b.bn("bn1", x, 8);
    x = b.relu("relu1", x);
    x = b.conv("conv2", x, 8, 16, 3, 1, 1, true);
    x = b.bn("bn2", x, 16);
    x = b.relu("relu2", x);
    x = b.g.add_node("pool1", LayerKind::MaxPool { kernel: 2, stride: 2 }, &[x]);
    x = b.conv("conv3", x, 16, 16, 3, 1, 1, true);
    x = b.bn("bn3", x, 16);
    x = b.relu("relu3", x);
    let gap = b.g.add_node("gap", LayerKind::GlobalAvgPool, &[x]);
    let fc = b.linear("fc", gap, 16, num_classes);
    b.finish(fc)
}

fn toy_mlp(num_classes: usize, rng: &mut ChaCha8Rng) -> NetworkGraph {
    let (mut b, input) = Builder::new((3, 8, 8), rng);
    let h = b.linear("fc1", input, 3 * 8 * 8, 16);
    let r = b.relu("relu1", h);
    let fc = b.linear("fc2", r, 16, num_classes);
    b.finish(fc)
}

/// Fresh weights for an existing architecture: conv/linear from the fan-in
/// uniform scheme, biases zero, batch norms back to (0.5, 0, 0, 1). Used by
/// train-from-scratch recovery.
pub fn reinitialize(graph: &NetworkGraph, seed: u64) -> NetworkGraph {
    let mut rng = substream(seed, "init");
    let mut g = graph.clone();
    let ids: Vec<NodeId> = g.nodes().iter().map(|n| n.id).collect();
    for id in ids {
        match &mut g.node_mut(id).expect("node exists").kind {
            LayerKind::Conv2D { in_channels, kernel_h, kernel_w, weight, bias, .. } => {
                let fan_in = *in_channels * *kernel_h * *kernel_w;
                let bound = 1.0 / (fan_in as f32).sqrt();
                for w in weight.iter_mut() {
                    *w = rng.gen_range(-bound..bound);
                }
                if let Some(b) = bias {
                    b.fill(0.0);
                }
            }
            LayerKind::Linear { in_features, weight, bias, .. } => {
                let bound = 1.0 / (*in_features as f32).sqrt();
                for w in weight.iter_mut() {
                    *w = rng.gen_range(-bound..bound);
                }
                bias.fill(0.0);
            }
            LayerKind::BatchNorm { gamma, beta, running_mean, running_var, .. } => {
                gamma.fill(0.5);
                beta.fill(0.0);
                running_mean.fill(0.0);
                running_var.fill(1.0);
            }
            _ => {}
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate;

    #[test]
    fn toy_presets_are_valid_and_small() {
        for preset in [Preset::ToyCnn, Preset::ToyMlp] {
            let g = build_preset(preset, 4, 3);
            assert!(validate(&g).is_empty(), "{preset} invalid");
            assert!(g.param_count() <= 50_000, "{preset} too big: {}", g.param_count());
        }
    }

    #[test]
    fn presets_are_deterministic_in_seed() {
        let a = build_preset(Preset::ToyCnn, 4, 11);
        let b = build_preset(Preset::ToyCnn, 4, 11);
        let c = build_preset(Preset::ToyCnn, 4, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gamma_initializes_to_half() {
        let g = build_preset(Preset::ToyCnn, 4, 5);
        for id in g.bn_nodes() {
            assert!(g.bn_gamma(id).unwrap().iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn cifar_presets_validate() {
        for preset in [Preset::Vgg14, Preset::Resnet50Cifar, Preset::Densenet121Cifar] {
            let g = build_preset(preset, 10, 1);
            let violations = validate(&g);
            assert!(violations.is_empty(), "{preset}: {violations:?}");
        }
    }

    #[test]
    fn unknown_preset_name_errors() {
        assert!("vgg19".parse::<Preset>().is_err());
        assert_eq!("vgg14".parse::<Preset>().unwrap(), Preset::Vgg14);
    }
}
