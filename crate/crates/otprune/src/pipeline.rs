//! The full compression loop behind the CLI: train with sparsity, prune,
//! recover, optionally repeat; plus the threshold-shift sweep and the
//! matched-budget method comparison. Every artifact lands under the output
//! directory and a manifest lists them with the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_cifar10, make_synthetic, Dataset};
use crate::graph::{build_preset, load, reinitialize, save, NetworkGraph, Preset};
use crate::rng::mix;
use crate::surgery::{
    apply_prune, plan_prune, report, PruneConfig, PruneMethod, PruneReport, REPORT_CSV_HEADER,
};
use crate::train::{evaluate_accuracy, fine_tune, train, TrainConfig, TrainMode, TrainTrace};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic { classes: usize, per_class: usize, image_size: usize },
    Cifar10 { dir: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PostMode {
    FineTune,
    TrainFromScratch,
    None,
}

impl std::str::FromStr for PostMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fine_tune" | "finetune" => Ok(PostMode::FineTune),
            "train_from_scratch" | "tfs" => Ok(PostMode::TrainFromScratch),
            "none" => Ok(PostMode::None),
            other => Err(format!("unknown post mode `{other}` (fine_tune, train_from_scratch, none)")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub data: DataSource,
    pub method: PruneMethod,
    pub lambda: f64,
    /// Sweep used by the method comparison.
    pub lambdas: Vec<f64>,
    pub delta: f64,
    pub ns_percent: f64,
    pub iterations: usize,
    pub post: PostMode,
    /// log10 threshold offsets for the shift sweep.
    pub shifts: Vec<f64>,
    pub seed: u64,
    /// Seed count for multi-seed runs (method comparison).
    pub seeds: usize,
    pub out_dir: PathBuf,
    /// Sparsity-training template; lambda and seed are filled in per run.
    pub train: TrainConfig,
    pub finetune_epochs: usize,
    /// Reuse an already-trained model instead of training in-run.
    pub model: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn toy(preset: Preset, out_dir: PathBuf, lambda: f64, seed: u64) -> Self {
        PipelineConfig {
            preset,
            data: DataSource::Synthetic { classes: 4, per_class: 200, image_size: 8 },
            method: PruneMethod::Ot,
            lambda,
            lambdas: vec![1e-3, 3e-3, 1e-2, 3e-2],
            delta: 1e-3,
            ns_percent: 0.5,
            iterations: 1,
            post: PostMode::FineTune,
            shifts: vec![-6.0, -5.0, -4.0, -3.0, -2.0, -1.0, -0.5, 0.0, 0.25, 0.5],
            seed,
            seeds: 5,
            out_dir,
            train: TrainConfig::toy_defaults(lambda, seed),
            finetune_epochs: 5,
            model: None,
        }
    }

    fn check(&self) -> Result<(), PipelineError> {
        if self.iterations < 1 {
            return Err(stage_msg("config", "iterations must be >= 1"));
        }
        if !self.shifts.is_empty() && self.method != PruneMethod::Ot {
            return Err(stage_msg("config", "shift sweep is only valid with method=OT"));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

fn stage<E: std::fmt::Display>(stage_name: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError { stage: stage_name, message: e.to_string() }
}

fn stage_msg(stage_name: &'static str, msg: impl Into<String>) -> PipelineError {
    PipelineError { stage: stage_name, message: msg.into() }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftRow {
    pub shift: f64,
    pub pruned_flops_pct: f64,
    pub acc_pre: f64,
    pub acc_post: Option<f64>,
}

#[derive(Default, Serialize)]
struct Manifest<'a> {
    config: Option<&'a PipelineConfig>,
    artifacts: Vec<String>,
}

struct OutDir<'a> {
    root: &'a Path,
    artifacts: Vec<String>,
}

impl<'a> OutDir<'a> {
    fn new(root: &'a Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root).map_err(stage("io"))?;
        Ok(OutDir { root, artifacts: Vec::new() })
    }

    fn write(&mut self, rel: &str, contents: &str) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(stage("io"))?;
        }
        fs::write(&path, contents).map_err(stage("io"))?;
        self.artifacts.push(rel.to_string());
        Ok(())
    }

    /// Saves a model and proves it reloads to a valid graph.
    fn save_model(&mut self, rel_base: &str, g: &NetworkGraph) -> Result<(), PipelineError> {
        let base = self.root.join(rel_base);
        if let Some(parent) = base.parent() {
            fs::create_dir_all(parent).map_err(stage("io"))?;
        }
        save(g, &base).map_err(stage("io"))?;
        let reloaded = load(&base).map_err(stage("io"))?;
        let violations = crate::graph::validate(&reloaded);
        if !violations.is_empty() {
            return Err(stage_msg("io", format!("saved model fails validation: {}", violations[0])));
        }
        self.artifacts.push(format!("{rel_base}.otg.json"));
        self.artifacts.push(format!("{rel_base}.otg.bin"));
        Ok(())
    }

    fn finish(mut self, cfg: &PipelineConfig) -> Result<(), PipelineError> {
        self.artifacts.sort();
        let manifest = Manifest { config: Some(cfg), artifacts: self.artifacts.clone() };
        let json = serde_json::to_string_pretty(&manifest).map_err(stage("io"))?;
        fs::write(self.root.join("manifest.json"), json).map_err(stage("io"))
    }
}

fn load_data(cfg: &PipelineConfig) -> Result<Dataset, PipelineError> {
    match &cfg.data {
        DataSource::Synthetic { classes, per_class, image_size } => {
            Ok(make_synthetic(*classes, *per_class, *image_size, cfg.seed))
        }
        DataSource::Cifar10 { dir } => load_cifar10(dir, true).map_err(stage("data")),
    }
}

fn num_classes(data: &Dataset) -> usize {
    data.num_classes
}

fn prune_config(cfg: &PipelineConfig, shift: f64) -> PruneConfig {
    PruneConfig {
        method: cfg.method,
        threshold: crate::threshold::ThresholdConfig { delta: cfg.delta, p: 2.0 },
        ns_percent: cfg.ns_percent,
        // The percentile baseline caps per-layer removal at 50% when pruning
        // iteratively; one-shot runs are uncapped.
        ns_layer_cap: if cfg.method == PruneMethod::Ns && cfg.iterations > 1 {
            Some(0.5)
        } else {
            None
        },
        shift,
        lambda: cfg.lambda,
    }
}

/// Train with sparsity, prune, recover; repeat for the configured number of
/// rounds, re-entering sparsity training from the recovered model each time.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<PruneReport>, PipelineError> {
    cfg.check()?;
    let mut out = OutDir::new(&cfg.out_dir)?;
    let data = load_data(cfg)?;
    let mut current = match &cfg.model {
        Some(base) => load(base).map_err(stage("io"))?,
        None => build_preset(cfg.preset, num_classes(&data), cfg.seed),
    };
    out.save_model("baseline", &current)?;

    let mut reports = Vec::new();
    for round in 0..cfg.iterations {
        let tag = format!("iter{}", round + 1);
        let mut tcfg = cfg.train.clone();
        tcfg.mode = TrainMode::SparseTrain;
        tcfg.lambda = cfg.lambda;
        tcfg.seed = mix(cfg.seed, round as u64);
        let (trained, trace) = train(&current, &data, &tcfg).map_err(stage("train"))?;
        out.save_model(&format!("{tag}_trained"), &trained)?;
        out.write(&format!("{tag}_train_trace.csv"), &trace.to_csv())?;

        let pcfg = prune_config(cfg, 0.0);
        let plan = plan_prune(&trained, &pcfg).map_err(stage("prune"))?;
        out.write(&format!("{tag}_plan.json"), &plan.to_json())?;
        let outcome = apply_prune(&trained, &plan).map_err(stage("prune"))?;
        let pruned = outcome.graph;
        out.save_model(&format!("{tag}_pruned"), &pruned)?;

        let acc_pre = evaluate_accuracy(&pruned, &data.test).map_err(stage("evaluate"))?;
        let (finished, acc_post) = match cfg.post {
            PostMode::FineTune => {
                let ft = TrainConfig {
                    seed: mix(cfg.seed, 1000 + round as u64),
                    ..TrainConfig::fine_tune_defaults(cfg.finetune_epochs, 0)
                };
                let (g, ft_trace) = fine_tune(&pruned, &data, &ft).map_err(stage("finetune"))?;
                out.write(&format!("{tag}_finetune_trace.csv"), &ft_trace.to_csv())?;
                let acc = evaluate_accuracy(&g, &data.test).map_err(stage("evaluate"))?;
                (g, Some(acc))
            }
            PostMode::TrainFromScratch => {
                let (g, tfs_trace) =
                    train_from_scratch(cfg, &data, &trained, &pruned, round).map_err(stage("tfs"))?;
                out.write(&format!("{tag}_tfs_trace.csv"), &tfs_trace.to_csv())?;
                let acc = evaluate_accuracy(&g, &data.test).map_err(stage("evaluate"))?;
                (g, Some(acc))
            }
            PostMode::None => (pruned.clone(), None),
        };
        out.save_model(&format!("{tag}_final"), &finished)?;

        let rep = report(&trained, &finished, &plan, Some(acc_pre), acc_post, cfg.seed)
            .map_err(stage("report"))?;
        out.write(&format!("{tag}_report.json"), &rep.to_json())?;
        reports.push(rep);
        current = finished;
    }

    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    out.write("reports.csv", &csv)?;
    out.finish(cfg)?;
    Ok(reports)
}

/// Recovery by re-training the pruned architecture from fresh weights. The
/// epoch budget matches the original training compute, capped at twice the
/// original epochs once the pruned model saves more than half the FLOPs.
fn train_from_scratch(
    cfg: &PipelineConfig,
    data: &Dataset,
    trained: &NetworkGraph,
    pruned: &NetworkGraph,
    round: usize,
) -> Result<(NetworkGraph, TrainTrace), crate::train::TrainError> {
    let before = trained.count_complexity()?.flops.max(1);
    let after = pruned.count_complexity()?.flops.max(1);
    let ratio = before as f64 / after as f64;
    let epochs = if ratio < 2.0 {
        (cfg.train.epochs as f64 * ratio).round() as usize
    } else {
        cfg.train.epochs * 2
    };
    let fresh = reinitialize(pruned, mix(cfg.seed, 2000 + round as u64));
    let tfs = TrainConfig {
        lambda: 0.0,
        epochs,
        mode: TrainMode::TrainFromScratch,
        seed: mix(cfg.seed, 3000 + round as u64),
        ..cfg.train.clone()
    };
    train(&fresh, data, &tfs)
}

/// Prunes one sparsity-trained model at every threshold shift and records
/// the damage. Reproduces the under/over-pruning curve.
pub fn run_shift_sweep(cfg: &PipelineConfig) -> Result<Vec<ShiftRow>, PipelineError> {
    cfg.check()?;
    if cfg.method != PruneMethod::Ot {
        return Err(stage_msg("config", "shift sweep requires method=OT"));
    }
    let mut out = OutDir::new(&cfg.out_dir)?;
    let data = load_data(cfg)?;
    let trained = match &cfg.model {
        Some(base) => load(base).map_err(stage("io"))?,
        None => {
            let g0 = build_preset(cfg.preset, num_classes(&data), cfg.seed);
            let mut tcfg = cfg.train.clone();
            tcfg.mode = TrainMode::SparseTrain;
            tcfg.lambda = cfg.lambda;
            tcfg.seed = cfg.seed;
            let (g, trace) = train(&g0, &data, &tcfg).map_err(stage("train"))?;
            out.write("train_trace.csv", &trace.to_csv())?;
            g
        }
    };
    out.save_model("trained", &trained)?;
    let baseline_acc = evaluate_accuracy(&trained, &data.test).map_err(stage("evaluate"))?;

    let mut rows = Vec::new();
    for &shift in &cfg.shifts {
        let tag = format!("shift_{shift}");
        let pcfg = prune_config(cfg, shift);
        let plan = plan_prune(&trained, &pcfg).map_err(stage("prune"))?;
        out.write(&format!("{tag}/plan.json"), &plan.to_json())?;
        let outcome = apply_prune(&trained, &plan).map_err(stage("prune"))?;
        out.save_model(&format!("{tag}/pruned"), &outcome.graph)?;
        let acc_pre = evaluate_accuracy(&outcome.graph, &data.test).map_err(stage("evaluate"))?;
        let acc_post = match cfg.post {
            PostMode::FineTune => {
                let ft = TrainConfig {
                    seed: mix(cfg.seed, 5000),
                    ..TrainConfig::fine_tune_defaults(cfg.finetune_epochs, 0)
                };
                let (g, _) = fine_tune(&outcome.graph, &data, &ft).map_err(stage("finetune"))?;
                Some(evaluate_accuracy(&g, &data.test).map_err(stage("evaluate"))?)
            }
            _ => None,
        };
        let rep = report(&trained, &outcome.graph, &plan, Some(acc_pre), acc_post, cfg.seed)
            .map_err(stage("report"))?;
        out.write(&format!("{tag}/report.json"), &rep.to_json())?;
        rows.push(ShiftRow { shift, pruned_flops_pct: rep.pruned_flops_pct, acc_pre, acc_post });
    }

    let mut csv = String::from("shift,pruned_flops_pct,acc_pre,acc_post\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.shift,
            r.pruned_flops_pct,
            r.acc_pre,
            r.acc_post.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    csv.push_str(&format!("# baseline_acc={baseline_acc}\n"));
    out.write("sweep.csv", &csv)?;
    out.finish(cfg)?;
    Ok(rows)
}

/// For each sparsity level and seed: train once, prune with the per-layer
/// rule, then prune the same model with the percentile baseline at the
/// channel budget the per-layer rule chose. Emits paired reports.
pub fn compare_methods(cfg: &PipelineConfig) -> Result<Vec<PruneReport>, PipelineError> {
    cfg.check()?;
    let mut out = OutDir::new(&cfg.out_dir)?;
    let data = load_data(cfg)?;
    let mut reports = Vec::new();
    for (li, &lambda) in cfg.lambdas.iter().enumerate() {
        for s in 0..cfg.seeds {
            let run_seed = mix(cfg.seed, (li * cfg.seeds + s) as u64);
            let tag = format!("lambda{lambda}_seed{s}");
            let g0 = build_preset(cfg.preset, num_classes(&data), run_seed);
            let mut tcfg = cfg.train.clone();
            tcfg.mode = TrainMode::SparseTrain;
            tcfg.lambda = lambda;
            tcfg.seed = run_seed;
            let (trained, _) = train(&g0, &data, &tcfg).map_err(stage("train"))?;

            let mut ot_cfg = prune_config(cfg, 0.0);
            ot_cfg.method = PruneMethod::Ot;
            ot_cfg.lambda = lambda;
            let ot_plan = plan_prune(&trained, &ot_cfg).map_err(stage("prune"))?;
            let budget = ot_plan.pruned_channels();
            let total: usize = trained
                .bn_nodes()
                .iter()
                .map(|&id| trained.bn_gamma(id).expect("bn").len())
                .sum();

            let mut ns_cfg = prune_config(cfg, 0.0);
            ns_cfg.method = PruneMethod::Ns;
            ns_cfg.lambda = lambda;
            ns_cfg.ns_percent = ((budget as f64 + 0.5) / total as f64).min(0.999_999);
            ns_cfg.ns_layer_cap = None;
            let ns_plan = plan_prune(&trained, &ns_cfg).map_err(stage("prune"))?;

            for (label, plan) in [("ot", &ot_plan), ("ns", &ns_plan)] {
                let outcome = apply_prune(&trained, plan).map_err(stage("prune"))?;
                let acc_pre =
                    evaluate_accuracy(&outcome.graph, &data.test).map_err(stage("evaluate"))?;
                let acc_post = match cfg.post {
                    PostMode::FineTune => {
                        let ft = TrainConfig {
                            seed: mix(run_seed, 7000),
                            ..TrainConfig::fine_tune_defaults(cfg.finetune_epochs, 0)
                        };
                        let (g, _) =
                            fine_tune(&outcome.graph, &data, &ft).map_err(stage("finetune"))?;
                        Some(evaluate_accuracy(&g, &data.test).map_err(stage("evaluate"))?)
                    }
                    _ => None,
                };
                let rep = report(&trained, &outcome.graph, plan, Some(acc_pre), acc_post, run_seed)
                    .map_err(stage("report"))?;
                out.write(&format!("{tag}/{label}_report.json"), &rep.to_json())?;
                reports.push(rep);
            }
        }
    }
    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    out.write("compare.csv", &csv)?;
    out.finish(cfg)?;
    Ok(reports)
}
