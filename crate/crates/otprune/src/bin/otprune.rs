//! Command-line driver. Each pipeline stage is independently invokable;
//! `pipeline`, `sweep-shift`, and `compare` wire the stages together.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use otprune::data::{load_cifar10, make_synthetic, Dataset};
use otprune::graph::{build_preset, load, save, Preset};
use otprune::pipeline::{
    compare_methods, run_pipeline, run_shift_sweep, DataSource, PipelineConfig, PostMode,
};
use otprune::surgery::{
    apply_prune, plan_prune, report, PruneConfig, PruneMethod, PrunePlan, REPORT_CSV_HEADER,
};
use otprune::train::{evaluate_accuracy, fine_tune, train, TrainConfig};

#[derive(Parser)]
#[command(name = "otprune", about = "Channel pruning via per-layer optimal thresholds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Args)]
struct DataArgs {
    /// `synthetic` or a directory with CIFAR-10 binary batches.
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Synthetic classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Synthetic samples per class.
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    /// Synthetic image size.
    #[arg(long, default_value_t = 8)]
    image_size: usize,
}

impl DataArgs {
    fn source(&self) -> DataSource {
        if self.data == "synthetic" {
            DataSource::Synthetic {
                classes: self.classes,
                per_class: self.samples_per_class,
                image_size: self.image_size,
            }
        } else {
            DataSource::Cifar10 { dir: PathBuf::from(&self.data) }
        }
    }

    fn load(&self, seed: u64) -> Result<Dataset, String> {
        match self.source() {
            DataSource::Synthetic { classes, per_class, image_size } => {
                Ok(make_synthetic(classes, per_class, image_size, seed))
            }
            DataSource::Cifar10 { dir } => load_cifar10(dir, true).map_err(|e| e.to_string()),
        }
    }
}

#[derive(Clone, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = String::from("toy_cnn"))]
    preset: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn preset(&self) -> Result<Preset, String> {
        self.preset.parse::<Preset>().map_err(|e| e.to_string())
    }

    fn config(&self, cifar: bool) -> TrainConfig {
        let mut cfg = if cifar {
            TrainConfig::paper_defaults(self.lambda, self.seed)
        } else {
            TrainConfig::toy_defaults(self.lambda, self.seed)
        };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a preset with the sparsity penalty and save the model + trace.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan and apply pruning to a saved model.
    Prune {
        /// Base path of a saved model (without the .otg.json suffix).
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "OT")]
        method: String,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        #[arg(long, default_value_t = 0.5)]
        ns_percent: f64,
        /// Sparsity coefficient recorded in the plan and report.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[command(flatten)]
        data: DataArgs,
        /// Evaluate pre-recovery accuracy on the dataset's test split.
        #[arg(long, default_value_t = false)]
        eval: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a saved (typically pruned) model.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a complexity/accuracy report from two saved models and a plan.
    Report {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        acc_pre: Option<f64>,
        #[arg(long)]
        acc_post: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full loop: train with sparsity, prune, recover; optionally iterate.
    Pipeline {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "OT")]
        method: String,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        #[arg(long, default_value_t = 0.5)]
        ns_percent: f64,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        #[arg(long, default_value = "fine_tune")]
        post: PostMode,
        #[arg(long, default_value_t = 5)]
        ft_epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune one trained model at shifted thresholds and emit the damage curve.
    SweepShift {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        /// Comma-separated log10 offsets.
        #[arg(long, default_value = "-6,-5,-4,-3,-2,-1,-0.5,0,0.25,0.5", allow_hyphen_values = true)]
        shifts: String,
        #[arg(long, default_value = "none")]
        post: PostMode,
        #[arg(long, default_value_t = 5)]
        ft_epochs: usize,
        /// Reuse an already-trained model instead of training in-run.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matched-budget comparison of the per-layer rule against the
    /// percentile baseline over a lambda sweep and several seeds.
    Compare {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "1e-3,3e-3,1e-2,3e-2")]
        lambdas: String,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value = "none")]
        post: PostMode,
        #[arg(long, default_value_t = 5)]
        ft_epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<PruneMethod, String> {
    match s.to_ascii_uppercase().as_str() {
        "OT" => Ok(PruneMethod::Ot),
        "NS" => Ok(PruneMethod::Ns),
        other => Err(format!("unknown method `{other}` (expected OT or NS)")),
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad number `{t}`: {e}")))
        .collect()
}

fn pipeline_config(
    train: &TrainArgs,
    data: &DataArgs,
    method: PruneMethod,
    delta: f64,
    ns_percent: f64,
    iterations: usize,
    post: PostMode,
    ft_epochs: usize,
    out: PathBuf,
) -> Result<PipelineConfig, String> {
    let preset = train.preset()?;
    let cifar = matches!(data.source(), DataSource::Cifar10 { .. });
    Ok(PipelineConfig {
        preset,
        data: data.source(),
        method,
        lambda: train.lambda,
        lambdas: vec![train.lambda],
        delta,
        ns_percent,
        iterations,
        post,
        shifts: Vec::new(),
        seed: train.seed,
        seeds: 1,
        out_dir: out,
        train: train.config(cifar),
        finetune_epochs: ft_epochs,
        model: None,
    })
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Train { train: targs, data, out } => {
            let preset = targs.preset()?;
            let dataset = data.load(targs.seed)?;
            let cifar = matches!(data.source(), DataSource::Cifar10 { .. });
            let g0 = build_preset(preset, dataset.num_classes, targs.seed);
            let cfg = targs.config(cifar);
            let (trained, trace) = train(&g0, &dataset, &cfg).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            save(&trained, out.join("model")).map_err(|e| e.to_string())?;
            std::fs::write(out.join("train_trace.csv"), trace.to_csv()).map_err(|e| e.to_string())?;
            let last = trace.rows.last().map(|r| r.test_acc).unwrap_or(0.0);
            println!("trained {preset}: test accuracy {last:.2}%");
            Ok(())
        }
        Command::Prune { model, method, delta, ns_percent, lambda, data, eval, seed, out } => {
            let g = load(&model).map_err(|e| e.to_string())?;
            let mut pcfg = PruneConfig::ot(delta, lambda);
            pcfg.method = parse_method(&method)?;
            pcfg.ns_percent = ns_percent;
            let plan = plan_prune(&g, &pcfg).map_err(|e| e.to_string())?;
            let outcome = apply_prune(&g, &plan).map_err(|e| e.to_string())?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            let acc_pre = if eval {
                let dataset = data.load(seed)?;
                Some(evaluate_accuracy(&outcome.graph, &dataset.test).map_err(|e| e.to_string())?)
            } else {
                None
            };
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            save(&outcome.graph, out.join("pruned")).map_err(|e| e.to_string())?;
            std::fs::write(out.join("plan.json"), plan.to_json()).map_err(|e| e.to_string())?;
            let rep =
                report(&g, &outcome.graph, &plan, acc_pre, None, seed).map_err(|e| e.to_string())?;
            std::fs::write(out.join("report.json"), rep.to_json()).map_err(|e| e.to_string())?;
            println!(
                "pruned: flops {} -> {} ({:.2}% off), params {} -> {}",
                rep.flops_before,
                rep.flops_after,
                100.0 * rep.pruned_flops_pct,
                rep.params_before,
                rep.params_after
            );
            Ok(())
        }
        Command::Finetune { model, data, epochs, seed, out } => {
            let g = load(&model).map_err(|e| e.to_string())?;
            let dataset = data.load(seed)?;
            let cfg = TrainConfig { seed, ..TrainConfig::fine_tune_defaults(epochs, 0) };
            let (tuned, trace) = fine_tune(&g, &dataset, &cfg).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            save(&tuned, out.join("model")).map_err(|e| e.to_string())?;
            std::fs::write(out.join("finetune_trace.csv"), trace.to_csv())
                .map_err(|e| e.to_string())?;
            let last = trace.rows.last().map(|r| r.test_acc).unwrap_or(0.0);
            println!("fine-tuned: test accuracy {last:.2}%");
            Ok(())
        }
        Command::Report { before, after, plan, acc_pre, acc_post, seed, out } => {
            let gb = load(&before).map_err(|e| e.to_string())?;
            let ga = load(&after).map_err(|e| e.to_string())?;
            let plan_text = std::fs::read_to_string(&plan).map_err(|e| e.to_string())?;
            let plan = PrunePlan::from_json(&plan_text).map_err(|e| e.to_string())?;
            let rep = report(&gb, &ga, &plan, acc_pre, acc_post, seed).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            std::fs::write(out.join("report.json"), rep.to_json()).map_err(|e| e.to_string())?;
            std::fs::write(
                out.join("report.csv"),
                format!("{REPORT_CSV_HEADER}\n{}\n", rep.csv_row()),
            )
            .map_err(|e| e.to_string())?;
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::Pipeline {
            train: targs, data, method, delta, ns_percent, iterations, post, ft_epochs, out,
        } => {
            let method = parse_method(&method)?;
            let cfg = pipeline_config(
                &targs, &data, method, delta, ns_percent, iterations, post, ft_epochs, out,
            )?;
            let reports = run_pipeline(&cfg).map_err(|e| e.to_string())?;
            for (i, r) in reports.iter().enumerate() {
                println!(
                    "round {}: pruned {:.2}% flops, acc_pre {:.2}%, acc_post {}",
                    i + 1,
                    100.0 * r.pruned_flops_pct,
                    r.acc_pre.unwrap_or(0.0),
                    r.acc_post.map(|a| format!("{a:.2}%")).unwrap_or_else(|| "-".into()),
                );
            }
            Ok(())
        }
        Command::SweepShift { train: targs, data, delta, shifts, post, ft_epochs, model, out } => {
            let mut cfg = pipeline_config(
                &targs, &data, PruneMethod::Ot, delta, 0.5, 1, post, ft_epochs, out,
            )?;
            cfg.shifts = parse_f64_list(&shifts)?;
            cfg.model = model;
            let rows = run_shift_sweep(&cfg).map_err(|e| e.to_string())?;
            for r in &rows {
                println!(
                    "shift {:+.2}: {:.2}% flops pruned, acc {:.2}%",
                    r.shift,
                    100.0 * r.pruned_flops_pct,
                    r.acc_pre
                );
            }
            Ok(())
        }
        Command::Compare { train: targs, data, lambdas, delta, seeds, post, ft_epochs, out } => {
            let mut cfg = pipeline_config(
                &targs, &data, PruneMethod::Ot, delta, 0.5, 1, post, ft_epochs, out,
            )?;
            cfg.lambdas = parse_f64_list(&lambdas)?;
            cfg.seeds = seeds;
            let reports = compare_methods(&cfg).map_err(|e| e.to_string())?;
            for pair in reports.chunks(2) {
                if let [ot, ns] = pair {
                    println!(
                        "lambda {}: OT acc {:.2}% ({} params) vs NS acc {:.2}% ({} params)",
                        ot.lambda,
                        ot.acc_pre.unwrap_or(0.0),
                        ot.params_after,
                        ns.acc_pre.unwrap_or(0.0),
                        ns.params_after
                    );
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
