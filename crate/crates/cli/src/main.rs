use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairadapt_core::adapter::AdapterParams;
use fairadapt_core::backbone::{pretrain, EmbeddingTable};
use fairadapt_core::config::{ExperimentConfig, Stage};
use fairadapt_core::data::DatasetBundle;
use fairadapt_core::gradcheck::run_suite;
use fairadapt_core::metrics::EvalReport;
use fairadapt_core::pipeline::{
    adapt_into, evaluate_into, group_name, prepare_bundle, pretrain_log_csv, run_pipeline_until, subgroups_csv,
    sweep, MetricsFile, SweepAxis,
};
use fairadapt_core::Error;

/// Provider-fairness adapters for frozen recommenders.
#[derive(Parser)]
#[command(name = "fairadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides, shared by every subcommand.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable); applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, split and partition interactions into a dataset bundle.
    Prepare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Interaction TSV (user, item, provider, ...).
        #[arg(long, conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        /// Synthetic generator setting, e.g. `skew=1.5` (repeatable).
        #[arg(long, value_name = "KEY=VALUE")]
        synthetic: Vec<String>,
        #[arg(long)]
        kcore: Option<String>,
        #[arg(long)]
        split_seed: Option<String>,
        /// Comma-separated group fractions, head first.
        #[arg(long)]
        group_fractions: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the matrix-factorization backbone with BPR.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lr: Option<String>,
        #[arg(long)]
        epochs: Option<String>,
        #[arg(long)]
        batch_size: Option<String>,
        #[arg(long)]
        dim: Option<String>,
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        l2: Option<String>,
        /// Backbone checkpoint to write; the epoch log goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fairness adapter on a frozen backbone.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        /// Selected adapter checkpoint; final weights, log and summary go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split metrics for the backbone with and without an adapter.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        /// Ranking cutoff.
        #[arg(long)]
        k: Option<String>,
        /// Target used for the `target` column of exposure.csv.
        #[arg(long)]
        target: Option<String>,
        /// Directory for metrics.json and exposure.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-group exposure share and within-group Gini of an evaluation.
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Report the backbone instead of the adapted model.
        #[arg(long)]
        base: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// One pipeline run per value of one axis, sharing the backbone.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// lambda_acc, inter_intra_ratio, hidden_dim or layers.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; ratios as `inter:intra`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every hand-written gradient.
    GradCheck(GradCheckArgs),
    /// Run the pipeline from a config file, skipping up-to-date stages.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Last stage to run, or `grad-check`.
        #[arg(long, default_value = "report")]
        stage: String,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct GradCheckArgs {
    /// Random points per operation.
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lambda_acc: Option<String>,
    #[arg(long)]
    lambda_inter: Option<String>,
    #[arg(long)]
    lambda_intra: Option<String>,
    /// uniform_provider, uniform_group or custom.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    target_group: Option<String>,
    #[arg(long)]
    target_provider: Option<String>,
    /// hefa or kl.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    k: Option<String>,
    /// Candidate count per user, or `full`.
    #[arg(long)]
    candidates: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    ndcg_floor: Option<String>,
    /// `fan_in` or an explicit uniform half-width.
    #[arg(long)]
    init_scale: Option<String>,
}

impl TrainFlags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("lambda_acc", &self.lambda_acc),
            ("lambda_inter", &self.lambda_inter),
            ("lambda_intra", &self.lambda_intra),
            ("target", &self.target),
            ("target_group", &self.target_group),
            ("target_provider", &self.target_provider),
            ("objective", &self.objective),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("beta", &self.beta),
            ("k", &self.k),
            ("candidates", &self.candidates),
            ("hidden", &self.hidden),
            ("layers", &self.layers),
            ("seed", &self.seed),
            ("ndcg_floor", &self.ndcg_floor),
            ("init_scale", &self.init_scale),
        ]
    }
}

/// Defaults, then the file, then `--set`, then dedicated flags.
fn resolve(args: &ConfigArgs, flags: &[(&str, &Option<String>)]) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn summary_line(label: &str, r: &EvalReport) {
    println!(
        "{label:<8} ndcg@{}={:.4} hr={:.4} mrr={:.4} gini={:.4} entropy={:.4} cv={:.4}",
        r.k, r.ndcg, r.hr, r.mrr, r.gini, r.entropy_bits, r.cv
    );
}

fn grad_check(args: &GradCheckArgs) -> Result<bool, Error> {
    let report = run_suite(args.points, args.seed)?;
    println!("{:<30} {:>8} {:>8} {:>14}", "operation", "coords", "failed", "max_rel_error");
    for c in &report.checks {
        println!("{:<30} {:>8} {:>8} {:>14.3e}", c.name, c.coords, c.failures, c.max_rel_error);
    }
    let ok = report.passed();
    println!("{}", if ok { "all gradient checks passed" } else { "gradient checks FAILED" });
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Prepare {
            cfg,
            input,
            synthetic,
            kcore,
            split_seed,
            group_fractions,
            out,
        } => {
            let input = input.map(|p| p.display().to_string());
            let mut c = resolve(
                &cfg,
                &[
                    ("input", &input),
                    ("kcore", &kcore),
                    ("split_seed", &split_seed),
                    ("group_fractions", &group_fractions),
                ],
            )?;
            for kv in &synthetic {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--synthetic `{kv}` is not key=value")))?;
                c.set(&format!("synthetic_{}", k.trim()), v)?;
            }
            let bundle = prepare_bundle(&c)?;
            ensure_dir(&parent_dir(&out))?;
            bundle.save(&out)?;
            let ds = &bundle.dataset;
            println!(
                "{} users, {} items, {} providers, {} interactions -> {}",
                ds.num_users,
                ds.num_items,
                ds.num_providers,
                ds.interactions.len(),
                out.display()
            );
        }
        Command::Pretrain {
            cfg,
            data,
            lr,
            epochs,
            batch_size,
            dim,
            seed,
            l2,
            out,
        } => {
            let c = resolve(
                &cfg,
                &[
                    ("pretrain_lr", &lr),
                    ("pretrain_epochs", &epochs),
                    ("pretrain_batch_size", &batch_size),
                    ("dim", &dim),
                    ("pretrain_seed", &seed),
                    ("l2", &l2),
                ],
            )?;
            let bundle = DatasetBundle::load(&data)?;
            let outcome = pretrain(&bundle.dataset, &bundle.split, &c.pretrain)?;
            let dir = parent_dir(&out);
            ensure_dir(&dir)?;
            outcome.table.save(&out)?;
            write_file(&dir.join("pretrain_log.csv"), &pretrain_log_csv(&outcome.log))?;
            let best = &outcome.log[outcome.best_epoch];
            println!(
                "best epoch {} (val ndcg {:.4}), checksum {} -> {}",
                outcome.best_epoch,
                best.val_ndcg,
                outcome.table.checksum_hex(),
                out.display()
            );
        }
        Command::Adapt {
            cfg,
            data,
            backbone,
            train,
            out,
        } => {
            let c = resolve(&cfg, &train.pairs())?;
            c.validate()?;
            let bundle = DatasetBundle::load(&data)?;
            let emb = EmbeddingTable::load(&backbone)?;
            ensure_dir(&parent_dir(&out))?;
            let (_, s) = adapt_into(&bundle, &emb, &c, &out)?;
            println!(
                "selected epoch {} of {}: val ndcg {:.4} (base {:.4}), val gini {:.4} (base {:.4}) -> {}",
                s.best_epoch,
                s.final_epoch,
                s.best_val_ndcg,
                s.base_val_ndcg,
                s.best_val_gini,
                s.base_val_gini,
                out.display()
            );
        }
        Command::Evaluate {
            cfg,
            data,
            backbone,
            adapter,
            k,
            target,
            out,
        } => {
            let c = resolve(&cfg, &[("eval_k", &k), ("target", &target)])?;
            let bundle = DatasetBundle::load(&data)?;
            let emb = EmbeddingTable::load(&backbone)?;
            let params = AdapterParams::load(&adapter)?;
            ensure_dir(&out)?;
            let m = evaluate_into(&bundle, &emb, &params, &c, None, &out)?;
            summary_line("base", &m.base);
            summary_line("adapted", &m.adapted);
        }
        Command::Report { data, metrics, base, out } => {
            let bundle = DatasetBundle::load(&data)?;
            let m = MetricsFile::load(&metrics)?;
            let r = if base { &m.base } else { &m.adapted };
            ensure_dir(&parent_dir(&out))?;
            write_file(&out, &subgroups_csv(r, &bundle.partition))?;
            for g in &r.groups {
                println!(
                    "{:<6} share={:.4} within_gini={:.4}",
                    group_name(g.group, bundle.partition.num_groups),
                    g.share,
                    g.within_gini
                );
            }
        }
        Command::Sweep { cfg, axis, values, out } => {
            let c = resolve(&cfg, &[])?;
            let axis = SweepAxis::parse(&axis)?;
            let rows = sweep(&c, axis, &values, &out)?;
            let mut failed = 0;
            for r in &rows {
                match &r.outcome {
                    Ok(m) => println!(
                        "{}={:<10} ndcg={:.4} gini={:.4}",
                        axis.name(),
                        r.value,
                        m.adapted.ndcg,
                        m.adapted.gini
                    ),
                    Err(e) => {
                        failed += 1;
                        println!("{}={:<10} FAILED {e}", axis.name(), r.value);
                    }
                }
            }
            println!("summary -> {}", out.join("summary.csv").display());
            if failed > 0 {
                return Err(Error::Stage {
                    stage: "sweep",
                    source: Box::new(Error::InvalidArgument(format!("{failed} of {} runs failed", rows.len()))),
                });
            }
        }
        Command::GradCheck(args) => return grad_check(&args),
        Command::Run { cfg, stage, out } => {
            if stage == "grad-check" {
                return grad_check(&GradCheckArgs { points: 20, seed: 2024 });
            }
            let last = Stage::parse(&stage).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown stage `{stage}` (prepare, pretrain, adapt, evaluate, report, grad-check)"
                ))
            })?;
            let out = out.map(|p| p.display().to_string());
            let c = resolve(&cfg, &[("out_dir", &out)])?;
            let r = run_pipeline_until(&c, last)?;
            for s in Stage::ALL.into_iter().filter(|&s| s <= last) {
                let state = if r.skipped.contains(&s) { "up to date" } else { "ran" };
                println!("{:<9} {state}", s.name());
            }
            println!("outputs in {}", r.dir.display());
        }
    }
    Ok(true)
}

fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", error_json("grad_check_failed", "one or more gradient checks failed"));
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
