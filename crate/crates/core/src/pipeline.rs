//! Stage orchestration: prepare, pretrain, adapt, evaluate, report.
//!
//! Each stage writes its artifacts into one run directory plus a
//! `<stage>.stamp` holding the stage hash of the config. A stage is skipped
//! when its stamp matches and its outputs exist; once any stage runs, every
//! later stage runs too.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::backbone::{pretrain, EmbeddingTable, PretrainEpoch};
use crate::config::{EvalCheckpoint, ExperimentConfig, Stage};
use crate::data::{kcore_filter, load_interactions, partition_providers, split_per_user, DatasetBundle, GroupPartition};
use crate::error::{io_err, Error, Result};
use crate::exposure::{build_target, Targets};
use crate::metrics::{evaluate, EvalReport, EvalSplit, Scorer};
use crate::synthetic::synthetic_bundle;
use crate::trainer::{train_adapter, EpochLog, TrainOutcome};

pub const BUNDLE: &str = "bundle.json";
pub const BACKBONE: &str = "backbone.bin";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const ADAPTER: &str = "adapter.bin";
pub const ADAPTER_FINAL: &str = "adapter_final.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const ADAPT_SUMMARY: &str = "adapt.json";
pub const METRICS: &str = "metrics.json";
pub const EXPOSURE: &str = "exposure.csv";
pub const SUBGROUPS: &str = "subgroups.csv";
pub const RESOLVED: &str = "config.resolved";

fn outputs(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Prepare => &[BUNDLE],
        Stage::Pretrain => &[BACKBONE, PRETRAIN_LOG],
        Stage::Adapt => &[ADAPTER, ADAPTER_FINAL, TRAIN_LOG, ADAPT_SUMMARY],
        Stage::Evaluate => &[METRICS, EXPOSURE],
        Stage::Report => &[SUBGROUPS],
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Display name of group `c`: head/mid/tail for three groups.
pub fn group_name(c: usize, num_groups: usize) -> String {
    match (num_groups, c) {
        (3, 0) => "head".into(),
        (3, 1) => "mid".into(),
        (3, 2) => "tail".into(),
        _ => format!("g{c}"),
    }
}

/// Builds the dataset bundle from a TSV file or the synthetic generator.
pub fn prepare_bundle(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    match &cfg.input {
        Some(path) => {
            let raw = load_interactions(path)?;
            let dataset = kcore_filter(&raw, cfg.kcore)?;
            let split = split_per_user(&dataset, cfg.split_seed);
            let partition = partition_providers(&dataset, &split, &cfg.group_fractions)?;
            Ok(DatasetBundle {
                dataset,
                split,
                partition,
            })
        }
        None => synthetic_bundle(&cfg.synthetic, cfg.kcore, cfg.split_seed, &cfg.group_fractions),
    }
}

pub fn pretrain_log_csv(log: &[PretrainEpoch]) -> String {
    let mut out = String::from("epoch,loss,val_ndcg\n");
    for e in log {
        let loss = e.loss.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", e.epoch, loss, e.val_ndcg);
    }
    out
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,l_fair,l_diffndcg,l_total,val_ndcg,val_gini\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, e.fairness_loss, e.ndcg_loss, e.total_loss, e.val_ndcg, e.val_gini
        );
    }
    out
}

/// Written by `adapt` next to the adapter checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub config_hash: String,
    pub backbone_checksum: String,
    pub num_params: usize,
    pub best_epoch: usize,
    pub best_val_ndcg: f64,
    pub best_val_gini: f64,
    pub final_epoch: usize,
    pub base_val_ndcg: f64,
    pub base_val_gini: f64,
}

/// Trains the adapter, saves the selected checkpoint to `adapter_path` and
/// the final parameters, log and summary next to it.
pub fn adapt_into(
    bundle: &DatasetBundle,
    emb: &EmbeddingTable,
    cfg: &ExperimentConfig,
    adapter_path: &Path,
) -> Result<(TrainOutcome, AdaptSummary)> {
    let dir = adapter_path.parent().unwrap_or(Path::new("."));
    let targets = build_target(&cfg.target, &bundle.partition)?;
    let out = train_adapter(bundle, emb, &targets, &cfg.train)?;
    out.best.params.save(adapter_path)?;
    out.final_params.save(&dir.join(ADAPTER_FINAL))?;
    write(&dir.join(TRAIN_LOG), &train_log_csv(&out.log))?;
    let summary = AdaptSummary {
        config_hash: cfg.stage_hash(Stage::Adapt),
        backbone_checksum: emb.checksum_hex(),
        num_params: out.final_params.num_params(),
        best_epoch: out.best.epoch,
        best_val_ndcg: out.best.val_ndcg,
        best_val_gini: out.best.val_gini,
        final_epoch: out.log.last().map_or(0, |e| e.epoch),
        base_val_ndcg: out.base_val.ndcg,
        base_val_gini: out.base_val.gini,
    };
    write(&dir.join(ADAPT_SUMMARY), &serde_json::to_string_pretty(&summary)?)?;
    Ok((out, summary))
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub k: usize,
    pub checkpoint: EvalCheckpoint,
    pub checkpoint_epoch: Option<usize>,
    pub base: EvalReport,
    pub adapted: EvalReport,
}

impl MetricsFile {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read(path)?)?)
    }
}

pub fn exposure_csv(bundle: &DatasetBundle, report: &EvalReport, targets: &Targets) -> String {
    let total: f64 = report.exposure.iter().sum();
    let p = &bundle.partition;
    let mut out = String::from("provider_id,group,exposure,share,target\n");
    for (s, &e) in report.exposure.iter().enumerate() {
        let share = if total > 0.0 { e / total } else { 0.0 };
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            bundle.dataset.provider_tokens[s],
            group_name(p.provider_group[s], p.num_groups),
            e,
            share,
            targets.provider[s]
        );
    }
    out
}

pub fn subgroups_csv(report: &EvalReport, partition: &GroupPartition) -> String {
    let mut out = String::from("group,share,within_gini\n");
    for g in &report.groups {
        let _ = writeln!(out, "{},{},{}", group_name(g.group, partition.num_groups), g.share, g.within_gini);
    }
    out
}

/// Test-split metrics for the backbone and the adapted model.
pub fn evaluate_into(
    bundle: &DatasetBundle,
    emb: &EmbeddingTable,
    adapter: &AdapterParams,
    cfg: &ExperimentConfig,
    checkpoint_epoch: Option<usize>,
    dir: &Path,
) -> Result<MetricsFile> {
    let base = evaluate(&Scorer::base(emb), bundle, EvalSplit::Test, cfg.eval_k)?;
    let adapted = evaluate(&Scorer::with_adapter(emb, adapter), bundle, EvalSplit::Test, cfg.eval_k)?;
    base.check_ranges()?;
    adapted.check_ranges()?;
    let targets = build_target(&cfg.target, &bundle.partition)?;
    write(&dir.join(EXPOSURE), &exposure_csv(bundle, &adapted, &targets))?;
    let metrics = MetricsFile {
        config_hash: cfg.stage_hash(Stage::Evaluate),
        k: cfg.eval_k,
        checkpoint: cfg.eval_checkpoint,
        checkpoint_epoch,
        base,
        adapted,
    };
    write(&dir.join(METRICS), &serde_json::to_string_pretty(&metrics)?)?;
    Ok(metrics)
}

fn stamp_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.stamp", stage.name()))
}

fn is_current(dir: &Path, stage: Stage, hash: &str) -> bool {
    let stamp_ok = fs::read_to_string(stamp_path(dir, stage)).is_ok_and(|s| s.trim() == hash);
    stamp_ok && outputs(stage).iter().all(|f| dir.join(f).is_file())
}

fn run_stage(cfg: &ExperimentConfig, stage: Stage, dir: &Path) -> Result<()> {
    match stage {
        Stage::Prepare => prepare_bundle(cfg)?.save(&dir.join(BUNDLE)),
        Stage::Pretrain => {
            let bundle = DatasetBundle::load(&dir.join(BUNDLE))?;
            let out = pretrain(&bundle.dataset, &bundle.split, &cfg.pretrain)?;
            out.table.save(&dir.join(BACKBONE))?;
            write(&dir.join(PRETRAIN_LOG), &pretrain_log_csv(&out.log))
        }
        Stage::Adapt => {
            let bundle = DatasetBundle::load(&dir.join(BUNDLE))?;
            let emb = EmbeddingTable::load(&dir.join(BACKBONE))?;
            adapt_into(&bundle, &emb, cfg, &dir.join(ADAPTER)).map(|_| ())
        }
        Stage::Evaluate => {
            let bundle = DatasetBundle::load(&dir.join(BUNDLE))?;
            let emb = EmbeddingTable::load(&dir.join(BACKBONE))?;
            let summary: AdaptSummary = serde_json::from_str(&read(&dir.join(ADAPT_SUMMARY))?)?;
            let (file, epoch) = match cfg.eval_checkpoint {
                EvalCheckpoint::Best => (ADAPTER, summary.best_epoch),
                EvalCheckpoint::Final => (ADAPTER_FINAL, summary.final_epoch),
            };
            let adapter = AdapterParams::load(&dir.join(file))?;
            evaluate_into(&bundle, &emb, &adapter, cfg, Some(epoch), dir).map(|_| ())
        }
        Stage::Report => {
            let bundle = DatasetBundle::load(&dir.join(BUNDLE))?;
            let metrics = MetricsFile::load(&dir.join(METRICS))?;
            write(&dir.join(SUBGROUPS), &subgroups_csv(&metrics.adapted, &bundle.partition))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineRun {
    pub dir: PathBuf,
    /// Stages that actually executed, in order.
    pub ran: Vec<Stage>,
    /// Stages skipped because their outputs were current.
    pub skipped: Vec<Stage>,
}

/// Runs every stage up to and including `last` in `cfg.out_dir`.
pub fn run_pipeline_until(cfg: &ExperimentConfig, last: Stage) -> Result<PipelineRun> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write(&dir.join(RESOLVED), &cfg.resolved_text())?;
    let mut run = PipelineRun {
        dir: dir.clone(),
        ran: Vec::new(),
        skipped: Vec::new(),
    };
    for stage in Stage::ALL.into_iter().filter(|&s| s <= last) {
        let hash = cfg.stage_hash(stage);
        if run.ran.is_empty() && is_current(&dir, stage, &hash) {
            run.skipped.push(stage);
            continue;
        }
        // an interrupted rerun must not leave a valid stamp behind
        let stamp = stamp_path(&dir, stage);
        if stamp.exists() {
            fs::remove_file(&stamp).map_err(io_err(&stamp))?;
        }
        run_stage(cfg, stage, &dir).map_err(|e| Error::Stage {
            stage: stage.name(),
            source: Box::new(e),
        })?;
        write(&stamp, &format!("{hash}\n"))?;
        run.ran.push(stage);
    }
    Ok(run)
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineRun> {
    run_pipeline_until(cfg, Stage::Report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    LambdaAcc,
    /// Values are `inter:intra` pairs.
    InterIntraRatio,
    HiddenDim,
    Layers,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda_acc" => Ok(SweepAxis::LambdaAcc),
            "inter_intra_ratio" => Ok(SweepAxis::InterIntraRatio),
            "hidden_dim" => Ok(SweepAxis::HiddenDim),
            "layers" => Ok(SweepAxis::Layers),
            _ => Err(Error::InvalidArgument(format!(
                "unknown sweep axis `{s}` (lambda_acc, inter_intra_ratio, hidden_dim, layers)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LambdaAcc => "lambda_acc",
            SweepAxis::InterIntraRatio => "inter_intra_ratio",
            SweepAxis::HiddenDim => "hidden_dim",
            SweepAxis::Layers => "layers",
        }
    }

    /// Applies one sweep value to a copy of `cfg`.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        match self {
            SweepAxis::LambdaAcc => c.set("lambda_acc", value)?,
            SweepAxis::HiddenDim => c.set("hidden", value)?,
            SweepAxis::Layers => c.set("layers", value)?,
            SweepAxis::InterIntraRatio => {
                let (a, b) = value
                    .split_once(':')
                    .ok_or_else(|| Error::InvalidArgument(format!("ratio `{value}` is not inter:intra")))?;
                c.set("lambda_inter", a)?;
                c.set("lambda_intra", b)?;
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub dir: PathBuf,
    pub outcome: std::result::Result<MetricsFile, String>,
}

fn dir_label(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

pub fn sweep_summary_csv(rows: &[SweepRow], num_groups: usize) -> String {
    let mut out = String::from("value,status,ndcg,gini,entropy_bits,cv");
    for c in 0..num_groups {
        let g = group_name(c, num_groups);
        let _ = write!(out, ",{g}_share,{g}_within_gini");
    }
    out.push_str(",error\n");
    for r in rows {
        match &r.outcome {
            Ok(m) => {
                let a = &m.adapted;
                let _ = write!(out, "{},ok,{},{},{},{}", r.value, a.ndcg, a.gini, a.entropy_bits, a.cv);
                for g in &a.groups {
                    let _ = write!(out, ",{},{}", g.share, g.within_gini);
                }
                out.push_str(",\n");
            }
            Err(e) => {
                let _ = write!(out, "{},failed,,,,", r.value);
                out.push_str(&",".repeat(2 * num_groups));
                let _ = writeln!(out, ",\"{}\"", e.replace('"', "'"));
            }
        }
    }
    out
}

/// One full run per value in `dir/<axis>_<value>`, sharing the prepared
/// bundle and backbone from `dir/shared`. Failing runs are recorded in
/// `summary.csv` and do not stop the sweep.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], dir: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut shared_cfg = cfg.clone();
    shared_cfg.out_dir = dir.join("shared");
    let shared = run_pipeline_until(&shared_cfg, Stage::Pretrain)?;
    let bundle = DatasetBundle::load(&shared.dir.join(BUNDLE))?;

    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let sub = dir.join(format!("{}_{}", axis.name(), dir_label(value)));
        let outcome = (|| -> Result<MetricsFile> {
            let mut c = axis.apply(cfg, value)?;
            c.out_dir = sub.clone();
            fs::create_dir_all(&sub).map_err(io_err(&sub))?;
            for stage in [Stage::Prepare, Stage::Pretrain] {
                for f in outputs(stage) {
                    let (from, to) = (shared.dir.join(f), sub.join(f));
                    fs::copy(&from, &to).map_err(io_err(&to))?;
                }
                // upstream keys are identical, so the shared stamps apply
                write(&stamp_path(&sub, stage), &format!("{}\n", c.stage_hash(stage)))?;
            }
            run_pipeline(&c)?;
            MetricsFile::load(&sub.join(METRICS))
        })();
        rows.push(SweepRow {
            value: value.clone(),
            dir: sub,
            outcome: outcome.map_err(|e| e.to_string()),
        });
    }
    write(
        &dir.join("summary.csv"),
        &sweep_summary_csv(&rows, bundle.partition.num_groups),
    )?;
    Ok(rows)
}
