//! Experiment configuration in a flat `key = value` text format.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' anything
//! entry   := key ws* '=' ws* value [ws* comment]
//! value   := number | word | list        (list: comma-separated numbers)
//! ```
//!
//! Unknown or repeated keys are errors. Every key has a default. Each key
//! belongs to the first pipeline stage that reads it, so stage hashes only
//! change when something upstream of that stage changes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::PretrainConfig;
use crate::error::{io_err, Error, Result};
use crate::exposure::TargetMode;
use crate::losses::FairnessObjective;
use crate::synthetic::SyntheticConfig;
use crate::trainer::{CandidateMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    Pretrain,
    Adapt,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Prepare, Stage::Pretrain, Stage::Adapt, Stage::Evaluate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Pretrain => "pretrain",
            Stage::Adapt => "adapt",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// Which adapter snapshot `evaluate` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCheckpoint {
    /// The snapshot chosen by the validation rule.
    Best,
    /// The parameters after the last epoch.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Interaction TSV; `None` generates a synthetic dataset.
    pub input: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub kcore: usize,
    pub split_seed: u64,
    pub group_fractions: Vec<f64>,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub target: TargetMode,
    pub eval_k: usize,
    pub eval_checkpoint: EvalCheckpoint,
    /// Not part of any hash.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            input: None,
            synthetic: SyntheticConfig::default(),
            kcore: 5,
            split_seed: 2024,
            group_fractions: vec![0.2, 0.6, 0.2],
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            target: TargetMode::UniformGroup,
            eval_k: 20,
            eval_checkpoint: EvalCheckpoint::Best,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn list(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::InvalidArgument(format!("`{key}` expects {want}, got `{value}`"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn float(key: &str, value: &str) -> Result<f64> {
    let x: f64 = num(key, value)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(bad(key, value, "a finite number"))
    }
}

fn floats(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|x| float(key, x.trim())).collect()
}

impl ExperimentConfig {
    /// Every key with its stage and canonical value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, Stage, String)> {
        use Stage::*;
        let s = &self.synthetic;
        let p = &self.pretrain;
        let t = &self.train;
        let (target_provider, target_group) = match &self.target {
            TargetMode::Custom { provider, group } => (
                provider.as_deref().map(list).unwrap_or_default(),
                group.as_deref().map(list).unwrap_or_default(),
            ),
            _ => (String::new(), String::new()),
        };
        vec![
            ("input", Prepare, self.input.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("synthetic_users", Prepare, s.users.to_string()),
            ("synthetic_items", Prepare, s.items.to_string()),
            ("synthetic_providers", Prepare, s.providers.to_string()),
            ("synthetic_clusters", Prepare, s.clusters.to_string()),
            ("synthetic_skew", Prepare, s.skew.to_string()),
            ("synthetic_per_user", Prepare, s.per_user.to_string()),
            ("synthetic_off_cluster", Prepare, s.off_cluster.to_string()),
            ("synthetic_min_item", Prepare, s.min_item.to_string()),
            ("synthetic_seed", Prepare, s.seed.to_string()),
            ("kcore", Prepare, self.kcore.to_string()),
            ("split_seed", Prepare, self.split_seed.to_string()),
            ("group_fractions", Prepare, list(&self.group_fractions)),
            ("pretrain_lr", Pretrain, p.lr.to_string()),
            ("pretrain_epochs", Pretrain, p.epochs.to_string()),
            ("pretrain_batch_size", Pretrain, p.batch_size.to_string()),
            ("dim", Pretrain, p.dim.to_string()),
            ("pretrain_seed", Pretrain, p.seed.to_string()),
            ("l2", Pretrain, p.l2.to_string()),
            ("pretrain_eval_k", Pretrain, p.eval_k.to_string()),
            ("lr", Adapt, t.lr.to_string()),
            ("epochs", Adapt, t.epochs.to_string()),
            ("batch_size", Adapt, t.batch_size.to_string()),
            ("beta", Adapt, t.beta.to_string()),
            ("k", Adapt, t.k.to_string()),
            (
                "candidates",
                Adapt,
                match t.candidates {
                    CandidateMode::Full => "full".into(),
                    CandidateMode::Top(n) => n.to_string(),
                },
            ),
            ("lambda_inter", Adapt, t.weights.lambda_inter.to_string()),
            ("lambda_intra", Adapt, t.weights.lambda_intra.to_string()),
            ("lambda_acc", Adapt, t.weights.lambda_acc.to_string()),
            ("objective", Adapt, t.objective.name().into()),
            ("target", Adapt, self.target.name().into()),
            ("target_provider", Adapt, target_provider),
            ("target_group", Adapt, target_group),
            ("seed", Adapt, t.seed.to_string()),
            ("ndcg_floor", Adapt, t.ndcg_floor.to_string()),
            ("hidden", Adapt, t.hidden.to_string()),
            ("layers", Adapt, t.layers.to_string()),
            ("init_scale", Adapt, t.init_scale.map_or("fan_in".into(), |x| x.to_string())),
            ("eval_k", Evaluate, self.eval_k.to_string()),
            (
                "eval_checkpoint",
                Evaluate,
                match self.eval_checkpoint {
                    EvalCheckpoint::Best => "best".into(),
                    EvalCheckpoint::Final => "final".into(),
                },
            ),
        ]
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let s = &mut self.synthetic;
        let p = &mut self.pretrain;
        let t = &mut self.train;
        match key {
            "input" => self.input = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synthetic_users" => s.users = num(key, value)?,
            "synthetic_items" => s.items = num(key, value)?,
            "synthetic_providers" => s.providers = num(key, value)?,
            "synthetic_clusters" => s.clusters = num(key, value)?,
            "synthetic_skew" => s.skew = float(key, value)?,
            "synthetic_per_user" => s.per_user = num(key, value)?,
            "synthetic_off_cluster" => s.off_cluster = float(key, value)?,
            "synthetic_min_item" => s.min_item = num(key, value)?,
            "synthetic_seed" => s.seed = num(key, value)?,
            "kcore" => self.kcore = num(key, value)?,
            "split_seed" => self.split_seed = num(key, value)?,
            "group_fractions" => self.group_fractions = floats(key, value)?,
            "pretrain_lr" => p.lr = float(key, value)?,
            "pretrain_epochs" => p.epochs = num(key, value)?,
            "pretrain_batch_size" => p.batch_size = num(key, value)?,
            "dim" => p.dim = num(key, value)?,
            "pretrain_seed" => p.seed = num(key, value)?,
            "l2" => p.l2 = float(key, value)?,
            "pretrain_eval_k" => p.eval_k = num(key, value)?,
            "lr" => t.lr = float(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "beta" => t.beta = float(key, value)?,
            "k" => t.k = num(key, value)?,
            "candidates" => {
                t.candidates = if value == "full" {
                    CandidateMode::Full
                } else {
                    CandidateMode::Top(num(key, value).map_err(|_| bad(key, value, "a count or `full`"))?)
                }
            }
            "lambda_inter" => t.weights.lambda_inter = float(key, value)?,
            "lambda_intra" => t.weights.lambda_intra = float(key, value)?,
            "lambda_acc" => t.weights.lambda_acc = float(key, value)?,
            "objective" => {
                t.objective = match value {
                    "hefa" => FairnessObjective::Hefa,
                    "kl" | "global_kl" => FairnessObjective::GlobalKl,
                    _ => return Err(bad(key, value, "`hefa` or `kl`")),
                }
            }
            "target" => {
                let keep = match &self.target {
                    TargetMode::Custom { provider, group } => (provider.clone(), group.clone()),
                    _ => (None, None),
                };
                self.target = match value {
                    "uniform_provider" => TargetMode::UniformProvider,
                    "uniform_group" => TargetMode::UniformGroup,
                    "custom" => TargetMode::Custom {
                        provider: keep.0,
                        group: keep.1,
                    },
                    _ => return Err(bad(key, value, "`uniform_provider`, `uniform_group` or `custom`")),
                }
            }
            "target_provider" | "target_group" => {
                let xs = floats(key, value)?;
                let xs = (!xs.is_empty()).then_some(xs);
                let (mut provider, mut group) = match std::mem::replace(&mut self.target, TargetMode::UniformGroup) {
                    TargetMode::Custom { provider, group } => (provider, group),
                    _ => (None, None),
                };
                if key == "target_provider" {
                    provider = xs;
                } else {
                    group = xs;
                }
                self.target = TargetMode::Custom { provider, group };
            }
            "seed" => t.seed = num(key, value)?,
            "ndcg_floor" => t.ndcg_floor = float(key, value)?,
            "hidden" => t.hidden = num(key, value)?,
            "layers" => t.layers = num(key, value)?,
            "init_scale" => {
                t.init_scale = if value == "fan_in" {
                    None
                } else {
                    Some(float(key, value)?)
                }
            }
            "eval_k" => self.eval_k = num(key, value)?,
            "eval_checkpoint" => {
                self.eval_checkpoint = match value {
                    "best" => EvalCheckpoint::Best,
                    "final" => EvalCheckpoint::Final,
                    _ => return Err(bad(key, value, "`best` or `final`")),
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::InvalidArgument(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("key `{k}` repeated"),
                });
            }
            cfg.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    /// Canonical text of every hashed key; parsing it back yields `self`
    /// (apart from `out_dir`).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut stage = None;
        for (k, st, v) in self.entries() {
            if stage != Some(st) {
                let _ = writeln!(out, "# {}", st.name());
                stage = Some(st);
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 over all keys read by `stage` or any earlier stage.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        for (k, st, v) in self.entries() {
            if st <= stage {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash(&self) -> String {
        self.stage_hash(Stage::Report)
    }

    /// The resolved config followed by its hash, as written next to outputs.
    pub fn resolved_text(&self) -> String {
        format!("{}# hash = {}\n", self.to_text(), self.hash())
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_k == 0 || self.kcore == 0 {
            return Err(Error::InvalidArgument("eval_k and kcore must be positive".into()));
        }
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&["lambda_acc=0.001", "candidates=full", "target_group=0.5,0.3,0.2", "init_scale=0"])
            .unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn comments_and_errors() {
        let cfg = ExperimentConfig::parse("# c\n\nlambda_acc = 1e-6  # trailing\nlayers=3\n").unwrap();
        assert_eq!(cfg.train.weights.lambda_acc, 1e-6);
        assert_eq!(cfg.train.layers, 3);
        assert!(matches!(ExperimentConfig::parse("nope = 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("k = 1\nk = 2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("\nlr"), Err(Error::Parse { line: 2, .. })));
        assert!(ExperimentConfig::parse("lr = abc").is_err());
    }

    #[test]
    fn stage_hash_scoping() {
        let base = ExperimentConfig::default();
        let mut changed = base.clone();
        changed.set("lambda_acc", "0.5").unwrap();
        assert_eq!(base.stage_hash(Stage::Prepare), changed.stage_hash(Stage::Prepare));
        assert_eq!(base.stage_hash(Stage::Pretrain), changed.stage_hash(Stage::Pretrain));
        assert_ne!(base.stage_hash(Stage::Adapt), changed.stage_hash(Stage::Adapt));
        let mut moved = base.clone();
        moved.set("out_dir", "elsewhere").unwrap();
        assert_eq!(base.hash(), moved.hash());
    }
}
