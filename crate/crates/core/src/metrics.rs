//! Evaluation: masked top-K ranking, accuracy (NDCG, HR, MRR) and exposure
//! fairness (Gini, entropy, coefficient of variation), plus per-group
//! breakdowns.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::backbone::EmbeddingTable;
use crate::data::{DatasetBundle, GroupPartition};
use crate::diffsort::top_k;
use crate::error::{Error, Result};
use crate::exposure::{hard_exposure, PositionBias};
use crate::losses::ndcg_hard;

fn check_exposure(e: &[f64]) -> Result<f64> {
    if e.is_empty() {
        return Err(Error::InvalidArgument("empty exposure vector".into()));
    }
    if e.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidArgument("exposure must be non-negative".into()));
    }
    let total: f64 = e.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("exposure vector is all zero".into()));
    }
    Ok(total)
}

/// Gini index via the sorted form `sum_i (2i - n - 1) x_(i) / (n sum x)`.
pub fn gini(e: &[f64]) -> Result<f64> {
    let total = check_exposure(e)?;
    let mut sorted = e.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    Ok((weighted / (n * total)).max(0.0))
}

/// Shannon entropy in bits of `e / sum(e)`.
pub fn entropy_bits(e: &[f64]) -> Result<f64> {
    let total = check_exposure(e)?;
    let mut support = e.iter().copied().filter(|&x| x > 0.0);
    let first = support.next().unwrap_or(0.0);
    if support.clone().all(|x| x == first) {
        // uniform over the support: avoid rounding in the sum
        return Ok((1 + support.count() as u64) as f64).map(f64::log2);
    }
    Ok(e.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let p = x / total;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Population standard deviation over the mean.
pub fn cv(e: &[f64]) -> Result<f64> {
    let total = check_exposure(e)?;
    if e.iter().all(|&x| x == e[0]) {
        return Ok(0.0);
    }
    let n = e.len() as f64;
    let mean = total / n;
    let var = e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Top `k` of `scores` after removing the (sorted) `masked` items.
pub fn rank_masked(scores: &[f64], masked: &[&[usize]], k: usize) -> Vec<usize> {
    let mut s = scores.to_vec();
    for list in masked {
        for &v in *list {
            s[v] = f64::NEG_INFINITY;
        }
    }
    let excluded: usize = s.iter().filter(|x| **x == f64::NEG_INFINITY).count();
    let keep = k.min(scores.len() - excluded);
    top_k(&s, keep)
}

/// Frozen backbone plus an optional adapter.
#[derive(Clone, Copy, Debug)]
pub struct Scorer<'a> {
    pub emb: &'a EmbeddingTable,
    pub adapter: Option<&'a AdapterParams>,
}

impl<'a> Scorer<'a> {
    pub fn base(emb: &'a EmbeddingTable) -> Self {
        Scorer { emb, adapter: None }
    }

    pub fn with_adapter(emb: &'a EmbeddingTable, adapter: &'a AdapterParams) -> Self {
        Scorer {
            emb,
            adapter: Some(adapter),
        }
    }

    /// Scores of `user` over the whole catalog.
    pub fn score_user(&self, user: usize) -> Vec<f64> {
        let mut s = self.emb.score_row(user);
        if let Some(a) = self.adapter {
            let items: Vec<&[f64]> = (0..self.emb.num_items).map(|v| self.emb.item(v)).collect();
            let delta = a.forward(self.emb.user(user), &items);
            for (x, d) in s.iter_mut().zip(delta) {
                *x += d;
            }
        }
        s
    }
}

/// Which held-out set a ranking is evaluated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    /// Mask training items, score against validation items.
    Validation,
    /// Mask training and validation items, score against test items.
    Test,
}

/// Top-K list for one user under the masking rule of `split`.
pub fn rank_for_eval(scorer: &Scorer<'_>, bundle: &DatasetBundle, user: usize, split: EvalSplit, k: usize) -> Vec<usize> {
    let scores = scorer.score_user(user);
    let train = bundle.split.train[user].as_slice();
    match split {
        EvalSplit::Validation => rank_masked(&scores, &[train], k),
        EvalSplit::Test => rank_masked(&scores, &[train, bundle.split.val[user].as_slice()], k),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub ndcg: f64,
    pub hr: f64,
    pub mrr: f64,
    /// Users with a non-empty held-out set.
    pub users: usize,
}

/// NDCG@K with binary relevance, HR@K as `|top-K ∩ held-out| / min(K, |held-out|)`
/// and MRR@K as the reciprocal rank of the first hit (0 if none). Users with
/// an empty held-out set are skipped.
pub fn accuracy_metrics(lists: &[Vec<usize>], held_out: &[Vec<usize>], num_items: usize, k: usize) -> AccuracyMetrics {
    let (mut ndcg, mut hr, mut mrr, mut users) = (0.0, 0.0, 0.0, 0usize);
    let mut rel = vec![0.0; num_items];
    for (list, truth) in lists.iter().zip(held_out) {
        if truth.is_empty() {
            continue;
        }
        for &v in truth {
            rel[v] = 1.0;
        }
        let list = &list[..list.len().min(k)];
        let hits = list.iter().filter(|&&v| rel[v] > 0.0).count();
        ndcg += ndcg_hard(list, &rel, k).unwrap_or(0.0);
        hr += hits as f64 / k.min(truth.len()) as f64;
        mrr += list
            .iter()
            .position(|&v| rel[v] > 0.0)
            .map_or(0.0, |r| 1.0 / (r + 1) as f64);
        users += 1;
        for &v in truth {
            rel[v] = 0.0;
        }
    }
    if users == 0 {
        return AccuracyMetrics {
            ndcg: 0.0,
            hr: 0.0,
            mrr: 0.0,
            users: 0,
        };
    }
    let n = users as f64;
    AccuracyMetrics {
        ndcg: ndcg / n,
        hr: hr / n,
        mrr: mrr / n,
        users,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: usize,
    pub providers: usize,
    pub share: f64,
    /// Gini over the group's provider exposures; 0 when the group received none.
    pub within_gini: f64,
}

pub fn subgroup_report(exposure: &[f64], partition: &GroupPartition) -> Result<Vec<GroupReport>> {
    let total = check_exposure(exposure)?;
    partition
        .group_members
        .iter()
        .enumerate()
        .map(|(c, members)| {
            let e: Vec<f64> = members.iter().map(|&s| exposure[s]).collect();
            let sum: f64 = e.iter().sum();
            let within_gini = if sum > 0.0 { gini(&e)? } else { 0.0 };
            Ok(GroupReport {
                group: c,
                providers: members.len(),
                share: sum / total,
                within_gini,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub ndcg: f64,
    pub hr: f64,
    pub mrr: f64,
    pub gini: f64,
    pub entropy_bits: f64,
    pub cv: f64,
    pub users: usize,
    pub groups: Vec<GroupReport>,
    #[serde(skip)]
    pub exposure: Vec<f64>,
}

impl EvalReport {
    /// Range invariants every report must satisfy.
    pub fn check_ranges(&self) -> Result<()> {
        let l = self.exposure.len() as f64;
        let ok = (0.0..=1.0).contains(&self.ndcg)
            && (0.0..=1.0).contains(&self.hr)
            && (0.0..=1.0).contains(&self.mrr)
            && (0.0..1.0).contains(&self.gini)
            && self.entropy_bits >= 0.0
            && self.entropy_bits <= l.log2() + 1e-12
            && self.cv >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("metric out of range: {self:?}")))
        }
    }
}

/// Ranks every user, then scores accuracy on the held-out split and exposure
/// fairness over all users' lists.
pub fn evaluate(scorer: &Scorer<'_>, bundle: &DatasetBundle, split: EvalSplit, k: usize) -> Result<EvalReport> {
    let ds = &bundle.dataset;
    let lists: Vec<Vec<usize>> = (0..ds.num_users)
        .map(|u| rank_for_eval(scorer, bundle, u, split, k))
        .collect();
    let held_out = match split {
        EvalSplit::Validation => &bundle.split.val,
        EvalSplit::Test => &bundle.split.test,
    };
    let acc = accuracy_metrics(&lists, held_out, ds.num_items, k);
    let exposure = hard_exposure(&lists, &ds.item_provider, ds.num_providers, &PositionBias::new(k));
    let report = EvalReport {
        k,
        ndcg: acc.ndcg,
        hr: acc.hr,
        mrr: acc.mrr,
        gini: gini(&exposure)?,
        entropy_bits: entropy_bits(&exposure)?,
        cv: cv(&exposure)?,
        users: acc.users,
        groups: subgroup_report(&exposure, &bundle.partition)?,
        exposure,
    };
    report.check_ranges()?;
    Ok(report)
}
