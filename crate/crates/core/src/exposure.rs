//! Provider exposure under logarithmic position bias, targets, and the
//! inter-/intra-group decomposition of the exposure distribution.

use serde::{Deserialize, Serialize};

use crate::data::GroupPartition;
use crate::diffsort::SoftPermutation;
use crate::error::{Error, Result};

/// Added to every entry before normalizing, so no KL term sees `log 0`.
pub const SMOOTHING_EPS: f64 = 1e-12;

/// `b_k = 1 / log2(1 + k)` for ranks `k = 1..=K` (stored 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct PositionBias {
    weights: Vec<f64>,
}

impl PositionBias {
    pub fn new(k: usize) -> Self {
        PositionBias {
            weights: (1..=k).map(|r| 1.0 / ((1 + r) as f64).log2()).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Weight of 0-based rank `r`.
    pub fn at(&self, r: usize) -> f64 {
        self.weights[r]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `e_s`: summed position weights of provider `s` items over all lists.
/// Lists longer than the bias are truncated.
pub fn hard_exposure(
    lists: &[Vec<usize>],
    item_provider: &[usize],
    num_providers: usize,
    bias: &PositionBias,
) -> Vec<f64> {
    let mut e = vec![0.0; num_providers];
    for list in lists {
        for (r, &v) in list.iter().take(bias.k()).enumerate() {
            e[item_provider[v]] += bias.at(r);
        }
    }
    e
}

/// Expected exposure `sum_u sum_v sum_k P_u(v,k) b_k`, where row `v` of
/// `perms[u]` refers to item `candidates[u][v]`. Users are reduced in order.
pub fn soft_exposure(
    perms: &[SoftPermutation],
    candidates: &[Vec<usize>],
    item_provider: &[usize],
    num_providers: usize,
    bias: &PositionBias,
) -> Vec<f64> {
    let mut e = vec![0.0; num_providers];
    for (perm, cands) in perms.iter().zip(candidates) {
        accumulate_soft_exposure(&mut e, perm, cands, item_provider, bias);
    }
    e
}

pub(crate) fn accumulate_soft_exposure(
    e: &mut [f64],
    perm: &SoftPermutation,
    cands: &[usize],
    item_provider: &[usize],
    bias: &PositionBias,
) {
    assert_eq!(perm.n(), cands.len(), "candidate list does not match permutation");
    let k = perm.k().min(bias.k());
    for (row, &v) in cands.iter().enumerate() {
        let expected: f64 = perm.row(row)[..k]
            .iter()
            .zip(bias.weights())
            .map(|(p, b)| p * b)
            .sum();
        e[item_provider[v]] += expected;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// `t_s = 1/L`; the group target is the aggregated provider target.
    UniformProvider,
    /// `t^G_c = 1/C`, uniform within each group.
    UniformGroup,
    /// Explicit vectors. A missing provider target defaults to uniform; a
    /// missing group target defaults to the aggregated provider target.
    Custom {
        provider: Option<Vec<f64>>,
        group: Option<Vec<f64>>,
    },
}

impl TargetMode {
    pub fn name(&self) -> &'static str {
        match self {
            TargetMode::UniformProvider => "uniform_provider",
            TargetMode::UniformGroup => "uniform_group",
            TargetMode::Custom { .. } => "custom",
        }
    }
}

/// Provider-level target `t` and group-level target `t^G`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub provider: Vec<f64>,
    pub group: Vec<f64>,
}

impl Targets {
    /// `t̄^G_c = sum_{s in G_c} t_s`.
    pub fn aggregated(&self, partition: &GroupPartition) -> Vec<f64> {
        partition
            .group_members
            .iter()
            .map(|m| m.iter().map(|&s| self.provider[s]).sum())
            .collect()
    }
}

fn check_distribution(name: &str, x: &[f64], len: usize) -> Result<()> {
    if x.len() != len {
        return Err(Error::InvalidArgument(format!(
            "{name} target has length {}, expected {len}",
            x.len()
        )));
    }
    if x.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} target has negative or non-finite entries")));
    }
    let total: f64 = x.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{name} target sums to {total}, not 1")));
    }
    Ok(())
}

pub fn build_target(mode: &TargetMode, partition: &GroupPartition) -> Result<Targets> {
    let l = partition.provider_group.len();
    let c = partition.num_groups;
    if l == 0 {
        return Err(Error::InvalidArgument("no providers".into()));
    }
    let targets = match mode {
        TargetMode::UniformProvider => {
            let provider = vec![1.0 / l as f64; l];
            let mut t = Targets {
                provider,
                group: Vec::new(),
            };
            t.group = t.aggregated(partition);
            t
        }
        TargetMode::UniformGroup => {
            if let Some(empty) = partition.group_members.iter().position(Vec::is_empty) {
                return Err(Error::InvalidArgument(format!("group {empty} has no providers")));
            }
            let mut provider = vec![0.0; l];
            for members in &partition.group_members {
                let share = 1.0 / (c as f64 * members.len() as f64);
                for &s in members {
                    provider[s] = share;
                }
            }
            Targets {
                provider,
                group: vec![1.0 / c as f64; c],
            }
        }
        TargetMode::Custom { provider, group } => {
            let provider = match provider {
                Some(p) => {
                    check_distribution("provider", p, l)?;
                    p.clone()
                }
                None => vec![1.0 / l as f64; l],
            };
            let mut t = Targets {
                provider,
                group: Vec::new(),
            };
            t.group = match group {
                Some(g) => {
                    check_distribution("group", g, c)?;
                    g.clone()
                }
                None => t.aggregated(partition),
            };
            t
        }
    };
    if let Some(c0) = targets.aggregated(partition).iter().position(|&x| x <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "providers of group {c0} have zero total target"
        )));
    }
    Ok(targets)
}

/// `(x + eps) / sum(x + eps)`.
pub fn smooth(x: &[f64], eps: f64) -> Vec<f64> {
    let total: f64 = x.iter().map(|v| v + eps).sum();
    x.iter().map(|v| (v + eps) / total).collect()
}

/// Exposure, its distribution, and every quantity of the hierarchical split.
/// Within-group vectors follow the order of `partition.group_members`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureState {
    pub exposure: Vec<f64>,
    pub p: Vec<f64>,
    pub t: Vec<f64>,
    pub p_group: Vec<f64>,
    pub t_group: Vec<f64>,
    pub t_group_agg: Vec<f64>,
    pub p_within: Vec<Vec<f64>>,
    pub t_within: Vec<Vec<f64>>,
}

/// Fills the hierarchical statistics. With `eps > 0` the exposure is smoothed
/// (and targets containing zeros too); with `eps == 0` empty groups are an
/// error.
pub fn hierarchical_stats(
    exposure: &[f64],
    targets: &Targets,
    partition: &GroupPartition,
    eps: f64,
) -> Result<ExposureState> {
    let l = exposure.len();
    if targets.provider.len() != l || partition.provider_group.len() != l {
        return Err(Error::Shape(format!(
            "exposure has {l} providers, target {} and partition {}",
            targets.provider.len(),
            partition.provider_group.len()
        )));
    }
    if targets.group.len() != partition.num_groups {
        return Err(Error::Shape("group target length differs from group count".into()));
    }
    let total: f64 = exposure.iter().sum();
    if eps == 0.0 && !(total > 0.0) {
        return Err(Error::InvalidArgument("total exposure must be positive".into()));
    }
    let p = smooth(exposure, eps);
    let t = if eps > 0.0 && targets.provider.iter().any(|&x| x == 0.0) {
        smooth(&targets.provider, eps)
    } else {
        targets.provider.clone()
    };
    let t_group = if eps > 0.0 && targets.group.iter().any(|&x| x == 0.0) {
        smooth(&targets.group, eps)
    } else {
        targets.group.clone()
    };

    let mut p_group = Vec::with_capacity(partition.num_groups);
    let mut t_group_agg = Vec::with_capacity(partition.num_groups);
    let mut p_within = Vec::with_capacity(partition.num_groups);
    let mut t_within = Vec::with_capacity(partition.num_groups);
    for (c, members) in partition.group_members.iter().enumerate() {
        let pg: f64 = members.iter().map(|&s| p[s]).sum();
        let tg: f64 = members.iter().map(|&s| t[s]).sum();
        if !(tg > 0.0) {
            return Err(Error::InvalidArgument(format!("group {c} has zero aggregated target")));
        }
        if !(pg > 0.0) {
            return Err(Error::ZeroProbability(format!("group {c} has zero exposure")));
        }
        p_group.push(pg);
        t_group_agg.push(tg);
        p_within.push(members.iter().map(|&s| p[s] / pg).collect());
        t_within.push(members.iter().map(|&s| t[s] / tg).collect());
    }
    Ok(ExposureState {
        exposure: exposure.to_vec(),
        p,
        t,
        p_group,
        t_group,
        t_group_agg,
        p_within,
        t_within,
    })
}

/// `sum p ln(p/q)`; terms with `p = 0` contribute 0.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Err(Error::ZeroProbability(format!("target entry {i} is zero")));
        }
        total += a * (a / b).ln();
    }
    Ok(total)
}

/// The three terms of the decomposition plus the direct global KL.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub global: f64,
    pub inter: f64,
    pub intra: f64,
    pub calibration: f64,
}

impl Decomposition {
    pub fn residual(&self) -> f64 {
        (self.global - (self.inter + self.intra + self.calibration)).abs()
    }
}

impl ExposureState {
    pub fn decompose(&self) -> Result<Decomposition> {
        let global = kl(&self.p, &self.t)?;
        let inter = kl(&self.p_group, &self.t_group)?;
        let mut intra = 0.0;
        let mut calibration = 0.0;
        for c in 0..self.p_group.len() {
            intra += self.p_group[c] * kl(&self.p_within[c], &self.t_within[c])?;
            if self.p_group[c] > 0.0 {
                calibration += self.p_group[c] * (self.t_group[c] / self.t_group_agg[c]).ln();
            }
        }
        Ok(Decomposition {
            global,
            inter,
            intra,
            calibration,
        })
    }
}

/// Residual of the identity `KL(p||t) = inter + intra + calibration`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityCheck {
    pub terms: Decomposition,
    pub residual: f64,
    pub passed: bool,
}

pub fn verify_decomposition(state: &ExposureState, tol: f64) -> Result<IdentityCheck> {
    let zero = |xs: &[f64]| xs.iter().any(|&x| x <= 0.0);
    if zero(&state.p) || zero(&state.t) || zero(&state.t_group) {
        return Err(Error::ZeroProbability(
            "decomposition requires strictly positive distributions".into(),
        ));
    }
    let terms = state.decompose()?;
    let residual = terms.residual();
    Ok(IdentityCheck {
        terms,
        residual,
        passed: residual <= tol,
    })
}
