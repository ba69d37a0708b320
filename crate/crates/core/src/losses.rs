//! Fairness losses (global KL and the hierarchical loss), hard and relaxed
//! NDCG, and the combined objective.

use serde::{Deserialize, Serialize};

use crate::data::GroupPartition;
use crate::diffsort::SoftPermutation;
use crate::error::{Error, Result};
use crate::exposure::{kl, ExposureState, Targets};
use crate::grad::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    pub lambda_acc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_inter: 1.0,
            lambda_intra: 1.0,
            lambda_acc: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, objective: FairnessObjective) -> Result<()> {
        let all = [self.lambda_inter, self.lambda_intra, self.lambda_acc];
        if all.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be non-negative: {self:?}")));
        }
        if objective == FairnessObjective::Hefa && self.lambda_inter + self.lambda_intra <= 0.0 {
            return Err(Error::InvalidArgument(
                "lambda_inter + lambda_intra must be positive for the hierarchical loss".into(),
            ));
        }
        Ok(())
    }
}

/// Which fairness term drives adapter training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessObjective {
    /// `KL(p || t)` over providers.
    GlobalKl,
    /// Weighted inter-group plus intra-group KL.
    Hefa,
}

impl FairnessObjective {
    pub fn name(self) -> &'static str {
        match self {
            FairnessObjective::GlobalKl => "kl",
            FairnessObjective::Hefa => "hefa",
        }
    }
}

pub fn kl_global(state: &ExposureState) -> Result<f64> {
    kl(&state.p, &state.t)
}

/// `lambda_inter KL(p^G || t^G) + lambda_intra sum_c p^G_c KL(p^(c) || t^(c))`.
pub fn hefa_loss(state: &ExposureState, w: &LossWeights) -> Result<f64> {
    let inter = kl(&state.p_group, &state.t_group)?;
    let mut intra = 0.0;
    for c in 0..state.p_group.len() {
        intra += state.p_group[c] * kl(&state.p_within[c], &state.t_within[c])?;
    }
    Ok(w.lambda_inter * inter + w.lambda_intra * intra)
}

/// Everything the fairness term needs besides the exposure vector.
#[derive(Clone, Debug)]
pub struct FairnessSpec<'a> {
    pub targets: &'a Targets,
    pub partition: &'a GroupPartition,
    pub objective: FairnessObjective,
    pub weights: LossWeights,
    pub eps: f64,
}

/// `sum_i p_i (ln p_i - ln q_i)` on the tape, `q` constant and positive.
fn tape_kl(tape: &mut Tape, p: &[Var], q: &[f64]) -> Var {
    let terms: Vec<Var> = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let lp = tape.ln(pi);
            let diff = tape.add_const(lp, -qi.ln());
            tape.mul(pi, diff)
        })
        .collect();
    tape.sum(&terms)
}

fn smoothed_or_raw(x: &[f64], eps: f64) -> Vec<f64> {
    if eps > 0.0 && x.iter().any(|&v| v == 0.0) {
        crate::exposure::smooth(x, eps)
    } else {
        x.to_vec()
    }
}

/// Value and gradient of the fairness term with respect to raw exposure.
pub fn fairness_loss(exposure: &[f64], spec: &FairnessSpec<'_>) -> Result<(f64, Vec<f64>)> {
    let l = exposure.len();
    if spec.targets.provider.len() != l || spec.partition.provider_group.len() != l {
        return Err(Error::Shape("exposure length differs from provider count".into()));
    }
    let t = smoothed_or_raw(&spec.targets.provider, spec.eps);
    let t_group = smoothed_or_raw(&spec.targets.group, spec.eps);

    let mut tape = Tape::new();
    let e = tape.leaves(exposure);
    let shifted: Vec<Var> = e.iter().map(|&x| tape.add_const(x, spec.eps)).collect();
    let z = tape.sum(&shifted);
    let p: Vec<Var> = shifted.iter().map(|&x| tape.div(x, z)).collect();

    let root = match spec.objective {
        FairnessObjective::GlobalKl => tape_kl(&mut tape, &p, &t),
        FairnessObjective::Hefa => {
            let mut p_group = Vec::with_capacity(spec.partition.num_groups);
            let mut weighted_intra = Vec::with_capacity(spec.partition.num_groups);
            for members in &spec.partition.group_members {
                let pm: Vec<Var> = members.iter().map(|&s| p[s]).collect();
                let pg = tape.sum(&pm);
                let tg: f64 = members.iter().map(|&s| t[s]).sum();
                let within: Vec<Var> = pm.iter().map(|&x| tape.div(x, pg)).collect();
                let t_within: Vec<f64> = members.iter().map(|&s| t[s] / tg).collect();
                let d = tape_kl(&mut tape, &within, &t_within);
                weighted_intra.push(tape.mul(pg, d));
                p_group.push(pg);
            }
            let inter = tape_kl(&mut tape, &p_group, &t_group);
            let intra = tape.sum(&weighted_intra);
            let a = tape.scale(inter, spec.weights.lambda_inter);
            let b = tape.scale(intra, spec.weights.lambda_intra);
            tape.add(a, b)
        }
    };
    let value = tape.value(root);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("fairness loss is {value}")));
    }
    let grads = tape.backward(root)?;
    Ok((value, e.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Discount of 0-based rank `r`.
fn discount(r: usize) -> f64 {
    1.0 / ((r + 2) as f64).log2()
}

fn gain(rel: f64) -> f64 {
    rel.exp2() - 1.0
}

/// IDCG@K from relevance labels.
pub fn ideal_dcg(relevance: &[f64], k: usize) -> f64 {
    let mut sorted: Vec<f64> = relevance.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.iter().take(k).enumerate().map(|(r, &x)| gain(x) * discount(r)).sum()
}

/// IDCG@K for `count` binary-relevant items.
pub fn ideal_dcg_binary(count: usize, k: usize) -> f64 {
    (0..count.min(k)).map(discount).sum()
}

/// NDCG@K of a ranked list of indices into `relevance`; `None` when the
/// ideal DCG is zero.
pub fn ndcg_hard(ranked: &[usize], relevance: &[f64], k: usize) -> Option<f64> {
    let idcg = ideal_dcg(relevance, k);
    if idcg <= 0.0 {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, &v)| gain(relevance[v]) * discount(r))
        .sum();
    Some(dcg / idcg)
}

/// Relaxed NDCG: expected relevance per rank `r_k = sum_v P(v,k) r_v` pushed
/// through the usual gain and discount. Returns the value and
/// `d value / d P` (item-major like the permutation).
pub fn diff_ndcg_with_grad(perm: &SoftPermutation, relevance: &[f64], k: usize, idcg: f64) -> (f64, Vec<f64>) {
    assert_eq!(perm.n(), relevance.len(), "relevance length differs from permutation");
    let k = k.min(perm.k());
    let mut expected = vec![0.0; k];
    for (v, &rv) in relevance.iter().enumerate() {
        if rv != 0.0 {
            for (r, slot) in expected.iter_mut().enumerate() {
                *slot += perm.get(v, r) * rv;
            }
        }
    }
    let value: f64 = expected.iter().enumerate().map(|(r, &x)| gain(x) * discount(r)).sum::<f64>() / idcg;
    // d/dP(v,r) = 2^{rhat_r} ln2 * r_v * disc(r) / idcg
    let slope: Vec<f64> = expected
        .iter()
        .enumerate()
        .map(|(r, &x)| x.exp2() * std::f64::consts::LN_2 * discount(r) / idcg)
        .collect();
    let mut grad = vec![0.0; perm.n() * perm.k()];
    for (v, &rv) in relevance.iter().enumerate() {
        if rv != 0.0 {
            for (r, s) in slope.iter().enumerate() {
                grad[v * perm.k() + r] = s * rv;
            }
        }
    }
    (value, grad)
}

/// Relaxed NDCG with the ideal DCG taken from `relevance`.
pub fn diff_ndcg(perm: &SoftPermutation, relevance: &[f64], k: usize) -> Option<f64> {
    let idcg = ideal_dcg(relevance, k);
    (idcg > 0.0).then(|| diff_ndcg_with_grad(perm, relevance, k, idcg).0)
}

/// Mean of `1 - diffNDCG` over eligible users.
pub fn diff_ndcg_loss(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no user with relevant items in batch".into()));
    }
    Ok(values.iter().map(|v| 1.0 - v).sum::<f64>() / values.len() as f64)
}

pub fn total_loss(fairness: f64, accuracy: f64, w: &LossWeights) -> f64 {
    fairness + w.lambda_acc * accuracy
}
