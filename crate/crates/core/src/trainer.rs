//! Adapter training: candidate selection, the batched fairness + accuracy
//! objective through the sorting network, Adam, and checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, AdapterParams, InitScale};
use crate::backbone::EmbeddingTable;
use crate::data::{DatasetBundle, GroupPartition};
use crate::diffsort::{soft_permutation, sort_hard, sort_soft, Smoothing, SoftPermutation};
use crate::error::{Error, Result};
use crate::exposure::{accumulate_soft_exposure, PositionBias, Targets, SMOOTHING_EPS};
use crate::losses::{
    diff_ndcg_with_grad, fairness_loss, ideal_dcg_binary, FairnessObjective, FairnessSpec, LossWeights,
};
use crate::metrics::{evaluate, EvalReport, EvalSplit, Scorer};

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length differs");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// How many items per user enter the sorting network during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// Training positives first, then the highest adjusted scores, up to `n`.
    Top(usize),
    /// Every item in the catalog.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta: f64,
    pub k: usize,
    pub candidates: CandidateMode,
    pub weights: LossWeights,
    pub objective: FairnessObjective,
    pub seed: u64,
    /// Relative validation-NDCG drop tolerated by checkpoint selection.
    pub ndcg_floor: f64,
    pub hidden: usize,
    pub layers: usize,
    /// `None` uses fan-in scaling.
    pub init_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 50,
            lr: 1e-3,
            beta: 10.0,
            k: 20,
            candidates: CandidateMode::Top(128),
            weights: LossWeights::default(),
            objective: FairnessObjective::Hefa,
            seed: 2024,
            ndcg_floor: 0.1,
            hidden: 32,
            layers: 2,
            init_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if self.batch_size == 0 || self.k == 0 {
            return bad("batch size and K must be positive");
        }
        if let CandidateMode::Top(n) = self.candidates {
            if n < self.k {
                return bad("candidate count must be at least K");
            }
        }
        if !(0.0..1.0).contains(&self.ndcg_floor) {
            return bad("ndcg floor must lie in [0, 1)");
        }
        self.weights.validate(self.objective)
    }

    pub fn init_scale(&self) -> InitScale {
        self.init_scale.map_or(InitScale::FanIn, InitScale::Fixed)
    }
}

/// Candidate items for `user` given current adjusted scores over the catalog,
/// ordered by descending score (ties by item id).
pub fn select_candidates(scores: &[f64], positives: &[usize], mode: CandidateMode) -> Vec<usize> {
    let order = sort_hard(scores).0;
    match mode {
        CandidateMode::Full => order,
        CandidateMode::Top(cap) => {
            let cap = cap.min(scores.len());
            let mut chosen = vec![false; scores.len()];
            let mut count = 0;
            // positives by score so a cap keeps the strongest ones
            let mut pos: Vec<usize> = positives.to_vec();
            pos.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            for v in pos.into_iter().take(cap) {
                chosen[v] = true;
                count += 1;
            }
            for &v in &order {
                if count >= cap {
                    break;
                }
                if !chosen[v] {
                    chosen[v] = true;
                    count += 1;
                }
            }
            order.into_iter().filter(|&v| chosen[v]).collect()
        }
    }
}

/// Which loss terms the batch objective includes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub fairness: Option<FairnessObjective>,
    pub weights: LossWeights,
}

/// Fixed inputs of the batch objective.
#[derive(Clone, Debug)]
pub struct ObjectiveContext<'a> {
    pub item_provider: &'a [usize],
    pub num_providers: usize,
    pub positives: &'a [Vec<usize>],
    pub targets: &'a Targets,
    pub partition: &'a GroupPartition,
    pub smoothing: Smoothing,
    pub k: usize,
    pub objective: Objective,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub fairness: f64,
    pub accuracy: f64,
    pub total: f64,
    pub exposure: Vec<f64>,
    /// Users that contributed to the accuracy term.
    pub eligible: usize,
}

fn relevance_of(cands: &[usize], positives: &[usize]) -> Vec<f64> {
    cands
        .iter()
        .map(|v| if positives.binary_search(v).is_ok() { 1.0 } else { 0.0 })
        .collect()
}

/// Batch objective as a function of adjusted scores: `scores[i]` are the
/// scores of `cands[i]` for `users[i]`. Returns the loss and, when asked,
/// `dL/dscores` per user.
///
/// Exposure is estimated over this batch only. The first pass computes
/// exposure and relaxed NDCG; the second reruns each user's network with its
/// backward state, so only one user's state is alive at a time.
pub fn objective_from_scores(
    ctx: &ObjectiveContext<'_>,
    users: &[usize],
    cands: &[Vec<usize>],
    scores: &[Vec<f64>],
    want_grad: bool,
) -> Result<(BatchLoss, Option<Vec<Vec<f64>>>)> {
    let bias = PositionBias::new(ctx.k);
    let w = ctx.objective.weights;
    let mut exposure = vec![0.0; ctx.num_providers];
    let mut ndcg_values = Vec::with_capacity(users.len());
    let mut idcgs = Vec::with_capacity(users.len());
    for ((&u, c), s) in users.iter().zip(cands).zip(scores) {
        if c.len() != s.len() {
            return Err(Error::Shape(format!("user {u}: {} candidates, {} scores", c.len(), s.len())));
        }
        let perm = soft_permutation(s, &ctx.smoothing, ctx.k);
        if ctx.objective.fairness.is_some() {
            accumulate_soft_exposure(&mut exposure, &perm, c, ctx.item_provider, &bias);
        }
        let idcg = ideal_dcg_binary(ctx.positives[u].len(), ctx.k);
        idcgs.push(idcg);
        if idcg > 0.0 {
            let rel = relevance_of(c, &ctx.positives[u]);
            ndcg_values.push(diff_ndcg_with_grad(&perm, &rel, ctx.k, idcg).0);
        }
    }

    let (fairness, fair_grad) = match ctx.objective.fairness {
        Some(objective) => {
            let spec = FairnessSpec {
                targets: ctx.targets,
                partition: ctx.partition,
                objective,
                weights: w,
                eps: SMOOTHING_EPS,
            };
            let (v, g) = fairness_loss(&exposure, &spec)?;
            (v, Some(g))
        }
        None => (0.0, None),
    };
    let eligible = ndcg_values.len();
    let accuracy = if eligible > 0 {
        ndcg_values.iter().map(|v| 1.0 - v).sum::<f64>() / eligible as f64
    } else if w.lambda_acc > 0.0 {
        return Err(Error::InvalidArgument("no user in batch has training positives".into()));
    } else {
        0.0
    };
    let total = fairness + w.lambda_acc * accuracy;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {total}")));
    }
    let loss = BatchLoss {
        fairness,
        accuracy,
        total,
        exposure,
        eligible,
    };
    if !want_grad {
        return Ok((loss, None));
    }

    let acc_coef = if eligible > 0 { -w.lambda_acc / eligible as f64 } else { 0.0 };
    let mut grads = Vec::with_capacity(users.len());
    for (i, ((&u, c), s)) in users.iter().zip(cands).zip(scores).enumerate() {
        let sort = sort_soft(s, &ctx.smoothing, ctx.k);
        let perm: &SoftPermutation = sort.permutation();
        let kk = perm.k();
        let mut gp = vec![0.0; perm.n() * kk];
        if let Some(fg) = &fair_grad {
            for (row, &v) in c.iter().enumerate() {
                let g = fg[ctx.item_provider[v]];
                for r in 0..kk.min(bias.k()) {
                    gp[row * kk + r] = g * bias.at(r);
                }
            }
        }
        if idcgs[i] > 0.0 && acc_coef != 0.0 {
            let rel = relevance_of(c, &ctx.positives[u]);
            let (_, g) = diff_ndcg_with_grad(perm, &rel, ctx.k, idcgs[i]);
            for (a, b) in gp.iter_mut().zip(g) {
                *a += acc_coef * b;
            }
        }
        grads.push(sort.backward(&gp, None));
    }
    Ok((loss, Some(grads)))
}

/// Adjusted scores of `cands` for `user`, with the adapter cache.
fn adjusted(
    emb: &EmbeddingTable,
    params: &AdapterParams,
    user: usize,
    cands: &[usize],
) -> (Vec<f64>, crate::adapter::AdapterCache) {
    let items: Vec<&[f64]> = cands.iter().map(|&v| emb.item(v)).collect();
    let (delta, cache) = params.forward_cached(emb.user(user), &items);
    let scores = cands.iter().zip(&delta).map(|(&v, d)| emb.score(user, v) + d).collect();
    (scores, cache)
}

/// Batch objective as a function of the adapter parameters, with the
/// gradient flattened like [`AdapterParams::flatten`].
pub fn batch_objective(
    ctx: &ObjectiveContext<'_>,
    emb: &EmbeddingTable,
    params: &AdapterParams,
    users: &[usize],
    cands: &[Vec<usize>],
    want_grad: bool,
) -> Result<(BatchLoss, Option<Vec<f64>>)> {
    let mut scores = Vec::with_capacity(users.len());
    let mut caches = Vec::with_capacity(users.len());
    for (&u, c) in users.iter().zip(cands) {
        let (s, cache) = adjusted(emb, params, u, c);
        scores.push(s);
        caches.push(cache);
    }
    let (loss, score_grads) = objective_from_scores(ctx, users, cands, &scores, want_grad)?;
    let grad = score_grads.map(|sg| {
        let mut g = vec![0.0; params.num_params()];
        for (cache, gs) in caches.iter().zip(&sg) {
            params.backward(cache, gs, &mut g);
        }
        g
    });
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub fairness_loss: f64,
    pub ndcg_loss: f64,
    pub total_loss: f64,
    pub val_ndcg: f64,
    pub val_gini: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: AdapterParams,
    pub epoch: usize,
    pub val_ndcg: f64,
    pub val_gini: f64,
}

/// Among epochs with validation NDCG at least `(1 - floor) * base_ndcg`, the
/// lowest validation Gini; otherwise the highest NDCG. Ties go to the earlier
/// epoch. Returns an index into `log`.
pub fn select_checkpoint(log: &[EpochLog], floor: f64, base_ndcg: f64) -> Option<usize> {
    if log.is_empty() {
        return None;
    }
    let threshold = (1.0 - floor) * base_ndcg;
    let mut best: Option<usize> = None;
    for (i, e) in log.iter().enumerate() {
        if e.val_ndcg >= threshold && best.is_none_or(|b| e.val_gini < log[b].val_gini) {
            best = Some(i);
        }
    }
    best.or_else(|| {
        let mut b = 0;
        for (i, e) in log.iter().enumerate() {
            if e.val_ndcg > log[b].val_ndcg {
                b = i;
            }
        }
        Some(b)
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub final_params: AdapterParams,
    pub log: Vec<EpochLog>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Validation metrics of the backbone alone.
    pub base_val: EvalReport,
}

/// Trains an adapter on top of the frozen `emb`. Row 0 of the log evaluates
/// the initialization without updating it.
pub fn train_adapter(
    bundle: &DatasetBundle,
    emb: &EmbeddingTable,
    targets: &Targets,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = &bundle.dataset;
    if emb.num_users != ds.num_users || emb.num_items != ds.num_items {
        return Err(Error::Shape(format!(
            "backbone is {}x{} but dataset has {} users and {} items",
            emb.num_users, emb.num_items, ds.num_users, ds.num_items
        )));
    }
    let mut params = init_adapter(emb.dim, cfg.hidden, cfg.layers, cfg.seed, cfg.init_scale())?;
    let mut opt = Adam::new(params.num_params(), cfg.lr);
    let ctx = ObjectiveContext {
        item_provider: &ds.item_provider,
        num_providers: ds.num_providers,
        positives: &bundle.split.train,
        targets,
        partition: &bundle.partition,
        smoothing: Smoothing::new(cfg.beta),
        k: cfg.k,
        objective: Objective {
            fairness: Some(cfg.objective),
            weights: cfg.weights,
        },
    };
    let base_val = evaluate(&Scorer::base(emb), bundle, EvalSplit::Validation, cfg.k)?;
    let train_users: Vec<usize> = (0..ds.num_users).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);

    let candidates_for = |p: &AdapterParams| -> Vec<Vec<usize>> {
        let scorer = Scorer::with_adapter(emb, p);
        (0..ds.num_users)
            .map(|u| select_candidates(&scorer.score_user(u), &bundle.split.train[u], cfg.candidates))
            .collect()
    };

    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let mut step_losses = Vec::new();

    // initialization row
    {
        let cands = candidates_for(&params);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for batch in train_users.chunks(cfg.batch_size) {
            let bc: Vec<Vec<usize>> = batch.iter().map(|&u| cands[u].clone()).collect();
            let (loss, _) = batch_objective(&ctx, emb, &params, batch, &bc, false)?;
            sums.0 += loss.fairness;
            sums.1 += loss.accuracy;
            sums.2 += loss.total;
            batches += 1;
        }
        let val = evaluate(&Scorer::with_adapter(emb, &params), bundle, EvalSplit::Validation, cfg.k)?;
        let n = batches.max(1) as f64;
        log.push(EpochLog {
            epoch: 0,
            fairness_loss: sums.0 / n,
            ndcg_loss: sums.1 / n,
            total_loss: sums.2 / n,
            val_ndcg: val.ndcg,
            val_gini: val.gini,
        });
    }
    // Online bests: the final choice is always one of these two.
    let threshold = (1.0 - cfg.ndcg_floor) * base_val.ndcg;
    let mut best_fair: Option<(usize, AdapterParams)> = None;
    let mut best_acc: (usize, AdapterParams) = (0, params.clone());
    let mut track = |i: usize, log: &[EpochLog], p: &AdapterParams| {
        let e = &log[i];
        if e.val_ndcg >= threshold && best_fair.as_ref().is_none_or(|(b, _)| e.val_gini < log[*b].val_gini) {
            best_fair = Some((i, p.clone()));
        }
        if e.val_ndcg > log[best_acc.0].val_ndcg {
            best_acc = (i, p.clone());
        }
    };
    track(0, &log, &params);

    for epoch in 1..=cfg.epochs {
        let cands = candidates_for(&params);
        let mut order = train_users.clone();
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let bc: Vec<Vec<usize>> = batch.iter().map(|&u| cands[u].clone()).collect();
            let (loss, grad) = batch_objective(&ctx, emb, &params, batch, &bc, true).map_err(|e| match e {
                Error::NonFinite(m) => Error::Diverged(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            let grad = grad.expect("gradient requested");
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("epoch {epoch}, batch {b}: gradient {i} is not finite")));
            }
            let mut flat = params.flatten();
            opt.step(&mut flat, &grad);
            params.set_flat(&flat);
            step_losses.push(loss.total);
            sums.0 += loss.fairness;
            sums.1 += loss.accuracy;
            sums.2 += loss.total;
            batches += 1;
        }
        let val = evaluate(&Scorer::with_adapter(emb, &params), bundle, EvalSplit::Validation, cfg.k)?;
        let n = batches.max(1) as f64;
        log.push(EpochLog {
            epoch,
            fairness_loss: sums.0 / n,
            ndcg_loss: sums.1 / n,
            total_loss: sums.2 / n,
            val_ndcg: val.ndcg,
            val_gini: val.gini,
        });
        track(log.len() - 1, &log, &params);
    }

    let best_idx = select_checkpoint(&log, cfg.ndcg_floor, base_val.ndcg).expect("log has the initialization row");
    let (idx, snap) = best_fair.unwrap_or(best_acc);
    debug_assert_eq!(idx, best_idx);
    let best = Checkpoint {
        params: snap,
        epoch: log[idx].epoch,
        val_ndcg: log[idx].val_ndcg,
        val_gini: log[idx].val_gini,
    };
    Ok(TrainOutcome {
        best,
        final_params: params,
        log,
        step_losses,
        base_val,
    })
}
