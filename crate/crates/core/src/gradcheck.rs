//! Finite-difference suite over every differentiable operation, plus the
//! end-to-end objective on a small fixed instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::{init_adapter, AdapterParams, InitScale};
use crate::backbone::{bpr_gradient, bpr_loss, EmbeddingTable, Triple};
use crate::data::GroupPartition;
use crate::diffsort::{soft_permutation, soft_swap, sort_soft, Smoothing};
use crate::error::Result;
use crate::exposure::{build_target, soft_exposure, PositionBias, TargetMode, Targets, SMOOTHING_EPS};
use crate::grad::{finite_diff_check, FdReport, FD_REL_TOL, FD_STEP};
use crate::losses::{diff_ndcg_with_grad, fairness_loss, ideal_dcg, FairnessObjective, FairnessSpec, LossWeights};
use crate::trainer::{batch_objective, objective_from_scores, Objective, ObjectiveContext};

/// Aggregate over all points checked for one operation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub points: usize,
    pub coords: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    fn new(name: impl Into<String>) -> Self {
        OpCheck {
            name: name.into(),
            points: 0,
            coords: 0,
            failures: 0,
            max_rel_error: 0.0,
        }
    }

    fn absorb(&mut self, report: &FdReport) {
        self.points += 1;
        self.coords += report.coords.len();
        self.failures += report.failures().count();
        self.max_rel_error = self.max_rel_error.max(report.max_rel_error());
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.coords > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    pub fn get(&self, name: &str) -> Option<&OpCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Points closer than this to a ReLU kink are redrawn.
const KINK_MARGIN: f64 = 1e-2;

fn fd<F: FnMut(&[f64]) -> f64>(check: &mut OpCheck, f: F, theta: &[f64], analytic: &[f64]) -> Result<()> {
    let report = finite_diff_check(f, theta, analytic, FD_STEP, FD_REL_TOL)?;
    check.absorb(&report);
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_soft_swap(rng: &mut ChaCha8Rng, points: usize, h: &Smoothing) -> Result<OpCheck> {
    let mut check = OpCheck::new("soft_swap");
    for _ in 0..points {
        let theta = uniform(rng, 2, -1.0, 1.0);
        let w = uniform(rng, 3, -1.0, 1.0);
        let f = |x: &[f64]| {
            let (a2, b2, alpha) = soft_swap(x[0], x[1], h);
            w[0] * a2 + w[1] * b2 + w[2] * alpha
        };
        let (a, b) = (theta[0], theta[1]);
        let (_, _, alpha) = soft_swap(a, b, h);
        let dh = h.derivative(b - a);
        let da2 = [(1.0 - alpha) - (b - a) * dh, alpha + (b - a) * dh];
        let grad = [
            w[0] * da2[0] + w[1] * (1.0 - da2[0]) - w[2] * dh,
            w[0] * da2[1] + w[1] * (1.0 - da2[1]) + w[2] * dh,
        ];
        fd(&mut check, f, &theta, &grad)?;
    }
    Ok(check)
}

fn check_soft_permutation(rng: &mut ChaCha8Rng, points: usize, h: &Smoothing) -> Result<OpCheck> {
    let mut check = OpCheck::new("soft_permutation");
    let (n, k) = (6, 4);
    for _ in 0..points {
        let scores = uniform(rng, n, -1.0, 1.0);
        let w = uniform(rng, n * k, -1.0, 1.0);
        let c = uniform(rng, n, -1.0, 1.0);
        let f = |x: &[f64]| {
            let s = sort_soft(x, h, k);
            dot(s.permutation().as_slice(), &w) + dot(s.sorted_values(), &c)
        };
        let grad = sort_soft(&scores, h, k).backward(&w, Some(&c));
        fd(&mut check, f, &scores, &grad)?;
    }
    Ok(check)
}

fn check_soft_exposure(rng: &mut ChaCha8Rng, points: usize, h: &Smoothing) -> Result<OpCheck> {
    let mut check = OpCheck::new("soft_exposure");
    let item_provider = [0, 0, 1, 1, 1, 2, 2, 2];
    let candidates: Vec<Vec<usize>> = vec![vec![0, 2, 4, 5, 7], vec![1, 3, 5, 6, 0], vec![7, 6, 2, 1, 4]];
    let (n, k) = (5, 3);
    let bias = PositionBias::new(k);
    for _ in 0..points {
        let theta = uniform(rng, candidates.len() * n, -1.0, 1.0);
        let w = uniform(rng, 3, -1.0, 1.0);
        let f = |x: &[f64]| {
            let perms: Vec<_> = x.chunks(n).map(|s| soft_permutation(s, h, k)).collect();
            dot(&soft_exposure(&perms, &candidates, &item_provider, 3, &bias), &w)
        };
        let mut grad = Vec::with_capacity(theta.len());
        for (s, cands) in theta.chunks(n).zip(&candidates) {
            let mut gp = vec![0.0; n * k];
            for (row, &v) in cands.iter().enumerate() {
                for r in 0..k {
                    gp[row * k + r] = w[item_provider[v]] * bias.at(r);
                }
            }
            grad.extend(sort_soft(s, h, k).backward(&gp, None));
        }
        fd(&mut check, f, &theta, &grad)?;
    }
    Ok(check)
}

fn check_fairness(rng: &mut ChaCha8Rng, points: usize, objective: FairnessObjective) -> Result<OpCheck> {
    let mut check = OpCheck::new(match objective {
        FairnessObjective::GlobalKl => "kl_global",
        FairnessObjective::Hefa => "hefa",
    });
    let partition = GroupPartition::from_groups(vec![vec![0, 3], vec![1, 4, 5], vec![2]])?;
    for _ in 0..points {
        let mut provider = uniform(rng, 6, 0.05, 1.0);
        let total: f64 = provider.iter().sum();
        provider.iter_mut().for_each(|t| *t /= total);
        let mut group = uniform(rng, 3, 0.1, 1.0);
        let total: f64 = group.iter().sum();
        group.iter_mut().for_each(|t| *t /= total);
        let targets = Targets { provider, group };
        let weights = LossWeights {
            lambda_inter: rng.gen_range(0.2..2.0),
            lambda_intra: rng.gen_range(0.2..2.0),
            lambda_acc: 0.0,
        };
        let spec = FairnessSpec {
            targets: &targets,
            partition: &partition,
            objective,
            weights,
            eps: SMOOTHING_EPS,
        };
        let exposure = uniform(rng, 6, 0.1, 3.0);
        let (_, grad) = fairness_loss(&exposure, &spec)?;
        let f = |x: &[f64]| fairness_loss(x, &spec).map(|r| r.0).unwrap_or(f64::NAN);
        fd(&mut check, f, &exposure, &grad)?;
    }
    Ok(check)
}

fn check_diff_ndcg(rng: &mut ChaCha8Rng, points: usize, h: &Smoothing) -> Result<OpCheck> {
    let mut check = OpCheck::new("diff_ndcg");
    let (n, k) = (6, 3);
    for _ in 0..points {
        let scores = uniform(rng, n, -1.0, 1.0);
        let mut rel: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        rel[rng.gen_range(0..n)] = 1.0;
        let idcg = ideal_dcg(&rel, k);
        let f = |x: &[f64]| diff_ndcg_with_grad(&soft_permutation(x, h, k), &rel, k, idcg).0;
        let sort = sort_soft(&scores, h, k);
        let (_, gp) = diff_ndcg_with_grad(sort.permutation(), &rel, k, idcg);
        let grad = sort.backward(&gp, None);
        fd(&mut check, f, &scores, &grad)?;
    }
    Ok(check)
}

fn check_mlp(rng: &mut ChaCha8Rng, points: usize, layers: usize) -> Result<OpCheck> {
    let mut check = OpCheck::new(format!("mlp_layers_{layers}"));
    let (d, h) = (3, 4);
    let mut seed = 0u64;
    while check.points < points {
        seed += 1;
        let mut params = init_adapter(d, h, layers, seed, InitScale::Fixed(0.8))?;
        let mut flat = params.flatten();
        flat.iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
        params.set_flat(&flat);
        let user = uniform(rng, d, -1.0, 1.0);
        let items: Vec<Vec<f64>> = (0..4).map(|_| uniform(rng, d, -1.0, 1.0)).collect();
        let item_refs: Vec<&[f64]> = items.iter().map(Vec::as_slice).collect();
        if params.kink_margin(&user, &item_refs) < KINK_MARGIN {
            continue;
        }
        let w = uniform(rng, items.len(), -1.0, 1.0);
        let (_, cache) = params.forward_cached(&user, &item_refs);
        let mut grad = vec![0.0; flat.len()];
        params.backward(&cache, &w, &mut grad);
        let mut probe = params.clone();
        let f = |x: &[f64]| {
            probe.set_flat(x);
            dot(&probe.forward(&user, &item_refs), &w)
        };
        fd(&mut check, f, &flat, &grad)?;
    }
    Ok(check)
}

fn check_bpr(rng: &mut ChaCha8Rng, points: usize) -> Result<OpCheck> {
    let mut check = OpCheck::new("bpr");
    let batch: [Triple; 4] = [(0, 0, 1), (1, 2, 0), (0, 2, 1), (1, 1, 2)];
    let l2 = 0.01;
    for p in 0..points {
        let mut table = EmbeddingTable::init(2, 3, 3, p as u64);
        table.user_emb.iter_mut().chain(table.item_emb.iter_mut()).for_each(|x| *x = rng.gen_range(-1.0..1.0));
        let (gu, gi) = bpr_gradient(&batch, &table, l2);
        let theta: Vec<f64> = table.user_emb.iter().chain(&table.item_emb).copied().collect();
        let grad: Vec<f64> = gu.into_iter().chain(gi).collect();
        let nu = table.user_emb.len();
        let mut probe = table.clone();
        let f = |x: &[f64]| {
            probe.user_emb.copy_from_slice(&x[..nu]);
            probe.item_emb.copy_from_slice(&x[nu..]);
            let mut reg = 0.0;
            for &(u, pi, ni) in &batch {
                for row in [probe.user(u), probe.item(pi), probe.item(ni)] {
                    reg += 0.5 * l2 * dot(row, row);
                }
            }
            bpr_loss(&batch, &probe) + reg
        };
        fd(&mut check, f, &theta, &grad)?;
    }
    Ok(check)
}

/// The fixed end-to-end instance: 4 users, 8 items, 3 providers, full
/// candidate lists, K = 3.
pub struct ToyInstance {
    pub emb: EmbeddingTable,
    pub item_provider: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub partition: GroupPartition,
    pub targets: Targets,
    pub users: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub k: usize,
}

impl ToyInstance {
    pub fn new(seed: u64) -> Result<Self> {
        let mut emb = EmbeddingTable::init(4, 8, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        emb.user_emb.iter_mut().chain(emb.item_emb.iter_mut()).for_each(|x| *x = rng.gen_range(-1.0..1.0));
        let partition = GroupPartition::from_groups(vec![vec![0], vec![1, 2]])?;
        let targets = build_target(&TargetMode::UniformGroup, &partition)?;
        Ok(ToyInstance {
            emb,
            item_provider: vec![0, 0, 0, 1, 1, 1, 2, 2],
            positives: vec![vec![0, 3], vec![1, 6], vec![2, 4, 7], vec![5]],
            partition,
            targets,
            users: (0..4).collect(),
            candidates: vec![(0..8).collect(); 4],
            k: 3,
        })
    }

    pub fn context(&self, objective: Objective, h: Smoothing) -> ObjectiveContext<'_> {
        ObjectiveContext {
            item_provider: &self.item_provider,
            num_providers: 3,
            positives: &self.positives,
            targets: &self.targets,
            partition: &self.partition,
            smoothing: h,
            k: self.k,
            objective,
        }
    }
}

/// Objective variants checked on the toy instance.
pub fn toy_objectives() -> Vec<(&'static str, Objective)> {
    let w = |acc: f64| LossWeights {
        lambda_inter: 1.0,
        lambda_intra: 1.0,
        lambda_acc: acc,
    };
    vec![
        ("kl", Objective { fairness: Some(FairnessObjective::GlobalKl), weights: w(0.0) }),
        ("hefa", Objective { fairness: Some(FairnessObjective::Hefa), weights: w(0.0) }),
        ("diff_ndcg", Objective { fairness: None, weights: w(1.0) }),
        ("total", Objective { fairness: Some(FairnessObjective::Hefa), weights: w(0.5) }),
    ]
}

fn check_toy(points: usize, h: &Smoothing) -> Result<Vec<OpCheck>> {
    let toy = ToyInstance::new(11)?;
    let mut out = Vec::new();
    for (name, objective) in toy_objectives() {
        let ctx = toy.context(objective, *h);
        let mut wrt_params = OpCheck::new(format!("toy/{name}/adapter_params"));
        let mut wrt_scores = OpCheck::new(format!("toy/{name}/scores"));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut seed = 100u64;
        while wrt_params.points < points {
            seed += 1;
            let params: AdapterParams = init_adapter(4, 4, 2, seed, InitScale::Fixed(0.6))?;
            let near_kink = toy.users.iter().any(|&u| {
                let items: Vec<&[f64]> = toy.candidates[u].iter().map(|&v| toy.emb.item(v)).collect();
                params.kink_margin(toy.emb.user(u), &items) < KINK_MARGIN
            });
            if near_kink {
                continue;
            }
            let flat = params.flatten();
            let (_, grad) = batch_objective(&ctx, &toy.emb, &params, &toy.users, &toy.candidates, true)?;
            let mut probe = params.clone();
            let f = |x: &[f64]| {
                probe.set_flat(x);
                batch_objective(&ctx, &toy.emb, &probe, &toy.users, &toy.candidates, false)
                    .map(|r| r.0.total)
                    .unwrap_or(f64::NAN)
            };
            fd(&mut wrt_params, f, &flat, &grad.expect("gradient requested"))?;

            let scores = uniform(&mut rng, toy.users.len() * 8, -1.0, 1.0);
            let rows = |x: &[f64]| -> Vec<Vec<f64>> { x.chunks(8).map(<[f64]>::to_vec).collect() };
            let (_, sg) = objective_from_scores(&ctx, &toy.users, &toy.candidates, &rows(&scores), true)?;
            let grad: Vec<f64> = sg.expect("gradient requested").concat();
            let f = |x: &[f64]| {
                objective_from_scores(&ctx, &toy.users, &toy.candidates, &rows(x), false)
                    .map(|r| r.0.total)
                    .unwrap_or(f64::NAN)
            };
            fd(&mut wrt_scores, f, &scores, &grad)?;
        }
        out.push(wrt_params);
        out.push(wrt_scores);
    }
    Ok(out)
}

/// Runs the whole suite: `points` random points per primitive and per toy
/// objective, at the default smoothing steepness.
pub fn run_suite(points: usize, seed: u64) -> Result<GradCheckReport> {
    let h = Smoothing::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = vec![
        check_soft_swap(&mut rng, points, &h)?,
        check_soft_permutation(&mut rng, points, &h)?,
        check_soft_exposure(&mut rng, points, &h)?,
        check_fairness(&mut rng, points, FairnessObjective::GlobalKl)?,
        check_fairness(&mut rng, points, FairnessObjective::Hefa)?,
        check_diff_ndcg(&mut rng, points, &h)?,
    ];
    for layers in 1..=3 {
        checks.push(check_mlp(&mut rng, points, layers)?);
    }
    checks.push(check_bpr(&mut rng, points)?);
    checks.extend(check_toy(points, &h)?);
    Ok(GradCheckReport { checks })
}
