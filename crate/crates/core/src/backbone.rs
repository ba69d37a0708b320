//! Matrix-factorization backbone pretrained with BPR, then frozen.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::ByteReader;
use crate::data::{DatasetBundle, InteractionDataset, SplitAssignment};
use crate::error::{io_err, Error, Result};
use crate::metrics::{evaluate, EvalSplit, Scorer};
use crate::trainer::Adam;

/// Frozen user and item embeddings; scores are plain inner products.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub seed: u64,
    /// `num_users x dim`, row-major.
    pub user_emb: Vec<f64>,
    /// `num_items x dim`, row-major.
    pub item_emb: Vec<f64>,
}

impl EmbeddingTable {
    /// Seeded `uniform(-0.1, 0.1)` initialization.
    pub fn init(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect::<Vec<f64>>();
        let user_emb = draw(num_users * dim);
        let item_emb = draw(num_items * dim);
        EmbeddingTable {
            num_users,
            num_items,
            dim,
            seed,
            user_emb,
            item_emb,
        }
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.user_emb[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, v: usize) -> &[f64] {
        &self.item_emb[v * self.dim..(v + 1) * self.dim]
    }

    pub fn score(&self, u: usize, v: usize) -> f64 {
        dot(self.user(u), self.item(v))
    }

    /// `dot(e_u, e_v)` for every item.
    pub fn score_row(&self, u: usize) -> Vec<f64> {
        let eu = self.user(u);
        self.item_emb.chunks_exact(self.dim).map(|ev| dot(eu, ev)).collect()
    }

    /// SHA-256 over dimensions and both matrices.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in [self.num_users, self.num_items, self.dim] {
            h.update((v as u64).to_le_bytes());
        }
        for x in self.user_emb.iter().chain(&self.item_emb) {
            h.update(x.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn checksum_hex(&self) -> String {
        self.checksum().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(72 + 8 * (self.user_emb.len() + self.item_emb.len()));
        buf.extend_from_slice(BACKBONE_MAGIC);
        for v in [self.num_users as u64, self.num_items as u64, self.dim as u64, self.seed] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.checksum());
        for x in self.user_emb.iter().chain(&self.item_emb) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        let mut r = ByteReader::new(&bytes);
        if r.take(4)? != BACKBONE_MAGIC {
            return Err(Error::Checkpoint("not a backbone checkpoint".into()));
        }
        let num_users = r.u64()? as usize;
        let num_items = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let seed = r.u64()?;
        let stored: [u8; 32] = r.take(32)?.try_into().unwrap();
        let user_emb = r.f64s(num_users * dim)?;
        let item_emb = r.f64s(num_items * dim)?;
        r.finish()?;
        let table = EmbeddingTable {
            num_users,
            num_items,
            dim,
            seed,
            user_emb,
            item_emb,
        };
        if table.checksum() != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        Ok(table)
    }
}

const BACKBONE_MAGIC: &[u8; 4] = b"FAMF";

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-ln σ(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(user, positive item, negative item)`.
pub type Triple = (usize, usize, usize);

/// `-sum ln σ(ŷ(u,v+) - ŷ(u,v-))`.
pub fn bpr_loss(batch: &[Triple], emb: &EmbeddingTable) -> f64 {
    batch
        .iter()
        .map(|&(u, p, n)| neg_log_sigmoid(emb.score(u, p) - emb.score(u, n)))
        .sum()
}

/// Gradient of `bpr_loss` plus `l2/2 * |e|^2` on every embedding row the
/// batch touches (once per occurrence). Returns `(user_grad, item_grad)` laid
/// out like the table.
pub fn bpr_gradient(batch: &[Triple], emb: &EmbeddingTable, l2: f64) -> (Vec<f64>, Vec<f64>) {
    let d = emb.dim;
    let mut gu = vec![0.0; emb.user_emb.len()];
    let mut gi = vec![0.0; emb.item_emb.len()];
    for &(u, p, n) in batch {
        let x = emb.score(u, p) - emb.score(u, n);
        let coef = -sigmoid(-x);
        let (eu, ep, en) = (emb.user(u), emb.item(p), emb.item(n));
        for j in 0..d {
            gu[u * d + j] += coef * (ep[j] - en[j]) + l2 * eu[j];
            gi[p * d + j] += coef * eu[j] + l2 * ep[j];
            gi[n * d + j] += -coef * eu[j] + l2 * en[j];
        }
    }
    (gu, gi)
}

/// Uniform negative sampler that never returns a training positive.
pub struct NegativeSampler<'a> {
    num_items: usize,
    positives: &'a [Vec<usize>],
}

impl<'a> NegativeSampler<'a> {
    pub fn new(num_items: usize, positives: &'a [Vec<usize>]) -> Self {
        NegativeSampler { num_items, positives }
    }

    /// `None` when the user has interacted with every item.
    pub fn sample<R: Rng>(&self, user: usize, rng: &mut R) -> Option<usize> {
        let pos = &self.positives[user];
        if pos.len() >= self.num_items {
            return None;
        }
        loop {
            let v = rng.gen_range(0..self.num_items);
            if pos.binary_search(&v).is_err() {
                return Some(v);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dim: usize,
    pub seed: u64,
    pub l2: f64,
    /// Cutoff for the per-epoch validation NDCG.
    pub eval_k: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-3,
            epochs: 50,
            batch_size: 256,
            dim: 32,
            seed: 2024,
            l2: 1e-4,
            eval_k: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean BPR loss; absent for the initialization row.
    pub loss: Option<f64>,
    pub val_ndcg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub table: EmbeddingTable,
    pub best_epoch: usize,
    pub log: Vec<PretrainEpoch>,
}

/// BPR with one freshly sampled negative per training positive per epoch
/// and Adam updates. Keeps the epoch with the best validation NDCG (ties to
/// the earlier one, epoch 0 being the initialization); without validation
/// data the last epoch is kept.
pub fn pretrain(ds: &InteractionDataset, split: &SplitAssignment, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if ds.num_users == 0 || ds.num_items == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.dim == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("bad pretraining config {cfg:?}")));
    }
    let mut table = EmbeddingTable::init(ds.num_users, ds.num_items, cfg.dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let sampler = NegativeSampler::new(ds.num_items, &split.train);
    let mut user_opt = Adam::new(table.user_emb.len(), cfg.lr);
    let mut item_opt = Adam::new(table.item_emb.len(), cfg.lr);
    let positives: Vec<(usize, usize)> = split
        .train
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&v| (u, v)))
        .collect();

    let has_val = split.val.iter().any(|v| !v.is_empty());
    let bundle = DatasetBundle {
        dataset: ds.clone(),
        split: split.clone(),
        partition: crate::data::GroupPartition::single(ds.num_providers),
    };
    let val_ndcg = |t: &EmbeddingTable| -> Result<f64> {
        if has_val {
            Ok(evaluate(&Scorer::base(t), &bundle, EvalSplit::Validation, cfg.eval_k)?.ndcg)
        } else {
            Ok(0.0)
        }
    };

    let mut log = vec![PretrainEpoch {
        epoch: 0,
        loss: None,
        val_ndcg: val_ndcg(&table)?,
    }];
    let mut best = (0usize, log[0].val_ndcg, table.clone());

    for epoch in 1..=cfg.epochs {
        let mut triples: Vec<Triple> = positives
            .iter()
            .filter_map(|&(u, p)| sampler.sample(u, &mut rng).map(|n| (u, p, n)))
            .collect();
        triples.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in triples.chunks(cfg.batch_size).enumerate() {
            let loss = bpr_loss(batch, &table);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("BPR loss {loss} at epoch {epoch}, batch {b}")));
            }
            epoch_loss += loss;
            let (mut gu, mut gi) = bpr_gradient(batch, &table, cfg.l2);
            let scale = 1.0 / batch.len() as f64;
            gu.iter_mut().chain(gi.iter_mut()).for_each(|g| *g *= scale);
            user_opt.step(&mut table.user_emb, &gu);
            item_opt.step(&mut table.item_emb, &gi);
        }
        let mean_loss = epoch_loss / triples.len().max(1) as f64;
        let ndcg = val_ndcg(&table)?;
        log.push(PretrainEpoch {
            epoch,
            loss: Some(mean_loss),
            val_ndcg: ndcg,
        });
        if !has_val || ndcg > best.1 {
            best = (epoch, ndcg, table.clone());
        }
    }
    Ok(PretrainOutcome {
        table: best.2,
        best_epoch: best.0,
        log,
    })
}

/// Base score rows for `users`.
pub fn score_all(emb: &EmbeddingTable, users: &[usize]) -> Vec<Vec<f64>> {
    users.iter().map(|&u| emb.score_row(u)).collect()
}
