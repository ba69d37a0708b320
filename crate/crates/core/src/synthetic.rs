//! Synthetic interaction logs with controllable provider popularity skew.
//!
//! Items sit in contiguous provider blocks. Users and items both belong to
//! one of a few taste clusters; a user picks items with probability
//! proportional to the provider's popularity `(s + 1)^-skew` times a cluster
//! affinity. Every item is then topped up to `min_item` interactions so a
//! k-core filter with `k <= min_item` keeps the whole catalog.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{kcore_filter, partition_providers, split_per_user, DatasetBundle, RawInteractions};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub providers: usize,
    pub clusters: usize,
    pub skew: f64,
    pub per_user: usize,
    /// Relative weight of items outside the user's cluster.
    pub off_cluster: f64,
    pub min_item: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 200,
            items: 300,
            providers: 20,
            clusters: 4,
            skew: 1.5,
            per_user: 50,
            off_cluster: 0.1,
            min_item: 5,
            seed: 2,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.users == 0 || self.items == 0 || self.providers == 0 || self.clusters == 0 {
            return bad("synthetic sizes must be positive".into());
        }
        if self.providers > self.items {
            return bad(format!("{} providers cannot share {} items", self.providers, self.items));
        }
        if self.per_user > self.items || self.min_item > self.users {
            return bad("per-user or per-item counts exceed the catalog".into());
        }
        if !(self.skew >= 0.0) || !(self.off_cluster >= 0.0) {
            return bad("skew and off-cluster weight must be non-negative".into());
        }
        Ok(())
    }

    pub fn item_provider(&self, v: usize) -> usize {
        v * self.providers / self.items
    }
}

fn weighted_pick<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn generate(cfg: &SyntheticConfig) -> Result<RawInteractions> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let user_cluster: Vec<usize> = (0..cfg.users).map(|u| u % cfg.clusters).collect();
    let item_cluster: Vec<usize> = (0..cfg.items).map(|v| v % cfg.clusters).collect();
    let popularity: Vec<f64> = (0..cfg.providers).map(|s| ((s + 1) as f64).powf(-cfg.skew)).collect();

    let mut has = vec![vec![false; cfg.items]; cfg.users];
    let mut pairs = Vec::new();
    for u in 0..cfg.users {
        let mut w: Vec<f64> = (0..cfg.items)
            .map(|v| {
                let aff = if item_cluster[v] == user_cluster[u] { 1.0 } else { cfg.off_cluster };
                popularity[cfg.item_provider(v)] * aff
            })
            .collect();
        for _ in 0..cfg.per_user {
            if w.iter().all(|&x| x <= 0.0) {
                break;
            }
            let v = weighted_pick(&w, &mut rng);
            w[v] = 0.0;
            has[u][v] = true;
            pairs.push((u, v));
        }
    }
    for v in 0..cfg.items {
        let mut count = (0..cfg.users).filter(|&u| has[u][v]).count();
        if count >= cfg.min_item {
            continue;
        }
        // prefer users of the item's own cluster
        let mut same: Vec<usize> = (0..cfg.users)
            .filter(|&u| !has[u][v] && user_cluster[u] == item_cluster[v])
            .collect();
        let mut other: Vec<usize> = (0..cfg.users)
            .filter(|&u| !has[u][v] && user_cluster[u] != item_cluster[v])
            .collect();
        same.shuffle(&mut rng);
        other.shuffle(&mut rng);
        for u in same.into_iter().chain(other) {
            if count >= cfg.min_item {
                break;
            }
            has[u][v] = true;
            pairs.push((u, v));
            count += 1;
        }
    }
    Ok(RawInteractions {
        user_tokens: (0..cfg.users).map(|u| format!("u{u}")).collect(),
        item_tokens: (0..cfg.items).map(|v| format!("i{v}")).collect(),
        provider_tokens: (0..cfg.providers).map(|s| format!("p{s}")).collect(),
        item_provider: (0..cfg.items).map(|v| cfg.item_provider(v)).collect(),
        pairs,
    })
}

/// Generates, filters, splits and partitions in one go.
pub fn synthetic_bundle(cfg: &SyntheticConfig, kcore: usize, split_seed: u64, fractions: &[f64]) -> Result<DatasetBundle> {
    let raw = generate(cfg)?;
    let dataset = kcore_filter(&raw, kcore)?;
    let split = split_per_user(&dataset, split_seed);
    let partition = partition_providers(&dataset, &split, fractions)?;
    Ok(DatasetBundle {
        dataset,
        split,
        partition,
    })
}
