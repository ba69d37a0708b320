//! Interaction logs, k-core filtering, per-user splits and provider groups.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Interactions as read from disk, re-indexed to dense ids in order of first
/// appearance but not yet filtered.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInteractions {
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub provider_tokens: Vec<String>,
    /// Provider id of every item.
    pub item_provider: Vec<usize>,
    /// Deduplicated (user, item) pairs in first-seen order.
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub num_providers: usize,
    /// Sorted by (user, item); no duplicates.
    pub interactions: Vec<(usize, usize)>,
    pub item_provider: Vec<usize>,
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub provider_tokens: Vec<String>,
}

impl InteractionDataset {
    /// Items of every user, ascending.
    pub fn user_items(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for &(u, v) in &self.interactions {
            out[u].push(v);
        }
        out
    }

    pub fn provider_items(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_providers];
        for (v, &s) in self.item_provider.iter().enumerate() {
            out[s].push(v);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub num_groups: usize,
    pub provider_group: Vec<usize>,
    pub group_members: Vec<Vec<usize>>,
}

impl GroupPartition {
    /// A single group holding every provider.
    pub fn single(num_providers: usize) -> Self {
        GroupPartition {
            num_groups: 1,
            provider_group: vec![0; num_providers],
            group_members: vec![(0..num_providers).collect()],
        }
    }

    /// Builds a partition from explicit member lists.
    pub fn from_groups(groups: Vec<Vec<usize>>) -> Result<Self> {
        let num_providers = groups.iter().map(Vec::len).sum();
        let mut provider_group = vec![usize::MAX; num_providers];
        for (c, members) in groups.iter().enumerate() {
            for &s in members {
                if s >= num_providers || provider_group[s] != usize::MAX {
                    return Err(Error::InvalidArgument(format!(
                        "groups must partition 0..{num_providers}; provider {s} is invalid or repeated"
                    )));
                }
                provider_group[s] = c;
            }
        }
        let mut group_members = groups;
        for m in &mut group_members {
            m.sort_unstable();
        }
        Ok(GroupPartition {
            num_groups: group_members.len(),
            provider_group,
            group_members,
        })
    }
}

/// Everything later pipeline stages need from `prepare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub dataset: InteractionDataset,
    pub split: SplitAssignment,
    pub partition: GroupPartition,
}

impl DatasetBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn load_interactions(path: &Path) -> Result<RawInteractions> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_interactions(std::io::BufReader::new(file))
}

/// Parses `user \t item \t provider` lines. Extra columns are ignored, blank
/// lines are skipped.
pub fn read_interactions<R: BufRead>(reader: R) -> Result<RawInteractions> {
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut providers: HashMap<String, usize> = HashMap::new();
    let mut raw = RawInteractions {
        user_tokens: Vec::new(),
        item_tokens: Vec::new(),
        provider_tokens: Vec::new(),
        item_provider: Vec::new(),
        pairs: Vec::new(),
    };
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();

    fn intern(map: &mut HashMap<String, usize>, tokens: &mut Vec<String>, tok: &str) -> usize {
        if let Some(&id) = map.get(tok) {
            return id;
        }
        let id = tokens.len();
        tokens.push(tok.to_string());
        map.insert(tok.to_string(), id);
        id
    }

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected at least 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let (ut, it, pt) = (cols[0].trim(), cols[1].trim(), cols[2].trim());
        if ut.is_empty() || it.is_empty() || pt.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty token".into(),
            });
        }
        let u = intern(&mut users, &mut raw.user_tokens, ut);
        let s = intern(&mut providers, &mut raw.provider_tokens, pt);
        let v = match items.get(it) {
            Some(&v) => {
                if raw.item_provider[v] != s {
                    return Err(Error::ConflictingProvider {
                        item: it.to_string(),
                        first: raw.provider_tokens[raw.item_provider[v]].clone(),
                        second: pt.to_string(),
                    });
                }
                v
            }
            None => {
                let v = intern(&mut items, &mut raw.item_tokens, it);
                raw.item_provider.push(s);
                v
            }
        };
        if seen.insert((u, v)) {
            raw.pairs.push((u, v));
        }
    }
    Ok(raw)
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// every survivor satisfies the bound, then re-indexes users, items and
/// providers densely (original relative order kept). Providers left without
/// items disappear.
pub fn kcore_filter(raw: &RawInteractions, k: usize) -> Result<InteractionDataset> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let nu = raw.user_tokens.len();
    let ni = raw.item_tokens.len();
    let mut alive_pair = vec![true; raw.pairs.len()];
    let mut user_alive = vec![true; nu];
    let mut item_alive = vec![true; ni];
    loop {
        let mut udeg = vec![0usize; nu];
        let mut ideg = vec![0usize; ni];
        for (i, &(u, v)) in raw.pairs.iter().enumerate() {
            if alive_pair[i] {
                udeg[u] += 1;
                ideg[v] += 1;
            }
        }
        let mut changed = false;
        for u in 0..nu {
            if user_alive[u] && udeg[u] < k {
                user_alive[u] = false;
                changed = true;
            }
        }
        for v in 0..ni {
            if item_alive[v] && ideg[v] < k {
                item_alive[v] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (i, &(u, v)) in raw.pairs.iter().enumerate() {
            if alive_pair[i] && (!user_alive[u] || !item_alive[v]) {
                alive_pair[i] = false;
            }
        }
    }

    let remap = |alive: &[bool]| -> (Vec<Option<usize>>, usize) {
        let mut next = 0;
        let map = alive
            .iter()
            .map(|&a| {
                a.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        (map, next)
    };
    let (umap, num_users) = remap(&user_alive);
    let (imap, num_items) = remap(&item_alive);
    if num_users == 0 || num_items == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut provider_alive = vec![false; raw.provider_tokens.len()];
    for v in 0..ni {
        if item_alive[v] {
            provider_alive[raw.item_provider[v]] = true;
        }
    }
    let (pmap, num_providers) = remap(&provider_alive);

    let mut interactions: Vec<(usize, usize)> = raw
        .pairs
        .iter()
        .zip(&alive_pair)
        .filter(|(_, &a)| a)
        .map(|(&(u, v), _)| (umap[u].unwrap(), imap[v].unwrap()))
        .collect();
    interactions.sort_unstable();

    let pick = |tokens: &[String], map: &[Option<usize>]| -> Vec<String> {
        tokens
            .iter()
            .zip(map)
            .filter(|(_, m)| m.is_some())
            .map(|(t, _)| t.clone())
            .collect()
    };
    let item_provider = (0..ni)
        .filter(|&v| item_alive[v])
        .map(|v| pmap[raw.item_provider[v]].unwrap())
        .collect();

    Ok(InteractionDataset {
        num_users,
        num_items,
        num_providers,
        interactions,
        item_provider,
        user_tokens: pick(&raw.user_tokens, &umap),
        item_tokens: pick(&raw.item_tokens, &imap),
        provider_tokens: pick(&raw.provider_tokens, &pmap),
    })
}

/// Per user: shuffle items with a seeded generator, then take
/// `floor(n/10)` validation and `floor(2n/10)` test items; the rest train.
pub fn split_per_user(ds: &InteractionDataset, seed: u64) -> SplitAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitAssignment {
        seed,
        train: Vec::with_capacity(ds.num_users),
        val: Vec::with_capacity(ds.num_users),
        test: Vec::with_capacity(ds.num_users),
    };
    for mut items in ds.user_items() {
        items.shuffle(&mut rng);
        let n = items.len();
        let n_val = n / 10;
        let n_test = 2 * n / 10;
        let mut val = items[..n_val].to_vec();
        let mut test = items[n_val..n_val + n_test].to_vec();
        let mut train = items[n_val + n_test..].to_vec();
        val.sort_unstable();
        test.sort_unstable();
        train.sort_unstable();
        split.train.push(train);
        split.val.push(val);
        split.test.push(test);
    }
    split
}

/// Ranks providers by training interactions on their items (descending,
/// ties by provider id) and cuts the ranking at cumulative `fractions`,
/// rounding boundaries half-up.
pub fn partition_providers(
    ds: &InteractionDataset,
    split: &SplitAssignment,
    fractions: &[f64],
) -> Result<GroupPartition> {
    let c = fractions.len();
    if c == 0 {
        return Err(Error::InvalidArgument("at least one group fraction required".into()));
    }
    if fractions.iter().any(|&f| !(f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "group fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let l = ds.num_providers;
    if c > l {
        return Err(Error::InvalidArgument(format!(
            "{c} groups requested but only {l} providers exist"
        )));
    }
    let mut counts = vec![0usize; l];
    for items in &split.train {
        for &v in items {
            counts[ds.item_provider[v]] += 1;
        }
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));

    let mut bounds = Vec::with_capacity(c + 1);
    bounds.push(0usize);
    let mut cum = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let b = if i + 1 == c {
            l
        } else {
            ((cum * l as f64 + 0.5 + 1e-9).floor() as usize).min(l)
        };
        bounds.push(b.max(*bounds.last().unwrap()));
    }
    let groups = (0..c)
        .map(|g| order[bounds[g]..bounds[g + 1]].to_vec())
        .collect();
    GroupPartition::from_groups(groups)
}

/// Training interaction count per provider.
pub fn provider_train_counts(ds: &InteractionDataset, split: &SplitAssignment) -> Vec<usize> {
    let mut counts = vec![0usize; ds.num_providers];
    for items in &split.train {
        for &v in items {
            counts[ds.item_provider[v]] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_from(pairs: &[(usize, usize)], item_provider: Vec<usize>) -> RawInteractions {
        let nu = pairs.iter().map(|p| p.0).max().unwrap() + 1;
        let np = item_provider.iter().max().unwrap() + 1;
        RawInteractions {
            user_tokens: (0..nu).map(|u| format!("u{u}")).collect(),
            item_tokens: (0..item_provider.len()).map(|v| format!("i{v}")).collect(),
            provider_tokens: (0..np).map(|s| format!("p{s}")).collect(),
            item_provider,
            pairs: pairs.to_vec(),
        }
    }

    #[test]
    fn reads_three_lines() {
        let text = "a\tx\tP\na\ty\tQ\nb\tx\tP\n";
        let raw = read_interactions(text.as_bytes()).unwrap();
        assert_eq!(raw.user_tokens.len(), 2);
        assert_eq!(raw.item_tokens.len(), 2);
        assert_eq!(raw.pairs, vec![(0, 0), (0, 1), (1, 0)]);
        assert_eq!(raw.item_provider, vec![0, 1]);
    }

    #[test]
    fn duplicate_pairs_collapse() {
        let text = "a\tx\tP\textra\na\tx\tP\n";
        let raw = read_interactions(text.as_bytes()).unwrap();
        assert_eq!(raw.pairs.len(), 1);
    }

    #[test]
    fn conflicting_provider_is_rejected() {
        let text = "a\tx\tP\nb\tx\tQ\n";
        let err = read_interactions(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::ConflictingProvider { .. }));
    }

    #[test]
    fn short_line_reports_line_number() {
        let text = "a\tx\tP\nb\tx\n";
        match read_interactions(text.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn kcore_removes_light_user() {
        // users 0..5 interact with items 0..5; user 5 only with 4 items.
        let mut pairs = Vec::new();
        for u in 0..5 {
            for v in 0..5 {
                pairs.push((u, v));
            }
        }
        for v in 0..4 {
            pairs.push((5, v));
        }
        let ds = kcore_filter(&raw_from(&pairs, vec![0, 0, 1, 1, 2]), 5).unwrap();
        assert_eq!(ds.num_users, 5);
        assert_eq!(ds.num_items, 5);
        assert_eq!(ds.interactions.len(), 25);
    }

    #[test]
    fn kcore_fixed_point_is_unchanged() {
        let mut pairs = Vec::new();
        for u in 0..5 {
            for v in 0..5 {
                pairs.push((u, v));
            }
        }
        let raw = raw_from(&pairs, vec![0, 1, 2, 3, 4]);
        let ds = kcore_filter(&raw, 5).unwrap();
        assert_eq!(ds.interactions, pairs);
        assert_eq!(ds.num_providers, 5);
    }

    #[test]
    fn kcore_empty_is_error() {
        let raw = raw_from(&[(0, 0), (1, 1)], vec![0, 0]);
        assert!(matches!(kcore_filter(&raw, 5), Err(Error::EmptyDataset)));
        assert!(kcore_filter(&raw, 0).is_err());
    }

    #[test]
    fn split_proportions() {
        let pairs: Vec<_> = (0..10).map(|v| (0, v)).collect();
        let ds = InteractionDataset {
            num_users: 1,
            num_items: 10,
            num_providers: 1,
            interactions: pairs,
            item_provider: vec![0; 10],
            user_tokens: vec!["u".into()],
            item_tokens: (0..10).map(|v| v.to_string()).collect(),
            provider_tokens: vec!["p".into()],
        };
        let s = split_per_user(&ds, 7);
        assert_eq!((s.train[0].len(), s.val[0].len(), s.test[0].len()), (7, 1, 2));
        assert_eq!(s, split_per_user(&ds, 7));

        let mut five = ds.clone();
        five.interactions.truncate(5);
        let s = split_per_user(&five, 7);
        assert_eq!((s.train[0].len(), s.val[0].len(), s.test[0].len()), (4, 0, 1));
    }

    fn provider_ds(counts: &[usize]) -> (InteractionDataset, SplitAssignment) {
        // provider s owns item s; a single user "interacts" count[s] times via
        // distinct users so the training count equals counts[s].
        let l = counts.len();
        let max = *counts.iter().max().unwrap();
        let mut train = vec![Vec::new(); max.max(1)];
        let mut interactions = Vec::new();
        for (s, &c) in counts.iter().enumerate() {
            for u in 0..c {
                train[u].push(s);
                interactions.push((u, s));
            }
        }
        interactions.sort_unstable();
        let nu = train.len();
        let ds = InteractionDataset {
            num_users: nu,
            num_items: l,
            num_providers: l,
            interactions,
            item_provider: (0..l).collect(),
            user_tokens: (0..nu).map(|u| u.to_string()).collect(),
            item_tokens: (0..l).map(|v| v.to_string()).collect(),
            provider_tokens: (0..l).map(|s| s.to_string()).collect(),
        };
        let split = SplitAssignment {
            seed: 0,
            train,
            val: vec![Vec::new(); nu],
            test: vec![Vec::new(); nu],
        };
        (ds, split)
    }

    #[test]
    fn partition_sizes_ten_providers() {
        let (ds, split) = provider_ds(&[3; 10]);
        let p = partition_providers(&ds, &split, &[0.2, 0.6, 0.2]).unwrap();
        let sizes: Vec<_> = p.group_members.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 6, 2]);
        // equal counts: tie-break by provider id
        assert_eq!(p.group_members[0], vec![0, 1]);
        assert_eq!(p.group_members[2], vec![8, 9]);
    }

    #[test]
    fn partition_hand_rounded_case() {
        let (ds, split) = provider_ds(&[9, 5, 5, 1, 0]);
        let p = partition_providers(&ds, &split, &[0.2, 0.6, 0.2]).unwrap();
        assert_eq!(p.group_members, vec![vec![0], vec![1, 2, 3], vec![4]]);
        assert_eq!(p.provider_group, vec![0, 1, 1, 1, 2]);
    }

    #[test]
    fn partition_rejects_too_many_groups() {
        let (ds, split) = provider_ds(&[1, 1]);
        assert!(partition_providers(&ds, &split, &[0.2, 0.6, 0.2]).is_err());
        assert!(partition_providers(&ds, &split, &[0.5, 0.6]).is_err());
    }
}
