use fairadapt_core::data::{kcore_filter, partition_providers, split_per_user, GroupPartition, RawInteractions};
use fairadapt_core::diffsort::{sort_hard, sort_soft, soft_permutation, soft_permutation_full, Smoothing};
use fairadapt_core::exposure::{hierarchical_stats, soft_exposure, verify_decomposition, PositionBias, Targets};
use fairadapt_core::losses::{diff_ndcg, ndcg_hard};
use fairadapt_core::metrics::{entropy_bits, gini};
use proptest::prelude::*;

fn normalized(x: &[f64]) -> Vec<f64> {
    let s: f64 = x.iter().sum();
    x.iter().map(|v| v / s).collect()
}

/// Provider weights, group assignment per provider (every group non-empty),
/// provider target and group target.
fn hierarchy() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, Vec<f64>, Vec<f64>)> {
    (1usize..=50, 1usize..=5).prop_flat_map(|(l, c)| {
        let c = c.min(l);
        (
            prop::collection::vec(0.001f64..10.0, l),
            prop::collection::vec(0..c, l),
            prop::collection::vec(0.001f64..1.0, l),
            prop::collection::vec(0.001f64..1.0, c),
        )
            .prop_map(move |(e, mut g, t, tg)| {
                for (i, slot) in g.iter_mut().take(c).enumerate() {
                    *slot = i;
                }
                (e, g, normalized(&t), normalized(&tg))
            })
    })
}

fn partition_of(groups: &[usize]) -> GroupPartition {
    let c = groups.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); c];
    for (s, &g) in groups.iter().enumerate() {
        members[g].push(s);
    }
    GroupPartition::from_groups(members).unwrap()
}

fn distinct_scores(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kl_splits_into_inter_intra_and_calibration((e, g, t, tg) in hierarchy()) {
        let targets = Targets { provider: t, group: tg };
        let state = hierarchical_stats(&e, &targets, &partition_of(&g), 0.0).unwrap();
        let check = verify_decomposition(&state, 1e-10).unwrap();
        prop_assert!(check.passed, "residual {}", check.residual);
    }

    #[test]
    fn calibration_vanishes_for_aggregated_group_target((e, g, t, _tg) in hierarchy()) {
        let partition = partition_of(&g);
        let mut targets = Targets { provider: t, group: Vec::new() };
        targets.group = targets.aggregated(&partition);
        let state = hierarchical_stats(&e, &targets, &partition, 0.0).unwrap();
        let d = state.decompose().unwrap();
        prop_assert!(d.calibration.abs() < 1e-12);
        prop_assert!((d.global - d.inter - d.intra).abs() < 1e-10);
    }

    #[test]
    fn soft_permutation_is_doubly_stochastic(
        scores in distinct_scores(1..=40),
        beta in prop::sample::select(vec![0.5, 1.0, 10.0, 1000.0]),
    ) {
        let n = scores.len();
        let p = soft_permutation_full(&scores, &Smoothing::new(beta));
        for i in 0..n {
            let row: f64 = (0..n).map(|k| p.get(i, k)).sum();
            let col: f64 = (0..n).map(|v| p.get(v, i)).sum();
            prop_assert!((row - 1.0).abs() < 1e-9 && (col - 1.0).abs() < 1e-9);
        }
        prop_assert!(p.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn truncation_keeps_leading_columns(scores in distinct_scores(1..=30), k in 1usize..=30) {
        let h = Smoothing::default();
        let full = soft_permutation_full(&scores, &h);
        let top = soft_permutation(&scores, &h, k);
        let k = k.min(scores.len());
        prop_assert_eq!(top.k(), k);
        for v in 0..scores.len() {
            for r in 0..k {
                prop_assert!((top.get(v, r) - full.get(v, r)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn network_preserves_score_sum(scores in distinct_scores(1..=40)) {
        let s = sort_soft(&scores, &Smoothing::default(), 1);
        let before: f64 = scores.iter().sum();
        let after: f64 = s.sorted_values().iter().sum();
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn hard_sort_matches_selection_sort(scores in prop::collection::vec(-5i32..5, 0..40)) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        // selection sort: repeatedly take the largest remaining, lowest index on ties
        let mut left: Vec<usize> = (0..scores.len()).collect();
        let mut expected = Vec::new();
        while !left.is_empty() {
            let mut best = 0;
            for j in 1..left.len() {
                if scores[left[j]] > scores[left[best]] {
                    best = j;
                }
            }
            expected.push(left.remove(best));
        }
        let (order, rank) = sort_hard(&scores);
        prop_assert_eq!(&order, &expected);
        for (r, &v) in order.iter().enumerate() {
            prop_assert_eq!(rank[v], r);
        }
    }

    #[test]
    fn gini_and_entropy_ignore_scale(
        e in prop::collection::vec(0.0f64..10.0, 1..60),
        c in 0.001f64..1000.0,
    ) {
        let mut e = e;
        e[0] += 0.5;
        let scaled: Vec<f64> = e.iter().map(|x| x * c).collect();
        prop_assert!((gini(&e).unwrap() - gini(&scaled).unwrap()).abs() < 1e-12);
        prop_assert!((entropy_bits(&e).unwrap() - entropy_bits(&scaled).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn entropy_bounded_by_support(e in prop::collection::vec(0.0f64..10.0, 1..60)) {
        let mut e = e;
        e[0] += 0.5;
        let support = e.iter().filter(|&&x| x > 0.0).count() as f64;
        prop_assert!(entropy_bits(&e).unwrap() <= support.log2() + 1e-12);
        let g = gini(&e).unwrap();
        prop_assert!((0.0..1.0).contains(&g));
    }

    #[test]
    fn raising_a_score_never_lowers_expected_exposure(
        scores in distinct_scores(2..=16),
        pick in any::<prop::sample::Index>(),
        bump in 0.01f64..2.0,
    ) {
        let n = scores.len();
        let v = pick.index(n);
        let h = Smoothing::default();
        let k = n.min(5);
        let bias = PositionBias::new(k);
        let weight = |s: &[f64]| -> f64 {
            let p = soft_permutation(s, &h, k);
            (0..k).map(|r| p.get(v, r) * bias.at(r)).sum()
        };
        let mut raised = scores.clone();
        raised[v] += bump;
        prop_assert!(weight(&raised) >= weight(&scores) - 1e-12);
    }

    #[test]
    fn kcore_output_meets_degree_bound(
        pairs in prop::collection::vec((0usize..12, 0usize..15), 0..120),
        k in 1usize..5,
    ) {
        let raw = RawInteractions {
            user_tokens: (0..12).map(|u| format!("u{u}")).collect(),
            item_tokens: (0..15).map(|v| format!("i{v}")).collect(),
            provider_tokens: (0..3).map(|s| format!("p{s}")).collect(),
            item_provider: (0..15).map(|v| v % 3).collect(),
            pairs: {
                let mut seen = std::collections::BTreeSet::new();
                pairs.into_iter().filter(|p| seen.insert(*p)).collect()
            },
        };
        match kcore_filter(&raw, k) {
            Ok(ds) => {
                let mut du = vec![0; ds.num_users];
                let mut di = vec![0; ds.num_items];
                for &(u, v) in &ds.interactions {
                    du[u] += 1;
                    di[v] += 1;
                }
                prop_assert!(du.iter().chain(&di).all(|&d| d >= k));
                // nothing that survives could have been dropped: re-filtering is a no-op
                let again = RawInteractions {
                    user_tokens: ds.user_tokens.clone(),
                    item_tokens: ds.item_tokens.clone(),
                    provider_tokens: ds.provider_tokens.clone(),
                    item_provider: ds.item_provider.clone(),
                    pairs: ds.interactions.clone(),
                };
                prop_assert_eq!(kcore_filter(&again, k).unwrap(), ds);
            }
            Err(e) => prop_assert_eq!(e.kind(), "empty_dataset"),
        }
    }

    #[test]
    fn split_partitions_each_user(
        pairs in prop::collection::vec((0usize..10, 0usize..30), 1..200),
        seed in any::<u64>(),
    ) {
        let raw = RawInteractions {
            user_tokens: (0..10).map(|u| format!("u{u}")).collect(),
            item_tokens: (0..30).map(|v| format!("i{v}")).collect(),
            provider_tokens: (0..4).map(|s| format!("p{s}")).collect(),
            item_provider: (0..30).map(|v| v % 4).collect(),
            pairs: {
                let mut seen = std::collections::BTreeSet::new();
                pairs.into_iter().filter(|p| seen.insert(*p)).collect()
            },
        };
        let ds = kcore_filter(&raw, 1).unwrap();
        let split = split_per_user(&ds, seed);
        for (u, items) in ds.user_items().into_iter().enumerate() {
            let mut all: Vec<usize> = split.train[u].iter().chain(&split.val[u]).chain(&split.test[u]).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
        }
        prop_assert_eq!(split_per_user(&ds, seed), split);
        if ds.num_providers >= 3 {
            let p = partition_providers(&ds, &split_per_user(&ds, seed), &[0.2, 0.6, 0.2]).unwrap();
            prop_assert_eq!(p.group_members.iter().map(Vec::len).sum::<usize>(), ds.num_providers);
        }
    }
}

fn gapped_instance(rng: &mut rand_chacha::ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    use rand::Rng;
    let n = rng.gen_range(2..=12);
    let scores = loop {
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut t = s.clone();
        t.sort_by(f64::total_cmp);
        if t.windows(2).all(|w| w[1] - w[0] >= 0.01) {
            break s;
        }
    };
    let mut rel: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
    rel[0] = 1.0;
    (scores, rel)
}

fn ndcg_gaps(scores: &[f64], rel: &[f64]) -> Vec<f64> {
    let k = scores.len().min(5);
    let (order, _) = sort_hard(scores);
    let hard = ndcg_hard(&order, rel, k).unwrap();
    [10.0, 100.0, 1000.0]
        .iter()
        .map(|&b| (diff_ndcg(&soft_permutation(scores, &Smoothing::new(b), k), rel, k).unwrap() - hard).abs())
        .collect()
}

#[test]
fn relaxation_error_shrinks_with_beta_on_average() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut mean = [0.0; 3];
    for _ in 0..200 {
        let (scores, rel) = gapped_instance(&mut rng);
        for (m, g) in mean.iter_mut().zip(ndcg_gaps(&scores, &rel)) {
            *m += g / 200.0;
        }

        let n = scores.len();
        let k = n.min(5);
        let bias = PositionBias::new(k);
        let providers: Vec<usize> = (0..n).map(|v| v % 2).collect();
        let cands: Vec<usize> = (0..n).collect();
        let perm = soft_permutation(&scores, &Smoothing::new(1000.0), k);
        let e = soft_exposure(&[perm], &[cands], &providers, 2, &bias);
        let total: f64 = e.iter().sum();
        assert!((total - bias.weights().iter().sum::<f64>()).abs() < 1e-9);
    }
    assert!(mean[1] < mean[0] && mean[2] < mean[1], "{mean:?}");
}

/// Per-instance version. Errors at low steepness can cancel by chance, so
/// roughly one instance in eight is not monotone.
#[test]
#[ignore = "not monotone per instance: about 12% of gapped instances violate it"]
fn relaxation_error_shrinks_with_beta_per_instance() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (scores, rel) = gapped_instance(&mut rng);
        let g = ndcg_gaps(&scores, &rel);
        assert!(g[1] <= g[0] + 1e-12 && g[2] <= g[1] + 1e-12, "{g:?}");
    }
}
