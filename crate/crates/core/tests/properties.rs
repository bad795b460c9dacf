mod common;

use std::collections::BTreeMap;

use common::{enumeration_mismatch, naive_ckp, naive_ifr, SmallGraph};
use deepedit::metrics::{ckp, consistency, fluency, ifr, ChainObservation, ContextObservation, FluencyMode};
use proptest::prelude::*;

fn grid() -> impl Strategy<Value = f64> {
    (0u32..=20).prop_map(|k| k as f64 * 0.05)
}

fn positive_grid() -> impl Strategy<Value = f64> {
    (1u32..=20).prop_map(|k| k as f64 * 0.05)
}

fn chain() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=5).prop_flat_map(|n| (prop::collection::vec(grid(), n), prop::collection::vec(grid(), n)))
}

fn observe(chains: &[(Vec<f64>, Vec<f64>)]) -> Vec<ChainObservation> {
    chains
        .iter()
        .enumerate()
        .map(|(i, (pre, post))| ChainObservation::new(format!("c{i}"), pre.clone(), post.clone()).unwrap())
        .collect()
}

fn facts(pairs: &[(f64, f64)]) -> Vec<ContextObservation> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(p, q))| ContextObservation::new(format!("t{i}"), p, q).unwrap())
        .collect()
}

fn small_graph() -> impl Strategy<Value = SmallGraph> {
    (2usize..=8, 0.0f64..=0.4).prop_flat_map(|(nodes, density)| {
        prop::collection::vec(
            prop::option::weighted(density, prop::sample::select(vec!["r", "q", "p"])),
            nodes * nodes,
        )
        .prop_map(move |cells| {
            let mut edges = BTreeMap::new();
            for (i, cell) in cells.into_iter().enumerate() {
                let (s, o) = (i / nodes, i % nodes);
                if let (Some(rel), true) = (cell, s != o) {
                    edges.insert((s, o), rel.to_string());
                }
            }
            SmallGraph { nodes, edges }
        })
    })
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "hogwarts", "of"]), 3..30)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn enumeration_matches_brute_force(g in small_graph()) {
        prop_assert_eq!(enumeration_mismatch(&g), None);
    }

    #[test]
    fn ifr_matches_naive(chains in prop::collection::vec(chain(), 0..12)) {
        let got = ifr(&observe(&chains));
        prop_assert!((got.overall - naive_ifr(&chains)).abs() < 1e-9);
        for (len, value) in &got.by_length {
            let same: Vec<_> = chains.iter().filter(|c| c.0.len() == *len).cloned().collect();
            prop_assert!((value - naive_ifr(&same)).abs() < 1e-9);
            let active = same.iter().filter(|c| c.0.iter().product::<f64>() != 0.0).count();
            prop_assert_eq!(got.active_counts[len], active);
        }
    }

    #[test]
    fn ifr_constant_ratio(pre in prop::collection::vec(prop::collection::vec(positive_grid(), 1..=5), 1..10), r in 0.0f64..=1.0) {
        let chains: Vec<_> = pre
            .into_iter()
            .map(|p| {
                let mut post = p.clone();
                post[0] *= r;
                (p, post)
            })
            .collect();
        prop_assert!((ifr(&observe(&chains)).overall - r).abs() < 1e-9);
    }

    #[test]
    fn ifr_ignores_order_and_dead_chains(mut chains in prop::collection::vec(chain(), 1..10), dead_len in 1usize..=5) {
        let before = ifr(&observe(&chains)).overall;
        chains.reverse();
        let mut dead = vec![0.5; dead_len];
        dead[dead_len - 1] = 0.0;
        chains.push((dead, vec![1.0; dead_len]));
        prop_assert!((ifr(&observe(&chains)).overall - before).abs() < 1e-12);
    }

    #[test]
    fn shorter_chains_weigh_more(pre_a in positive_grid(), pre_b in prop::collection::vec(positive_grid(), 2..=5), r in 0.0f64..0.5, d in 0.01f64..0.5) {
        let base = |ra: f64, rb: f64| {
            let mut post_b = pre_b.clone();
            post_b[0] *= rb;
            ifr(&observe(&[(vec![pre_a], vec![pre_a * ra]), (pre_b.clone(), post_b)])).overall
        };
        let start = base(r, r);
        prop_assert!(base(r + d, r) - start > base(r, r + d) - start);
    }

    #[test]
    fn ckp_matches_naive(pairs in prop::collection::vec((grid(), grid()), 0..20)) {
        prop_assert!((ckp(&facts(&pairs)) - naive_ckp(&pairs)).abs() < 1e-9);
    }

    #[test]
    fn ckp_ignores_zero_pre(pairs in prop::collection::vec((positive_grid(), grid()), 1..20), zeros in prop::collection::vec(grid(), 1..5)) {
        let before = ckp(&facts(&pairs));
        let mut more = pairs.clone();
        more.extend(zeros.into_iter().map(|q| (0.0, q)));
        prop_assert!((ckp(&facts(&more)) - before).abs() < 1e-12);
    }

    #[test]
    fn text_metric_bounds(a in words(), b in words()) {
        let f = fluency(&a, FluencyMode::Entropy).unwrap();
        prop_assert!(f >= 0.0);
        prop_assert_eq!(f, fluency(&a, FluencyMode::Entropy).unwrap());
        let c = consistency(&a, &b).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&c));
        prop_assert!((c - consistency(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((consistency(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
