mod common;

use proptest::prelude::*;

use common::{lda_purity, metric_oracle_mismatches};
use rignn::eval::{mrr_at_k, precision_at_k, top_n, RankedResult};

#[test]
fn metrics_match_brute_force_scorer() {
    assert_eq!(metric_oracle_mismatches(1000, 4), 0);
}

#[test]
fn rank_three_hand_case() {
    let r = [RankedResult {
        top: (0..20).collect(),
        label: 2,
    }];
    assert_eq!(precision_at_k(&r, 10).unwrap(), 100.0);
    assert!((mrr_at_k(&r, 10).unwrap() - 33.33).abs() < 0.01);
    assert_eq!(precision_at_k(&r, 2).unwrap(), 0.0);
    assert_eq!(mrr_at_k(&r, 2).unwrap(), 0.0);
}

#[test]
fn short_lists_and_empty_input_are_errors() {
    let r = [RankedResult {
        top: vec![0, 1, 2],
        label: 1,
    }];
    assert!(precision_at_k(&r, 5).is_err());
    assert!(mrr_at_k(&[], 5).is_err());
    assert!(precision_at_k(&r, 0).is_err());
}

proptest! {
    #[test]
    fn mrr_never_exceeds_precision(
        labels in prop::collection::vec(0u32..30, 1..40),
        k in 1usize..=20,
    ) {
        let results: Vec<RankedResult> = labels.iter().map(|&l| RankedResult { top: (0..20).collect(), label: l }).collect();
        let p = precision_at_k(&results, k).unwrap();
        let m = mrr_at_k(&results, k).unwrap();
        prop_assert!(m <= p && (0.0..=100.0).contains(&p) && m >= 0.0);
    }

    #[test]
    fn top_n_is_sorted_prefix(scores in prop::collection::vec(-5i32..5, 1..50), n in 1usize..60) {
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let top = top_n(&s, n);
        prop_assert_eq!(top.len(), n.min(s.len()));
        let mut all: Vec<u32> = (0..s.len() as u32).collect();
        all.sort_by(|&a, &b| s[b as usize].partial_cmp(&s[a as usize]).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(&top[..], &all[..top.len()]);
    }
}

#[test]
fn lda_recovers_disjoint_topics() {
    for seed in 0..5 {
        let (p, model) = lda_purity(seed);
        assert!(p >= 0.95, "seed {seed}: purity {p}");
        let (_, again) = lda_purity(seed);
        assert_eq!(model.to_bytes().unwrap(), again.to_bytes().unwrap());
    }
}
