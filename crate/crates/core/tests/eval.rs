use proptest::prelude::*;
use store_core::eval::*;

/// A result whose target sits at `rank` (1-based), or nowhere for `None`.
fn at_rank(rank: Option<usize>, len: usize) -> RetrievalResult {
    let mut ranked: Vec<Option<String>> = (0..len).map(|i| Some(format!("x{i}"))).collect();
    if let Some(r) = rank {
        ranked[r - 1] = Some("t".into());
    }
    RetrievalResult::new(ranked, "t").unwrap()
}

fn impression(pos: &[f64], neg: &[f64]) -> ScoringImpression {
    let mut candidates = Vec::new();
    for (i, &s) in pos.iter().enumerate() {
        candidates.push(Candidate { item: format!("p{i}"), score: s, clicked: true });
    }
    for (i, &s) in neg.iter().enumerate() {
        candidates.push(Candidate { item: format!("n{i}"), score: s, clicked: false });
    }
    ScoringImpression { user_id: "u".into(), candidates }
}

/// Mann-Whitney statistic from mid-ranks of the pooled scores.
fn rank_sum_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; all.len()];
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        for r in &mut ranks[i..=j] {
            *r = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let sum: f64 = all.iter().zip(&ranks).filter(|(a, _)| a.1).map(|(_, r)| r).sum();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (sum - np * (np + 1.0) / 2.0) / (np * nn)
}

#[test]
fn recall_fixture() {
    let results: Vec<_> = [Some(1), Some(3), Some(7), None].into_iter().map(|r| at_rank(r, 10)).collect();
    assert_eq!(recall_at_k(&results, 5).unwrap(), 0.5);
    assert_eq!(recall_at_k(&results, 10).unwrap(), 0.75);
    assert_eq!(recall_at_k(&results, 1).unwrap(), 0.25);
}

#[test]
fn ndcg_fixture() {
    let results: Vec<_> = [Some(1), Some(3), None].into_iter().map(|r| at_rank(r, 10)).collect();
    assert_eq!(ndcg_at_k(&results, 5).unwrap(), 0.5);
    assert_eq!(ndcg_at_k(&[at_rank(Some(3), 5)], 5).unwrap(), 0.5);
    assert_eq!(ndcg_at_k(&[at_rank(Some(1), 5)], 5).unwrap(), 1.0);
}

#[test]
fn perfect_and_empty_rankers() {
    let perfect: Vec<_> = (0..4).map(|_| at_rank(Some(1), 5)).collect();
    let absent: Vec<_> = (0..4).map(|_| at_rank(None, 5)).collect();
    for k in [1, 5, 10, 20] {
        assert_eq!(recall_at_k(&perfect, k).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&perfect, k).unwrap(), 1.0);
        assert_eq!(recall_at_k(&absent, k).unwrap(), 0.0);
    }
}

#[test]
fn invalid_slots_never_hit() {
    let r = RetrievalResult::new(vec![None, Some("t".into())], "t").unwrap();
    assert_eq!(r.rank(), Some(2));
    assert_eq!(recall_at_k(&[r], 1).unwrap(), 0.0);
}

#[test]
fn auc_and_mrr_fixtures() {
    let imp = impression(&[0.9], &[0.1, 0.8]);
    assert_eq!(auc(&imp), Some(1.0));
    assert_eq!(reciprocal_rank(&imp), Some(1.0));
    assert_eq!(auc(&impression(&[0.9, 0.95], &[0.1, 0.2])), Some(1.0));
    assert_eq!(auc(&impression(&[0.5], &[0.5, 0.5, 0.5])), Some(0.5));
    assert_eq!(auc(&impression(&[0.1], &[0.9])), Some(0.0));
    assert_eq!(reciprocal_rank(&impression(&[0.5], &[0.9, 0.7])), Some(1.0 / 3.0));
    assert_eq!(auc(&impression(&[0.5], &[])), None);
}

#[test]
fn impression_ndcg_fixture() {
    // Ranked labels: neg, pos, neg, pos.
    let imp = impression(&[0.8, 0.6], &[0.9, 0.7]);
    let dcg = 1.0 / 3f64.log2() + 1.0 / 5f64.log2();
    let ideal = 1.0 + 1.0 / 3f64.log2();
    assert!((impression_ndcg(&imp, 5).unwrap() - dcg / ideal).abs() < 1e-15);
    assert_eq!(impression_ndcg(&imp, 1), Some(0.0));
}

#[test]
fn reports_are_flat_json() {
    let results: Vec<_> = [Some(1), Some(3), None].into_iter().map(|r| at_rank(r, 10)).collect();
    let report = retrieval_report(&results, &[5, 10]).unwrap();
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["ndcg@5"], 0.5);
    assert_eq!(json["queries"], 3);
    let dir = tempfile::tempdir().unwrap();
    report.save(&dir.path().join("r.json")).unwrap();
    assert_eq!(Report::load(&dir.path().join("r.json")).unwrap(), report);
}

fn results_strategy() -> impl Strategy<Value = Vec<RetrievalResult>> {
    prop::collection::vec(prop::option::of(1usize..=25), 1..30)
        .prop_map(|ranks| ranks.into_iter().map(|r| at_rank(r, 25)).collect())
}

proptest! {
    #[test]
    fn metrics_are_monotone_and_bounded(results in results_strategy(), k in 1usize..24) {
        let (r1, r2) = (recall_at_k(&results, k).unwrap(), recall_at_k(&results, k + 1).unwrap());
        let (n1, n2) = (ndcg_at_k(&results, k).unwrap(), ndcg_at_k(&results, k + 1).unwrap());
        prop_assert!(r1 <= r2 && n1 <= n2);
        prop_assert!(n1 <= r1 + 1e-12);
        prop_assert!(n1 >= r1 / ((k + 1) as f64).log2() - 1e-12);
    }

    #[test]
    fn auc_matches_rank_sum_oracle(
        pos in prop::collection::vec(0u8..6, 1..6),
        neg in prop::collection::vec(0u8..6, 1..6),
    ) {
        // Small integer scores make ties common.
        let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
        let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
        let got = auc(&impression(&pos, &neg)).unwrap();
        prop_assert!((got - rank_sum_auc(&pos, &neg)).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        pos in prop::collection::vec(-3.0f64..3.0, 1..6),
        neg in prop::collection::vec(-3.0f64..3.0, 1..6),
    ) {
        let f = |xs: &[f64]| xs.iter().map(|x| x.exp() * 2.0 + 1.0).collect::<Vec<_>>();
        prop_assert_eq!(auc(&impression(&pos, &neg)), auc(&impression(&f(&pos), &f(&neg))));
    }
}
