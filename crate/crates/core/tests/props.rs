//! Property-based invariants across the toolkit.

use proptest::prelude::*;

use cltr_core::clicksim::{click_prob, ClickModelParams};
use cltr_core::corpus::{
    normalize_features, parse_letor, subsample_queries, write_letor, CorpusSplit, Document,
    QueryGroup,
};
use cltr_core::eval::{ndcg_at_10, welch_t_test};
use cltr_core::ltr::LinearRankModel;

fn arb_document(dim: usize) -> impl Strategy<Value = (u8, Vec<f64>)> {
    (
        0u8..=4,
        proptest::collection::vec(-1000.0f64..1000.0, dim..=dim),
    )
}

fn arb_groups() -> impl Strategy<Value = Vec<QueryGroup>> {
    (1usize..5, 1usize..6).prop_flat_map(|(n_groups, dim)| {
        proptest::collection::vec(
            proptest::collection::vec(arb_document(dim), 1..5),
            n_groups..=n_groups,
        )
        .prop_map(|groups| {
            groups
                .into_iter()
                .enumerate()
                .map(|(q, docs)| QueryGroup {
                    query_id: format!("q{q}"),
                    documents: docs
                        .into_iter()
                        .enumerate()
                        .map(|(i, (grade, features))| Document::new(i, features, grade).unwrap())
                        .collect(),
                })
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn letor_round_trip_preserves_grades_and_features(groups in arb_groups()) {
        let mut text = Vec::new();
        write_letor(&groups, &mut text).unwrap();
        let parsed = parse_letor(std::io::Cursor::new(text)).unwrap();
        prop_assert_eq!(parsed.len(), groups.len());
        for (a, b) in groups.iter().zip(&parsed) {
            prop_assert_eq!(&a.query_id, &b.query_id);
            prop_assert_eq!(a.documents.len(), b.documents.len());
            for (da, db) in a.documents.iter().zip(&b.documents) {
                prop_assert_eq!(da.grade, db.grade);
                prop_assert_eq!(&da.features, &db.features);
            }
        }
    }

    #[test]
    fn normalization_is_idempotent_on_train(groups in arb_groups()) {
        let dim = groups[0].documents[0].features.len();
        let split = CorpusSplit {
            train: groups,
            validation: vec![],
            test: vec![],
            feature_dim: dim,
            context_feature_indices: vec![],
        };
        let once = normalize_features(split);
        let values: Vec<f64> = once
            .train
            .iter()
            .flat_map(|g| g.documents.iter().flat_map(|d| d.features.iter().copied()))
            .collect();
        prop_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        let twice = normalize_features(once.clone());
        let again: Vec<f64> = twice
            .train
            .iter()
            .flat_map(|g| g.documents.iter().flat_map(|d| d.features.iter().copied()))
            .collect();
        for (a, b) in values.iter().zip(&again) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn subsampling_never_splits_groups(groups in arb_groups(), fraction in 0.05f64..1.0, seed in 0u64..500) {
        let sampled = subsample_queries(&groups, fraction, seed).unwrap();
        prop_assert!(!sampled.is_empty());
        for g in &sampled {
            let original = groups.iter().find(|o| o.query_id == g.query_id).unwrap();
            prop_assert_eq!(g.documents.len(), original.documents.len());
            for (a, b) in g.documents.iter().zip(&original.documents) {
                prop_assert_eq!(&a.features, &b.features);
            }
        }
        // no duplicates
        let mut ids: Vec<&str> = sampled.iter().map(|g| g.query_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), sampled.len());
    }

    #[test]
    fn true_click_probability_is_highest_at_position_one(
        w in proptest::collection::vec(-1.0f64..1.0, 3),
        x in proptest::collection::vec(0.0f64..1.0, 3),
        rel in 0u8..=1,
    ) {
        let params = ClickModelParams { w, k_max: 10, noise_click_prob: 0.1 };
        let top = click_prob(&x, 1, rel, &params);
        prop_assert!(top > 0.0);
        for k in 2..=10 {
            let p = click_prob(&x, k, rel, &params);
            prop_assert!(p <= top + 1e-15);
            // tau* = top - p is nonnegative for every position
            prop_assert!(top - p >= -1e-15);
        }
    }

    #[test]
    fn ndcg_is_unit_iff_relevant_docs_lead_within_the_window(
        rels in proptest::collection::vec(0u8..=1, 2..12),
        scores in proptest::collection::vec(-10.0f64..10.0, 12),
    ) {
        prop_assume!(rels.iter().any(|&r| r == 1));
        let group = QueryGroup {
            query_id: "q".into(),
            documents: rels
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    Document::new(i, vec![scores[i]], if r == 1 { 4 } else { 0 }).unwrap()
                })
                .collect(),
        };
        let model = LinearRankModel { weights: vec![1.0], l2: 0.0, lr: 0.0, epochs: 0, seed: 0 };
        let ndcg = ndcg_at_10(&model, &[group.clone()]).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ndcg));

        let order = model.rank(&group);
        let n_rel = rels.iter().filter(|&&r| r == 1).count();
        let window = order.len().min(10);
        let leading = order
            .iter()
            .take(n_rel.min(window))
            .all(|&d| group.documents[d].binary_rel == 1);
        if leading {
            prop_assert!((ndcg - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(ndcg < 1.0 - 1e-12);
        }
    }

    #[test]
    fn welch_test_is_antisymmetric(
        a in proptest::collection::vec(0.0f64..1.0, 3..8),
        b in proptest::collection::vec(0.0f64..1.0, 3..8),
    ) {
        let (t1, df1, p1) = welch_t_test(&a, &b).unwrap();
        let (t2, df2, p2) = welch_t_test(&b, &a).unwrap();
        prop_assert!((t1 + t2).abs() < 1e-9);
        if df1.is_finite() && df2.is_finite() {
            prop_assert!((df1 - df2).abs() < 1e-9);
        }
        prop_assert!((p1 - p2).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&p1));
    }
}
