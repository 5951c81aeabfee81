//! Blocking and pseudo labeling on planted embeddings, where true matches are
//! near-identical vectors and non-matches are near-orthogonal.

use std::collections::HashSet;

use contramatch::blocking::{knn_candidates, recall_cssr, EmbeddingIndex};
use contramatch::pseudolabel::{assign_pseudo, pseudo_quality, thresholds_for, ThresholdPair};
use ndarray::Array2;

const GROUPS: usize = 12;

fn planted() -> (EmbeddingIndex, EmbeddingIndex, HashSet<(String, String)>) {
    let dim = GROUPS;
    let a = Array2::from_shape_fn((GROUPS, dim), |(i, j)| if i == j { 1.0 } else { 0.0 });
    // a little shared noise keeps every similarity distinct
    let b = Array2::from_shape_fn((GROUPS, dim), |(i, j)| {
        if i == j {
            1.0
        } else {
            0.01 * ((i * 7 + j * 3) % 11) as f64
        }
    });
    let ids = |p: &str| (0..GROUPS).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let truth = (0..GROUPS).map(|i| (format!("a{i}"), format!("b{i}"))).collect();
    (
        EmbeddingIndex::new(ids("a"), a).unwrap(),
        EmbeddingIndex::new(ids("b"), b).unwrap(),
        truth,
    )
}

#[test]
fn separated_similarities_give_perfect_blocking_and_pseudo_labels() {
    let (a, b, truth) = planted();
    let cands = knn_candidates(&a, &b, 3).unwrap();
    for c in &cands.pairs {
        let matched = truth.contains(&(c.id_a.clone(), c.id_b.clone()));
        assert!(if matched { c.score > 0.9 } else { c.score < 0.3 }, "{c:?}");
    }
    let q = recall_cssr(&cands, &truth, GROUPS, GROUPS).unwrap();
    assert_eq!(q.recall, 1.0);
    assert_eq!(q.candidates, GROUPS * 3);

    let pseudo = assign_pseudo(&cands, ThresholdPair::new(0.9, 0.3, 0.5, 8).unwrap()).unwrap();
    assert_eq!(pseudo.labels.len(), cands.len());
    assert_eq!(pseudo_quality(&pseudo, &truth), (Some(1.0), Some(1.0)));
}

#[test]
fn ratio_solved_thresholds_on_planted_candidates() {
    let (a, b, truth) = planted();
    let cands = knn_candidates(&a, &b, 3).unwrap();
    // one true match per three candidates
    let rho = 1.0 / 3.0;
    let t = thresholds_for(&cands, rho, 0.9, 8).unwrap();
    let pseudo = assign_pseudo(&cands, t).unwrap();
    assert_eq!(pseudo.positives(), GROUPS);
    assert!((pseudo.achieved_ratio() - rho).abs() <= 1.0 / cands.len() as f64);
    assert_eq!(pseudo_quality(&pseudo, &truth), (Some(1.0), Some(1.0)));
}
