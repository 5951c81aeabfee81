use contramatch::corpus::{serialize_entity, TokenSequence};
use contramatch::encoder::EncoderConfig;
use contramatch::pretrain::{pretrain_with_projector, PretrainConfig};
use contramatch::tasks::em::init_models;
use contramatch::tasks::synthetic::{generate_em, SyntheticEmConfig};
use ndarray::Array2;

fn groups_corpus() -> (Vec<TokenSequence>, Vec<Vec<usize>>) {
    let syn = generate_em(&SyntheticEmConfig {
        groups: 10,
        items_per_group: 10,
        left_per_group: 5,
        ..Default::default()
    });
    let items: Vec<_> = syn.dataset.table_a.iter().chain(&syn.dataset.table_b).collect();
    let pos = |id: &str| items.iter().position(|i| i.id == id).unwrap();
    let groups = syn
        .groups
        .iter()
        .map(|g| g.iter().map(|id| pos(id)).collect())
        .collect();
    (items.iter().map(|i| serialize_entity(i)).collect(), groups)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// (mean within-group cosine, mean cosine over all pairs)
fn cosines(z: &Array2<f64>, groups: &[Vec<usize>]) -> (f64, f64) {
    let rows: Vec<Vec<f64>> = z.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut within = (0.0, 0);
    for g in groups {
        for a in 0..g.len() {
            for b in a + 1..g.len() {
                within.0 += cos(&rows[g[a]], &rows[g[b]]);
                within.1 += 1;
            }
        }
    }
    let mut all = (0.0, 0);
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            all.0 += cos(&rows[a], &rows[b]);
            all.1 += 1;
        }
    }
    (within.0 / within.1 as f64, all.0 / all.1 as f64)
}

#[test]
fn three_epochs_separate_near_duplicate_groups() {
    let (corpus, groups) = groups_corpus();
    assert_eq!(corpus.len(), 100);
    let (model, proj) = init_models(EncoderConfig::default(), 768, 0).unwrap();
    let before = cosines(&model.encode_all(&corpus), &groups);
    let (out, _) = pretrain_with_projector(&corpus, model, proj, &PretrainConfig::default()).unwrap();
    let after = cosines(&out.model.encode_all(&corpus), &groups);
    // the untrained encoder maps everything into a narrow cone, so the
    // within-group cosine is read relative to the all-pairs mean
    let margin = |c: (f64, f64)| c.0 - c.1;
    assert!(margin(after) > margin(before), "before {before:?} after {after:?}");
    assert!(after.0 > after.1);
}
