//! Embedding index, exact cosine kNN candidate generation and blocking
//! quality metrics.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::corpus::{serialize_entity, DataItem};
use crate::encoder::{EmbeddingModel, Projector};
use crate::error::{Error, Result};

/// Unit-norm embeddings of a table, one row per item id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Array2<f64>,
}

impl EmbeddingIndex {
    /// Rows are normalized; a zero row is rejected.
    pub fn new(ids: Vec<String>, mut vectors: Array2<f64>) -> Result<Self> {
        if ids.len() != vectors.nrows() {
            return Err(Error::shape(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                vectors.nrows()
            )));
        }
        if ids.is_empty() {
            return Err(Error::Empty("embedding index"));
        }
        for (i, mut row) in vectors.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::NonFinite {
                    what: "embedding",
                    detail: format!("row {i} (`{}`) has norm {n}", ids[i]),
                });
            }
            if (n - 1.0).abs() > 1e-12 {
                row /= n;
            }
        }
        Ok(Self { ids, vectors })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Serialize and encode every item. With a projector, the projected and
/// re-normalized vectors are indexed instead of the encoder output.
pub fn build_index(
    items: &[DataItem],
    model: &EmbeddingModel,
    projector: Option<&Projector>,
) -> Result<EmbeddingIndex> {
    if items.is_empty() {
        return Err(Error::Empty("items to index"));
    }
    let seqs: Vec<_> = items.iter().map(serialize_entity).collect();
    let mut z = model.encode_all(&seqs);
    if let Some(p) = projector {
        z = p.forward(&z)?;
    }
    EmbeddingIndex::new(items.iter().map(|i| i.id.clone()).collect(), z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id_a: String,
    pub id_b: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub k: usize,
    pub pairs: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn keys(&self) -> HashSet<(String, String)> {
        self.pairs.iter().map(|c| (c.id_a.clone(), c.id_b.clone())).collect()
    }

    /// Sort by `id_a`, then descending score, then `id_b`.
    pub fn sort(&mut self) {
        self.pairs.sort_by(|x, y| {
            x.id_a
                .cmp(&y.id_a)
                .then(y.score.total_cmp(&x.score))
                .then(x.id_b.cmp(&y.id_b))
        });
    }
}

/// Higher score first; equal scores go to the lower row index.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top-`k` target rows for every query row as `(score, target row)` lists.
pub fn knn_rows(queries: &EmbeddingIndex, targets: &EmbeddingIndex, k: usize) -> Result<Vec<Vec<(f64, usize)>>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > targets.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} available targets",
            targets.len()
        )));
    }
    if queries.dim() != targets.dim() {
        return Err(Error::shape(format!(
            "query dim {} vs target dim {}",
            queries.dim(),
            targets.dim()
        )));
    }
    let t = targets.vectors();
    let q = queries.vectors();
    Ok((0..queries.len())
        .into_par_iter()
        .map(|i| {
            let scores = t.dot(&q.row(i));
            let mut all: Vec<(f64, usize)> = scores
                .iter()
                .enumerate()
                .map(|(j, s)| (s.clamp(-1.0, 1.0), j))
                .collect();
            if k < all.len() {
                all.select_nth_unstable_by(k - 1, rank_order);
                all.truncate(k);
            }
            all.sort_by(rank_order);
            all
        })
        .collect())
}

/// For each row of `queries` (table A), the `k` most similar rows of
/// `targets` (table B) by cosine similarity.
pub fn knn_candidates(queries: &EmbeddingIndex, targets: &EmbeddingIndex, k: usize) -> Result<CandidateSet> {
    let rows = knn_rows(queries, targets, k)?;
    let mut pairs = Vec::with_capacity(queries.len() * k);
    for (qi, hits) in rows.into_iter().enumerate() {
        for (score, ti) in hits {
            pairs.push(Candidate {
                id_a: queries.ids()[qi].clone(),
                id_b: targets.ids()[ti].clone(),
                score,
            });
        }
    }
    Ok(CandidateSet { k, pairs })
}

/// Union of A->B and B->A search, each pair listed once with A on the left.
pub fn knn_candidates_symmetric(a: &EmbeddingIndex, b: &EmbeddingIndex, k: usize) -> Result<CandidateSet> {
    let forward = knn_candidates(a, b, k)?;
    let backward = knn_candidates(b, a, k)?;
    let mut seen: HashSet<(String, String)> = forward.keys();
    let mut pairs = forward.pairs;
    for c in backward.pairs {
        let key = (c.id_b, c.id_a);
        if seen.insert(key.clone()) {
            pairs.push(Candidate {
                id_a: key.0,
                id_b: key.1,
                score: c.score,
            });
        }
    }
    Ok(CandidateSet { k, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockingQuality {
    pub recall: f64,
    pub cssr: f64,
    pub candidates: usize,
}

/// Recall against the true matches and the candidate set size ratio.
pub fn recall_cssr(
    cands: &CandidateSet,
    truth: &HashSet<(String, String)>,
    size_a: usize,
    size_b: usize,
) -> Result<BlockingQuality> {
    if truth.is_empty() {
        return Err(Error::Empty("true matches (recall is undefined)"));
    }
    if size_a == 0 || size_b == 0 {
        return Err(Error::invalid("table sizes must be at least 1"));
    }
    let keys = cands.keys();
    let hit = truth.iter().filter(|t| keys.contains(*t)).count();
    Ok(BlockingQuality {
        recall: hit as f64 / truth.len() as f64,
        cssr: keys.len() as f64 / (size_a as f64 * size_b as f64),
        candidates: keys.len(),
    })
}

/// Recall and CSSR for every `k` in `ks`, reusing one top-`max(ks)` search.
pub fn recall_curve(
    queries: &EmbeddingIndex,
    targets: &EmbeddingIndex,
    truth: &HashSet<(String, String)>,
    ks: &[usize],
) -> Result<Vec<(usize, BlockingQuality)>> {
    let max_k = ks.iter().copied().max().ok_or(Error::Empty("k values"))?;
    let rows = knn_rows(queries, targets, max_k)?;
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let pairs = rows
            .iter()
            .enumerate()
            .flat_map(|(qi, hits)| {
                hits[..k].iter().map(move |(score, ti)| Candidate {
                    id_a: queries.ids()[qi].clone(),
                    id_b: targets.ids()[*ti].clone(),
                    score: *score,
                })
            })
            .collect();
        let set = CandidateSet { k, pairs };
        out.push((k, recall_cssr(&set, truth, queries.len(), targets.len())?));
    }
    Ok(out)
}

/// `id_a,id_b,score` with a header, sorted by `id_a` then descending score.
pub fn write_candidates(w: impl Write, cands: &CandidateSet) -> Result<()> {
    let mut sorted = cands.clone();
    sorted.sort();
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id_a", "id_b", "score"])?;
    for c in &sorted.pairs {
        out.write_record([c.id_a.as_str(), c.id_b.as_str(), &c.score.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_candidates(r: impl Read) -> Result<CandidateSet> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut pairs = Vec::new();
    let mut per_query: HashMap<String, usize> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Parse {
                path: "candidates".into(),
                line: line + 2,
                msg: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let score: f64 = rec[2].trim().parse().map_err(|_| Error::Parse {
            path: "candidates".into(),
            line: line + 2,
            msg: format!("bad score `{}`", &rec[2]),
        })?;
        *per_query.entry(rec[0].to_string()).or_default() += 1;
        pairs.push(Candidate {
            id_a: rec[0].to_string(),
            id_b: rec[1].to_string(),
            score,
        });
    }
    let k = per_query.values().copied().max().unwrap_or(0);
    Ok(CandidateSet { k, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn index(prefix: &str, m: Array2<f64>) -> EmbeddingIndex {
        let ids = (0..m.nrows()).map(|i| format!("{prefix}{i}")).collect();
        EmbeddingIndex::new(ids, m).unwrap()
    }

    #[test]
    fn self_match_is_top1() {
        let t = index("b", array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]);
        let q = index("a", array![[0.6, 0.8]]);
        let c = knn_candidates(&q, &t, 1).unwrap();
        assert_eq!(c.pairs[0].id_b, "b1");
        assert!((c.pairs[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lower_row() {
        let t = index("b", array![[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]);
        let q = index("a", array![[1.0, 0.0]]);
        let c = knn_candidates(&q, &t, 1).unwrap();
        assert_eq!(c.pairs[0].id_b, "b1");
    }

    #[test]
    fn full_k_is_full_product() {
        let t = index("b", array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let q = index("a", array![[1.0, 2.0], [3.0, 1.0]]);
        let c = knn_candidates(&q, &t, 3).unwrap();
        assert_eq!(c.keys().len(), 6);
        assert!(knn_candidates(&q, &t, 4).is_err());
        assert!(knn_candidates(&q, &t, 0).is_err());
    }

    #[test]
    fn recall_and_cssr_arithmetic() {
        let pairs: Vec<Candidate> = (0..100)
            .map(|i| Candidate {
                id_a: format!("a{}", i % 10),
                id_b: format!("b{}", i / 10),
                score: 0.5,
            })
            .collect();
        let c = CandidateSet { k: 10, pairs };
        let truth: HashSet<_> = [("a1".to_string(), "b2".to_string())].into_iter().collect();
        let q = recall_cssr(&c, &truth, 10, 50).unwrap();
        assert_eq!(q.recall, 1.0);
        assert!((q.cssr - 0.2).abs() < 1e-15);
        assert!(recall_cssr(&c, &HashSet::new(), 10, 50).is_err());
    }

    #[test]
    fn candidate_file_roundtrip_and_order() {
        let c = CandidateSet {
            k: 2,
            pairs: vec![
                Candidate {
                    id_a: "a2".into(),
                    id_b: "b1".into(),
                    score: 0.1,
                },
                Candidate {
                    id_a: "a1".into(),
                    id_b: "b1".into(),
                    score: 0.2,
                },
                Candidate {
                    id_a: "a1".into(),
                    id_b: "b2".into(),
                    score: 0.9,
                },
            ],
        };
        let mut buf = Vec::new();
        write_candidates(&mut buf, &c).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "id_a,id_b,score\na1,b2,0.9\na1,b1,0.2\na2,b1,0.1\n");
        let back = read_candidates(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.k, 2);
    }

    #[test]
    fn symmetric_union_contains_forward() {
        let a = index("a", array![[1.0, 0.0], [0.0, 1.0]]);
        let b = index("b", array![[1.0, 0.1], [0.9, 0.0], [0.0, 1.0]]);
        let f = knn_candidates(&a, &b, 1).unwrap();
        let s = knn_candidates_symmetric(&a, &b, 1).unwrap();
        assert!(f.keys().is_subset(&s.keys()));
        assert_eq!(s.keys().len(), 3);
    }
}
