//! TF-IDF features for lexical clustering.
//!
//! Weight of term `t` in a document is `tf(t) * idf(t)` with raw counts for
//! `tf` and `idf(t) = ln((1 + n) / (1 + df(t))) + 1`, followed by L2
//! normalization. Markers are not terms; attribute names are. Terms are
//! lowercased.

use std::collections::HashMap;

use crate::corpus::{is_marker, TokenSequence};
use crate::error::{Error, Result};

/// Sparse row, indices strictly increasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(i, v)| v * dense[*i as usize])
            .sum()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfidfMatrix {
    /// Term -> column, in first-appearance order.
    pub terms: HashMap<String, u32>,
    pub idf: Vec<f64>,
    pub rows: Vec<SparseVector>,
}

impl TfidfMatrix {
    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    pub fn weight(&self, row: usize, term: &str) -> f64 {
        let Some(&col) = self.terms.get(term) else {
            return 0.0;
        };
        let r = &self.rows[row];
        r.indices.binary_search(&col).map(|k| r.values[k]).unwrap_or(0.0)
    }
}

pub fn tfidf_featurize(corpus: &[TokenSequence]) -> Result<TfidfMatrix> {
    if corpus.is_empty() {
        return Err(Error::Empty("tf-idf corpus"));
    }
    let mut terms: HashMap<String, u32> = HashMap::new();
    let mut counts: Vec<Vec<(u32, f64)>> = Vec::with_capacity(corpus.len());
    let mut df: Vec<usize> = Vec::new();
    for doc in corpus {
        let mut tf: HashMap<u32, f64> = HashMap::new();
        for tok in doc.tokens() {
            if is_marker(tok) {
                continue;
            }
            let key = tok.to_lowercase();
            let next = terms.len() as u32;
            let id = *terms.entry(key).or_insert(next);
            if id as usize == df.len() {
                df.push(0);
            }
            *tf.entry(id).or_insert(0.0) += 1.0;
        }
        let mut row: Vec<(u32, f64)> = tf.into_iter().collect();
        row.sort_unstable_by_key(|(i, _)| *i);
        for (i, _) in &row {
            df[*i as usize] += 1;
        }
        counts.push(row);
    }
    let n = corpus.len() as f64;
    let idf: Vec<f64> = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
    let rows = counts
        .into_iter()
        .map(|row| {
            let mut v = SparseVector {
                indices: row.iter().map(|(i, _)| *i).collect(),
                values: row.iter().map(|(i, c)| c * idf[*i as usize]).collect(),
            };
            let norm = v.norm_sq().sqrt();
            if norm > 0.0 {
                v.values.iter_mut().for_each(|x| *x /= norm);
            }
            v
        })
        .collect();
    Ok(TfidfMatrix { terms, idf, rows })
}
