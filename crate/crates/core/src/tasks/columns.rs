//! Column matching: kNN candidates over column embeddings, pairwise
//! decisions, and connected components as clusters.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;

use crate::blocking::{knn_rows, EmbeddingIndex};
use crate::corpus::{serialize_column, TokenSequence};
use crate::encoder::EmbeddingModel;
use crate::error::{Error, Result};
use crate::matcher::{decide, PairExample};
use crate::rng;
use crate::tasks::cleaning::PairScorer;

pub const DEFAULT_COLUMN_K: usize = 20;
pub const DEFAULT_LABELED_PAIRS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnItem {
    pub id: String,
    pub values: Vec<String>,
}

impl ColumnItem {
    pub fn serialize(&self) -> TokenSequence {
        serialize_column(&self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnCluster {
    pub id: usize,
    pub members: Vec<String>,
    pub majority_type: Option<String>,
}

#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Connected components over vertices `0..n`. Components are ordered by
/// their smallest vertex and list members ascending.
pub fn connected_components(n: usize, edges: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
    let mut uf = UnionFind::new(n);
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::IndexOutOfRange {
                index: a.max(b),
                len: n,
            });
        }
        uf.union(a, b);
    }
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for v in 0..n {
        let root = uf.find(v);
        let i = *slot.entry(root).or_insert_with(|| {
            comps.push(Vec::new());
            comps.len() - 1
        });
        comps[i].push(v);
    }
    Ok(comps)
}

/// Unordered candidate pairs `(i, j, score)` with `i < j` from each column's
/// `k` nearest other columns.
pub fn column_candidates(index: &EmbeddingIndex, k: usize) -> Result<Vec<(usize, usize, f64)>> {
    let rows = knn_rows(index, index, (k + 1).min(index.len()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        for (score, j) in row.into_iter().filter(|&(_, j)| j != i).take(k) {
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                out.push((key.0, key.1, score));
            }
        }
    }
    out.sort_by_key(|a| (a.0, a.1));
    Ok(out)
}

pub fn column_index(columns: &[ColumnItem], model: &EmbeddingModel) -> Result<EmbeddingIndex> {
    let seqs: Vec<TokenSequence> = columns.iter().map(ColumnItem::serialize).collect();
    let ids = columns.iter().map(|c| c.id.clone()).collect();
    EmbeddingIndex::new(ids, model.encode_all(&seqs))
}

/// Clusters and matched edges from candidate pairs scored by `scorer`.
pub fn clusters_from_candidates(
    columns: &[ColumnItem],
    candidates: &[(usize, usize, f64)],
    scorer: &impl PairScorer,
) -> Result<(Vec<ColumnCluster>, Vec<(usize, usize)>)> {
    let seqs: Vec<TokenSequence> = columns.iter().map(ColumnItem::serialize).collect();
    let pairs: Vec<(&TokenSequence, &TokenSequence)> =
        candidates.iter().map(|&(i, j, _)| (&seqs[i], &seqs[j])).collect();
    let edges: Vec<(usize, usize)> = scorer
        .score_pairs(&pairs)
        .into_iter()
        .zip(candidates)
        .filter(|(p, _)| decide(*p) == 1)
        .map(|(_, &(i, j, _))| (i, j))
        .collect();
    let clusters = connected_components(columns.len(), &edges)?
        .into_iter()
        .enumerate()
        .map(|(id, members)| ColumnCluster {
            id,
            members: members.into_iter().map(|v| columns[v].id.clone()).collect(),
            majority_type: None,
        })
        .collect();
    Ok((clusters, edges))
}

pub fn match_columns(
    columns: &[ColumnItem],
    encoder: &EmbeddingModel,
    scorer: &impl PairScorer,
    k: usize,
) -> Result<Vec<ColumnCluster>> {
    if columns.is_empty() {
        return Ok(Vec::new());
    }
    let index = column_index(columns, encoder)?;
    let cands = column_candidates(&index, k)?;
    Ok(clusters_from_candidates(columns, &cands, scorer)?.0)
}

/// Fill in each cluster's majority type; ties go to the lexicographically
/// smallest type.
pub fn annotate_majority(clusters: &mut [ColumnCluster], truth: &HashMap<String, String>) -> Result<()> {
    for c in clusters.iter_mut() {
        let counts = type_counts(&c.members, truth)?;
        c.majority_type = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
            .map(|(t, _)| t.to_owned());
    }
    Ok(())
}

fn type_counts<'a>(members: &[String], truth: &'a HashMap<String, String>) -> Result<BTreeMap<&'a str, usize>> {
    let mut counts = BTreeMap::new();
    for m in members {
        let t = truth
            .get(m)
            .ok_or_else(|| Error::Schema(format!("column `{m}` has no truth type")))?;
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Size-weighted average of per-cluster majority fractions.
pub fn cluster_purity(clusters: &[ColumnCluster], truth: &HashMap<String, String>) -> Result<f64> {
    let mut majority = 0usize;
    let mut total = 0usize;
    for c in clusters {
        let counts = type_counts(&c.members, truth)?;
        majority += counts.values().copied().max().unwrap_or(0);
        total += c.members.len();
    }
    if total == 0 {
        return Err(Error::Empty("clusters"));
    }
    Ok(majority as f64 / total as f64)
}

/// Uniformly sample up to `count` candidate pairs and label them by type
/// equality: `(i, j, label)`.
pub fn label_sampled_pairs(
    columns: &[ColumnItem],
    candidates: &[(usize, usize, f64)],
    truth: &HashMap<String, String>,
    count: usize,
    seed: u64,
) -> Result<Vec<(usize, usize, u8)>> {
    let mut picked: Vec<&(usize, usize, f64)> = candidates.iter().collect();
    picked.shuffle(&mut rng::stream(seed, rng::STREAM_SHUFFLE));
    picked.truncate(count);
    let type_of = |i: usize| {
        truth
            .get(&columns[i].id)
            .ok_or_else(|| Error::Schema(format!("column `{}` has no truth type", columns[i].id)))
    };
    picked
        .into_iter()
        .map(|&(i, j, _)| Ok((i, j, u8::from(type_of(i)? == type_of(j)?))))
        .collect()
}

pub fn column_examples(columns: &[ColumnItem], pairs: &[(usize, usize, u8)]) -> Vec<PairExample> {
    pairs
        .iter()
        .map(|&(i, j, label)| PairExample::new(columns[i].serialize(), columns[j].serialize(), label))
        .collect()
}

/// Split 2:1:1 into train, valid, test.
pub fn split_2_1_1<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = items.len();
    let a = n / 2;
    let b = a + (n - a) / 2;
    (items[..a].to_vec(), items[a..b].to_vec(), items[b..].to_vec())
}

pub fn write_clusters(w: impl Write, clusters: &[ColumnCluster]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(["cluster_id", "column_id"])?;
    for c in clusters {
        for m in &c.members {
            writer.write_record([c.id.to_string().as_str(), m])?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn read_clusters(r: impl Read) -> Result<Vec<ColumnCluster>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut by_id: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let id: usize = record
            .get(0)
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| Error::Parse {
                path: "<input>".into(),
                line: i + 2,
                msg: "bad cluster id".into(),
            })?;
        by_id
            .entry(id)
            .or_default()
            .push(record.get(1).unwrap_or_default().to_owned());
    }
    Ok(by_id
        .into_iter()
        .map(|(id, members)| ColumnCluster {
            id,
            members,
            majority_type: None,
        })
        .collect())
}

/// Columns from a CSV with header `column_id,value`, one row per value;
/// value order is preserved.
pub fn read_columns(r: impl Read) -> Result<Vec<ColumnItem>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut order: Vec<String> = Vec::new();
    let mut values: HashMap<String, Vec<String>> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(0).unwrap_or_default().to_owned();
        let v = record.get(1).unwrap_or_default().to_owned();
        values
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(v);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let values = values.remove(&id).unwrap_or_default();
            ColumnItem { id, values }
        })
        .collect())
}

pub fn write_columns(w: impl Write, columns: &[ColumnItem]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(["column_id", "value"])?;
    for c in columns {
        for v in &c.values {
            writer.write_record([c.id.as_str(), v])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Truth types from a CSV with header `column_id,type`.
pub fn read_column_types(r: impl Read) -> Result<HashMap<String, String>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out = HashMap::new();
    for record in reader.records() {
        let record = record?;
        out.insert(
            record.get(0).unwrap_or_default().to_owned(),
            record.get(1).unwrap_or_default().to_owned(),
        );
    }
    Ok(out)
}

pub fn write_column_types(w: impl Write, types: &[(String, String)]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(["column_id", "type"])?;
    for (id, t) in types {
        writer.write_record([id, t])?;
    }
    writer.flush()?;
    Ok(())
}
