//! k-means over TF-IDF rows and the cluster-aware batch sampler.
//!
//! Batches are filled cluster by cluster so that items in a batch (and hence
//! the negatives each item sees) tend to be lexically similar. A partially
//! filled batch carries over into the next cluster.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::tfidf::{tfidf_featurize, SparseVector, TfidfMatrix};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest-inertia run is kept.
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iter: 100,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn sq_dist(x: &SparseVector, x_sq: f64, c: &[f64], c_sq: f64) -> f64 {
    (x_sq + c_sq - 2.0 * x.dot_dense(c)).max(0.0)
}

fn nearest(x: &SparseVector, x_sq: f64, centroids: &[Vec<f64>], c_sq: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, (c, cs)) in centroids.iter().zip(c_sq).enumerate() {
        let d = sq_dist(x, x_sq, c, *cs);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn densify(x: &SparseVector, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for (i, val) in x.indices.iter().zip(&x.values) {
        v[*i as usize] = *val;
    }
    v
}

/// k-means++ seeding followed by Lloyd iterations. Euclidean distance on
/// L2-normalized rows orders pairs the same way as cosine similarity.
/// `k` is capped at the number of rows.
pub fn kmeans(features: &TfidfMatrix, config: KMeansConfig, rng: &mut Rng) -> Result<KMeansResult> {
    if features.rows.is_empty() {
        return Err(Error::Empty("k-means input"));
    }
    if config.k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..config.n_init.max(1) {
        let run = kmeans_once(features, &config, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

fn kmeans_once(features: &TfidfMatrix, config: &KMeansConfig, rng: &mut Rng) -> KMeansResult {
    let rows = &features.rows;
    let n = rows.len();
    let k = config.k.min(n);
    let dim = features.dim();
    let x_sq: Vec<f64> = rows.iter().map(SparseVector::norm_sq).collect();

    // k-means++ seeding
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut centroids = vec![densify(&rows[chosen[0]], dim)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&rows[i], x_sq[i], &centroids[0], x_sq[chosen[0]]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|d| *d > 0.0).expect("total > 0");
            }
            pick
        } else {
            // all remaining points coincide with a centroid
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            *free.choose(rng).expect("k <= n")
        };
        chosen.push(pick);
        let c = densify(&rows[pick], dim);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(&rows[i], x_sq[i], &c, x_sq[pick]));
        }
        centroids.push(c);
    }

    let mut assignments = vec![0usize; n];
    let mut iterations = 0;
    for _ in 0..config.max_iter {
        iterations += 1;
        let c_sq: Vec<f64> = centroids.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (j, d) = nearest(&rows[i], x_sq[i], &centroids, &c_sq);
            assignments[i] = j;
            dist[i] = d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &j) in assignments.iter().enumerate() {
            counts[j] += 1;
            for (t, v) in rows[i].indices.iter().zip(&rows[i].values) {
                sums[j][*t as usize] += v;
            }
        }
        // re-seed empty clusters at the points farthest from their centroid
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| dist[*b].total_cmp(&dist[*a]).then(a.cmp(b)));
        let mut donors = order.into_iter();
        for j in 0..k {
            if counts[j] == 0 {
                if let Some(p) = donors.next() {
                    let old = assignments[p];
                    if counts[old] > 1 {
                        counts[old] -= 1;
                        for (t, v) in rows[p].indices.iter().zip(&rows[p].values) {
                            sums[old][*t as usize] -= v;
                        }
                        assignments[p] = j;
                        counts[j] = 1;
                        sums[j] = densify(&rows[p], dim);
                    }
                }
            }
        }
        let mut shift = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let inv = 1.0 / counts[j] as f64;
            for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                let nv = s * inv;
                shift += (nv - *c) * (nv - *c);
                *c = nv;
            }
        }
        if shift <= config.tol {
            break;
        }
    }
    // final assignment against the final centroids
    let c_sq: Vec<f64> = centroids.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let mut inertia = 0.0;
    for i in 0..n {
        let (j, d) = nearest(&rows[i], x_sq[i], &centroids, &c_sq);
        assignments[i] = j;
        inertia += d;
    }
    KMeansResult {
        assignments,
        centroids,
        iterations,
        inertia,
    }
}

/// Fill batches of `batch_size` from shuffled clusters, carrying a partial
/// batch across cluster boundaries, then shuffle the batch order. The last
/// partial batch (if any) is kept.
pub fn batches_from_assignments(assignments: &[usize], batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid("batch size must be at least 2"));
    }
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignments.iter().enumerate() {
        clusters[c].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    clusters.shuffle(rng);
    let mut batches = Vec::with_capacity(assignments.len() / batch_size + 1);
    let mut last = Vec::with_capacity(batch_size);
    for mut cluster in clusters {
        cluster.shuffle(rng);
        for x in cluster {
            last.push(x);
            if last.len() == batch_size {
                batches.push(std::mem::replace(&mut last, Vec::with_capacity(batch_size)));
            }
        }
    }
    if !last.is_empty() {
        batches.push(last);
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Uniformly shuffled batches.
pub fn uniform_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    batches_from_assignments(&vec![0; n], batch_size, rng)
}

/// Cluster assignments computed once and reused to draw fresh batches every
/// epoch.
#[derive(Debug, Clone)]
pub struct ClusterBatcher {
    assignments: Vec<usize>,
    k: usize,
}

impl ClusterBatcher {
    pub fn fit(corpus: &[TokenSequence], k: usize, rng_seed: u64) -> Result<Self> {
        let features = tfidf_featurize(corpus)?;
        let mut rng = rng::stream(rng_seed, rng::STREAM_CLUSTER);
        let result = kmeans(&features, KMeansConfig::new(k), &mut rng)?;
        Ok(Self {
            k: result.k(),
            assignments: result.assignments,
        })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn batches(&self, batch_size: usize, rng_seed: u64) -> Result<Vec<Vec<usize>>> {
        let mut rng = rng::from_seed(rng_seed);
        batches_from_assignments(&self.assignments, batch_size, &mut rng)
    }
}

/// TF-IDF + k-means + cluster-aware batching in one call. Returns item
/// indices into `corpus`.
pub fn cluster_batches(
    corpus: &[TokenSequence],
    k: usize,
    batch_size: usize,
    rng_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("number of clusters must be at least 1"));
    }
    if batch_size < 2 {
        return Err(Error::invalid("batch size must be at least 2"));
    }
    let batcher = ClusterBatcher::fit(corpus, k, rng_seed)?;
    batcher.batches(batch_size, rng::derive_seed(rng_seed, rng::STREAM_SHUFFLE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn seqs(texts: &[&str]) -> Vec<TokenSequence> {
        texts.iter().map(|t| TokenSequence::parse(t)).collect()
    }

    #[test]
    fn two_lexical_groups_fill_their_own_batches() {
        let corpus = seqs(&[
            "[COL] t [VAL] apple iphone case",
            "[COL] t [VAL] samsung galaxy tv",
            "[COL] t [VAL] apple iphone cover",
            "[COL] t [VAL] samsung galaxy television",
        ]);
        for seed in 0..20 {
            let batches = cluster_batches(&corpus, 2, 2, seed).unwrap();
            assert_eq!(batches.len(), 2);
            for b in &batches {
                let mut b = b.clone();
                b.sort();
                assert!(b == vec![0, 2] || b == vec![1, 3], "seed {seed}: {b:?}");
            }
        }
    }

    #[test]
    fn single_cluster_is_a_shuffled_partition() {
        let corpus = seqs(&["a", "b", "c", "d", "e"]);
        let batches = cluster_batches(&corpus, 1, 2, 7).unwrap();
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(batches.iter().filter(|b| b.len() != 2).count(), 1);
    }

    #[test]
    fn more_clusters_than_points() {
        let corpus = seqs(&["a", "a", "b"]);
        let features = tfidf_featurize(&corpus).unwrap();
        let r = kmeans(&features, KMeansConfig::new(10), &mut rng::from_seed(1)).unwrap();
        assert_eq!(r.k(), 3);
        assert_eq!(r.assignments[0], r.assignments[1]);
    }

    #[test]
    fn kmeans_separates_obvious_groups() {
        let corpus = seqs(&["x y", "x y z", "p q", "p q r", "x z", "q r"]);
        let features = tfidf_featurize(&corpus).unwrap();
        let r = kmeans(&features, KMeansConfig::new(2), &mut rng::from_seed(3)).unwrap();
        let a: HashSet<usize> = [0, 1, 4].iter().map(|i| r.assignments[*i]).collect();
        let b: HashSet<usize> = [2, 3, 5].iter().map(|i| r.assignments[*i]).collect();
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert_ne!(a, b);
    }

    #[test]
    fn invalid_arguments() {
        let corpus = seqs(&["a"]);
        assert!(cluster_batches(&corpus, 0, 2, 1).is_err());
        assert!(cluster_batches(&corpus, 1, 1, 1).is_err());
        assert!(cluster_batches(&[], 1, 2, 1).is_err());
    }
}
