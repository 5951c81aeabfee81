//! Hashed-token encoder producing unit-norm item embeddings, the linear
//! projector used during pre-training, and their exact reverse-mode
//! gradients.
//!
//! Forward path for one item with token ids `t_1..t_L`:
//!
//! ```text
//! E      = table[t_1..t_L]            (L x e, cutoff applied here)
//! p      = mean over rows of E        (e)
//! h      = tanh(W1 p + b1)            (hidden)
//! o      = W2 h + b2                  (d)
//! z      = o / |o|                    (unit vector)
//! proj   = Wp z + bp                  (d_proj, pre-training only)
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::augment::CutoffMask;
use crate::corpus::{TokenSequence, CLS, COL, SEP, VAL};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Ids below this bound are reserved for markers.
pub const RESERVED_IDS: u32 = 16;

/// Maps tokens to ids by hashing. Markers get fixed ids below
/// [`RESERVED_IDS`], so they never collide with content tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size <= RESERVED_IDS as usize || size > u32::MAX as usize {
            return Err(Error::invalid(format!(
                "vocabulary size must be in ({RESERVED_IDS}, 2^32), got {size}"
            )));
        }
        Ok(Self { size: size as u32 })
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn id(&self, token: &str) -> u32 {
        match token {
            COL => 1,
            VAL => 2,
            CLS => 3,
            SEP => 4,
            _ => {
                let lower = token.to_lowercase();
                let h = crate::rng::fnv1a64(lower.as_bytes());
                RESERVED_IDS + (h % u64::from(self.size - RESERVED_IDS)) as u32
            }
        }
    }

    pub fn tokenize(&self, seq: &TokenSequence) -> Vec<u32> {
        seq.tokens().iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1 << 16,
            embed_dim: 64,
            hidden_dim: 256,
            output_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(self.vocab_size)?;
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn uniform(rng: &mut Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

/// The trainable item encoder.
#[derive(Debug)]
pub struct EmbeddingModel {
    pub config: EncoderConfig,
    vocab: Vocabulary,
    /// `V x e` token embedding table.
    pub table: Array2<f64>,
    /// `hidden x e`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `d x hidden`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    degenerate: AtomicUsize,
}

impl Clone for EmbeddingModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            vocab: self.vocab,
            table: self.table.clone(),
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2.clone(),
            degenerate: AtomicUsize::new(self.degenerate_count()),
        }
    }
}

impl PartialEq for EmbeddingModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.table == other.table
            && self.w1 == other.w1
            && self.b1 == other.b1
            && self.w2 == other.w2
            && self.b2 == other.b2
    }
}

/// Intermediates recorded by [`EmbeddingModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    ids: Vec<Vec<u32>>,
    cutoff: Option<CutoffMask>,
    pooled: Array2<f64>,
    hidden: Array2<f64>,
    z: Array2<f64>,
    norms: Vec<f64>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    /// Unit-norm outputs of the recorded pass.
    pub fn output(&self) -> &Array2<f64> {
        &self.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub table: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl EncoderGrads {
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            table: Array2::zeros((config.vocab_size, config.embed_dim)),
            w1: Array2::zeros((config.hidden_dim, config.embed_dim)),
            b1: Array1::zeros(config.hidden_dim),
            w2: Array2::zeros((config.output_dim, config.hidden_dim)),
            b2: Array1::zeros(config.output_dim),
        }
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        vec![
            self.table.as_slice().expect("standard layout"),
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn scale(&mut self, k: f64) {
        self.table *= k;
        self.w1 *= k;
        self.b1 *= k;
        self.w2 *= k;
        self.b2 *= k;
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        self.table += &other.table;
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }
}

impl EmbeddingModel {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let h = config.hidden_dim;
        let d = config.output_dim;
        let table = Array2::from_shape_simple_fn((config.vocab_size, e), || rng.sample::<f64, _>(StandardNormal));
        let b_in = 1.0 / (e as f64).sqrt();
        let b_hid = 1.0 / (h as f64).sqrt();
        let w1 = uniform(rng, (h, e), b_in);
        let b1 = uniform(rng, (1, h), b_in).into_shape_with_order(h).unwrap();
        let w2 = uniform(rng, (d, h), b_hid);
        let b2 = uniform(rng, (1, d), b_hid).into_shape_with_order(d).unwrap();
        Ok(Self {
            config,
            vocab: Vocabulary::new(config.vocab_size)?,
            table,
            w1,
            b1,
            w2,
            b2,
            degenerate: AtomicUsize::new(0),
        })
    }

    /// Assemble a model from explicit parameters (checkpoint loading, tests).
    pub fn from_parts(
        config: EncoderConfig,
        table: Array2<f64>,
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let (v, e, h, d) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden_dim,
            config.output_dim,
        );
        if table.dim() != (v, e) || w1.dim() != (h, e) || b1.len() != h || w2.dim() != (d, h) || b2.len() != d {
            return Err(Error::shape("encoder parameters do not match config"));
        }
        Ok(Self {
            config,
            vocab: Vocabulary::new(v)?,
            table: table.as_standard_layout().into_owned(),
            w1: w1.as_standard_layout().into_owned(),
            b1,
            w2: w2.as_standard_layout().into_owned(),
            b2,
            degenerate: AtomicUsize::new(0),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn tokenize(&self, seq: &TokenSequence) -> Vec<u32> {
        self.vocab.tokenize(seq)
    }

    /// Number of fully zeroed inputs that fell back to the first basis vector.
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.load(Ordering::Relaxed)
    }

    /// `L x e` token embedding matrix.
    pub fn embed_tokens(&self, ids: &[u32]) -> Array2<f64> {
        let mut m = Array2::zeros((ids.len(), self.config.embed_dim));
        for (mut row, &id) in m.rows_mut().into_iter().zip(ids) {
            row.assign(&self.table.row(id as usize));
        }
        m
    }

    fn pool(&self, ids: &[u32], cutoff: Option<&CutoffMask>) -> Array1<f64> {
        let mut pooled = Array1::zeros(self.config.embed_dim);
        if ids.is_empty() {
            return pooled;
        }
        match cutoff {
            None => {
                for &id in ids {
                    pooled += &self.table.row(id as usize);
                }
            }
            Some(mask) => {
                let mut m = self.embed_tokens(ids);
                mask.apply(&mut m);
                pooled = m.sum_axis(Axis(0));
            }
        }
        pooled /= ids.len() as f64;
        pooled
    }

    /// pooled (N x e) -> (hidden, z, norms)
    fn head(&self, pooled: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
        let mut hidden = pooled.dot(&self.w1.t());
        hidden += &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let mut out = hidden.dot(&self.w2.t());
        out += &self.b2;
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 && n.is_finite() {
                row /= n;
                norms.push(n);
            } else {
                self.degenerate.fetch_add(1, Ordering::Relaxed);
                row.fill(0.0);
                row[0] = 1.0;
                norms.push(0.0);
            }
        }
        (hidden, out, norms)
    }

    /// Encode one `L x e` token-embedding matrix (already cut off, if at all).
    pub fn encode(&self, emb: &Array2<f64>) -> Result<Array1<f64>> {
        if emb.ncols() != self.config.embed_dim {
            return Err(Error::shape(format!(
                "token embeddings have {} features, encoder expects {}",
                emb.ncols(),
                self.config.embed_dim
            )));
        }
        let pooled = if emb.nrows() == 0 {
            Array1::zeros(self.config.embed_dim)
        } else {
            emb.mean_axis(Axis(0)).expect("non-empty")
        };
        let pooled = pooled.insert_axis(Axis(0));
        let (_, z, _) = self.head(&pooled);
        Ok(z.row(0).to_owned())
    }

    pub fn encode_ids(&self, ids: &[u32]) -> Array1<f64> {
        let pooled = self.pool(ids, None).insert_axis(Axis(0));
        let (_, z, _) = self.head(&pooled);
        z.row(0).to_owned()
    }

    pub fn encode_sequence(&self, seq: &TokenSequence) -> Array1<f64> {
        self.encode_ids(&self.tokenize(seq))
    }

    /// Encode many sequences into an `N x d` matrix.
    pub fn encode_all(&self, seqs: &[TokenSequence]) -> Array2<f64> {
        let ids: Vec<Vec<u32>> = seqs.iter().map(|s| self.tokenize(s)).collect();
        self.forward(&ids, None).0
    }

    /// Batched forward pass recording what [`backward`](Self::backward) needs.
    pub fn forward(&self, batch: &[Vec<u32>], cutoff: Option<&CutoffMask>) -> (Array2<f64>, ForwardTape) {
        let e = self.config.embed_dim;
        let mut pooled = Array2::zeros((batch.len(), e));
        for (mut row, ids) in pooled.rows_mut().into_iter().zip(batch) {
            row.assign(&self.pool(ids, cutoff));
        }
        let (hidden, z, norms) = self.head(&pooled);
        let tape = ForwardTape {
            ids: batch.to_vec(),
            cutoff: cutoff.cloned(),
            pooled,
            hidden,
            z: z.clone(),
            norms,
        };
        (z, tape)
    }

    /// Exact gradients of a scalar loss given `dloss/dz` for every row of the
    /// recorded forward pass.
    pub fn backward(&self, tape: &ForwardTape, grad_z: &Array2<f64>) -> Result<EncoderGrads> {
        let mut grads = EncoderGrads::zeros(&self.config);
        self.backward_into(tape, grad_z, &mut grads)?;
        Ok(grads)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(&self, tape: &ForwardTape, grad_z: &Array2<f64>, grads: &mut EncoderGrads) -> Result<()> {
        let d = self.config.output_dim;
        if grad_z.dim() != (tape.batch_size(), d) || tape.pooled.ncols() != self.config.embed_dim {
            return Err(Error::shape(format!(
                "backward: upstream gradient {:?} does not match the recorded forward pass ({} x {d})",
                grad_z.dim(),
                tape.batch_size()
            )));
        }
        // through the normalization: d o = (dz - z (z . dz)) / |o|
        let mut d_out = grad_z.to_owned();
        for ((mut row, z), &n) in d_out.rows_mut().into_iter().zip(tape.z.rows()).zip(&tape.norms) {
            if n == 0.0 {
                row.fill(0.0);
                continue;
            }
            let proj = row.dot(&z);
            row.scaled_add(-proj, &z);
            row /= n;
        }
        grads.w2 += &d_out.t().dot(&tape.hidden);
        grads.b2 += &d_out.sum_axis(Axis(0));
        let mut d_pre = d_out.dot(&self.w2);
        d_pre.zip_mut_with(&tape.hidden, |g, h| *g *= 1.0 - h * h);
        grads.w1 += &d_pre.t().dot(&tape.pooled);
        grads.b1 += &d_pre.sum_axis(Axis(0));
        let d_pooled = d_pre.dot(&self.w1);
        for (ids, dp) in tape.ids.iter().zip(d_pooled.rows()) {
            if ids.is_empty() {
                continue;
            }
            let scale = 1.0 / ids.len() as f64;
            for (t, &id) in ids.iter().enumerate() {
                let mut row = grads.table.row_mut(id as usize);
                match &tape.cutoff {
                    None => row.scaled_add(scale, &dp),
                    Some(mask) => {
                        for (f, (g, v)) in row.iter_mut().zip(dp.iter()).enumerate() {
                            if !mask.is_cut(t, f) {
                                *g += scale * v;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.table.as_slice_mut().expect("standard layout"),
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Linear projection head `z -> Wp z + bp`, used only while pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// `d_proj x d`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

pub const DEFAULT_PROJECTOR_DIM: usize = 768;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ProjectorGrads {
    pub fn buffers(&self) -> Vec<&[f64]> {
        vec![
            self.w.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }
}

impl Projector {
    pub fn new(input_dim: usize, output_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        Self {
            w: uniform(rng, (output_dim, input_dim), bound),
            b: uniform(rng, (1, output_dim), bound)
                .into_shape_with_order(output_dim)
                .unwrap(),
        }
    }

    pub fn from_parts(w: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        if w.nrows() != b.len() {
            return Err(Error::shape("projector bias length must equal output dim"));
        }
        Ok(Self {
            w: w.as_standard_layout().into_owned(),
            b,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn project(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "projector expects {} inputs, got {}",
                self.input_dim(),
                z.len()
            )));
        }
        Ok(self.w.dot(&z) + &self.b)
    }

    /// `N x d -> N x d_proj`.
    pub fn forward(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "projector expects {} inputs, got {}",
                self.input_dim(),
                z.ncols()
            )));
        }
        let mut p = z.dot(&self.w.t());
        p += &self.b;
        Ok(p)
    }

    /// Returns the parameter gradients and `dloss/dz`.
    pub fn backward(&self, z: &Array2<f64>, grad_out: &Array2<f64>) -> Result<(ProjectorGrads, Array2<f64>)> {
        if grad_out.dim() != (z.nrows(), self.output_dim()) {
            return Err(Error::shape("projector backward: gradient shape mismatch"));
        }
        let grads = ProjectorGrads {
            w: grad_out.t().dot(z),
            b: grad_out.sum_axis(Axis(0)),
        };
        Ok((grads, grad_out.dot(&self.w)))
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Cosine similarity of two vectors; 0 if either is the zero vector.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}
