//! Data augmentation: token/span/attribute operators on serialized items,
//! the cell shuffle for column sequences, and batch-wise cutoff on token
//! embedding matrices.
//!
//! Token- and span-level operators only touch value tokens (tokens that
//! follow a `[VAL]` marker), so every `[COL]` keeps its name and `[VAL]`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{is_marker, TokenSequence, COL, VAL};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Token -> synonyms.
#[derive(Debug, Clone, Default)]
pub struct SynonymDict {
    map: HashMap<String, Vec<String>>,
}

impl SynonymDict {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: impl Into<String>, synonyms: Vec<String>) {
        self.map.insert(token.into(), synonyms);
    }

    pub fn get(&self, token: &str) -> Option<&[String]> {
        self.map.get(token).map(Vec::as_slice).filter(|s| !s.is_empty())
    }

    /// Parse `token<TAB>syn1,syn2,...` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dict = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (token, syns) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: "<synonyms>".into(),
                line: i + 1,
                msg: "expected token<TAB>syn1,syn2,...".into(),
            })?;
            let syns = syns
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect();
            dict.insert(token.trim(), syns);
        }
        Ok(dict)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                msg,
            },
            e => e,
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DaKind {
    TokenDel,
    TokenRepl,
    TokenSwap,
    TokenInsert,
    SpanDel,
    SpanShuffle,
    ColShuffle,
    ColDel,
    CellShuffle,
}

impl DaKind {
    pub const ALL: [DaKind; 9] = [
        DaKind::TokenDel,
        DaKind::TokenRepl,
        DaKind::TokenSwap,
        DaKind::TokenInsert,
        DaKind::SpanDel,
        DaKind::SpanShuffle,
        DaKind::ColShuffle,
        DaKind::ColDel,
        DaKind::CellShuffle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DaKind::TokenDel => "token_del",
            DaKind::TokenRepl => "token_repl",
            DaKind::TokenSwap => "token_swap",
            DaKind::TokenInsert => "token_insert",
            DaKind::SpanDel => "span_del",
            DaKind::SpanShuffle => "span_shuffle",
            DaKind::ColShuffle => "col_shuffle",
            DaKind::ColDel => "col_del",
            DaKind::CellShuffle => "cell_shuffle",
        }
    }
}

impl fmt::Display for DaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DaKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown augmentation operator `{s}`")))
    }
}

/// A base augmentation operator plus the synonym source used by the
/// replace/insert operators.
#[derive(Debug, Clone)]
pub struct DaOperator {
    pub kind: DaKind,
    pub synonyms: Option<Arc<SynonymDict>>,
}

impl DaOperator {
    pub fn new(kind: DaKind) -> Self {
        Self { kind, synonyms: None }
    }

    pub fn with_synonyms(mut self, synonyms: Arc<SynonymDict>) -> Self {
        self.synonyms = Some(synonyms);
        self
    }
}

/// Positions of value tokens, grouped into maximal runs (one per `[VAL]`).
fn value_runs(tokens: &[String]) -> Vec<std::ops::Range<usize>> {
    let mut runs = Vec::new();
    let mut start: Option<usize> = None;
    let mut in_value = false;
    for (i, tok) in tokens.iter().enumerate() {
        if is_marker(tok) {
            if let Some(s) = start.take() {
                runs.push(s..i);
            }
            in_value = tok == VAL;
        } else if in_value && start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        runs.push(s..tokens.len());
    }
    runs
}

fn value_positions(tokens: &[String]) -> Vec<usize> {
    value_runs(tokens).into_iter().flatten().collect()
}

/// `[COL]`-delimited attribute blocks, plus anything before the first one.
fn split_blocks<'a>(tokens: &'a [String], marker: &str) -> (&'a [String], Vec<&'a [String]>) {
    let starts: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| *t == marker)
        .map(|(i, _)| i)
        .collect();
    let Some(&first) = starts.first() else {
        return (tokens, Vec::new());
    };
    let mut blocks = Vec::with_capacity(starts.len());
    for (k, &s) in starts.iter().enumerate() {
        let e = starts.get(k + 1).copied().unwrap_or(tokens.len());
        blocks.push(&tokens[s..e]);
    }
    (&tokens[..first], blocks)
}

fn span_length(total_len: usize, rng: &mut Rng) -> usize {
    let hi = 2.max((0.1 * total_len as f64).ceil() as usize);
    rng.gen_range(2..=hi)
}

/// Apply one augmentation operator. Deterministic given `rng_seed`.
pub fn apply_da(seq: &TokenSequence, op: &DaOperator, rng_seed: u64) -> TokenSequence {
    let mut rng = rng::from_seed(rng_seed);
    apply_with_rng(seq, op, &mut rng)
}

fn apply_with_rng(seq: &TokenSequence, op: &DaOperator, rng: &mut Rng) -> TokenSequence {
    let tokens = seq.tokens();
    let unchanged = || seq.clone();
    match op.kind {
        DaKind::TokenDel => {
            let pos = value_positions(tokens);
            let Some(&p) = pos.choose(rng) else {
                return unchanged();
            };
            let mut out = tokens.to_vec();
            out.remove(p);
            TokenSequence::new(out)
        }
        DaKind::TokenRepl | DaKind::TokenInsert => {
            let Some(dict) = op.synonyms.as_deref() else {
                return unchanged();
            };
            let pos = value_positions(tokens);
            let Some(&p) = pos.choose(rng) else {
                return unchanged();
            };
            let Some(syns) = dict.get(&tokens[p]) else {
                return unchanged();
            };
            let syn = syns.choose(rng).expect("non-empty").clone();
            let mut out = tokens.to_vec();
            if op.kind == DaKind::TokenRepl {
                out[p] = syn;
            } else {
                out.insert(p + 1, syn);
            }
            TokenSequence::new(out)
        }
        DaKind::TokenSwap => {
            let pos = value_positions(tokens);
            if pos.len() < 2 {
                return unchanged();
            }
            let pick = sample(rng, pos.len(), 2);
            let mut out = tokens.to_vec();
            out.swap(pos[pick.index(0)], pos[pick.index(1)]);
            TokenSequence::new(out)
        }
        DaKind::SpanDel | DaKind::SpanShuffle => {
            let runs = value_runs(tokens);
            let pos: Vec<(usize, usize)> = runs
                .iter()
                .enumerate()
                .flat_map(|(r, run)| run.clone().map(move |p| (r, p)))
                .collect();
            let Some(&(r, start)) = pos.choose(rng) else {
                return unchanged();
            };
            let len = span_length(tokens.len(), rng);
            let end = (start + len).min(runs[r].end);
            let mut out = tokens.to_vec();
            if op.kind == DaKind::SpanDel {
                out.drain(start..end);
            } else {
                out[start..end].shuffle(rng);
            }
            TokenSequence::new(out)
        }
        DaKind::ColShuffle => {
            let (prefix, blocks) = split_blocks(tokens, COL);
            if blocks.len() < 2 {
                return unchanged();
            }
            let pick = sample(rng, blocks.len(), 2);
            let mut blocks = blocks;
            blocks.swap(pick.index(0), pick.index(1));
            TokenSequence::new(prefix.iter().chain(blocks.concat().iter()).cloned().collect())
        }
        DaKind::ColDel => {
            let (prefix, mut blocks) = split_blocks(tokens, COL);
            if blocks.is_empty() {
                return unchanged();
            }
            let i = rng.gen_range(0..blocks.len());
            blocks.remove(i);
            TokenSequence::new(prefix.iter().chain(blocks.concat().iter()).cloned().collect())
        }
        DaKind::CellShuffle => {
            if tokens.iter().any(|t| t == COL) {
                return unchanged();
            }
            let (prefix, mut cells) = split_blocks(tokens, VAL);
            if cells.len() < 2 {
                return unchanged();
            }
            cells.shuffle(rng);
            TokenSequence::new(prefix.iter().chain(cells.concat().iter()).cloned().collect())
        }
    }
}

/// Returns `(originals, augmented)` with index correspondence. Item `i` is
/// augmented with a seed derived from `(rng_seed, i)`.
pub fn augment_batch(
    batch: &[TokenSequence],
    op: &DaOperator,
    rng_seed: u64,
) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
    if batch.is_empty() {
        return Err(Error::Empty("augmentation batch"));
    }
    let augmented = batch
        .iter()
        .enumerate()
        .map(|(i, s)| apply_da(s, op, rng::derive_indexed(rng_seed, rng::STREAM_DA, i as u64)))
        .collect();
    Ok((batch.to_vec(), augmented))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CutoffKind {
    Token,
    Feature,
    Span,
}

impl CutoffKind {
    pub fn name(self) -> &'static str {
        match self {
            CutoffKind::Token => "token",
            CutoffKind::Feature => "feature",
            CutoffKind::Span => "span",
        }
    }
}

impl FromStr for CutoffKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(CutoffKind::Token),
            "feature" => Ok(CutoffKind::Feature),
            "span" => Ok(CutoffKind::Span),
            _ => Err(Error::invalid(format!("unknown cutoff kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffSpec {
    pub kind: CutoffKind,
    pub ratio: f64,
}

impl CutoffSpec {
    pub const DEFAULT_RATIO: f64 = 0.05;

    pub fn new(kind: CutoffKind, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid(format!("cutoff ratio must lie in (0, 1), got {ratio}")));
        }
        Ok(Self { kind, ratio })
    }

    /// Number of indices zeroed out of `n`: `ceil(ratio * n)`, with a small
    /// tolerance so that e.g. `0.3 * 10` counts as exactly 3.
    pub fn count(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        let raw = self.ratio * n as f64;
        let c = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
        c.clamp(1, n)
    }
}

/// Indices sampled once per batch and applied to every item in it.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffMask {
    pub kind: CutoffKind,
    /// Token positions (token/span cutoff) or feature indices (feature cutoff),
    /// sorted ascending.
    pub indices: Vec<usize>,
}

impl CutoffMask {
    /// Sample a mask for a batch whose longest item has `max_len` tokens and
    /// whose embeddings have `dim` features.
    pub fn sample(spec: &CutoffSpec, max_len: usize, dim: usize, rng: &mut Rng) -> Self {
        let indices = match spec.kind {
            CutoffKind::Token => {
                let n = spec.count(max_len);
                let mut v = sample(rng, max_len, n).into_vec();
                v.sort_unstable();
                v
            }
            CutoffKind::Feature => {
                let n = spec.count(dim);
                let mut v = sample(rng, dim, n).into_vec();
                v.sort_unstable();
                v
            }
            CutoffKind::Span => {
                let n = spec.count(max_len);
                if n == 0 {
                    Vec::new()
                } else {
                    let start = rng.gen_range(0..=max_len - n);
                    (start..start + n).collect()
                }
            }
        };
        Self {
            kind: spec.kind,
            indices,
        }
    }

    /// Whether entry `(token, feature)` is zeroed.
    pub fn is_cut(&self, token: usize, feature: usize) -> bool {
        let idx = match self.kind {
            CutoffKind::Token | CutoffKind::Span => token,
            CutoffKind::Feature => feature,
        };
        self.indices.binary_search(&idx).is_ok()
    }

    /// Zero the masked entries of one `L x e` token-embedding matrix. Token
    /// indices past the item's length are ignored.
    pub fn apply(&self, m: &mut Array2<f64>) {
        match self.kind {
            CutoffKind::Token | CutoffKind::Span => {
                for &t in &self.indices {
                    if t < m.nrows() {
                        m.row_mut(t).fill(0.0);
                    }
                }
            }
            CutoffKind::Feature => {
                for &f in &self.indices {
                    if f < m.ncols() {
                        m.column_mut(f).fill(0.0);
                    }
                }
            }
        }
    }
}

/// Batch-wise cutoff over `L x e` token-embedding matrices: the same token,
/// feature or span indices are zeroed in every item.
pub fn cutoff(embeddings: &[Array2<f64>], spec: &CutoffSpec, rng_seed: u64) -> Result<(Vec<Array2<f64>>, CutoffMask)> {
    let spec = CutoffSpec::new(spec.kind, spec.ratio)?;
    let max_len = embeddings.iter().map(Array2::nrows).max().unwrap_or(0);
    let dim = embeddings.first().map(Array2::ncols).unwrap_or(0);
    if embeddings.iter().any(|m| m.ncols() != dim) {
        return Err(Error::shape("cutoff batch has mixed feature dimensions"));
    }
    let mut rng = rng::from_seed(rng_seed);
    let mask = CutoffMask::sample(&spec, max_len, dim, &mut rng);
    let out = embeddings
        .iter()
        .map(|m| {
            let mut m = m.clone();
            mask.apply(&mut m);
            m
        })
        .collect();
    Ok((out, mask))
}
