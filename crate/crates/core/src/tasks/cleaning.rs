//! Error-correction selection: pick, per cell, the candidate correction the
//! matcher scores highest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::corpus::{serialize_cell_contextfree, serialize_row_contextual, Attribute, DataItem, TokenSequence};
use crate::error::{Error, Result};
use crate::matcher::{decide, f1_from_counts, MatcherModel, PairExample, F1};
use crate::rng;

pub const DEFAULT_LABELED_ROWS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    ContextFree,
    Contextual,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::ContextFree => "contextfree",
            Scheme::Contextual => "contextual",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "contextfree" => Ok(Scheme::ContextFree),
            "contextual" => Ok(Scheme::Contextual),
            _ => Err(Error::invalid(format!("unknown serialization scheme `{s}`"))),
        }
    }
}

/// A cell together with its candidate corrections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellCandidates {
    pub row: usize,
    pub column: String,
    pub original: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Correction {
    pub row: usize,
    pub column: String,
    pub original: String,
    pub correction: String,
}

#[derive(Debug, Clone, Default)]
pub struct CleaningInstance {
    /// Dirty table; the row index is the position in this vector.
    pub rows: Vec<DataItem>,
    pub cells: Vec<CellCandidates>,
    /// Every erroneous cell with its repair.
    pub truth: Option<Vec<Correction>>,
}

/// Anything that yields `[p_nonmatch, p_match]` for serialized pairs.
pub trait PairScorer {
    fn score_pairs(&self, pairs: &[(&TokenSequence, &TokenSequence)]) -> Vec<[f64; 2]>;
}

impl PairScorer for MatcherModel {
    fn score_pairs(&self, pairs: &[(&TokenSequence, &TokenSequence)]) -> Vec<[f64; 2]> {
        self.predict_batch(pairs)
    }
}

impl CleaningInstance {
    pub fn validate(&self) -> Result<()> {
        for c in &self.cells {
            let row = self.rows.get(c.row).ok_or(Error::IndexOutOfRange {
                index: c.row,
                len: self.rows.len(),
            })?;
            if row.value(&c.column).is_none() {
                return Err(Error::Schema(format!("row {} has no column `{}`", c.row, c.column)));
            }
        }
        Ok(())
    }

    /// Serialize a cell (left) and the same cell with `value` substituted
    /// (right) under the given scheme.
    pub fn serialize(&self, cell: &CellCandidates, value: &str, scheme: Scheme) -> Result<TokenSequence> {
        match scheme {
            Scheme::ContextFree => serialize_cell_contextfree(&cell.column, value),
            Scheme::Contextual => {
                let row = self.rows.get(cell.row).ok_or(Error::IndexOutOfRange {
                    index: cell.row,
                    len: self.rows.len(),
                })?;
                let idx = row
                    .attributes
                    .iter()
                    .position(|a| a.name == cell.column)
                    .ok_or_else(|| Error::Schema(format!("row {} has no column `{}`", cell.row, cell.column)))?;
                serialize_row_contextual(row, Some(idx), Some(value))
            }
        }
    }

    /// All serialized sequences (cells and candidates) for pre-training.
    pub fn pretraining_corpus(&self, scheme: Scheme) -> Result<Vec<TokenSequence>> {
        let mut out = Vec::new();
        for cell in &self.cells {
            out.push(self.serialize(cell, &cell.original, scheme)?);
            for cand in &cell.candidates {
                if cand != &cell.original {
                    out.push(self.serialize(cell, cand, scheme)?);
                }
            }
        }
        Ok(out)
    }

    fn truth_map(&self) -> Result<HashMap<(usize, &str), &str>> {
        let truth = self.truth.as_ref().ok_or(Error::Empty("ground-truth corrections"))?;
        Ok(truth
            .iter()
            .map(|t| ((t.row, t.column.as_str()), t.correction.as_str()))
            .collect())
    }

    /// Labeled (cell, candidate) pairs drawn from the given rows. A candidate
    /// is positive iff it equals the cell's true value.
    pub fn training_pairs(&self, rows: &[usize], scheme: Scheme) -> Result<Vec<PairExample>> {
        let truth = self.truth_map()?;
        let rows: HashSet<usize> = rows.iter().copied().collect();
        let mut out = Vec::new();
        for cell in self.cells.iter().filter(|c| rows.contains(&c.row)) {
            let correct = truth
                .get(&(cell.row, cell.column.as_str()))
                .copied()
                .unwrap_or(cell.original.as_str());
            let left = self.serialize(cell, &cell.original, scheme)?;
            for cand in &cell.candidates {
                let right = self.serialize(cell, cand, scheme)?;
                out.push(PairExample::new(left.clone(), right, u8::from(cand == correct)));
            }
        }
        Ok(out)
    }

    /// Restrict cells and truth to the given rows.
    pub fn subset(&self, rows: &[usize]) -> CleaningInstance {
        let keep: HashSet<usize> = rows.iter().copied().collect();
        CleaningInstance {
            rows: self.rows.clone(),
            cells: self.cells.iter().filter(|c| keep.contains(&c.row)).cloned().collect(),
            truth: self
                .truth
                .as_ref()
                .map(|t| t.iter().filter(|c| keep.contains(&c.row)).cloned().collect()),
        }
    }
}

/// Uniformly sample `count` distinct row indices; returns (sampled, rest),
/// both ascending.
pub fn sample_rows(n_rows: usize, count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n_rows).collect();
    idx.shuffle(&mut rng::stream(seed, rng::STREAM_SHUFFLE));
    let count = count.min(n_rows);
    let mut picked = idx[..count].to_vec();
    let mut rest = idx[count..].to_vec();
    picked.sort_unstable();
    rest.sort_unstable();
    (picked, rest)
}

/// Index of the highest match probability; ties go to the earliest entry.
pub fn argmax_first(scores: &[[f64; 2]]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if s[1] <= scores[b][1] => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn clean_table(instance: &CleaningInstance, scorer: &impl PairScorer, scheme: Scheme) -> Result<Vec<Correction>> {
    let mut out = Vec::new();
    for cell in &instance.cells {
        if cell.candidates.is_empty() {
            continue;
        }
        let left = instance.serialize(cell, &cell.original, scheme)?;
        let rights = cell
            .candidates
            .iter()
            .map(|c| instance.serialize(cell, c, scheme))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&TokenSequence, &TokenSequence)> = rights.iter().map(|r| (&left, r)).collect();
        let scores = scorer.score_pairs(&pairs);
        let Some(best) = argmax_first(&scores) else {
            continue;
        };
        let chosen = &cell.candidates[best];
        if chosen == &cell.original || decide(scores[best]) == 0 {
            continue;
        }
        out.push(Correction {
            row: cell.row,
            column: cell.column.clone(),
            original: cell.original.clone(),
            correction: chosen.clone(),
        });
    }
    Ok(out)
}

/// A correction is a true positive iff its position and repaired value both
/// match the truth.
pub fn correction_f1(emitted: &[Correction], truth: &[Correction]) -> F1 {
    let (tp, fp, fn_) = correction_counts(emitted, truth);
    f1_from_counts(tp, fp, fn_)
}

/// `(tp, fp, fn)` over distinct corrections.
pub fn correction_counts(emitted: &[Correction], truth: &[Correction]) -> (usize, usize, usize) {
    let truth_set: HashSet<(usize, &str, &str)> = truth
        .iter()
        .map(|t| (t.row, t.column.as_str(), t.correction.as_str()))
        .collect();
    let emitted_set: HashSet<(usize, &str, &str)> = emitted
        .iter()
        .map(|e| (e.row, e.column.as_str(), e.correction.as_str()))
        .collect();
    let tp = emitted_set.intersection(&truth_set).count();
    (tp, emitted_set.len() - tp, truth_set.len() - tp)
}

const CANDIDATE_SEP: char = '|';

pub fn read_candidates(r: impl Read) -> Result<Vec<CellCandidates>> {
    let mut reader = csv::Reader::from_reader(r);
    expect_header(&mut reader, &["row_index", "col_name", "original", "candidates"], 3)?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = parse_row_index(record.get(0).unwrap_or_default(), i + 2)?;
        let candidates = match record.get(3).unwrap_or_default() {
            "" => Vec::new(),
            s => s.split(CANDIDATE_SEP).map(str::to_owned).collect(),
        };
        out.push(CellCandidates {
            row,
            column: record.get(1).unwrap_or_default().to_owned(),
            original: record.get(2).unwrap_or_default().to_owned(),
            candidates,
        });
    }
    Ok(out)
}

pub fn write_candidates(w: impl Write, cells: &[CellCandidates]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(["row_index", "col_name", "original", "candidates"])?;
    for c in cells {
        if c.candidates.iter().any(|s| s.contains(CANDIDATE_SEP)) {
            return Err(Error::invalid(format!(
                "candidate for row {} column `{}` contains `{CANDIDATE_SEP}`",
                c.row, c.column
            )));
        }
        let joined = c.candidates.join(&CANDIDATE_SEP.to_string());
        writer.write_record([c.row.to_string().as_str(), &c.column, &c.original, &joined])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_corrections(r: impl Read) -> Result<Vec<Correction>> {
    let mut reader = csv::Reader::from_reader(r);
    expect_header(&mut reader, &["row_index", "col_name", "original", "correction"], 4)?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        out.push(Correction {
            row: parse_row_index(record.get(0).unwrap_or_default(), i + 2)?,
            column: record.get(1).unwrap_or_default().to_owned(),
            original: record.get(2).unwrap_or_default().to_owned(),
            correction: record.get(3).unwrap_or_default().to_owned(),
        });
    }
    Ok(out)
}

/// Corrections are written sorted by (row, column).
pub fn write_corrections(w: impl Write, corrections: &[Correction]) -> Result<()> {
    let mut sorted = corrections.to_vec();
    sorted.sort();
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(["row_index", "col_name", "original", "correction"])?;
    for c in &sorted {
        writer.write_record([c.row.to_string().as_str(), &c.column, &c.original, &c.correction])?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a headered table without an id column; rows are indexed by
/// position.
pub fn read_dirty_table(path: &Path) -> Result<Vec<DataItem>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let attrs = headers
            .iter()
            .zip(record.iter())
            .map(|(h, v)| Attribute::new(h, v))
            .collect();
        rows.push(DataItem::new(i.to_string(), attrs));
    }
    Ok(rows)
}

pub fn write_dirty_table(path: &Path, rows: &[DataItem]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let Some(first) = rows.first() else {
        writer.flush()?;
        return Ok(());
    };
    writer.write_record(first.attributes.iter().map(|a| a.name.as_str()))?;
    for row in rows {
        writer.write_record(row.attributes.iter().map(|a| a.value.as_str()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-column counts of emitted corrections, for reporting.
pub fn corrections_by_column(corrections: &[Correction]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for c in corrections {
        *m.entry(c.column.clone()).or_insert(0) += 1;
    }
    m
}

fn expect_header<R: Read>(reader: &mut csv::Reader<R>, names: &[&str], check: usize) -> Result<()> {
    let headers = reader.headers()?;
    let ok = headers.len() == names.len() && headers.iter().zip(names).take(check).all(|(h, n)| h.trim() == *n);
    if ok {
        Ok(())
    } else {
        Err(Error::Parse {
            path: "<input>".into(),
            line: 1,
            msg: format!("expected header `{}`", names.join(",")),
        })
    }
}

fn parse_row_index(s: &str, line: usize) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Parse {
        path: "<input>".into(),
        line,
        msg: format!("bad row index `{s}`"),
    })
}
