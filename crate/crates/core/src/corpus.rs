//! Data items, their token serializations, and corpus loading.
//!
//! Entity rows serialize as `[COL] name [VAL] value ...`, pairs as
//! `[CLS] x [SEP] y [SEP]`, and table columns as `[VAL] v1 [VAL] v2 ...`.
//! Values are split on whitespace; markers are atomic tokens.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const COL: &str = "[COL]";
pub const VAL: &str = "[VAL]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const MARKERS: [&str; 4] = [COL, VAL, CLS, SEP];

pub fn is_marker(token: &str) -> bool {
    MARKERS.contains(&token)
}

/// A serialized data item.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    /// Parse a space-delimited serialization.
    pub fn parse(text: &str) -> Self {
        Self::new(text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push_marker(&mut self, marker: &str) {
        self.tokens.push(marker.to_owned());
    }

    fn push_words(&mut self, text: &str) {
        self.tokens.extend(text.split_whitespace().map(str::to_owned));
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub value: String,
}

impl Attribute {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: value.into(),
        }
    }
}

/// An attributed record: an entity row, a cell, or a column.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataItem {
    pub id: String,
    pub attributes: Vec<Attribute>,
}

impl DataItem {
    pub fn new(id: impl Into<String>, attributes: Vec<Attribute>) -> Self {
        Self {
            id: id.into(),
            attributes,
        }
    }

    /// Build from `(name, value)` pairs.
    pub fn from_pairs<N: Into<String>, V: Into<String>>(
        id: impl Into<String>,
        pairs: impl IntoIterator<Item = (N, V)>,
    ) -> Self {
        Self::new(id, pairs.into_iter().map(|(n, v)| Attribute::new(n, v)).collect())
    }

    pub fn value(&self, name: &str) -> Option<&str> {
        self.attributes
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.value.as_str())
    }

    fn validate(&self) -> Result<()> {
        if let Some(a) = self.attributes.iter().find(|a| a.name.trim().is_empty()) {
            return Err(Error::Schema(format!(
                "item `{}` has an attribute with an empty name (value `{}`)",
                self.id, a.value
            )));
        }
        Ok(())
    }
}

/// Which table an item was loaded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceTag {
    A,
    B,
    Single,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub source: SourceTag,
    pub item: DataItem,
}

/// A set of items, unique by `(source, id)`.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn new(entries: Vec<CorpusEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            e.item.validate()?;
            if !seen.insert((e.source, e.item.id.as_str())) {
                return Err(Error::Schema(format!(
                    "duplicate id `{}` in source {:?}",
                    e.item.id, e.source
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_items(source: SourceTag, items: Vec<DataItem>) -> Result<Self> {
        Self::new(items.into_iter().map(|item| CorpusEntry { source, item }).collect())
    }

    /// Union of two tables, tagged A and B.
    pub fn from_tables(a: Vec<DataItem>, b: Vec<DataItem>) -> Result<Self> {
        let entries = a
            .into_iter()
            .map(|item| CorpusEntry {
                source: SourceTag::A,
                item,
            })
            .chain(b.into_iter().map(|item| CorpusEntry {
                source: SourceTag::B,
                item,
            }))
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn items(&self) -> impl Iterator<Item = &DataItem> {
        self.entries.iter().map(|e| &e.item)
    }

    /// Entries of one source only.
    pub fn filter_source(&self, source: SourceTag) -> Corpus {
        Corpus {
            entries: self.entries.iter().filter(|e| e.source == source).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn serialize_entity(item: &DataItem) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for attr in &item.attributes {
        seq.push_marker(COL);
        seq.push_words(&attr.name);
        seq.push_marker(VAL);
        seq.push_words(&attr.value);
    }
    seq
}

pub fn serialize_pair(x: &TokenSequence, y: &TokenSequence) -> TokenSequence {
    let mut tokens = Vec::with_capacity(x.len() + y.len() + 3);
    tokens.push(CLS.to_owned());
    tokens.extend(x.tokens.iter().cloned());
    tokens.push(SEP.to_owned());
    tokens.extend(y.tokens.iter().cloned());
    tokens.push(SEP.to_owned());
    TokenSequence::new(tokens)
}

/// `[COL] attr [VAL] value` for a single cell.
pub fn serialize_cell_contextfree(attr_name: &str, value: &str) -> Result<TokenSequence> {
    if attr_name.trim().is_empty() {
        return Err(Error::Schema("cell attribute name is empty".into()));
    }
    let mut seq = TokenSequence::default();
    seq.push_marker(COL);
    seq.push_words(attr_name);
    seq.push_marker(VAL);
    seq.push_words(value);
    Ok(seq)
}

/// Full-row serialization, optionally with one cell value substituted.
pub fn serialize_row_contextual(
    row: &DataItem,
    replace_index: Option<usize>,
    replacement: Option<&str>,
) -> Result<TokenSequence> {
    let replace = match (replace_index, replacement) {
        (None, None) => None,
        (Some(i), Some(r)) => {
            if i >= row.attributes.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: row.attributes.len(),
                });
            }
            Some((i, r))
        }
        _ => return Err(Error::invalid("replace_index and replacement must be given together")),
    };
    let mut seq = TokenSequence::default();
    for (i, attr) in row.attributes.iter().enumerate() {
        seq.push_marker(COL);
        seq.push_words(&attr.name);
        seq.push_marker(VAL);
        match replace {
            Some((j, r)) if j == i => seq.push_words(r),
            _ => seq.push_words(&attr.value),
        }
    }
    Ok(seq)
}

/// Bare column serialization: `[VAL] v1 [VAL] v2 ...`.
pub fn serialize_column<S: AsRef<str>>(values: &[S]) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for v in values {
        seq.push_marker(VAL);
        seq.push_words(v.as_ref());
    }
    seq
}

/// Inverse of [`serialize_entity`] on well-formed sequences. Tokens before
/// the first `[COL]` are dropped; multi-token names and values are re-joined
/// with single spaces.
pub fn deserialize_entity(id: impl Into<String>, seq: &TokenSequence) -> DataItem {
    let mut attributes = Vec::new();
    let mut name: Vec<&str> = Vec::new();
    let mut value: Vec<&str> = Vec::new();
    let mut state = 0u8; // 0 = before first [COL], 1 = in name, 2 = in value
    for tok in seq.tokens() {
        match tok.as_str() {
            COL => {
                if state != 0 {
                    attributes.push(Attribute::new(name.join(" "), value.join(" ")));
                }
                name.clear();
                value.clear();
                state = 1;
            }
            VAL if state == 1 => state = 2,
            t => match state {
                1 => name.push(t),
                2 => value.push(t),
                _ => {}
            },
        }
    }
    if state != 0 {
        attributes.push(Attribute::new(name.join(" "), value.join(" ")));
    }
    DataItem::new(id, attributes)
}

/// Resample to exactly `target_size` entries.
///
/// Larger corpora are sampled uniformly without replacement (kept in input
/// order). Smaller ones are repeated `target / len` times and topped up with
/// uniform draws with replacement. The result is a multiset, so it is
/// returned as plain entries rather than a [`Corpus`].
pub fn resample_corpus(corpus: &Corpus, target_size: usize, rng_seed: u64) -> Result<Vec<CorpusEntry>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(resample_indices(corpus.len(), target_size, rng_seed)?
        .into_iter()
        .map(|i| corpus.entries[i].clone())
        .collect())
}

/// Indices behind [`resample_corpus`] for a collection of `n` items.
pub fn resample_indices(n: usize, target_size: usize, rng_seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Empty("corpus"));
    }
    if target_size == 0 {
        return Err(Error::invalid("target corpus size must be at least 1"));
    }
    let mut rng = rng::from_seed(rng_seed);
    if n >= target_size {
        let mut picked = sample(&mut rng, n, target_size).into_vec();
        picked.sort_unstable();
        return Ok(picked);
    }
    let mut out = Vec::with_capacity(target_size);
    for _ in 0..target_size / n {
        out.extend(0..n);
    }
    for _ in 0..target_size % n {
        out.push(rng.gen_range(0..n));
    }
    Ok(out)
}

/// A labeled pair of item ids (`label` is 1 for a match).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledPair {
    pub left: String,
    pub right: String,
    pub label: u8,
}

impl LabeledPair {
    pub fn new(left: impl Into<String>, right: impl Into<String>, label: u8) -> Self {
        Self {
            left: left.into(),
            right: right.into(),
            label,
        }
    }

    pub fn key(&self) -> (String, String) {
        (self.left.clone(), self.right.clone())
    }
}

/// Read line-delimited JSON items.
pub fn read_items_jsonl(path: &Path) -> Result<Vec<DataItem>> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: DataItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_items_jsonl(path: &Path, items: &[DataItem]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a table whose first column is `id` and whose remaining columns are
/// attributes.
pub fn read_table_csv(path: &Path) -> Result<Vec<DataItem>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.get(0).map(str::trim) != Some("id") {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "first column must be `id`".into(),
        });
    }
    let mut items = Vec::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(0).unwrap_or_default().trim().to_owned();
        let attributes = headers
            .iter()
            .zip(record.iter())
            .skip(1)
            .map(|(h, v)| Attribute::new(h, v))
            .collect();
        items.push(DataItem::new(id, attributes));
    }
    Ok(items)
}

pub fn write_table_csv(path: &Path, items: &[DataItem]) -> Result<()> {
    let mut names: Vec<&str> = Vec::new();
    for item in items {
        for a in &item.attributes {
            if !names.contains(&a.name.as_str()) {
                names.push(&a.name);
            }
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id"];
    header.extend(names.iter().copied());
    w.write_record(&header)?;
    for item in items {
        let mut row = vec![item.id.as_str()];
        row.extend(names.iter().map(|n| item.value(n).unwrap_or("")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read `ltable_id,rtable_id,label` pair files.
pub fn read_pairs_csv(path: &Path) -> Result<Vec<LabeledPair>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("missing column `{name}`"),
            })
    };
    let (l, r, y) = (col("ltable_id")?, col("rtable_id")?, col("label")?);
    let mut pairs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let label = match record.get(y).map(str::trim) {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    msg: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        pairs.push(LabeledPair::new(
            record.get(l).unwrap_or_default().trim(),
            record.get(r).unwrap_or_default().trim(),
            label,
        ));
    }
    Ok(pairs)
}

pub fn write_pairs_csv(path: &Path, pairs: &[LabeledPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["ltable_id", "rtable_id", "label"])?;
    for p in pairs {
        w.write_record([p.left.as_str(), p.right.as_str(), &p.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A DeepMatcher-layout directory: `tableA.csv`, `tableB.csv` and optional
/// `train.csv` / `valid.csv` / `test.csv`.
#[derive(Debug, Clone, Default)]
pub struct EmDataset {
    pub table_a: Vec<DataItem>,
    pub table_b: Vec<DataItem>,
    pub train: Vec<LabeledPair>,
    pub valid: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
}

impl EmDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let optional = |name: &str| -> Result<Vec<LabeledPair>> {
            let p = dir.join(name);
            if p.exists() {
                read_pairs_csv(&p)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(Self {
            table_a: read_table_csv(&dir.join("tableA.csv"))?,
            table_b: read_table_csv(&dir.join("tableB.csv"))?,
            train: optional("train.csv")?,
            valid: optional("valid.csv")?,
            test: optional("test.csv")?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_table_csv(&dir.join("tableA.csv"), &self.table_a)?;
        write_table_csv(&dir.join("tableB.csv"), &self.table_b)?;
        for (name, pairs) in [
            ("train.csv", &self.train),
            ("valid.csv", &self.valid),
            ("test.csv", &self.test),
        ] {
            if !pairs.is_empty() {
                write_pairs_csv(&dir.join(name), pairs)?;
            }
        }
        Ok(())
    }

    /// All positive pairs across the labeled splits.
    pub fn known_matches(&self) -> HashSet<(String, String)> {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .filter(|p| p.label == 1)
            .map(LabeledPair::key)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entity_serialization_layout() {
        let item = DataItem::from_pairs("1", [("Title", "instant immers"), ("Price", "36.11")]);
        assert_eq!(
            serialize_entity(&item).to_string(),
            "[COL] Title [VAL] instant immers [COL] Price [VAL] 36.11"
        );
    }

    #[test]
    fn empty_item_serializes_to_empty_sequence() {
        let item = DataItem::new("e", vec![]);
        assert!(serialize_entity(&item).is_empty());
    }

    #[test]
    fn serialization_is_deterministic() {
        let a = DataItem::from_pairs("1", [("A", "x")]);
        let b = DataItem::from_pairs("2", [("A", "x")]);
        assert_eq!(serialize_entity(&a), serialize_entity(&b));
    }

    #[test]
    fn entity_token_count_formula() {
        let item = DataItem::from_pairs("1", [("brand name", " acme  corp "), ("price", "")]);
        let expected: usize = item
            .attributes
            .iter()
            .map(|a| 2 + a.name.split_whitespace().count() + a.value.split_whitespace().count())
            .sum();
        assert_eq!(serialize_entity(&item).len(), expected);
    }

    #[test]
    fn pair_format() {
        let x = TokenSequence::parse("[COL] A [VAL] 1");
        let y = TokenSequence::parse("[COL] A [VAL] 2");
        assert_eq!(
            serialize_pair(&x, &y).to_string(),
            "[CLS] [COL] A [VAL] 1 [SEP] [COL] A [VAL] 2 [SEP]"
        );
        assert_ne!(serialize_pair(&x, &y), serialize_pair(&y, &x));
        let e = TokenSequence::default();
        assert_eq!(serialize_pair(&e, &e).to_string(), "[CLS] [SEP] [SEP]");
    }

    #[test]
    fn contextfree_cells() {
        assert_eq!(
            serialize_cell_contextfree("city", "Berlin").unwrap().to_string(),
            "[COL] city [VAL] Berlin"
        );
        assert_eq!(
            serialize_cell_contextfree("city", "").unwrap().to_string(),
            "[COL] city [VAL]"
        );
        assert!(matches!(serialize_cell_contextfree("", "x"), Err(Error::Schema(_))));
    }

    #[test]
    fn contextual_rows() {
        let row = DataItem::from_pairs("r", [("a", "1"), ("b", "2")]);
        assert_eq!(
            serialize_row_contextual(&row, Some(1), Some("3")).unwrap().to_string(),
            "[COL] a [VAL] 1 [COL] b [VAL] 3"
        );
        assert_eq!(
            serialize_row_contextual(&row, None, None).unwrap(),
            serialize_entity(&row)
        );
        assert!(matches!(
            serialize_row_contextual(&row, Some(5), Some("x")),
            Err(Error::IndexOutOfRange { index: 5, len: 2 })
        ));
    }

    #[test]
    fn column_serialization() {
        assert_eq!(
            serialize_column(&["New York", "California", "Florida"]).to_string(),
            "[VAL] New York [VAL] California [VAL] Florida"
        );
        assert!(serialize_column::<&str>(&[]).is_empty());
        assert_eq!(serialize_column(&["a"]).to_string(), "[VAL] a");
    }

    #[test]
    fn deserialize_inverts_serialize() {
        let item = DataItem::from_pairs("1", [("title", "a b c"), ("price", ""), ("brand", "x")]);
        let back = deserialize_entity("1", &serialize_entity(&item));
        assert_eq!(back, item);
    }

    fn small_corpus(n: usize) -> Corpus {
        let items = (0..n)
            .map(|i| DataItem::from_pairs(i.to_string(), [("v", i.to_string())]))
            .collect();
        Corpus::from_items(SourceTag::Single, items).unwrap()
    }

    #[test]
    fn resample_same_size_is_identity() {
        let corpus = small_corpus(50);
        let out = resample_corpus(&corpus, 50, 3).unwrap();
        assert_eq!(out, corpus.entries());
    }

    #[test]
    fn resample_up_repeats_then_tops_up() {
        let corpus = small_corpus(3);
        let out = resample_corpus(&corpus, 7, 11).unwrap();
        assert_eq!(out.len(), 7);
        for e in corpus.entries() {
            let count = out.iter().filter(|o| o.item.id == e.item.id).count();
            assert!(count >= 7 / 3, "{} appears {count} times", e.item.id);
        }
        // the first two passes are the corpus in order
        let ids: Vec<_> = out.iter().take(6).map(|e| e.item.id.as_str()).collect();
        assert_eq!(ids, ["0", "1", "2", "0", "1", "2"]);
    }

    #[test]
    fn resample_down_is_without_replacement_and_seeded() {
        let corpus = small_corpus(100);
        let a = resample_corpus(&corpus, 30, 5).unwrap();
        let b = resample_corpus(&corpus, 30, 5).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<_> = a.iter().map(|e| e.item.id.clone()).collect();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn resample_errors() {
        assert!(resample_corpus(&small_corpus(3), 0, 1).is_err());
        assert!(matches!(
            resample_corpus(&Corpus::default(), 5, 1),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let items = vec![
            DataItem::from_pairs("1", [("a", "x")]),
            DataItem::from_pairs("1", [("a", "y")]),
        ];
        assert!(Corpus::from_items(SourceTag::A, items.clone()).is_err());
        // same id in different tables is fine
        assert!(Corpus::from_tables(vec![items[0].clone()], vec![items[1].clone()]).is_ok());
    }

    #[test]
    fn table_and_pair_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = EmDataset {
            table_a: vec![DataItem::from_pairs("0", [("title", "a, \"quoted\""), ("price", "1")])],
            table_b: vec![DataItem::from_pairs("7", [("title", "b"), ("price", "")])],
            train: vec![LabeledPair::new("0", "7", 1)],
            valid: vec![],
            test: vec![LabeledPair::new("0", "7", 0)],
        };
        ds.save(dir.path()).unwrap();
        let back = EmDataset::load(dir.path()).unwrap();
        assert_eq!(back.table_a, ds.table_a);
        assert_eq!(back.table_b, ds.table_b);
        assert_eq!(back.train, ds.train);
        assert!(back.valid.is_empty());
        assert_eq!(back.known_matches().len(), 1);

        let p = dir.path().join("items.jsonl");
        write_items_jsonl(&p, &ds.table_a).unwrap();
        assert_eq!(read_items_jsonl(&p).unwrap(), ds.table_a);
    }
}
