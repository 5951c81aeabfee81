//! Planted-truth generators: product-like tables with perturbed duplicate
//! groups for matching, dirty tables with candidate corrections, and typed
//! columns for column matching.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::augment::{apply_da, DaKind, DaOperator, SynonymDict};
use crate::corpus::{deserialize_entity, serialize_entity, DataItem, EmDataset, LabeledPair};
use crate::rng::{self, Rng};
use crate::tasks::cleaning::{CellCandidates, CleaningInstance, Correction};

const BRANDS: [&str; 10] = [
    "acme", "zentro", "kovix", "lumera", "brightek", "norvane", "quasar", "helion", "ostrik", "vextra",
];
const CATEGORIES: [&str; 10] = [
    "laptop",
    "headphones",
    "camera",
    "speaker",
    "monitor",
    "keyboard",
    "router",
    "tablet",
    "charger",
    "printer",
];
const DESCRIPTORS: [&str; 24] = [
    "black", "white", "silver", "red", "blue", "green", "wireless", "portable", "compact", "pro", "ultra", "slim",
    "digital", "smart", "classic", "mini", "deluxe", "rugged", "hd", "dual", "premium", "travel", "gaming", "studio",
];
const SYNONYMS: [(&str, &[&str]); 10] = [
    ("black", &["ebony", "dark"]),
    ("white", &["ivory"]),
    ("laptop", &["notebook"]),
    ("headphones", &["headset"]),
    ("speaker", &["loudspeaker"]),
    ("monitor", &["display"]),
    ("compact", &["small"]),
    ("portable", &["mobile"]),
    ("wireless", &["cordless"]),
    ("tablet", &["slate"]),
];

/// Operators used to derive group members from the group's base item.
pub const PERTURBATIONS: [DaKind; 8] = [
    DaKind::TokenDel,
    DaKind::TokenRepl,
    DaKind::TokenSwap,
    DaKind::TokenInsert,
    DaKind::SpanDel,
    DaKind::SpanShuffle,
    DaKind::ColShuffle,
    DaKind::ColDel,
];

pub const SCHEMA: [&str; 3] = ["title", "brand", "price"];

pub fn synonym_dict() -> SynonymDict {
    let mut d = SynonymDict::new();
    for (tok, syns) in SYNONYMS {
        d.insert(tok, syns.iter().map(|s| s.to_string()).collect());
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEmConfig {
    pub groups: usize,
    pub items_per_group: usize,
    /// Members of each group placed in table A; the rest go to table B.
    pub left_per_group: usize,
    /// Perturbation operators applied to each member.
    pub ops_per_item: usize,
    /// Hard negatives (same brand, other group) per table-A item.
    pub negatives_per_left: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub seed: u64,
}

impl Default for SyntheticEmConfig {
    fn default() -> Self {
        Self {
            groups: 100,
            items_per_group: 5,
            left_per_group: 2,
            ops_per_item: 1,
            negatives_per_left: 3,
            train_size: 50,
            valid_size: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticEm {
    pub dataset: EmDataset,
    /// Item ids of every group (table A ids first).
    pub groups: Vec<Vec<String>>,
}

impl SyntheticEm {
    /// Every cross-table pair inside a group.
    pub fn truth(&self) -> std::collections::HashSet<(String, String)> {
        let mut t = std::collections::HashSet::new();
        for g in &self.groups {
            for a in g.iter().filter(|id| id.starts_with('a')) {
                for b in g.iter().filter(|id| id.starts_with('b')) {
                    t.insert((a.clone(), b.clone()));
                }
            }
        }
        t
    }
}

fn base_item(group: usize, rng: &mut Rng) -> DataItem {
    let brand = BRANDS[group % BRANDS.len()];
    let category = CATEGORIES[(group / BRANDS.len() + group) % CATEGORIES.len()];
    let mut desc: Vec<&str> = DESCRIPTORS.choose_multiple(rng, 2).copied().collect();
    desc.sort_unstable();
    let letters: String = (0..2).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
    let model = format!("{letters}{}", rng.gen_range(100..10_000));
    let price = format!("{:.2}", rng.gen_range(10.0..1000.0));
    DataItem::from_pairs(
        format!("g{group}"),
        [
            ("title", format!("{brand} {} {} {category} {model}", desc[0], desc[1])),
            ("brand", brand.to_string()),
            ("price", price),
        ],
    )
}

/// Perturb a base item and map the result back onto the fixed schema
/// (missing attributes become empty).
fn perturb(base: &DataItem, id: String, ops: usize, syn: &Arc<SynonymDict>, rng: &mut Rng) -> DataItem {
    let mut seq = serialize_entity(base);
    for _ in 0..ops {
        let kind = *PERTURBATIONS.choose(rng).expect("non-empty");
        let op = DaOperator::new(kind).with_synonyms(syn.clone());
        seq = apply_da(&seq, &op, rng.gen());
    }
    let parsed = deserialize_entity(id.clone(), &seq);
    DataItem::from_pairs(
        id,
        SCHEMA.map(|name| (name, parsed.value(name).unwrap_or("").to_string())),
    )
}

pub fn generate_em(config: &SyntheticEmConfig) -> SyntheticEm {
    let mut r = rng::stream(config.seed, "synthetic");
    let syn = Arc::new(synonym_dict());
    let mut table_a = Vec::new();
    let mut table_b = Vec::new();
    let mut groups = Vec::with_capacity(config.groups);
    for g in 0..config.groups {
        let base = base_item(g, &mut r);
        let mut ids = Vec::with_capacity(config.items_per_group);
        for m in 0..config.items_per_group {
            let left = m < config.left_per_group;
            let id = if left {
                format!("a{}", table_a.len())
            } else {
                format!("b{}", table_b.len())
            };
            let item = perturb(&base, id.clone(), config.ops_per_item, &syn, &mut r);
            if left {
                table_a.push(item);
            } else {
                table_b.push(item);
            }
            ids.push(id);
        }
        groups.push(ids);
    }

    let mut pool: Vec<LabeledPair> = Vec::new();
    for (g, ids) in groups.iter().enumerate() {
        let lefts: Vec<&String> = ids.iter().filter(|i| i.starts_with('a')).collect();
        let rights: Vec<&String> = ids.iter().filter(|i| i.starts_with('b')).collect();
        for a in &lefts {
            for b in &rights {
                pool.push(LabeledPair::new(a.as_str(), b.as_str(), 1));
            }
        }
        let same_brand: Vec<usize> = (0..config.groups)
            .filter(|h| *h != g && h % BRANDS.len() == g % BRANDS.len())
            .collect();
        for a in &lefts {
            for _ in 0..config.negatives_per_left {
                let other = if same_brand.is_empty() {
                    match (0..config.groups)
                        .filter(|h| *h != g)
                        .collect::<Vec<_>>()
                        .choose(&mut r)
                    {
                        Some(h) => *h,
                        None => continue,
                    }
                } else {
                    *same_brand.choose(&mut r).expect("non-empty")
                };
                let candidates: Vec<&String> = groups[other].iter().filter(|i| i.starts_with('b')).collect();
                if let Some(b) = candidates.choose(&mut r) {
                    pool.push(LabeledPair::new(a.as_str(), b.as_str(), 0));
                }
            }
        }
    }
    pool.sort_by_key(|x| x.key());
    pool.dedup_by(|x, y| x.key() == y.key());
    pool.shuffle(&mut r);
    let train_end = config.train_size.min(pool.len());
    let valid_end = (train_end + config.valid_size).min(pool.len());
    let test = pool.split_off(valid_end);
    let valid = pool.split_off(train_end);
    let train = pool;

    table_a.shuffle(&mut r);
    table_b.shuffle(&mut r);
    SyntheticEm {
        dataset: EmDataset {
            table_a,
            table_b,
            train,
            valid,
            test,
        },
        groups,
    }
}

/// A column with its planted semantic type.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedColumn {
    pub id: String,
    pub values: Vec<String>,
    pub semantic_type: String,
}

/// Columns drawn from `types` distinct value generators, `per_type` columns
/// each, `rows` values per column.
pub fn generate_columns(types: usize, per_type: usize, rows: usize, seed: u64) -> Vec<TypedColumn> {
    let mut r = rng::stream(seed, "columns");
    let mut out = Vec::with_capacity(types * per_type);
    for t in 0..types {
        for c in 0..per_type {
            let values = (0..rows).map(|_| column_value(t, &mut r)).collect();
            out.push(TypedColumn {
                id: format!("t{t}c{c}"),
                values,
                semantic_type: format!("type{t}"),
            });
        }
    }
    out.shuffle(&mut r);
    out
}

fn column_value(t: usize, r: &mut Rng) -> String {
    match t % 6 {
        0 => BRANDS.choose(r).unwrap().to_string(),
        1 => CATEGORIES.choose(r).unwrap().to_string(),
        2 => format!("{:.2}", r.gen_range(1.0..500.0)),
        3 => DESCRIPTORS.choose(r).unwrap().to_string(),
        4 => format!(
            "{}-{:03}",
            ["us", "de", "fr", "jp"].choose(r).unwrap(),
            r.gen_range(0..1000)
        ),
        _ => format!("19{}", r.gen_range(50..100)),
    }
}

/// Dirty table with planted typos and missing values. Every cell gets the
/// true value plus `distractors` wrong values as candidates, shuffled.
pub fn generate_cleaning(rows: usize, error_rate: f64, distractors: usize, seed: u64) -> CleaningInstance {
    let mut r = rng::stream(seed, "cleaning");
    let domains: [(&str, &[&str]); 3] = [("brand", &BRANDS), ("category", &CATEGORIES), ("style", &DESCRIPTORS)];
    let mut table = Vec::with_capacity(rows);
    let mut cells = Vec::new();
    let mut truth = Vec::new();
    for row in 0..rows {
        let mut attrs = Vec::with_capacity(domains.len());
        for (name, domain) in domains {
            let clean = domain.choose(&mut r).expect("non-empty").to_string();
            let dirty = if r.gen_bool(error_rate) {
                corrupt(&clean, &mut r)
            } else {
                clean.clone()
            };
            let mut candidates: Vec<String> = domain
                .iter()
                .filter(|v| **v != clean)
                .copied()
                .collect::<Vec<_>>()
                .choose_multiple(&mut r, distractors)
                .map(|v| v.to_string())
                .collect();
            candidates.push(clean.clone());
            candidates.shuffle(&mut r);
            if dirty != clean {
                truth.push(Correction {
                    row,
                    column: name.to_string(),
                    original: dirty.clone(),
                    correction: clean,
                });
            }
            cells.push(CellCandidates {
                row,
                column: name.to_string(),
                original: dirty.clone(),
                candidates,
            });
            attrs.push((name, dirty));
        }
        table.push(DataItem::from_pairs(row.to_string(), attrs));
    }
    CleaningInstance {
        rows: table,
        cells,
        truth: Some(truth),
    }
}

fn corrupt(value: &str, r: &mut Rng) -> String {
    let chars: Vec<char> = value.chars().collect();
    if chars.len() < 2 || r.gen_bool(0.2) {
        return String::new();
    }
    let mut out = chars.clone();
    let i = r.gen_range(0..chars.len());
    if r.gen_bool(0.5) {
        out.remove(i);
    } else {
        let j = if i + 1 < chars.len() { i + 1 } else { i - 1 };
        out.swap(i, j);
        if out == chars {
            out.remove(i);
        }
    }
    out.into_iter().collect()
}
