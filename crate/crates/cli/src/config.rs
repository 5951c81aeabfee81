//! Flat `key = value` run configuration.
//!
//! Resolution order: built-in defaults, then the config file, then
//! `CONTRAMATCH_<KEY>` environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use contramatch::augment::{CutoffKind, CutoffSpec, DaKind, DaOperator, SynonymDict};
use contramatch::encoder::EncoderConfig;
use contramatch::matcher::FinetuneConfig;
use contramatch::optim::AdamWConfig;
use contramatch::pretrain::PretrainConfig;
use contramatch::tasks::cleaning::Scheme;
use contramatch::tasks::em::EmConfig;
use sha2::{Digest, Sha256};

pub const ENV_PREFIX: &str = "CONTRAMATCH_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usize,
    U64,
    F64,
    /// Float or `none`.
    OptF64,
    Bool,
    Path,
    Choice(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const DA_NAMES: &[&str] = &[
    "token_del",
    "token_repl",
    "token_swap",
    "token_insert",
    "span_del",
    "span_shuffle",
    "col_shuffle",
    "col_del",
    "cell_shuffle",
];

macro_rules! key {
    ($name:literal, $default:literal, $kind:expr, $help:literal) => {
        KeySpec {
            name: $name,
            default: $default,
            kind: $kind,
            help: $help,
        }
    };
}

pub const KEYS: &[KeySpec] = &[
    key!("seed", "0", Kind::U64, "root seed of every random stream"),
    key!("threads", "0", Kind::Usize, "worker threads (0 = all cores)"),
    key!("out_dir", "out", Kind::Path, "output directory"),
    key!(
        "data_dir",
        "",
        Kind::Path,
        "tableA.csv, tableB.csv and train/valid/test.csv"
    ),
    key!("synonyms", "", Kind::Path, "synonym file for token_repl/token_insert"),
    key!("vocab_size", "65536", Kind::Usize, "hashed vocabulary size"),
    key!("embed_dim", "64", Kind::Usize, "token embedding width"),
    key!("hidden_dim", "256", Kind::Usize, "encoder hidden width"),
    key!("output_dim", "128", Kind::Usize, "embedding width"),
    key!("projector_dim", "768", Kind::Usize, "projector output width"),
    key!("n_epoch", "3", Kind::Usize, "pre-training epochs"),
    key!("batch_size", "64", Kind::Usize, "pre-training batch size"),
    key!("tau", "0.07", Kind::F64, "contrastive temperature"),
    key!(
        "lambda_bt",
        "0.0039",
        Kind::F64,
        "off-diagonal weight of the redundancy term"
    ),
    key!("alpha_bt", "0.001", Kind::F64, "weight of the redundancy regularizer"),
    key!(
        "num_clusters",
        "90",
        Kind::Usize,
        "clusters for negative sampling (1 = plain shuffling)"
    ),
    key!("da", "token_del", Kind::Choice(DA_NAMES), "augmentation operator"),
    key!(
        "cutoff",
        "span",
        Kind::Choice(&["none", "token", "feature", "span"]),
        "cutoff operator"
    ),
    key!("cutoff_ratio", "0.05", Kind::F64, "fraction cut by the cutoff operator"),
    key!("lr", "5e-5", Kind::F64, "pre-training learning rate"),
    key!("weight_decay", "0.01", Kind::F64, "AdamW weight decay"),
    key!(
        "corpus_size",
        "10000",
        Kind::Usize,
        "resampled pre-training corpus size"
    ),
    key!("k", "10", Kind::Usize, "neighbours per query in blocking"),
    key!("symmetric", "false", Kind::Bool, "query both directions in blocking"),
    key!(
        "index_projector",
        "false",
        Kind::Bool,
        "index projector outputs instead of embeddings"
    ),
    key!(
        "rho",
        "none",
        Kind::OptF64,
        "positive ratio prior; enables pseudo labels"
    ),
    key!(
        "multiplier",
        "8",
        Kind::Usize,
        "training set size multiplier with pseudo labels"
    ),
    key!("hill_trials", "5", Kind::Usize, "threshold search evaluations"),
    key!("hill_step", "0.05", Kind::F64, "initial threshold search step"),
    key!(
        "theta_pos",
        "none",
        Kind::OptF64,
        "fixed positive threshold for the pseudolabel command"
    ),
    key!("finetune_epochs", "50", Kind::Usize, "fine-tuning epochs"),
    key!("finetune_batch_size", "64", Kind::Usize, "fine-tuning batch size"),
    key!(
        "finetune_lr",
        "5e-5",
        Kind::F64,
        "fine-tuning learning rate of the encoder"
    ),
    key!(
        "head_lr",
        "0.05",
        Kind::OptF64,
        "fine-tuning learning rate of the head (none = finetune_lr)"
    ),
    key!("freeze_encoder", "false", Kind::Bool, "train the head only"),
    key!(
        "encoder_ckpt",
        "",
        Kind::Path,
        "encoder checkpoint (default <out_dir>/encoder.ckpt)"
    ),
    key!(
        "matcher_ckpt",
        "",
        Kind::Path,
        "matcher checkpoint (default <out_dir>/matcher.ckpt)"
    ),
    key!(
        "candidates",
        "",
        Kind::Path,
        "candidate pairs (default <out_dir>/candidates.csv)"
    ),
    key!(
        "training_pairs",
        "",
        Kind::Path,
        "training pairs (default <out_dir>/training_pairs.csv)"
    ),
    key!("dirty_table", "", Kind::Path, "table to clean"),
    key!("cleaning_candidates", "", Kind::Path, "candidate corrections per cell"),
    key!("cleaning_truth", "", Kind::Path, "true corrections"),
    key!(
        "scheme",
        "contextfree",
        Kind::Choice(&["contextfree", "contextual"]),
        "cell serialization"
    ),
    key!("labeled_rows", "20", Kind::Usize, "rows labeled for cleaning"),
    key!("columns", "", Kind::Path, "column values (column_id,value)"),
    key!("column_types", "", Kind::Path, "column truth types (column_id,type)"),
    key!("column_k", "20", Kind::Usize, "neighbours per column"),
    key!("labeled_pairs", "2000", Kind::Usize, "sampled labeled column pairs"),
    key!(
        "column_pseudo",
        "false",
        Kind::Bool,
        "add pseudo labels to column training"
    ),
];

pub fn spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    UnknownKey { key: String, origin: String },
    InvalidValue { key: String, value: String, reason: String },
    Missing { key: String, reason: String },
    Syntax { origin: String, line: usize },
    Io { origin: String, reason: String },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key, .. }
            | ConfigError::InvalidValue { key, .. }
            | ConfigError::Missing { key, .. } => Some(key),
            _ => None,
        }
    }

    pub fn invalid(key: &str, value: &str, reason: impl Into<String>) -> Self {
        ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey { key, origin } => write!(f, "unknown config key `{key}` ({origin})"),
            ConfigError::InvalidValue { key, value, reason } => {
                write!(f, "invalid value `{value}` for key `{key}`: {reason}")
            }
            ConfigError::Missing { key, reason } => write!(f, "missing key `{key}`: {reason}"),
            ConfigError::Syntax { origin, line } => write!(f, "{origin}:{line}: expected `key = value`"),
            ConfigError::Io { origin, reason } => write!(f, "{origin}: {reason}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn check(spec: &KeySpec, value: &str) -> Result<(), ConfigError> {
    let bad = |reason: &str| Err(ConfigError::invalid(spec.name, value, reason));
    match spec.kind {
        Kind::Usize => value
            .parse::<usize>()
            .map(|_| ())
            .or_else(|_| bad("expected a non-negative integer")),
        Kind::U64 => value
            .parse::<u64>()
            .map(|_| ())
            .or_else(|_| bad("expected a non-negative integer")),
        Kind::F64 => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => bad("expected a finite number"),
        },
        Kind::OptF64 => match value {
            "none" | "" => Ok(()),
            v => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(()),
                _ => bad("expected a finite number or `none`"),
            },
        },
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => bad("expected `true` or `false`"),
        },
        Kind::Path => Ok(()),
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                bad(&format!("expected one of {}", options.join(", ")))
            }
        }
    }
}

/// A fully resolved configuration: one value per known key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_owned())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        let spec = spec(key).ok_or_else(|| ConfigError::UnknownKey {
            key: key.into(),
            origin: origin.into(),
        })?;
        let value = value.trim();
        check(spec, value)?;
        self.values.insert(spec.name, value.to_owned());
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment line.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.into(),
                line: i + 1,
            })?;
            self.set(k.trim(), v, &format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            origin: origin.clone(),
            reason: e.to_string(),
        })?;
        self.merge_text(&text, &origin)
    }

    /// Apply `CONTRAMATCH_<KEY>` variables for known keys.
    pub fn merge_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        let vars: BTreeMap<String, String> = vars.into_iter().collect();
        for spec in KEYS {
            let name = format!("{ENV_PREFIX}{}", spec.name.to_ascii_uppercase());
            if let Some(v) = vars.get(&name) {
                self.set(spec.name, v, &name)?;
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unregistered config key `{key}`"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated on set")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn opt_f64(&self, key: &str) -> Option<f64> {
        match self.get(key) {
            "none" | "" => None,
            v => Some(v.parse().expect("validated on set")),
        }
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        match self.get(key) {
            "" => None,
            v => Some(PathBuf::from(v)),
        }
    }

    /// A path that must be set and must exist.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        let p = self.opt_path(key).ok_or_else(|| ConfigError::Missing {
            key: key.into(),
            reason: "required by this command".into(),
        })?;
        if !p.exists() {
            return Err(ConfigError::invalid(key, self.get(key), "no such file or directory"));
        }
        Ok(p)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    /// Path key with a default inside `out_dir`.
    pub fn artifact(&self, key: &str, file: &str) -> PathBuf {
        self.opt_path(key).unwrap_or_else(|| self.out_dir().join(file))
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    /// Canonical `key = value` lines in key order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn sha256(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn synonyms(&self) -> Result<Option<Arc<SynonymDict>>, ConfigError> {
        match self.opt_path("synonyms") {
            None => Ok(None),
            Some(p) => SynonymDict::load(&p)
                .map(|d| Some(Arc::new(d)))
                .map_err(|e| ConfigError::invalid("synonyms", self.get("synonyms"), e.to_string())),
        }
    }

    pub fn encoder(&self) -> Result<EncoderConfig, ConfigError> {
        let cfg = EncoderConfig {
            vocab_size: self.usize("vocab_size"),
            embed_dim: self.usize("embed_dim"),
            hidden_dim: self.usize("hidden_dim"),
            output_dim: self.usize("output_dim"),
        };
        cfg.validate()
            .map_err(|e| ConfigError::invalid("vocab_size", self.get("vocab_size"), e.to_string()))?;
        for key in ["embed_dim", "hidden_dim", "output_dim", "projector_dim"] {
            if self.usize(key) == 0 {
                return Err(ConfigError::invalid(key, "0", "must be positive"));
            }
        }
        Ok(cfg)
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.f64("weight_decay"),
            ..AdamWConfig::default()
        }
    }

    /// Pre-training settings with `da` overridden when given.
    pub fn pretrain(&self, da: Option<DaKind>) -> Result<PretrainConfig, ConfigError> {
        let kind = match da {
            Some(k) => k,
            None => self
                .get("da")
                .parse::<DaKind>()
                .map_err(|e| ConfigError::invalid("da", self.get("da"), e.to_string()))?,
        };
        let mut op = DaOperator::new(kind);
        if let Some(s) = self.synonyms()? {
            op = op.with_synonyms(s);
        }
        let ratio = self.f64("cutoff_ratio");
        let cutoff = match self.get("cutoff") {
            "none" => None,
            name => {
                let kind: CutoffKind = name
                    .parse()
                    .map_err(|e: contramatch::Error| ConfigError::invalid("cutoff", name, e.to_string()))?;
                Some(
                    CutoffSpec::new(kind, ratio)
                        .map_err(|e| ConfigError::invalid("cutoff_ratio", self.get("cutoff_ratio"), e.to_string()))?,
                )
            }
        };
        let cfg = PretrainConfig {
            n_epoch: self.usize("n_epoch"),
            batch_size: self.usize("batch_size"),
            temperature: self.f64("tau"),
            lambda: self.f64("lambda_bt"),
            alpha: self.f64("alpha_bt"),
            num_clusters: self.usize("num_clusters"),
            da: op,
            cutoff,
            learning_rate: self.f64("lr"),
            optimizer: self.optimizer(),
            seed: self.seed(),
        };
        cfg.validate().map_err(|e| self.blame(&e.to_string(), PRETRAIN_KEYS))?;
        Ok(cfg)
    }

    pub fn finetune(&self) -> Result<FinetuneConfig, ConfigError> {
        let cfg = FinetuneConfig {
            epochs: self.usize("finetune_epochs"),
            batch_size: self.usize("finetune_batch_size"),
            learning_rate: self.f64("finetune_lr"),
            head_learning_rate: self.opt_f64("head_lr"),
            freeze_encoder: self.bool("freeze_encoder"),
            optimizer: self.optimizer(),
            seed: self.seed(),
        };
        if cfg.batch_size == 0 {
            return Err(ConfigError::invalid("finetune_batch_size", "0", "must be positive"));
        }
        for key in ["finetune_lr", "head_lr"] {
            if let Some(v) = self.opt_f64(key) {
                if v <= 0.0 {
                    return Err(ConfigError::invalid(key, self.get(key), "must be positive"));
                }
            }
        }
        Ok(cfg)
    }

    pub fn em(&self) -> Result<EmConfig, ConfigError> {
        if let Some(rho) = self.opt_f64("rho") {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(ConfigError::invalid("rho", self.get("rho"), "must lie in (0, 1)"));
            }
        }
        if self.usize("k") == 0 {
            return Err(ConfigError::invalid("k", "0", "must be positive"));
        }
        if self.usize("multiplier") == 0 {
            return Err(ConfigError::invalid("multiplier", "0", "must be positive"));
        }
        if self.usize("corpus_size") == 0 {
            return Err(ConfigError::invalid("corpus_size", "0", "must be positive"));
        }
        if self.f64("hill_step") <= 0.0 {
            return Err(ConfigError::invalid(
                "hill_step",
                self.get("hill_step"),
                "must be positive",
            ));
        }
        Ok(EmConfig {
            encoder: self.encoder()?,
            projector_dim: self.usize("projector_dim"),
            pretrain: self.pretrain(None)?,
            corpus_size: self.usize("corpus_size"),
            k: self.usize("k"),
            symmetric: self.bool("symmetric"),
            index_projector: self.bool("index_projector"),
            rho: self.opt_f64("rho"),
            multiplier: self.usize("multiplier"),
            hill_trials: self.usize("hill_trials"),
            hill_step: self.f64("hill_step"),
            finetune: self.finetune()?,
            seed: self.seed(),
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.get("scheme").parse().expect("validated on set")
    }

    /// Map a validation message to the key it names, falling back to the
    /// first candidate.
    fn blame(&self, msg: &str, candidates: &[(&'static str, &'static str)]) -> ConfigError {
        let key = candidates
            .iter()
            .find(|(_, word)| msg.contains(word))
            .or(candidates.first())
            .map(|(k, _)| *k)
            .unwrap_or("seed");
        ConfigError::invalid(key, self.get(key), msg)
    }
}

const PRETRAIN_KEYS: &[(&str, &str)] = &[
    ("tau", "temperature"),
    ("alpha_bt", "alpha"),
    ("lambda_bt", "lambda"),
    ("batch_size", "batch"),
    ("num_clusters", "cluster"),
    ("lr", "learning rate"),
    ("n_epoch", "epoch"),
];
