//! Deterministic `key=value` metrics files.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use contramatch::matcher::F1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics(BTreeMap<String, String>);

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&mut self, key: &str, v: usize) {
        self.0.insert(key.into(), v.to_string());
    }

    pub fn real(&mut self, key: &str, v: f64) {
        self.0.insert(key.into(), format!("{v:.6}"));
    }

    pub fn opt_real(&mut self, key: &str, v: Option<f64>) {
        if let Some(v) = v {
            self.real(key, v);
        }
    }

    pub fn text(&mut self, key: &str, v: impl Into<String>) {
        self.0.insert(key.into(), v.into());
    }

    pub fn f1(&mut self, prefix: &str, f: F1) {
        self.real(&format!("{prefix}_precision"), f.precision);
        self.real(&format!("{prefix}_recall"), f.recall);
        self.real(&format!("{prefix}_f1"), f.f1);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.render())
    }

    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .collect(),
        )
    }
}
