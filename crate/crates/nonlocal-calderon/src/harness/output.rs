//! CSV and manifest writers. Floats carry 17 significant digits.

use crate::dn::DnMatrix;
use crate::domain::{DomainSpec, Field};
use crate::error::Result;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// `d.dddddddddddddddde±x`: 17 significant digits, round-trip exact.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// One CSV cell.
pub enum Cell {
    F(f64),
    I(i64),
    S(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::I(v as i64)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.into())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::S(v)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::S(v.to_string())
    }
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    pub fn row(&mut self, cells: Vec<Cell>) {
        self.rows.push(
            cells
                .into_iter()
                .map(|c| match c {
                    Cell::F(v) => fmt17(v),
                    Cell::I(v) => v.to_string(),
                    Cell::S(s) => s,
                })
                .collect(),
        );
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e.to_string()))
}

/// Snapshot export: `node_index, x, t, value` for the chosen time indices.
pub fn field_table(spec: &DomainSpec, times: &[f64], f: &Field, steps: &[usize]) -> Table {
    let mut t = Table::new(&["node_index", "x", "t", "value"]);
    for &k in steps {
        for i in 0..spec.n_nodes() {
            t.row(vec![i.into(), spec.x[i].into(), times[k].into(), f.get(i, k).into()]);
        }
    }
    t
}

/// Gram matrix export: a header row of column labels, then one labelled row per input.
pub fn dn_table(m: &DnMatrix) -> Table {
    let mut header = vec!["input\\output".to_string()];
    header.extend(m.col_labels.iter().cloned());
    let mut t = Table { header, rows: vec![] };
    for (i, name) in m.row_labels.iter().enumerate() {
        let mut r = vec![Cell::S(name.clone())];
        r.extend((0..m.entries.ncols()).map(|j| Cell::F(m.entries[(i, j)])));
        t.row(r);
    }
    t
}

#[derive(Debug, Clone, Serialize)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `"<="` or `">="`
    pub comparison: String,
    pub pass: bool,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct RunManifest {
    pub scenario: String,
    pub software_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub cache: Vec<crate::harness::cache::CacheRecord>,
    pub stages: Vec<Stage>,
    pub assertions: Vec<Assertion>,
    pub outputs: Vec<String>,
    pub details: serde_json::Map<String, serde_json::Value>,
    pub sub_runs: Vec<String>,
    pub all_pass: bool,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| crate::Error::Io(std::io::Error::other(e)))?;
        std::fs::write(&p, text)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            let s = fmt17(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            let mantissa = s.trim_start_matches('-').split('e').next().unwrap().replace('.', "");
            assert_eq!(mantissa.len(), 17);
        }
    }
}
