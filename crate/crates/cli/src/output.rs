//! Rendering reports as JSON or CSV and writing them out.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;

use crate::error::CliError;

/// Directory that relative `--output` paths are resolved against.
pub const OUTPUT_DIR_ENV: &str = "LOCC_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Bool(bool),
    Empty,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Num)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as u64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Bool(x)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Text(x)
    }
}

/// Reals in CSV carry 17 significant digits, enough to round-trip.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(x) => format_real(*x),
            Cell::Int(n) => n.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: Vec<&'static str>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// A command result. Reports without a flat form reject CSV.
pub trait Report: Serialize {
    fn table(&self) -> Option<Table>;

    /// Whether every checked tolerance held.
    fn passed(&self) -> bool {
        true
    }
}

pub fn render<R: Report>(report: &R, format: Format) -> Result<String, CliError> {
    match format {
        Format::Json => {
            let mut text = serde_json::to_string_pretty(report)?;
            text.push('\n');
            Ok(text)
        }
        Format::Csv => report
            .table()
            .ok_or_else(|| CliError::Usage("this command only writes JSON".into()))?
            .to_csv(),
    }
}

/// Joins a relative path onto the output directory override, if set.
pub fn resolve_output(path: &Path, dir: Option<&Path>) -> PathBuf {
    match dir {
        Some(d) if path.is_relative() => d.join(path),
        _ => path.to_path_buf(),
    }
}

pub fn write_output(text: &str, output: Option<&Path>) -> Result<(), CliError> {
    let Some(path) = output else {
        io::stdout().write_all(text.as_bytes())?;
        return Ok(());
    };
    let dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
    let path = resolve_output(path, dir.as_deref());
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_keep_seventeen_digits() {
        for x in [0.1, 1.0 / 3.0, std::f64::consts::PI, 6.02214076e23, -2.5e-300] {
            let s = format_real(x);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
            assert_eq!(mantissa.len(), 17, "{s}");
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut t = Table::new(vec!["n", "x", "ok", "note"]);
        t.push(vec![3usize.into(), 0.5.into(), true.into(), Cell::Empty]);
        assert_eq!(t.to_csv().unwrap(), "n,x,ok,note\n3,5.0000000000000000e-1,true,\n");
    }

    #[test]
    fn relative_outputs_follow_the_override() {
        let dir = Path::new("/tmp/out");
        assert_eq!(resolve_output(Path::new("a.csv"), Some(dir)), dir.join("a.csv"));
        assert_eq!(resolve_output(Path::new("/x/a.csv"), Some(dir)), PathBuf::from("/x/a.csv"));
        assert_eq!(resolve_output(Path::new("a.csv"), None), PathBuf::from("a.csv"));
    }
}
