//! CSV files with a commented configuration header.
//!
//! Floats use Rust's shortest round-trip formatting, so a value parsed back
//! from the file is bit-identical to the one written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha1::{Digest, Sha1};

use crate::config::RunConfig;

/// Git blob id of `content` (`sha1("blob <len>\0" + content)`), so that
/// `git hash-object config.toml` reproduces it.
pub fn git_blob_hash(content: &str) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// A table of numeric (or short text) cells with fixed column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push_floats(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row.iter().map(|x| fmt_f64(*x)).collect());
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k].parse().unwrap_or(f64::NAN)).collect())
    }

    /// CSV text: header comment, column names, rows.
    pub fn to_csv(&self, header: &str) -> String {
        let mut s = String::from(header);
        s.push_str(&self.columns.join(","));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// `#`-prefixed lines: tool version, command, seed, config hash and the full
/// resolved configuration.
pub fn header(cfg: &RunConfig, command: &str, extra: &[(&str, String)]) -> String {
    let text = cfg.to_toml();
    let mut h = String::new();
    let _ = writeln!(h, "# qtherm {} {command}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(h, "# seed = {}", cfg.seed);
    let _ = writeln!(h, "# config_hash = {}", git_blob_hash(&text));
    for (k, v) in extra {
        let _ = writeln!(h, "# {k} = {v}");
    }
    let _ = writeln!(h, "# --- resolved configuration ---");
    for line in text.lines() {
        let _ = writeln!(h, "# {line}");
    }
    h
}

pub fn write_file(dir: &Path, name: &str, content: &str) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, std::f64::consts::TAU] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(&["a", "b"]);
        assert_eq!(t.to_csv("# h\n"), "# h\na,b\n");
    }

    #[test]
    fn header_embeds_config() {
        let cfg = RunConfig::default();
        let h = header(&cfg, "simulate", &[]);
        assert!(h.lines().all(|l| l.starts_with('#')));
        assert!(h.contains("# gamma = 0.05"));
        assert!(h.contains(&git_blob_hash(&cfg.to_toml())));
    }
}
