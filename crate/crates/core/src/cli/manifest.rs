//! Run manifests and run-to-run diffs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: String,
    pub seed: u64,
    pub threads: usize,
    pub config: ExperimentConfig,
    /// Crate and format versions.
    pub versions: BTreeMap<String, String>,
    /// Wall clock, per stage; not part of any checksummed file.
    pub stages: Vec<StageTiming>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }

    pub fn stage_seconds(&self, stage: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.seconds)
    }

    /// One combined checksum over the file inventory.
    pub fn inventory_digest(&self) -> String {
        let joined: String = self.files.iter().map(|f| format!("{} {}\n", f.sha256, f.path)).collect();
        crate::io::sha256_hex(joined.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FileDiff {
    /// Checksums differ. For CSVs of identical shape, the largest absolute
    /// difference over numeric cells; `None` if the shapes differ or a
    /// cell is not numeric on one side only.
    Changed { max_abs_diff: Option<f64> },
    OnlyInA,
    OnlyInB,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiffReport {
    pub entries: Vec<(String, FileDiff)>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for DiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return writeln!(f, "no differences");
        }
        for (path, d) in &self.entries {
            match d {
                FileDiff::Changed { max_abs_diff: Some(m) } => writeln!(f, "changed  {path}  max |diff| = {m:e}")?,
                FileDiff::Changed { max_abs_diff: None } => writeln!(f, "changed  {path}")?,
                FileDiff::OnlyInA => writeln!(f, "only in A  {path}")?,
                FileDiff::OnlyInB => writeln!(f, "only in B  {path}")?,
            }
        }
        Ok(())
    }
}

fn run_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn read_listed(dir: &Path, entry: &FileEntry) -> Result<String> {
    let p = dir.join(&entry.path);
    std::fs::read_to_string(&p).map_err(|_| Error::MissingFile(p.display().to_string()))
}

/// Max absolute difference over the numeric cells of two CSVs with the same
/// shape. Comment lines (`#`) are compared as text.
pub fn csv_max_abs_diff(a: &str, b: &str) -> Option<f64> {
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    if la.len() != lb.len() {
        return None;
    }
    let mut worst: f64 = 0.0;
    for (x, y) in la.iter().zip(&lb) {
        if x.starts_with('#') || y.starts_with('#') {
            continue;
        }
        let (cx, cy): (Vec<&str>, Vec<&str>) = (x.split(',').collect(), y.split(',').collect());
        if cx.len() != cy.len() {
            return None;
        }
        for (u, v) in cx.iter().zip(&cy) {
            if u == v {
                continue;
            }
            match (u.parse::<f64>(), v.parse::<f64>()) {
                (Ok(p), Ok(q)) => worst = worst.max((p - q).abs()),
                _ => return None,
            }
        }
    }
    Some(worst)
}

/// Compares two runs by their manifests: per-file checksums, and for each
/// changed CSV the largest numeric difference.
pub fn diff_runs(manifest_a: &Path, manifest_b: &Path) -> Result<DiffReport> {
    let (a, b) = (RunManifest::read(manifest_a)?, RunManifest::read(manifest_b)?);
    let (da, db) = (run_dir(manifest_a), run_dir(manifest_b));
    for (dir, m) in [(&da, &a), (&db, &b)] {
        if let Some(f) = m.files.iter().find(|f| !dir.join(&f.path).is_file()) {
            return Err(Error::MissingFile(dir.join(&f.path).display().to_string()));
        }
    }
    let paths: BTreeSet<&str> = a.files.iter().chain(&b.files).map(|f| f.path.as_str()).collect();
    let mut report = DiffReport::default();
    for path in paths {
        let diff = match (a.file(path), b.file(path)) {
            (Some(fa), Some(fb)) if fa.sha256 == fb.sha256 => continue,
            (Some(fa), Some(fb)) => {
                let max_abs_diff = if path.ends_with(".csv") {
                    csv_max_abs_diff(&read_listed(&da, fa)?, &read_listed(&db, fb)?)
                } else {
                    None
                };
                FileDiff::Changed { max_abs_diff }
            }
            (Some(_), None) => FileDiff::OnlyInA,
            (None, _) => FileDiff::OnlyInB,
        };
        report.entries.push((path.to_string(), diff));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_diff_ignores_identical_cells_and_text() {
        let a = "# note\nN,value\n8,1.0\n16,2.0\n";
        let b = "# other\nN,value\n8,1.5\n16,2.0\n";
        assert_eq!(csv_max_abs_diff(a, b), Some(0.5));
        assert_eq!(csv_max_abs_diff(a, "N,value\n"), None);
        assert_eq!(csv_max_abs_diff("a,x\n", "a,y\n"), None);
    }
}
