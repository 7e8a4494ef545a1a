//! Run-directory plumbing: root override via environment, creation, and
//! line-delimited metrics records.
//!
//! Layout under one run directory:
//!   config.json     fully resolved spec
//!   model.json      base checkpoint (train-base)
//!   lora.json       adapter checkpoint (erase / merge)
//!   control.jsonl   per-step controller records (erase)
//!   metrics.jsonl   append-only evaluation records
//!   eval.json       last full evaluation record
//!   samples_*.csv   sample clouds (sample / eval)
//!   localize.tsv    layer x head attention profile (eval)
//!   plots/          emitted figures and their tabular sources

use serde::Serialize;
use std::path::{Path, PathBuf};
use streamgate::error::Result;

/// Environment variable that re-roots relative run paths.
pub const RUN_ROOT_ENV: &str = "STREAMGATE_RUN_ROOT";

/// Applies the run-root override to relative paths and creates the directory.
pub fn resolve_run_dir(out: &Path) -> Result<PathBuf> {
    let dir = match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Applies the run-root override to a relative output *file* path and
/// creates its parent directory.
pub fn resolve_out_file(path: &Path) -> Result<PathBuf> {
    let file = match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    };
    if let Some(parent) = file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(file)
}

/// Appends one serialized record as a line of JSON.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Writes a sample cloud as CSV with one generated token row per line.
pub fn write_cloud_csv(path: &Path, cloud: &streamgate::tensor::Mat) -> Result<()> {
    let mut text = String::new();
    for c in 0..cloud.cols {
        if c > 0 {
            text.push(',');
        }
        text.push_str(&format!("c{c}"));
    }
    text.push('\n');
    for i in 0..cloud.rows {
        let row: Vec<String> = cloud.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
