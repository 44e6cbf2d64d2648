//! Run-directory artifacts. Everything except the manifest's timestamps is
//! a pure function of the resolved config and the checkpoint bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use suffixlab_core::toylab::CharVocab;
use suffixlab_core::{AttackResult, IterationLog};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Clone, Debug, Serialize)]
pub struct Timestamps {
    pub started: u64,
    pub finished: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    /// SHA-256 over the resolved config, which includes the checkpoint hash
    /// and precision.
    pub config_hash: String,
    pub precision: String,
    pub seed: u64,
    pub timestamps: Timestamps,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, precision: &str, seed: u64, started: u64) -> Self {
        let config_hash = sha256_hex(&serde_json::to_vec(&config).expect("json value"));
        Self {
            command: command.into(),
            config,
            config_hash,
            precision: precision.into(),
            seed,
            timestamps: Timestamps {
                started,
                finished: started,
            },
            artifacts: Vec::new(),
        }
    }

    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.timestamps.finished = unix_now();
        self.artifacts.sort();
        write_json(&dir.join("manifest.json"), &self)
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_iters_csv(path: &Path, logs: &[IterationLog]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "iter",
        "selected_loss",
        "best_loss",
        "match",
        "grad_norm",
        "guide_norm",
        "wall_ms",
    ])?;
    for l in logs {
        w.write_record([
            l.iter.to_string(),
            l.selected_loss.to_string(),
            l.best_loss.to_string(),
            opt(l.matched),
            l.grad_norm.to_string(),
            opt(l.guide_norm),
            l.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ResultFile<'a> {
    config_hash: &'a str,
    query: &'a str,
    target: &'a str,
    initial_suffix: &'a [usize],
    initial_loss: f64,
    best_suffix: &'a [usize],
    best_suffix_text: String,
    best_loss: f64,
    matched: bool,
    iterations: usize,
    suffix_history: &'a [Vec<usize>],
}

/// `iters.csv`, `result.json` and, when candidates were recorded,
/// `trace.json`. Returns the artifact names.
pub fn write_attack_run(
    dir: &Path,
    result: &AttackResult,
    config_hash: &str,
    query: &str,
    target: &str,
) -> Result<Vec<String>> {
    create_dir(dir)?;
    write_iters_csv(&dir.join("iters.csv"), &result.logs)?;
    let vocab = CharVocab::new();
    write_json(
        &dir.join("result.json"),
        &ResultFile {
            config_hash,
            query,
            target,
            initial_suffix: &result.initial_suffix,
            initial_loss: result.initial_loss,
            best_suffix: &result.best_suffix,
            best_suffix_text: vocab.decode(&result.best_suffix),
            best_loss: result.best_loss,
            matched: result.matched,
            iterations: result.logs.len(),
            suffix_history: &result.suffix_history,
        },
    )?;
    let mut names = vec!["iters.csv".to_string(), "result.json".to_string()];
    if let Some(trace) = &result.trace {
        write_json(&dir.join("trace.json"), trace)?;
        names.push("trace.json".into());
    }
    Ok(names)
}

/// Relative artifact path for the manifest.
pub fn rel(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .map(PathBuf::from)
        .unwrap_or_else(|_| path.to_path_buf())
        .display()
        .to_string()
}
