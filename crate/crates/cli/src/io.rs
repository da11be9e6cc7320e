//! File formats: numeric CSV with `#` comment lines, JSON documents, and the
//! run manifest carried by every output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: Option<u64>,
    pub rng: String,
    pub config: Value,
    /// SHA-256 of every input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: Option<u64>, config: Value) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            rng: wesper::simulator::RNG_ALGORITHM.to_string(),
            config,
            inputs: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: &str, bytes: &[u8]) {
        self.inputs.insert(path.to_string(), hex::encode(Sha256::digest(bytes)));
    }

    /// The manifest as `#`-prefixed JSON lines.
    pub fn comment_lines(&self) -> String {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.lines().map(|l| format!("# {l}\n")).collect()
    }
}

pub fn read_bytes(path: &str) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// First column of every data line; `#` lines, blank lines and a
/// non-numeric header are skipped.
pub fn parse_column(path: &str, bytes: &[u8]) -> CliResult<Vec<f64>> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::parse(path, e.to_string()))?;
    let mut out = Vec::new();
    let mut seen_data = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let field = line.split(',').next().unwrap_or("").trim();
        match field.parse::<f64>() {
            Ok(v) => {
                seen_data = true;
                out.push(v);
            }
            Err(_) if !seen_data => continue,
            Err(_) => return Err(CliError::parse(path, format!("line {}: cannot parse {field:?}", i + 1))),
        }
    }
    if out.is_empty() {
        return Err(CliError::parse(path, "no numeric data"));
    }
    Ok(out)
}

pub fn parse_json(path: &str, bytes: &[u8]) -> CliResult<Value> {
    serde_json::from_slice(bytes).map_err(|e| CliError::parse(path, e.to_string()))
}

/// Full-precision decimal form (17 significant digits).
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes to `path`, or to stdout when it is `None` or `-`.
pub fn emit(path: Option<&Path>, content: &str) -> CliResult<()> {
    match path {
        Some(p) if p != Path::new("-") => {
            fs::write(p, content).map_err(|e| CliError::io(p.display().to_string(), e))
        }
        _ => {
            let mut out = std::io::stdout().lock();
            out.write_all(content.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::io("<stdout>", e))
        }
    }
}
