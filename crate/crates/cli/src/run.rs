//! Output directory handling and the per-run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{self, RunConfig};

pub const MANIFEST: &str = "manifest.toml";

/// A named pass/fail assertion requested by the user.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub struct Run {
    out: PathBuf,
    command: &'static str,
    config: RunConfig,
    artifacts: BTreeMap<String, String>,
    checks: Vec<Check>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Run {
    /// Prepares the output directory; an existing non-empty directory is
    /// only reused with `force`.
    pub fn start(command: &'static str, config: RunConfig, force: bool) -> Result<Run> {
        let out = config
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(command));
        if out.is_file() {
            bail!("output path {} is a file", out.display());
        }
        let non_empty = out.is_dir()
            && fs::read_dir(&out)
                .with_context(|| format!("reading {}", out.display()))?
                .next()
                .is_some();
        if non_empty && !force {
            bail!(
                "output directory {} is not empty; pass --force to write into it anyway",
                out.display()
            );
        }
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let mut config = config;
        config.out = Some(out.clone());
        Ok(Run {
            out,
            command,
            config,
            artifacts: BTreeMap::new(),
            checks: Vec::new(),
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes.as_ref()).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes.as_ref()));
        Ok(())
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<()> {
        let mut json = serde_json::to_string_pretty(value)?;
        json.push('\n');
        self.write(rel, json)
    }

    /// Records the hash of a file some other code already wrote.
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let path = self.path(rel);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        self.artifacts.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn check(&mut self, check: Check) {
        let mark = if check.passed { "PASS" } else { "FAIL" };
        println!("[{mark}] {}: {}", check.name, check.detail);
        self.checks.push(check);
    }

    /// Writes the manifest; returns whether every check passed.
    pub fn finish(self) -> Result<bool> {
        let passed = self.checks.iter().all(|c| c.passed);
        let mut doc = toml::Table::new();
        doc.insert("command".into(), self.command.into());
        doc.insert("passed".into(), passed.into());
        doc.insert("config".into(), toml::Value::Table(config::to_toml(&self.config)?));
        let artifacts: toml::Table = self
            .artifacts
            .into_iter()
            .map(|(k, v)| (k, toml::Value::String(v)))
            .collect();
        doc.insert("artifacts".into(), toml::Value::Table(artifacts));
        if !self.checks.is_empty() {
            doc.insert("checks".into(), toml::Value::try_from(&self.checks)?);
        }
        let path = self.out.join(MANIFEST);
        fs::write(&path, toml::to_string(&doc)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(passed)
    }
}
