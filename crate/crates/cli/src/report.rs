use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Digest of an input file.
#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path, bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        Self { path: path.display().to_string(), sha256: digest.iter().map(|b| format!("{b:02x}")).collect() }
    }
}

/// Envelope shared by every subcommand. Contains no timestamps, so reruns of
/// the same configuration are byte-identical.
#[derive(Debug, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub inputs: Vec<InputDigest>,
    pub config: Value,
    pub seed: Option<u64>,
    pub warnings: Vec<String>,
    pub result: Value,
}

impl Report {
    pub fn new(command: &'static str, config: impl Serialize, seed: Option<u64>, result: impl Serialize) -> Result<Self> {
        Ok(Self {
            tool: "dosesens",
            version: env!("CARGO_PKG_VERSION"),
            command,
            inputs: Vec::new(),
            config: serde_json::to_value(config)?,
            seed,
            warnings: Vec::new(),
            result: serde_json::to_value(result)?,
        })
    }

    pub fn with_input(mut self, input: Option<InputDigest>) -> Self {
        self.inputs.extend(input);
        self
    }

    pub fn with_warnings(mut self, warnings: Vec<String>) -> Self {
        self.warnings = warnings;
        self
    }

    pub fn emit(&self, out: Option<&Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        match out {
            Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
            None => {
                std::io::stdout().lock().write_all(text.as_bytes())?;
                Ok(())
            }
        }
    }
}
