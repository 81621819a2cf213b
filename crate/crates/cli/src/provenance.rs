use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use repvar_core::experiment::ExperimentConfig;
use repvar_core::Result;

/// Stamp carried by every output file: hash of the resolved config plus the seed.
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub command: String,
}

impl Provenance {
    pub fn new(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let text = serde_json::to_string(cfg)?;
        let digest = Sha256::digest(text.as_bytes());
        let config_hash = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Provenance {
            config_hash,
            seed: cfg.seed,
            command: command.to_string(),
        })
    }

    fn header(&self) -> String {
        format!("# config_hash={}, seed={}\n", self.config_hash, self.seed)
    }

    /// `{"provenance": .., "result": value}`, pretty printed.
    pub fn write_json(&self, path: &Path, value: Value) -> Result<()> {
        let doc = json!({
            "provenance": {
                "config_hash": self.config_hash,
                "seed": self.seed,
                "command": self.command,
                "version": env!("CARGO_PKG_VERSION"),
            },
            "result": value,
        });
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }

    /// Lets a path-based writer fill the file, then puts the comment line on top.
    pub fn write_csv_with(&self, path: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        f(path)?;
        let body = fs::read(path)?;
        let mut out = fs::File::create(path)?;
        out.write_all(self.header().as_bytes())?;
        out.write_all(&body)?;
        Ok(())
    }

    pub fn write_csv_buf(&self, path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = self.header().into_bytes();
        f(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }
}
