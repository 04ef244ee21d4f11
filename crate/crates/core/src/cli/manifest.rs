use std::fmt::Write as _;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::model::parse_pairs;

use super::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// 64-bit FNV-1a of a byte string, as 16 hex digits.
pub fn fnv1a(bytes: &[u8]) -> String {
    let mut h = FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    Ok(fnv1a(&fs::read(path)?))
}

/// Provenance record written once into every artifact directory. Hashes are
/// of file contents; `NA` marks inputs a command does not have.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &[String], seed: u64) -> Self {
        Self {
            command: command.join(" "),
            config_hash: "NA".into(),
            corpus_hash: "NA".into(),
            seed,
            checkpoint_hash: "NA".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("command", self.command.as_str()),
            ("config_hash", &self.config_hash),
            ("corpus_hash", &self.corpus_hash),
            ("seed", &self.seed.to_string()),
            ("checkpoint_hash", &self.checkpoint_hash),
            ("tool_version", &self.tool_version),
        ] {
            writeln!(s, "{k}={v}").expect("writing to a String");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let pairs = parse_pairs(text).map_err(|e| CliError::Report(e.to_string()))?;
        let get = |key: &str| -> Result<String, CliError> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| CliError::Report(format!("manifest lacks `{key}`")))
        };
        Ok(Self {
            command: get("command")?,
            config_hash: get("config_hash")?,
            corpus_hash: get("corpus_hash")?,
            seed: get("seed")?.parse().map_err(|_| CliError::Report("manifest seed is not an integer".into()))?,
            checkpoint_hash: get("checkpoint_hash")?,
            tool_version: get("tool_version")?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::write(dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }
}
