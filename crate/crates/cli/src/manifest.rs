use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use metabias_core::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn read(role: &str, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Record written beside every run's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 over the command, its result-affecting settings and the
    /// contents (not paths) of every input file.
    pub config_digest: String,
    pub seed: u64,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub status: String,
    pub error: Option<String>,
    pub settings: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

/// Wall-clock time, or `SOURCE_DATE_EPOCH` when set so that reruns can be
/// byte-identical including the manifest.
pub fn now() -> String {
    let t = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|s| OffsetDateTime::from_unix_timestamp(s).ok())
        .unwrap_or_else(OffsetDateTime::now_utc);
    t.format(&Rfc3339).unwrap_or_default()
}

pub fn config_digest(command: &str, settings: &serde_json::Value, inputs: &[InputFile]) -> String {
    #[derive(Serialize)]
    struct Keyed<'a> {
        command: &'a str,
        settings: &'a serde_json::Value,
        inputs: Vec<(&'a str, &'a str)>,
    }
    let keyed = Keyed {
        command,
        settings,
        inputs: inputs.iter().map(|i| (i.role.as_str(), i.sha256.as_str())).collect(),
    };
    sha256_hex(&serde_json::to_vec(&keyed).expect("serialisable settings"))
}
