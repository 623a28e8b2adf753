use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Provenance embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// sha256 of every input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// Epoch seconds from `SOURCE_DATE_EPOCH`; absent otherwise so reruns
    /// stay byte-identical.
    pub timestamp: Option<u64>,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: BTreeMap::new(),
            timestamp: std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()),
        }
    }

    pub fn add_file(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(role.to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Digests the checkpoint manifest and blob.
    pub fn add_checkpoint(&mut self, role: &str, dir: &Path) -> Result<(), CliError> {
        use comp_core::model::{BLOB_FILE, MANIFEST_FILE};
        self.add_file(&format!("{role}/{MANIFEST_FILE}"), &dir.join(MANIFEST_FILE))?;
        self.add_file(&format!("{role}/{BLOB_FILE}"), &dir.join(BLOB_FILE))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let f = File::open(path).map_err(CliError::io(path))?;
    let mut r = BufReader::new(f);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf).map_err(CliError::io(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(CliError::io(path))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::io(path))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    ensure_parent(path)?;
    let f = File::create(path).map_err(CliError::io(path))?;
    Ok(csv::Writer::from_writer(f))
}

pub fn csv_error(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

pub fn flush_csv(mut w: csv::Writer<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(CliError::io(path))?;
    let mut f = w.into_inner().map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    f.flush().map_err(CliError::io(path))
}

/// `<path>.manifest.json` beside a CSV output.
pub fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}
