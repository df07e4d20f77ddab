//! Run directories and their manifests.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Version of every CSV schema the CLI writes; stored in the first column.
pub const CSV_FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn digest_label(bytes: &[u8]) -> String {
    format!("sha256:{}", sha256_hex(bytes))
}

/// Prefix every line of a CSV with the format-version column.
pub fn versioned_csv(csv: &str) -> String {
    let mut out = String::with_capacity(csv.len() + 16 * csv.lines().count());
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            out.push_str("format_version,");
        } else {
            out.push_str(&format!("{CSV_FORMAT_VERSION},"));
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Everything needed to reproduce a run: the command, the resolved config
/// (stored next to the manifest and pinned by its digest) and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config_file: String,
    pub config_digest: String,
    pub seed: u64,
    pub library_version: String,
    pub started_at: String,
    pub finished_at: String,
    /// Worker threads used; results do not depend on it.
    pub jobs: usize,
    pub exit_code: i32,
    #[serde(default)]
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_of: Option<String>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub details: serde_json::Map<String, serde_json::Value>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        crate::config::parse(&text)
    }
}

/// A fresh output directory named `<timestamp>-<digest8>`.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    config_digest: String,
    seed: u64,
    jobs: usize,
    started_at: String,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    pub replay_of: Option<String>,
    pub details: serde_json::Map<String, serde_json::Value>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunDir {
    /// Create the directory under `root` and store the resolved config.
    pub fn create(root: &Path, command: &str, config: &[u8], seed: u64, jobs: usize) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let mut key = Vec::with_capacity(config.len() + 32);
        key.extend_from_slice(command.as_bytes());
        key.push(0);
        key.extend_from_slice(config);
        key.push(0);
        key.extend_from_slice(&seed.to_le_bytes());
        let short = &sha256_hex(&key)[..8];
        let stamp = Utc::now().format("%Y%m%dT%H%M%S%3fZ");
        let base = format!("{stamp}-{short}");
        let mut path = root.join(&base);
        let mut k = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                    path = root.join(format!("{base}-{k}"));
                    k += 1;
                }
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        }
        fs::write(path.join(CONFIG_FILE), config)?;
        Ok(Self {
            path,
            command: command.into(),
            config_digest: digest_label(config),
            seed,
            jobs,
            started_at: now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            replay_of: None,
            details: serde_json::Map::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of_file(path)?);
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let bytes = bytes.as_ref();
        let path = self.path.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(FileDigest {
            path: name.into(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Write the manifest; it is never rewritten afterwards.
    pub fn finish(self, exit_code: i32) -> Result<PathBuf> {
        let manifest = RunManifest {
            format_version: MANIFEST_VERSION,
            command: self.command,
            config_file: CONFIG_FILE.into(),
            config_digest: self.config_digest,
            seed: self.seed,
            library_version: env!("CARGO_PKG_VERSION").into(),
            started_at: self.started_at,
            finished_at: now(),
            jobs: self.jobs,
            exit_code,
            inputs: self.inputs,
            outputs: self.outputs,
            replay_of: self.replay_of,
            details: self.details,
        };
        let path = self.path.join(MANIFEST_FILE);
        let mut file = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(&mut file, &manifest)?;
        Ok(self.path)
    }
}
