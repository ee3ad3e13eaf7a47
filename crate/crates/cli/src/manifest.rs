use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vesselseg::persist::{read_json, write_json};
use vesselseg::{Error, Result};

pub const FILE: &str = "manifest.json";

/// Provenance record kept in every artifact directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// `corpus` or `run`.
    pub kind: String,
    pub config_hash: String,
    /// Digest of the corpus directory the artifacts were built from.
    pub corpus_hash: String,
    pub revision: String,
    pub seed: u64,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub command_line: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `git describe` of the working tree, or the crate version outside a checkout.
pub fn revision() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

impl RunManifest {
    pub fn new(name: &str, kind: &str, config_hash: String, corpus_hash: String, seed: u64) -> Self {
        let t = now();
        Self {
            name: name.into(),
            kind: kind.into(),
            config_hash,
            corpus_hash,
            revision: revision(),
            seed,
            created_unix: t,
            updated_unix: t,
            command_line: std::env::args().collect(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(FILE);
        if p.exists() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(FILE), self)
    }

    /// Refreshes the timestamp and command line.
    pub fn touch(&mut self) {
        self.updated_unix = now();
        self.command_line = std::env::args().collect();
        self.revision = revision();
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?.collect::<std::io::Result<_>>().map_err(|e| Error::Io { path: dir.into(), source: e })?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else if p.strip_prefix(root).map_or(true, |r| r != Path::new(FILE)) {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 over relative paths and contents of every file except the manifest.
pub fn dir_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = fs::read(&f).map_err(|e| Error::Io { path: f.clone(), source: e })?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Prepares an output directory. A non-empty directory is only reused with
/// `force`, and only wiped if it is one of ours (has a manifest).
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = dir.exists() && fs::read_dir(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?.next().is_some();
    if non_empty {
        if !force {
            return Err(Error::Data(format!("{} is not empty (use --force to overwrite)", dir.display())));
        }
        if !dir.join(FILE).exists() {
            return Err(Error::Data(format!("refusing to overwrite {}: it has no {FILE}", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}
