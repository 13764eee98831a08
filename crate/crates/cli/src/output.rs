//! Output directory with a `manifest.json` of artifact hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct Entry {
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    artifacts: &'a BTreeMap<String, Entry>,
}

pub struct OutDir {
    root: PathBuf,
    command: &'static str,
    artifacts: BTreeMap<String, Entry>,
}

impl OutDir {
    pub fn create(root: &Path, command: &'static str) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(OutDir { root: root.to_path_buf(), command, artifacts: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records a file that was written under the output directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).with_context(|| format!("cannot read back {}", path.display()))?;
        let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        self.artifacts.insert(name.to_string(), Entry { bytes: bytes.len(), sha256 });
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        self.record(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn finish(self) -> Result<()> {
        let manifest = Manifest { command: self.command, artifacts: &self.artifacts };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.path("manifest.json");
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
