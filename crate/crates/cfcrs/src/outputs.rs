//! Output directory bookkeeping: every file goes through [`Outputs`], which
//! records it in the manifest.

use std::path::{Path, PathBuf};

use cfcrs_core::nn::ParamStore;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::write_file;

pub const CONFIG_FILE: &str = "config.resolved.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub role: String,
    /// Absent only for the manifest's own entry.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn with_role(&self, role: &str) -> Vec<&ManifestEntry> {
        self.files.iter().filter(|f| f.role == role).collect()
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = crate::formats::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), record: 0, reason: e.to_string() })
    }
}

pub struct Outputs {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, role: &str, bytes: &[u8]) -> Result<PathBuf> {
        assert!(!self.files.iter().any(|f| f.path == name), "{name} written twice");
        let path = self.dir.join(name);
        write_file(&path, bytes)?;
        self.files.push(ManifestEntry { path: name.into(), role: role.into(), bytes: Some(bytes.len() as u64) });
        Ok(path)
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, role: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
        s.push('\n');
        self.write(name, role, s.as_bytes())
    }

    pub fn write_checkpoint(&mut self, name: &str, store: &ParamStore) -> Result<PathBuf> {
        self.write(name, "checkpoint", &checkpoint::to_bytes(store))
    }

    /// Writes the resolved config and the manifest, closing the run.
    pub fn finish(mut self, command: &str, config: &RunConfig) -> Result<Manifest> {
        self.write_json(CONFIG_FILE, "config", config)?;
        self.files.push(ManifestEntry { path: MANIFEST_FILE.into(), role: "manifest".into(), bytes: None });
        let manifest = Manifest { command: command.into(), files: self.files };
        let mut s = serde_json::to_string_pretty(&manifest).expect("plain data serializes");
        s.push('\n');
        write_file(&self.dir.join(MANIFEST_FILE), s.as_bytes())?;
        Ok(manifest)
    }
}
