//! Output directory bookkeeping and the run manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Debug, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub seeds: BTreeMap<String, u64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub stages: &'a [StageRecord],
    pub files: Vec<FileRecord>,
}

/// Collects the files and stages of one run.
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
    stages: Vec<StageRecord>,
}

impl Outputs {
    pub fn new(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)?;
        Ok(Outputs { root: root.to_path_buf(), files: vec![], stages: vec![] })
    }

    /// Absolute path for `name`, recorded for the manifest.
    pub fn file(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let rel = PathBuf::from(name);
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.file(name)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Runs `body` as a named stage and records its wall time and seeds.
    pub fn stage<T>(
        &mut self,
        name: &str,
        seeds: &[(&str, u64)],
        body: impl FnOnce(&mut Self) -> Result<T, CliError>,
    ) -> Result<T, CliError> {
        let start = Instant::now();
        let out = body(self)?;
        self.stages.push(StageRecord {
            name: name.to_string(),
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    /// Hashes every recorded file and writes `manifest.json` via a rename.
    pub fn finish(self, command: &str, config: &RunConfig) -> Result<PathBuf, CliError> {
        let mut files = vec![];
        for rel in &self.files {
            let bytes = std::fs::read(self.root.join(rel))?;
            files.push(FileRecord {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let manifest = RunManifest {
            tool: "amplab",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            stages: &self.stages,
            files,
        };
        let path = self.root.join("manifest.json");
        let tmp = self.root.join(".manifest.json.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut f, &manifest)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
