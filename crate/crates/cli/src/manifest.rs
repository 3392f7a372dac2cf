//! One JSON line per artifact-producing run, appended next to the output.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lorp::archive::hash_bytes;
use lorp::{Error, Result};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: hash_bytes(&bytes),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub format: String,
    pub config: Option<String>,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub sub_seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started: u64,
    pub finished: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            format: lorp::system::FORMAT_VERSION.to_string(),
            config: None,
            config_hash: None,
            seed,
            sub_seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: now(),
            finished: 0,
        }
    }

    pub fn config(&mut self, cfg: &lorp::config::KvConfig) {
        self.config = Some(cfg.to_text());
        self.config_hash = Some(cfg.hash());
    }

    pub fn sub_seed(&mut self, label: &str) -> u64 {
        let s = lorp::seed::derive(self.seed, label);
        self.sub_seeds.insert(label.to_string(), s);
        s
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileHash::of(path)?);
        Ok(())
    }

    /// Appends this run to `<path>.manifest.jsonl`.
    pub fn finish(mut self, path: &Path) -> Result<PathBuf> {
        self.finished = now();
        let mut target = path.as_os_str().to_owned();
        target.push(".manifest.jsonl");
        let target = PathBuf::from(target);
        let line = serde_json::to_string(&self).map_err(|e| Error::Invalid(format!("manifest encoding failed: {e}")))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&target)
            .map_err(|e| Error::io(&target, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&target, e))?;
        Ok(target)
    }
}
