//! Named-matrix checkpoint archives.
//!
//! Layout: a text header followed by a binary payload.
//!
//! ```text
//! LORPCKPT1
//! meta <key>=<value>
//! tensor <name> <rows> <cols>
//! end
//! <f32 little-endian values of every tensor, header order, row-major>
//! ```
//!
//! The header doubles as the human-readable manifest of names and shapes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &str = "LORPCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_all<'a>(&mut self, prefix: &str, items: impl IntoIterator<Item = (&'a String, &'a Matrix)>) {
        for (name, m) in items {
            self.tensors.insert(format!("{prefix}{name}"), m.clone());
        }
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> BTreeMap<String, Matrix> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn manifest(&self) -> String {
        let mut out = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            out.push_str(&format!("meta {k}={v}\n"));
        }
        for (name, m) in &self.tensors {
            out.push_str(&format!("tensor {name} {} {}\n", m.rows(), m.cols()));
        }
        out.push_str("end\n");
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = self.manifest().into_bytes();
        for m in self.tensors.values() {
            bytes.extend(m.to_f32_bytes());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Archive {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not utf-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("missing LORPCKPT1 magic"));
        }
        let mut meta = BTreeMap::new();
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad("meta line without '='"))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(t) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = t.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(bad(&format!("malformed tensor line `{line}`")));
                }
                let rows: usize = parts[1].parse().map_err(|_| bad("bad row count"))?;
                let cols: usize = parts[2].parse().map_err(|_| bad("bad column count"))?;
                shapes.push((parts[0].to_string(), rows, cols));
            } else {
                return Err(bad(&format!("unexpected header line `{line}`")));
            }
        }
        let mut tensors = BTreeMap::new();
        for (name, rows, cols) in shapes {
            let n = rows * cols;
            let end = pos + 4 * n;
            if end > bytes.len() {
                return Err(bad(&format!("payload ends inside `{name}`")));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            pos = end;
            tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized archive.
    pub fn content_hash(&self) -> String {
        hash_bytes(&self.to_bytes())
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Rounds every value through `f32`, matching what a save/load cycle does.
pub fn quantize(m: &Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}
