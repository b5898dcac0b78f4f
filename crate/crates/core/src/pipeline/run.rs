//! Run manifests: what a subcommand read, with which configuration and seed,
//! and what it wrote. Digests are SHA-256 of file contents; nothing depends on
//! time or on the machine, so equal runs give equal manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Command-line overrides and other run parameters.
    pub parameters: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    /// Files written under the output directory, relative to it.
    pub outputs: Vec<FileDigest>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Digest of an input: a directory is represented by its run manifest when it
/// has one, and otherwise by a digest over its sorted file list and contents.
pub fn input_digest(path: &Path) -> Result<FileDigest> {
    let sha256 = if path.is_dir() {
        let m = path.join(MANIFEST);
        if m.exists() {
            file_sha256(&m)?
        } else {
            let mut h = Sha256::new();
            for f in walk(path)? {
                h.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
                h.update(file_sha256(&f)?.as_bytes());
            }
            hex::encode(h.finalize())
        }
    } else {
        file_sha256(path)?
    };
    Ok(FileDigest {
        path: path.to_string_lossy().into_owned(),
        sha256,
    })
}

/// Every regular file under `dir`, sorted.
fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_hash: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            parameters: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.parameters.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs.push(input_digest(path)?);
        Ok(self)
    }

    /// Records every file under `out` (except an old manifest) and writes
    /// the manifest there.
    pub fn finish(mut self, out: &Path) -> Result<RunManifest> {
        self.outputs = walk(out)?
            .into_iter()
            .filter(|p| p != &out.join(MANIFEST))
            .map(|p| {
                Ok(FileDigest {
                    path: p.strip_prefix(out).unwrap_or(&p).to_string_lossy().into_owned(),
                    sha256: file_sha256(&p)?,
                })
            })
            .collect::<Result<_>>()?;
        let mut json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        json.push('\n');
        fs::write(out.join(MANIFEST), json)?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(MANIFEST);
        let text = crate::volio::container::read_text(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::format("run manifest", &path, e.line(), e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_outputs_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("b.txt"), "b").unwrap();
        fs::write(dir.path().join("sub/a.txt"), "a").unwrap();
        let mut m = RunManifest::new("x", 3, "h");
        m.param("theta", 0.1);
        let m = m.finish(dir.path()).unwrap();
        let paths: Vec<&str> = m.outputs.iter().map(|o| o.path.as_str()).collect();
        assert_eq!(paths, ["b.txt", "sub/a.txt"]);
        let first = fs::read(dir.path().join(MANIFEST)).unwrap();
        RunManifest::new("x", 3, "h").param("theta", 0.1).clone().finish(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(MANIFEST)).unwrap(), first);
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
    }

    #[test]
    fn directory_input_uses_its_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("f"), "x").unwrap();
        let before = input_digest(dir.path()).unwrap();
        RunManifest::new("x", 1, "h").finish(dir.path()).unwrap();
        let after = input_digest(dir.path()).unwrap();
        assert_ne!(before.sha256, after.sha256);
        assert_eq!(after.sha256, file_sha256(&dir.path().join(MANIFEST)).unwrap());
    }
}
