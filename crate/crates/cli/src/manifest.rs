//! Per-stage sidecar manifests recording the config hash, stage, seed and the
//! SHA-256 of every output file.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// File name (relative to the stage directory) to SHA-256.
    pub files: BTreeMap<String, String>,
}

impl StageManifest {
    /// Hashes `files` inside `dir`.
    pub fn build(stage: &str, config_hash: &str, seed: u64, dir: &Path, files: &[String]) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for f in files {
            map.insert(f.clone(), sha256_file(&dir.join(f))?);
        }
        Ok(Self {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            files: map,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_NAME), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Option<Self>, CliError> {
        let path = dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Verification(format!("{}: {e}", path.display())))
    }

    /// Re-hashes every listed file; returns the names that differ or are
    /// missing.
    pub fn mismatches(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|(name, hash)| sha256_file(&dir.join(name)).map(|h| &h != *hash).unwrap_or(true))
            .map(|(name, _)| name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), b"one").unwrap();
        let m = StageManifest::build("s", "h", 3, dir.path(), &["a".into()]).unwrap();
        m.write(dir.path()).unwrap();
        let back = StageManifest::read(dir.path()).unwrap().unwrap();
        assert_eq!(back, m);
        assert!(back.mismatches(dir.path()).is_empty());
        std::fs::write(dir.path().join("a"), b"two").unwrap();
        assert_eq!(back.mismatches(dir.path()), vec!["a".to_string()]);
    }
}
