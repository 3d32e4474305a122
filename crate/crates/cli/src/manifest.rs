//! Per-stage manifests: content hashes of inputs and outputs plus the
//! settings that shaped them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub version: String,
    /// Hash of the configuration slice the stage reads.
    pub config: String,
    /// Upstream file (relative to the run directory) to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Files this stage wrote, relative to its own directory.
    pub outputs: BTreeMap<String, String>,
}

impl StageManifest {
    pub fn read(dir: &Path) -> Option<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)? + "\n").context("writing manifest")
    }

    /// True when inputs and settings match and every output is intact.
    pub fn is_current(&self, expected: &StageManifest, dir: &Path) -> bool {
        self.stage == expected.stage
            && self.seed == expected.seed
            && self.version == expected.version
            && self.config == expected.config
            && self.inputs == expected.inputs
            && !self.outputs.is_empty()
            && self.outputs.iter().all(|(name, h)| hash_file(&dir.join(name)).is_ok_and(|x| &x == h))
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(hash_bytes(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn currency_tracks_outputs() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "x").unwrap();
        let m = StageManifest {
            stage: "s".into(),
            seed: 1,
            version: "v".into(),
            config: "c".into(),
            inputs: BTreeMap::new(),
            outputs: [("a.txt".to_string(), hash_bytes(b"x"))].into(),
        };
        m.write(dir.path()).unwrap();
        let read = StageManifest::read(dir.path()).unwrap();
        assert!(read.is_current(&m, dir.path()));
        assert!(!read.is_current(&StageManifest { seed: 2, ..m.clone() }, dir.path()));
        fs::write(dir.path().join("a.txt"), "y").unwrap();
        assert!(!read.is_current(&m, dir.path()));
    }
}
