//! `<command>.manifest.json`: what a command produced, with SHA-256 digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_s: f64,
}

pub fn sha256_file(path: &Path) -> CliResult<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| io_at(path, e))?;
    let hex = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    Ok((hex, bytes.len() as u64))
}

fn io_at(path: &Path, e: std::io::Error) -> CliError {
    CliError { kind: "io", message: format!("{}: {e}", path.display()) }
}

fn digest(path: &Path, shown: String) -> CliResult<FileDigest> {
    let (sha256, bytes) = sha256_file(path)?;
    Ok(FileDigest { path: shown, sha256, bytes })
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.entries().clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        let d = digest(path, path.display().to_string())?;
        self.inputs.push(d);
        Ok(())
    }

    /// Records every output (paths relative to `dir`) and writes the
    /// manifest next to them.
    pub fn write(mut self, dir: &Path, outputs: &[PathBuf], wall_clock_s: f64) -> CliResult<PathBuf> {
        self.wall_clock_s = wall_clock_s;
        self.outputs = outputs
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(dir).unwrap_or(p).display().to_string();
                digest(p, rel)
            })
            .collect::<CliResult<_>>()?;
        let path = dir.join(format!("{}{MANIFEST_SUFFIX}", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n").map_err(|e| io_at(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_at(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Manifests found in `dir`, sorted by file name.
pub fn manifests_in(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_at(dir, e))? {
        let p = entry?.path();
        if p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(MANIFEST_SUFFIX)) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// If `path` is listed by a manifest in its directory, its digest must
/// match. Files no manifest lists pass unchecked.
pub fn verify_artifact(path: &Path) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    for mpath in manifests_in(dir)? {
        let m = RunManifest::read(&mpath)?;
        if let Some(entry) = m.outputs.iter().find(|o| o.path == name) {
            let (sha, _) = sha256_file(path)?;
            if sha != entry.sha256 {
                return Err(CliError {
                    kind: "integrity",
                    message: format!("{} does not match the digest in {}", path.display(), mpath.display()),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, "abc").unwrap();
        let (h, n) = sha256_file(&p).unwrap();
        assert_eq!(h, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(n, 3);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "x,y\n1,2\n").unwrap();
        let mp = RunManifest::new("test", &RunConfig::default()).write(dir.path(), &[p.clone()], 0.0).unwrap();
        assert!(mp.ends_with("test.manifest.json"));
        verify_artifact(&p).unwrap();
        let m = RunManifest::read(&mp).unwrap();
        assert_eq!(m.outputs[0].path, "a.csv");
        std::fs::write(&p, "x,y\n1,3\n").unwrap();
        assert_eq!(verify_artifact(&p).unwrap_err().kind, "integrity");
    }
}
