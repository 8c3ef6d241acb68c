//! Immutable run directories with a content manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::CliError;
use crate::tensor::{to_pgm16, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    /// Path as written in the configuration.
    pub path: String,
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, InputRef>,
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Lexical normalization (no filesystem access), so paths through
/// directories that do not exist yet still resolve.
pub fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// A run directory under construction. Files go to a hidden staging
/// directory that is renamed into place by [`RunDir::finish`]; dropping an
/// unfinished run removes the staging directory, so failures leave nothing.
pub struct RunDir {
    target: PathBuf,
    staging: PathBuf,
    artifacts: BTreeMap<String, String>,
    export_pgm: bool,
    finished: bool,
}

impl RunDir {
    pub fn create(target: &Path, export_pgm: bool) -> Result<Self, CliError> {
        if target.exists() {
            return Err(CliError::OutputExists(format!(
                "{} already exists; stage outputs are immutable, choose a new run directory",
                target.display()
            )));
        }
        let name = target.file_name().ok_or_else(|| CliError::Config(format!("bad output path {}", target.display())))?;
        let staging = target.with_file_name(format!(".{}.partial", name.to_string_lossy()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(Self { target: target.to_path_buf(), staging, artifacts: BTreeMap::new(), export_pgm, finished: false })
    }

    /// Where files are currently being written.
    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.staging.join(name), bytes)?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Writes `<stem>.puqt`, plus `<stem>.pgm` (rank 2) or `<stem>_<k>.pgm`
    /// (rank 3) when PGM export is on.
    pub fn write_tensor(&mut self, stem: &str, t: &Tensor) -> Result<(), CliError> {
        self.write_bytes(&format!("{stem}.puqt"), &t.to_bytes()?)?;
        if self.export_pgm {
            let v = t.to_f64();
            match *t.dims.as_slice() {
                [h, w] => self.write_bytes(&format!("{stem}.pgm"), &to_pgm16(h, w, &v))?,
                [n, h, w] => {
                    for k in 0..n {
                        self.write_bytes(&format!("{stem}_{k}.pgm"), &to_pgm16(h, w, &v[k * h * w..(k + 1) * h * w]))?;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn finish(mut self, mut manifest: Manifest) -> Result<PathBuf, CliError> {
        manifest.artifacts = std::mem::take(&mut self.artifacts);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        fs::write(self.staging.join(MANIFEST), text)?;
        fs::rename(&self.staging, &self.target)?;
        self.finished = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.finished {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        Manifest {
            tool: "phaseuq".into(),
            version: "0".into(),
            stage: "test".into(),
            config_sha256: String::new(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    #[test]
    fn finished_runs_are_renamed_and_immutable() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let mut r = RunDir::create(&out, false).unwrap();
        r.write_text("a.txt", "hello").unwrap();
        r.finish(manifest()).unwrap();
        assert!(out.join("a.txt").exists() && out.join(MANIFEST).exists());
        assert!(matches!(RunDir::create(&out, false), Err(CliError::OutputExists(_))));
    }

    #[test]
    fn dropped_runs_leave_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        {
            let mut r = RunDir::create(&out, false).unwrap();
            r.write_text("a.txt", "x").unwrap();
        }
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn lexical_normalization() {
        assert_eq!(normalize(Path::new("a/b/../c/./d")), PathBuf::from("a/c/d"));
        assert_eq!(normalize(Path::new("/x/y/../../z")), PathBuf::from("/z"));
    }
}
