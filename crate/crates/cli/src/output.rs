//! Output directories that only appear once every artifact is written.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// A sibling staging directory moved into place by [`Staged::commit`].
/// Dropped without a commit, it is removed.
pub struct Staged {
    stage: PathBuf,
    out: PathBuf,
    committed: bool,
}

impl Staged {
    pub fn new(out: &Path) -> Result<Self> {
        let name = out
            .file_name()
            .with_context(|| format!("--out {} has no final component", out.display()))?
            .to_string_lossy()
            .into_owned();
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let stage = out.with_file_name(format!(".{name}.partial"));
        if stage.exists() {
            fs::remove_dir_all(&stage).with_context(|| format!("clearing {}", stage.display()))?;
        }
        fs::create_dir(&stage).with_context(|| format!("creating {}", stage.display()))?;
        Ok(Self {
            stage,
            out: out.to_path_buf(),
            committed: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.stage.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Moves the staged entries into `out`. A missing `out` is created by a
    /// single rename; otherwise each entry replaces its namesake.
    pub fn commit(mut self) -> Result<PathBuf> {
        if !self.out.exists() {
            fs::rename(&self.stage, &self.out)
                .with_context(|| format!("moving outputs to {}", self.out.display()))?;
        } else {
            let mut entries: Vec<_> = fs::read_dir(&self.stage)?.collect::<Result<_, _>>()?;
            entries.sort_by_key(|e| e.file_name());
            for e in entries {
                let target = self.out.join(e.file_name());
                if target.is_dir() {
                    fs::remove_dir_all(&target)
                        .with_context(|| format!("replacing {}", target.display()))?;
                }
                fs::rename(e.path(), &target)
                    .with_context(|| format!("moving {}", target.display()))?;
            }
            fs::remove_dir(&self.stage)?;
        }
        self.committed = true;
        Ok(self.out.clone())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.stage);
        }
    }
}
