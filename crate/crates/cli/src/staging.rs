//! Output directories that appear only once a command has succeeded.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// A sibling temp directory that is renamed onto the target on commit and
/// removed if dropped uncommitted.
pub struct Staging {
    target: PathBuf,
    temp: PathBuf,
    committed: bool,
}

impl Staging {
    /// Fails up front if `target` exists and is not an empty directory,
    /// unless `replace` is set.
    pub fn new(target: &Path, replace: bool) -> Result<Self> {
        if target.exists() {
            let empty = target.is_dir() && fs::read_dir(target)?.next().is_none();
            if !empty && !replace {
                bail!("output {} already exists; pass --force to replace it", target.display());
            }
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let name = target
            .file_name()
            .with_context(|| format!("output path {} has no final component", target.display()))?
            .to_string_lossy()
            .into_owned();
        let temp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if temp.exists() {
            fs::remove_dir_all(&temp)?;
        }
        fs::create_dir(&temp).with_context(|| format!("creating {}", temp.display()))?;
        Ok(Self {
            target: target.to_path_buf(),
            temp,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.temp
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            if self.target.is_dir() {
                fs::remove_dir_all(&self.target)?;
            } else {
                fs::remove_file(&self.target)?;
            }
        }
        fs::rename(&self.temp, &self.target)
            .with_context(|| format!("moving results into {}", self.target.display()))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.temp);
        }
    }
}
