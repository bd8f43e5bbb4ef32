//! Staged output: everything is written under a temporary sibling and renamed
//! into place once the command has succeeded.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const RUN_DIR_ENV: &str = "ADWPF_RUN_DIR";

/// `--out` if given, else `name` under `$ADWPF_RUN_DIR` (default `runs`).
pub fn resolve_out(out: Option<&Path>, name: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(name),
    }
}

pub fn check_writable(dest: &Path, force: bool) -> Result<()> {
    if dest.exists() && !force {
        bail!("{} already exists (pass --force to overwrite)", dest.display());
    }
    Ok(())
}

fn staging_path(dest: &Path) -> Result<PathBuf> {
    let name = dest.file_name().with_context(|| format!("{} has no file name", dest.display()))?;
    let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    Ok(parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id())))
}

fn remove_any(p: &Path) -> std::io::Result<()> {
    if p.is_dir() {
        std::fs::remove_dir_all(p)
    } else {
        std::fs::remove_file(p)
    }
}

/// A directory under construction; dropped without [`StagedDir::commit`] it is removed.
pub struct StagedDir {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl StagedDir {
    pub fn new(dest: &Path, force: bool) -> Result<Self> {
        check_writable(dest, force)?;
        let tmp = staging_path(dest)?;
        if tmp.exists() {
            remove_any(&tmp)?;
        }
        std::fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Self { tmp, dest: dest.to_path_buf(), committed: false })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.dest.exists() {
            remove_any(&self.dest).with_context(|| format!("removing {}", self.dest.display()))?;
        }
        std::fs::rename(&self.tmp, &self.dest).with_context(|| format!("moving output to {}", self.dest.display()))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Writes several files, all or none.
pub fn write_files_atomically(files: &[(PathBuf, Vec<u8>)], force: bool) -> Result<()> {
    for (dest, _) in files {
        check_writable(dest, force)?;
    }
    let mut staged = Vec::new();
    for (dest, bytes) in files {
        let tmp = staging_path(dest)?;
        if let Err(e) = std::fs::write(&tmp, bytes) {
            for t in &staged {
                let _ = std::fs::remove_file(t);
            }
            let _ = std::fs::remove_file(&tmp);
            return Err(e).with_context(|| format!("writing {}", dest.display()));
        }
        staged.push(tmp);
    }
    for ((dest, _), tmp) in files.iter().zip(&staged) {
        std::fs::rename(tmp, dest).with_context(|| format!("moving output to {}", dest.display()))?;
    }
    Ok(())
}
