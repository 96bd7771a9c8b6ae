//! Write-to-temp-then-rename helpers so failed commands leave nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn sibling(path: &Path, tag: &str) -> Result<PathBuf> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidValue(format!("{} has no file name", path.display())))?;
    let tmp = format!(".{}.{tag}-{}", name.to_string_lossy(), std::process::id());
    Ok(path.with_file_name(tmp))
}

/// Replaces `path` with `bytes` in one rename.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sibling(path, "tmp")?;
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Directory under construction; renamed onto its target by [`StagedDir::publish`]
/// and removed on drop otherwise.
pub struct StagedDir {
    tmp: PathBuf,
    target: PathBuf,
    published: bool,
}

impl StagedDir {
    /// Fails if `target` exists and is not an empty directory.
    pub fn new(target: &Path) -> Result<Self> {
        if target.exists() {
            let mut entries = fs::read_dir(target).map_err(|e| Error::io(target, e))?;
            if entries.next().is_some() {
                return Err(Error::InvalidValue(format!(
                    "output directory {} is not empty",
                    target.display()
                )));
            }
        }
        let tmp = sibling(target, "staging")?;
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            tmp,
            target: target.to_path_buf(),
            published: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.tmp.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    pub fn publish(mut self) -> Result<()> {
        if self.target.exists() {
            fs::remove_dir(&self.target).map_err(|e| Error::io(&self.target, e))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(|e| Error::io(&self.target, e))?;
        self.published = true;
        Ok(())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.published {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_file_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_file_atomic(&p, b"one").unwrap();
        write_file_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn staged_dir_publishes_or_vanishes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        {
            let s = StagedDir::new(&out).unwrap();
            s.write("a", b"x").unwrap();
        }
        assert!(!out.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

        let s = StagedDir::new(&out).unwrap();
        s.write("a", b"x").unwrap();
        s.publish().unwrap();
        assert_eq!(fs::read(out.join("a")).unwrap(), b"x");
        assert!(StagedDir::new(&out).is_err());
    }
}
