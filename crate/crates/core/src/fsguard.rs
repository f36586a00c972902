//! File reads with an access log and optional forbidden roots.
//!
//! Every read the pipeline performs goes through a [`FsGuard`]. The
//! adaptation path is run with the source dataset root forbidden, which
//! turns the source-free constraint into something a test can count.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::{Error, Result};

#[derive(Debug, Default)]
pub struct FsGuard {
    forbidden: Vec<PathBuf>,
    log: Mutex<Vec<PathBuf>>,
}

fn normalize(path: &Path) -> PathBuf {
    if let Ok(p) = path.canonicalize() {
        return p;
    }
    let abs = if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(path)).unwrap_or_else(|_| path.to_path_buf())
    };
    // canonicalize the deepest existing ancestor so symlinked roots compare equal
    let mut tail = Vec::new();
    let mut cur = abs.as_path();
    while let Some(parent) = cur.parent() {
        if let Ok(base) = cur.canonicalize() {
            return tail.into_iter().rev().fold(base, |acc: PathBuf, c| acc.join(c));
        }
        if let Some(name) = cur.file_name() {
            tail.push(name.to_os_string());
        }
        cur = parent;
    }
    abs
}

impl FsGuard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Any later read under `root` fails with [`Error::Forbidden`].
    pub fn forbid(mut self, root: impl AsRef<Path>) -> Self {
        self.forbidden.push(normalize(root.as_ref()));
        self
    }

    fn check(&self, path: &Path) -> Result<()> {
        let p = normalize(path);
        self.log.lock().expect("fs log poisoned").push(p.clone());
        if self.forbidden.iter().any(|root| p.starts_with(root)) {
            return Err(Error::Forbidden(p));
        }
        Ok(())
    }

    pub fn read(&self, path: &Path) -> Result<Vec<u8>> {
        self.check(path)?;
        std::fs::read(path).map_err(|e| Error::io_at(path, e))
    }

    pub fn read_to_string(&self, path: &Path) -> Result<String> {
        self.check(path)?;
        std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))
    }

    /// Every path read (or attempted) so far, normalized.
    pub fn accesses(&self) -> Vec<PathBuf> {
        self.log.lock().expect("fs log poisoned").clone()
    }

    /// Number of recorded accesses that fall under `root`.
    pub fn accesses_under(&self, root: impl AsRef<Path>) -> usize {
        let root = normalize(root.as_ref());
        self.accesses().iter().filter(|p| p.starts_with(&root)).count()
    }
}
