//! Cleanup of partial outputs. Commands register every path they create;
//! if the command returns an error the guard removes them on drop, so a
//! failed run leaves no half-written artifacts behind.

use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct OutputGuard {
    created: Vec<PathBuf>,
    armed: bool,
}

impl OutputGuard {
    pub fn new() -> Self {
        Self {
            created: Vec::new(),
            armed: true,
        }
    }

    /// Create `dir` (and parents), tracking only what did not exist before,
    /// so a pre-existing output directory is never deleted on failure.
    pub fn create_dir(&mut self, dir: &Path) -> std::io::Result<()> {
        let mut missing = Vec::new();
        let mut probe = dir.to_path_buf();
        while !probe.exists() {
            missing.push(probe.clone());
            match probe.parent() {
                Some(parent) if !parent.as_os_str().is_empty() => probe = parent.to_path_buf(),
                _ => break,
            }
        }
        fs::create_dir_all(dir)?;
        // Deepest first, so removal order (reversed) deletes children before
        // parents.
        for path in missing.into_iter().rev() {
            self.created.push(path);
        }
        Ok(())
    }

    /// Track a file the command is about to write.
    pub fn track(&mut self, path: impl Into<PathBuf>) {
        self.created.push(path.into());
    }

    /// Call on success to keep everything.
    pub fn disarm(mut self) {
        self.armed = false;
    }
}

impl Default for OutputGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for path in self.created.iter().rev() {
            if path.is_dir() {
                let _ = fs::remove_dir_all(path);
            } else {
                let _ = fs::remove_file(path);
            }
        }
    }
}
