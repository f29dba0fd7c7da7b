//! Output directories: an exclusive lock per directory and a record of what
//! each command wrote.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use wqms_core::Error;

pub const LOCK_FILE: &str = ".wqms.lock";

/// Files written by one command, relative to the output directory.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
    // Held for the life of the value; the OS drops the lock if the process dies.
    _lock: File,
}

impl OutputDir {
    /// Creates `dir` if needed and blocks until no other process holds it.
    pub fn open(dir: &Path) -> Result<Self, Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        lock.lock().map_err(|e| Error::io(&path, e))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            _lock: lock,
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), Error> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_are_recorded_once() {
        let tmp = tempfile::tempdir().unwrap();
        let mut out = OutputDir::open(&tmp.path().join("run")).unwrap();
        out.write("a.csv", "x\n1\n").unwrap();
        out.write("a.csv", "x\n2\n").unwrap();
        assert_eq!(out.files(), ["a.csv"]);
        assert!(out.dir().join(LOCK_FILE).exists());
    }

    #[test]
    fn lock_is_exclusive_while_held() {
        let tmp = tempfile::tempdir().unwrap();
        let held = OutputDir::open(tmp.path()).unwrap();
        let other = File::options()
            .write(true)
            .open(tmp.path().join(LOCK_FILE))
            .unwrap();
        assert!(other.try_lock().is_err());
        drop(held);
        assert!(other.try_lock().is_ok());
    }
}
