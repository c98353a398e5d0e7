//! Output directory handling. A `FAILED` marker is written before any
//! artifact and removed only once every artifact is on disk, so an
//! interrupted or failed run never looks complete.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const FAILURE_MARKER: &str = "FAILED";

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let dir = Self { path: path.to_path_buf() };
        fs::write(dir.marker(), "incomplete\n").with_context(|| format!("writing marker in {}", path.display()))?;
        Ok(dir)
    }

    fn marker(&self) -> PathBuf {
        self.path.join(FAILURE_MARKER)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.path.join(name);
        art_core::formats::write_json(&path, value).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_with(&self, name: &str, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
        let path = self.path.join(name);
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Clear the marker on success; record the diagnostic in it otherwise.
    pub fn finish(&self, result: Result<()>) -> Result<()> {
        match result {
            Ok(()) => {
                fs::remove_file(self.marker()).with_context(|| format!("removing {}", self.marker().display()))
            }
            Err(e) => {
                let _ = fs::write(self.marker(), format!("{}\n", format!("{e:#}").replace('\n', " ")));
                Err(e)
            }
        }
    }
}
