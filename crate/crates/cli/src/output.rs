//! Output directory handling. Every file written through [`OutDir`] is
//! recorded so reports can list their artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|source| CliError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, contents).map_err(|source| CliError::Io { path, source })?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(CliError::numeric)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Names written so far, in order, plus any names still to come.
    pub fn artifacts(&self, pending: &[&str]) -> Vec<String> {
        let mut all = self.written.clone();
        all.extend(pending.iter().map(|s| s.to_string()));
        all
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Wall time goes to its own file so `report.json` stays reproducible.
#[derive(Serialize)]
pub struct Timing {
    pub command: &'static str,
    pub wall_seconds: f64,
}
