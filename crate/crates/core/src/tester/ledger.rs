use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use super::report::CheckReport;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Append-only NDJSON file of check reports.
#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    write: Mutex<()>,
}

impl Ledger {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            write: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, report: &CheckReport) -> Result<(), LedgerError> {
        let line = serde_json::to_string(report).expect("report serializes");
        let _guard = self.write.lock().unwrap();
        self.open()?.write_all(format!("{line}\n").as_bytes())?;
        Ok(())
    }

    fn open(&self) -> std::io::Result<std::fs::File> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        OpenOptions::new().create(true).append(true).open(&self.path)
    }

    pub fn append_all<'a>(&self, reports: impl IntoIterator<Item = &'a CheckReport>) -> Result<(), LedgerError> {
        let mut text = String::new();
        for r in reports {
            text.push_str(&serde_json::to_string(r).expect("report serializes"));
            text.push('\n');
        }
        let _guard = self.write.lock().unwrap();
        self.open()?.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn load(&self) -> Result<Vec<CheckReport>, LedgerError> {
        load_ledger(&self.path)
    }
}

pub fn load_ledger(path: &Path) -> Result<Vec<CheckReport>, LedgerError> {
    let text = std::fs::read_to_string(path)?;
    parse_ledger(&text)
}

pub fn parse_ledger(text: &str) -> Result<Vec<CheckReport>, LedgerError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| LedgerError::Parse { line: i + 1, source }))
        .collect()
}
