//! Append-only session logs: one newline-delimited JSON record per
//! committed change, synced before the change becomes visible.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teachloop::teaching::{Incoming, TeachingConfig};

pub const LOG_EXT: &str = "ndjson";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Create {
        schema: String,
        session_id: String,
        domain: String,
        config: TeachingConfig,
        at_ms: u64,
    },
    Input {
        input: Incoming,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        likert: Option<u8>,
        at_ms: u64,
    },
    /// A test was handed to the client.
    Delivered { event: usize, at_ms: u64 },
}

#[derive(Debug)]
pub struct LogWriter {
    file: File,
    path: PathBuf,
}

impl LogWriter {
    pub fn create(dir: &Path, session_id: &str) -> std::io::Result<Self> {
        let path = dir.join(format!("{session_id}.{LOG_EXT}"));
        let file = OpenOptions::new().create_new(true).append(true).open(&path)?;
        Ok(Self { file, path })
    }

    pub fn reopen(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, r: &Record) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(r).expect("records serialize");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

/// Reads a log. A torn final line (crash mid-write) is dropped; any other
/// unreadable line is an error.
pub fn read_log(path: &Path) -> Result<Vec<Record>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (k, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if k + 1 == lines.len() && !complete => break,
            Err(e) => return Err(format!("{} line {}: {e}", path.display(), k + 1)),
        }
    }
    Ok(out)
}

/// Every log file in `dir`, sorted by name.
pub fn log_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == LOG_EXT))
        .collect();
    v.sort();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_tail_is_dropped_but_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = LogWriter::create(dir.path(), "s").unwrap();
        w.append(&Record::Delivered { event: 1, at_ms: 5 }).unwrap();
        let p = w.path().to_path_buf();
        std::fs::write(&p, std::fs::read_to_string(&p).unwrap() + "{\"type\":\"deliv").unwrap();
        assert_eq!(read_log(&p).unwrap(), vec![Record::Delivered { event: 1, at_ms: 5 }]);
        std::fs::write(&p, "garbage\n{\"type\":\"delivered\",\"event\":1,\"at_ms\":5}\n").unwrap();
        assert!(read_log(&p).unwrap_err().contains("line 1"));
    }
}
