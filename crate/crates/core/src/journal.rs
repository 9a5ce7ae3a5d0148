//! Append-only search journal, one JSON record per line.
//!
//! Resuming re-runs the search from the start: every record the search
//! produces is checked against the existing line at the same position, and
//! evaluations already on disk are served from the journal instead of the
//! evaluator. Once the existing lines are used up, new records are appended.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Payload key excluded from replay comparison.
pub const WALL_CLOCK_KEY: &str = "wall_clock_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub record_type: String,
    pub iteration: usize,
    pub payload: Value,
}

impl Record {
    pub fn new(record_type: &str, iteration: usize, payload: impl Serialize) -> Result<Self> {
        Ok(Self { record_type: record_type.to_string(), iteration, payload: serde_json::to_value(payload)? })
    }

    fn comparable(&self) -> Self {
        let mut r = self.clone();
        if let Value::Object(m) = &mut r.payload {
            m.remove(WALL_CLOCK_KEY);
        }
        r
    }
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    out: File,
    replay: Vec<Record>,
    cursor: usize,
    cached: HashMap<u64, f64>,
}

impl Journal {
    /// Starts a new journal, replacing any file at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let out = File::create(path)?;
        Ok(Self { path: path.to_path_buf(), out, replay: Vec::new(), cursor: 0, cached: HashMap::new() })
    }

    /// Opens an existing journal for replay. A trailing line without a
    /// newline (an interrupted write) is discarded.
    pub fn resume(path: &Path) -> Result<Self> {
        let mut replay = Vec::new();
        let mut keep = 0u64;
        {
            let mut reader = BufReader::new(File::open(path)?);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 || !line.ends_with('\n') {
                    break;
                }
                let rec: Record = serde_json::from_str(line.trim_end())
                    .map_err(|e| Error::MalformedJournal { line: replay.len() + 1, reason: e.to_string() })?;
                replay.push(rec);
                keep += n as u64;
            }
        }
        let mut out = OpenOptions::new().write(true).open(path)?;
        out.set_len(keep)?;
        out.seek(SeekFrom::End(0))?;
        let cached = replay
            .iter()
            .filter(|r| r.record_type == "evaluation")
            .filter_map(|r| Some((r.payload.get("id")?.as_u64()?, r.payload.get("accuracy")?.as_f64()?)))
            .collect();
        log::info!("resuming journal {} with {} records", path.display(), replay.len());
        Ok(Self { path: path.to_path_buf(), out, replay, cursor: 0, cached })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// True while records are being checked against existing lines.
    pub fn replaying(&self) -> bool {
        self.cursor < self.replay.len()
    }

    /// Accuracy recorded for evaluation `id` by an earlier run.
    pub fn cached_accuracy(&self, id: u64) -> Option<f64> {
        self.cached.get(&id).copied()
    }

    pub fn append(&mut self, record: &Record) -> Result<()> {
        if let Some(old) = self.replay.get(self.cursor) {
            if old.comparable() != record.comparable() {
                return Err(Error::JournalMismatch { path: self.path.clone(), line: self.cursor + 1 });
            }
            self.cursor += 1;
            return Ok(());
        }
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.out.write_all(&line)?;
        self.out.flush()?;
        Ok(())
    }

    /// Fails if the journal holds records the replay never reached.
    pub fn finish(self) -> Result<()> {
        if self.replaying() {
            return Err(Error::JournalMismatch { path: self.path.clone(), line: self.cursor + 1 });
        }
        self.out.sync_all()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn replay_accepts_prefix_and_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let recs: Vec<Record> = (0..4)
            .map(|i| Record::new("evaluation", 1, json!({"id": i, "accuracy": 70.0 + i as f64})).unwrap())
            .collect();
        let mut j = Journal::create(&path).unwrap();
        for r in &recs[..2] {
            j.append(r).unwrap();
        }
        drop(j);
        let full_prefix = std::fs::read(&path).unwrap();
        // simulate a crash mid-write
        std::fs::write(&path, [full_prefix.as_slice(), b"{\"record_ty"].concat()).unwrap();

        let mut j = Journal::resume(&path).unwrap();
        assert_eq!(j.cached_accuracy(1), Some(71.0));
        assert_eq!(j.cached_accuracy(2), None);
        for r in &recs {
            j.append(r).unwrap();
        }
        j.finish().unwrap();

        let mut k = Journal::create(&dir.path().join("k.jsonl")).unwrap();
        for r in &recs {
            k.append(r).unwrap();
        }
        k.finish().unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("k.jsonl")).unwrap());
    }

    #[test]
    fn replay_detects_divergence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let mut j = Journal::create(&path).unwrap();
        j.append(&Record::new("header", 0, json!({"seed": 1})).unwrap()).unwrap();
        drop(j);
        let mut j = Journal::resume(&path).unwrap();
        let err = j.append(&Record::new("header", 0, json!({"seed": 2})).unwrap()).unwrap_err();
        assert!(matches!(err, Error::JournalMismatch { line: 1, .. }));
    }

    #[test]
    fn wall_clock_ignored_in_comparison() {
        let a = Record::new("evaluation", 1, json!({"id": 0, "wall_clock_ms": 5})).unwrap();
        let b = Record::new("evaluation", 1, json!({"id": 0, "wall_clock_ms": 9})).unwrap();
        assert_eq!(a.comparable(), b.comparable());
    }

    #[test]
    fn unreached_records_fail_finish() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let mut j = Journal::create(&path).unwrap();
        j.append(&Record::new("header", 0, json!({})).unwrap()).unwrap();
        drop(j);
        let j = Journal::resume(&path).unwrap();
        assert!(j.finish().is_err());
    }

    #[test]
    fn malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        std::fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(Journal::resume(&path), Err(Error::MalformedJournal { line: 1, .. })));
    }
}
