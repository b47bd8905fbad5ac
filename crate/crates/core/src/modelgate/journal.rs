//! Append-only rollout journal for crash-resumable runs.
//!
//! One JSON object per line. The first line carries the run metadata; every
//! later line is a completed rollout record keyed by
//! `(query_id, rollout_index)`. Replay is idempotent: duplicate keys keep the
//! first occurrence.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GateError, RolloutRecord, RunMeta};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
enum JournalLine {
    Meta { meta: RunMeta },
    Record { record: RolloutRecord },
}

/// Replay a journal file: run metadata (if any) plus deduplicated records.
pub fn replay(path: &Path) -> Result<(Option<RunMeta>, Vec<RolloutRecord>), GateError> {
    if !path.exists() {
        return Ok((None, Vec::new()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut meta = None;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JournalLine = serde_json::from_str(&line).map_err(|e| {
            GateError::Journal(format!("{}:{}: {e}", path.display(), idx + 1))
        })?;
        match parsed {
            JournalLine::Meta { meta: m } => {
                if meta.is_none() {
                    meta = Some(m);
                }
            }
            JournalLine::Record { record } => {
                if seen.insert((record.query_id.clone(), record.rollout_index)) {
                    records.push(record);
                }
            }
        }
    }
    Ok((meta, records))
}

pub struct JournalWriter {
    writer: BufWriter<File>,
}

impl JournalWriter {
    /// Open the journal for appending, writing the meta line when the file
    /// is new or empty.
    pub fn open(path: &Path, meta: &RunMeta) -> Result<Self, GateError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let is_empty = file.metadata()?.len() == 0;
        let mut writer = BufWriter::new(file);
        if is_empty {
            let line = serde_json::to_string(&JournalLine::Meta { meta: meta.clone() })
                .map_err(|e| GateError::Journal(e.to_string()))?;
            writer.write_all(line.as_bytes())?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
        Ok(JournalWriter { writer })
    }

    pub fn append(&mut self, record: &RolloutRecord) -> Result<(), GateError> {
        let line = serde_json::to_string(&JournalLine::Record { record: record.clone() })
            .map_err(|e| GateError::Journal(e.to_string()))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }
}
