//! Append-only session and judgment logs plus an atomic snapshot.
//!
//! Every append is flushed with `fsync` before it returns. A line that was
//! only partly written when the process died was never acknowledged, so
//! recovery truncates it away.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ServiceError, Session};
use crate::judgments::Judgment;

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

/// One acknowledged judgment. `seq` is strictly increasing across the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub seq: u64,
    pub received_at: DateTime<Utc>,
    pub condition: String,
    pub judgment: Judgment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Created { session: Session },
    Abandoned { session_id: String, at: DateTime<Utc> },
}

/// State covering a prefix of both logs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Snapshot {
    /// Number of session-log lines folded in.
    pub session_events: usize,
    /// Highest judgment sequence folded in; 0 when none.
    pub last_seq: u64,
    pub sessions: Vec<Session>,
}

/// Contents of a store directory after repair.
#[derive(Debug, Default)]
pub struct Recovered {
    pub snapshot: Option<Snapshot>,
    pub events: Vec<SessionEvent>,
    pub records: Vec<StoreRecord>,
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    sessions: File,
    judgments: File,
    session_lines: usize,
}

fn format_err(path: &Path, line: usize, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Store(format!("{}:{line}: {e}", path.display()))
}

/// Parse a JSONL log, truncating a torn final line in place.
fn read_log<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ServiceError> {
    let mut text = String::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_string(&mut text)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    }
    let complete = text.rfind('\n').map_or(0, |i| i + 1);
    if complete < text.len() {
        tracing::warn!(path = %path.display(), bytes = text.len() - complete, "dropping torn final line");
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(complete as u64)?;
        f.sync_all()?;
    }
    text[..complete]
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format_err(path, i + 1, e)))
        .collect()
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> Result<(), ServiceError> {
    let mut line = serde_json::to_string(value).map_err(|e| ServiceError::Store(e.to_string()))?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.sync_data()?;
    Ok(())
}

impl Store {
    /// Open (creating if needed) the store in `dir` and return everything
    /// already on disk.
    pub fn open(dir: impl Into<PathBuf>) -> Result<(Self, Recovered), ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let snapshot: Option<Snapshot> = match fs::read_to_string(&snapshot_path) {
            Ok(text) => Some(serde_json::from_str(&text).map_err(|e| format_err(&snapshot_path, 1, e))?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let events: Vec<SessionEvent> = read_log(&dir.join(SESSIONS_FILE))?;
        let records: Vec<StoreRecord> = read_log(&dir.join(JUDGMENTS_FILE))?;
        if let Some(w) = records.windows(2).find(|w| w[1].seq <= w[0].seq) {
            return Err(ServiceError::Store(format!(
                "judgment log sequence not increasing at {} -> {}",
                w[0].seq, w[1].seq
            )));
        }
        let open = |name: &str| OpenOptions::new().create(true).append(true).open(dir.join(name));
        let store = Store {
            sessions: open(SESSIONS_FILE)?,
            judgments: open(JUDGMENTS_FILE)?,
            session_lines: events.len(),
            dir,
        };
        Ok((
            store,
            Recovered {
                snapshot,
                events,
                records,
            },
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn session_lines(&self) -> usize {
        self.session_lines
    }

    pub fn append_event(&mut self, event: &SessionEvent) -> Result<(), ServiceError> {
        append_line(&mut self.sessions, event)?;
        self.session_lines += 1;
        Ok(())
    }

    pub fn append_record(&mut self, record: &StoreRecord) -> Result<(), ServiceError> {
        append_line(&mut self.judgments, record)
    }

    /// Replace the snapshot atomically (write, fsync, rename).
    pub fn write_snapshot(&self, snapshot: &Snapshot) -> Result<(), ServiceError> {
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let text = serde_json::to_string(snapshot).map_err(|e| ServiceError::Store(e.to_string()))?;
        let mut f = File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }
}
