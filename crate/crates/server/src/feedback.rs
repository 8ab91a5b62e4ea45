//! Append-only JSON-lines store of user reports and revised replies.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use caire_core::corpus::Turn;
use caire_core::trainer::ImitationItem;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackKind {
    Report,
    Edit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub kind: FeedbackKind,
    pub session_id: String,
    pub turn_id: usize,
    pub persona: Vec<String>,
    /// The model's input history for the flagged turn, ending with the user
    /// message it answered.
    pub history: Vec<Turn>,
    pub original_reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_reply: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Single serialized appender. A record is flushed and synced to disk before
/// [`FeedbackLog::append`] returns.
pub struct FeedbackLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl FeedbackLog {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &FeedbackRecord) -> io::Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(&line)?;
        f.sync_data()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExportSummary {
    pub items: Vec<ImitationItem>,
    pub edits: usize,
    pub reports: usize,
    /// 1-based line numbers of unreadable lines.
    pub skipped_lines: Vec<usize>,
}

/// Converts edit records (newer than `since`, if given) into imitation items.
/// Reports are counted but not exported; unreadable lines are skipped with a
/// warning.
pub fn export_feedback_str(body: &str, since: Option<u64>) -> ExportSummary {
    let mut out = ExportSummary::default();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeedbackRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("feedback log line {}: skipped ({e})", i + 1);
                out.skipped_lines.push(i + 1);
                continue;
            }
        };
        if since.is_some_and(|t| rec.timestamp < t) {
            continue;
        }
        match (rec.kind, rec.revised_reply) {
            (FeedbackKind::Report, _) => out.reports += 1,
            (FeedbackKind::Edit, Some(revised)) if !revised.trim().is_empty() => {
                out.edits += 1;
                out.items.push(ImitationItem {
                    id: format!("{}:{}", rec.session_id, rec.turn_id),
                    persona: rec.persona,
                    history: rec.history,
                    revised_reply: revised,
                });
            }
            (FeedbackKind::Edit, _) => {
                log::warn!(
                    "feedback log line {}: edit without revised reply, skipped",
                    i + 1
                );
                out.skipped_lines.push(i + 1);
            }
        }
    }
    out
}

/// Reads a feedback log from disk; a missing file is an empty log.
pub fn export_feedback(path: impl AsRef<Path>, since: Option<u64>) -> io::Result<ExportSummary> {
    match fs::read_to_string(path) {
        Ok(body) => Ok(export_feedback_str(&body, since)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(ExportSummary::default()),
        Err(e) => Err(e),
    }
}
