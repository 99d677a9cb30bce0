//! Human review tasks and their append-only audit trail.
//!
//! One task exists per (video, gate). A task leaves `pending` exactly once;
//! later decisions are conflicts unless they replay the same idempotency key.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{ProcedureLabel, SurgeryType};
use crate::curate::TrimWindow;
use crate::manifest::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    StoryboardVerify,
    TrimVerify,
    LabelQc,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::StoryboardVerify, TaskKind::TrimVerify, TaskKind::LabelQc];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::StoryboardVerify => "storyboard_verify",
            TaskKind::TrimVerify => "trim_verify",
            TaskKind::LabelQc => "label_qc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Approved,
    Rejected,
    Corrected,
}

impl TaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Pending => "pending",
            TaskStatus::Approved => "approved",
            TaskStatus::Rejected => "rejected",
            TaskStatus::Corrected => "corrected",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TaskStatus::Pending, TaskStatus::Approved, TaskStatus::Rejected, TaskStatus::Corrected]
            .into_iter()
            .find(|k| k.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        self != TaskStatus::Pending
    }
}

/// What the reviewer needs to see for the task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskPayload {
    /// Storyboard image path relative to the workspace root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storyboard: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trim: Option<TrimWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<usize>,
    /// Per-frame surgical probability, for the trim inspector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_surgical: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<ProcedureLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Approve,
    Reject,
    Correct,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelCorrection {
    #[serde(default)]
    pub procedures: Option<std::collections::BTreeSet<String>>,
    #[serde(default)]
    pub surgery_type: Option<SurgeryType>,
}

/// Body of `POST /api/tasks/{id}/decision`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub action: Action,
    #[serde(default)]
    pub labels: Option<LabelCorrection>,
    #[serde(default)]
    pub trim: Option<TrimWindow>,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub actor: Option<String>,
    /// Resubmitting with the same key returns the recorded decision instead of a conflict.
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

impl DecisionRequest {
    pub fn approve() -> Self {
        DecisionRequest {
            action: Action::Approve,
            labels: None,
            trim: None,
            note: None,
            actor: None,
            idempotency_key: None,
        }
    }

    pub fn reject(note: impl Into<String>) -> Self {
        DecisionRequest {
            action: Action::Reject,
            note: Some(note.into()),
            ..Self::approve()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub action: Action,
    pub actor: String,
    pub at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trim: Option<TrimWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelCorrection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub video_id: String,
    pub kind: TaskKind,
    /// Creation order; queues list oldest first.
    pub seq: u64,
    /// Unix seconds.
    pub created_at: u64,
    pub status: TaskStatus,
    pub payload: TaskPayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionRecord>,
}

/// One line of `audit.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: u64,
    pub task_id: String,
    pub video_id: String,
    pub kind: TaskKind,
    pub action: Action,
    pub status: TaskStatus,
    pub actor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

#[derive(Debug, Error, PartialEq)]
pub enum ReviewError {
    #[error("task {0} not found")]
    NotFound(String),
    #[error("task {task_id} already decided ({status})")]
    Conflict { task_id: String, status: &'static str },
    #[error("invalid decision: {0}")]
    Invalid(String),
    #[error("review store io: {0}")]
    Io(String),
}

pub fn task_id(kind: TaskKind, video_id: &str) -> String {
    format!("{}-{}", kind.as_str(), video_id)
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// A recorded decision, or the original one when a request was replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct Decided {
    pub task: ReviewTask,
    pub replayed: bool,
}

/// All tasks, persisted as `tasks.jsonl`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskBook {
    tasks: BTreeMap<String, ReviewTask>,
}

impl TaskBook {
    pub fn get(&self, task_id: &str) -> Option<&ReviewTask> {
        self.tasks.get(task_id)
    }

    pub fn for_video(&self, kind: TaskKind, video_id: &str) -> Option<&ReviewTask> {
        self.tasks.get(&task_id(kind, video_id))
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReviewTask> {
        self.tasks.values()
    }

    /// Creates the task for `(kind, video_id)` unless it already exists.
    /// Returns whether a task was created.
    pub fn create(&mut self, kind: TaskKind, video_id: &str, payload: TaskPayload, now: u64) -> bool {
        let id = task_id(kind, video_id);
        if self.tasks.contains_key(&id) {
            return false;
        }
        let seq = self.tasks.values().map(|t| t.seq + 1).max().unwrap_or(0);
        self.tasks.insert(
            id.clone(),
            ReviewTask {
                task_id: id,
                video_id: video_id.to_string(),
                kind,
                seq,
                created_at: now,
                status: TaskStatus::Pending,
                payload,
                decision: None,
            },
        );
        true
    }

    /// Tasks matching the filters, oldest first.
    pub fn queue(&self, kind: Option<TaskKind>, status: Option<TaskStatus>) -> Vec<&ReviewTask> {
        let mut out: Vec<&ReviewTask> = self
            .tasks
            .values()
            .filter(|t| kind.map_or(true, |k| t.kind == k) && status.map_or(true, |s| t.status == s))
            .collect();
        out.sort_by_key(|t| t.seq);
        out
    }

    /// Checks a request against the task without changing anything. `Ok(Some)`
    /// means the request replays the recorded decision.
    pub fn check(&self, task_id: &str, req: &DecisionRequest) -> Result<Option<&ReviewTask>, ReviewError> {
        let task = self.tasks.get(task_id).ok_or_else(|| ReviewError::NotFound(task_id.to_string()))?;
        if task.status.is_terminal() {
            let recorded = task.decision.as_ref().and_then(|d| d.idempotency_key.as_deref());
            return match (recorded, req.idempotency_key.as_deref()) {
                (Some(a), Some(b)) if a == b => Ok(Some(task)),
                _ => Err(ReviewError::Conflict {
                    task_id: task_id.to_string(),
                    status: task.status.as_str(),
                }),
            };
        }
        match (task.kind, req.action) {
            (TaskKind::StoryboardVerify, Action::Correct) => {
                Err(ReviewError::Invalid("storyboard tasks take approve or reject".into()))
            }
            (TaskKind::TrimVerify, Action::Correct) if req.trim.is_none() => {
                Err(ReviewError::Invalid("trim correction needs a trim window".into()))
            }
            (TaskKind::LabelQc, Action::Correct) if req.labels.is_none() => {
                Err(ReviewError::Invalid("label correction needs labels".into()))
            }
            (TaskKind::StoryboardVerify | TaskKind::LabelQc, _) if req.trim.is_some() => {
                Err(ReviewError::Invalid("trim window only applies to trim tasks".into()))
            }
            (TaskKind::StoryboardVerify | TaskKind::TrimVerify, _) if req.labels.is_some() => {
                Err(ReviewError::Invalid("labels only apply to label tasks".into()))
            }
            (_, Action::Approve | Action::Reject) if req.trim.is_some() || req.labels.is_some() => {
                Err(ReviewError::Invalid("only corrections carry a payload".into()))
            }
            _ => Ok(None),
        }
    }

    /// Moves a pending task to `status` and returns the audit entry to append.
    pub fn record(
        &mut self,
        task_id: &str,
        req: &DecisionRequest,
        status: TaskStatus,
        actor: &str,
        now: u64,
        detail: serde_json::Value,
    ) -> Result<(ReviewTask, AuditEntry), ReviewError> {
        if let Some(replay) = self.check(task_id, req)? {
            return Err(ReviewError::Conflict {
                task_id: replay.task_id.clone(),
                status: replay.status.as_str(),
            });
        }
        if !status.is_terminal() {
            return Err(ReviewError::Invalid("decision must leave pending".into()));
        }
        let task = self.tasks.get_mut(task_id).expect("checked above");
        task.status = status;
        task.decision = Some(DecisionRecord {
            action: req.action,
            actor: actor.to_string(),
            at: now,
            note: req.note.clone(),
            idempotency_key: req.idempotency_key.clone(),
            trim: req.trim,
            labels: req.labels.clone(),
        });
        let entry = AuditEntry {
            at: now,
            task_id: task.task_id.clone(),
            video_id: task.video_id.clone(),
            kind: task.kind,
            action: req.action,
            status,
            actor: actor.to_string(),
            note: req.note.clone(),
            detail,
        };
        Ok((task.clone(), entry))
    }

    pub fn to_jsonl(&self) -> String {
        let mut tasks: Vec<&ReviewTask> = self.tasks.values().collect();
        tasks.sort_by_key(|t| t.seq);
        tasks
            .into_iter()
            .map(|t| serde_json::to_string(t).expect("task serializes") + "\n")
            .collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, ReviewError> {
        let mut book = TaskBook::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let t: ReviewTask =
                serde_json::from_str(line).map_err(|e| ReviewError::Io(format!("tasks line {}: {e}", i + 1)))?;
            book.tasks.insert(t.task_id.clone(), t);
        }
        Ok(book)
    }

    pub fn load(path: &Path) -> Result<Self, ReviewError> {
        match fs::read_to_string(path) {
            Ok(text) => Self::parse_jsonl(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(TaskBook::default()),
            Err(e) => Err(ReviewError::Io(e.to_string())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ReviewError> {
        write_atomic(path, self.to_jsonl().as_bytes()).map_err(|e| ReviewError::Io(e.to_string()))
    }
}

/// Appends entries to `audit.jsonl`; existing lines are never rewritten.
pub fn append_audit(path: &Path, entries: &[AuditEntry]) -> Result<(), ReviewError> {
    if entries.is_empty() {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ReviewError::Io(e.to_string()))?;
    }
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("audit entry serializes"));
        text.push('\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ReviewError::Io(e.to_string()))?;
    f.write_all(text.as_bytes()).map_err(|e| ReviewError::Io(e.to_string()))?;
    f.sync_data().map_err(|e| ReviewError::Io(e.to_string()))
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditEntry>, ReviewError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ReviewError::Io(e.to_string())),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ReviewError::Io(format!("audit line {}: {e}", i + 1))))
        .collect()
}
