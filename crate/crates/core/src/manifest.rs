//! Pipeline manifest: one [`VideoRecord`] per source video, persisted as JSON lines.
//!
//! Stage statuses only move forward (`pending -> passed` or `pending -> rejected`),
//! and once a stage rejects a video every later stage stays `pending` forever.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curate::TrimWindow;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingested,
    Storyboarded,
    VideoVerified,
    Trimmed,
    Filtered,
    Obliterated,
    Annotated,
    Exported,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingested,
        Stage::Storyboarded,
        Stage::VideoVerified,
        Stage::Trimmed,
        Stage::Filtered,
        Stage::Obliterated,
        Stage::Annotated,
        Stage::Exported,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingested => "ingested",
            Stage::Storyboarded => "storyboarded",
            Stage::VideoVerified => "video_verified",
            Stage::Trimmed => "trimmed",
            Stage::Filtered => "filtered",
            Stage::Obliterated => "obliterated",
            Stage::Annotated => "annotated",
            Stage::Exported => "exported",
        }
    }

    /// The stage that must have passed before this one may run.
    pub fn prerequisite(self) -> Option<Stage> {
        let pos = Stage::ALL.iter().position(|s| *s == self)?;
        pos.checked_sub(1).map(|p| Stage::ALL[p])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Passed,
    Rejected(String),
}

impl StageStatus {
    pub fn is_pending(&self) -> bool {
        matches!(self, StageStatus::Pending)
    }

    pub fn is_passed(&self) -> bool {
        matches!(self, StageStatus::Passed)
    }

    pub fn is_rejected(&self) -> bool {
        matches!(self, StageStatus::Rejected(_))
    }
}

/// A 1-fps frame index excluded from export, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub index: usize,
    pub reason: String,
}

pub const INTRAOPERATIVE_NON_SURGICAL: &str = "intraoperative non-surgical";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub source: String,
    pub title: String,
    pub native_fps: f64,
    pub duration_s: f64,
    pub width: u32,
    pub height: u32,
    pub stage_status: BTreeMap<Stage, StageStatus>,
    /// Number of 1-fps frames written to the frame store.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trim: Option<TrimWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonsurgical_fraction: Option<f64>,
    /// Frames kept for export, ascending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub export_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclusions: Vec<Exclusion>,
    /// Hash of the pipeline config that last processed this record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ManifestError {
    #[error("duplicate video id {0:?}")]
    DuplicateVideo(String),
    #[error("unknown video id {0:?}")]
    UnknownVideo(String),
    #[error("invalid transition for {video_id} at {stage}: {from:?} -> {to:?}")]
    InvalidTransition {
        video_id: String,
        stage: Stage,
        from: StageStatus,
        to: StageStatus,
    },
    #[error("{video_id}: stage {stage} cannot change after rejection at {rejected_at}")]
    AfterRejection {
        video_id: String,
        stage: Stage,
        rejected_at: Stage,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest io: {0}")]
    Io(String),
}

impl VideoRecord {
    /// A fresh record with every stage pending.
    pub fn new(video_id: impl Into<String>, source: impl Into<String>, title: impl Into<String>) -> Self {
        VideoRecord {
            video_id: video_id.into(),
            source: source.into(),
            title: title.into(),
            native_fps: 0.0,
            duration_s: 0.0,
            width: 0,
            height: 0,
            stage_status: Stage::ALL.iter().map(|s| (*s, StageStatus::Pending)).collect(),
            frame_count: None,
            trim: None,
            nonsurgical_fraction: None,
            export_indices: None,
            exclusions: Vec::new(),
            config_hash: None,
        }
    }

    pub fn status(&self, stage: Stage) -> &StageStatus {
        self.stage_status.get(&stage).unwrap_or(&StageStatus::Pending)
    }

    /// First stage (in pipeline order) that rejected this video.
    pub fn rejected_at(&self) -> Option<Stage> {
        Stage::ALL.iter().copied().find(|s| self.status(*s).is_rejected())
    }

    /// Number of 1-fps frames implied by the duration: `ceil(duration_s)`.
    pub fn expected_frame_count(&self) -> usize {
        self.duration_s.max(0.0).ceil() as usize
    }

    pub fn set_status(&mut self, stage: Stage, to: StageStatus) -> Result<(), ManifestError> {
        let from = self.status(stage).clone();
        if !from.is_pending() || to.is_pending() {
            return Err(ManifestError::InvalidTransition {
                video_id: self.video_id.clone(),
                stage,
                from,
                to,
            });
        }
        if let Some(rejected_at) = self.rejected_at() {
            if rejected_at < stage {
                return Err(ManifestError::AfterRejection {
                    video_id: self.video_id.clone(),
                    stage,
                    rejected_at,
                });
            }
        }
        self.stage_status.insert(stage, to);
        Ok(())
    }

    pub fn pass(&mut self, stage: Stage) -> Result<(), ManifestError> {
        self.set_status(stage, StageStatus::Passed)
    }

    pub fn reject(&mut self, stage: Stage, reason: impl Into<String>) -> Result<(), ManifestError> {
        self.set_status(stage, StageStatus::Rejected(reason.into()))
    }

    /// True when every stage up to and including `stage` has passed.
    pub fn passed_through(&self, stage: Stage) -> bool {
        Stage::ALL
            .iter()
            .take_while(|s| **s <= stage)
            .all(|s| self.status(*s).is_passed())
    }
}

/// All records of a pipeline run, keyed and iterated by `video_id`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    records: BTreeMap<String, VideoRecord>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, record: VideoRecord) -> Result<(), ManifestError> {
        if self.records.contains_key(&record.video_id) {
            return Err(ManifestError::DuplicateVideo(record.video_id));
        }
        self.records.insert(record.video_id.clone(), record);
        Ok(())
    }

    pub fn contains(&self, video_id: &str) -> bool {
        self.records.contains_key(video_id)
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.get(video_id)
    }

    pub fn get_mut(&mut self, video_id: &str) -> Result<&mut VideoRecord, ManifestError> {
        self.records
            .get_mut(video_id)
            .ok_or_else(|| ManifestError::UnknownVideo(video_id.to_string()))
    }

    pub fn records(&self) -> impl Iterator<Item = &VideoRecord> {
        self.records.values()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.keys().cloned().collect()
    }

    /// One JSON object per line, ordered by `video_id`.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for record in self.records.values() {
            out.push_str(&serde_json::to_string(record).expect("records are always serializable"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut manifest = Manifest::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: VideoRecord = serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            manifest.insert(record)?;
        }
        Ok(manifest)
    }

    /// Loads a manifest; a missing file is an empty manifest.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        if !path.exists() {
            return Ok(Manifest::new());
        }
        let file = fs::File::open(path).map_err(|e| ManifestError::Io(e.to_string()))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| ManifestError::Io(e.to_string()))?);
            text.push('\n');
        }
        Self::parse(&text)
    }

    /// Writes through a temp file and rename so readers never see a torn manifest.
    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        write_atomic(path, self.emit().as_bytes()).map_err(|e| ManifestError::Io(e.to_string()))
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}
