//! Trimming, rejection filtering and obliteration driven by external
//! surgical-frame scores and non-surgical region detections.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum run of consecutive surgical frames that marks the span edges.
pub const MIN_SURGICAL_RUN: usize = 3;
pub const DEFAULT_THETA: f64 = 0.5;
pub const DEFAULT_MAX_NONSURGICAL: f64 = 0.10;
pub const DEFAULT_MIN_CONF: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum CurateError {
    #[error("missing score for frame {index} of {video_id}")]
    IncompleteScores { video_id: String, index: usize },
    #[error("no run of {MIN_SURGICAL_RUN} consecutive surgical frames")]
    NoSurgicalSpan,
    #[error("invalid window {start}..={end} for {len} frames")]
    InvalidWindow { start: usize, end: usize, len: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate entry for frame {index} of {video_id}")]
    Duplicate { video_id: String, index: usize },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub video_id: String,
    pub index: usize,
    pub p_surgical: f64,
}

/// A detector box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
}

impl DetBox {
    fn validate(&self) -> Result<(), String> {
        let finite = [self.x, self.y, self.w, self.h, self.conf].iter().all(|v| v.is_finite());
        if !finite {
            Err("non-finite box field".into())
        } else if self.w <= 0.0 || self.h <= 0.0 {
            Err(format!("box width/height must be positive, got {}x{}", self.w, self.h))
        } else if !(0.0..=1.0).contains(&self.conf) {
            Err(format!("confidence {} outside [0, 1]", self.conf))
        } else {
            Ok(())
        }
    }

    /// Pixel range `[x0, x1) x [y0, y1)` covered by the box after clamping,
    /// or `None` when nothing of it lies inside the frame.
    pub fn clamped(&self, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
        let clamp = |v: f64, hi: u32| v.max(0.0).min(hi as f64) as u32;
        let x0 = clamp(self.x.floor(), width);
        let y0 = clamp(self.y.floor(), height);
        let x1 = clamp((self.x + self.w).ceil(), width);
        let y1 = clamp((self.y + self.h).ceil(), height);
        (x0 < x1 && y0 < y1).then_some((x0, y0, x1, y1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub video_id: String,
    pub index: usize,
    pub boxes: Vec<DetBox>,
}

/// Inclusive range of retained 1-fps frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimWindow {
    pub start: usize,
    pub end: usize,
}

impl TrimWindow {
    /// Number of frames in the window.
    pub fn frame_count(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.start..=self.end).contains(&index)
    }

    fn check(&self, len: usize) -> Result<(), CurateError> {
        if self.start <= self.end && self.end < len {
            Ok(())
        } else {
            Err(CurateError::InvalidWindow {
                start: self.start,
                end: self.end,
                len,
            })
        }
    }
}

/// `label[i] = p_surgical[i] >= theta` for `i < frame_count`.
pub fn binarize(video_id: &str, scores: &BTreeMap<usize, f64>, frame_count: usize, theta: f64) -> Result<Vec<bool>, CurateError> {
    (0..frame_count)
        .map(|index| {
            scores
                .get(&index)
                .map(|p| *p >= theta)
                .ok_or_else(|| CurateError::IncompleteScores {
                    video_id: video_id.to_string(),
                    index,
                })
        })
        .collect()
}

/// Start of the earliest and end of the latest run of at least three surgical labels.
pub fn find_surgical_span(labels: &[bool]) -> Result<TrimWindow, CurateError> {
    let mut start = None;
    let mut end = None;
    let mut run = 0usize;
    for (i, &surgical) in labels.iter().enumerate() {
        run = if surgical { run + 1 } else { 0 };
        if run >= MIN_SURGICAL_RUN {
            start.get_or_insert(i + 1 - MIN_SURGICAL_RUN);
            end = Some(i);
        }
    }
    match (start, end) {
        (Some(start), Some(end)) => Ok(TrimWindow { start, end }),
        _ => Err(CurateError::NoSurgicalSpan),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum FilterDecision {
    Accept { fraction: f64 },
    Reject { fraction: f64 },
}

impl FilterDecision {
    pub fn fraction(&self) -> f64 {
        match *self {
            FilterDecision::Accept { fraction } | FilterDecision::Reject { fraction } => fraction,
        }
    }

    pub fn is_accept(&self) -> bool {
        matches!(self, FilterDecision::Accept { .. })
    }
}

/// Rejects when the non-surgical fraction inside the window is strictly
/// greater than `max_nonsurgical`.
pub fn accept_after_trim(labels: &[bool], window: TrimWindow, max_nonsurgical: f64) -> Result<FilterDecision, CurateError> {
    window.check(labels.len())?;
    let span = &labels[window.start..=window.end];
    let nonsurgical = span.iter().filter(|s| !**s).count();
    let fraction = nonsurgical as f64 / span.len() as f64;
    Ok(if fraction > max_nonsurgical {
        FilterDecision::Reject { fraction }
    } else {
        FilterDecision::Accept { fraction }
    })
}

/// Frames of the window that are kept, plus the ones dropped as intraoperative
/// non-surgical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportSet {
    pub indices: Vec<usize>,
    pub excluded: Vec<usize>,
}

pub fn drop_nonsurgical_frames(labels: &[bool], window: TrimWindow) -> Result<ExportSet, CurateError> {
    window.check(labels.len())?;
    let (indices, excluded): (Vec<usize>, Vec<usize>) = (window.start..=window.end).partition(|i| labels[*i]);
    Ok(ExportSet { indices, excluded })
}

/// Blacks out every box with `conf >= min_conf`. Pixels outside all such boxes are untouched.
pub fn obliterate_regions(image: &RgbImage, boxes: &[DetBox], min_conf: f64) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = out.dimensions();
    for b in boxes.iter().filter(|b| b.conf >= min_conf) {
        if let Some((x0, y0, x1, y1)) = b.clamped(w, h) {
            for y in y0..y1 {
                for x in x0..x1 {
                    out.put_pixel(x, y, Rgb([0, 0, 0]));
                }
            }
        }
    }
    out
}

/// Per-video, per-frame surgical probabilities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    scores: BTreeMap<String, BTreeMap<usize, f64>>,
}

impl ScoreTable {
    pub fn insert(&mut self, score: FrameScore) -> Result<(), CurateError> {
        if !(0.0..=1.0).contains(&score.p_surgical) {
            return Err(CurateError::Parse {
                line: 0,
                message: format!("p_surgical {} outside [0, 1]", score.p_surgical),
            });
        }
        let entry = self.scores.entry(score.video_id.clone()).or_default();
        if entry.insert(score.index, score.p_surgical).is_some() {
            return Err(CurateError::Duplicate {
                video_id: score.video_id,
                index: score.index,
            });
        }
        Ok(())
    }

    pub fn video(&self, video_id: &str) -> Option<&BTreeMap<usize, f64>> {
        self.scores.get(video_id)
    }

    pub fn len(&self) -> usize {
        self.scores.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = FrameScore> + '_ {
        self.scores.iter().flat_map(|(v, m)| {
            m.iter().map(move |(i, p)| FrameScore {
                video_id: v.clone(),
                index: *i,
                p_surgical: *p,
            })
        })
    }

    /// Parses `scores.jsonl`: `{video_id, index, p_surgical}` per line.
    pub fn parse_jsonl(text: &str) -> Result<Self, CurateError> {
        let mut table = ScoreTable::default();
        for (line, score) in parse_lines::<FrameScore>(text)? {
            table.insert(score).map_err(|e| with_line(e, line))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, CurateError> {
        Self::parse_jsonl(&read_text(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        self.iter()
            .map(|s| serde_json::to_string(&s).expect("serializable") + "\n")
            .collect()
    }
}

/// Per-video, per-frame detector boxes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoxTable {
    boxes: BTreeMap<String, BTreeMap<usize, Vec<DetBox>>>,
}

impl BoxTable {
    pub fn insert(&mut self, set: BoxSet) -> Result<(), CurateError> {
        for b in &set.boxes {
            b.validate().map_err(|message| CurateError::Parse { line: 0, message })?;
        }
        let entry = self.boxes.entry(set.video_id.clone()).or_default();
        if entry.insert(set.index, set.boxes).is_some() {
            return Err(CurateError::Duplicate {
                video_id: set.video_id,
                index: set.index,
            });
        }
        Ok(())
    }

    /// Boxes for a frame; frames without an entry have none.
    pub fn frame(&self, video_id: &str, index: usize) -> &[DetBox] {
        self.boxes
            .get(video_id)
            .and_then(|m| m.get(&index))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Parses `boxes.jsonl`: `{video_id, index, boxes: [{x, y, w, h, conf}]}` per line.
    pub fn parse_jsonl(text: &str) -> Result<Self, CurateError> {
        let mut table = BoxTable::default();
        for (line, set) in parse_lines::<BoxSet>(text)? {
            table.insert(set).map_err(|e| with_line(e, line))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, CurateError> {
        Self::parse_jsonl(&read_text(path)?)
    }

    pub fn contains(&self, video_id: &str, index: usize) -> bool {
        self.boxes.get(video_id).is_some_and(|m| m.contains_key(&index))
    }

    pub fn iter(&self) -> impl Iterator<Item = BoxSet> + '_ {
        self.boxes.iter().flat_map(|(v, m)| {
            m.iter().map(move |(i, b)| BoxSet {
                video_id: v.clone(),
                index: *i,
                boxes: b.clone(),
            })
        })
    }

    pub fn to_jsonl(&self) -> String {
        self.iter()
            .map(|s| serde_json::to_string(&s).expect("serializable") + "\n")
            .collect()
    }
}

fn with_line(e: CurateError, line: usize) -> CurateError {
    match e {
        CurateError::Parse { message, .. } => CurateError::Parse { line, message },
        other => other,
    }
}

fn read_text(path: &Path) -> Result<String, CurateError> {
    let f = fs::File::open(path).map_err(|e| CurateError::Io(format!("{}: {e}", path.display())))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| CurateError::Io(e.to_string()))?);
        text.push('\n');
    }
    Ok(text)
}

fn parse_lines<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<(usize, T)>, CurateError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| CurateError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

/// Scores one encoded frame; implemented by the HTTP scoring client.
pub trait FrameScorer: Send + Sync {
    fn score(&self, image: &[u8]) -> Result<f64, String>;
}

/// Detects non-surgical regions in one encoded frame.
pub trait RegionDetector: Send + Sync {
    fn detect(&self, image: &[u8]) -> Result<Vec<DetBox>, String>;
}
