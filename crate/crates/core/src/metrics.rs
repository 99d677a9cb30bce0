//! Evaluation metrics for phase recognition, multi-label tool presence and
//! segmentation.
//!
//! Percent-valued metrics (accuracies, F1, Jaccard) are in `[0, 100]`; mAP and
//! Dice are in `[0, 1]`. Anything skipped (empty videos, classes without
//! positives) is listed in the result rather than silently dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default relaxed-boundary window at 1 fps, in frames.
pub const RELAXED_WINDOW_FRAMES: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeError { context: String, left: usize, right: usize },
    #[error("no data to evaluate")]
    Empty,
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("class id {id} outside vocabulary of {classes}")]
    OutOfVocabulary { id: u32, classes: usize },
    #[error("non-finite score")]
    NonFinite,
    #[error("predictions line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("io: {0}")]
    Io(String),
}

/// A metric value plus what was left out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseVideo {
    pub video_id: String,
    pub gt: Vec<u32>,
    pub pred: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePredictionSet {
    /// Vocabulary size; ids are `0..classes`.
    pub classes: usize,
    pub videos: Vec<PhaseVideo>,
}

impl PhasePredictionSet {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for v in &self.videos {
            if v.gt.len() != v.pred.len() {
                return Err(MetricsError::ShapeError {
                    context: v.video_id.clone(),
                    left: v.gt.len(),
                    right: v.pred.len(),
                });
            }
            if let Some(id) = v.gt.iter().chain(&v.pred).find(|id| **id as usize >= self.classes) {
                return Err(MetricsError::OutOfVocabulary {
                    id: *id,
                    classes: self.classes,
                });
            }
        }
        Ok(())
    }

    fn checked(&self) -> Result<(), MetricsError> {
        self.validate()?;
        if self.videos.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(())
    }
}

fn percent(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

/// Per-video frame accuracy averaged uniformly over videos.
pub fn video_level_accuracy(set: &PhasePredictionSet) -> Result<Score, MetricsError> {
    set.checked()?;
    let mut skipped = Vec::new();
    let mut per_video = Vec::new();
    for v in &set.videos {
        if v.gt.is_empty() {
            skipped.push(format!("video {} has no frames", v.video_id));
            continue;
        }
        let correct = v.gt.iter().zip(&v.pred).filter(|(g, p)| g == p).count();
        per_video.push(percent(correct, v.gt.len()));
    }
    if per_video.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(Score {
        value: per_video.iter().sum::<f64>() / per_video.len() as f64,
        skipped,
    })
}

/// Accuracy pooled over all frames of all videos.
pub fn frame_accuracy(set: &PhasePredictionSet) -> Result<Score, MetricsError> {
    set.checked()?;
    let total: usize = set.videos.iter().map(|v| v.gt.len()).sum();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let correct = set
        .videos
        .iter()
        .flat_map(|v| v.gt.iter().zip(&v.pred))
        .filter(|(g, p)| g == p)
        .count();
    Ok(Score {
        value: percent(correct, total),
        skipped: Vec::new(),
    })
}

/// Unweighted mean of per-class F1 over pooled frames, over classes occurring
/// in ground truth or predictions.
pub fn macro_f1(set: &PhasePredictionSet) -> Result<Score, MetricsError> {
    set.checked()?;
    let mut counts: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
    for (g, p) in set.videos.iter().flat_map(|v| v.gt.iter().zip(&v.pred)) {
        if g == p {
            counts.entry(*g).or_default().0 += 1;
        } else {
            counts.entry(*p).or_default().1 += 1;
            counts.entry(*g).or_default().2 += 1;
        }
    }
    if counts.is_empty() {
        return Err(MetricsError::Empty);
    }
    let f1: Vec<f64> = counts
        .values()
        .map(|(tp, fp, fn_)| 100.0 * 2.0 * *tp as f64 / (2 * tp + fp + fn_) as f64)
        .collect();
    Ok(Score {
        value: f1.iter().sum::<f64>() / f1.len() as f64,
        skipped: Vec::new(),
    })
}

/// Per (video, class) Jaccard over frame index sets, averaged per class across
/// the videos where the class occurs in gt or prediction, then across classes.
pub fn jaccard_video_class(set: &PhasePredictionSet) -> Result<Score, MetricsError> {
    set.checked()?;
    let mut per_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for v in &set.videos {
        let mut inter: BTreeMap<u32, usize> = BTreeMap::new();
        let mut union: BTreeMap<u32, usize> = BTreeMap::new();
        for (g, p) in v.gt.iter().zip(&v.pred) {
            *union.entry(*g).or_default() += 1;
            if g == p {
                *inter.entry(*g).or_default() += 1;
            } else {
                *union.entry(*p).or_default() += 1;
            }
        }
        for (class, u) in union {
            let i = inter.get(&class).copied().unwrap_or(0);
            per_class.entry(class).or_default().push(percent(i, u));
        }
    }
    let skipped: Vec<String> = (0..set.classes as u32)
        .filter(|c| !per_class.contains_key(c))
        .map(|c| format!("class {c} absent from every video"))
        .collect();
    if per_class.is_empty() {
        return Err(MetricsError::Empty);
    }
    let class_means: Vec<f64> = per_class.values().map(|j| j.iter().sum::<f64>() / j.len() as f64).collect();
    Ok(Score {
        value: class_means.iter().sum::<f64>() / class_means.len() as f64,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedReport {
    pub window_frames: usize,
    pub accuracy: f64,
    pub jaccard: f64,
    pub strict_accuracy: f64,
    pub strict_jaccard: f64,
}

/// Predictions with transition slack applied: a frame in `[t - w, t + w)` of a
/// ground-truth transition at `t` whose prediction is either adjacent phase is
/// rewritten to its ground truth.
pub fn relax_predictions(set: &PhasePredictionSet, window_frames: usize) -> PhasePredictionSet {
    let videos = set
        .videos
        .iter()
        .map(|v| {
            let mut pred = v.pred.clone();
            let n = v.gt.len();
            for t in (1..n).filter(|t| v.gt[*t] != v.gt[*t - 1]) {
                let adjacent = [v.gt[t - 1], v.gt[t]];
                for i in t.saturating_sub(window_frames)..(t + window_frames).min(n) {
                    if adjacent.contains(&v.pred[i]) {
                        pred[i] = v.gt[i];
                    }
                }
            }
            PhaseVideo {
                video_id: v.video_id.clone(),
                gt: v.gt.clone(),
                pred,
            }
        })
        .collect();
    PhasePredictionSet {
        classes: set.classes,
        videos,
    }
}

/// Video-level accuracy and Jaccard, strict and with the relaxed boundary.
pub fn relaxed_phase_eval(set: &PhasePredictionSet, window_frames: usize) -> Result<RelaxedReport, MetricsError> {
    let relaxed = relax_predictions(set, window_frames);
    Ok(RelaxedReport {
        window_frames,
        accuracy: video_level_accuracy(&relaxed)?.value,
        jaccard: jaccard_video_class(&relaxed)?.value,
        strict_accuracy: video_level_accuracy(set)?.value,
        strict_jaccard: jaccard_video_class(set)?.value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    pub scores: Vec<f64>,
    pub gt: Vec<bool>,
}

/// Non-interpolated average precision: frames ranked by descending score,
/// ties kept in input order, precision summed at each positive's rank.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<Option<f64>, MetricsError> {
    if scores.len() != positives.len() {
        return Err(MetricsError::ShapeError {
            context: "average precision".into(),
            left: scores.len(),
            right: positives.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let total = positives.iter().filter(|p| **p).count();
    if total == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, i) in order.iter().enumerate() {
        if positives[*i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / total as f64))
}

/// Mean of per-class AP over classes with at least one positive frame.
pub fn mean_average_precision(frames: &[ScoredFrame]) -> Result<Score, MetricsError> {
    let classes = frames.first().map(|f| f.scores.len()).ok_or(MetricsError::Empty)?;
    for f in frames {
        for len in [f.scores.len(), f.gt.len()] {
            if len != classes {
                return Err(MetricsError::ShapeError {
                    context: "scored frame".into(),
                    left: classes,
                    right: len,
                });
            }
        }
    }
    let mut aps = Vec::new();
    let mut skipped = Vec::new();
    for c in 0..classes {
        let scores: Vec<f64> = frames.iter().map(|f| f.scores[c]).collect();
        let gt: Vec<bool> = frames.iter().map(|f| f.gt[c]).collect();
        match average_precision(&scores, &gt)? {
            Some(ap) => aps.push(ap),
            None => skipped.push(format!("class {c} has no positive frames")),
        }
    }
    if aps.is_empty() {
        return Err(MetricsError::Undefined("no class has a positive frame".into()));
    }
    Ok(Score {
        value: aps.iter().sum::<f64>() / aps.len() as f64,
        skipped,
    })
}

/// Per-frame label masks, one class id per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub pred: Vec<u32>,
    pub gt: Vec<u32>,
}

/// Dice per class accumulated over all frames' pixels, averaged over classes
/// present in ground truth (except `ignore`).
pub fn mean_dice(masks: &[MaskPair], ignore: Option<u32>) -> Result<Score, MetricsError> {
    let mut inter: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<u32, usize> = BTreeMap::new();
    let mut gt_count: BTreeMap<u32, usize> = BTreeMap::new();
    for (k, m) in masks.iter().enumerate() {
        if m.pred.len() != m.gt.len() {
            return Err(MetricsError::ShapeError {
                context: format!("mask {k}"),
                left: m.pred.len(),
                right: m.gt.len(),
            });
        }
        for (p, g) in m.pred.iter().zip(&m.gt) {
            *pred_count.entry(*p).or_default() += 1;
            *gt_count.entry(*g).or_default() += 1;
            if p == g {
                *inter.entry(*g).or_default() += 1;
            }
        }
    }
    let classes: Vec<u32> = gt_count.keys().copied().filter(|c| Some(*c) != ignore).collect();
    if classes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let skipped = pred_count
        .keys()
        .filter(|c| !gt_count.contains_key(c) && Some(**c) != ignore)
        .map(|c| format!("class {c} predicted but absent from ground truth"))
        .collect();
    let dice: Vec<f64> = classes
        .iter()
        .map(|c| {
            let i = inter.get(c).copied().unwrap_or(0);
            2.0 * i as f64 / (pred_count.get(c).copied().unwrap_or(0) + gt_count[c]) as f64
        })
        .collect();
    Ok(Score {
        value: dice.iter().sum::<f64>() / dice.len() as f64,
        skipped,
    })
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub video_id: String,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameEntry {
    Phase { gt: u32, pred: u32 },
    MultiLabel { scores: Vec<f64>, gt: Vec<bool> },
    Mask { pred_mask: Vec<u32>, gt_mask: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Phase(PhasePredictionSet),
    MultiLabel(Vec<ScoredFrame>),
    Mask(Vec<MaskPair>),
}

/// Parses `predictions.jsonl`; all frames must share one entry kind. The phase
/// vocabulary is `0..=max id`.
pub fn parse_predictions(text: &str) -> Result<Predictions, MetricsError> {
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine = serde_json::from_str(line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        lines.push((i + 1, parsed));
    }
    let kind = |f: &FrameEntry| std::mem::discriminant(f);
    let first = lines
        .iter()
        .flat_map(|(_, l)| l.frames.first())
        .next()
        .ok_or(MetricsError::Empty)?
        .clone();
    for (n, l) in &lines {
        if l.frames.iter().any(|f| kind(f) != kind(&first)) {
            return Err(MetricsError::Parse {
                line: *n,
                message: "mixed frame entry kinds".into(),
            });
        }
    }
    Ok(match first {
        FrameEntry::Phase { .. } => {
            let videos: Vec<PhaseVideo> = lines
                .into_iter()
                .map(|(_, l)| {
                    let (gt, pred) = l
                        .frames
                        .iter()
                        .map(|f| match f {
                            FrameEntry::Phase { gt, pred } => (*gt, *pred),
                            _ => unreachable!("kinds checked above"),
                        })
                        .unzip();
                    PhaseVideo {
                        video_id: l.video_id,
                        gt,
                        pred,
                    }
                })
                .collect();
            let classes = videos.iter().flat_map(|v| v.gt.iter().chain(&v.pred)).max().map_or(0, |m| *m as usize + 1);
            Predictions::Phase(PhasePredictionSet { classes, videos })
        }
        FrameEntry::MultiLabel { .. } => Predictions::MultiLabel(
            lines
                .into_iter()
                .flat_map(|(_, l)| l.frames)
                .map(|f| match f {
                    FrameEntry::MultiLabel { scores, gt } => ScoredFrame { scores, gt },
                    _ => unreachable!("kinds checked above"),
                })
                .collect(),
        ),
        FrameEntry::Mask { .. } => Predictions::Mask(
            lines
                .into_iter()
                .flat_map(|(_, l)| l.frames)
                .map(|f| match f {
                    FrameEntry::Mask { pred_mask, gt_mask } => MaskPair {
                        pred: pred_mask,
                        gt: gt_mask,
                    },
                    _ => unreachable!("kinds checked above"),
                })
                .collect(),
        ),
    })
}

pub fn load_predictions(path: &Path) -> Result<Predictions, MetricsError> {
    let text = fs::read_to_string(path).map_err(|e| MetricsError::Io(format!("{}: {e}", path.display())))?;
    parse_predictions(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    VideoAccuracy,
    FrameAccuracy,
    MacroF1,
    Jaccard,
    RelaxedAccuracy,
    RelaxedJaccard,
    Map,
    Dice,
}

impl MetricKind {
    pub const PHASE: [MetricKind; 6] = [
        MetricKind::VideoAccuracy,
        MetricKind::FrameAccuracy,
        MetricKind::MacroF1,
        MetricKind::Jaccard,
        MetricKind::RelaxedAccuracy,
        MetricKind::RelaxedJaccard,
    ];

    pub fn parse(name: &str) -> Result<Self, MetricsError> {
        Ok(match name {
            "accuracy" | "video_accuracy" => MetricKind::VideoAccuracy,
            "frame_accuracy" => MetricKind::FrameAccuracy,
            "f1" | "macro_f1" => MetricKind::MacroF1,
            "jaccard" => MetricKind::Jaccard,
            "relaxed_accuracy" => MetricKind::RelaxedAccuracy,
            "relaxed_jaccard" => MetricKind::RelaxedJaccard,
            "map" | "mAP" => MetricKind::Map,
            "dice" | "mdice" => MetricKind::Dice,
            other => return Err(MetricsError::UnknownMetric(other.into())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::VideoAccuracy => "video_accuracy",
            MetricKind::FrameAccuracy => "frame_accuracy",
            MetricKind::MacroF1 => "macro_f1",
            MetricKind::Jaccard => "jaccard",
            MetricKind::RelaxedAccuracy => "relaxed_accuracy",
            MetricKind::RelaxedJaccard => "relaxed_jaccard",
            MetricKind::Map => "map",
            MetricKind::Dice => "dice",
        }
    }

    fn unit(self) -> &'static str {
        match self {
            MetricKind::Map | MetricKind::Dice => "fraction",
            _ => "percent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub unit: String,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
}

/// Evaluates `metrics` on `preds`; an empty list means every metric that fits the data.
pub fn evaluate(preds: &Predictions, metrics: &[MetricKind]) -> Result<EvalReport, MetricsError> {
    let wanted: Vec<MetricKind> = if !metrics.is_empty() {
        metrics.to_vec()
    } else {
        match preds {
            Predictions::Phase(_) => MetricKind::PHASE.to_vec(),
            Predictions::MultiLabel(_) => vec![MetricKind::Map],
            Predictions::Mask(_) => vec![MetricKind::Dice],
        }
    };
    let mismatch = |m: MetricKind| MetricsError::Undefined(format!("{} does not apply to these predictions", m.name()));
    let mut rows = Vec::new();
    for m in wanted {
        let score = match (m, preds) {
            (MetricKind::VideoAccuracy, Predictions::Phase(s)) => video_level_accuracy(s)?,
            (MetricKind::FrameAccuracy, Predictions::Phase(s)) => frame_accuracy(s)?,
            (MetricKind::MacroF1, Predictions::Phase(s)) => macro_f1(s)?,
            (MetricKind::Jaccard, Predictions::Phase(s)) => jaccard_video_class(s)?,
            (MetricKind::RelaxedAccuracy, Predictions::Phase(s)) => video_level_accuracy(&relax_predictions(s, RELAXED_WINDOW_FRAMES))?,
            (MetricKind::RelaxedJaccard, Predictions::Phase(s)) => jaccard_video_class(&relax_predictions(s, RELAXED_WINDOW_FRAMES))?,
            (MetricKind::Map, Predictions::MultiLabel(f)) => mean_average_precision(f)?,
            (MetricKind::Dice, Predictions::Mask(masks)) => mean_dice(masks, None)?,
            _ => return Err(mismatch(m)),
        };
        rows.push(ReportRow {
            metric: m.name().into(),
            value: score.value,
            unit: m.unit().into(),
            skipped: score.skipped,
        });
    }
    Ok(EvalReport {
        rows,
        notes: vec![
            "jaccard: per class across videos, then across classes; no clipping".into(),
            format!("relaxed window: {RELAXED_WINDOW_FRAMES} frames at 1 fps"),
            "ap: non-interpolated, ties in input order".into(),
        ],
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<18} {:>10}  {}\n", "metric", "value", "unit");
        for r in &self.rows {
            let _ = writeln!(out, "{:<18} {:>10.4}  {}", r.metric, r.value, r.unit);
            for s in &r.skipped {
                let _ = writeln!(out, "  skipped: {s}");
            }
        }
        out
    }
}

/// Distinct classes in a set, for relabeling checks.
pub fn classes_present(set: &PhasePredictionSet) -> BTreeSet<u32> {
    set.videos.iter().flat_map(|v| v.gt.iter().chain(&v.pred)).copied().collect()
}
