//! Stage orchestration over an on-disk workspace.
//!
//! Layout under the workspace root:
//!
//! ```text
//! pipeline.toml   manifest.jsonl  scores.jsonl  boxes.jsonl
//! labels.jsonl    tasks.jsonl     audit.jsonl
//! frames/         obliterated/    storyboards/  llm/  sources/
//! ```
//!
//! Human gates (storyboard, trim, label) create review tasks; the gated stage
//! stays pending until [`Pipeline::decide`] records a decision.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotate::{
    apply_qc_decision, propose_label, AnnotateError, CompletionClient, KeywordTable, LabelStore, QcDecision,
};
use crate::curate::{
    accept_after_trim, binarize, drop_nonsurgical_frames, find_surgical_span, obliterate_regions, BoxSet, BoxTable,
    CurateError, FilterDecision, FrameScore, FrameScorer, RegionDetector, ScoreTable, DEFAULT_MAX_NONSURGICAL,
    DEFAULT_MIN_CONF, DEFAULT_THETA,
};
use crate::frames::{FrameEncoding, FrameRef, FrameStore, StoreError};
use crate::manifest::{write_atomic, Exclusion, Manifest, ManifestError, Stage, VideoRecord, INTRAOPERATIVE_NON_SURGICAL};
use crate::review::{
    append_audit, now_unix, read_audit, task_id, Action, Decided, DecisionRequest, ReviewError, TaskBook, TaskKind,
    TaskPayload, TaskStatus,
};
use crate::storyboard::{compose_storyboard, select_keyframes, Storyboard, KEYFRAMES, REVIEW_GUIDANCE};
use crate::video::{ingest_video, sample_frames, AutoDecoder, IngestMetadata, VideoDecoder};

pub const CI_ACTOR: &str = "ci-bot";
pub const CONFIG_FILE: &str = "pipeline.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detect: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub theta: f64,
    pub max_nonsurgical: f64,
    pub min_conf: f64,
    pub tile_width: u32,
    pub tile_height: u32,
    pub seed: u64,
    /// Decide every new review task as approved, recorded as `ci-bot`.
    pub auto_approve: bool,
    pub encoding: FrameEncoding,
    pub endpoints: Endpoints,
    pub llm_model: String,
    pub timeout_s: u64,
    pub retries: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            theta: DEFAULT_THETA,
            max_nonsurgical: DEFAULT_MAX_NONSURGICAL,
            min_conf: DEFAULT_MIN_CONF,
            tile_width: 320,
            tile_height: 180,
            seed: 30,
            auto_approve: false,
            encoding: FrameEncoding::Png,
            endpoints: Endpoints::default(),
            llm_model: "gpt-4".into(),
            timeout_s: 30,
            retries: 3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let unit = |name: &str, v: f64| {
            if v.is_finite() && (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(PipelineError::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("theta", self.theta)?;
        unit("max_nonsurgical", self.max_nonsurgical)?;
        unit("min_conf", self.min_conf)?;
        if self.tile_width == 0 || self.tile_height == 0 {
            return Err(PipelineError::Config("tile size must be non-zero".into()));
        }
        if let FrameEncoding::Jpeg { quality } = self.encoding {
            if !(1..=100).contains(&quality) {
                return Err(PipelineError::Config(format!("jpeg quality {quality} outside 1..=100")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads `pipeline.toml` from the workspace, or the defaults if absent.
    pub fn load(root: &Path) -> Result<Self, PipelineError> {
        match fs::read_to_string(root.join(CONFIG_FILE)) {
            Ok(text) => Self::from_toml(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(PipelineError::Io(e.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{video_id}: stage {stage} needs {missing} to have passed")]
    StageOrder { video_id: String, stage: Stage, missing: Stage },
    #[error("stage {0} is decided by review, not run")]
    NotRunnable(Stage),
    #[error("unknown video {0:?}")]
    UnknownVideo(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Curate(#[from] CurateError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(String),
}

fn io_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", content = "detail", rename_all = "snake_case")]
pub enum Outcome {
    Passed,
    Rejected(String),
    AwaitingReview(String),
    /// Already present; nothing changed.
    Unchanged,
    /// Error that left the record untouched.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub outcomes: Vec<(String, Outcome)>,
}

impl StageReport {
    fn new(stage: Stage) -> Self {
        StageReport { stage, outcomes: Vec::new() }
    }

    pub fn count(&self, pred: impl Fn(&Outcome) -> bool) -> usize {
        self.outcomes.iter().filter(|(_, o)| pred(o)).count()
    }

    pub fn get(&self, video_id: &str) -> Option<&Outcome> {
        self.outcomes.iter().find(|(v, _)| v == video_id).map(|(_, o)| o)
    }
}

/// One line of a sources file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub source: String,
    pub title: String,
    #[serde(default)]
    pub video_id: Option<String>,
}

/// Sources are JSONL objects or `source<TAB>title` lines. `#` starts a comment.
pub fn parse_sources(text: &str) -> Result<Vec<SourceEntry>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let entry = if line.starts_with('{') {
            serde_json::from_str(line).map_err(|e| PipelineError::Io(format!("sources line {}: {e}", i + 1)))?
        } else {
            let (source, title) = line
                .split_once('\t')
                .ok_or_else(|| PipelineError::Io(format!("sources line {}: expected source<TAB>title", i + 1)))?;
            SourceEntry {
                source: source.trim().into(),
                title: title.trim().into(),
                video_id: None,
            }
        };
        out.push(entry);
    }
    Ok(out)
}

pub fn is_url(source: &str) -> bool {
    source.starts_with("http://") || source.starts_with("https://")
}

/// Video id for a source: explicit, else the file stem of the path or URL.
pub fn source_video_id(entry: &SourceEntry) -> Option<String> {
    if let Some(id) = &entry.video_id {
        return Some(id.clone());
    }
    let tail = entry.source.split(['?', '#']).next()?.rsplit('/').next()?;
    let stem = Path::new(tail).file_stem()?.to_str()?;
    (!stem.is_empty()).then(|| stem.to_string())
}

/// Decoder and LLM used by the stages that need them.
#[derive(Clone, Copy)]
pub struct Services<'a> {
    pub decoder: &'a dyn VideoDecoder,
    pub llm: Option<&'a dyn CompletionClient>,
}

impl Default for Services<'_> {
    fn default() -> Self {
        Services {
            decoder: &AutoDecoder,
            llm: None,
        }
    }
}

/// Export summary written as `stats.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportStats {
    pub videos: usize,
    pub frames: usize,
    /// Videos per procedure.
    pub per_procedure: BTreeMap<String, usize>,
    pub per_surgery_type: BTreeMap<String, usize>,
    pub frames_per_video: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedVideo {
    pub video_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportReport {
    pub stats: ExportStats,
    pub excluded: Vec<ExcludedVideo>,
}

pub struct Pipeline {
    root: PathBuf,
    config: PipelineConfig,
    config_hash: String,
    keywords: KeywordTable,
    manifest: Manifest,
    tasks: TaskBook,
    labels: LabelStore,
    frames: FrameStore,
    obliterated: FrameStore,
}

impl Pipeline {
    /// Opens (creating if needed) a workspace with the given config and writes
    /// the config to `pipeline.toml`.
    pub fn open(root: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err)?;
        write_atomic(&root.join(CONFIG_FILE), config.to_toml().as_bytes()).map_err(io_err)?;
        let manifest = match Manifest::load(&root.join("manifest.jsonl")) {
            Ok(m) => m,
            Err(ManifestError::Io(_)) if !root.join("manifest.jsonl").exists() => Manifest::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Pipeline {
            tasks: TaskBook::load(&root.join("tasks.jsonl"))?,
            labels: LabelStore::load(&root.join("labels.jsonl"))?,
            frames: FrameStore::with_encoding(root.join("frames"), config.encoding)?,
            obliterated: FrameStore::with_encoding(root.join("obliterated"), config.encoding)?,
            config_hash: config.hash(),
            keywords: KeywordTable::builtin(),
            manifest,
            config,
            root,
        })
    }

    /// Opens with the workspace's saved config.
    pub fn open_existing(root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let root = root.into();
        let config = PipelineConfig::load(&root)?;
        Self::open(root, config)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn tasks(&self) -> &TaskBook {
        &self.tasks
    }

    pub fn labels(&self) -> &LabelStore {
        &self.labels
    }

    pub fn frames(&self) -> &FrameStore {
        &self.frames
    }

    pub fn obliterated(&self) -> &FrameStore {
        &self.obliterated
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn audit(&self) -> Result<Vec<crate::review::AuditEntry>, PipelineError> {
        Ok(read_audit(&self.path("audit.jsonl"))?)
    }

    fn persist(&self) -> Result<(), PipelineError> {
        self.manifest.save(&self.path("manifest.jsonl"))?;
        self.tasks.save(&self.path("tasks.jsonl"))?;
        self.labels.save(&self.path("labels.jsonl"))?;
        Ok(())
    }

    pub fn scores(&self) -> Result<ScoreTable, PipelineError> {
        let path = self.path("scores.jsonl");
        if !path.exists() {
            return Ok(ScoreTable::default());
        }
        Ok(ScoreTable::load(&path)?)
    }

    pub fn boxes(&self) -> Result<BoxTable, PipelineError> {
        let path = self.path("boxes.jsonl");
        if !path.exists() {
            return Ok(BoxTable::default());
        }
        Ok(BoxTable::load(&path)?)
    }

    /// Local file for a record: the path itself, or the download under `sources/`
    /// for URL sources.
    pub fn source_path(&self, record: &VideoRecord) -> PathBuf {
        if !is_url(&record.source) {
            return PathBuf::from(&record.source);
        }
        let dir = self.path("sources");
        fs::read_dir(&dir)
            .ok()
            .and_then(|entries| {
                entries.filter_map(|e| e.ok()).map(|e| e.path()).find(|p| {
                    p.file_stem().and_then(|s| s.to_str()) == Some(record.video_id.as_str())
                })
            })
            .unwrap_or_else(|| dir.join(&record.video_id))
    }

    /// Registers local sources. URL sources must already be downloaded to
    /// `sources/<video_id>.<ext>`.
    pub fn ingest(&mut self, sources: &[SourceEntry], decoder: &dyn VideoDecoder) -> Result<StageReport, PipelineError> {
        let mut report = StageReport::new(Stage::Ingested);
        for entry in sources {
            let Some(video_id) = source_video_id(entry) else {
                report.outcomes.push((entry.source.clone(), Outcome::Failed("cannot derive a video id".into())));
                continue;
            };
            if let Some(existing) = self.manifest.get(&video_id) {
                let outcome = if existing.source == entry.source {
                    Outcome::Unchanged
                } else {
                    Outcome::Failed(format!("video id {video_id:?} already used by {}", existing.source))
                };
                report.outcomes.push((video_id, outcome));
                continue;
            }
            let (path, label) = if is_url(&entry.source) {
                let probe = VideoRecord::new(video_id.clone(), entry.source.clone(), "");
                (self.source_path(&probe), Some(entry.source.clone()))
            } else {
                (PathBuf::from(&entry.source), None)
            };
            let meta = IngestMetadata {
                video_id: Some(video_id.clone()),
                title: entry.title.clone(),
                source_label: label,
            };
            match ingest_video(&mut self.manifest, &path, meta, decoder) {
                Ok(_) => {
                    self.manifest.get_mut(&video_id)?.config_hash = Some(self.config_hash.clone());
                    report.outcomes.push((video_id, Outcome::Passed));
                }
                Err(e) => report.outcomes.push((video_id, Outcome::Failed(e.to_string()))),
            }
        }
        self.persist()?;
        Ok(report)
    }

    /// Merges scores into `scores.jsonl`. Re-importing identical values is a no-op;
    /// a different value for a scored frame is an error and nothing is written.
    pub fn import_scores(&mut self, incoming: impl IntoIterator<Item = FrameScore>) -> Result<usize, PipelineError> {
        let mut table = self.scores()?;
        let mut added = 0;
        for s in incoming {
            match table.video(&s.video_id).and_then(|m| m.get(&s.index)) {
                Some(p) if *p == s.p_surgical => {}
                Some(_) => {
                    return Err(CurateError::Duplicate {
                        video_id: s.video_id,
                        index: s.index,
                    }
                    .into())
                }
                None => {
                    table.insert(s)?;
                    added += 1;
                }
            }
        }
        write_atomic(&self.path("scores.jsonl"), table.to_jsonl().as_bytes()).map_err(io_err)?;
        Ok(added)
    }

    /// Merges detector boxes into `boxes.jsonl`, with the same rules as scores.
    pub fn import_boxes(&mut self, incoming: impl IntoIterator<Item = BoxSet>) -> Result<usize, PipelineError> {
        let mut table = self.boxes()?;
        let mut added = 0;
        for set in incoming {
            if table.contains(&set.video_id, set.index) {
                if table.frame(&set.video_id, set.index) != set.boxes.as_slice() {
                    return Err(CurateError::Duplicate {
                        video_id: set.video_id,
                        index: set.index,
                    }
                    .into());
                }
                continue;
            }
            table.insert(set)?;
            added += 1;
        }
        write_atomic(&self.path("boxes.jsonl"), table.to_jsonl().as_bytes()).map_err(io_err)?;
        Ok(added)
    }

    /// Scores every unscored frame of sampled videos with `scorer`.
    pub fn score_frames(&mut self, scorer: &dyn FrameScorer) -> Result<StageReport, PipelineError> {
        let table = self.scores()?;
        let mut report = StageReport::new(Stage::Trimmed);
        let mut new_scores = Vec::new();
        for r in self.manifest.records() {
            let Some(n) = r.frame_count else { continue };
            let have = table.video(&r.video_id);
            let missing: Vec<usize> = (0..n).filter(|i| have.map_or(true, |m| !m.contains_key(i))).collect();
            if missing.is_empty() {
                continue;
            }
            let scored: Result<Vec<FrameScore>, String> = missing
                .par_iter()
                .map(|&i| {
                    let bytes = self.frames.get(&FrameRef::new(r.video_id.clone(), i)).map_err(|e| e.to_string())?;
                    let p = scorer.score(&bytes)?;
                    Ok(FrameScore {
                        video_id: r.video_id.clone(),
                        index: i,
                        p_surgical: p,
                    })
                })
                .collect();
            match scored {
                Ok(s) => {
                    new_scores.extend(s);
                    report.outcomes.push((r.video_id.clone(), Outcome::Passed));
                }
                Err(e) => report.outcomes.push((r.video_id.clone(), Outcome::Failed(e))),
            }
        }
        self.import_scores(new_scores)?;
        Ok(report)
    }

    /// Runs the detector on every export frame without a box entry.
    pub fn detect_regions(&mut self, detector: &dyn RegionDetector) -> Result<StageReport, PipelineError> {
        let table = self.boxes()?;
        let mut report = StageReport::new(Stage::Obliterated);
        let mut new_sets = Vec::new();
        for r in self.manifest.records() {
            let Some(indices) = &r.export_indices else { continue };
            let missing: Vec<usize> = indices.iter().copied().filter(|i| !table.contains(&r.video_id, *i)).collect();
            if missing.is_empty() {
                continue;
            }
            let detected: Result<Vec<BoxSet>, String> = missing
                .par_iter()
                .map(|&i| {
                    let bytes = self.frames.get(&FrameRef::new(r.video_id.clone(), i)).map_err(|e| e.to_string())?;
                    Ok(BoxSet {
                        video_id: r.video_id.clone(),
                        index: i,
                        boxes: detector.detect(&bytes)?,
                    })
                })
                .collect();
            match detected {
                Ok(s) => {
                    new_sets.extend(s);
                    report.outcomes.push((r.video_id.clone(), Outcome::Passed));
                }
                Err(e) => report.outcomes.push((r.video_id.clone(), Outcome::Failed(e))),
            }
        }
        self.import_boxes(new_sets)?;
        Ok(report)
    }

    /// Videos the stage should process: explicit targets must have the
    /// prerequisite passed; otherwise every video with it passed and the stage pending.
    fn targets(&self, stage: Stage, targets: Option<&[String]>) -> Result<Vec<String>, PipelineError> {
        let prereq = stage.prerequisite().expect("runnable stages have a prerequisite");
        let ready = |r: &VideoRecord| r.passed_through(prereq) && r.status(stage).is_pending();
        match targets {
            None => Ok(self.manifest.records().filter(|r| ready(r)).map(|r| r.video_id.clone()).collect()),
            Some(ids) => {
                let mut out = Vec::new();
                for id in ids {
                    let r = self.manifest.get(id).ok_or_else(|| PipelineError::UnknownVideo(id.clone()))?;
                    if !r.passed_through(prereq) {
                        return Err(PipelineError::StageOrder {
                            video_id: id.clone(),
                            stage,
                            missing: prereq,
                        });
                    }
                    if r.status(stage).is_pending() {
                        out.push(id.clone());
                    }
                }
                Ok(out)
            }
        }
    }

    /// Runs one stage over its targets. Per-video failures land in the report.
    pub fn run_stage(
        &mut self,
        stage: Stage,
        targets: Option<&[String]>,
        services: Services<'_>,
    ) -> Result<StageReport, PipelineError> {
        let ids = match stage {
            Stage::Ingested | Stage::VideoVerified | Stage::Exported => return Err(PipelineError::NotRunnable(stage)),
            _ => self.targets(stage, targets)?,
        };
        let mut report = StageReport::new(stage);
        match stage {
            Stage::Storyboarded => self.run_storyboard(&ids, services.decoder, &mut report)?,
            Stage::Trimmed => self.run_trim(&ids, &mut report)?,
            Stage::Filtered => self.run_filter(&ids, &mut report)?,
            Stage::Obliterated => self.run_obliterate(&ids, &mut report)?,
            Stage::Annotated => self.run_annotate(&ids, services.llm, &mut report)?,
            _ => unreachable!(),
        }
        self.persist()?;
        let created: Vec<String> = report
            .outcomes
            .iter()
            .filter_map(|(_, o)| match o {
                Outcome::AwaitingReview(t) => Some(t.clone()),
                _ => None,
            })
            .collect();
        if self.config.auto_approve {
            for t in created {
                let video = self.tasks.get(&t).map(|t| t.video_id.clone()).unwrap_or_default();
                let outcome = match self.decide_as(&t, &DecisionRequest::approve(), CI_ACTOR) {
                    Ok(d) if d.task.status == TaskStatus::Rejected => Outcome::Rejected(t.clone()),
                    Ok(_) => Outcome::Passed,
                    Err(_) => Outcome::AwaitingReview(t.clone()),
                };
                if let Some(slot) = report.outcomes.iter_mut().find(|(v, _)| *v == video) {
                    slot.1 = outcome;
                }
            }
        }
        Ok(report)
    }

    fn stamp(&mut self, video_id: &str) -> Result<&mut VideoRecord, PipelineError> {
        let hash = self.config_hash.clone();
        let r = self.manifest.get_mut(video_id)?;
        r.config_hash = Some(hash);
        Ok(r)
    }

    fn open_task(&mut self, kind: TaskKind, video_id: &str, payload: TaskPayload) -> Outcome {
        self.tasks.create(kind, video_id, payload, now_unix());
        Outcome::AwaitingReview(task_id(kind, video_id))
    }

    fn run_storyboard(&mut self, ids: &[String], decoder: &dyn VideoDecoder, report: &mut StageReport) -> Result<(), PipelineError> {
        let pending: Vec<&String> = ids
            .iter()
            .filter(|id| self.tasks.for_video(TaskKind::StoryboardVerify, id).is_none())
            .collect();
        let (tw, th) = (self.config.tile_width, self.config.tile_height);
        let results: Vec<(String, Result<(usize, String), String>)> = pending
            .par_iter()
            .map(|id| {
                let record = self.manifest.get(id).expect("target exists");
                let path = self.source_path(record);
                let res = sample_frames(record, &path, decoder, &self.frames)
                    .map_err(|e| e.to_string())
                    .and_then(|frames| {
                        let keys = select_keyframes(&frames, KEYFRAMES).map_err(|e| e.to_string())?;
                        let board = compose_storyboard(&keys, &self.frames, tw, th).map_err(|e| e.to_string())?;
                        let saved = board.save(&self.root).map_err(|e| e.to_string())?;
                        let rel = saved.strip_prefix(&self.root).unwrap_or(&saved).to_string_lossy().into_owned();
                        Ok((frames.len(), rel))
                    });
                ((*id).clone(), res)
            })
            .collect();
        for (id, res) in results {
            match res {
                Ok((n, rel)) => {
                    let r = self.stamp(&id)?;
                    r.frame_count = Some(n);
                    r.pass(Stage::Storyboarded)?;
                    let payload = TaskPayload {
                        storyboard: Some(rel),
                        guidance: Some(REVIEW_GUIDANCE.into()),
                        frame_count: Some(n),
                        title: Some(r.title.clone()),
                        ..Default::default()
                    };
                    let outcome = self.open_task(TaskKind::StoryboardVerify, &id, payload);
                    report.outcomes.push((id, outcome));
                }
                Err(e) => {
                    self.stamp(&id)?.reject(Stage::Storyboarded, e.clone())?;
                    report.outcomes.push((id, Outcome::Rejected(e)));
                }
            }
        }
        Ok(())
    }

    fn labels_for(&self, scores: &ScoreTable, record: &VideoRecord) -> Result<Vec<bool>, CurateError> {
        let n = record.frame_count.unwrap_or(0);
        let empty = BTreeMap::new();
        binarize(&record.video_id, scores.video(&record.video_id).unwrap_or(&empty), n, self.config.theta)
    }

    fn run_trim(&mut self, ids: &[String], report: &mut StageReport) -> Result<(), PipelineError> {
        let scores = self.scores()?;
        for id in ids {
            if self.tasks.for_video(TaskKind::TrimVerify, id).is_some() {
                continue;
            }
            let record = self.manifest.get(id).expect("target exists");
            let window = self.labels_for(&scores, record).and_then(|l| find_surgical_span(&l));
            match window {
                Ok(w) => {
                    let n = record.frame_count.unwrap_or(0);
                    let p = scores.video(id).map(|m| (0..n).map(|i| m[&i]).collect());
                    self.stamp(id)?.trim = Some(w);
                    let payload = TaskPayload {
                        trim: Some(w),
                        frame_count: Some(n),
                        p_surgical: p,
                        ..Default::default()
                    };
                    let outcome = self.open_task(TaskKind::TrimVerify, id, payload);
                    report.outcomes.push((id.clone(), outcome));
                }
                Err(e) => {
                    let reason = e.to_string();
                    self.stamp(id)?.reject(Stage::Trimmed, reason.clone())?;
                    report.outcomes.push((id.clone(), Outcome::Rejected(reason)));
                }
            }
        }
        Ok(())
    }

    fn run_filter(&mut self, ids: &[String], report: &mut StageReport) -> Result<(), PipelineError> {
        let scores = self.scores()?;
        let max = self.config.max_nonsurgical;
        for id in ids {
            let record = self.manifest.get(id).expect("target exists");
            let Some(window) = record.trim else {
                report.outcomes.push((id.clone(), Outcome::Failed("no trim window".into())));
                continue;
            };
            let decided = self.labels_for(&scores, record).and_then(|labels| {
                let decision = accept_after_trim(&labels, window, max)?;
                let set = drop_nonsurgical_frames(&labels, window)?;
                Ok((decision, set))
            });
            let r = self.stamp(id)?;
            let outcome = match decided {
                Ok((FilterDecision::Accept { fraction: f }, set)) => {
                    r.nonsurgical_fraction = Some(f);
                    r.exclusions = set
                        .excluded
                        .iter()
                        .map(|i| Exclusion {
                            index: *i,
                            reason: INTRAOPERATIVE_NON_SURGICAL.into(),
                        })
                        .collect();
                    r.export_indices = Some(set.indices);
                    r.pass(Stage::Filtered)?;
                    Outcome::Passed
                }
                Ok((FilterDecision::Reject { fraction: f }, _)) => {
                    r.nonsurgical_fraction = Some(f);
                    let reason = format!("non-surgical fraction {f:.4} exceeds {max}");
                    r.reject(Stage::Filtered, reason.clone())?;
                    Outcome::Rejected(reason)
                }
                Err(e) => {
                    r.reject(Stage::Filtered, e.to_string())?;
                    Outcome::Rejected(e.to_string())
                }
            };
            report.outcomes.push((id.clone(), outcome));
        }
        Ok(())
    }

    fn run_obliterate(&mut self, ids: &[String], report: &mut StageReport) -> Result<(), PipelineError> {
        let boxes = self.boxes()?;
        let min_conf = self.config.min_conf;
        let results: Vec<(String, Result<(), String>)> = ids
            .par_iter()
            .map(|id| {
                let record = self.manifest.get(id).expect("target exists");
                let indices = record.export_indices.clone().unwrap_or_default();
                let res = indices.iter().try_for_each(|&i| {
                    let f = FrameRef::new(id.clone(), i);
                    let img = self.frames.get_image(&f).map_err(|e| e.to_string())?;
                    let out = obliterate_regions(&img, boxes.frame(id, i), min_conf);
                    self.obliterated.put_image(&f, &out).map_err(|e| e.to_string())
                });
                (id.clone(), res)
            })
            .collect();
        for (id, res) in results {
            let outcome = match res {
                Ok(()) => {
                    self.stamp(&id)?.pass(Stage::Obliterated)?;
                    Outcome::Passed
                }
                Err(e) => Outcome::Failed(e),
            };
            report.outcomes.push((id, outcome));
        }
        Ok(())
    }

    fn run_annotate(
        &mut self,
        ids: &[String],
        llm: Option<&dyn CompletionClient>,
        report: &mut StageReport,
    ) -> Result<(), PipelineError> {
        for id in ids {
            if self.tasks.for_video(TaskKind::LabelQc, id).is_some() {
                continue;
            }
            let title = self.manifest.get(id).expect("target exists").title.clone();
            match propose_label(id, &title, &self.keywords, llm) {
                Ok((label, transcript)) => {
                    if let Some(t) = transcript {
                        let json = serde_json::to_vec_pretty(&t).expect("transcript serializes");
                        write_atomic(&self.path("llm").join(format!("{id}.json")), &json).map_err(io_err)?;
                    }
                    let payload = TaskPayload {
                        labels: Some(label.clone()),
                        title: Some(title),
                        ..Default::default()
                    };
                    self.labels.upsert(label);
                    self.stamp(id)?;
                    let outcome = self.open_task(TaskKind::LabelQc, id, payload);
                    report.outcomes.push((id.clone(), outcome));
                }
                Err(e) => {
                    self.stamp(id)?.reject(Stage::Annotated, e.to_string())?;
                    report.outcomes.push((id.clone(), Outcome::Rejected(e.to_string())));
                }
            }
        }
        Ok(())
    }

    /// Records a reviewer decision with the request's actor (default "reviewer").
    pub fn decide(&mut self, task_id: &str, req: &DecisionRequest) -> Result<Decided, PipelineError> {
        let actor = req.actor.clone().unwrap_or_else(|| "reviewer".into());
        self.decide_as(task_id, req, &actor)
    }

    /// Applies a decision to task, manifest and labels together, then appends
    /// the audit entry. Nothing changes if any part is invalid.
    pub fn decide_as(&mut self, task_id: &str, req: &DecisionRequest, actor: &str) -> Result<Decided, PipelineError> {
        if let Some(task) = self.tasks.check(task_id, req)? {
            return Ok(Decided {
                task: task.clone(),
                replayed: true,
            });
        }
        let task = self.tasks.get(task_id).expect("checked").clone();
        let mut record = self
            .manifest
            .get(&task.video_id)
            .cloned()
            .ok_or_else(|| PipelineError::UnknownVideo(task.video_id.clone()))?;
        let mut label_update = None;
        let note = req.note.clone().unwrap_or_default();
        let rejection = if note.is_empty() {
            format!("rejected by {actor}")
        } else {
            format!("rejected by {actor}: {note}")
        };
        let mut status = match req.action {
            Action::Approve => TaskStatus::Approved,
            Action::Reject => TaskStatus::Rejected,
            Action::Correct => TaskStatus::Corrected,
        };
        let mut detail = serde_json::Value::Null;
        let invalid = |m: String| PipelineError::Review(ReviewError::Invalid(m));
        match task.kind {
            TaskKind::StoryboardVerify => match req.action {
                Action::Reject => record.reject(Stage::VideoVerified, rejection)?,
                _ => record.pass(Stage::VideoVerified)?,
            },
            TaskKind::TrimVerify => match req.action {
                Action::Reject => record.reject(Stage::Trimmed, rejection)?,
                Action::Approve => record.pass(Stage::Trimmed)?,
                Action::Correct => {
                    let w = req.trim.expect("checked");
                    let n = record.frame_count.unwrap_or(0);
                    if w.start > w.end || w.end >= n {
                        return Err(invalid(format!("trim window {}..={} outside {n} frames", w.start, w.end)));
                    }
                    detail = serde_json::json!({"old": record.trim, "new": w});
                    if record.trim == Some(w) {
                        status = TaskStatus::Approved;
                    }
                    record.trim = Some(w);
                    record.pass(Stage::Trimmed)?;
                }
            },
            TaskKind::LabelQc => match req.action {
                Action::Reject => record.reject(Stage::Annotated, rejection)?,
                Action::Approve | Action::Correct => {
                    let label = self
                        .labels
                        .get(&task.video_id)
                        .ok_or_else(|| invalid(format!("no proposed label for {}", task.video_id)))?;
                    let qc = match &req.labels {
                        Some(c) => QcDecision::Correct {
                            procedures: c.procedures.clone(),
                            surgery_type: c.surgery_type,
                        },
                        None => QcDecision::Approve,
                    };
                    let next = apply_qc_decision(label, &qc, &self.keywords).map_err(|e| invalid(e.to_string()))?;
                    status = match &next.qc_status {
                        crate::annotate::QcStatus::Corrected { old, new } => {
                            detail = serde_json::json!({"old": old, "new": new});
                            TaskStatus::Corrected
                        }
                        _ => TaskStatus::Approved,
                    };
                    label_update = Some(next);
                    record.pass(Stage::Annotated)?;
                }
            },
        }
        let (task, entry) = self.tasks.record(task_id, req, status, actor, now_unix(), detail)?;
        *self.manifest.get_mut(&task.video_id)? = record;
        if let Some(l) = label_update {
            self.labels.upsert(l);
        }
        self.persist()?;
        append_audit(&self.path("audit.jsonl"), &[entry])?;
        Ok(Decided { task, replayed: false })
    }

    /// Why a video cannot be exported, if anything.
    fn ineligibility(&self, r: &VideoRecord, approved: &BTreeSet<(String, TaskKind)>) -> Option<String> {
        if let Some(stage) = r.rejected_at() {
            if let crate::manifest::StageStatus::Rejected(reason) = r.status(stage) {
                return Some(format!("rejected at {stage}: {reason}"));
            }
        }
        if let Some(stage) = Stage::ALL.iter().take(7).find(|s| !r.status(**s).is_passed()) {
            return Some(format!("pending at {stage}"));
        }
        match self.labels.get(&r.video_id) {
            Some(l) if l.qc_status.is_final() && !l.procedures.is_empty() => {}
            _ => return Some("label not approved".into()),
        }
        TaskKind::ALL
            .iter()
            .find(|k| !approved.contains(&(r.video_id.clone(), **k)))
            .map(|k| format!("no approved {} decision in audit", k.as_str()))
    }

    /// Writes the dataset tree under `out`:
    /// `frames/<video_id>/<index>.<ext>`, `labels.jsonl`, `stats.json`, `exclusions.json`.
    pub fn export(&mut self, out: &Path) -> Result<ExportReport, PipelineError> {
        let audit = self.audit()?;
        let approved: BTreeSet<(String, TaskKind)> = audit
            .iter()
            .filter(|e| matches!(e.status, TaskStatus::Approved | TaskStatus::Corrected))
            .map(|e| (e.video_id.clone(), e.kind))
            .collect();
        let frames_dir = out.join("frames");
        if frames_dir.exists() {
            fs::remove_dir_all(&frames_dir).map_err(io_err)?;
        }
        fs::create_dir_all(&frames_dir).map_err(io_err)?;
        let export_store = FrameStore::with_encoding(&frames_dir, self.config.encoding)?;
        let mut stats = ExportStats::default();
        let mut excluded = Vec::new();
        let mut labels_out = String::new();
        let mut exported = Vec::new();
        for r in self.manifest.records() {
            if let Some(reason) = self.ineligibility(r, &approved) {
                excluded.push(ExcludedVideo {
                    video_id: r.video_id.clone(),
                    reason,
                });
                continue;
            }
            let indices = r.export_indices.clone().unwrap_or_default();
            for &i in &indices {
                let f = FrameRef::new(r.video_id.clone(), i);
                export_store.put(&f, &self.obliterated.get(&f)?)?;
            }
            let label = self.labels.get(&r.video_id).expect("checked eligible");
            labels_out.push_str(&serde_json::to_string(label).expect("label serializes"));
            labels_out.push('\n');
            stats.videos += 1;
            stats.frames += indices.len();
            stats.frames_per_video.insert(r.video_id.clone(), indices.len());
            for p in &label.procedures {
                *stats.per_procedure.entry(p.clone()).or_default() += 1;
            }
            if let Some(st) = label.surgery_type {
                let name = serde_json::to_value(st).expect("serializes");
                *stats.per_surgery_type.entry(name.as_str().unwrap_or_default().to_string()).or_default() += 1;
            }
            exported.push(r.video_id.clone());
        }
        write_atomic(&out.join("labels.jsonl"), labels_out.as_bytes()).map_err(io_err)?;
        let stats_json = serde_json::to_vec_pretty(&stats).expect("stats serialize");
        write_atomic(&out.join("stats.json"), &stats_json).map_err(io_err)?;
        let excl_json = serde_json::to_vec_pretty(&excluded).expect("exclusions serialize");
        write_atomic(&out.join("exclusions.json"), &excl_json).map_err(io_err)?;
        for id in exported {
            let hash = self.config_hash.clone();
            let r = self.manifest.get_mut(&id)?;
            if r.status(Stage::Exported).is_pending() {
                r.pass(Stage::Exported)?;
                r.config_hash = Some(hash);
            }
        }
        self.persist()?;
        Ok(ExportReport { stats, excluded })
    }

    /// Storyboard path for a video, if it was composed.
    pub fn storyboard_path(&self, video_id: &str) -> Option<PathBuf> {
        let p = Storyboard::path(&self.root, video_id);
        p.is_file().then_some(p)
    }
}
