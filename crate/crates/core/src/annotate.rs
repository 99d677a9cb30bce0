//! Title-based annotation: robotic/non-robotic surgery type and multi-label
//! procedure type, with an LLM fallback. Every label is created `pending`
//! and only a QC decision can approve or correct it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Closed procedure vocabulary, in prompt order.
pub const PROCEDURES: [&str; 35] = [
    "pancreatectomy",
    "pancreaticoduodenectomy",
    "splenectomy",
    "ampullectomy",
    "hepatectomy",
    "nephrectomy",
    "low anterior resection",
    "colectomy",
    "abdominoperineal resection",
    "pulmonary lobectomy",
    "hartmanns",
    "prostatectomy",
    "gastric bypass",
    "duodenal switch",
    "gastrectomy",
    "small bowel resection",
    "hernia repair",
    "ulcer repair",
    "cholecystectomy",
    "appendectomy",
    "ileocolic resection",
    "cecectomy",
    "myomectomy",
    "hysterectomy",
    "nissen fundoplication",
    "adrenalectomy",
    "thymectomy",
    "rectopexy",
    "adhesiolysis",
    "esophagectomy",
    "cystectomy",
    "jejunostomy",
    "ileorectal anastomosis",
    "kidney transplant",
    "vaginectomy",
];

pub const ROBOTIC_KEYWORDS: [&str; 9] = [
    "Robotic",
    "Robot",
    "Robo",
    "Hugo",
    "Versius",
    "Senhance",
    "Telerobotic",
    "Console",
    "da Vinci",
];

/// Keywords shorter than this must match a whole token ("robo" does not hit "robotnik").
const TOKEN_MATCH_BELOW: usize = 6;

const TITLE_SLOT: &str = "<video title>";

pub const PROMPT_TEMPLATE: &str = "You are a highly knowledgeable assistant specializing in surgical procedures and medical terminology. \n\
Your expertise includes identifying and categorizing surgical interventions based on clinical descriptions and procedural contexts.\n\
Here is a list of 35 possible surgical procedure types: pancreatectomy, pancreaticoduodenectomy, splenectomy, ampullectomy, hepatectomy, nephrectomy, low anterior resection, colectomy, abdominoperineal resection, pulmonary lobectomy, hartmanns, prostatectomy, gastric bypass, duodenal switch, gastrectomy, small bowel resection, hernia repair, ulcer repair, cholecystectomy, appendectomy, ileocolic resection, cecectomy, myomectomy, hysterectomy, nissen fundoplication, adrenalectomy, thymectomy, rectopexy, adhesiolysis, esophagectomy, cystectomy, jejunostomy, ileorectal anastomosis, kidney transplant, vaginectomy. \n\
Based on the description of the surgical video: <video title>, determine the most likely procedure type from the list. Focus on matching the description to the procedure type that best aligns with the terminology and context provided.";

pub const REASON_LLM_UNREACHABLE: &str = "llm_unreachable";
pub const REASON_LLM_UNPARSEABLE: &str = "llm_unparseable";
pub const REASON_NO_MATCH: &str = "no_title_match";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurgeryType {
    Robotic,
    NonRobotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Keyword,
    Llm,
    Human,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldProvenance {
    pub procedures: Option<Provenance>,
    pub surgery_type: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelValues {
    pub procedures: BTreeSet<String>,
    pub surgery_type: Option<SurgeryType>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcStatus {
    Pending,
    Approved,
    Corrected { old: LabelValues, new: LabelValues },
}

impl QcStatus {
    pub fn is_final(&self) -> bool {
        !matches!(self, QcStatus::Pending)
    }
}

/// One line of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcedureLabel {
    pub video_id: String,
    pub procedures: BTreeSet<String>,
    /// `None` until a keyword hits or a reviewer confirms non-robotic.
    pub surgery_type: Option<SurgeryType>,
    pub provenance: FieldProvenance,
    pub qc_status: QcStatus,
    /// Why the proposal needs a human beyond routine QC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_reason: Option<String>,
}

impl ProcedureLabel {
    pub fn values(&self) -> LabelValues {
        LabelValues {
            procedures: self.procedures.clone(),
            surgery_type: self.surgery_type,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AnnotateError {
    #[error("label for {0} is not pending")]
    InvalidTransition(String),
    #[error("approved labels need at least one procedure")]
    EmptyProcedures,
    #[error("{0:?} is not in the procedure vocabulary")]
    UnknownProcedure(String),
    #[error("empty title")]
    EmptyTitle,
    #[error("labels file: {0}")]
    Io(String),
}

/// Immutable keyword and vocabulary table.
#[derive(Debug, Clone)]
pub struct KeywordTable {
    robotic_keywords: Vec<String>,
    procedure_names: Vec<String>,
}

impl KeywordTable {
    pub fn builtin() -> Self {
        KeywordTable {
            robotic_keywords: ROBOTIC_KEYWORDS.iter().map(|k| normalize(k)).collect(),
            procedure_names: PROCEDURES.iter().map(|p| p.to_string()).collect(),
        }
    }

    pub fn procedure_names(&self) -> &[String] {
        &self.procedure_names
    }

    pub fn is_procedure(&self, name: &str) -> bool {
        self.procedure_names.iter().any(|p| p == name)
    }
}

impl Default for KeywordTable {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Lowercases and drops apostrophes so "Hartmann's" meets "hartmanns".
pub fn normalize(text: &str) -> String {
    text.chars()
        .filter(|c| !matches!(c, '\'' | '\u{2019}' | '\u{02bc}'))
        .flat_map(char::to_lowercase)
        .collect()
}

fn is_word_char(c: Option<char>) -> bool {
    c.map(|c| c.is_alphanumeric()).unwrap_or(false)
}

fn occurrences(haystack: &str, needle: &str, whole_token: bool) -> Vec<(usize, usize)> {
    haystack
        .match_indices(needle)
        .map(|(start, m)| (start, start + m.len()))
        .filter(|(start, end)| {
            !whole_token || (!is_word_char(haystack[..*start].chars().next_back()) && !is_word_char(haystack[*end..].chars().next()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SurgeryMatch {
    Robotic { keyword: String },
    NeedsReview,
}

pub fn match_surgery_type(title: &str, table: &KeywordTable) -> SurgeryMatch {
    let text = normalize(title);
    table
        .robotic_keywords
        .iter()
        .find(|k| !occurrences(&text, k, k.chars().count() < TOKEN_MATCH_BELOW).is_empty())
        .map(|k| SurgeryMatch::Robotic { keyword: k.clone() })
        .unwrap_or(SurgeryMatch::NeedsReview)
}

/// Vocabulary hits in `text` as `(name, first occurrence)`. An occurrence nested
/// inside a longer hit ("cystectomy" inside "cholecystectomy") does not count.
fn vocabulary_hits(text: &str, table: &KeywordTable) -> Vec<(String, usize)> {
    let spans: Vec<(&String, Vec<(usize, usize)>)> = table
        .procedure_names
        .iter()
        .map(|p| (p, occurrences(text, p, false)))
        .filter(|(_, occ)| !occ.is_empty())
        .collect();
    let mut hits = Vec::new();
    for (name, occ) in &spans {
        let free: Vec<&(usize, usize)> = occ
            .iter()
            .filter(|(s, e)| {
                !spans.iter().any(|(other, o)| {
                    other.len() > name.len() && o.iter().any(|(os, oe)| os <= s && e <= oe)
                })
            })
            .collect();
        if let Some((start, _)) = free.first() {
            hits.push(((*name).clone(), *start));
        }
    }
    hits
}

/// All vocabulary names found in the title; `None` when there are none.
pub fn match_procedure(title: &str, table: &KeywordTable) -> Option<BTreeSet<String>> {
    let hits: BTreeSet<String> = vocabulary_hits(&normalize(title), table).into_iter().map(|(n, _)| n).collect();
    (!hits.is_empty()).then_some(hits)
}

pub fn build_prompt(title: &str) -> String {
    PROMPT_TEMPLATE.replace(TITLE_SLOT, title)
}

/// The vocabulary name mentioned earliest in a completion (longest wins ties).
pub fn parse_completion(response: &str, table: &KeywordTable) -> Option<String> {
    let mut hits = vocabulary_hits(&normalize(response), table);
    hits.sort_by(|a, b| a.1.cmp(&b.1).then(b.0.len().cmp(&a.0.len())));
    hits.into_iter().next().map(|(n, _)| n)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("bad response: {0}")]
    BadResponse(String),
}

/// A text completion endpoint.
pub trait CompletionClient: Send + Sync {
    fn model(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// Request/response pair kept for audit and replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmTranscript {
    pub video_id: String,
    pub title: String,
    pub model: String,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FallbackResult {
    Candidate(String),
    RouteToHuman { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FallbackOutcome {
    pub result: FallbackResult,
    pub transcript: LlmTranscript,
}

pub fn llm_fallback(video_id: &str, title: &str, client: &dyn CompletionClient, table: &KeywordTable) -> FallbackOutcome {
    let prompt = build_prompt(title);
    let mut transcript = LlmTranscript {
        video_id: video_id.to_string(),
        title: title.to_string(),
        model: client.model().to_string(),
        prompt: prompt.clone(),
        response: None,
        error: None,
    };
    let result = match client.complete(&prompt) {
        Ok(response) => {
            let parsed = parse_completion(&response, table);
            transcript.response = Some(response);
            match parsed {
                Some(name) => FallbackResult::Candidate(name),
                None => FallbackResult::RouteToHuman {
                    reason: REASON_LLM_UNPARSEABLE.into(),
                },
            }
        }
        Err(e) => {
            let reason = match e {
                LlmError::Unreachable(_) => REASON_LLM_UNREACHABLE,
                LlmError::BadResponse(_) => REASON_LLM_UNPARSEABLE,
            };
            transcript.error = Some(e.to_string());
            FallbackResult::RouteToHuman { reason: reason.into() }
        }
    };
    FallbackOutcome { result, transcript }
}

/// Keyword pass, then the LLM for titles without a vocabulary hit.
/// The label is always `pending`.
pub fn propose_label(
    video_id: &str,
    title: &str,
    table: &KeywordTable,
    client: Option<&dyn CompletionClient>,
) -> Result<(ProcedureLabel, Option<LlmTranscript>), AnnotateError> {
    if title.trim().is_empty() {
        return Err(AnnotateError::EmptyTitle);
    }
    let mut label = ProcedureLabel {
        video_id: video_id.to_string(),
        procedures: BTreeSet::new(),
        surgery_type: None,
        provenance: FieldProvenance::default(),
        qc_status: QcStatus::Pending,
        review_reason: None,
    };
    if let SurgeryMatch::Robotic { .. } = match_surgery_type(title, table) {
        label.surgery_type = Some(SurgeryType::Robotic);
        label.provenance.surgery_type = Some(Provenance::Keyword);
    }
    let mut transcript = None;
    match match_procedure(title, table) {
        Some(found) => {
            label.procedures = found;
            label.provenance.procedures = Some(Provenance::Keyword);
        }
        None => match client {
            Some(client) => {
                let outcome = llm_fallback(video_id, title, client, table);
                match outcome.result {
                    FallbackResult::Candidate(name) => {
                        label.procedures.insert(name);
                        label.provenance.procedures = Some(Provenance::Llm);
                    }
                    FallbackResult::RouteToHuman { reason } => label.review_reason = Some(reason),
                }
                transcript = Some(outcome.transcript);
            }
            None => label.review_reason = Some(REASON_NO_MATCH.into()),
        },
    }
    Ok((label, transcript))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum QcDecision {
    Approve,
    Correct {
        #[serde(default)]
        procedures: Option<BTreeSet<String>>,
        #[serde(default)]
        surgery_type: Option<SurgeryType>,
    },
}

/// Approves or corrects a pending label. Titles without a robotic keyword
/// become non-robotic here, on human authority.
pub fn apply_qc_decision(label: &ProcedureLabel, decision: &QcDecision, table: &KeywordTable) -> Result<ProcedureLabel, AnnotateError> {
    if label.qc_status.is_final() {
        return Err(AnnotateError::InvalidTransition(label.video_id.clone()));
    }
    let old = label.values();
    let mut next = label.clone();
    if next.surgery_type.is_none() {
        next.surgery_type = Some(SurgeryType::NonRobotic);
        next.provenance.surgery_type = Some(Provenance::Human);
    }
    if let QcDecision::Correct { procedures, surgery_type } = decision {
        if let Some(procs) = procedures {
            if let Some(unknown) = procs.iter().find(|p| !table.is_procedure(p)) {
                return Err(AnnotateError::UnknownProcedure(unknown.clone()));
            }
            if *procs != next.procedures {
                next.procedures = procs.clone();
                next.provenance.procedures = Some(Provenance::Human);
            }
        }
        if let Some(st) = surgery_type {
            if Some(*st) != next.surgery_type {
                next.surgery_type = Some(*st);
                next.provenance.surgery_type = Some(Provenance::Human);
            }
        }
    }
    if next.procedures.is_empty() {
        return Err(AnnotateError::EmptyProcedures);
    }
    let new = next.values();
    let corrected = matches!(decision, QcDecision::Correct { .. }) && new != old;
    next.qc_status = if corrected {
        QcStatus::Corrected { old, new }
    } else {
        QcStatus::Approved
    };
    Ok(next)
}

/// `labels.jsonl`, one label per video.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelStore {
    labels: BTreeMap<String, ProcedureLabel>,
}

impl LabelStore {
    pub fn get(&self, video_id: &str) -> Option<&ProcedureLabel> {
        self.labels.get(video_id)
    }

    pub fn upsert(&mut self, label: ProcedureLabel) {
        self.labels.insert(label.video_id.clone(), label);
    }

    pub fn iter(&self) -> impl Iterator<Item = &ProcedureLabel> {
        self.labels.values()
    }

    pub fn load(path: &Path) -> Result<Self, AnnotateError> {
        let mut store = LabelStore::default();
        if !path.exists() {
            return Ok(store);
        }
        let text = fs::read_to_string(path).map_err(|e| AnnotateError::Io(e.to_string()))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let label: ProcedureLabel =
                serde_json::from_str(line).map_err(|e| AnnotateError::Io(format!("line {}: {e}", i + 1)))?;
            store.upsert(label);
        }
        Ok(store)
    }

    pub fn to_jsonl(&self) -> String {
        self.labels
            .values()
            .map(|l| serde_json::to_string(l).expect("serializable") + "\n")
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), AnnotateError> {
        crate::manifest::write_atomic(path, self.to_jsonl().as_bytes()).map_err(|e| AnnotateError::Io(e.to_string()))
    }
}

/// Stored completion for one prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmFixture {
    pub prompt: String,
    pub response: String,
}

pub fn fixture_name(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    format!("{}.json", hex::encode(&digest[..12]))
}

/// Answers prompts from fixtures recorded under a directory; unknown prompts
/// behave like an unreachable endpoint.
#[derive(Debug, Clone)]
pub struct ReplayClient {
    dir: PathBuf,
    model: String,
}

impl ReplayClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayClient {
            dir: dir.into(),
            model: "replay".into(),
        }
    }

    pub fn write_fixture(dir: &Path, prompt: &str, response: &str) -> std::io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(fixture_name(prompt));
        let fixture = LlmFixture {
            prompt: prompt.to_string(),
            response: response.to_string(),
        };
        fs::write(&path, serde_json::to_vec_pretty(&fixture).expect("serializable"))?;
        Ok(path)
    }
}

impl CompletionClient for ReplayClient {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let path = self.dir.join(fixture_name(prompt));
        let bytes = fs::read(&path).map_err(|e| LlmError::Unreachable(format!("no fixture {}: {e}", path.display())))?;
        let fixture: LlmFixture = serde_json::from_slice(&bytes).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        if fixture.prompt != prompt {
            return Err(LlmError::BadResponse(format!("fixture {} is for another prompt", path.display())));
        }
        Ok(fixture.response)
    }
}

/// Forwards to a live client and records every successful completion as a fixture.
pub struct RecordingClient<C> {
    inner: C,
    dir: PathBuf,
}

impl<C: CompletionClient> RecordingClient<C> {
    pub fn new(inner: C, dir: impl Into<PathBuf>) -> Self {
        RecordingClient { inner, dir: dir.into() }
    }
}

impl<C: CompletionClient> CompletionClient for RecordingClient<C> {
    fn model(&self) -> &str {
        self.inner.model()
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let response = self.inner.complete(prompt)?;
        ReplayClient::write_fixture(&self.dir, prompt, &response).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        Ok(response)
    }
}
