//! Embedding-space machinery over frame features.
//!
//! - exact cosine k-NN over an immutable [`EmbeddingIndex`],
//! - frame typicality `t(phi) = 1 / mean_{eta in kNN(phi)} d(phi, eta)`,
//! - typicality-weighted video embeddings `v = sum_j w_j phi_j` with
//!   `w_j = t_j / (eps + sum_m t_m)`,
//! - the cross-video augmentation pool and pair sampling used for the extra
//!   distillation views,
//! - a single affine layer classifying video embeddings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::FrameRef;

/// Neighbors used for typicality.
pub const TYPICALITY_K: usize = 20;
/// Stabilizer in the aggregation weights.
pub const AGGREGATION_EPS: f64 = 1e-8;
/// Floor on the mean neighbor distance before inversion.
pub const MEAN_DISTANCE_FLOOR: f64 = 1e-12;
pub const POOL_CAPACITY: usize = 4;
/// Neighbors are admitted while closer than this multiple of the local motion distance.
pub const POOL_THRESHOLD_FACTOR: f64 = 3.0;

const BIN_MAGIC: &[u8; 4] = b"LEMB";

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("zero vector")]
    ZeroVector,
    #[error("non-finite embedding entry")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    ShapeError { expected: usize, got: usize },
    #[error("duplicate embedding for {0}")]
    DuplicateFrame(String),
    #[error("frame {0} is not in the index")]
    UnknownFrame(String),
    #[error("no eligible neighbors")]
    NoNeighbors,
    #[error("video has no frames")]
    EmptyVideo,
    #[error("augmentation pool is empty")]
    EmptyPool,
    #[error("pool holds {0} images, need at least 2")]
    InsufficientPool(usize),
    #[error("embeddings file: {0}")]
    Format(String),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `1 - a.b / (|a| |b|)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::ShapeError {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(distance_with_norms(a, na, b, nb))
}

fn distance_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    (1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0)
}

/// One frame feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub video_id: String,
    pub index: usize,
    pub procedure: u32,
    pub values: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn frame(&self) -> FrameRef {
        FrameRef::new(self.video_id.clone(), self.index)
    }
}

/// Which index entries a query may retrieve. The query's own frame is never returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    SameVideo,
    CrossVideo,
    SameProcedure,
    SameProcedureCrossVideo,
}

/// A lookup target; `index: None` marks a query that is not itself an index frame.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub video_id: &'a str,
    pub index: Option<usize>,
    pub procedure: u32,
    pub values: &'a [f64],
}

impl<'a> From<&'a EmbeddingRecord> for Query<'a> {
    fn from(r: &'a EmbeddingRecord) -> Self {
        Query {
            video_id: &r.video_id,
            index: Some(r.index),
            procedure: r.procedure,
            values: &r.values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub video_id: String,
    pub index: usize,
    pub distance: f64,
}

impl Neighbor {
    pub fn frame(&self) -> FrameRef {
        FrameRef::new(self.video_id.clone(), self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    pub neighbors: Vec<Neighbor>,
    /// Fewer than the requested count were eligible.
    pub shortfall: bool,
}

/// Immutable exact index. `version` names the feature extractor that produced
/// the vectors so pools and typicalities can be traced to it.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    version: String,
    dim: usize,
    records: Vec<EmbeddingRecord>,
    norms: Vec<f64>,
    by_key: HashMap<(String, usize), usize>,
    by_video: BTreeMap<String, BTreeSet<usize>>,
}

impl EmbeddingIndex {
    pub fn build(version: impl Into<String>, records: Vec<EmbeddingRecord>) -> Result<Self, EmbedError> {
        let dim = records.first().map(|r| r.values.len()).unwrap_or(0);
        let mut norms = Vec::with_capacity(records.len());
        let mut by_key = HashMap::with_capacity(records.len());
        let mut by_video: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.values.len() != dim {
                return Err(EmbedError::ShapeError {
                    expected: dim,
                    got: r.values.len(),
                });
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFinite);
            }
            let n = norm(&r.values);
            if n == 0.0 {
                return Err(EmbedError::ZeroVector);
            }
            norms.push(n);
            if by_key.insert((r.video_id.clone(), r.index), i).is_some() {
                return Err(EmbedError::DuplicateFrame(r.frame().key()));
            }
            by_video.entry(r.video_id.clone()).or_default().insert(r.index);
        }
        Ok(EmbeddingIndex {
            version: version.into(),
            dim,
            records,
            norms,
            by_key,
            by_video,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, video_id: &str, index: usize) -> Option<&EmbeddingRecord> {
        self.by_key.get(&(video_id.to_string(), index)).map(|i| &self.records[*i])
    }

    pub fn video_frames(&self, video_id: &str) -> Vec<&EmbeddingRecord> {
        self.by_video
            .get(video_id)
            .into_iter()
            .flatten()
            .map(|i| self.get(video_id, *i).expect("by_video mirrors by_key"))
            .collect()
    }

    pub fn videos(&self) -> impl Iterator<Item = &str> {
        self.by_video.keys().map(String::as_str)
    }

    fn eligible(&self, q: &Query<'_>, r: &EmbeddingRecord, scope: Scope) -> bool {
        if q.index == Some(r.index) && q.video_id == r.video_id {
            return false;
        }
        let same_video = q.video_id == r.video_id;
        let same_proc = q.procedure == r.procedure;
        match scope {
            Scope::All => true,
            Scope::SameVideo => same_video,
            Scope::CrossVideo => !same_video,
            Scope::SameProcedure => same_proc,
            Scope::SameProcedureCrossVideo => same_proc && !same_video,
        }
    }

    /// The `k` nearest eligible frames by cosine distance, ascending, ties broken
    /// by `(video_id, index)`.
    pub fn knn(&self, query: &Query<'_>, k: usize, scope: Scope) -> Result<KnnResult, EmbedError> {
        if query.values.len() != self.dim && !self.is_empty() {
            return Err(EmbedError::ShapeError {
                expected: self.dim,
                got: query.values.len(),
            });
        }
        let qn = norm(query.values);
        if qn == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        let mut scored: Vec<(f64, &EmbeddingRecord)> = self
            .records
            .iter()
            .zip(&self.norms)
            .filter(|(r, _)| self.eligible(query, r, scope))
            .map(|(r, n)| (distance_with_norms(query.values, qn, &r.values, *n), r))
            .collect();
        let by_rank = |a: &(f64, &EmbeddingRecord), b: &(f64, &EmbeddingRecord)| {
            a.0.total_cmp(&b.0)
                .then_with(|| a.1.video_id.cmp(&b.1.video_id))
                .then_with(|| a.1.index.cmp(&b.1.index))
        };
        let shortfall = scored.len() < k;
        if scored.len() > k && k > 0 {
            scored.select_nth_unstable_by(k - 1, by_rank);
        }
        scored.truncate(k);
        scored.sort_by(by_rank);
        Ok(KnnResult {
            neighbors: scored
                .into_iter()
                .map(|(distance, r)| Neighbor {
                    video_id: r.video_id.clone(),
                    index: r.index,
                    distance,
                })
                .collect(),
            shortfall,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Typicality {
    pub value: f64,
    /// Neighbors actually averaged (below `k` on shortfall).
    pub neighbors: usize,
    pub shortfall: bool,
}

/// Inverse mean cosine distance to the `k` nearest eligible neighbors.
pub fn typicality(query: &Query<'_>, index: &EmbeddingIndex, k: usize, scope: Scope) -> Result<Typicality, EmbedError> {
    let result = index.knn(query, k, scope)?;
    if result.neighbors.is_empty() {
        return Err(EmbedError::NoNeighbors);
    }
    let mean = result.neighbors.iter().map(|n| n.distance).sum::<f64>() / result.neighbors.len() as f64;
    Ok(Typicality {
        value: 1.0 / mean.max(MEAN_DISTANCE_FLOOR),
        neighbors: result.neighbors.len(),
        shortfall: result.shortfall,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEmbedding {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    pub typicalities: Vec<f64>,
    /// Frames without any eligible neighbor; they contribute `t = 0`.
    pub flagged: Vec<usize>,
}

/// Combines per-frame typicalities into aggregation weights and the weighted sum.
pub fn aggregate(frames: &[&[f64]], typicalities: &[f64], eps: f64) -> Result<(Vec<f64>, Vec<f64>), EmbedError> {
    let dim = frames.first().ok_or(EmbedError::EmptyVideo)?.len();
    if typicalities.len() != frames.len() {
        return Err(EmbedError::ShapeError {
            expected: frames.len(),
            got: typicalities.len(),
        });
    }
    let total: f64 = typicalities.iter().sum();
    let weights: Vec<f64> = typicalities.iter().map(|t| t / (eps + total)).collect();
    let mut values = vec![0.0; dim];
    for (phi, w) in frames.iter().zip(&weights) {
        if phi.len() != dim {
            return Err(EmbedError::ShapeError {
                expected: dim,
                got: phi.len(),
            });
        }
        for (v, x) in values.iter_mut().zip(phi.iter()) {
            *v += w * x;
        }
    }
    Ok((values, weights))
}

/// Video embedding from frame features, with typicalities measured against `index`.
pub fn video_embedding(
    frames: &[Query<'_>],
    index: &EmbeddingIndex,
    k: usize,
    scope: Scope,
    eps: f64,
) -> Result<VideoEmbedding, EmbedError> {
    if frames.is_empty() {
        return Err(EmbedError::EmptyVideo);
    }
    let mut typicalities = Vec::with_capacity(frames.len());
    let mut flagged = Vec::new();
    for (j, q) in frames.iter().enumerate() {
        match typicality(q, index, k, scope) {
            Ok(t) => typicalities.push(t.value),
            Err(EmbedError::NoNeighbors) => {
                typicalities.push(0.0);
                flagged.push(j);
            }
            Err(e) => return Err(e),
        }
    }
    let vectors: Vec<&[f64]> = frames.iter().map(|q| q.values).collect();
    let (values, weights) = aggregate(&vectors, &typicalities, eps)?;
    Ok(VideoEmbedding {
        values,
        weights,
        typicalities,
        flagged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotSource {
    Neighbor { distance: f64 },
    Adjacent { offset: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSlot {
    pub frame: FrameRef,
    pub source: SlotSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPool {
    pub anchor: FrameRef,
    /// Frame whose distance to the anchor sets the admission threshold.
    pub reference: Option<FrameRef>,
    pub threshold: f64,
    pub slots: Vec<PoolSlot>,
}

impl AugmentationPool {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn neighbor_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s.source, SlotSource::Neighbor { .. }))
            .count()
    }
}

/// Fills up to four slots for `anchor`: same-procedure frames from other videos
/// closer than `3 * d(anchor, preceding frame)` (succeeding frame for the first
/// frame), nearest first, then adjacent frames at offsets -1, +1, -2, +2, ...
pub fn build_pool(index: &EmbeddingIndex, anchor: &FrameRef) -> Result<AugmentationPool, EmbedError> {
    build_pool_scoped(index, anchor, Scope::SameProcedureCrossVideo)
}

/// [`build_pool`] with a different neighbor scope; `scope` should exclude the
/// anchor's own video or neighbor slots may duplicate adjacent ones.
pub fn build_pool_scoped(index: &EmbeddingIndex, anchor: &FrameRef, scope: Scope) -> Result<AugmentationPool, EmbedError> {
    let x = index
        .get(&anchor.video_id, anchor.index)
        .ok_or_else(|| EmbedError::UnknownFrame(anchor.key()))?;
    let reference = anchor
        .index
        .checked_sub(1)
        .and_then(|p| index.get(&anchor.video_id, p))
        .or_else(|| index.get(&anchor.video_id, anchor.index + 1));
    let mut slots = Vec::with_capacity(POOL_CAPACITY);
    let threshold = match reference {
        Some(r) => POOL_THRESHOLD_FACTOR * cosine_distance(&x.values, &r.values)?,
        None => 0.0,
    };
    let nearest = index.knn(&Query::from(x), POOL_CAPACITY, scope)?;
    for n in nearest.neighbors {
        if n.distance >= threshold {
            break;
        }
        slots.push(PoolSlot {
            frame: n.frame(),
            source: SlotSource::Neighbor { distance: n.distance },
        });
    }
    let frames = &index.by_video[&anchor.video_id];
    let lowest = *frames.first().expect("anchor is in its own video") as i64;
    let highest = *frames.last().expect("anchor is in its own video") as i64;
    let here = anchor.index as i64;
    let mut step = 1i64;
    while slots.len() < POOL_CAPACITY && (here - step >= lowest || here + step <= highest) {
        for offset in [-step, step] {
            let target = here + offset;
            if slots.len() < POOL_CAPACITY && target >= 0 && frames.contains(&(target as usize)) {
                slots.push(PoolSlot {
                    frame: FrameRef::new(anchor.video_id.clone(), target as usize),
                    source: SlotSource::Adjacent { offset },
                });
            }
        }
        step += 1;
    }
    if slots.is_empty() {
        return Err(EmbedError::EmptyPool);
    }
    Ok(AugmentationPool {
        anchor: anchor.clone(),
        reference: reference.map(EmbeddingRecord::frame),
        threshold,
        slots,
    })
}

/// Two distinct slots drawn uniformly without replacement.
pub fn sample_pair<'p, R: Rng + ?Sized>(pool: &'p AugmentationPool, rng: &mut R) -> Result<(&'p PoolSlot, &'p PoolSlot), EmbedError> {
    if pool.len() < 2 {
        return Err(EmbedError::InsufficientPool(pool.len()));
    }
    let picked = rand::seq::index::sample(rng, pool.len(), 2);
    Ok((&pool.slots[picked.index(0)], &pool.slots[picked.index(1)]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One class per video.
    SingleLabel,
    /// Independent per-class probabilities.
    MultiLabel,
}

/// Single affine layer over video embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mode: HeadMode,
}

impl LinearHead {
    pub fn zeros(classes: usize, dim: usize, mode: HeadMode) -> Self {
        LinearHead {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            mode,
        }
    }

    pub fn logits(&self, v: &[f64]) -> Result<Vec<f64>, EmbedError> {
        if v.len() != self.dim {
            return Err(EmbedError::ShapeError {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(self
            .weights
            .chunks(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, v) + b)
            .collect())
    }

    /// Fits a single-label head by full-batch gradient descent on cross-entropy.
    pub fn fit_single_label(&mut self, samples: &[Vec<f64>], labels: &[usize], epochs: usize, lr: f64) -> Result<(), EmbedError> {
        for _ in 0..epochs {
            let mut gw = vec![0.0; self.weights.len()];
            let mut gb = vec![0.0; self.classes];
            for (x, y) in samples.iter().zip(labels) {
                let p = softmax(&self.logits(x)?);
                for c in 0..self.classes {
                    let g = p[c] - if c == *y { 1.0 } else { 0.0 };
                    gb[c] += g;
                    for (gwi, xi) in gw[c * self.dim..(c + 1) * self.dim].iter_mut().zip(x) {
                        *gwi += g * xi;
                    }
                }
            }
            let scale = lr / samples.len().max(1) as f64;
            self.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= scale * g);
            self.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= scale * g);
        }
        Ok(())
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Class scores: softmax in single-label mode, elementwise logistic in multi-label mode.
pub fn classify_video(v: &[f64], head: &LinearHead) -> Result<Vec<f64>, EmbedError> {
    let z = head.logits(v)?;
    Ok(match head.mode {
        HeadMode::SingleLabel => softmax(&z),
        HeadMode::MultiLabel => z.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
    })
}

/// Computes frame embeddings from encoded images; backs the `/embed` service client.
pub trait FeatureExtractor: Send + Sync {
    fn embed(&self, image: &[u8]) -> Result<Vec<f64>, String>;
}

/// Writes `embeddings.bin`.
///
/// Little-endian layout: magic `LEMB`, `u32` D, `u64` count, then per record
/// `u16` id length, id bytes, `u32` frame index, `D x f32`, `u32` procedure id.
pub fn write_embeddings_bin(path: &Path, records: &[EmbeddingRecord]) -> Result<(), EmbedError> {
    let fmt = |e: io::Error| EmbedError::Format(e.to_string());
    let dim = records.first().map(|r| r.values.len()).unwrap_or(0);
    let mut out = io::BufWriter::new(fs::File::create(path).map_err(fmt)?);
    out.write_all(BIN_MAGIC).map_err(fmt)?;
    out.write_all(&(dim as u32).to_le_bytes()).map_err(fmt)?;
    out.write_all(&(records.len() as u64).to_le_bytes()).map_err(fmt)?;
    for r in records {
        if r.values.len() != dim {
            return Err(EmbedError::ShapeError {
                expected: dim,
                got: r.values.len(),
            });
        }
        let id = r.video_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| EmbedError::Format("video id too long".into()))?;
        out.write_all(&id_len.to_le_bytes()).map_err(fmt)?;
        out.write_all(id).map_err(fmt)?;
        out.write_all(&(r.index as u32).to_le_bytes()).map_err(fmt)?;
        for v in &r.values {
            out.write_all(&(*v as f32).to_le_bytes()).map_err(fmt)?;
        }
        out.write_all(&r.procedure.to_le_bytes()).map_err(fmt)?;
    }
    out.flush().map_err(fmt)
}

pub fn read_embeddings_bin(path: &Path) -> Result<Vec<EmbeddingRecord>, EmbedError> {
    let fmt = |e: io::Error| EmbedError::Format(e.to_string());
    let mut r = io::BufReader::new(fs::File::open(path).map_err(fmt)?);
    let mut u16b = [0u8; 2];
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u32b).map_err(fmt)?;
    if &u32b != BIN_MAGIC {
        return Err(EmbedError::Format("bad magic".into()));
    }
    r.read_exact(&mut u32b).map_err(fmt)?;
    let dim = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u64b).map_err(fmt)?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        r.read_exact(&mut u16b).map_err(fmt)?;
        let mut id = vec![0u8; u16::from_le_bytes(u16b) as usize];
        r.read_exact(&mut id).map_err(fmt)?;
        let video_id = String::from_utf8(id).map_err(|e| EmbedError::Format(e.to_string()))?;
        r.read_exact(&mut u32b).map_err(fmt)?;
        let index = u32::from_le_bytes(u32b) as usize;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut u32b).map_err(fmt)?;
            values.push(f32::from_le_bytes(u32b) as f64);
        }
        r.read_exact(&mut u32b).map_err(fmt)?;
        records.push(EmbeddingRecord {
            video_id,
            index,
            procedure: u32::from_le_bytes(u32b),
            values,
        });
    }
    Ok(records)
}

/// JSON lines `{video_id, index, procedure, values}`, for small fixtures.
pub fn read_embeddings_jsonl(text: &str) -> Result<Vec<EmbeddingRecord>, EmbedError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EmbedError::Format(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Reads either format, chosen by the file's magic bytes.
pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>, EmbedError> {
    let bytes = fs::read(path).map_err(|e| EmbedError::Format(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(BIN_MAGIC) {
        read_embeddings_bin(path)
    } else {
        read_embeddings_jsonl(&String::from_utf8_lossy(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(video: &str, index: usize, procedure: u32, values: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            video_id: video.into(),
            index,
            procedure,
            values,
        }
    }

    /// Naive cosine distance straight from the definition.
    fn oracle_distance(a: &[f64], b: &[f64]) -> f64 {
        let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let aa: f64 = a.iter().map(|x| x * x).sum();
        let bb: f64 = b.iter().map(|x| x * x).sum();
        1.0 - ab / (aa.sqrt() * bb.sqrt())
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(EmbedError::ZeroVector));
        assert!(matches!(cosine_distance(&[1.0], &[1.0, 0.0]), Err(EmbedError::ShapeError { .. })));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(
            a in proptest::collection::vec(-10.0f64..10.0, 5),
            b in proptest::collection::vec(-10.0f64..10.0, 5),
        ) {
            prop_assume!(norm(&a) > 1e-9 && norm(&b) > 1e-9);
            let ab = cosine_distance(&a, &b).unwrap();
            let ba = cosine_distance(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=2.0).contains(&ab));
        }
    }

    #[test]
    fn knn_excludes_query_itself() {
        let idx = EmbeddingIndex::build("t", vec![rec("a", 0, 0, vec![1.0, 0.0]), rec("b", 0, 0, vec![1.0, 1.0])]).unwrap();
        let q = Query::from(&idx.records()[0]);
        let res = idx.knn(&q, 1, Scope::All).unwrap();
        assert_eq!(res.neighbors.len(), 1);
        assert_eq!(res.neighbors[0].video_id, "b");
        assert!(!res.shortfall);
    }

    #[test]
    fn knn_collinear_points_tie_break() {
        // Five identical points: every distance ties at 0.
        let records: Vec<_> = (0..5).map(|i| rec(&format!("v{}", 4 - i), i, 0, vec![1.0, 1.0])).collect();
        let idx = EmbeddingIndex::build("t", records).unwrap();
        let q = Query {
            video_id: "q",
            index: None,
            procedure: 0,
            values: &[2.0, 2.0],
        };
        let res = idx.knn(&q, 3, Scope::All).unwrap();
        let ids: Vec<_> = res.neighbors.iter().map(|n| n.video_id.as_str()).collect();
        assert_eq!(ids, vec!["v0", "v1", "v2"]);
        assert!(res.neighbors.iter().all(|n| n.distance < 1e-12));
    }

    #[test]
    fn knn_scope_with_nothing_eligible() {
        let idx = EmbeddingIndex::build("t", vec![rec("a", 0, 1, vec![1.0]), rec("b", 0, 1, vec![2.0])]).unwrap();
        let q = Query {
            video_id: "c",
            index: None,
            procedure: 7,
            values: &[1.0],
        };
        let res = idx.knn(&q, 3, Scope::SameProcedure).unwrap();
        assert!(res.neighbors.is_empty());
        assert!(res.shortfall);
    }

    #[test]
    fn index_rejects_bad_records() {
        assert_eq!(EmbeddingIndex::build("t", vec![rec("a", 0, 0, vec![0.0, 0.0])]).unwrap_err(), EmbedError::ZeroVector);
        assert!(matches!(
            EmbeddingIndex::build("t", vec![rec("a", 0, 0, vec![1.0]), rec("a", 1, 0, vec![1.0, 2.0])]),
            Err(EmbedError::ShapeError { .. })
        ));
        assert!(matches!(
            EmbeddingIndex::build("t", vec![rec("a", 0, 0, vec![1.0]), rec("a", 0, 0, vec![2.0])]),
            Err(EmbedError::DuplicateFrame(_))
        ));
        assert_eq!(EmbeddingIndex::build("t", vec![rec("a", 0, 0, vec![f64::NAN])]).unwrap_err(), EmbedError::NonFinite);
    }

    fn random_index(rng: &mut ChaCha8Rng, n: usize, d: usize, videos: usize, procs: u32) -> EmbeddingIndex {
        let records = (0..n)
            .map(|i| {
                let values = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                rec(&format!("v{}", i % videos), i / videos, (i % videos) as u32 % procs, values)
            })
            .collect();
        EmbeddingIndex::build("rand", records).unwrap()
    }

    #[test]
    fn knn_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scopes = [Scope::All, Scope::SameVideo, Scope::CrossVideo, Scope::SameProcedure, Scope::SameProcedureCrossVideo];
        for trial in 0..200 {
            let n = rng.gen_range(1..=128);
            let d = rng.gen_range(1..=16);
            let videos = rng.gen_range(1..6);
            let procs = rng.gen_range(1..4);
            let idx = random_index(&mut rng, n, d, videos, procs);
            let q = &idx.records()[rng.gen_range(0..n)];
            let k = rng.gen_range(1..=24);
            let scope = scopes[trial % scopes.len()];
            let got = idx.knn(&Query::from(q), k, scope).unwrap();
            let mut expected: Vec<(f64, String, usize)> = idx
                .records()
                .iter()
                .filter(|r| !(r.video_id == q.video_id && r.index == q.index))
                .filter(|r| match scope {
                    Scope::All => true,
                    Scope::SameVideo => r.video_id == q.video_id,
                    Scope::CrossVideo => r.video_id != q.video_id,
                    Scope::SameProcedure => r.procedure == q.procedure,
                    Scope::SameProcedureCrossVideo => r.procedure == q.procedure && r.video_id != q.video_id,
                })
                .map(|r| (oracle_distance(&q.values, &r.values).clamp(0.0, 2.0), r.video_id.clone(), r.index))
                .collect();
            expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            assert_eq!(got.shortfall, expected.len() < k);
            expected.truncate(k);
            assert_eq!(got.neighbors.len(), expected.len());
            for (g, e) in got.neighbors.iter().zip(&expected) {
                assert!((g.distance - e.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn typicality_closed_forms() {
        // Four neighbors each at cosine distance 0.5 from (1, 0): angle 60 degrees.
        let c = 0.5f64;
        let s = (1.0 - c * c).sqrt();
        let records = vec![
            rec("q", 0, 0, vec![1.0, 0.0]),
            rec("a", 0, 0, vec![c, s]),
            rec("b", 0, 0, vec![c, -s]),
            rec("c", 0, 0, vec![2.0 * c, 2.0 * s]),
            rec("d", 0, 0, vec![3.0 * c, -3.0 * s]),
        ];
        let idx = EmbeddingIndex::build("t", records).unwrap();
        let t = typicality(&Query::from(&idx.records()[0]), &idx, 4, Scope::All).unwrap();
        assert!((t.value - 2.0).abs() < 1e-12);

        let dup = EmbeddingIndex::build("t", vec![rec("q", 0, 0, vec![1.0, 2.0]), rec("q", 1, 0, vec![2.0, 4.0])]).unwrap();
        let t = typicality(&Query::from(&dup.records()[0]), &dup, 20, Scope::All).unwrap();
        assert_eq!(t.value, 1e12);
        assert!(t.shortfall);
        assert_eq!(t.neighbors, 1);

        let alone = EmbeddingIndex::build("t", vec![rec("q", 0, 0, vec![1.0])]).unwrap();
        assert_eq!(typicality(&Query::from(&alone.records()[0]), &alone, 20, Scope::All), Err(EmbedError::NoNeighbors));
    }

    #[test]
    fn single_frame_video_embedding() {
        // One frame with one neighbor at distance 1: t = 1, v = phi / (1 + eps).
        let idx = EmbeddingIndex::build("t", vec![rec("v", 0, 0, vec![3.0, 0.0]), rec("w", 0, 0, vec![0.0, 1.0])]).unwrap();
        let ve = video_embedding(&[Query::from(&idx.records()[0])], &idx, 20, Scope::All, AGGREGATION_EPS).unwrap();
        assert!((ve.typicalities[0] - 1.0).abs() < 1e-15);
        assert_eq!(ve.values, vec![3.0 / (1.0 + 1e-8), 0.0]);
    }

    #[test]
    fn equal_typicality_is_near_uniform_mean() {
        let frames: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let refs: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();
        let t = 2.5;
        let (v, w) = aggregate(&refs, &[t; 3], AGGREGATION_EPS).unwrap();
        for d in 0..2 {
            let expected = frames.iter().map(|f| f[d]).sum::<f64>() * t / (AGGREGATION_EPS + 3.0 * t);
            assert!((v[d] - expected).abs() < 1e-14);
        }
        assert!((w.iter().sum::<f64>() - 3.0 * t / (AGGREGATION_EPS + 3.0 * t)).abs() < 1e-15);
    }

    #[test]
    fn frames_without_neighbors_are_flagged() {
        let idx = EmbeddingIndex::build("t", vec![rec("v", 0, 0, vec![1.0, 0.0]), rec("v", 1, 0, vec![0.0, 1.0])]).unwrap();
        let frames: Vec<_> = idx.records().iter().map(Query::from).collect();
        let ve = video_embedding(&frames, &idx, 20, Scope::CrossVideo, AGGREGATION_EPS).unwrap();
        assert_eq!(ve.flagged, vec![0, 1]);
        assert_eq!(ve.values, vec![0.0, 0.0]);
        assert_eq!(video_embedding(&[], &idx, 20, Scope::All, AGGREGATION_EPS), Err(EmbedError::EmptyVideo));
    }

    /// Anchor video "x" (procedure 0) at 2-D angles, plus neighbor frames at chosen
    /// cosine distances from the anchor.
    fn pool_fixture(d_prev: f64, neighbor_distances: &[f64], anchor_frames: usize) -> EmbeddingIndex {
        let at = |d: f64| {
            let angle = (1.0 - d).clamp(-1.0, 1.0).acos();
            vec![angle.cos(), angle.sin()]
        };
        let mut records = vec![rec("x", 0, 0, at(d_prev)), rec("x", 1, 0, vec![1.0, 0.0])];
        for i in 2..anchor_frames {
            records.push(rec("x", i, 0, at(0.9)));
        }
        for (i, d) in neighbor_distances.iter().enumerate() {
            records.push(rec(&format!("n{i}"), 0, 0, at(*d)));
        }
        records.push(rec("other", 0, 1, vec![1.0, 0.0]));
        EmbeddingIndex::build("t", records).unwrap()
    }

    #[test]
    fn pool_admits_strictly_below_threshold() {
        let idx = pool_fixture(0.1, &[0.25, 0.29, 0.31, 0.5], 5);
        let pool = build_pool(&idx, &FrameRef::new("x", 1)).unwrap();
        assert!((pool.threshold - 0.3).abs() < 1e-9);
        assert_eq!(pool.neighbor_count(), 2);
        let kinds: Vec<_> = pool.slots.iter().map(|s| s.source.clone()).collect();
        assert!(matches!(kinds[0], SlotSource::Neighbor { .. }));
        assert!(matches!(kinds[1], SlotSource::Neighbor { .. }));
        assert_eq!(kinds[2], SlotSource::Adjacent { offset: -1 });
        assert_eq!(kinds[3], SlotSource::Adjacent { offset: 1 });
    }

    #[test]
    fn pool_falls_back_to_adjacent_frames() {
        let idx = pool_fixture(0.1, &[0.35, 0.5], 5);
        let pool = build_pool(&idx, &FrameRef::new("x", 1)).unwrap();
        let offsets: Vec<_> = pool
            .slots
            .iter()
            .map(|s| match s.source {
                SlotSource::Adjacent { offset } => offset,
                _ => panic!("unexpected neighbor"),
            })
            .collect();
        // Frame 1 of 0..5: -1, +1, (-2 missing), +2, (-3 missing), +3.
        assert_eq!(offsets, vec![-1, 1, 2, 3]);
    }

    #[test]
    fn pool_prefers_four_neighbors() {
        let idx = pool_fixture(0.2, &[0.01, 0.02, 0.03, 0.04, 0.05], 5);
        let pool = build_pool(&idx, &FrameRef::new("x", 1)).unwrap();
        assert_eq!(pool.neighbor_count(), 4);
        assert_eq!(pool.len(), 4);
    }

    #[test]
    fn first_frame_uses_succeeding_frame() {
        let idx = pool_fixture(0.1, &[0.25], 3);
        let pool = build_pool(&idx, &FrameRef::new("x", 0)).unwrap();
        assert_eq!(pool.reference, Some(FrameRef::new("x", 1)));
        assert!((pool.threshold - 0.3).abs() < 1e-9);
    }

    #[test]
    fn lone_frame_pool_is_empty() {
        let idx = EmbeddingIndex::build("t", vec![rec("x", 0, 0, vec![1.0, 0.0])]).unwrap();
        assert_eq!(build_pool(&idx, &FrameRef::new("x", 0)), Err(EmbedError::EmptyPool));
    }

    #[test]
    fn pair_sampling() {
        let idx = pool_fixture(0.1, &[0.9], 2);
        let pool = build_pool(&idx, &FrameRef::new("x", 1)).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(sample_pair(&pool, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err(), EmbedError::InsufficientPool(1));

        let idx = pool_fixture(0.1, &[0.9], 3);
        let pool = build_pool(&idx, &FrameRef::new("x", 1)).unwrap();
        for seed in 0..20 {
            let (a, b) = sample_pair(&pool, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut pair = [a.frame.index, b.frame.index];
            pair.sort();
            assert_eq!(pair, [0, 2]);
        }

        let idx = pool_fixture(0.1, &[0.9], 5);
        let pool = build_pool(&idx, &FrameRef::new("x", 2)).unwrap();
        let draw = |seed| {
            let (a, b) = sample_pair(&pool, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            (a.frame.clone(), b.frame.clone())
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn pair_frequencies_are_uniform() {
        let idx = pool_fixture(0.1, &[0.9], 5);
        let pool = build_pool(&idx, &FrameRef::new("x", 2)).unwrap();
        assert_eq!(pool.len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        let draws = 60_000;
        for _ in 0..draws {
            let (a, b) = sample_pair(&pool, &mut rng).unwrap();
            let (a, b) = (a.frame.key(), b.frame.key());
            let key = if a < b { (a, b) } else { (b, a) };
            *counts.entry(key).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (pair, c) in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{pair:?}: {c}");
        }
    }

    #[test]
    fn head_examples() {
        let head = LinearHead::zeros(3, 4, HeadMode::SingleLabel);
        let s = classify_video(&[1.0, 2.0, 3.0, 4.0], &head).unwrap();
        assert!(s.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(matches!(classify_video(&[1.0], &head), Err(EmbedError::ShapeError { .. })));

        let mut eye = LinearHead::zeros(3, 3, HeadMode::MultiLabel);
        for i in 0..3 {
            eye.weights[i * 3 + i] = 1.0;
        }
        let s = classify_video(&[0.1, 5.0, -1.0], &eye).unwrap();
        assert_eq!(argmax(&s), 1);
        assert!(s.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
    }

    #[test]
    fn head_fits_separable_video_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers = [[3.0, 0.0, 0.0, 1.0], [0.0, 3.0, 0.0, 1.0], [0.0, 0.0, 3.0, 1.0]];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..150 {
            let y = rng.gen_range(0..3);
            xs.push(centers[y].iter().map(|c| c + rng.gen_range(-0.8..0.8)).collect::<Vec<f64>>());
            ys.push(y);
        }
        let mut head = LinearHead::zeros(3, 4, HeadMode::SingleLabel);
        head.fit_single_label(&xs, &ys, 300, 0.5).unwrap();
        let correct = xs.iter().zip(&ys).filter(|(x, y)| argmax(&classify_video(x, &head).unwrap()) == **y).count();
        assert!(correct as f64 / xs.len() as f64 >= 0.95, "{correct}/150");
    }

    proptest! {
        #[test]
        fn softmax_argmax_is_scale_invariant(
            w in proptest::collection::vec(-3.0f64..3.0, 12),
            v in proptest::collection::vec(-3.0f64..3.0, 4),
            scale in 0.01f64..100.0,
        ) {
            let head = LinearHead { classes: 3, dim: 4, weights: w, bias: vec![0.0; 3], mode: HeadMode::SingleLabel };
            let z = head.logits(&v).unwrap();
            let mut sorted = z.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            prop_assert_eq!(argmax(&classify_video(&v, &head).unwrap()), argmax(&classify_video(&scaled, &head).unwrap()));
        }
    }

    #[test]
    fn bin_and_jsonl_formats() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![rec("a", 0, 3, vec![0.5, -1.25]), rec("b-long_id", 17, 0, vec![2.0, 4.0])];
        let bin = dir.path().join("e.bin");
        write_embeddings_bin(&bin, &records).unwrap();
        assert_eq!(load_embeddings(&bin).unwrap(), records);
        let jsonl = dir.path().join("e.jsonl");
        let text: String = records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        fs::write(&jsonl, text).unwrap();
        assert_eq!(load_embeddings(&jsonl).unwrap(), records);
    }
}
