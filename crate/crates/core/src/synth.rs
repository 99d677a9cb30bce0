//! Synthetic corpus with planted surgical spans, for end-to-end runs without real video.
//!
//! Every video gets a known per-second surgical/non-surgical sequence; scores
//! binarize back to it exactly at `theta = 0.5`.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::PROCEDURES;
use crate::curate::{BoxSet, DetBox, FrameScore};
use crate::pipeline::SourceEntry;
use crate::video::RawVideo;

pub const SYNTH_FPS: f64 = 2.0;
pub const SYNTH_WIDTH: u32 = 24;
pub const SYNTH_HEIGHT: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedKind {
    Eligible,
    /// No run of three surgical seconds.
    NoSpan,
    /// Too many non-surgical seconds inside the span.
    Noisy,
    /// One score missing.
    MissingScore,
    /// Title matches no procedure and there is no LLM.
    UnmatchedTitle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedVideo {
    pub video_id: String,
    pub title: String,
    pub kind: PlantedKind,
    pub labels: Vec<bool>,
    /// Procedure named in the title, if any.
    pub procedure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub videos: Vec<PlantedVideo>,
    pub sources: Vec<SourceEntry>,
    pub scores: Vec<FrameScore>,
    pub boxes: Vec<BoxSet>,
}

/// Mix of the 20-video corpus: 14 eligible plus one or two of each failure.
pub const DEFAULT_MIX: [(PlantedKind, usize); 5] = [
    (PlantedKind::Eligible, 14),
    (PlantedKind::NoSpan, 2),
    (PlantedKind::Noisy, 2),
    (PlantedKind::MissingScore, 1),
    (PlantedKind::UnmatchedTitle, 1),
];

fn eligible_labels(rng: &mut ChaCha8Rng) -> Vec<bool> {
    let lead = rng.gen_range(0..5);
    let tail = rng.gen_range(0..5);
    let core = rng.gen_range(12..30);
    let mut labels = vec![false; lead];
    // A lone surgical second before the span must not start it.
    if lead >= 3 && rng.gen_bool(0.5) {
        labels[1] = true;
    }
    let mut middle = vec![true; core];
    let holes = rng.gen_range(0..=core / 10);
    let mut slots: Vec<usize> = (3..core - 3).collect();
    slots.shuffle(rng);
    for &s in slots.iter().take(holes) {
        middle[s] = false;
    }
    labels.extend(middle);
    labels.extend(vec![false; tail]);
    labels
}

fn no_span_labels(rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = rng.gen_range(12..30);
    (0..n).map(|i| i % 3 != 2 && rng.gen_bool(0.8)).collect()
}

fn noisy_labels(rng: &mut ChaCha8Rng) -> Vec<bool> {
    let core = rng.gen_range(12..24);
    let mut labels = vec![false; rng.gen_range(0..3)];
    let mut middle = vec![true; core];
    // Alternate inside the end runs: roughly a third of the span is non-surgical.
    for i in (4..core - 3).step_by(3) {
        middle[i] = false;
    }
    labels.extend(middle);
    labels.push(false);
    labels
}

fn frame_image(video: usize, t: usize, surgical: bool) -> RgbImage {
    let base = if surgical { Rgb([190, 40, 50]) } else { Rgb([110, 110, 120]) };
    let mut img = RgbImage::from_pixel(SYNTH_WIDTH, SYNTH_HEIGHT, base);
    img.put_pixel(0, 0, Rgb([video as u8, (t % 256) as u8, (t / 256) as u8]));
    img
}

/// Writes videos plus `sources.jsonl`, `scores.jsonl` and `boxes.jsonl` under `dir`.
pub fn generate_corpus(dir: &Path, mix: &[(PlantedKind, usize)], seed: u64) -> std::io::Result<SyntheticCorpus> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<PlantedKind> = mix.iter().flat_map(|(k, n)| std::iter::repeat(*k).take(*n)).collect();
    kinds.shuffle(&mut rng);
    let mut corpus = SyntheticCorpus {
        videos: Vec::new(),
        sources: Vec::new(),
        scores: Vec::new(),
        boxes: Vec::new(),
    };
    for (v, kind) in kinds.into_iter().enumerate() {
        let video_id = format!("syn{v:02}");
        let labels = match kind {
            PlantedKind::NoSpan => no_span_labels(&mut rng),
            PlantedKind::Noisy => noisy_labels(&mut rng),
            _ => eligible_labels(&mut rng),
        };
        let (title, procedure) = if kind == PlantedKind::UnmatchedTitle {
            (format!("Surgical video {v} with narration"), None)
        } else {
            let p = PROCEDURES[rng.gen_range(0..PROCEDURES.len())];
            let prefix = if rng.gen_bool(0.5) { "Robotic" } else { "Laparoscopic" };
            (format!("{prefix} {p} case {v}"), Some(p.to_string()))
        };
        let native: Vec<RgbImage> = labels
            .iter()
            .enumerate()
            .flat_map(|(t, &s)| {
                let img = frame_image(v, t, s);
                [img.clone(), img]
            })
            .collect();
        let path = dir.join(format!("{video_id}.lrv"));
        RawVideo::write(&path, SYNTH_FPS, &native)?;
        let skip = (kind == PlantedKind::MissingScore).then(|| rng.gen_range(0..labels.len()));
        for (t, &s) in labels.iter().enumerate() {
            if Some(t) == skip {
                continue;
            }
            // Exactly 0.5 sits on the inclusive side of the threshold.
            let p = if s {
                if rng.gen_bool(0.2) {
                    0.5
                } else {
                    rng.gen_range(0.5..=1.0)
                }
            } else {
                rng.gen_range(0.0..0.499)
            };
            corpus.scores.push(FrameScore {
                video_id: video_id.clone(),
                index: t,
                p_surgical: p,
            });
            if rng.gen_bool(0.3) {
                let conf = if rng.gen_bool(0.5) { 0.9 } else { 0.1 };
                corpus.boxes.push(BoxSet {
                    video_id: video_id.clone(),
                    index: t,
                    boxes: vec![DetBox {
                        x: rng.gen_range(0.0..12.0),
                        y: rng.gen_range(0.0..8.0),
                        w: 8.0,
                        h: 6.0,
                        conf,
                    }],
                });
            }
        }
        corpus.sources.push(SourceEntry {
            source: path.display().to_string(),
            title: title.clone(),
            video_id: Some(video_id.clone()),
        });
        corpus.videos.push(PlantedVideo {
            video_id,
            title,
            kind,
            labels,
            procedure,
        });
    }
    write_jsonl(&dir.join("sources.jsonl"), &corpus.sources)?;
    write_jsonl(&dir.join("scores.jsonl"), &corpus.scores)?;
    write_jsonl(&dir.join("boxes.jsonl"), &corpus.boxes)?;
    Ok(corpus)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let text: String = items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
        .collect();
    fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Longest-run scan, independent of the trimming code.
    fn oracle_export(labels: &[bool]) -> Option<usize> {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < labels.len() {
            if labels[i] {
                let s = i;
                while i < labels.len() && labels[i] {
                    i += 1;
                }
                runs.push((s, i - 1));
            } else {
                i += 1;
            }
        }
        let long: Vec<_> = runs.into_iter().filter(|(s, e)| e - s + 1 >= 3).collect();
        let (start, end) = (long.first()?.0, long.last()?.1);
        let window = &labels[start..=end];
        let bad = window.iter().filter(|s| !**s).count();
        (bad as f64 / window.len() as f64 <= 0.10).then(|| window.len() - bad)
    }

    #[test]
    fn planted_kinds_hold() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(dir.path(), &DEFAULT_MIX, 7).unwrap();
        assert_eq!(c.videos.len(), 20);
        for v in &c.videos {
            let exported = oracle_export(&v.labels);
            match v.kind {
                PlantedKind::NoSpan | PlantedKind::Noisy => assert!(exported.is_none(), "{v:?}"),
                _ => assert!(exported.is_some(), "{v:?}"),
            }
            let scored = c.scores.iter().filter(|s| s.video_id == v.video_id).count();
            let expect = v.labels.len() - usize::from(v.kind == PlantedKind::MissingScore);
            assert_eq!(scored, expect);
        }
        for s in &c.scores {
            let v = c.videos.iter().find(|v| v.video_id == s.video_id).unwrap();
            assert_eq!(s.p_surgical >= 0.5, v.labels[s.index]);
        }
        assert!(dir.path().join("syn00.lrv").is_file());
        assert_eq!(fs::read_to_string(dir.path().join("sources.jsonl")).unwrap().lines().count(), 20);
    }

    #[test]
    fn same_seed_same_corpus() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ca = generate_corpus(a.path(), &DEFAULT_MIX, 3).unwrap();
        let cb = generate_corpus(b.path(), &DEFAULT_MIX, 3).unwrap();
        assert_eq!(ca.videos, cb.videos);
        assert_eq!(ca.scores, cb.scores);
    }
}
