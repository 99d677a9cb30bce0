//! Augmented teacher/student distillation.
//!
//! For an image `x` the teacher sees two global views `U`; the student sees
//! `V` (the same two globals plus four local crops) and `W` (two images drawn
//! from the augmentation pool plus two crops of each). Every pair `(u, v)`
//! with `u in U`, `v in V u W`, `u != v` contributes
//!
//! ```text
//! d(u, v) - n(u, v),   d = log sum_k exp(s_k),   n = s_{z*}
//! ```
//!
//! where `s` is the student's tempered softmax on `v` and `z*` the argmax of
//! the centered teacher softmax on `u`. The log-sum-exp runs over softmax
//! outputs, not logits. The total loss is the mean over the 22 pairs.
//!
//! The toy trainer below drives the objective with a two-layer MLP on small
//! synthetic images, full batch, with an EMA teacher and output centering.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{self, EmbedError, EmbeddingIndex, EmbeddingRecord, Scope};
use crate::frames::FrameRef;

pub const GLOBAL_VIEWS: usize = 2;
pub const LOCAL_VIEWS: usize = 4;
pub const POOL_VIEWS: usize = 6;
pub const STUDENT_VIEWS: usize = GLOBAL_VIEWS + LOCAL_VIEWS + POOL_VIEWS;
pub const PAIR_COUNT: usize = GLOBAL_VIEWS * STUDENT_VIEWS - GLOBAL_VIEWS;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_len(expected: usize, got: usize) -> Result<(), DistillError> {
    if expected == got {
        Ok(())
    } else {
        Err(DistillError::Shape { expected, got })
    }
}

/// `softmax((z - c) / T)` with max subtraction.
pub fn tempered_softmax(logits: &[f64], temperature: f64, center: Option<&[f64]>) -> Result<Vec<f64>, DistillError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(DistillError::Numeric(format!("temperature {temperature}")));
    }
    if logits.is_empty() {
        return Err(DistillError::Shape { expected: 1, got: 0 });
    }
    if let Some(c) = center {
        check_len(logits.len(), c.len())?;
    }
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(k, z)| (z - center.map_or(0.0, |c| c[k])) / temperature)
        .collect();
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::Numeric("non-finite logits".into()));
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `d - n` for one (teacher view, student view) pair.
pub fn loss_pair(teacher_sm: &[f64], student_sm: &[f64]) -> Result<f64, DistillError> {
    check_len(teacher_sm.len(), student_sm.len())?;
    Ok(loss_for_target(student_sm, argmax(teacher_sm)))
}

fn loss_for_target(student_sm: &[f64], target: usize) -> f64 {
    log_sum_exp(student_sm) - student_sm[target]
}

/// Gradient of the pair loss with respect to the student's logits.
///
/// With `s = softmax(z / T)` and `g_k = softmax(s)_k - [k = z*]`,
/// `dL/dz_j = s_j (g_j - sum_k g_k s_k) / T`.
pub fn grad_student(logits: &[f64], teacher_sm: &[f64], student_temp: f64) -> Result<Vec<f64>, DistillError> {
    check_len(teacher_sm.len(), logits.len())?;
    let s = tempered_softmax(logits, student_temp, None)?;
    Ok(grad_from_softmax(&s, argmax(teacher_sm), student_temp))
}

fn grad_from_softmax(s: &[f64], target: usize, student_temp: f64) -> Vec<f64> {
    let outer = tempered_softmax(s, 1.0, None).expect("softmax outputs are finite");
    let g: Vec<f64> = outer
        .iter()
        .enumerate()
        .map(|(k, p)| p - if k == target { 1.0 } else { 0.0 })
        .collect();
    let gs: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
    s.iter().zip(&g).map(|(sj, gj)| sj * (gj - gs) / student_temp).collect()
}

/// `theta_t <- l * theta_t + (1 - l) * theta_s`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], l: f64) -> Result<(), DistillError> {
    check_len(teacher.len(), student.len())?;
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = l * *t + (1.0 - l) * s;
    }
    Ok(())
}

/// `c <- m * c + (1 - m) * mean(batch)`.
pub fn center_update(center: &mut [f64], batch: &[Vec<f64>], m: f64) -> Result<(), DistillError> {
    let mean = batch_mean(batch, center.len())?;
    for (c, b) in center.iter_mut().zip(&mean) {
        *c = m * *c + (1.0 - m) * b;
    }
    Ok(())
}

fn batch_mean(batch: &[Vec<f64>], dim: usize) -> Result<Vec<f64>, DistillError> {
    if batch.is_empty() {
        return Err(DistillError::EmptyBatch);
    }
    let mut mean = vec![0.0; dim];
    for row in batch {
        check_len(dim, row.len())?;
        mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= batch.len() as f64);
    Ok(mean)
}

/// Maps one input view to `C` logits.
pub trait Encoder: Sync {
    fn encode(&self, x: &[f64]) -> Vec<f64>;
}

/// All views of one anchor image. Student view order: globals, locals, pool views.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub globals: [Vec<f64>; GLOBAL_VIEWS],
    pub locals: [Vec<f64>; LOCAL_VIEWS],
    pub pool: [Vec<f64>; POOL_VIEWS],
}

impl ViewSet {
    pub fn student_views(&self) -> Vec<&[f64]> {
        self.globals
            .iter()
            .chain(&self.locals)
            .chain(&self.pool)
            .map(Vec::as_slice)
            .collect()
    }

    pub fn teacher_views(&self) -> Vec<&[f64]> {
        self.globals.iter().map(Vec::as_slice).collect()
    }

    /// Views for `anchor` with `pool_pair` drawn from its augmentation pool.
    pub fn augment<R: Rng + ?Sized>(anchor: &[f64], pool_pair: (&[f64], &[f64]), side: usize, rng: &mut R) -> Self {
        let g = |x: &[f64], rng: &mut R| global_view(x, rng);
        let c = |x: &[f64], rng: &mut R| local_crop(x, side, rng);
        let (p, q) = pool_pair;
        ViewSet {
            globals: [g(anchor, rng), g(anchor, rng)],
            locals: [c(anchor, rng), c(anchor, rng), c(anchor, rng), c(anchor, rng)],
            pool: [g(p, rng), g(q, rng), c(p, rng), c(p, rng), c(q, rng), c(q, rng)],
        }
    }
}

/// `(teacher view, student view)` index pairs in the fixed reduction order.
/// Teacher view `u` is the same tensor as student view `u`.
pub fn view_pairs() -> Vec<(usize, usize)> {
    (0..GLOBAL_VIEWS)
        .flat_map(|u| (0..STUDENT_VIEWS).filter(move |v| *v != u).map(move |v| (u, v)))
        .collect()
}

/// Mean pair loss over one view set.
pub fn loss_total(
    views: &ViewSet,
    student: &dyn Encoder,
    teacher: &dyn Encoder,
    center: Option<&[f64]>,
    teacher_temp: f64,
    student_temp: f64,
) -> Result<f64, DistillError> {
    let teacher_sm = views
        .teacher_views()
        .into_iter()
        .map(|u| tempered_softmax(&teacher.encode(u), teacher_temp, center))
        .collect::<Result<Vec<_>, _>>()?;
    let student_sm = views
        .student_views()
        .into_iter()
        .map(|v| tempered_softmax(&student.encode(v), student_temp, None))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for (u, v) in view_pairs() {
        total += loss_pair(&teacher_sm[u], &student_sm[v])?;
    }
    Ok(total / PAIR_COUNT as f64)
}

fn global_view<R: Rng + ?Sized>(x: &[f64], rng: &mut R) -> Vec<f64> {
    let gain = rng.gen_range(0.8..1.2);
    let shift = rng.gen_range(-0.1..0.1);
    x.iter().map(|v| gain * v + shift + rng.gen_range(-0.05..0.05)).collect()
}

/// Keeps a random `side/2` square window and blanks the rest.
fn local_crop<R: Rng + ?Sized>(x: &[f64], side: usize, rng: &mut R) -> Vec<f64> {
    let w = (side / 2).max(1);
    let (r0, c0) = (rng.gen_range(0..=side - w), rng.gen_range(0..=side - w));
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let (r, c) = (i / side, i % side);
            if (r0..r0 + w).contains(&r) && (c0..c0 + w).contains(&c) {
                v + rng.gen_range(-0.05..0.05)
            } else {
                0.0
            }
        })
        .collect()
}

/// `input -> tanh(hidden) -> output`, parameters in one flat vector
/// `[W1 (hidden x input), b1, W2 (output x hidden), b2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub params: Vec<f64>,
}

struct Activations {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Mlp {
    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        hidden * input + hidden + output * hidden + output
    }

    /// Uniform fan-in init; the output layer is scaled by `output_scale`.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, output_scale: f64, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(Self::param_count(input, hidden, output));
        let a1 = 1.0 / (input as f64).sqrt();
        params.extend((0..hidden * input).map(|_| rng.gen_range(-a1..a1)));
        params.extend(std::iter::repeat(0.0).take(hidden));
        let a2 = output_scale / (hidden as f64).sqrt();
        params.extend((0..output * hidden).map(|_| rng.gen_range(-a2..a2)));
        params.extend(std::iter::repeat(0.0).take(output));
        Mlp {
            input,
            hidden,
            output,
            params,
        }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        (b1, w2, w2 + self.output * self.hidden)
    }

    fn forward(&self, x: &[f64]) -> Activations {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &p[h * self.input..(h + 1) * self.input];
                (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p[b1 + h]).tanh()
            })
            .collect();
        let logits = (0..self.output)
            .map(|o| {
                let row = &p[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
                row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>() + p[b2 + o]
            })
            .collect();
        Activations { hidden, logits }
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/dlogits`.
    fn backward(&self, x: &[f64], act: &Activations, dlogits: &[f64], grad: &mut [f64]) {
        let (b1, w2, b2) = self.offsets();
        let mut dhidden = vec![0.0; self.hidden];
        for (o, d) in dlogits.iter().enumerate() {
            grad[b2 + o] += d;
            let row = w2 + o * self.hidden;
            for h in 0..self.hidden {
                grad[row + h] += d * act.hidden[h];
                dhidden[h] += d * self.params[row + h];
            }
        }
        for h in 0..self.hidden {
            let dpre = dhidden[h] * (1.0 - act.hidden[h] * act.hidden[h]);
            grad[b1 + h] += dpre;
            let row = h * self.input;
            for (i, v) in x.iter().enumerate() {
                grad[row + i] += dpre * v;
            }
        }
    }
}

impl Encoder for Mlp {
    fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).logits
    }
}

fn default_classes() -> usize {
    256
}
fn default_teacher_temp() -> f64 {
    0.04
}
fn default_student_temp() -> f64 {
    0.1
}
fn default_lr() -> f64 {
    0.3
}
fn default_steps() -> usize {
    200
}
fn default_seed() -> u64 {
    30
}
fn default_scope() -> Scope {
    Scope::SameProcedureCrossVideo
}
fn default_true() -> bool {
    true
}

/// Synthetic data and network sizes for the toy trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub procedures: usize,
    pub videos_per_procedure: usize,
    pub frames_per_video: usize,
    /// Images are `side x side` grayscale.
    pub side: usize,
    pub hidden: usize,
    pub output_init_scale: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            procedures: 3,
            videos_per_procedure: 4,
            frames_per_video: 10,
            side: 8,
            hidden: 32,
            output_init_scale: 0.2,
        }
    }
}

/// Experiment file. `l` and `m` have no defaults so recorded runs always state them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(rename = "C", default = "default_classes")]
    pub classes: usize,
    #[serde(rename = "T_t", default = "default_teacher_temp")]
    pub teacher_temp: f64,
    /// Student temperature; only the teacher's is fixed by the method.
    #[serde(rename = "T_s", default = "default_student_temp")]
    pub student_temp: f64,
    /// Teacher EMA momentum.
    pub l: f64,
    /// Center momentum.
    pub m: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_scope")]
    pub pool_scope: Scope,
    #[serde(default = "default_true")]
    pub centering: bool,
    #[serde(default)]
    pub toy: ToySpec,
}

impl DistillConfig {
    pub fn new(classes: usize, l: f64, m: f64) -> Self {
        DistillConfig {
            classes,
            teacher_temp: default_teacher_temp(),
            student_temp: default_student_temp(),
            l,
            m,
            lr: default_lr(),
            steps: default_steps(),
            seed: default_seed(),
            pool_scope: default_scope(),
            centering: true,
            toy: ToySpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, DistillError> {
        let cfg: DistillConfig = toml::from_str(text).map_err(|e| DistillError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, DistillError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Checks for an experiment file: `0 < T_t <= T_s`, `0 < l, m < 1`, `C >= 2`.
    pub fn validate(&self) -> Result<(), DistillError> {
        self.validate_trainable()?;
        if !(self.l > 0.0 && self.l < 1.0) || !(self.m > 0.0 && self.m < 1.0) {
            return Err(DistillError::Config("momenta l and m must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// The trainer also runs the degenerate momenta 0 and 1 (frozen teacher or center).
    fn validate_trainable(&self) -> Result<(), DistillError> {
        let bad = |m: &str| Err(DistillError::Config(m.into()));
        if self.classes < 2 {
            return bad("C must be at least 2");
        }
        if !(self.teacher_temp > 0.0 && self.teacher_temp <= self.student_temp && self.student_temp.is_finite()) {
            return bad("temperatures must satisfy 0 < T_t <= T_s");
        }
        if !(0.0..=1.0).contains(&self.l) || !(0.0..=1.0).contains(&self.m) {
            return bad("momenta must lie in [0, 1]");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        let t = &self.toy;
        if t.procedures == 0 || t.videos_per_procedure == 0 || t.frames_per_video < 3 || t.side < 2 || t.hidden == 0 {
            return bad("toy dataset needs at least one procedure and video, three frames per video, side >= 2");
        }
        if t.procedures * t.videos_per_procedure * t.frames_per_video > 2000 {
            return bad("toy dataset is limited to 2000 items");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyItem {
    pub video_id: String,
    pub index: usize,
    pub procedure: u32,
    pub pixels: Vec<f64>,
}

/// Oriented sinusoidal gratings, one orientation per procedure, with a per-video
/// phase and gain and a slow per-frame drift.
pub fn toy_dataset(spec: &ToySpec, seed: u64) -> Vec<ToyItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for p in 0..spec.procedures {
        let angle = p as f64 * PI / spec.procedures as f64;
        let (dx, dy) = (angle.cos(), angle.sin());
        for v in 0..spec.videos_per_procedure {
            let phase = rng.gen_range(0.0..2.0 * PI);
            let gain = rng.gen_range(0.3..0.45);
            let video_id = format!("p{p}-v{v}");
            for f in 0..spec.frames_per_video {
                let drift = 0.15 * f as f64;
                let pixels = (0..spec.side * spec.side)
                    .map(|i| {
                        let (r, c) = ((i / spec.side) as f64, (i % spec.side) as f64);
                        0.5 + gain * (1.4 * (c * dx + r * dy) + phase + drift).sin() + rng.gen_range(-0.03..0.03)
                    })
                    .collect();
                items.push(ToyItem {
                    video_id: video_id.clone(),
                    index: f,
                    procedure: p as u32,
                    pixels,
                });
            }
        }
    }
    items
}

/// One fixed view set per item; pool images come from pixel-space augmentation pools.
pub fn toy_views(items: &[ToyItem], cfg: &DistillConfig) -> Result<Vec<ViewSet>, DistillError> {
    let records = items
        .iter()
        .map(|it| EmbeddingRecord {
            video_id: it.video_id.clone(),
            index: it.index,
            procedure: it.procedure,
            values: it.pixels.clone(),
        })
        .collect();
    let index = EmbeddingIndex::build("toy-pixels", records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut views = Vec::with_capacity(items.len());
    for it in items {
        let pool = embed::build_pool_scoped(&index, &FrameRef::new(it.video_id.clone(), it.index), cfg.pool_scope)?;
        let (a, b) = embed::sample_pair(&pool, &mut rng)?;
        let pixels = |f: &FrameRef| &index.get(&f.video_id, f.index).expect("pool frames are indexed").values;
        views.push(ViewSet::augment(&it.pixels, (pixels(&a.frame), pixels(&b.frame)), cfg.toy.side, &mut rng));
    }
    Ok(views)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<TraceStep>,
    pub student: Mlp,
    pub teacher: Mlp,
    pub center: Vec<f64>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.trace.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|s| s.loss)
    }
}

struct ItemPass {
    loss: f64,
    grad: Vec<f64>,
    teacher_logits: Vec<Vec<f64>>,
}

fn item_pass(views: &ViewSet, student: &Mlp, teacher: &Mlp, center: Option<&[f64]>, cfg: &DistillConfig) -> Result<ItemPass, DistillError> {
    let teacher_logits: Vec<Vec<f64>> = views.teacher_views().into_iter().map(|u| teacher.encode(u)).collect();
    let targets = teacher_logits
        .iter()
        .map(|z| tempered_softmax(z, cfg.teacher_temp, center).map(|s| argmax(&s)))
        .collect::<Result<Vec<_>, _>>()?;
    let inputs = views.student_views();
    let acts: Vec<Activations> = inputs.iter().map(|v| student.forward(v)).collect();
    let sms = acts
        .iter()
        .map(|a| tempered_softmax(&a.logits, cfg.student_temp, None))
        .collect::<Result<Vec<_>, _>>()?;
    let mut loss = 0.0;
    let mut dlogits = vec![vec![0.0; cfg.classes]; STUDENT_VIEWS];
    for (u, v) in view_pairs() {
        loss += loss_for_target(&sms[v], targets[u]);
        for (d, g) in dlogits[v].iter_mut().zip(grad_from_softmax(&sms[v], targets[u], cfg.student_temp)) {
            *d += g / PAIR_COUNT as f64;
        }
    }
    let mut grad = vec![0.0; student.params.len()];
    for ((x, act), d) in inputs.iter().zip(&acts).zip(&dlogits) {
        student.backward(x, act, d, &mut grad);
    }
    Ok(ItemPass {
        loss: loss / PAIR_COUNT as f64,
        grad,
        teacher_logits,
    })
}

/// Full-batch gradient descent on the mean loss over `views`. The teacher starts
/// as a copy of the student; the center starts at the first batch's teacher mean.
pub fn toy_train(views: &[ViewSet], cfg: &DistillConfig) -> Result<TrainOutcome, DistillError> {
    cfg.validate_trainable()?;
    if views.is_empty() {
        return Err(DistillError::EmptyBatch);
    }
    let input = views[0].globals[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut student = Mlp::init(input, cfg.toy.hidden, cfg.classes, cfg.toy.output_init_scale, &mut rng);
    let mut teacher = student.clone();
    let mut center: Option<Vec<f64>> = None;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cfg.centering && center.is_none() {
            let outputs: Vec<Vec<f64>> = views
                .iter()
                .flat_map(|vs| vs.teacher_views().into_iter().map(|u| teacher.encode(u)))
                .collect();
            center = Some(batch_mean(&outputs, cfg.classes)?);
        }
        let passes = views
            .par_iter()
            .map(|vs| item_pass(vs, &student, &teacher, center.as_deref(), cfg))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| match e {
                DistillError::Numeric(_) => DistillError::Diverged { step, loss: f64::NAN },
                other => other,
            })?;
        // Sequential reduction keeps the trace bit-reproducible.
        let n = passes.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; student.params.len()];
        for p in &passes {
            loss += p.loss;
            grad.iter_mut().zip(&p.grad).for_each(|(a, b)| *a += b);
        }
        loss /= n;
        grad.iter_mut().for_each(|g| *g /= n);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(DistillError::Diverged { step, loss });
        }
        trace.push(TraceStep { step, loss, grad_norm });
        student.params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= cfg.lr * g);
        ema_update(&mut teacher.params, &student.params, cfg.l)?;
        if let Some(c) = center.as_mut() {
            let outputs: Vec<Vec<f64>> = passes.into_iter().flat_map(|p| p.teacher_logits).collect();
            center_update(c, &outputs, cfg.m)?;
        }
    }
    Ok(TrainOutcome {
        trace,
        student,
        teacher,
        center: center.unwrap_or_else(|| vec![0.0; cfg.classes]),
    })
}

/// Builds the toy dataset and views from `cfg` and trains.
pub fn run_toy(cfg: &DistillConfig) -> Result<TrainOutcome, DistillError> {
    let items = toy_dataset(&cfg.toy, cfg.seed);
    let views = toy_views(&items, cfg)?;
    toy_train(&views, cfg)
}

/// Writes `steps.jsonl`, one `{step, loss, grad_norm}` object per line.
pub fn write_trace(path: &Path, trace: &[TraceStep]) -> Result<(), DistillError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in trace {
        writeln!(out, "{}", serde_json::to_string(s).map_err(|e| DistillError::Numeric(e.to_string()))?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceStep>, DistillError> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| DistillError::Numeric(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_distribution(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(1e-6..1.0f64).powi(3)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    fn one_hot(c: usize, k: usize) -> Vec<f64> {
        (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn softmax_examples() {
        let s = tempered_softmax(&[3.0; 5], 0.7, None).unwrap();
        assert!(s.iter().all(|p| (p - 0.2).abs() < 1e-15));
        let s = tempered_softmax(&[0.0, 10.0, 1.0], 0.01, None).unwrap();
        assert!(s[1] > 0.999);
        let a = tempered_softmax(&[0.3, -1.2, 2.0], 0.5, None).unwrap();
        let b = tempered_softmax(&[100.3, 98.8, 102.0], 0.5, None).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        let c = tempered_softmax(&[1.0, 2.0], 1.0, Some(&[0.0, 5.0])).unwrap();
        assert!(c[0] > c[1]);
        assert!(matches!(tempered_softmax(&[f64::NAN, 1.0], 1.0, None), Err(DistillError::Numeric(_))));
        assert!(matches!(tempered_softmax(&[1.0], 0.0, None), Err(DistillError::Numeric(_))));
    }

    #[test]
    fn loss_closed_forms() {
        let u = vec![0.25; 4];
        let loss = loss_pair(&one_hot(4, 2), &u).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let s = [0.97, 0.01, 0.01, 0.01];
        let aligned = loss_pair(&one_hot(4, 0), &s).unwrap();
        let misaligned = loss_pair(&one_hot(4, 1), &s).unwrap();
        // Reference evaluation of the closed form, independent of the softmax code.
        let d = (0.97f64.exp() + 3.0 * 0.01f64.exp()).ln();
        assert!((aligned - (d - 0.97)).abs() < 1e-12, "{aligned}");
        assert!((misaligned - (d - 0.01)).abs() < 1e-12, "{misaligned}");
        assert!((aligned - 0.76483).abs() < 1e-4);
        assert!((misaligned - 1.72483).abs() < 1e-4);
        assert!(matches!(loss_pair(&[0.5, 0.5], &u), Err(DistillError::Shape { .. })));
    }

    #[test]
    fn teacher_ties_break_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        let s = [0.1, 0.2, 0.7];
        assert_eq!(loss_pair(&[0.5, 0.5, 0.0], &s).unwrap(), loss_for_target(&s, 0));
    }

    #[test]
    fn loss_bounds_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let c = rng.gen_range(2..=64);
            let t = random_distribution(&mut rng, c);
            let s = random_distribution(&mut rng, c);
            let loss = loss_pair(&t, &s).unwrap();
            let (lo, hi) = ((c as f64).ln() + 1.0 / c as f64 - 1.0, (c as f64).ln() + 1.0);
            assert!(loss >= lo - 1e-12 && loss <= hi + 1e-12, "c={c} loss={loss}");
        }
    }

    #[test]
    fn aligned_never_worse_than_misaligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..2_000 {
            let c = rng.gen_range(2..=32);
            let s = random_distribution(&mut rng, c);
            let best = argmax(&s);
            let aligned = loss_pair(&one_hot(c, best), &s).unwrap();
            for k in 0..c {
                assert!(aligned <= loss_pair(&one_hot(c, k), &s).unwrap());
            }
        }
    }

    fn pair_loss_of_logits(z: &[f64], target: usize, t: f64) -> f64 {
        loss_for_target(&tempered_softmax(z, t, None).unwrap(), target)
    }

    fn finite_difference(z: &[f64], target: usize, t: f64) -> Vec<f64> {
        let h = 1e-5;
        (0..z.len())
            .map(|j| {
                let mut up = z.to_vec();
                let mut down = z.to_vec();
                up[j] += h;
                down[j] -= h;
                (pair_loss_of_logits(&up, target, t) - pair_loss_of_logits(&down, target, t)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let c = rng.gen_range(2..=64);
            let t = rng.gen_range(0.5..2.0);
            let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let teacher = one_hot(c, rng.gen_range(0..c));
            let analytic = grad_student(&z, &teacher, t).unwrap();
            let numeric = finite_difference(&z, argmax(&teacher), t);
            let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (a, n) in analytic.iter().zip(&numeric) {
                worst = worst.max((a - n).abs() / scale);
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn gradient_at_uniform_logits() {
        let z = vec![0.0; 8];
        let teacher = one_hot(8, 3);
        let a = grad_student(&z, &teacher, 1.0).unwrap();
        let n = finite_difference(&z, 3, 1.0);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&a) - norm(&n)).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn gradient_is_shift_invariant(z in proptest::collection::vec(-3.0f64..3.0, 2..40), k in 0usize..40, t in 0.05f64..2.0) {
            let k = k % z.len();
            let g = grad_student(&z, &one_hot(z.len(), k), t).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn ema_examples() {
        let mut t = vec![1.0];
        ema_update(&mut t, &[0.0], 0.9).unwrap();
        assert_eq!(t, vec![0.9]);
        let mut t = vec![0.3, -2.0];
        ema_update(&mut t, &[0.3, -2.0], 0.996).unwrap();
        assert_eq!(t, vec![0.3, -2.0]);
        assert!(matches!(ema_update(&mut t, &[1.0], 0.5), Err(DistillError::Shape { .. })));
    }

    #[test]
    fn ema_geometric_recursion_is_exact() {
        // Dyadic momenta keep every iterate representable, so equality is exact.
        for l in [0.5, 0.25] {
            let (t0, s) = (1.0, 3.0);
            let mut t = vec![t0];
            for k in 1..=50 {
                ema_update(&mut t, &[s], l).unwrap();
                assert_eq!(t[0], s + (t0 - s) * f64::powi(l, k), "l={l} k={k}");
            }
        }
        let mut t = vec![0.7];
        for k in 1..=50 {
            ema_update(&mut t, &[-0.2], 0.996).unwrap();
            let expected = -0.2 + 0.9 * 0.996f64.powi(k);
            assert!((t[0] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn center_examples() {
        let batch = vec![vec![1.0, 2.0], vec![3.0, 6.0]];
        let mut c = vec![10.0, 10.0];
        center_update(&mut c, &batch, 0.0).unwrap();
        assert_eq!(c, vec![2.0, 4.0]);
        let mut c = vec![10.0, 10.0];
        center_update(&mut c, &batch, 1.0).unwrap();
        assert_eq!(c, vec![10.0, 10.0]);
        assert!(matches!(center_update(&mut c, &[], 0.5), Err(DistillError::EmptyBatch)));
        let mut c = vec![0.0, 0.0];
        for k in 1..=50 {
            center_update(&mut c, &batch, 0.5).unwrap();
            let r = 1.0 - 0.5f64.powi(k);
            assert_eq!(c, vec![2.0 * r, 4.0 * r]);
        }
    }

    #[test]
    fn twenty_two_pairs() {
        let pairs = view_pairs();
        assert_eq!(pairs.len(), 22);
        assert_eq!(PAIR_COUNT, 22);
        assert!(pairs.iter().all(|(u, v)| u != v && *u < GLOBAL_VIEWS));
    }

    struct Constant(Vec<f64>);
    impl Encoder for Constant {
        fn encode(&self, _: &[f64]) -> Vec<f64> {
            self.0.clone()
        }
    }

    fn tiny_views(rng: &mut ChaCha8Rng, d: usize) -> ViewSet {
        let x: Vec<f64> = (0..d * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p: Vec<f64> = (0..d * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let q: Vec<f64> = (0..d * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        ViewSet::augment(&x, (&p, &q), d, rng)
    }

    #[test]
    fn uniform_encoders_give_log_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let views = tiny_views(&mut rng, 4);
        for c in [2usize, 4, 64, 256] {
            let enc = Constant(vec![0.0; c]);
            let loss = loss_total(&views, &enc, &enc, None, 0.04, 0.1).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_total_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let views = tiny_views(&mut rng, 4);
            let student = Mlp::init(16, 5, 6, 1.0, &mut rng);
            let teacher = Mlp::init(16, 5, 6, 1.0, &mut rng);
            let center: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let got = loss_total(&views, &student, &teacher, Some(&center), 0.04, 0.1).unwrap();
            let student_views = views.student_views();
            let mut expected = 0.0;
            let mut count = 0;
            for u in 0..2 {
                let zt: Vec<f64> = teacher.encode(&views.globals[u]).iter().zip(&center).map(|(z, c)| z - c).collect();
                let target = (0..6).fold(0, |b, k| if zt[k] > zt[b] { k } else { b });
                for (v, sv) in student_views.iter().enumerate() {
                    if v == u {
                        continue;
                    }
                    let zs: Vec<f64> = student.encode(sv).iter().map(|z| z / 0.1).collect();
                    let e: Vec<f64> = zs.iter().map(|z| z.exp()).collect();
                    let total: f64 = e.iter().sum();
                    let s: Vec<f64> = e.iter().map(|x| x / total).collect();
                    expected += s.iter().map(|p| p.exp()).sum::<f64>().ln() - s[target];
                    count += 1;
                }
            }
            assert_eq!(count, 22);
            assert!((got - expected / 22.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::init(6, 4, 3, 1.0, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = [0.3, -1.1, 0.7];
        let objective = |m: &Mlp| m.encode(&x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let act = mlp.forward(&x);
        let mut grad = vec![0.0; mlp.params.len()];
        mlp.backward(&x, &act, &w, &mut grad);
        for i in 0..mlp.params.len() {
            let mut up = mlp.clone();
            let mut down = mlp.clone();
            up.params[i] += 1e-6;
            down.params[i] -= 1e-6;
            let numeric = (objective(&up) - objective(&down)) / 2e-6;
            assert!((numeric - grad[i]).abs() < 1e-7, "param {i}");
        }
    }

    #[test]
    fn config_parsing() {
        let cfg = DistillConfig::from_toml("C = 8\nT_t = 0.04\nT_s = 0.1\nl = 0.996\nm = 0.9\nlr = 0.1\nsteps = 5\nseed = 30\npool_scope = \"same_procedure_cross_video\"\n").unwrap();
        assert_eq!(cfg.classes, 8);
        assert_eq!(cfg.steps, 5);
        let missing = DistillConfig::from_toml("C = 8\nl = 0.996\n");
        assert!(matches!(missing, Err(DistillError::Config(m)) if m.contains("`m`")));
        assert!(matches!(DistillConfig::from_toml("l = 1.0\nm = 0.9\n"), Err(DistillError::Config(_))));
        assert!(matches!(DistillConfig::from_toml("l = 0.9\nm = 0.9\nT_t = 0.2\nT_s = 0.1\n"), Err(DistillError::Config(_))));
        assert!(matches!(DistillConfig::from_toml("l = 0.9\nm = 0.9\nC = 1\n"), Err(DistillError::Config(_))));
        assert!(matches!(DistillConfig::from_toml("l = 0.9\nm = 0.9\nbogus = 1\n"), Err(DistillError::Config(_))));
    }

    fn small_config(steps: usize) -> DistillConfig {
        let mut cfg = DistillConfig::new(8, 0.996, 0.9);
        cfg.steps = steps;
        cfg.toy.videos_per_procedure = 2;
        cfg.toy.frames_per_video = 4;
        cfg
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let mut cfg = small_config(6);
        cfg.lr = 0.0;
        let out = run_toy(&cfg).unwrap();
        let first = out.trace[0].loss;
        assert!(out.trace.iter().all(|s| (s.loss - first).abs() < 1e-9));
    }

    #[test]
    fn unit_momentum_freezes_teacher() {
        let mut cfg = small_config(5);
        cfg.l = 1.0;
        let items = toy_dataset(&cfg.toy, cfg.seed);
        let views = toy_views(&items, &cfg).unwrap();
        let zero = toy_train(&views, &DistillConfig { steps: 0, ..cfg.clone() }).unwrap();
        let out = toy_train(&views, &cfg).unwrap();
        assert_eq!(out.teacher.params, zero.teacher.params);
        assert_ne!(out.student.params, zero.student.params);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = small_config(4);
        let a = run_toy(&cfg).unwrap();
        let b = run_toy(&cfg).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn divergence_aborts() {
        let cfg = small_config(3);
        let items = toy_dataset(&cfg.toy, cfg.seed);
        let mut views = toy_views(&items, &cfg).unwrap();
        views[3].locals[1][5] = f64::INFINITY;
        assert!(matches!(toy_train(&views, &cfg), Err(DistillError::Diverged { step: 0, .. })));
    }

    #[test]
    fn default_smoke_run_reduces_loss() {
        let start = std::time::Instant::now();
        let out = run_toy(&DistillConfig::new(8, 0.996, 0.9)).unwrap();
        let (first, last) = (out.initial_loss().unwrap(), out.final_loss().unwrap());
        assert_eq!(out.trace.len(), 200);
        assert!(last < 0.7 * first, "{first} -> {last}");
        eprintln!("smoke run {:?}", start.elapsed());
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.jsonl");
        let trace = vec![TraceStep { step: 0, loss: 1.5, grad_norm: 0.25 }, TraceStep { step: 1, loss: 1.25, grad_norm: 0.125 }];
        write_trace(&path, &trace).unwrap();
        assert_eq!(read_trace(&path).unwrap(), trace);
    }
}
