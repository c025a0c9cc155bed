//! Training loop, crossmodal batch sampling and the α/β sweep.
//!
//! Each mini-batch draws target-modality segments and, independently,
//! auxiliary-modality segments. The target loss, the auxiliary loss and
//! the crossmodal triplet loss on the shared embeddings are combined with
//! L2 regularisation and minimised with Adam. The auxiliary encoder only
//! takes part when `alpha` or `beta` is positive, so a run with both at 0
//! is the monomodal baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{SequenceDataset, UtteranceDataset};
use crate::encoders::{Params, Part, Predictions, Standardizer, TrainedModel};
use crate::error::{Error, Result};
use crate::losses::{compose_objective, cross_entropy_logits_grad, LossReport, ObjectiveConfig, RegressionLoss, Task};
use crate::metrics::{evaluate_regression, macro_f1, ClassificationEval, RegressionEval};
use crate::numkit::{Matrix, SeededRng};
use crate::triplet::{triplet_loss_grad, CrossmodalBatch, TripletForm};
use crate::Modality;

const VARIANCE_FLOOR: f64 = 1e-8;
/// Stream of the training seed that drives batch sampling.
pub const SAMPLER_STREAM: u64 = 0x5a4d_504c;

fn default_learning_rate() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    4
}
fn default_max_epochs() -> usize {
    20
}
fn default_delay() -> f64 {
    2.4
}
fn default_frame_rate() -> f64 {
    25.0
}
fn default_window() -> usize {
    200
}
fn default_stride() -> usize {
    10
}
fn default_retries() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Segments per modality in each mini-batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_delay")]
    pub delay_seconds: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f64,
    /// Length of the training subsequences drawn from each recording.
    #[serde(default = "default_window")]
    pub window_frames: usize,
    #[serde(default)]
    pub regression_loss: RegressionLoss,
    #[serde(default)]
    pub triplet_form: TripletForm,
    /// Frames with gold above this value form class 1 for the triplet loss.
    #[serde(default)]
    pub triplet_threshold: f64,
    /// Every n-th frame of a segment enters the triplet batch.
    #[serde(default = "default_stride")]
    pub triplet_stride: usize,
    /// Redraws allowed when a batch cannot be mined.
    #[serde(default = "default_retries")]
    pub max_resamples: usize,
    /// Mini-batches per epoch; by default one pass over the target frames
    /// (or utterances) in expectation.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveConfig) -> Self {
        Self {
            objective,
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            seed: 0,
            delay_seconds: default_delay(),
            frame_rate_hz: default_frame_rate(),
            window_frames: default_window(),
            regression_loss: RegressionLoss::default(),
            triplet_form: TripletForm::default(),
            triplet_threshold: 0.0,
            triplet_stride: default_stride(),
            max_resamples: default_retries(),
            batches_per_epoch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::usage("learning_rate must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::usage("batch_size must be at least 2 per modality"));
        }
        if self.max_epochs == 0 {
            return Err(Error::usage("max_epochs must be at least 1"));
        }
        if !(self.delay_seconds >= 0.0) || !self.delay_seconds.is_finite() {
            return Err(Error::usage("delay_seconds must be >= 0"));
        }
        if !(self.frame_rate_hz > 0.0) || !self.frame_rate_hz.is_finite() {
            return Err(Error::usage("frame_rate_hz must be positive"));
        }
        if self.window_frames < 2 || self.triplet_stride == 0 {
            return Err(Error::usage("window_frames must be >= 2 and triplet_stride >= 1"));
        }
        if !self.triplet_threshold.is_finite() {
            return Err(Error::usage("triplet_threshold must be finite"));
        }
        if let TripletForm::Hinge { margin } = self.triplet_form {
            if !margin.is_finite() || margin < 0.0 {
                return Err(Error::usage("hinge margin must be finite and >= 0"));
            }
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::usage("batches_per_epoch must be positive"));
        }
        Ok(())
    }

    pub fn delay_frames(&self) -> usize {
        (self.delay_seconds * self.frame_rate_hz).round() as usize
    }
}

/// Shifts the gold standard back by `round(delay × rate)` frames:
/// `features[0..T-k]` is paired with `gold[k..T]`.
pub fn compensate_delay(features: &Matrix, gold: &[f64], delay_seconds: f64, frame_rate: f64) -> Result<(Matrix, Vec<f64>)> {
    if features.rows() != gold.len() {
        return Err(Error::shape(format!("{} feature frames but {} gold values", features.rows(), gold.len())));
    }
    if !(delay_seconds >= 0.0) || !(frame_rate > 0.0) {
        return Err(Error::usage("delay must be >= 0 and frame rate > 0"));
    }
    let t = gold.len();
    let k = (delay_seconds * frame_rate).round() as usize;
    if t <= k {
        return Err(Error::degenerate(format!("sequence of {t} frames is not longer than the {k}-frame delay")));
    }
    Ok((features.slice_rows(0, t - k), gold[k..].to_vec()))
}

/// Per-feature mean and population variance over all frames, with the
/// variance floored at 1e-8.
pub fn fit_standardizer(features: &[&Matrix]) -> Result<Standardizer> {
    let d = features.first().map_or(0, |m| m.cols());
    let n: usize = features.iter().map(|m| m.rows()).sum();
    if n == 0 || d == 0 {
        return Err(Error::usage("cannot fit a standardizer on empty input"));
    }
    if features.iter().any(|m| m.cols() != d) {
        return Err(Error::shape("feature matrices disagree in width"));
    }
    let mut mean = vec![0.0; d];
    for m in features {
        for row in m.row_iter() {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let mut var = vec![0.0; d];
    for m in features {
        for row in m.row_iter() {
            for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
    }
    var.iter_mut().for_each(|a| *a = (*a / n as f64).max(VARIANCE_FLOOR));
    Ok(Standardizer { mean, var })
}

/// Raw data of one modality and partition.
#[derive(Debug, Clone, PartialEq)]
pub enum Corpus {
    Sequences(SequenceDataset),
    Utterances(UtteranceDataset),
}

impl Corpus {
    pub fn modality(&self) -> Modality {
        match self {
            Corpus::Sequences(d) => d.modality,
            Corpus::Utterances(d) => d.modality,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Corpus::Sequences(d) => d.feature_dim(),
            Corpus::Utterances(d) => d.feature_dim(),
        }
    }

    /// Embedding rows exported per item: frames or utterances.
    pub fn len(&self) -> usize {
        match self {
            Corpus::Sequences(d) => d.total_frames(),
            Corpus::Utterances(d) => d.utterances.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_task(&self, task: Task) -> Result<()> {
        match (self, task) {
            (Corpus::Sequences(_), Task::Regression { .. }) => Ok(()),
            (Corpus::Utterances(d), Task::Classification { classes }) if d.classes == classes => Ok(()),
            (Corpus::Utterances(d), Task::Classification { classes }) => Err(Error::usage(format!(
                "dataset has {} classes, model has {classes}",
                d.classes
            ))),
            _ => Err(Error::usage("dataset kind does not match the model task")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train_audio: Option<Corpus>,
    pub train_video: Option<Corpus>,
    pub dev_audio: Option<Corpus>,
    pub dev_video: Option<Corpus>,
}

impl TrainData {
    pub fn train(&self, m: Modality) -> Option<&Corpus> {
        match m {
            Modality::Audio => self.train_audio.as_ref(),
            Modality::Video => self.train_video.as_ref(),
        }
    }

    pub fn dev(&self, m: Modality) -> Option<&Corpus> {
        match m {
            Modality::Audio => self.dev_audio.as_ref(),
            Modality::Video => self.dev_video.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Frames(Vec<f64>),
    Label(usize),
}

/// A standardised, delay-aligned sequence ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Matrix,
    pub target: Target,
}

impl Example {
    fn len(&self) -> usize {
        self.features.rows()
    }
}

/// Standardises with the model's statistics and aligns gold to features.
pub fn prepare_corpus(model: &TrainedModel, corpus: &Corpus, delay_seconds: f64) -> Result<Vec<Example>> {
    let m = corpus.modality();
    match corpus {
        Corpus::Sequences(ds) => ds
            .recordings
            .iter()
            .map(|r| {
                let (x, gold) = compensate_delay(&r.features, &r.gold, delay_seconds, ds.frame_rate_hz)?;
                Ok(Example { id: r.id.clone(), features: model.standardize(m, &x)?, target: Target::Frames(gold) })
            })
            .collect(),
        Corpus::Utterances(ds) => ds
            .utterances
            .iter()
            .map(|u| {
                Ok(Example {
                    id: u.id.clone(),
                    features: model.standardize(m, &u.features)?,
                    target: Target::Label(u.label),
                })
            })
            .collect(),
    }
}

fn aligned_features(corpus: &Corpus, delay_seconds: f64) -> Result<Vec<Matrix>> {
    match corpus {
        Corpus::Sequences(ds) => ds
            .recordings
            .iter()
            .map(|r| Ok(compensate_delay(&r.features, &r.gold, delay_seconds, ds.frame_rate_hz)?.0))
            .collect(),
        Corpus::Utterances(ds) => Ok(ds.utterances.iter().map(|u| u.features.clone()).collect()),
    }
}

/// Training and development examples per modality.
#[derive(Debug, Clone, Default)]
pub struct PreparedData {
    pub train_audio: Option<Vec<Example>>,
    pub train_video: Option<Vec<Example>>,
    pub dev_audio: Option<Vec<Example>>,
    pub dev_video: Option<Vec<Example>>,
}

impl PreparedData {
    pub fn train(&self, m: Modality) -> Option<&[Example]> {
        match m {
            Modality::Audio => self.train_audio.as_deref(),
            Modality::Video => self.train_video.as_deref(),
        }
    }

    pub fn dev(&self, m: Modality) -> Option<&[Example]> {
        match m {
            Modality::Audio => self.dev_audio.as_deref(),
            Modality::Video => self.dev_video.as_deref(),
        }
    }
}

/// Fits standardisation statistics on the training partitions, stores them
/// in `model` and returns aligned, standardised examples.
pub fn prepare(model: &mut TrainedModel, data: &TrainData, cfg: &TrainConfig) -> Result<PreparedData> {
    let task = model.task();
    let mut out = PreparedData::default();
    for m in [Modality::Audio, Modality::Video] {
        for c in [data.train(m), data.dev(m)].into_iter().flatten() {
            if c.modality() != m {
                return Err(Error::usage(format!("{} data supplied in the {m} slot", c.modality())));
            }
            c.check_task(task)?;
            if let Corpus::Sequences(ds) = c {
                if ds.frame_rate_hz != cfg.frame_rate_hz {
                    return Err(Error::usage(format!(
                        "dataset frame rate {} Hz differs from the configured {} Hz",
                        ds.frame_rate_hz, cfg.frame_rate_hz
                    )));
                }
            }
        }
        if let Some(train) = data.train(m) {
            let feats = aligned_features(train, cfg.delay_seconds)?;
            model.set_stats(m, fit_standardizer(&feats.iter().collect::<Vec<_>>())?)?;
            let prepared = prepare_corpus(model, train, cfg.delay_seconds)?;
            match m {
                Modality::Audio => out.train_audio = Some(prepared),
                Modality::Video => out.train_video = Some(prepared),
            }
        }
    }
    for m in [Modality::Audio, Modality::Video] {
        if let Some(dev) = data.dev(m) {
            let prepared = prepare_corpus(model, dev, cfg.delay_seconds)?;
            match m {
                Modality::Audio => out.dev_audio = Some(prepared),
                Modality::Video => out.dev_video = Some(prepared),
            }
        }
    }
    Ok(out)
}

/// A contiguous stretch of one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub example: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledBatch {
    pub target: Vec<Segment>,
    /// Empty when the auxiliary modality takes no part.
    pub auxiliary: Vec<Segment>,
}

/// Triplet class assignment used to vet sampled batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletClasses {
    pub threshold: f64,
    pub stride: usize,
}

impl TripletClasses {
    fn rows(&self, example: &Example, seg: &Segment) -> Vec<(usize, usize)> {
        match &example.target {
            Target::Frames(gold) => (0..seg.len)
                .step_by(self.stride)
                .map(|i| (i, usize::from(gold[seg.start + i] > self.threshold)))
                .collect(),
            Target::Label(l) => vec![(0, *l)],
        }
    }
}

/// What the sampler draws from.
#[derive(Debug, Clone, Copy)]
pub struct BatchSources<'a> {
    pub target: &'a [Example],
    pub auxiliary: Option<&'a [Example]>,
    pub batch_size: usize,
    pub window: usize,
    /// When set, batches whose class composition cannot be mined are redrawn.
    pub triplet: Option<TripletClasses>,
    pub max_resamples: usize,
    /// Whether the target gold must vary within the batch (CCC needs it).
    pub need_target_variance: bool,
    pub need_auxiliary_variance: bool,
}

fn draw_segments(examples: &[Example], count: usize, window: usize, rng: &mut SeededRng) -> Vec<Segment> {
    (0..count)
        .map(|_| {
            let example = rng.index(examples.len());
            let t = examples[example].len();
            match examples[example].target {
                Target::Frames(_) if t > window => Segment { example, start: rng.index(t - window + 1), len: window },
                _ => Segment { example, start: 0, len: t },
            }
        })
        .collect()
}

fn gold_varies(examples: &[Example], segs: &[Segment]) -> bool {
    let mut first = None;
    for s in segs {
        if let Target::Frames(g) = &examples[s.example].target {
            for &v in &g[s.start..s.start + s.len] {
                match first {
                    None => first = Some(v),
                    Some(f) if f != v => return true,
                    _ => {}
                }
            }
        }
    }
    false
}

fn minable(sources: &BatchSources, tc: &TripletClasses, batch: &SampledBatch) -> bool {
    let Some(aux) = sources.auxiliary else { return false };
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for (examples, segs) in [(sources.target, &batch.target), (aux, &batch.auxiliary)] {
        for s in segs {
            for (_, c) in tc.rows(&examples[s.example], s) {
                *counts.entry(c).or_default() += 1;
            }
        }
    }
    counts.len() >= 2 && counts.values().all(|&n| n >= 2)
}

/// Draws `batch_size` target segments, then `batch_size` auxiliary
/// segments, independently: no pairing or time alignment between them.
/// Batches the triplet miner cannot use are redrawn a bounded number of times.
pub fn sample_crossmodal_batch(sources: &BatchSources, rng: &mut SeededRng) -> Result<SampledBatch> {
    if sources.target.is_empty() || sources.auxiliary.is_some_and(<[Example]>::is_empty) {
        return Err(Error::Sampling("cannot sample from an empty dataset".into()));
    }
    for _ in 0..=sources.max_resamples {
        let target = draw_segments(sources.target, sources.batch_size, sources.window, rng);
        let auxiliary = match sources.auxiliary {
            Some(aux) => draw_segments(aux, sources.batch_size, sources.window, rng),
            None => Vec::new(),
        };
        let batch = SampledBatch { target, auxiliary };
        let ok_target = !sources.need_target_variance || gold_varies(sources.target, &batch.target);
        let ok_aux = !sources.need_auxiliary_variance
            || sources.auxiliary.is_some_and(|a| gold_varies(a, &batch.auxiliary));
        let ok_triplet = sources.triplet.as_ref().is_none_or(|tc| minable(sources, tc, &batch));
        if ok_target && ok_aux && ok_triplet {
            return Ok(batch);
        }
    }
    Err(Error::Sampling(format!(
        "no usable batch after {} redraws; check class balance and gold variance",
        sources.max_resamples
    )))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_update(cfg: &AdamConfig, t: u64, theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Adam over the tensors of selected network parts.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(config: AdamConfig, template: &Params) -> Self {
        Self { config, step: 0, m: template.zeros_like(), v: template.zeros_like() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, parts: &[Part]) {
        self.step += 1;
        let theta = params.tensors_mut(parts);
        let g = grads.tensors(parts);
        let m = self.m.tensors_mut(parts);
        let v = self.v.tensors_mut(parts);
        for (((p, g), m), v) in theta.into_iter().zip(g).zip(m).zip(v) {
            adam_update(&self.config, self.step, p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossReport,
    pub dev_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

pub const HISTORY_HEADER: &str = "epoch,l_main,l_aux,l_triplet,l_reg,total,dev_metric";

impl TrainHistory {
    pub fn best_dev_metric(&self) -> f64 {
        self.epochs.get(self.best_epoch.wrapping_sub(1)).map_or(f64::NAN, |r| r.dev_metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let l = &r.losses;
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.epoch, l.l_main, l.l_aux, l.l_triplet, l.l_reg, l.total, r.dev_metric);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: TrainHistory,
}

/// Metric report for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Evaluation {
    Regression { eval: RegressionEval, predictions: Vec<f64>, gold: Vec<f64> },
    Classification { eval: ClassificationEval, predictions: Vec<usize>, gold: Vec<usize> },
}

impl Evaluation {
    /// CCC for regression, macro F1 for classification.
    pub fn headline(&self) -> f64 {
        match self {
            Evaluation::Regression { eval, .. } => eval.ccc,
            Evaluation::Classification { eval, .. } => eval.f1,
        }
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Predicts every example of `modality` and scores against its targets.
/// Regression scores the concatenation of all recordings.
pub fn evaluate_examples(model: &TrainedModel, modality: Modality, examples: &[Example]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::usage("nothing to evaluate"));
    }
    match model.task() {
        Task::Regression { .. } => {
            let mut predictions = Vec::new();
            let mut gold = Vec::new();
            for ex in examples {
                let Target::Frames(g) = &ex.target else {
                    return Err(Error::usage("regression model given labelled utterances"));
                };
                let pass = model.forward(modality, &ex.features, true)?;
                predictions.extend_from_slice(pass.outputs().expect("head ran").as_slice());
                gold.extend_from_slice(g);
            }
            Ok(Evaluation::Regression { eval: evaluate_regression(&predictions, &gold)?, predictions, gold })
        }
        Task::Classification { classes } => {
            let mut predictions = Vec::new();
            let mut gold = Vec::new();
            for ex in examples {
                let Target::Label(l) = ex.target else {
                    return Err(Error::usage("classification model given frame-level gold"));
                };
                let pass = model.forward(modality, &ex.features, true)?;
                predictions.push(argmax(pass.outputs().expect("head ran").row(0)));
                gold.push(l);
            }
            Ok(Evaluation::Classification { eval: macro_f1(&predictions, &gold, classes)?, predictions, gold })
        }
    }
}

/// Standardises, aligns and evaluates a raw dataset.
pub fn evaluate(model: &TrainedModel, corpus: &Corpus, delay_seconds: f64) -> Result<Evaluation> {
    corpus.check_task(model.task())?;
    let examples = prepare_corpus(model, corpus, delay_seconds)?;
    evaluate_examples(model, corpus.modality(), &examples)
}

/// Raw per-example predictions on standardised examples.
pub fn predict_examples(model: &TrainedModel, modality: Modality, examples: &[Example]) -> Result<Vec<Predictions>> {
    examples.iter().map(|ex| model.predict(&model.forward(modality, &ex.features, false)?.embeddings, model.task())).collect()
}

fn active_parts(obj: &ObjectiveConfig) -> Vec<Part> {
    let mut parts = vec![Part::Encoder(obj.target), Part::Head];
    if obj.uses_auxiliary() {
        parts.push(Part::Encoder(obj.auxiliary()));
    }
    parts
}

fn zero_grads(grads: &mut Params) {
    for t in grads.tensors_mut(&[Part::Encoder(Modality::Audio), Part::Encoder(Modality::Video), Part::Head]) {
        t.fill(0.0);
    }
}

struct Passes {
    passes: Vec<crate::encoders::ForwardPass>,
    d_out: Vec<Option<Matrix>>,
    d_embed: Vec<Option<Matrix>>,
}

/// Forward passes over segments; returns the supervised loss and fills
/// `d_out` scaled by `weight` when `supervised`.
fn run_segments(
    model: &TrainedModel,
    modality: Modality,
    examples: &[Example],
    segs: &[Segment],
    supervised: bool,
    weight: f64,
    loss: RegressionLoss,
    term: &'static str,
) -> Result<(f64, Passes)> {
    let mut passes = Vec::with_capacity(segs.len());
    for s in segs {
        let x = examples[s.example].features.slice_rows(s.start, s.start + s.len);
        passes.push(model.forward(modality, &x, supervised)?);
    }
    let mut d_out = vec![None; segs.len()];
    let mut value = 0.0;
    if supervised {
        match model.task() {
            Task::Regression { .. } => {
                let mut pred = Vec::new();
                let mut gold = Vec::new();
                for (p, s) in passes.iter().zip(segs) {
                    pred.extend_from_slice(p.outputs().expect("head ran").as_slice());
                    if let Target::Frames(g) = &examples[s.example].target {
                        gold.extend_from_slice(&g[s.start..s.start + s.len]);
                    }
                }
                let (l, g) = loss.loss_grad(&pred, &gold)?;
                if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(non_finite(term));
                }
                value = l;
                let mut offset = 0;
                for (slot, s) in d_out.iter_mut().zip(segs) {
                    let chunk = g[offset..offset + s.len].iter().map(|v| v * weight).collect();
                    *slot = Some(Matrix::from_vec(s.len, 1, chunk)?);
                    offset += s.len;
                }
            }
            Task::Classification { .. } => {
                let n = segs.len() as f64;
                for ((slot, p), s) in d_out.iter_mut().zip(&passes).zip(segs) {
                    let Target::Label(label) = examples[s.example].target else {
                        return Err(Error::usage("classification model given frame-level gold"));
                    };
                    let (l, g) = cross_entropy_logits_grad(p.outputs().expect("head ran").row(0), label)?;
                    if !l.is_finite() {
                        return Err(non_finite(term));
                    }
                    value += l / n;
                    *slot = Some(Matrix::row_vector(&g.iter().map(|v| v * weight / n).collect::<Vec<_>>()));
                }
            }
        }
    }
    let d_embed = vec![None; segs.len()];
    Ok((value, Passes { passes, d_out, d_embed }))
}

/// Placeholder position; the training loop fills in epoch and batch.
fn non_finite(term: &'static str) -> Error {
    Error::NonFinite { term, epoch: 0, batch: 0 }
}

/// Adds the weighted triplet gradient to the head-input gradients of both
/// modalities and returns the triplet loss. Audio rows come first.
fn triplet_step(
    cfg: &TrainConfig,
    tc: &TripletClasses,
    sides: [(&[Example], &[Segment], &mut Passes); 2],
) -> Result<f64> {
    let mut rows = Vec::new();
    let mut modality = Vec::new();
    let mut class = Vec::new();
    let mut origin = Vec::new();
    for (side, (examples, segs, passes)) in sides.iter().enumerate() {
        for (k, (s, p)) in segs.iter().zip(&passes.passes).enumerate() {
            for (r, c) in tc.rows(&examples[s.example], s) {
                rows.extend_from_slice(p.head_input.row(r));
                modality.push(p.modality);
                class.push(c);
                origin.push((side, k, r));
            }
        }
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(non_finite("l_triplet"));
    }
    let e = sides[0].2.passes[0].head_input.cols();
    let batch = CrossmodalBatch::new(Matrix::from_vec(class.len(), e, rows)?, modality, class)?;
    let out = triplet_loss_grad(&batch, cfg.triplet_form)?;
    let beta = cfg.objective.beta;
    let [(_, _, a), (_, _, b)] = sides;
    for (i, &(side, k, r)) in origin.iter().enumerate() {
        let passes: &mut Passes = if side == 0 { &mut *a } else { &mut *b };
        let shape = passes.passes[k].head_input.shape();
        let slot = passes.d_embed[k].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        for (o, g) in slot.row_mut(r).iter_mut().zip(out.grad.row(i)) {
            *o += beta * g;
        }
    }
    Ok(out.loss)
}

/// Adds `2λθ` for the listed parts to `grads` and returns `‖θ‖²`.
pub(crate) fn add_l2(params: &Params, parts: &[Part], lambda: f64, grads: &mut Params) -> f64 {
    if lambda > 0.0 {
        for (g, p) in grads.tensors_mut(parts).into_iter().zip(params.tensors(parts)) {
            g.add_scaled(p, 2.0 * lambda);
        }
    }
    params.sum_squares(parts)
}

fn batch_step(
    model: &TrainedModel,
    data: &PreparedData,
    cfg: &TrainConfig,
    batch: &SampledBatch,
    grads: &mut Params,
) -> Result<LossReport> {
    let obj = &cfg.objective;
    let (target, aux) = (obj.target, obj.auxiliary());
    zero_grads(grads);
    let tex = data.train(target).expect("checked by caller");
    let (l_main, mut tp) = run_segments(model, target, tex, &batch.target, true, 1.0, cfg.regression_loss, "l_main")?;
    let mut l_aux = 0.0;
    let mut l_triplet = 0.0;
    let mut ap = None;
    if obj.uses_auxiliary() {
        let aex = data.train(aux).expect("checked by caller");
        let (l, mut p) = run_segments(model, aux, aex, &batch.auxiliary, obj.alpha > 0.0, obj.alpha, cfg.regression_loss, "l_aux")?;
        l_aux = l;
        if obj.beta > 0.0 {
            let tc = TripletClasses { threshold: cfg.triplet_threshold, stride: cfg.triplet_stride };
            let t_side = (tex, batch.target.as_slice(), &mut tp);
            let a_side = (aex, batch.auxiliary.as_slice(), &mut p);
            l_triplet = match target {
                Modality::Audio => triplet_step(cfg, &tc, [t_side, a_side])?,
                Modality::Video => triplet_step(cfg, &tc, [a_side, t_side])?,
            };
        }
        ap = Some(p);
    }
    for p in std::iter::once(&tp).chain(ap.as_ref()) {
        for ((pass, d_out), d_embed) in p.passes.iter().zip(&p.d_out).zip(&p.d_embed) {
            if d_out.is_some() || d_embed.is_some() {
                model.backward(pass, d_out.as_ref(), d_embed.as_ref(), grads)?;
            }
        }
    }
    let l_reg = add_l2(&model.params, &active_parts(obj), obj.lambda, grads);
    Ok(compose_objective(obj, l_main, l_aux, l_triplet, l_reg))
}

fn check_ready(model: &TrainedModel, data: &PreparedData, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let obj = &cfg.objective;
    if obj.task != model.task() {
        return Err(Error::usage("objective task differs from the model task"));
    }
    let need = |ok: bool, what: String| if ok { Ok(()) } else { Err(Error::usage(what)) };
    need(data.train(obj.target).is_some_and(|d| !d.is_empty()), format!("no {} training data", obj.target))?;
    need(data.dev(obj.target).is_some_and(|d| !d.is_empty()), format!("no {} development data", obj.target))?;
    need(model.params.encoder(obj.target).is_some(), format!("model has no {} encoder", obj.target))?;
    if obj.uses_auxiliary() {
        let aux = obj.auxiliary();
        need(data.train(aux).is_some_and(|d| !d.is_empty()), format!("alpha/beta > 0 need {aux} training data"))?;
        need(model.params.encoder(aux).is_some(), format!("model has no {aux} encoder"))?;
    }
    Ok(())
}

fn batches_per_epoch(cfg: &TrainConfig, examples: &[Example]) -> usize {
    cfg.batches_per_epoch.unwrap_or_else(|| {
        let (units, per_batch) = match examples[0].target {
            Target::Frames(_) => (examples.iter().map(Example::len).sum::<usize>(), cfg.batch_size * cfg.window_frames),
            Target::Label(_) => (examples.len(), cfg.batch_size),
        };
        units.div_ceil(per_batch).max(1)
    })
}

/// Trains on prepared data. The returned model carries the parameters of
/// the epoch with the best development metric (earliest on ties).
pub fn train_prepared(mut model: TrainedModel, data: &PreparedData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_ready(&model, data, cfg)?;
    let obj = cfg.objective;
    let parts = active_parts(&obj);
    let tex = data.train(obj.target).expect("checked");
    let dev = data.dev(obj.target).expect("checked");
    let is_ccc = obj.task.is_regression() && cfg.regression_loss == RegressionLoss::Ccc;
    let sources = BatchSources {
        target: tex,
        auxiliary: if obj.uses_auxiliary() { data.train(obj.auxiliary()) } else { None },
        batch_size: cfg.batch_size,
        window: cfg.window_frames,
        triplet: (obj.beta > 0.0).then_some(TripletClasses { threshold: cfg.triplet_threshold, stride: cfg.triplet_stride }),
        max_resamples: cfg.max_resamples,
        need_target_variance: is_ccc,
        need_auxiliary_variance: is_ccc && obj.alpha > 0.0,
    };
    let n_batches = batches_per_epoch(cfg, tex);
    let mut adam = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), &model.params);
    let mut grads = model.params.zeros_like();
    let mut rng = SeededRng::derive(cfg.seed, SAMPLER_STREAM);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Params)> = None;
    for epoch in 1..=cfg.max_epochs {
        let mut sum = [0.0; 5];
        for b in 1..=n_batches {
            let batch = sample_crossmodal_batch(&sources, &mut rng)?;
            let report = batch_step(&model, data, cfg, &batch, &mut grads).map_err(|e| match e {
                Error::NonFinite { term, .. } => Error::NonFinite { term, epoch, batch: b },
                other => other,
            })?;
            if let Some(term) = report.non_finite_term() {
                return Err(Error::NonFinite { term, epoch, batch: b });
            }
            for (s, v) in sum.iter_mut().zip([report.l_main, report.l_aux, report.l_triplet, report.l_reg, report.total]) {
                *s += v;
            }
            adam.step(&mut model.params, &grads, &parts);
        }
        let n = n_batches as f64;
        let losses = LossReport {
            l_main: sum[0] / n,
            l_aux: sum[1] / n,
            l_triplet: sum[2] / n,
            l_reg: sum[3] / n,
            total: sum[4] / n,
        };
        let dev_metric = evaluate_examples(&model, obj.target, dev)?.headline();
        history.epochs.push(EpochRecord { epoch, losses, dev_metric });
        if best.as_ref().is_none_or(|(m, _)| dev_metric > *m) {
            best = Some((dev_metric, model.params.clone()));
            history.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(TrainOutcome { model, history })
}

/// Fits input statistics, aligns the data and trains.
pub fn train(mut model: TrainedModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prepared = prepare(&mut model, data, cfg)?;
    train_prepared(model, &prepared, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Dev metric of the retained (best) epoch.
    #[default]
    BestDev,
    /// Dev metric after the final epoch.
    FinalDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_values.is_empty() || self.beta_values.is_empty() {
            return Err(Error::usage("sweep grid lists must not be empty"));
        }
        if self.alpha_values.iter().chain(&self.beta_values).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::usage("sweep grid values must be finite and >= 0"));
        }
        Ok(())
    }

    /// Grid points with alpha varying slowest.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.alpha_values.iter().flat_map(|&a| self.beta_values.iter().map(move |&b| (a, b))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub dev_metric: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the selected point.
    pub selected: usize,
    pub outcome: TrainOutcome,
}

pub const SWEEP_HEADER: &str = "alpha,beta,dev_metric,best_epoch";

impl SweepOutcome {
    pub fn selected_row(&self) -> &SweepRow {
        &self.rows[self.selected]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.alpha, r.beta, r.dev_metric, r.best_epoch);
        }
        s
    }
}

/// Index of the best row: highest metric, then smallest alpha, then
/// smallest beta.
pub fn select_row(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        let better = match best {
            None => true,
            Some(j) => {
                let b = &rows[j];
                r.dev_metric > b.dev_metric
                    || (r.dev_metric == b.dev_metric && (r.alpha, r.beta) < (b.alpha, b.beta))
                    || (b.dev_metric.is_nan() && !r.dev_metric.is_nan())
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// One training run per grid point, all from the same initial model and
/// seed, so a 1×1 grid reproduces a plain training run. Points run on
/// scoped threads; results do not depend on the thread count.
pub fn sweep(grid: &SweepGrid, base: &TrainConfig, model: &TrainedModel, data: &TrainData) -> Result<SweepOutcome> {
    grid.validate()?;
    base.validate()?;
    let mut prepared_model = model.clone();
    let prepared = prepare(&mut prepared_model, data, base)?;
    let points = grid.points();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(points.len());
    let run = |(alpha, beta): (f64, f64)| {
        let cfg = TrainConfig { objective: ObjectiveConfig { alpha, beta, ..base.objective }, ..base.clone() };
        train_prepared(prepared_model.clone(), &prepared, &cfg)
            .map_err(|e| Error::GridPoint { alpha, beta, source: Box::new(e) })
    };
    let mut results: Vec<Option<Result<TrainOutcome>>> = (0..points.len()).map(|_| None).collect();
    if workers <= 1 {
        for (slot, &p) in results.iter_mut().zip(&points) {
            *slot = Some(run(p));
        }
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let points = &points;
                    let run = &run;
                    s.spawn(move || {
                        (w..points.len()).step_by(workers).map(|i| (i, run(points[i]))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("sweep worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let mut rows = Vec::with_capacity(points.len());
    let mut outcomes = Vec::with_capacity(points.len());
    for (r, &(alpha, beta)) in results.into_iter().zip(&points) {
        let outcome = r.expect("every point ran")?;
        let dev_metric = match grid.selection_metric {
            SelectionMetric::BestDev => outcome.history.best_dev_metric(),
            SelectionMetric::FinalDev => outcome.history.epochs.last().map_or(f64::NAN, |e| e.dev_metric),
        };
        rows.push(SweepRow { alpha, beta, dev_metric, best_epoch: outcome.history.best_epoch });
        outcomes.push(outcome);
    }
    let selected = select_row(&rows).expect("grid is non-empty");
    let outcome = outcomes.swap_remove(selected);
    Ok(SweepOutcome { rows, selected, outcome })
}
