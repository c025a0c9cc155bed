//! Synthetic audiovisual data with a shared latent affect factor.
//!
//! A smooth latent trajectory `z(t)` drives both modalities through
//! per-modality linear mixing plus white noise, and the gold standard is a
//! fixed readout of `z`. Making one modality noisier than the other gives a
//! setting where auxiliary-modality training has something to transfer.

use serde::{Deserialize, Serialize};

use super::{Partition, Recording, SequenceDataset, Utterance, UtteranceDataset};
use crate::error::{Error, Result};
use crate::numkit::{matmul, Matrix, SeededRng};
use crate::Modality;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    /// Gold is the readout value itself.
    Continuous,
    /// Gold is the number of (ascending) thresholds the readout exceeds.
    Threshold { thresholds: Vec<f64> },
}

impl LabelRule {
    pub fn classes(&self) -> Option<usize> {
        match self {
            LabelRule::Continuous => None,
            LabelRule::Threshold { thresholds } => Some(thresholds.len() + 1),
        }
    }

    fn apply(&self, value: f64) -> f64 {
        match self {
            LabelRule::Continuous => value,
            LabelRule::Threshold { thresholds } => thresholds.iter().filter(|&&t| value > t).count() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub latent_dim: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    /// `latent_dim × audio_dim`; a frame is `z · A`.
    pub audio_mixing: Matrix,
    /// `latent_dim × video_dim`.
    pub video_mixing: Matrix,
    pub noise_audio: f64,
    pub noise_video: f64,
    /// Unit-norm readout from latent to gold.
    pub readout: Vec<f64>,
    pub label_rule: LabelRule,
    /// Moving-average width applied to the latent walk, in frames.
    pub smoothing: usize,
    /// Per-step pull of the walk towards zero; 0 gives a plain random walk.
    pub reversion: f64,
    /// Moving-average width applied to the observation noise, in frames;
    /// 1 gives white noise. Wider windows give slow drifts that a temporal
    /// model cannot average away. The noise is rescaled so its standard
    /// deviation stays at the configured scale.
    #[serde(default = "one")]
    pub noise_smoothing: usize,
    /// Gold lags the latent by this many frames, like a slow annotator.
    pub gold_delay_frames: usize,
    pub frame_rate_hz: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Random mixing matrices and readout drawn from `seed`.
    pub fn new(latent_dim: usize, audio_dim: usize, video_dim: usize, noise_audio: f64, noise_video: f64, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, 0);
        let scale = 1.0 / (latent_dim.max(1) as f64).sqrt();
        let mut mixing = |cols: usize| {
            let data = (0..latent_dim * cols).map(|_| rng.normal() * scale).collect();
            Matrix::from_vec(latent_dim, cols, data).expect("finite draws")
        };
        let audio_mixing = mixing(audio_dim);
        let video_mixing = mixing(video_dim);
        let mut readout: Vec<f64> = (0..latent_dim).map(|_| rng.normal()).collect();
        let norm = readout.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        readout.iter_mut().for_each(|v| *v /= norm);
        SynthSpec {
            latent_dim,
            audio_dim,
            video_dim,
            audio_mixing,
            video_mixing,
            noise_audio,
            noise_video,
            readout,
            label_rule: LabelRule::Continuous,
            smoothing: 25,
            reversion: 0.01,
            noise_smoothing: 1,
            gold_delay_frames: 0,
            frame_rate_hz: 25.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.audio_dim == 0 || self.video_dim == 0 {
            return Err(Error::usage("synthetic dimensions must be positive"));
        }
        if self.audio_mixing.shape() != (self.latent_dim, self.audio_dim)
            || self.video_mixing.shape() != (self.latent_dim, self.video_dim)
            || self.readout.len() != self.latent_dim
        {
            return Err(Error::shape("mixing matrices or readout disagree with the declared dimensions"));
        }
        for (name, v) in [("noise_audio", self.noise_audio), ("noise_video", self.noise_video)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::usage(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.smoothing == 0 || self.noise_smoothing == 0 {
            return Err(Error::usage("smoothing widths must be at least 1 frame"));
        }
        if !(0.0..1.0).contains(&self.reversion) {
            return Err(Error::usage("reversion must lie in [0, 1)"));
        }
        if !(self.frame_rate_hz > 0.0) || !self.frame_rate_hz.is_finite() {
            return Err(Error::usage("frame rate must be positive"));
        }
        if let LabelRule::Threshold { thresholds } = &self.label_rule {
            if thresholds.is_empty()
                || thresholds.iter().any(|t| !t.is_finite())
                || thresholds.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(Error::usage("thresholds must be finite, non-empty and strictly ascending"));
            }
        }
        Ok(())
    }

    fn mixing(&self, m: Modality) -> (&Matrix, f64) {
        match m {
            Modality::Audio => (&self.audio_mixing, self.noise_audio),
            Modality::Video => (&self.video_mixing, self.noise_video),
        }
    }

    /// Smoothed, per-dimension standardized latent walk, `frames × latent_dim`.
    pub fn latent_walk(&self, rng: &mut SeededRng, frames: usize) -> Matrix {
        let l = self.latent_dim;
        let mut walk = Matrix::zeros(frames, l);
        let mut state = vec![0.0; l];
        for t in 0..frames {
            for (j, s) in state.iter_mut().enumerate() {
                *s = (1.0 - self.reversion) * *s + rng.normal();
                walk.set(t, j, *s);
            }
        }
        let mut z = Matrix::zeros(frames, l);
        for j in 0..l {
            let column: Vec<f64> = (0..frames).map(|t| walk.get(t, j)).collect();
            for (t, v) in moving_average(&column, self.smoothing).into_iter().enumerate() {
                z.set(t, j, v);
            }
            let mean = (0..frames).map(|t| z.get(t, j)).sum::<f64>() / frames as f64;
            let var = (0..frames).map(|t| (z.get(t, j) - mean).powi(2)).sum::<f64>() / frames as f64;
            let sd = var.sqrt().max(1e-12);
            for t in 0..frames {
                z.set(t, j, (z.get(t, j) - mean) / sd);
            }
        }
        z
    }

    /// `z · mixing + noise` for one modality.
    pub fn observe(&self, modality: Modality, z: &Matrix, rng: &mut SeededRng) -> Result<Matrix> {
        let (mixing, noise) = self.mixing(modality);
        let mut x = matmul(z, mixing)?;
        if noise > 0.0 {
            let (frames, d) = x.shape();
            let mut white = Matrix::zeros(frames, d);
            white.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
            let w = self.noise_smoothing;
            // a width-w average of unit white noise has variance 1/w in the interior
            let gain = noise * (w as f64).sqrt();
            for j in 0..d {
                let column: Vec<f64> = (0..frames).map(|t| white.get(t, j)).collect();
                let smooth = if w > 1 { moving_average(&column, w) } else { column };
                for (t, v) in smooth.into_iter().enumerate() {
                    let cur = x.get(t, j);
                    x.set(t, j, cur + gain * v);
                }
            }
        }
        Ok(x)
    }

    pub fn readout_value(&self, z_row: &[f64]) -> f64 {
        z_row.iter().zip(&self.readout).map(|(a, b)| a * b).sum()
    }
}

fn one() -> usize {
    1
}

/// Centred moving average with truncated edges, via prefix sums.
fn moving_average(values: &[f64], width: usize) -> Vec<f64> {
    let n = values.len();
    let (left, right) = ((width - 1) / 2, width / 2);
    let mut prefix = vec![0.0; n + 1];
    for t in 0..n {
        prefix[t + 1] = prefix[t] + values[t];
    }
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(left);
            let hi = (t + right + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn stream(seed: u64, kind: u64, index: usize) -> SeededRng {
    SeededRng::derive(seed, (kind << 32) | index as u64)
}

const LATENT: u64 = 1;
const AUDIO_NOISE: u64 = 2;
const VIDEO_NOISE: u64 = 3;
const UTTERANCE_MEAN: u64 = 4;

/// Paired audio and video training datasets sharing one gold series per
/// recording. Recording `i` is drawn from its own RNG streams, so the
/// first `n` recordings do not depend on how many are requested.
pub fn generate_crossmodal(spec: &SynthSpec, recordings: usize, frames: usize) -> Result<(SequenceDataset, SequenceDataset)> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::usage("frames must be positive"));
    }
    let mut audio = Vec::with_capacity(recordings);
    let mut video = Vec::with_capacity(recordings);
    for i in 0..recordings {
        let z = spec.latent_walk(&mut stream(spec.seed, LATENT, i), frames);
        let k = spec.gold_delay_frames;
        let gold: Vec<f64> = (0..frames)
            .map(|t| spec.label_rule.apply(spec.readout_value(z.row(t.saturating_sub(k)))))
            .collect();
        let id = format!("rec{i:03}");
        audio.push(Recording {
            id: id.clone(),
            features: spec.observe(Modality::Audio, &z, &mut stream(spec.seed, AUDIO_NOISE, i))?,
            gold: gold.clone(),
        });
        video.push(Recording {
            id,
            features: spec.observe(Modality::Video, &z, &mut stream(spec.seed, VIDEO_NOISE, i))?,
            gold,
        });
    }
    let wrap = |modality, recordings| SequenceDataset {
        modality,
        partition: Partition::Train,
        frame_rate_hz: spec.frame_rate_hz,
        recordings,
    };
    Ok((wrap(Modality::Audio, audio), wrap(Modality::Video, video)))
}

/// Paired utterance datasets for the categorical task. Each utterance has
/// its own latent offset plus a smaller within-utterance walk; the label
/// applies the threshold rule to the mean readout over the utterance.
pub fn generate_utterances(spec: &SynthSpec, count: usize, frames: usize) -> Result<(UtteranceDataset, UtteranceDataset)> {
    spec.validate()?;
    let classes = spec
        .label_rule
        .classes()
        .ok_or_else(|| Error::usage("utterance generation needs a threshold label rule"))?;
    if frames == 0 {
        return Err(Error::usage("frames must be positive"));
    }
    let mut audio = Vec::with_capacity(count);
    let mut video = Vec::with_capacity(count);
    for i in 0..count {
        let mut offset_rng = stream(spec.seed, UTTERANCE_MEAN, i);
        let offset: Vec<f64> = (0..spec.latent_dim).map(|_| offset_rng.normal()).collect();
        let mut z = spec.latent_walk(&mut stream(spec.seed, LATENT, i), frames);
        for t in 0..frames {
            for (v, o) in z.row_mut(t).iter_mut().zip(&offset) {
                *v = o + 0.5 * *v;
            }
        }
        let mean_readout = (0..frames).map(|t| spec.readout_value(z.row(t))).sum::<f64>() / frames as f64;
        let label = spec.label_rule.apply(mean_readout) as usize;
        let id = format!("utt{i:04}");
        audio.push(Utterance {
            id: id.clone(),
            features: spec.observe(Modality::Audio, &z, &mut stream(spec.seed, AUDIO_NOISE, i))?,
            label,
        });
        video.push(Utterance {
            id,
            features: spec.observe(Modality::Video, &z, &mut stream(spec.seed, VIDEO_NOISE, i))?,
            label,
        });
    }
    let wrap = |modality, utterances| UtteranceDataset { modality, partition: Partition::Train, classes, utterances };
    Ok((wrap(Modality::Audio, audio), wrap(Modality::Video, video)))
}
