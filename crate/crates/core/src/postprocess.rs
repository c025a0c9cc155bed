//! Refinement of continuous predictions: median filter, centring, scaling and
//! time shift, applied in that order with the window and shift picked by a
//! grid search on development data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ccc;

fn seconds_to_frames(seconds: f64, frame_rate: f64) -> Result<usize> {
    if !(seconds >= 0.0) || !seconds.is_finite() || !(frame_rate > 0.0) {
        return Err(Error::usage(format!(
            "invalid duration {seconds} s at {frame_rate} Hz"
        )));
    }
    Ok((seconds * frame_rate).round() as usize)
}

/// Lower of the two middle values for even-sized windows.
fn lower_median(window: &mut [f64]) -> f64 {
    window.sort_by(f64::total_cmp);
    window[(window.len() - 1) / 2]
}

/// Centred sliding median; windows are truncated at the series edges.
pub fn median_filter(pred: &[f64], window_seconds: f64, frame_rate: f64) -> Result<Vec<f64>> {
    if pred.is_empty() {
        return Err(Error::usage("cannot filter an empty series"));
    }
    let w = seconds_to_frames(window_seconds, frame_rate)?;
    if w == 0 {
        return Err(Error::usage(format!(
            "window of {window_seconds} s is shorter than one frame"
        )));
    }
    let (left, right) = ((w - 1) / 2, w / 2);
    let mut buf = Vec::with_capacity(w);
    Ok((0..pred.len())
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(pred.len() - 1);
            buf.clear();
            buf.extend_from_slice(&pred[lo..=hi]);
            lower_median(&mut buf)
        })
        .collect())
}

/// Matches the series' mean and standard deviation to the targets. A
/// constant series is only re-centred.
pub fn center_and_scale(pred: &[f64], target_mean: f64, target_std: f64) -> Vec<f64> {
    if pred.is_empty() {
        return Vec::new();
    }
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let std = (pred.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        pred.iter().map(|p| (p - mean) / std * target_std + target_mean).collect()
    } else {
        pred.iter().map(|p| p - mean + target_mean).collect()
    }
}

/// Delays the series by `round(shift_seconds * frame_rate)` frames, padding
/// the head with the first value.
pub fn time_shift(pred: &[f64], shift_seconds: f64, frame_rate: f64) -> Result<Vec<f64>> {
    let k = seconds_to_frames(shift_seconds, frame_rate)?;
    if k >= pred.len() {
        return Err(Error::degenerate(format!(
            "shift of {k} frames does not fit a series of {}",
            pred.len()
        )));
    }
    let mut out = Vec::with_capacity(pred.len());
    out.extend(std::iter::repeat_n(pred[0], k));
    out.extend_from_slice(&pred[..pred.len() - k]);
    Ok(out)
}

/// Chosen post-processing constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessPlan {
    pub window_seconds: f64,
    /// Target mean after centring.
    pub center_offset: f64,
    /// Target standard deviation after scaling.
    pub scale_factor: f64,
    pub shift_seconds: f64,
}

impl PostprocessPlan {
    pub fn apply(&self, pred: &[f64], frame_rate: f64) -> Result<Vec<f64>> {
        let filtered = median_filter(pred, self.window_seconds, frame_rate)?;
        let scaled = center_and_scale(&filtered, self.center_offset, self.scale_factor);
        time_shift(&scaled, self.shift_seconds, frame_rate)
    }
}

const PLAN_KEYS: [&str; 4] = ["window_seconds", "center_offset", "scale_factor", "shift_seconds"];

/// `key=value` lines.
impl fmt::Display for PostprocessPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let values = [self.window_seconds, self.center_offset, self.scale_factor, self.shift_seconds];
        for (k, v) in PLAN_KEYS.iter().zip(values) {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for PostprocessPlan {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut values: [Option<f64>; 4] = [None; 4];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected key=value".into()))?;
            let slot = PLAN_KEYS
                .iter()
                .position(|k| *k == key.trim())
                .ok_or_else(|| parse_err(format!("unknown key `{}`", key.trim())))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad number `{}`: {e}", value.trim())))?;
            values[slot] = Some(v);
        }
        let get = |i: usize| {
            values[i].ok_or_else(|| Error::Parse { line: 0, message: format!("missing key `{}`", PLAN_KEYS[i]) })
        };
        let plan = PostprocessPlan {
            window_seconds: get(0)?,
            center_offset: get(1)?,
            scale_factor: get(2)?,
            shift_seconds: get(3)?,
        };
        if !(plan.scale_factor > 0.0) || !(plan.shift_seconds >= 0.0) || !(plan.window_seconds > 0.0) {
            return Err(Error::usage("plan needs positive window and scale and a non-negative shift"));
        }
        Ok(plan)
    }
}

/// Candidate windows and shifts, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostprocessGrid {
    pub windows: Vec<f64>,
    pub shifts: Vec<f64>,
}

impl Default for PostprocessGrid {
    /// Windows 0.12..=0.44 s in 0.08 s steps, shifts 0.04..=0.60 s in 0.04 s steps.
    fn default() -> Self {
        Self {
            windows: (0..5).map(|i| (12 + 8 * i) as f64 / 100.0).collect(),
            shifts: (1..=15).map(|i| (4 * i) as f64 / 100.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub plan: PostprocessPlan,
    /// Dev CCC after the full chain with `plan`.
    pub ccc: f64,
    /// Dev CCC of the unprocessed predictions.
    pub raw_ccc: f64,
}

/// Picks the window and shift that maximise dev CCC after the full chain.
/// Ties go to the smallest window, then the smallest shift.
pub fn grid_search(
    dev_pred: &[f64],
    dev_gold: &[f64],
    train_gold_mean: f64,
    train_gold_std: f64,
    grid: &PostprocessGrid,
    frame_rate: f64,
) -> Result<SearchResult> {
    if grid.windows.is_empty() || grid.shifts.is_empty() {
        return Err(Error::usage("post-processing grid is empty"));
    }
    if !(train_gold_std > 0.0) {
        return Err(Error::degenerate("training gold standard has zero spread"));
    }
    let raw_ccc = ccc(dev_pred, dev_gold)?;
    let mut best: Option<(f64, f64, f64)> = None;
    for &w in &grid.windows {
        let filtered = median_filter(dev_pred, w, frame_rate)?;
        let scaled = center_and_scale(&filtered, train_gold_mean, train_gold_std);
        for &d in &grid.shifts {
            let shifted = time_shift(&scaled, d, frame_rate)?;
            let score = ccc(&shifted, dev_gold)?;
            let better = match best {
                None => true,
                Some((s, bw, bd)) => score > s || (score == s && (w < bw || (w == bw && d < bd))),
            };
            if better {
                best = Some((score, w, d));
            }
        }
    }
    let (score, w, d) = best.expect("grid is non-empty");
    Ok(SearchResult {
        plan: PostprocessPlan {
            window_seconds: w,
            center_offset: train_gold_mean,
            scale_factor: train_gold_std,
            shift_seconds: d,
        },
        ccc: score,
        raw_ccc,
    })
}
