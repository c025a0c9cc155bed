//! Crossmodal batch-hard triplet loss.
//!
//! Audio and video embeddings are stacked into one batch. For every row the
//! hardest positive is the farthest row of the same class and the hardest
//! negative is the nearest row of a different class, with modality ignored
//! in both searches. The loss sums `d(anchor, pos) - d(anchor, neg)` over
//! all anchors, so it is unbounded below unless the hinge form is selected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::Modality;

/// Doubled batch `{e_A; e_V}` with a modality tag and class per row.
#[derive(Debug, Clone)]
pub struct CrossmodalBatch {
    pub embeddings: Matrix,
    pub modality: Vec<Modality>,
    pub class: Vec<usize>,
}

impl CrossmodalBatch {
    pub fn new(embeddings: Matrix, modality: Vec<Modality>, class: Vec<usize>) -> Result<Self> {
        let k = embeddings.rows();
        if modality.len() != k || class.len() != k {
            return Err(Error::shape(format!(
                "{k} embeddings but {} modality tags and {} classes",
                modality.len(),
                class.len()
            )));
        }
        Ok(Self { embeddings, modality, class })
    }

    /// Stack audio rows above video rows.
    pub fn from_parts(
        audio: &Matrix,
        audio_class: &[usize],
        video: &Matrix,
        video_class: &[usize],
    ) -> Result<Self> {
        let embeddings = Matrix::vstack(&[audio, video])?;
        let modality = std::iter::repeat_n(Modality::Audio, audio.rows())
            .chain(std::iter::repeat_n(Modality::Video, video.rows()))
            .collect();
        let class = audio_class.iter().chain(video_class).copied().collect();
        Self::new(embeddings, modality, class)
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }

    /// Checks the miner's preconditions: at least two classes and at least
    /// two members in every class that occurs.
    pub fn validate(&self) -> Result<()> {
        let mut counts = std::collections::BTreeMap::new();
        for &c in &self.class {
            *counts.entry(c).or_insert(0usize) += 1;
        }
        if counts.len() < 2 {
            return Err(Error::Mining {
                anchor: 0,
                reason: "batch contains a single class".into(),
            });
        }
        if let Some(anchor) = self.class.iter().position(|c| counts[c] < 2) {
            return Err(Error::Mining {
                anchor,
                reason: format!("class {} has a single member", self.class[anchor]),
            });
        }
        Ok(())
    }
}

/// Row indices of one anchor's hardest positive and negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HardTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum TripletForm {
    /// Plain `d+ - d-`, may be negative.
    #[default]
    Literal,
    /// `max(d+ - d- + margin, 0)`.
    Hinge { margin: f64 },
}

#[inline]
fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean distance between every pair of rows. Symmetric, zero diagonal.
pub fn pairwise_distances(embeddings: &Matrix) -> Matrix {
    let k = embeddings.rows();
    let mut d = Matrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = euclidean(embeddings.row(i), embeddings.row(j));
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

fn mine_from_distances(batch: &CrossmodalBatch, dist: &Matrix) -> Result<Vec<HardTriplet>> {
    batch.validate()?;
    let k = batch.len();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let ci = batch.class[i];
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..k {
            if j == i {
                continue;
            }
            let d = dist.get(i, j);
            if batch.class[j] == ci {
                // strict comparisons keep the lowest index on ties
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        match (pos, neg) {
            (Some((p, _)), Some((n, _))) => out.push(HardTriplet { anchor: i, positive: p, negative: n }),
            _ => {
                return Err(Error::Mining {
                    anchor: i,
                    reason: "no positive or negative candidate".into(),
                })
            }
        }
    }
    Ok(out)
}

/// One hardest triplet per row of the batch.
pub fn mine_hard_triplets(batch: &CrossmodalBatch) -> Result<Vec<HardTriplet>> {
    let dist = pairwise_distances(&batch.embeddings);
    mine_from_distances(batch, &dist)
}

/// Summed literal triplet loss over all hard triplets.
pub fn triplet_loss(batch: &CrossmodalBatch) -> Result<f64> {
    Ok(triplet_loss_grad(batch, TripletForm::Literal)?.loss)
}

#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    /// Gradient of `loss` with respect to each embedding row.
    pub grad: Matrix,
    pub triplets: Vec<HardTriplet>,
}

/// Loss and its gradient with respect to the embeddings, holding the mined
/// triplets fixed. Coincident points contribute a zero subgradient.
pub fn triplet_loss_grad(batch: &CrossmodalBatch, form: TripletForm) -> Result<TripletOutput> {
    let dist = pairwise_distances(&batch.embeddings);
    let triplets = mine_from_distances(batch, &dist)?;
    let e = &batch.embeddings;
    let mut grad = Matrix::zeros(e.rows(), e.cols());
    let mut loss = 0.0;
    for t in &triplets {
        let d_pos = dist.get(t.anchor, t.positive);
        let d_neg = dist.get(t.anchor, t.negative);
        let term = d_pos - d_neg;
        let active = match form {
            TripletForm::Literal => {
                loss += term;
                true
            }
            TripletForm::Hinge { margin } => {
                let h = term + margin;
                if h > 0.0 {
                    loss += h;
                    true
                } else {
                    false
                }
            }
        };
        if !active {
            continue;
        }
        accumulate_distance_grad(e, &mut grad, t.anchor, t.positive, d_pos, 1.0);
        accumulate_distance_grad(e, &mut grad, t.anchor, t.negative, d_neg, -1.0);
    }
    Ok(TripletOutput { loss, grad, triplets })
}

/// Adds `sign * d||e_i - e_j|| / de` into `grad`.
fn accumulate_distance_grad(e: &Matrix, grad: &mut Matrix, i: usize, j: usize, dist: f64, sign: f64) {
    if dist == 0.0 {
        return;
    }
    let scale = sign / dist;
    for c in 0..e.cols() {
        let g = scale * (e.get(i, c) - e.get(j, c));
        grad.set(i, c, grad.get(i, c) + g);
        grad.set(j, c, grad.get(j, c) - g);
    }
}
