//! Discriminative losses and the composite training objective.
//!
//! The objective for target modality `t` and auxiliary modality `a` is
//!
//! ```text
//! J = L_t + alpha * L_a + beta * L_triplet + lambda * ||theta||^2
//! ```
//!
//! With `alpha = beta = 0` this is classic monomodal training, with
//! `beta = 0` joint training on both modalities through the shared head, and
//! with `alpha = 0` monomodal training plus the crossmodal triplet term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Moments;
use crate::Modality;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-15;

fn check_regression_pair(pred: &[f64], gold: &[f64]) -> Result<Moments> {
    if pred.len() != gold.len() {
        return Err(Error::shape(format!(
            "prediction length {} != gold length {}",
            pred.len(),
            gold.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::degenerate("regression loss needs at least 2 frames"));
    }
    let m = Moments::of(pred, gold);
    if m.var_y == 0.0 {
        return Err(Error::degenerate("gold standard has zero variance"));
    }
    Ok(m)
}

/// `1 - CCC(pred, gold)`, in `[0, 2]`. A constant prediction gives 1.
pub fn regression_loss(pred: &[f64], gold: &[f64]) -> Result<f64> {
    let m = check_regression_pair(pred, gold)?;
    Ok(1.0 - m.ccc())
}

/// `1 - CCC` and its gradient with respect to `pred`.
pub fn ccc_loss_grad(pred: &[f64], gold: &[f64]) -> Result<(f64, Vec<f64>)> {
    let m = check_regression_pair(pred, gold)?;
    let n = pred.len() as f64;
    let num = 2.0 * m.cov;
    let den = m.var_x + m.var_y + (m.mean_x - m.mean_y).powi(2);
    let gap = m.mean_x - m.mean_y;
    let grad = pred
        .iter()
        .zip(gold)
        .map(|(x, y)| {
            let d_num = 2.0 * (y - m.mean_y) / n;
            let d_den = 2.0 * (x - m.mean_x) / n + 2.0 * gap / n;
            -(d_num * den - num * d_den) / (den * den)
        })
        .collect();
    Ok((1.0 - num / den, grad))
}

/// Mean squared error and its gradient.
pub fn mse_loss_grad(pred: &[f64], gold: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gold.len() || pred.is_empty() {
        return Err(Error::shape("MSE needs equal, non-empty series"));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(gold).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(gold).map(|(p, g)| 2.0 * (p - g) / n).collect();
    Ok((loss, grad))
}

/// Training criterion for continuous targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionLoss {
    #[default]
    Ccc,
    Mse,
}

impl RegressionLoss {
    pub fn loss_grad(self, pred: &[f64], gold: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            RegressionLoss::Ccc => ccc_loss_grad(pred, gold),
            RegressionLoss::Mse => mse_loss_grad(pred, gold),
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-ln p[label]` of a probability vector.
pub fn classification_loss(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::usage(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Cross-entropy on softmax(logits) and its gradient `softmax - onehot`.
pub fn cross_entropy_logits_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let probs = softmax(logits);
    let loss = classification_loss(&probs, label)?;
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Arousal,
    Valence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Regression { dimension: Dimension },
    Classification { classes: usize },
}

impl Task {
    pub fn is_regression(&self) -> bool {
        matches!(self, Task::Regression { .. })
    }

    /// Width of the head's output layer.
    pub fn output_dim(&self) -> usize {
        match self {
            Task::Regression { .. } => 1,
            Task::Classification { classes } => *classes,
        }
    }
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub target: Modality,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub task: Task,
}

impl ObjectiveConfig {
    /// Monomodal baseline: target loss plus L2 only.
    pub fn classic(target: Modality, task: Task, lambda: f64) -> Self {
        Self { target, alpha: 0.0, beta: 0.0, lambda, task }
    }

    pub fn joint(target: Modality, task: Task, alpha: f64, lambda: f64) -> Self {
        Self { target, alpha, beta: 0.0, lambda, task }
    }

    pub fn triplet(target: Modality, task: Task, beta: f64, lambda: f64) -> Self {
        Self { target, alpha: 0.0, beta, lambda, task }
    }

    pub fn emobed(target: Modality, task: Task, alpha: f64, beta: f64, lambda: f64) -> Self {
        Self { target, alpha, beta, lambda, task }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::usage(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return Err(Error::usage("classification needs at least 2 classes"));
            }
        }
        Ok(())
    }

    pub fn auxiliary(&self) -> Modality {
        self.target.other()
    }

    /// Whether the auxiliary encoder takes part in training.
    pub fn uses_auxiliary(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }
}

/// Per-term breakdown of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_main: f64,
    pub l_aux: f64,
    pub l_triplet: f64,
    pub l_reg: f64,
    pub total: f64,
}

impl LossReport {
    /// First non-finite term, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_main", self.l_main),
            ("l_aux", self.l_aux),
            ("l_triplet", self.l_triplet),
            ("l_reg", self.l_reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

pub fn compose_objective(
    cfg: &ObjectiveConfig,
    l_main: f64,
    l_aux: f64,
    l_triplet: f64,
    l_reg: f64,
) -> LossReport {
    LossReport {
        l_main,
        l_aux,
        l_triplet,
        l_reg,
        total: l_main + cfg.alpha * l_aux + cfg.beta * l_triplet + cfg.lambda * l_reg,
    }
}
