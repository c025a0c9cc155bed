//! Evaluation metrics: concordance and Pearson correlation for continuous
//! predictions, macro F1 with a confusion matrix for classes, and the two
//! one-tailed significance tests used to compare systems.

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};

/// Population (1/n) first and second moments of a pair of series.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Moments {
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov: f64,
}

impl Moments {
    pub fn of(x: &[f64], y: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean_x = x.iter().sum::<f64>() / n;
        let mean_y = y.iter().sum::<f64>() / n;
        let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            let (dx, dy) = (a - mean_x, b - mean_y);
            var_x += dx * dx;
            var_y += dy * dy;
            cov += dx * dy;
        }
        Self {
            mean_x,
            mean_y,
            var_x: var_x / n,
            var_y: var_y / n,
            cov: cov / n,
        }
    }

    pub fn ccc(&self) -> f64 {
        let denom = self.var_x + self.var_y + (self.mean_x - self.mean_y).powi(2);
        if denom == 0.0 {
            return 0.0;
        }
        2.0 * self.cov / denom
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::degenerate("correlation needs at least 2 points"));
    }
    Ok(())
}

/// Concordance correlation coefficient with population moments.
///
/// If exactly one series is constant the coefficient is 0; two constant
/// series are rejected.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let m = Moments::of(x, y);
    if m.var_x == 0.0 && m.var_y == 0.0 {
        return Err(Error::degenerate("both series are constant"));
    }
    Ok(m.ccc())
}

/// Pearson correlation. 0 if either series is constant.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let m = Moments::of(x, y);
    if m.var_x == 0.0 || m.var_y == 0.0 {
        return Ok(0.0);
    }
    Ok((m.cov / (m.var_x.sqrt() * m.var_y.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionEval {
    pub ccc: f64,
    pub pcc: f64,
    pub n: usize,
}

pub fn evaluate_regression(pred: &[f64], gold: &[f64]) -> Result<RegressionEval> {
    Ok(RegressionEval {
        ccc: ccc(pred, gold)?,
        pcc: pcc(pred, gold)?,
        n: pred.len(),
    })
}

/// Macro-averaged classification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEval {
    /// `confusion[gold][pred]`; row sums are the class supports.
    pub confusion: Vec<Vec<usize>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Harmonic mean of the unweighted precision and recall.
    pub f1: f64,
}

impl ClassificationEval {
    pub fn accuracy(&self) -> f64 {
        let total: usize = self.confusion.iter().flatten().sum();
        let hits: usize = (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum();
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

pub fn confusion_matrix(pred: &[usize], gold: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if pred.len() != gold.len() {
        return Err(Error::shape(format!(
            "prediction/gold lengths differ: {} vs {}",
            pred.len(),
            gold.len()
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &g) in pred.iter().zip(gold) {
        if p >= classes || g >= classes {
            return Err(Error::usage(format!(
                "label {} out of range for {classes} classes",
                p.max(g)
            )));
        }
        confusion[g][p] += 1;
    }
    Ok(confusion)
}

/// Macro precision/recall over all `classes` (absent classes count as 0)
/// and their harmonic mean.
pub fn macro_f1(pred: &[usize], gold: &[usize], classes: usize) -> Result<ClassificationEval> {
    if pred.is_empty() {
        return Err(Error::degenerate("macro F1 needs at least one sample"));
    }
    let confusion = confusion_matrix(pred, gold, classes)?;
    let mut precision = Vec::with_capacity(classes);
    let mut recall = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        precision.push(if predicted == 0 { 0.0 } else { tp / predicted as f64 });
        recall.push(if support == 0 { 0.0 } else { tp / support as f64 });
    }
    let macro_precision = precision.iter().sum::<f64>() / classes as f64;
    let macro_recall = recall.iter().sum::<f64>() / classes as f64;
    let f1 = if macro_precision + macro_recall == 0.0 {
        0.0
    } else {
        2.0 * macro_precision * macro_recall / (macro_precision + macro_recall)
    };
    Ok(ClassificationEval {
        confusion,
        precision,
        recall,
        macro_precision,
        macro_recall,
        f1,
    })
}

/// Upper tail of the standard normal, `P(Z > z)`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// One-tailed p-value for `r1 > r2` from independent samples of sizes
/// `n1`, `n2`, via Fisher's r-to-z transform.
pub fn fisher_r_to_z_test(r1: f64, n1: usize, r2: f64, n2: usize) -> Result<f64> {
    for r in [r1, r2] {
        if !(r.abs() < 1.0) {
            return Err(Error::degenerate(format!(
                "correlation {r} has no finite Fisher transform"
            )));
        }
    }
    if n1 <= 3 || n2 <= 3 {
        return Err(Error::degenerate("Fisher test needs more than 3 samples per group"));
    }
    let se = (1.0 / (n1 - 3) as f64 + 1.0 / (n2 - 3) as f64).sqrt();
    let stat = (r1.atanh() - r2.atanh()) / se;
    Ok(normal_sf(stat))
}

/// One-tailed pooled two-proportion z-test for `p1 > p2`.
pub fn one_tailed_z_test(p1: f64, p2: f64, n1: usize, n2: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) {
        return Err(Error::usage("proportions must lie in [0, 1]"));
    }
    if n1 == 0 || n2 == 0 {
        return Err(Error::usage("sample sizes must be positive"));
    }
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let pooled = (p1 * n1f + p2 * n2f) / (n1f + n2f);
    let var = pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f);
    if var <= 0.0 {
        return Err(Error::degenerate("pooled variance is zero"));
    }
    Ok(normal_sf((p1 - p2) / var.sqrt()))
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub p_value: Option<f64>,
}

/// CSV with header `metric,value,n,p_value`; an absent p-value is empty.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("metric,value,n,p_value\n");
    for r in rows {
        let p = r.p_value.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.metric, r.value, r.n, p));
    }
    out
}

pub fn report_text(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!("{:<width$}  {:>9.6}  n={}", r.metric, r.value, r.n));
        if let Some(p) = r.p_value {
            out.push_str(&format!("  p={p:.3e}"));
        }
        out.push('\n');
    }
    out
}
