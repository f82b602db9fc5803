//! Accuracy, the student ensemble, and seed-level aggregation.

mod report;
mod stats;

pub use report::{aggregate, render_csv, render_table, AggregateReport, AggregateRow, ModelResult, RunReport};
pub use stats::{mean, sample_std, student_t_cdf, student_t_two_sided_p, welch_t_test, WelchResult, SIGNIFICANCE_LEVEL};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::losses::LabelBatch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("cannot aggregate: {0}")]
    Aggregation(String),
}

/// How per-student probabilities are merged into ensemble scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRule {
    /// Per (sample, class) maximum over students.
    #[default]
    ElementwiseMax,
    /// Per sample, the row of the student with the highest top probability
    /// (lowest student index on ties).
    MostConfident,
}

/// Ensemble score matrix `[N × C]`. Rows of the element-wise maximum need
/// not sum to one.
pub fn ensemble_probs(students: &[Tensor], rule: EnsembleRule) -> Result<Tensor, EvalError> {
    let first = students.first().ok_or_else(|| EvalError::Input("ensemble of zero students".into()))?;
    if students.iter().any(|s| s.shape() != first.shape()) || first.shape().len() != 2 {
        return Err(EvalError::Input("student probability matrices differ in shape".into()));
    }
    let mut out = first.clone().with_requires_grad(false);
    out.zero_grad();
    match rule {
        EnsembleRule::ElementwiseMax => {
            for s in &students[1..] {
                out.data_mut().iter_mut().zip(s.data()).for_each(|(o, v)| *o = o.max(*v));
            }
        }
        EnsembleRule::MostConfident => {
            let c = first.cols();
            for r in 0..first.rows() {
                let top = |t: &Tensor| t.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut best = 0;
                for (k, s) in students.iter().enumerate().skip(1) {
                    if top(s) > top(&students[best]) {
                        best = k;
                    }
                }
                out.data_mut()[r * c..(r + 1) * c].copy_from_slice(students[best].row(r));
            }
        }
    }
    Ok(out)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn ensemble_predict(scores: &Tensor) -> LabelBatch {
    let c = scores.cols();
    let labels = (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            (1..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    LabelBatch::new(labels, c.max(1)).expect("argmax is below C")
}

/// Percentage of matching labels.
pub fn accuracy(pred: &LabelBatch, truth: &LabelBatch) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Input(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(EvalError::Input("accuracy of an empty batch".into()));
    }
    let correct = pred.labels().iter().zip(truth.labels()).filter(|(a, b)| a == b).count();
    Ok(100.0 * correct as f64 / truth.len() as f64)
}
