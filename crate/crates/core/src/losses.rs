//! Distillation objectives.
//!
//! Every loss is averaged over the batch. `log` arguments are offset by
//! [`LOG_EPS`] so zero probabilities (common at low temperature) stay finite.
//!
//! The per-student objective combines three terms:
//!
//! ```text
//! L_k = α·CE(s_k, y) + β·KL(p ‖ s_k) + γ·Σ_{k'≠k} KL(s_k ‖ s_k')
//! ```
//!
//! where `p` is the teacher distribution and `s_k` the distribution of
//! student `k`, both at temperature `T`. Only student `k` receives gradient:
//! the teacher and the peers enter as constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid label: {0}")]
    Label(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Row-normalized class probabilities `[N × C]` on a tape, with the
/// temperature that produced them.
#[derive(Debug, Clone, Copy)]
pub struct ProbBatch<'t> {
    probs: Var<'t>,
    temperature: f64,
}

impl<'t> ProbBatch<'t> {
    /// Wraps fixed probabilities as a constant on `tape`. Rows must sum to 1
    /// within 1e-9 and every entry must lie in `[0, 1]`.
    pub fn constant(tape: &'t Tape, probs: &Tensor, temperature: f64) -> Result<Self, LossError> {
        if probs.shape().len() != 2 {
            return Err(AutodiffError::Dimension(format!("probabilities must be [N, C], got {:?}", probs.shape())).into());
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(LossError::Parameter(format!("row {r} is not a probability vector")));
            }
        }
        Ok(Self { probs: tape.constant(probs), temperature })
    }

    pub fn probs(&self) -> Var<'t> {
        self.probs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn value(&self) -> Tensor {
        self.probs.value()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.probs.shape()
    }

    /// Same probabilities as a constant on `tape`.
    pub fn detached_on<'u>(&self, tape: &'u Tape) -> ProbBatch<'u> {
        ProbBatch { probs: tape.constant(&self.probs.value()), temperature: self.temperature }
    }
}

/// Ground-truth labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBatch {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self, LossError> {
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(LossError::Label(format!("label {bad} at position {i} is not below {num_classes}")));
        }
        Ok(Self { labels, num_classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self { labels: indices.iter().map(|&i| self.labels[i]).collect(), num_classes: self.num_classes }
    }

    /// Indicator matrix `[N × C]` with a 1 at each sample's label.
    pub fn one_hot(&self) -> Tensor {
        let c = self.num_classes;
        let mut t = Tensor::zeros(vec![self.labels.len(), c]);
        for (i, &l) in self.labels.iter().enumerate() {
            t.data_mut()[i * c + l] = 1.0;
        }
        t
    }
}

/// Weights of the supervised, distillation and mutual-learning terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, LossError> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::Parameter(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(LossError::Parameter("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.45, gamma: 0.45 }
    }
}

/// Argument order of the mutual-learning KL term for student `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlDirection {
    /// `KL(s_k ‖ s_k')`
    #[default]
    Forward,
    /// `KL(s_k' ‖ s_k)`
    Reversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StudentLossOptions {
    pub ml_direction: MlDirection,
    /// Multiply the KD term by `T²`.
    pub kd_t2_rescale: bool,
}

/// Row-wise `softmax(z / T)`, stabilized by max subtraction.
pub fn extended_softmax<'t>(logits: Var<'t>, temperature: f64) -> Result<ProbBatch<'t>, LossError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LossError::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    let scaled = if temperature == 1.0 { logits } else { logits.scale(1.0 / temperature)? };
    let probs = scaled.log_softmax_rows()?.exp()?;
    Ok(ProbBatch { probs, temperature })
}

/// Mean over the batch of `−log p(y_i)`.
pub fn cross_entropy<'t>(probs: &ProbBatch<'t>, labels: &LabelBatch) -> Result<Var<'t>, LossError> {
    let shape = probs.shape();
    if shape[0] != labels.len() || shape[1] != labels.num_classes() {
        return Err(AutodiffError::Dimension(format!(
            "probabilities {shape:?} for {} labels over {} classes",
            labels.len(),
            labels.num_classes()
        ))
        .into());
    }
    let tape = probs.probs.tape();
    let indicator = tape.constant(&labels.one_hot());
    let log_p = probs.probs.offset(LOG_EPS)?.ln()?;
    Ok(log_p.mul(&indicator)?.sum()?.scale(-1.0 / labels.len() as f64)?)
}

/// The teacher is trained on cross-entropy alone.
pub fn teacher_loss<'t>(probs: &ProbBatch<'t>, labels: &LabelBatch) -> Result<Var<'t>, LossError> {
    cross_entropy(probs, labels)
}

/// Batch mean of `Σ_c p log(p / q)`. Gradient reaches whichever arguments are
/// differentiable on the tape.
pub fn kl_divergence<'t>(p: &ProbBatch<'t>, q: &ProbBatch<'t>) -> Result<Var<'t>, LossError> {
    let shape = p.shape();
    if shape != q.shape() {
        return Err(AutodiffError::Dimension(format!("KL of {shape:?} and {:?}", q.shape())).into());
    }
    let log_p = p.probs.offset(LOG_EPS)?.ln()?;
    let log_q = q.probs.offset(LOG_EPS)?.ln()?;
    Ok(p.probs.mul(&log_p.sub(&log_q)?)?.sum()?.scale(1.0 / shape[0].max(1) as f64)?)
}

/// Combined objective for student `k`.
///
/// `ce` is student `k`'s supervised term. `teacher` may be absent only when
/// `β = 0`. `students[k]` must be student `k`'s own distribution on the same
/// tape as `ce`; the teacher and every peer are re-registered as constants.
/// Terms with a zero weight are left out of the graph.
pub fn student_loss<'t>(
    k: usize,
    ce: Var<'t>,
    teacher: Option<&ProbBatch<'_>>,
    students: &[ProbBatch<'t>],
    weights: &LossWeights,
    options: &StudentLossOptions,
) -> Result<Var<'t>, LossError> {
    weights.validate()?;
    let own = students
        .get(k)
        .ok_or_else(|| LossError::Index(format!("student {k} of {}", students.len())))?;
    let shape = own.shape();
    if students.iter().any(|s| s.shape() != shape) || teacher.is_some_and(|t| t.shape() != shape) {
        return Err(AutodiffError::Dimension("student and teacher distributions differ in shape".into()).into());
    }
    let tape = own.probs.tape();

    let kd = if weights.beta > 0.0 {
        let teacher = teacher.ok_or_else(|| LossError::Parameter("β > 0 requires teacher predictions".into()))?;
        let kd = kl_divergence(&teacher.detached_on(tape), own)?;
        Some(if options.kd_t2_rescale {
            kd.scale(own.temperature * own.temperature)?
        } else {
            kd
        })
    } else {
        None
    };

    let mut ml = Vec::new();
    if weights.gamma > 0.0 {
        for (j, peer) in students.iter().enumerate() {
            if j == k {
                continue;
            }
            let peer = peer.detached_on(tape);
            ml.push(match options.ml_direction {
                MlDirection::Forward => kl_divergence(own, &peer)?,
                MlDirection::Reversed => kl_divergence(&peer, own)?,
            });
        }
    }
    weighted_sum(weights, ce, kd, &ml)
}

/// `α·ce + β·kd + γ·Σ ml`, skipping zero-weighted and absent terms.
pub(crate) fn weighted_sum<'t>(
    weights: &LossWeights,
    ce: Var<'t>,
    kd: Option<Var<'t>>,
    ml: &[Var<'t>],
) -> Result<Var<'t>, LossError> {
    let mut total: Option<Var<'t>> = None;
    let mut push = |term: Var<'t>, w: f64| -> Result<(), LossError> {
        let scaled = if w == 1.0 { term } else { term.scale(w)? };
        total = Some(match total {
            Some(t) => t.add(&scaled)?,
            None => scaled,
        });
        Ok(())
    };
    if weights.alpha > 0.0 {
        push(ce, weights.alpha)?;
    }
    if let (Some(kd), true) = (kd, weights.beta > 0.0) {
        push(kd, weights.beta)?;
    }
    if weights.gamma > 0.0 && !ml.is_empty() {
        let mut sum = ml[0];
        for term in &ml[1..] {
            sum = sum.add(term)?;
        }
        push(sum, weights.gamma)?;
    }
    Ok(total.unwrap_or_else(|| ce.tape().scalar(0.0)))
}

/// Shannon entropy of each row, in nats.
pub fn row_entropy(probs: &Tensor) -> Vec<f64> {
    (0..probs.rows())
        .map(|r| -probs.row(r).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .collect()
}
