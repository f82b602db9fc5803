//! SGD and the online, offline and single-objective training protocols.
//!
//! Every protocol runs the same batch loop. Per batch, each participating
//! network does one forward pass on its own tape before anything is
//! updated; the teacher then steps on cross-entropy, and each student steps
//! on its combined objective against detached copies of the teacher's and
//! peers' soft predictions.

mod augment;
mod optim;

pub use augment::{augment, AugmentConfig};
pub use optim::{sgd_step, OptimizerState};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::data::{DataError, Dataset, Split};
use crate::eval::{accuracy, ensemble_predict, ensemble_probs, EnsembleRule, EvalError};
use crate::losses::{
    cross_entropy, extended_softmax, student_loss, teacher_loss, LabelBatch, LossError, LossWeights, MlDirection,
    ProbBatch, StudentLossOptions,
};
use crate::nn::{Network, NnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{model} diverged (non-finite loss) in epoch {epoch}, {}", match .batch { Some(b) => format!("batch {b}"), None => "evaluation".to_string() })]
    Divergence { model: ModelId, epoch: usize, batch: Option<usize> },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io(io) => TrainError::Io(io),
            other => TrainError::Nn(other),
        }
    }
}

impl TrainError {
    fn is_non_finite(&self) -> bool {
        matches!(
            self,
            TrainError::Autodiff(AutodiffError::NonFinite(_))
                | TrainError::Nn(NnError::Autodiff(AutodiffError::NonFinite(_)))
                | TrainError::Loss(LossError::Autodiff(AutodiffError::NonFinite(_)))
        )
    }
}

/// Training protocol. The serialized names double as experiment mode names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Mode {
    /// Online training with the mutual-learning weight forced to zero.
    #[serde(rename = "kd", alias = "kd_only")]
    Kd,
    /// Students only, with the distillation weight forced to zero.
    #[serde(rename = "ml", alias = "ml_only")]
    Ml,
    #[default]
    #[serde(rename = "kd_ml_online", alias = "online")]
    KdMlOnline,
    /// Students distil from a frozen, pre-trained teacher.
    #[serde(rename = "kd_ml_offline", alias = "offline")]
    KdMlOffline,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Kd, Mode::Ml, Mode::KdMlOnline, Mode::KdMlOffline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Kd => "kd",
            Mode::Ml => "ml",
            Mode::KdMlOnline => "kd_ml_online",
            Mode::KdMlOffline => "kd_ml_offline",
        }
    }

    pub fn column_label(self) -> &'static str {
        match self {
            Mode::Kd => "KD",
            Mode::Ml => "ML",
            Mode::KdMlOnline => "KD + ML (On)",
            Mode::KdMlOffline => "KD + ML (Off)",
        }
    }

    pub fn has_teacher(self) -> bool {
        self != Mode::Ml
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kd" | "kd_only" => Ok(Mode::Kd),
            "ml" | "ml_only" => Ok(Mode::Ml),
            "kd_ml_online" | "online" => Ok(Mode::KdMlOnline),
            "kd_ml_offline" | "offline" => Ok(Mode::KdMlOffline),
            other => Err(TrainError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// A model slot in records and reports. `Student(k)` is zero-based and
/// displayed one-based (`student1`, …).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ModelId {
    Teacher,
    Student(usize),
    Ensemble,
}

impl ModelId {
    pub fn row_label(self) -> String {
        match self {
            ModelId::Teacher => "Teacher".into(),
            ModelId::Student(k) => format!("Student {}", k + 1),
            ModelId::Ensemble => "Ensemble".into(),
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelId::Teacher => f.write_str("teacher"),
            ModelId::Student(k) => write!(f, "student{}", k + 1),
            ModelId::Ensemble => f.write_str("ensemble"),
        }
    }
}

impl FromStr for ModelId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "teacher" => Ok(ModelId::Teacher),
            "ensemble" => Ok(ModelId::Ensemble),
            _ => s
                .strip_prefix("student")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(|k| ModelId::Student(k - 1))
                .ok_or_else(|| format!("unknown model id {s:?}")),
        }
    }
}

impl From<ModelId> for String {
    fn from(id: ModelId) -> Self {
        id.to_string()
    }
}

impl TryFrom<String> for ModelId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub weights: LossWeights,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: Mode,
    pub seed: u64,
    pub ml_direction: MlDirection,
    pub kd_t2_rescale: bool,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub ensemble_rule: EnsembleRule,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            weights: LossWeights::default(),
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 100,
            mode: Mode::KdMlOnline,
            seed: 0,
            ml_direction: MlDirection::Forward,
            kd_t2_rescale: false,
            augment: true,
            augmentation: AugmentConfig::default(),
            ensemble_rule: EnsembleRule::ElementwiseMax,
        }
    }
}

impl DistillConfig {
    /// Loss weights after the mode's forced zeros.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.mode {
            Mode::Kd => w.gamma = 0.0,
            Mode::Ml => w.beta = 0.0,
            Mode::KdMlOnline | Mode::KdMlOffline => {}
        }
        w
    }

    pub fn loss_options(&self) -> StudentLossOptions {
        StudentLossOptions { ml_direction: self.ml_direction, kd_t2_rescale: self.kd_t2_rescale }
    }

    /// Checks the config for a run with `students` students.
    pub fn validate(&self, students: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.augmentation.flip_prob) || self.augmentation.noise_std.is_nan() || self.augmentation.noise_std < 0.0 {
            return bad(format!("invalid augmentation {:?}", self.augmentation));
        }
        if students == 0 {
            return bad("at least one student is required".into());
        }
        if self.mode == Mode::Ml && students < 2 {
            return bad("ml mode needs at least two students".into());
        }
        self.effective_weights().validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEpoch {
    pub id: ModelId,
    /// Per-sample mean of the model's objective over the epoch.
    pub train_loss: f64,
    /// Test accuracy in percent after the epoch.
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub models: Vec<ModelEpoch>,
    /// Absent when no students take part.
    pub ensemble_test_acc: Option<f64>,
}

impl EpochRecord {
    pub fn model(&self, id: ModelId) -> Option<&ModelEpoch> {
        self.models.iter().find(|m| m.id == id)
    }
}

/// Independent seed for a named random stream (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream ids for [`derive_seed`].
pub mod streams {
    pub const SHUFFLE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const TEACHER: u64 = 4;
    /// Student `k` uses `STUDENT + k`.
    pub const STUDENT: u64 = 16;
}

enum TeacherSlot<'a> {
    Train(&'a mut Network),
    Frozen(&'a Network),
    Absent,
}

impl TeacherSlot<'_> {
    fn net(&self) -> Option<&Network> {
        match self {
            TeacherSlot::Train(n) => Some(n),
            TeacherSlot::Frozen(n) => Some(n),
            TeacherSlot::Absent => None,
        }
    }
}

type Observer<'o> = dyn FnMut(ModelId, Option<&Network>, &[Network]) + 'o;

fn guard<T, E: Into<TrainError>>(r: Result<T, E>, model: ModelId, epoch: usize, batch: Option<usize>) -> Result<T, TrainError> {
    r.map_err(|e| {
        let e = e.into();
        if e.is_non_finite() {
            TrainError::Divergence { model, epoch, batch }
        } else {
            e
        }
    })
}

fn check_finite(loss: f64, model: ModelId, epoch: usize, batch: usize) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Divergence { model, epoch, batch: Some(batch) })
    }
}

fn check_compatible(net: &Network, id: ModelId, data: &Dataset) -> Result<(), TrainError> {
    if net.architecture().input() != data.sample_shape() || net.num_classes() != data.class_count() {
        return Err(TrainError::Config(format!(
            "{id} expects input {:?} and {} classes; data has {:?} and {}",
            net.architecture().input(),
            net.num_classes(),
            data.sample_shape(),
            data.class_count()
        )));
    }
    Ok(())
}

fn softmax(logits: &Tensor) -> Result<Tensor, TrainError> {
    let tape = Tape::new();
    Ok(extended_softmax(tape.constant(logits), 1.0)?.value())
}

fn scored_accuracy(net: &Network, test: &Dataset) -> Result<(f64, Tensor), TrainError> {
    let scores = softmax(&net.logits(test.features())?)?;
    Ok((accuracy(&ensemble_predict(&scores), test.labels())?, scores))
}

/// Accuracy in percent of one network on `data`.
pub fn test_accuracy(net: &Network, data: &Dataset) -> Result<f64, TrainError> {
    Ok(scored_accuracy(net, data)?.0)
}

/// Accuracy in percent of the students' ensemble on `data`, evaluated on
/// `T = 1` probabilities.
pub fn ensemble_accuracy(students: &[Network], data: &Dataset, rule: EnsembleRule) -> Result<f64, TrainError> {
    let scores = students
        .iter()
        .map(|s| softmax(&s.logits(data.features())?))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(accuracy(&ensemble_predict(&ensemble_probs(&scores, rule)?), data.labels())?)
}

struct Run<'a, 'o> {
    cfg: &'a DistillConfig,
    weights: LossWeights,
    split: &'a Split,
    observer: &'a mut Observer<'o>,
}

impl Run<'_, '_> {
    fn execute(mut self, mut teacher: TeacherSlot<'_>, students: &mut [Network]) -> Result<Vec<EpochRecord>, TrainError> {
        let cfg = self.cfg;
        let train = &self.split.train;
        if let Some(t) = teacher.net() {
            check_compatible(t, ModelId::Teacher, train)?;
        }
        for (k, s) in students.iter().enumerate() {
            check_compatible(s, ModelId::Student(k), train)?;
        }
        if train.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::SHUFFLE));
        let mut augment_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::AUGMENT));
        let mut teacher_state = match &teacher {
            TeacherSlot::Train(t) => Some(OptimizerState::new(t.params())),
            _ => None,
        };
        let mut student_states: Vec<_> = students.iter().map(|s| OptimizerState::new(s.params())).collect();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut records = Vec::with_capacity(cfg.epochs);

        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut teacher_sum = 0.0;
            let mut student_sums = vec![0.0; students.len()];
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch = b + 1;
                let raw = train.features().select_rows(chunk);
                let x = if cfg.augment { augment(&raw, &mut augment_rng, &cfg.augmentation) } else { raw };
                let y = train.labels().select(chunk);
                let (t_loss, s_losses) = self.step(
                    &mut teacher,
                    students,
                    &x,
                    &y,
                    (epoch, batch),
                    &mut teacher_state,
                    &mut student_states,
                )?;
                let w = chunk.len() as f64;
                teacher_sum += t_loss * w;
                student_sums.iter_mut().zip(s_losses).for_each(|(s, l)| *s += l * w);
            }
            let n = train.len() as f64;
            records.push(self.evaluate(epoch, teacher.net(), teacher_sum / n, students, &student_sums, n)?);
            log::debug!("epoch {epoch}: {:?}", records.last().map(|r| &r.models));
        }
        Ok(records)
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        teacher: &mut TeacherSlot<'_>,
        students: &mut [Network],
        x: &Tensor,
        y: &LabelBatch,
        (epoch, batch): (usize, usize),
        teacher_state: &mut Option<OptimizerState>,
        student_states: &mut [OptimizerState],
    ) -> Result<(f64, Vec<f64>), TrainError> {
        let cfg = self.cfg;
        let t = cfg.temperature;
        macro_rules! at {
            ($id:expr, $e:expr) => {
                guard($e, $id, epoch, Some(batch))
            };
        }

        let teacher_tape = Tape::new();
        let teacher_pass = match teacher.net() {
            Some(net) => {
                let bound = match teacher {
                    TeacherSlot::Train(_) => net.bind(&teacher_tape),
                    _ => net.bind_frozen(&teacher_tape),
                };
                let id = ModelId::Teacher;
                let logits = at!(id, net.forward(&bound, teacher_tape.constant(x)))?;
                let hard = at!(id, extended_softmax(logits, 1.0))?;
                let ce = at!(id, teacher_loss(&hard, y))?;
                let soft = if t == 1.0 { hard } else { at!(id, extended_softmax(logits, t))? };
                Some((bound, ce, soft))
            }
            None => None,
        };

        let tapes: Vec<Tape> = students.iter().map(|_| Tape::new()).collect();
        let mut passes = Vec::with_capacity(students.len());
        for (k, (net, tape)) in students.iter().zip(&tapes).enumerate() {
            let id = ModelId::Student(k);
            let bound = net.bind(tape);
            let logits = at!(id, net.forward(&bound, tape.constant(x)))?;
            let hard = at!(id, extended_softmax(logits, 1.0))?;
            let ce = at!(id, cross_entropy(&hard, y))?;
            let soft = if t == 1.0 { hard } else { at!(id, extended_softmax(logits, t))? };
            passes.push((bound, ce, soft));
        }
        let softs: Vec<ProbBatch<'_>> = passes.iter().map(|p| p.2).collect();

        let mut teacher_loss_value = 0.0;
        if let Some((bound, ce, _)) = &teacher_pass {
            teacher_loss_value = ce.item();
            check_finite(teacher_loss_value, ModelId::Teacher, epoch, batch)?;
            if let TeacherSlot::Train(net) = teacher {
                teacher_tape.backward(*ce)?;
                net.accumulate_grads(bound)?;
                (self.observer)(ModelId::Teacher, Some(net), students);
                let state = teacher_state.as_mut().expect("trainable teacher has optimizer state");
                sgd_step(net.params_mut(), state, cfg.lr, cfg.momentum, cfg.weight_decay)?;
            }
        }

        let teacher_soft = teacher_pass.as_ref().map(|p| p.2);
        let options = cfg.loss_options();
        let mut losses = Vec::with_capacity(students.len());
        for k in 0..students.len() {
            let id = ModelId::Student(k);
            let (bound, ce, _) = &passes[k];
            let loss = at!(id, student_loss(k, *ce, teacher_soft.as_ref(), &softs, &self.weights, &options))?;
            check_finite(loss.item(), id, epoch, batch)?;
            losses.push(loss.item());
            tapes[k].backward(loss)?;
            students[k].accumulate_grads(bound)?;
            (self.observer)(id, teacher.net(), students);
            sgd_step(students[k].params_mut(), &mut student_states[k], cfg.lr, cfg.momentum, cfg.weight_decay)?;
        }
        Ok((teacher_loss_value, losses))
    }

    fn evaluate(
        &self,
        epoch: usize,
        teacher: Option<&Network>,
        teacher_loss: f64,
        students: &[Network],
        student_sums: &[f64],
        n: f64,
    ) -> Result<EpochRecord, TrainError> {
        let test = &self.split.test;
        let mut models = Vec::new();
        if let Some(net) = teacher {
            let (acc, _) = guard(scored_accuracy(net, test), ModelId::Teacher, epoch, None)?;
            models.push(ModelEpoch { id: ModelId::Teacher, train_loss: teacher_loss, test_acc: acc });
        }
        let mut scores = Vec::with_capacity(students.len());
        for (k, net) in students.iter().enumerate() {
            let id = ModelId::Student(k);
            let (acc, probs) = guard(scored_accuracy(net, test), id, epoch, None)?;
            models.push(ModelEpoch { id, train_loss: student_sums[k] / n, test_acc: acc });
            scores.push(probs);
        }
        let ensemble_test_acc = if scores.is_empty() {
            None
        } else {
            let merged = ensemble_probs(&scores, self.cfg.ensemble_rule)?;
            Some(accuracy(&ensemble_predict(&merged), test.labels())?)
        };
        Ok(EpochRecord { epoch, models, ensemble_test_acc })
    }
}

fn run(
    teacher: TeacherSlot<'_>,
    students: &mut [Network],
    split: &Split,
    cfg: &DistillConfig,
    weights: LossWeights,
    observer: &mut Observer<'_>,
) -> Result<Vec<EpochRecord>, TrainError> {
    Run { cfg, weights, split, observer }.execute(teacher, students)
}

fn require_mode(cfg: &DistillConfig, allowed: &[Mode], what: &str) -> Result<(), TrainError> {
    if allowed.contains(&cfg.mode) {
        Ok(())
    } else {
        Err(TrainError::Config(format!("{what} cannot run mode {}", cfg.mode)))
    }
}

/// Joint training of the teacher and all students (`kd_ml_online`, or `kd`
/// with the mutual-learning term off).
pub fn train_online(
    teacher: &mut Network,
    students: &mut [Network],
    split: &Split,
    cfg: &DistillConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    require_mode(cfg, &[Mode::KdMlOnline, Mode::Kd], "train_online")?;
    cfg.validate(students.len())?;
    run(TeacherSlot::Train(teacher), students, split, cfg, cfg.effective_weights(), &mut |_, _, _| {})
}

/// Students only, trained on cross-entropy and mutual learning.
pub fn train_ml_only(students: &mut [Network], split: &Split, cfg: &DistillConfig) -> Result<Vec<EpochRecord>, TrainError> {
    require_mode(cfg, &[Mode::Ml], "train_ml_only")?;
    cfg.validate(students.len())?;
    run(TeacherSlot::Absent, students, split, cfg, cfg.effective_weights(), &mut |_, _, _| {})
}

/// Students distil from a teacher that is never updated.
pub fn train_offline(
    teacher: &Network,
    students: &mut [Network],
    split: &Split,
    cfg: &DistillConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    require_mode(cfg, &[Mode::KdMlOffline], "train_offline")?;
    cfg.validate(students.len())?;
    run(TeacherSlot::Frozen(teacher), students, split, cfg, cfg.effective_weights(), &mut |_, _, _| {})
}

/// [`train_offline`] with the teacher read from a checkpoint.
pub fn train_offline_from_checkpoint(
    checkpoint: &Path,
    students: &mut [Network],
    split: &Split,
    cfg: &DistillConfig,
) -> Result<(Network, Vec<EpochRecord>), TrainError> {
    let teacher = Network::load(checkpoint)?;
    let records = train_offline(&teacher, students, split, cfg)?;
    Ok((teacher, records))
}

/// Each student on cross-entropy alone; `cfg.mode` and the loss weights
/// are ignored.
pub fn train_supervised(students: &mut [Network], split: &Split, cfg: &DistillConfig) -> Result<Vec<EpochRecord>, TrainError> {
    let cfg = DistillConfig { mode: Mode::KdMlOnline, ..cfg.clone() };
    cfg.validate(students.len())?;
    let weights = LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 };
    run(TeacherSlot::Absent, students, split, &cfg, weights, &mut |_, _, _| {})
}

/// Trains the teacher on cross-entropy alone and writes it to `path`.
pub fn pretrain_teacher(teacher: &mut Network, split: &Split, cfg: &DistillConfig, path: &Path) -> Result<PathBuf, TrainError> {
    let probe = DistillConfig { mode: Mode::KdMlOnline, ..cfg.clone() };
    probe.validate(1)?;
    let weights = LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 };
    run(TeacherSlot::Train(teacher), &mut [], split, &probe, weights, &mut |_, _, _| {})?;
    teacher.save(path)?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_blobs, split_80_20};
    use crate::nn::{Architecture, Role};

    fn blobs(seed: u64) -> Split {
        split_80_20(&gen_gaussian_blobs(3, 60, 2, 6.0, seed).unwrap(), seed).unwrap()
    }

    fn nets(k: usize) -> (Network, Vec<Network>) {
        let teacher = Network::init(Architecture::mlp(2, &[16], 3).unwrap(), Role::Teacher, "t", 1);
        let students = (0..k)
            .map(|i| Network::init(Architecture::mlp(2, &[8], 3).unwrap(), Role::Student, "s", 10 + i as u64))
            .collect();
        (teacher, students)
    }

    fn quick(mode: Mode) -> DistillConfig {
        DistillConfig { epochs: 3, mode, seed: 7, ..DistillConfig::default() }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let split = blobs(0);
        let (mut t, mut s) = nets(2);
        let (t0, s0) = (t.clone(), s.clone());
        let cfg = DistillConfig { epochs: 0, ..quick(Mode::KdMlOnline) };
        assert!(train_online(&mut t, &mut s, &split, &cfg).unwrap().is_empty());
        assert_eq!((t, s), (t0, s0));
    }

    #[test]
    fn deterministic_records() {
        let split = blobs(1);
        let run = || {
            let (mut t, mut s) = nets(2);
            train_online(&mut t, &mut s, &split, &quick(Mode::KdMlOnline)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn kd_mode_equals_online_without_mutual_learning() {
        let split = blobs(2);
        let (mut t1, mut s1) = nets(2);
        let (mut t2, mut s2) = nets(2);
        let kd = train_online(&mut t1, &mut s1, &split, &quick(Mode::Kd)).unwrap();
        let mut cfg = quick(Mode::KdMlOnline);
        cfg.weights.gamma = 0.0;
        let online = train_online(&mut t2, &mut s2, &split, &cfg).unwrap();
        assert_eq!(kd, online);
        assert_eq!(s1, s2);
    }

    #[test]
    fn ml_mode_equals_online_without_distillation_or_teacher_updates() {
        let split = blobs(3);
        let (_, mut s1) = nets(2);
        let (t, mut s2) = nets(2);
        train_ml_only(&mut s1, &split, &quick(Mode::Ml)).unwrap();
        let mut cfg = quick(Mode::KdMlOffline);
        cfg.weights.beta = 0.0;
        train_offline(&t, &mut s2, &split, &cfg).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn offline_teacher_is_frozen() {
        let split = blobs(4);
        let (t, mut s) = nets(2);
        let before = t.checksum();
        let records = train_offline(&t, &mut s, &split, &quick(Mode::KdMlOffline)).unwrap();
        assert_eq!(t.checksum(), before);
        let accs: Vec<f64> = records.iter().map(|r| r.model(ModelId::Teacher).unwrap().test_acc).collect();
        assert!(accs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn offline_with_only_cross_entropy_is_supervised_training() {
        let split = blobs(5);
        let (t, mut s1) = nets(2);
        let (_, mut s2) = nets(2);
        let mut cfg = quick(Mode::KdMlOffline);
        cfg.weights = LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 };
        train_offline(&t, &mut s1, &split, &cfg).unwrap();
        train_supervised(&mut s2, &split, &quick(Mode::Kd)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn config_errors() {
        let split = blobs(6);
        let (mut t, mut s) = nets(1);
        assert!(matches!(train_ml_only(&mut s, &split, &quick(Mode::Ml)), Err(TrainError::Config(_))));
        let cfg = DistillConfig { temperature: 0.0, ..quick(Mode::KdMlOnline) };
        assert!(matches!(train_online(&mut t, &mut s, &split, &cfg), Err(TrainError::Config(_))));
        let cfg = DistillConfig { batch_size: 0, ..quick(Mode::KdMlOnline) };
        assert!(matches!(train_online(&mut t, &mut s, &split, &cfg), Err(TrainError::Config(_))));
        assert!(matches!(train_online(&mut t, &mut s, &split, &quick(Mode::Ml)), Err(TrainError::Config(_))));
        let mut wrong = vec![Network::init(Architecture::mlp(3, &[4], 3).unwrap(), Role::Student, "s", 0)];
        assert!(matches!(train_online(&mut t, &mut wrong, &split, &quick(Mode::KdMlOnline)), Err(TrainError::Config(_))));
    }

    #[test]
    fn huge_learning_rate_diverges_with_a_named_model() {
        let split = blobs(7);
        let (mut t, mut s) = nets(2);
        let cfg = DistillConfig { lr: 1e200, momentum: 0.0, augment: false, ..quick(Mode::KdMlOnline) };
        match train_online(&mut t, &mut s, &split, &cfg) {
            Err(TrainError::Divergence { model, epoch, .. }) => {
                assert_eq!(model, ModelId::Teacher);
                assert_eq!(epoch, 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn only_the_stepping_model_holds_gradients() {
        let split = blobs(8);
        let (mut t, mut s) = nets(3);
        let cfg = quick(Mode::KdMlOnline);
        let mut seen = Vec::new();
        run(TeacherSlot::Train(&mut t), &mut s, &split, &cfg, cfg.effective_weights(), &mut |id, teacher, students| {
            assert_eq!(teacher.unwrap().has_grads(), id == ModelId::Teacher);
            for (k, st) in students.iter().enumerate() {
                assert_eq!(st.has_grads(), id == ModelId::Student(k));
            }
            seen.push(id);
        })
        .unwrap();
        assert_eq!(&seen[..4], &[ModelId::Teacher, ModelId::Student(0), ModelId::Student(1), ModelId::Student(2)]);
    }

    #[test]
    fn training_loss_decreases() {
        let split = blobs(9);
        let (mut t, mut s) = nets(2);
        let cfg = DistillConfig { epochs: 10, ..quick(Mode::KdMlOnline) };
        let records = train_online(&mut t, &mut s, &split, &cfg).unwrap();
        for m in &records[0].models {
            assert!(records[9].model(m.id).unwrap().train_loss < m.train_loss, "{m:?}");
        }
    }

    #[test]
    fn pretraining_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = blobs(10);
        let (mut t, _) = nets(0);
        let init = t.clone();
        let zero = pretrain_teacher(&mut t, &split, &DistillConfig { epochs: 0, ..quick(Mode::KdMlOffline) }, &dir.path().join("zero.ckpt"))
            .unwrap();
        assert_eq!(Network::load(&zero).unwrap(), init);

        let path = pretrain_teacher(&mut t, &split, &DistillConfig { epochs: 5, ..quick(Mode::KdMlOffline) }, &dir.path().join("t.ckpt"))
            .unwrap();
        let loaded = Network::load(&path).unwrap();
        let probe = split.test.features();
        assert_eq!(loaded.logits(probe).unwrap(), t.logits(probe).unwrap());
        let acc = |n: &Network| test_accuracy(n, &split.test).unwrap();
        assert!(acc(&loaded) > acc(&init));

        let (_, mut s) = nets(2);
        let missing = train_offline_from_checkpoint(&dir.path().join("nope"), &mut s, &split, &quick(Mode::KdMlOffline));
        assert!(matches!(missing, Err(TrainError::Io(_))));
    }

    #[test]
    fn names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("online".parse::<Mode>().unwrap(), Mode::KdMlOnline);
        for id in [ModelId::Teacher, ModelId::Student(0), ModelId::Student(11), ModelId::Ensemble] {
            assert_eq!(id.to_string().parse::<ModelId>().unwrap(), id);
        }
        assert!("student0".parse::<ModelId>().is_err());
    }
}
