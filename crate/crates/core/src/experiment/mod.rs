//! Experiment files, the (mode × seed) runner, and report/plot artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! <out>/<fingerprint>/table.txt
//! <out>/<fingerprint>/table.csv
//! <out>/<fingerprint>/<mode>/<seed>/report.json
//! <out>/<fingerprint>/<mode>/<seed>/log.tsv
//! <out>/<fingerprint>/kd_ml_offline/<seed>/teacher.ckpt
//! ```
//!
//! An existing `report.json` with the same fingerprint is reused instead of
//! retraining.

mod plot;
mod spec;

pub use plot::{accuracy_svg, emit_plots, params_svg};
pub use spec::{DatasetSpec, ExperimentSpec, NetSpec, Preset, CONV_KERNEL};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;
use walkdir::WalkDir;

use crate::data::{DataError, Split};
use crate::eval::{render_csv, render_table, EvalError, ModelResult, RunReport};
use crate::nn::{Network, NnError, Role};
use crate::train::{
    derive_seed, ensemble_accuracy, pretrain_teacher, streams, test_accuracy, train_offline_from_checkpoint,
    train_ml_only, train_online, EpochRecord, Mode, ModelId, TrainError,
};

pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "log.tsv";
pub const CHECKPOINT_FILE: &str = "teacher.ckpt";
pub const TABLE_FILE: &str = "table.txt";
pub const CSV_FILE: &str = "table.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("run {mode}/{seed}: {source}")]
    Run {
        mode: Mode,
        seed: u64,
        #[source]
        source: TrainError,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("network: {0}")]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl ExperimentError {
    /// Process exit code: 2 for usage and config errors, 3 for divergence,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Spec(_) => 2,
            ExperimentError::Data(DataError::Io(_)) => 1,
            ExperimentError::Data(_) => 2,
            ExperimentError::Run { source: TrainError::Divergence { .. }, .. } => 3,
            ExperimentError::Run { source: TrainError::Config(_), .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Cells trained concurrently.
    pub jobs: usize,
    /// Retrain even when a cached report exists.
    pub fresh: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub reports: Vec<RunReport>,
    pub table: String,
    pub csv: String,
    /// Cells whose report came from an earlier run.
    pub cached: usize,
}

fn build_networks(preset: &Preset, split: &Split, seed: u64) -> Result<(Network, Vec<Network>), NnError> {
    let input = split.train.sample_shape().to_vec();
    let classes = split.train.class_count();
    let teacher = Network::init(
        preset.teacher.architecture(&input, classes)?,
        Role::Teacher,
        format!("{}/teacher", preset.name),
        derive_seed(seed, streams::TEACHER),
    );
    let students = preset
        .students
        .iter()
        .enumerate()
        .map(|(k, s)| {
            Ok(Network::init(
                s.architecture(&input, classes)?,
                Role::Student,
                format!("{}/student{}", preset.name, k + 1),
                derive_seed(seed, streams::STUDENT + k as u64),
            ))
        })
        .collect::<Result<Vec<_>, NnError>>()?;
    Ok((teacher, students))
}

/// Tab-separated per-epoch log: `epoch, model, train_loss, test_acc`, with
/// `-` for the ensemble's train loss.
pub fn render_log(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\tmodel\ttrain_loss\ttest_acc\n");
    for r in records {
        for m in &r.models {
            writeln!(out, "{}\t{}\t{}\t{}", r.epoch, m.id, m.train_loss, m.test_acc).unwrap();
        }
        if let Some(acc) = r.ensemble_test_acc {
            writeln!(out, "{}\t{}\t-\t{acc}", r.epoch, ModelId::Ensemble).unwrap();
        }
    }
    out
}

struct Cell<'a> {
    spec: &'a ExperimentSpec,
    preset: &'a Preset,
    split: &'a Split,
    fingerprint: &'a str,
    mode: Mode,
    seed: u64,
    dir: PathBuf,
}

impl Cell<'_> {
    fn cached(&self) -> Option<RunReport> {
        let text = fs::read_to_string(self.dir.join(REPORT_FILE)).ok()?;
        let report: RunReport = serde_json::from_str(&text).ok()?;
        (report.fingerprint == self.fingerprint && report.mode == self.mode && report.seed == self.seed).then_some(report)
    }

    fn train(&self) -> Result<RunReport, ExperimentError> {
        let wrap = |source: TrainError| ExperimentError::Run { mode: self.mode, seed: self.seed, source };
        fs::create_dir_all(&self.dir)?;
        let cfg = self.spec.run_config(self.mode, self.seed);
        let (mut teacher, mut students) = build_networks(self.preset, self.split, self.seed)?;
        let (teacher, records) = match self.mode {
            Mode::Kd | Mode::KdMlOnline => {
                let records = train_online(&mut teacher, &mut students, self.split, &cfg).map_err(wrap)?;
                (Some(teacher), records)
            }
            Mode::Ml => (None, train_ml_only(&mut students, self.split, &cfg).map_err(wrap)?),
            Mode::KdMlOffline => {
                let path = pretrain_teacher(&mut teacher, self.split, &cfg, &self.dir.join(CHECKPOINT_FILE)).map_err(wrap)?;
                let (frozen, records) =
                    train_offline_from_checkpoint(&path, &mut students, self.split, &cfg).map_err(wrap)?;
                (Some(frozen), records)
            }
        };
        fs::write(self.dir.join(LOG_FILE), render_log(&records))?;

        let test = &self.split.test;
        let mut models = Vec::new();
        if let Some(t) = &teacher {
            models.push(ModelResult { id: ModelId::Teacher, test_acc: test_accuracy(t, test).map_err(wrap)?, params: t.param_count() });
        }
        for (k, s) in students.iter().enumerate() {
            models.push(ModelResult { id: ModelId::Student(k), test_acc: test_accuracy(s, test).map_err(wrap)?, params: s.param_count() });
        }
        let report = RunReport {
            fingerprint: self.fingerprint.to_string(),
            preset: self.preset.name.clone(),
            mode: self.mode,
            seed: self.seed,
            models,
            ensemble_acc: ensemble_accuracy(&students, test, cfg.ensemble_rule).map_err(wrap)?,
        };
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        fs::write(self.dir.join(REPORT_FILE), json)?;
        Ok(report)
    }
}

/// Trains every (mode, seed) cell of `spec`, then writes the aggregate
/// table. Cells run on a pool of `opts.jobs` threads.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunOutcome, ExperimentError> {
    let preset = spec.validate()?;
    let fingerprint = spec.fingerprint(&preset)?;
    let split = spec.dataset.split()?;
    let dir = opts.out.join(&fingerprint);
    fs::create_dir_all(&dir)?;

    let cells: Vec<Cell<'_>> = spec
        .modes
        .iter()
        .flat_map(|&mode| spec.seeds.iter().map(move |&seed| (mode, seed)))
        .map(|(mode, seed)| Cell {
            spec,
            preset: &preset,
            split: &split,
            fingerprint: &fingerprint,
            mode,
            seed,
            dir: dir.join(mode.name()).join(seed.to_string()),
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs.max(1)).build()?;
    let results: Vec<Result<(RunReport, bool), ExperimentError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                if !opts.fresh {
                    if let Some(r) = cell.cached() {
                        log::info!("{}/{}: cached", cell.mode, cell.seed);
                        return Ok((r, true));
                    }
                }
                log::info!("{}/{}: training", cell.mode, cell.seed);
                cell.train().map(|r| (r, false))
            })
            .collect()
    });
    let mut reports = Vec::with_capacity(results.len());
    let mut cached = 0;
    for r in results {
        let (report, hit) = r?;
        cached += usize::from(hit);
        reports.push(report);
    }

    let table = render_table(&reports)?;
    let csv = render_csv(&reports)?;
    fs::write(dir.join(TABLE_FILE), &table)?;
    fs::write(dir.join(CSV_FILE), &csv)?;
    Ok(RunOutcome { dir, reports, table, csv, cached })
}

/// Every `report.json` below `dir`, in path order.
pub fn load_reports(dir: &Path) -> Result<Vec<(PathBuf, RunReport)>, ExperimentError> {
    if !dir.is_dir() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} is not a directory", dir.display())).into());
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::from)?;
        if entry.file_type().is_file() && entry.file_name() == REPORT_FILE {
            let text = fs::read_to_string(entry.path())?;
            out.push((entry.path().to_path_buf(), serde_json::from_str(&text)?));
        }
    }
    Ok(out)
}

/// One table per fingerprint found under `dir`, as (text, csv).
pub fn tables(dir: &Path) -> Result<Vec<(String, String)>, ExperimentError> {
    let reports = load_reports(dir)?;
    if reports.is_empty() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("no {REPORT_FILE} under {}", dir.display())).into());
    }
    let mut groups: BTreeMap<String, Vec<RunReport>> = BTreeMap::new();
    for (_, r) in reports {
        groups.entry(r.fingerprint.clone()).or_default().push(r);
    }
    groups.values().map(|g| Ok((render_table(g)?, render_csv(g)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(modes: &str, epochs: usize) -> ExperimentSpec {
        let text = format!(
            r#"
preset = "V1"
modes = [{modes}]
seeds = [1, 2]
[dataset]
kind = "blobs"
classes = 3
per_class = 15
separation = 6.0
[config]
epochs = {epochs}
"#
        );
        ExperimentSpec::from_toml(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn cells_reports_and_cache() {
        let out = tempfile::tempdir().unwrap();
        let opts = RunOptions { out: out.path().to_path_buf(), jobs: 2, fresh: false };
        let s = spec(r#""kd", "ml", "kd_ml_offline""#, 2);
        let first = run_experiment(&s, &opts).unwrap();
        assert_eq!(first.reports.len(), 6);
        assert_eq!(first.cached, 0);
        assert!(first.dir.join("kd_ml_offline/1").join(CHECKPOINT_FILE).is_file());
        assert!(first.reports.iter().filter(|r| r.mode == Mode::Ml).all(|r| r.teacher_params().is_none()));
        let log = fs::read_to_string(first.dir.join("kd/2").join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 1 + 2 * 4);

        let second = run_experiment(&s, &opts).unwrap();
        assert_eq!(second.cached, 6);
        assert_eq!(second.table, first.table);

        let loaded = tables(out.path()).unwrap();
        assert_eq!(loaded, vec![(first.table, first.csv)]);
    }

    #[test]
    fn missing_reports_are_an_io_error() {
        let out = tempfile::tempdir().unwrap();
        assert!(matches!(tables(out.path()), Err(ExperimentError::Io(_))));
        assert!(matches!(tables(&out.path().join("absent")), Err(ExperimentError::Io(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(ExperimentError::Spec("x".into()).exit_code(), 2);
        let div = ExperimentError::Run {
            mode: Mode::Kd,
            seed: 1,
            source: TrainError::Divergence { model: ModelId::Teacher, epoch: 1, batch: Some(1) },
        };
        assert_eq!(div.exit_code(), 3);
        assert!(div.to_string().contains("kd/1"));
    }
}
