use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::{mean, sample_std, welch_t_test, WelchResult};
use super::EvalError;
use crate::train::{Mode, ModelId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub id: ModelId,
    /// Final test accuracy in percent.
    pub test_acc: f64,
    pub params: usize,
}

/// Outcome of one (mode, seed) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fingerprint: String,
    pub preset: String,
    pub mode: Mode,
    pub seed: u64,
    pub models: Vec<ModelResult>,
    pub ensemble_acc: f64,
}

impl RunReport {
    pub fn teacher_params(&self) -> Option<usize> {
        self.models.iter().find(|m| m.id == ModelId::Teacher).map(|m| m.params)
    }

    pub fn student_params(&self) -> usize {
        self.models.iter().filter(|m| matches!(m.id, ModelId::Student(_))).map(|m| m.params).sum()
    }

    fn accuracies(&self) -> impl Iterator<Item = (ModelId, f64)> + '_ {
        self.models
            .iter()
            .map(|m| (m.id, m.test_acc))
            .chain(std::iter::once((ModelId::Ensemble, self.ensemble_acc)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: Mode,
    pub model: ModelId,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; absent for a single seed.
    pub std: Option<f64>,
    /// Welch test of this row against the baseline, for ensemble rows.
    pub verdict: Option<WelchResult>,
}

impl AggregateRow {
    /// Significantly better than the baseline.
    pub fn improves_on_baseline(&self) -> bool {
        self.verdict.is_some_and(|v| v.significant && v.t > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub fingerprint: String,
    pub preset: String,
    pub baseline: (Mode, ModelId),
    pub rows: Vec<AggregateRow>,
}

impl AggregateReport {
    pub fn row(&self, mode: Mode, model: ModelId) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.mode == mode && r.model == model)
    }
}

type Groups = BTreeMap<(Mode, ModelId), Vec<f64>>;

fn group(reports: &[RunReport]) -> Result<Groups, EvalError> {
    let first = reports.first().ok_or_else(|| EvalError::Aggregation("no reports".into()))?;
    if let Some(other) = reports.iter().find(|r| r.fingerprint != first.fingerprint) {
        return Err(EvalError::Aggregation(format!(
            "mixed config fingerprints {} and {}",
            first.fingerprint, other.fingerprint
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in reports {
        if !seen.insert((r.mode, r.seed)) {
            return Err(EvalError::Aggregation(format!("duplicate report for {} seed {}", r.mode, r.seed)));
        }
    }
    let mut ordered: Vec<&RunReport> = reports.iter().collect();
    ordered.sort_by_key(|r| (r.mode, r.seed));
    let mut groups = Groups::new();
    for r in ordered {
        for (id, acc) in r.accuracies() {
            groups.entry((r.mode, id)).or_default().push(acc);
        }
    }
    Ok(groups)
}

fn summarize(groups: &Groups, baseline: (Mode, ModelId)) -> Result<Vec<AggregateRow>, EvalError> {
    let base = groups.get(&baseline);
    groups
        .iter()
        .map(|(&(mode, model), accs)| {
            let verdict = match base {
                Some(b) if model == ModelId::Ensemble && (mode, model) != baseline && accs.len() >= 2 && b.len() >= 2 => {
                    Some(welch_t_test(accs, b)?)
                }
                _ => None,
            };
            Ok(AggregateRow {
                mode,
                model,
                n: accs.len(),
                mean: mean(accs),
                std: (accs.len() >= 2).then(|| sample_std(accs)),
                verdict,
            })
        })
        .collect()
}

/// Mean ± sample std per (mode, model) over seeds, with Welch verdicts of
/// every ensemble against `baseline`. Requires at least two seeds per row.
pub fn aggregate(reports: &[RunReport], baseline: (Mode, ModelId)) -> Result<AggregateReport, EvalError> {
    let groups = group(reports)?;
    if let Some(((mode, model), accs)) = groups.iter().find(|(_, a)| a.len() < 2) {
        return Err(EvalError::Aggregation(format!(
            "{mode} {model} has {} seed(s); at least 2 are required",
            accs.len()
        )));
    }
    if !groups.contains_key(&baseline) {
        return Err(EvalError::Aggregation(format!("baseline {} {} is absent", baseline.0, baseline.1)));
    }
    Ok(AggregateReport {
        fingerprint: reports[0].fingerprint.clone(),
        preset: reports[0].preset.clone(),
        baseline,
        rows: summarize(&groups, baseline)?,
    })
}

const BASELINE: (Mode, ModelId) = (Mode::Kd, ModelId::Ensemble);

struct Layout {
    modes: Vec<Mode>,
    models: Vec<ModelId>,
    rows: Vec<AggregateRow>,
    single_seed: bool,
}

fn layout(reports: &[RunReport]) -> Result<Layout, EvalError> {
    let groups = group(reports)?;
    let rows = summarize(&groups, BASELINE)?;
    let mut modes: Vec<Mode> = rows.iter().map(|r| r.mode).collect();
    modes.dedup();
    let students = rows
        .iter()
        .filter_map(|r| match r.model {
            ModelId::Student(k) => Some(k + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let mut models = vec![ModelId::Teacher];
    models.extend((0..students).map(ModelId::Student));
    models.push(ModelId::Ensemble);
    let single_seed = rows.iter().any(|r| r.n < 2);
    Ok(Layout { modes, models, rows, single_seed })
}

fn cell(l: &Layout, mode: Mode, model: ModelId) -> String {
    match l.rows.iter().find(|r| r.mode == mode && r.model == model) {
        None => "−".to_string(),
        Some(r) => {
            let mut s = match r.std {
                Some(std) => format!("{:.2}±{:.2}", r.mean, std),
                None => format!("{:.2}", r.mean),
            };
            if r.improves_on_baseline() {
                s.push('*');
            }
            s
        }
    }
}

/// Percent reduction from the teacher to the combined students, using the
/// first report that has a teacher.
fn compression_line(reports: &[RunReport]) -> Option<String> {
    let mut ordered: Vec<&RunReport> = reports.iter().collect();
    ordered.sort_by_key(|r| (r.mode, r.seed));
    let r = ordered.into_iter().find(|r| r.teacher_params().is_some())?;
    let teacher = r.teacher_params()?;
    let students = r.student_params();
    let reduction = 100.0 * (teacher as f64 - students as f64) / teacher as f64;
    Some(format!(
        "Parameters ({}): teacher {teacher}, students combined {students} ({reduction:.1}% reduction)",
        r.preset
    ))
}

/// Plain-text table: rows Teacher, Student k…, Ensemble; one column per
/// mode; cells `mean±std`, with `*` on ensembles significantly better than
/// the KD ensemble.
pub fn render_table(reports: &[RunReport]) -> Result<String, EvalError> {
    let l = layout(reports)?;
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Model".to_string()];
    header.extend(l.modes.iter().map(|m| m.column_label().to_string()));
    grid.push(header);
    for &model in &l.models {
        let mut row = vec![model.row_label()];
        row.extend(l.modes.iter().map(|&m| cell(&l, m, model)));
        grid.push(row);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));

    let seeds = {
        let mut s: Vec<u64> = reports.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    };
    let mut out = String::new();
    writeln!(out, "Experiment {} (preset {}, {seeds} seed(s))", reports[0].fingerprint, reports[0].preset).unwrap();
    for (i, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, &w)| pad(c, w)).collect();
        writeln!(out, "{}", cells.join(" | ").trim_end()).unwrap();
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            writeln!(out, "{}", rule.join("-+-")).unwrap();
        }
    }
    writeln!(out).unwrap();
    if l.single_seed {
        writeln!(out, "Note: single-seed results; no standard deviations or significance tests.").unwrap();
    } else if l.modes.contains(&Mode::Kd) {
        writeln!(out, "* significant improvement over the KD ensemble (Welch's t-test, two-sided p < 0.05)").unwrap();
    } else {
        writeln!(out, "No KD column; significance against the KD ensemble is not available.").unwrap();
    }
    if let Some(line) = compression_line(reports) {
        writeln!(out, "{line}").unwrap();
    }
    Ok(out)
}

/// CSV with the same rows as [`render_table`] and, per mode, columns
/// `<mode>_mean, <mode>_std, <mode>_n, <mode>_significant`.
pub fn render_csv(reports: &[RunReport]) -> Result<String, EvalError> {
    let l = layout(reports)?;
    let mut out = String::from("model");
    for m in &l.modes {
        write!(out, ",{m}_mean,{m}_std,{m}_n,{m}_significant").unwrap();
    }
    out.push('\n');
    for &model in &l.models {
        out.push_str(&model.row_label());
        for &mode in &l.modes {
            match l.rows.iter().find(|r| r.mode == mode && r.model == model) {
                None => out.push_str(",,,,"),
                Some(r) => {
                    let std = r.std.map(|s| format!("{s:.4}")).unwrap_or_default();
                    let sig = match r.verdict {
                        Some(_) => r.improves_on_baseline().to_string(),
                        None => String::new(),
                    };
                    write!(out, ",{:.4},{std},{},{sig}", r.mean, r.n).unwrap();
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}
