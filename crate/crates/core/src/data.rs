//! Datasets, synthetic generators, CSV ingestion and the stratified split.
//!
//! Everything here is a pure function of its parameters and seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::losses::LabelBatch;

/// Noise standard deviation of [`gen_synthetic_images`].
pub const IMAGE_NOISE_STD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameters: {0}")]
    Parameter(String),
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("cannot split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: LabelBatch,
    name: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: LabelBatch, name: impl Into<String>) -> Result<Self, DataError> {
        if features.shape().is_empty() || features.shape()[0] != labels.len() {
            return Err(DataError::Parameter(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        Ok(Self { features, labels, name: name.into() })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &LabelBatch {
        &self.labels
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_count(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: self.labels.select(indices),
            name: self.name.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for &l in self.labels.labels() {
            counts[l] += 1;
        }
        counts
    }

    /// Classes in `0..C` without any sample.
    pub fn empty_classes(&self) -> Vec<usize> {
        self.class_counts().iter().enumerate().filter(|(_, &n)| n == 0).map(|(c, _)| c).collect()
    }

    /// Writes a header row (`f0, f1, …, label`) and one row per sample,
    /// with features flattened.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let width: usize = self.sample_shape().iter().product();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..width).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        let data = self.features.data();
        for (i, label) in self.labels.labels().iter().enumerate() {
            let mut row: Vec<String> = data[i * width..(i + 1) * width].iter().map(|v| v.to_string()).collect();
            row.push(label.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Isotropic unit-variance Gaussian clusters.
///
/// Class `c` is centred at `separation · u_c`. For `dim ≥ 2` the unit
/// directions `u_c` are evenly spaced on a circle in the first two
/// coordinates; for `dim = 1` the centres are spread evenly over `[-1, 1]`.
/// Samples are ordered class by class.
pub fn gen_gaussian_blobs(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 || dim == 0 || !(separation >= 0.0 && separation.is_finite()) {
        return Err(DataError::Parameter(format!(
            "blobs need C ≥ 2, dim ≥ 1 and separation ≥ 0 (got C={classes}, dim={dim}, separation={separation})"
        )));
    }
    if n_per_class == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for c in 0..classes {
        let mut centre = vec![0.0; dim];
        if dim == 1 {
            centre[0] = separation * (2.0 * c as f64 / (classes - 1) as f64 - 1.0);
        } else {
            let angle = 2.0 * PI * c as f64 / classes as f64;
            centre[0] = separation * angle.cos();
            centre[1] = separation * angle.sin();
        }
        for _ in 0..n_per_class {
            for &m in &centre {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + z);
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, dim], data).expect("sized above"),
        LabelBatch::new(labels, classes).expect("labels below C"),
        format!("blobs-c{classes}-d{dim}-s{separation}"),
    )
}

/// Clean class template of [`gen_synthetic_images`]: horizontal stripes
/// with `c + 1` periods down the image. Each row is constant, so the
/// template is unchanged by a horizontal flip.
pub fn image_template(class: usize, side: usize) -> Vec<f64> {
    let freq = (class + 1) as f64;
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        let v = (2.0 * PI * freq * (i as f64 + 0.5) / side as f64).cos();
        out.extend(std::iter::repeat_n(v, side));
    }
    out
}

/// Single-channel `side × side` images (`[N, 1, side, side]`), one stripe
/// frequency per class plus Gaussian noise of std [`IMAGE_NOISE_STD`].
pub fn gen_synthetic_images(classes: usize, n_per_class: usize, side: usize, seed: u64) -> Result<Dataset, DataError> {
    if side < 8 {
        return Err(DataError::Parameter(format!("image side must be at least 8, got {side}")));
    }
    if classes < 2 || classes > side / 2 {
        return Err(DataError::Parameter(format!(
            "{classes} classes need distinct frequencies; side {side} supports 2..={}",
            side / 2
        )));
    }
    if n_per_class == 0 {
        return Err(DataError::Empty);
    }
    let noise = Normal::new(0.0, IMAGE_NOISE_STD).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(classes * n_per_class * side * side);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for c in 0..classes {
        let template = image_template(c, side);
        for _ in 0..n_per_class {
            data.extend(template.iter().map(|t| t + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 1, side, side], data).expect("sized above"),
        LabelBatch::new(labels, classes).expect("labels below C"),
        format!("images-c{classes}-side{side}"),
    )
}

/// Reads a headered, comma-separated file. Every column other than
/// `label_column` is a numeric feature; `C` is the largest label plus one.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::MissingColumn(label_column.to_string()))?;
    let width = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if j == label_idx {
                let label: usize = cell.parse().map_err(|_| DataError::Parse {
                    line,
                    message: format!("label {cell:?} is not a non-negative integer"),
                })?;
                labels.push(label);
            } else {
                let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                    line,
                    message: format!("column {:?}: {cell:?} is not numeric", &headers[j]),
                })?;
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let name = path.file_stem().map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    let n = labels.len();
    let ds = Dataset::new(
        Tensor::new(vec![n, width], data).map_err(|e| DataError::Parameter(e.to_string()))?,
        LabelBatch::new(labels, classes).expect("C inferred from the labels"),
        name,
    )?;
    let empty = ds.empty_classes();
    if !empty.is_empty() {
        log::warn!("{}: classes {empty:?} have no samples", path.display());
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

pub fn split_80_20(ds: &Dataset, seed: u64) -> Result<Split, DataError> {
    stratified_split(ds, 0.8, seed)
}

/// Class-stratified train/test split.
///
/// The train set holds `round(ratio · N)` samples. Each class contributes
/// `floor(ratio · n_c)`, and the remaining slots go to the classes with the
/// largest fractional remainders (lowest class index on ties).
pub fn stratified_split(ds: &Dataset, ratio: f64, seed: u64) -> Result<Split, DataError> {
    let n = ds.len();
    if n < 5 {
        return Err(DataError::Split(format!("need at least 5 samples, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Split(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (i, &l) in ds.labels().labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    let target = (ratio * n as f64).round() as usize;
    let mut quota: Vec<usize> = by_class.iter().map(|m| (ratio * m.len() as f64).floor() as usize).collect();
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    let frac = |c: usize| ratio * by_class[c].len() as f64 - quota[c] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }

    let mut train_indices = Vec::with_capacity(target);
    let mut test_indices = Vec::with_capacity(n - target);
    for (members, &q) in by_class.iter().zip(&quota) {
        train_indices.extend_from_slice(&members[..q]);
        test_indices.extend_from_slice(&members[q..]);
    }
    train_indices.shuffle(&mut rng);
    test_indices.shuffle(&mut rng);
    Ok(Split {
        train: ds.subset(&train_indices),
        test: ds.subset(&test_indices),
        train_indices,
        test_indices,
        ratio,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = gen_gaussian_blobs(3, 50, 2, 4.0, 7).unwrap();
        let b = gen_gaussian_blobs(3, 50, 2, 4.0, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![50, 50, 50]);
        assert_eq!(a.features().shape(), &[150, 2]);
        assert_ne!(a, gen_gaussian_blobs(3, 50, 2, 4.0, 8).unwrap());
    }

    #[test]
    fn blob_centres_sit_at_the_separation_radius() {
        let ds = gen_gaussian_blobs(4, 2000, 3, 5.0, 1).unwrap();
        for c in 0..4 {
            let idx: Vec<usize> = (c * 2000..(c + 1) * 2000).collect();
            let sub = ds.subset(&idx);
            let mean: Vec<f64> = (0..3).map(|j| (0..2000).map(|i| sub.features().at(i, j)).sum::<f64>() / 2000.0).collect();
            let radius = (mean[0].powi(2) + mean[1].powi(2)).sqrt();
            assert!((radius - 5.0).abs() < 0.1, "class {c}: radius {radius}");
            assert!(mean[2].abs() < 0.1);
        }
    }

    #[test]
    fn blob_parameter_errors() {
        assert!(matches!(gen_gaussian_blobs(1, 10, 2, 1.0, 0), Err(DataError::Parameter(_))));
        assert!(matches!(gen_gaussian_blobs(3, 10, 2, -1.0, 0), Err(DataError::Parameter(_))));
        assert!(matches!(gen_gaussian_blobs(3, 0, 2, 1.0, 0), Err(DataError::Empty)));
    }

    #[test]
    fn images_examples() {
        assert!(matches!(gen_synthetic_images(3, 0, 8, 0), Err(DataError::Empty)));
        assert!(matches!(gen_synthetic_images(3, 4, 6, 0), Err(DataError::Parameter(_))));
        assert!(matches!(gen_synthetic_images(5, 4, 8, 0), Err(DataError::Parameter(_))));
        let ds = gen_synthetic_images(4, 25, 8, 3).unwrap();
        assert_eq!(ds.features().shape(), &[100, 1, 8, 8]);
        assert_eq!(ds.class_counts(), vec![25; 4]);
        assert_eq!(ds, gen_synthetic_images(4, 25, 8, 3).unwrap());
    }

    #[test]
    fn image_templates_are_flip_invariant() {
        for c in 0..4 {
            let t = image_template(c, 8);
            for row in t.chunks(8) {
                let flipped: Vec<f64> = row.iter().rev().copied().collect();
                assert_eq!(row, &flipped[..]);
            }
        }
    }

    #[test]
    fn image_class_means_are_well_separated() {
        let side = 8;
        let n = 200;
        let ds = gen_synthetic_images(4, n, side, 11).unwrap();
        let px = side * side;
        let means: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                let mut m = vec![0.0; px];
                for i in c * n..(c + 1) * n {
                    for (acc, v) in m.iter_mut().zip(&ds.features().data()[i * px..(i + 1) * px]) {
                        *acc += v / n as f64;
                    }
                }
                m
            })
            .collect();
        for a in 0..4 {
            for b in a + 1..4 {
                let dist = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(dist > 3.0 * IMAGE_NOISE_STD, "classes {a},{b}: {dist}");
            }
        }
    }

    fn write_file(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn csv_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "tiny.csv", "x,y,label\n0.5,-1.25,1\n2,3,0\n-0.0,1e-3,1\n");
        let ds = load_csv(&path, "label").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.features().data(), &[0.5, -1.25, 2.0, 3.0, -0.0, 1e-3]);
        assert_eq!(ds.labels().labels(), &[1, 0, 1]);

        let out = dir.path().join("export.csv");
        ds.write_csv(&out).unwrap();
        let back = load_csv(&out, "label").unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "bad.csv", "a,label\n1.0,0\noops,1\n");
        match load_csv(&path, "label") {
            Err(DataError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("oops"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let path = write_file(dir.path(), "frac.csv", "a,label\n1.0,0.5\n");
        assert!(matches!(load_csv(&path, "label"), Err(DataError::Parse { line: 2, .. })));
        assert!(matches!(load_csv(&path, "class"), Err(DataError::MissingColumn(_))));
        assert!(matches!(load_csv(&dir.path().join("absent.csv"), "label"), Err(DataError::Csv(_))));
    }

    #[test]
    fn csv_infers_class_count_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "gap.csv", "a,label\n1,0\n2,2\n3,0\n");
        let ds = load_csv(&path, "label").unwrap();
        assert_eq!(ds.class_count(), 3);
        assert_eq!(ds.empty_classes(), vec![1]);
    }

    #[test]
    fn split_examples() {
        let ds = gen_gaussian_blobs(2, 50, 2, 1.0, 0).unwrap();
        let s = split_80_20(&ds, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
        assert_eq!(s.train.class_counts(), vec![40, 40]);
        assert_eq!(s.test.class_counts(), vec![10, 10]);
        assert_eq!(s, split_80_20(&ds, 3).unwrap());
        assert_ne!(s.train_indices, split_80_20(&ds, 4).unwrap().train_indices);

        let tiny = ds.subset(&[0, 1, 2, 50]);
        assert!(matches!(split_80_20(&tiny, 0), Err(DataError::Split(_))));
    }

    proptest! {
        #[test]
        fn split_partitions_the_dataset(n in 5usize..120, c in 2usize..6, seed in any::<u64>()) {
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % c).collect();
            let features = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
            let ds = Dataset::new(features, LabelBatch::new(labels, c).unwrap(), "p").unwrap();
            let s = split_80_20(&ds, seed).unwrap();
            let mut all: Vec<usize> = s.train_indices.iter().chain(&s.test_indices).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!((s.train.len() as f64 - 0.8 * n as f64).abs() <= 1.0);
            for (i, &idx) in s.train_indices.iter().enumerate() {
                prop_assert_eq!(s.train.features().data()[i], idx as f64);
            }
        }
    }
}
