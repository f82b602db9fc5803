use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::data::{gen_gaussian_blobs, gen_synthetic_images, load_csv, split_80_20, Dataset, Split};
use crate::nn::{Architecture, LayerSpec, NnError};
use crate::train::{derive_seed, streams, DistillConfig, Mode};

/// Kernel size of every convolution built from a preset.
pub const CONV_KERNEL: usize = 3;

/// Layer widths of one network in a preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// Output channels of each convolution; ignored for feature vectors.
    #[serde(default)]
    pub conv: Vec<usize>,
    pub hidden: Vec<usize>,
}

impl NetSpec {
    /// `conv → relu` blocks and a flatten for image input, then
    /// `dense → relu` per hidden width and a final dense layer to `classes`.
    pub fn architecture(&self, input: &[usize], classes: usize) -> Result<Architecture, NnError> {
        match input {
            [features] => Architecture::mlp(*features, &self.hidden, classes),
            [channels, h, w] => {
                let mut layers = Vec::new();
                let (mut c, mut h, mut w) = (*channels, *h, *w);
                for &out in &self.conv {
                    if h < CONV_KERNEL || w < CONV_KERNEL {
                        return Err(NnError::Spec(format!("image of {h}x{w} is too small for another convolution")));
                    }
                    layers.push(LayerSpec::Conv2d { in_channels: c, out_channels: out, kernel: CONV_KERNEL });
                    layers.push(LayerSpec::Relu);
                    (c, h, w) = (out, h - CONV_KERNEL + 1, w - CONV_KERNEL + 1);
                }
                layers.push(LayerSpec::Flatten);
                let mut width = c * h * w;
                for &hidden in &self.hidden {
                    layers.push(LayerSpec::Dense { inputs: width, outputs: hidden });
                    layers.push(LayerSpec::Relu);
                    width = hidden;
                }
                layers.push(LayerSpec::Dense { inputs: width, outputs: classes });
                Architecture::new(input.to_vec(), layers)
            }
            other => Err(NnError::Spec(format!("unsupported sample shape {other:?}"))),
        }
    }
}

/// One teacher and its students.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    pub teacher: NetSpec,
    pub students: Vec<NetSpec>,
}

const BUILTIN: [(&str, &str); 3] = [
    ("V1", include_str!("../../presets/v1.toml")),
    ("V2", include_str!("../../presets/v2.toml")),
    ("V3", include_str!("../../presets/v3.toml")),
];

impl Preset {
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, text)| toml::from_str(text).expect("shipped presets parse"))
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Spec(format!("preset: {e}")))
    }

    /// A shipped preset name, or a path to a preset file.
    pub fn resolve(name: &str, base: &Path) -> Result<Self, ExperimentError> {
        if let Some(p) = Self::builtin(name) {
            return Ok(p);
        }
        let path = base.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            ExperimentError::Spec(format!(
                "preset {name:?} is neither one of {:?} nor a readable file: {e}",
                Self::builtin_names().collect::<Vec<_>>()
            ))
        })?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        per_class: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Images {
        classes: usize,
        per_class: usize,
        side: usize,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default)]
        seed: u64,
    },
}

fn default_dim() -> usize {
    2
}

fn default_label_column() -> String {
    "label".into()
}

impl DatasetSpec {
    pub fn seed(&self) -> u64 {
        match self {
            DatasetSpec::Blobs { seed, .. } | DatasetSpec::Images { seed, .. } | DatasetSpec::Csv { seed, .. } => *seed,
        }
    }

    pub fn load(&self) -> Result<Dataset, ExperimentError> {
        Ok(match self {
            DatasetSpec::Blobs { classes, per_class, dim, separation, seed } => {
                gen_gaussian_blobs(*classes, *per_class, *dim, *separation, *seed)?
            }
            DatasetSpec::Images { classes, per_class, side, seed } => {
                gen_synthetic_images(*classes, *per_class, *side, *seed)?
            }
            DatasetSpec::Csv { path, label_column, .. } => load_csv(path, label_column)?,
        })
    }

    /// The data and its 80/20 split; both are fixed across training seeds.
    pub fn split(&self) -> Result<Split, ExperimentError> {
        let ds = self.load()?;
        Ok(split_80_20(&ds, derive_seed(self.seed(), streams::SPLIT))?)
    }
}

/// A parsed experiment file.
///
/// ```toml
/// name = "blobs"
/// preset = "V1"
/// modes = ["kd", "kd_ml_online"]
/// seeds = [1, 2, 3]
///
/// [dataset]
/// kind = "blobs"
/// classes = 3
/// per_class = 300
/// separation = 6.0
///
/// [config]
/// epochs = 50
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub preset: String,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    /// Overrides of the training defaults. `mode` and `seed` are set per run.
    #[serde(default)]
    pub config: DistillConfig,
    /// Directory that relative paths in the spec are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let mut spec: Self = toml::from_str(text).map_err(|e| ExperimentError::Spec(e.to_string()))?;
        spec.base_dir = base_dir.to_path_buf();
        if let DatasetSpec::Csv { path, .. } = &mut spec.dataset {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Spec(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn preset(&self) -> Result<Preset, ExperimentError> {
        Preset::resolve(&self.preset, &self.base_dir)
    }

    /// Training config of one (mode, seed) cell.
    pub fn run_config(&self, mode: Mode, seed: u64) -> DistillConfig {
        DistillConfig { mode, seed, ..self.config.clone() }
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<Preset, ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Spec(m));
        if self.modes.is_empty() {
            return bad("at least one mode is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return bad("modes are listed more than once".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds are listed more than once".into());
        }
        let preset = self.preset()?;
        for &mode in &self.modes {
            let needed = if mode == Mode::Kd { 1 } else { 2 };
            if preset.students.len() < needed {
                return bad(format!("mode {mode} needs at least {needed} students; preset {} has {}", preset.name, preset.students.len()));
            }
            self.run_config(mode, 0)
                .validate(preset.students.len())
                .map_err(|e| ExperimentError::Spec(format!("mode {mode}: {e}")))?;
        }
        Ok(preset)
    }

    /// Hash of everything that determines a cell's result apart from its
    /// mode and seed: dataset, resolved preset and training config.
    pub fn fingerprint(&self, preset: &Preset) -> Result<String, ExperimentError> {
        let dataset = match &self.dataset {
            DatasetSpec::Csv { path, label_column, seed } => {
                let bytes = std::fs::read(path)?;
                let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
                serde_json::json!({ "kind": "csv", "sha256": digest, "label_column": label_column, "seed": seed })
            }
            other => serde_json::to_value(other)?,
        };
        let config = DistillConfig { mode: Mode::default(), seed: 0, ..self.config.clone() };
        let canonical = serde_json::json!({
            "format": 1,
            "dataset": dataset,
            "preset": preset,
            "config": config,
        });
        let digest = Sha256::digest(serde_json::to_string(&canonical)?.as_bytes());
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }
}
