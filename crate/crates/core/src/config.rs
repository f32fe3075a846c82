//! Run configuration: one JSON document per experiment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, Variant};
use crate::autodiff::GateMode;
use crate::error::{Error, Result};
use crate::optim::SgdConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "GFRNET_OUTPUT_DIR";

/// Channel statistics of the usual ImageNet-pretrained VGG preprocessing.
pub const DEFAULT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const DEFAULT_STD: [f64; 3] = [0.229, 0.224, 0.225];

const REQUIRED: [&str; 17] = [
    "seed",
    "variant",
    "gate_mode",
    "depth",
    "stage_channels",
    "num_classes",
    "gate_channels",
    "crop",
    "base_lr",
    "momentum",
    "weight_decay",
    "power",
    "max_iter",
    "stage_weights",
    "class_balancing",
    "dataset",
    "output_dir",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Colored rectangles and discs, `num_classes` classes.
    Shapes {
        n_train: usize,
        n_test: usize,
        size: usize,
        /// Seed of the generator; defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// The context-cue task: 3 classes.
    Ambiguous {
        n_train: usize,
        n_test: usize,
        size: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Manifests of `image_path label_path` lines and a palette file.
    Manifest {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        palette: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: DEFAULT_MEAN,
            std: DEFAULT_STD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub gate_mode: GateMode,
    pub depth: usize,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    pub gate_channels: Option<usize>,
    pub crop: [usize; 2],
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
    /// One weight per supervised output, coarsest first.
    pub stage_weights: Vec<f64>,
    pub class_balancing: bool,
    pub dataset: DatasetSpec,
    pub output_dir: PathBuf,
    /// Save an intermediate checkpoint every this many iterations.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Seeds for `ablate`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub normalize: Normalization,
    #[serde(default)]
    pub decay_all: bool,
    /// Learning-rate multipliers keyed by parameter-name prefix.
    #[serde(default)]
    pub lr_multipliers: BTreeMap<String, f64>,
}

impl RunConfig {
    /// Parses and validates a config. Relative paths inside it are resolved
    /// against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| !obj.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing required keys: {}", missing.join(", "))));
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.output_dir = base_dir.join(&cfg.output_dir);
        if let DatasetSpec::Manifest { train, test, palette } = &mut cfg.dataset {
            *train = base_dir.join(&*train);
            *test = base_dir.join(&*test);
            if let Some(p) = palette {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the output-directory environment override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_json(&text, path.parent().unwrap_or(Path::new(".")))?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            gate_channels: self.gate_channels,
            gate_mode: self.gate_mode,
            ..ArchConfig::new(self.depth, self.stage_channels.clone(), self.num_classes, self.variant)
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            power: self.power,
            max_iter: self.max_iter,
            decay_all: self.decay_all,
            lr_multipliers: self.lr_multipliers.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.arch();
        arch.validate()?;
        let stages = arch.supervised_outputs();
        if self.stage_weights.len() != stages {
            return Err(Error::Config(format!(
                "stage_weights needs {stages} entries (one per supervised output) for depth {}, got {}",
                self.depth,
                self.stage_weights.len()
            )));
        }
        if self.stage_weights.iter().any(|w| !(*w >= 0.0)) || self.stage_weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("stage_weights must be non-negative and not all zero".into()));
        }
        let [ch, cw] = self.crop;
        arch.check_input(ch, cw).map_err(|e| Error::Config(format!("crop: {e}")))?;
        self.sgd().validate()?;
        if self.normalize.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalize.std must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        match &self.dataset {
            DatasetSpec::Shapes { size, n_train, .. } | DatasetSpec::Ambiguous { size, n_train, .. } => {
                arch.check_input(*size, *size)
                    .map_err(|e| Error::Config(format!("dataset size: {e}")))?;
                if ch > *size || cw > *size {
                    return Err(Error::Config(format!("crop {ch}x{cw} exceeds image size {size}")));
                }
                if *n_train == 0 && self.max_iter > 0 {
                    return Err(Error::Config("training needs n_train > 0".into()));
                }
                if matches!(self.dataset, DatasetSpec::Ambiguous { .. }) && self.num_classes != 3 {
                    return Err(Error::Config("the ambiguous dataset has exactly 3 classes".into()));
                }
                if matches!(self.dataset, DatasetSpec::Shapes { .. }) && !(2..=8).contains(&self.num_classes) {
                    return Err(Error::Config("the shapes dataset supports 2 to 8 classes".into()));
                }
            }
            DatasetSpec::Manifest { .. } => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn example() -> serde_json::Value {
        serde_json::json!({
            "seed": 1, "variant": "gfrnet", "gate_mode": "mul", "depth": 4,
            "stage_channels": [4, 8, 8, 8], "num_classes": 4, "gate_channels": null,
            "crop": [32, 32], "base_lr": 0.01, "momentum": 0.9, "weight_decay": 0.0005,
            "power": 0.9, "max_iter": 10, "stage_weights": [1.0, 1.0, 1.0],
            "class_balancing": false,
            "dataset": {"kind": "shapes", "n_train": 4, "n_test": 2, "size": 32},
            "output_dir": "out"
        })
    }

    fn parse(v: &serde_json::Value) -> Result<RunConfig> {
        RunConfig::from_json(&v.to_string(), Path::new("/base"))
    }

    #[test]
    fn example_parses_with_defaults() {
        let c = parse(&example()).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/base/out"));
        assert_eq!(c.normalize, Normalization::default());
        assert_eq!(c.arch().gate_mode, GateMode::Mul);
        assert_eq!(parse(&serde_json::from_str(&c.to_json()).unwrap()).unwrap().seed, 1);
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let mut v = example();
        v["learning_rate"] = 0.1.into();
        assert!(parse(&v).unwrap_err().to_string().contains("learning_rate"));
        let mut v = example();
        v.as_object_mut().unwrap().remove("gate_channels");
        assert!(parse(&v).unwrap_err().to_string().contains("gate_channels"));
        let mut v = example();
        v["dataset"]["colour"] = 1.into();
        assert!(parse(&v).is_err());
    }

    #[test]
    fn values_are_validated() {
        for (key, bad) in [
            ("stage_weights", serde_json::json!([1.0, 1.0])),
            ("crop", serde_json::json!([30, 32])),
            ("base_lr", serde_json::json!(0.0)),
            ("variant", serde_json::json!("unet")),
        ] {
            let mut v = example();
            v[key] = bad;
            assert!(matches!(parse(&v), Err(Error::Config(_))), "{key}");
        }
        let mut v = example();
        v["dataset"]["size"] = 36.into();
        assert!(parse(&v).unwrap_err().to_string().contains("dataset size"));
    }
}
