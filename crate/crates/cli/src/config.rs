//! Flat key=value run configuration.
//!
//! The file format is INI-style: one `key = value` per line, `#` or `;`
//! comments, blank lines ignored, no sections. Unknown keys are rejected.
//! Command-line flags override file values.

use std::path::{Path, PathBuf};

use cnnic::error::{Error, Result};
use cnnic::net::{CnnicConfig, Preset};
use cnnic::optim::OptimConfig;

pub const DATA_DIR_ENV: &str = "CNNIC_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Single precision (f32), the training default.
    Train,
    /// Double precision (f64), for verification runs.
    Verify,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Precision::Train),
            "verify" => Ok(Precision::Verify),
            other => Err(Error::Config(format!(
                "precision must be 'train' or 'verify', got '{other}'"
            ))),
        }
    }
}

/// Full run configuration: model, optimizer, loop controls and data paths.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: CnnicConfig,
    pub optim: OptimConfig,
    pub epochs: u64,
    pub batch_size: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub subset: Option<usize>,
    pub probe_size: usize,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: CnnicConfig::default(),
            optim: OptimConfig::default(),
            epochs: 1,
            batch_size: 50,
            max_steps: None,
            seed: 42,
            subset: None,
            probe_size: 256,
            eval_every: 25,
            checkpoint_every: 200,
            precision: Precision::Train,
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    lineno + 1
                )));
            };
            config.apply(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
        }
        match key {
            "preset" => self.model.preset = Preset::parse(value)?,
            "patch_size" => self.model.patch_size = num(key, value)?,
            "patch_stride" => self.model.patch_stride = num(key, value)?,
            "num_kernels" => self.model.num_kernels = num(key, value)?,
            "dropout_p" => self.model.dropout_p = num(key, value)?,
            "image_size" => self.model.image_size = num(key, value)?,
            "num_classes" => self.model.num_classes = num(key, value)?,
            "softmax_per_patch" => self.model.softmax_per_patch = num(key, value)?,
            "base_lr" => self.optim.base_lr = num(key, value)?,
            "beta1" => self.optim.beta1 = num(key, value)?,
            "beta2" => self.optim.beta2 = num(key, value)?,
            "epsilon" => self.optim.epsilon = num(key, value)?,
            "decay_rate" => self.optim.decay_rate = num(key, value)?,
            "decay_every" => self.optim.decay_every = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_steps" => self.max_steps = Some(num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            "subset" => self.subset = Some(num(key, value)?),
            "probe_size" => self.probe_size = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "precision" => self.precision = Precision::parse(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "train_images" => self.train_images = Some(PathBuf::from(value)),
            "train_labels" => self.train_labels = Some(PathBuf::from(value)),
            "test_images" => self.test_images = Some(PathBuf::from(value)),
            "test_labels" => self.test_labels = Some(PathBuf::from(value)),
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// The data root: explicit `data_dir`, else $CNNIC_DATA_DIR, else ./data.
    pub fn data_root(&self) -> PathBuf {
        if let Some(dir) = &self.data_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("data")
    }

    /// Resolve the four data files, honoring explicit per-file overrides.
    pub fn data_paths(&self) -> Result<DataPaths> {
        let root = self.data_root();
        let pick = |explicit: &Option<PathBuf>, base: &str| -> Result<PathBuf> {
            match explicit {
                Some(p) => {
                    if p.exists() {
                        Ok(p.clone())
                    } else {
                        Err(Error::Data(format!("missing data file {}", p.display())))
                    }
                }
                None => cnnic_data::resolve(&root, base),
            }
        };
        Ok(DataPaths {
            train_images: pick(&self.train_images, cnnic_data::TRAIN_IMAGES)?,
            train_labels: pick(&self.train_labels, cnnic_data::TRAIN_LABELS)?,
            test_images: pick(&self.test_images, cnnic_data::TEST_IMAGES)?,
            test_labels: pick(&self.test_labels, cnnic_data::TEST_LABELS)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}
