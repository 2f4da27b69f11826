use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::data::{gen_blobs_split, load_idx, load_idx_subset, Dataset};
use crate::optim::OptimizerConfig;
use crate::retro::RetroConfig;
use crate::scalar::Scalar;

/// Where training and test samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX files; relative paths resolve against the config file's directory.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep the first `train_subset` samples after a shuffle seeded by
        /// `subset_seed`. The test set is always used in full.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_subset: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
    /// Gaussian blobs; train and test share centers.
    Blobs {
        classes: usize,
        dims: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
        /// Data seed, independent of the run seed.
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn load<S: Scalar>(&self, base_dir: &Path) -> Result<(Dataset<S>, Dataset<S>), HarnessError> {
        match self {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_subset,
                subset_seed,
            } => {
                let p = |x: &PathBuf| base_dir.join(x);
                let train = match train_subset {
                    Some(n) => load_idx_subset(&p(train_images), &p(train_labels), *n, *subset_seed)?,
                    None => load_idx(&p(train_images), &p(train_labels))?,
                };
                let test: Dataset<S> = load_idx(&p(test_images), &p(test_labels))?;
                let classes = train.class_count().max(test.class_count());
                Ok((
                    Dataset::new(train.inputs().clone(), train.labels().to_vec(), classes)?,
                    Dataset::new(test.inputs().clone(), test.labels().to_vec(), classes)?,
                ))
            }
            DatasetSpec::Blobs {
                classes,
                dims,
                train_per_class,
                test_per_class,
                spread,
                seed,
            } => Ok(gen_blobs_split(*classes, *dims, *train_per_class, *test_per_class, *spread, *seed)?),
        }
    }
}

/// Everything that defines one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; model init, batch order and guidance init draw from
    /// separate streams derived from it.
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate on the test set every this many steps; 0 means only at the end.
    #[serde(default)]
    pub eval_every_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub retro: RetroConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return bad(format!("layer_sizes must have ≥ 2 positive entries, got {:?}", self.layer_sizes));
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        self.optimizer.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.retro.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml_string().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_retro_enabled(&self, enabled: bool) -> Self {
        let mut c = self.clone();
        c.retro.enabled = enabled;
        c
    }
}
