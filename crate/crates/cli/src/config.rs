//! Experiment configuration files.

use std::path::{Path, PathBuf};

use noisy_forge::data::{
    cifar10_files, load_cifar10_binary, load_idx_splits, subsample, synthetic_blobs,
    synthetic_patterns, Dataset, DatasetMetadata, PatternSpec,
};
use noisy_forge::eval::{SweepConfig, DEFAULT_UPPER_GRID};
use noisy_forge::scan::ScanGrid;
use noisy_forge::train::TrainConfig;
use noisy_forge::{Error, InjectionConfig, Model, Preset, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// CIFAR-10 binary distribution directory.
    Cifar10 {
        dir: PathBuf,
        /// Stratified training subset size.
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Blobs {
        num_classes: usize,
        n_per_class: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Patterns(PatternSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionSettings {
    pub after_relu: bool,
    pub after_pool: bool,
    pub logits: bool,
}

impl Default for InjectionSettings {
    fn default() -> Self {
        let d = InjectionConfig::default();
        Self {
            after_relu: d.after_relu,
            after_pool: d.after_pool,
            logits: d.logits,
        }
    }
}

impl From<InjectionSettings> for InjectionConfig {
    fn from(s: InjectionSettings) -> Self {
        InjectionConfig {
            after_relu: s.after_relu,
            after_pool: s.after_pool,
            logits: s.logits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpperBoundSettings {
    /// σ values at which noisy-training models are trained.
    pub train_sigmas: Vec<f64>,
}

impl Default for UpperBoundSettings {
    fn default() -> Self {
        Self {
            train_sigmas: DEFAULT_UPPER_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSettings {
    pub sigma_train: f64,
    /// Defaults to the desk-scale α axis.
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    /// Defaults to the desk-scale θ axis plus the heuristic.
    #[serde(default)]
    pub thetas: Option<Vec<f64>>,
}

impl ScanSettings {
    pub fn grid(&self) -> ScanGrid {
        let mut g = ScanGrid::default_for(self.sigma_train);
        if let Some(a) = &self.alphas {
            g.alphas = a.clone();
        }
        if let Some(t) = &self.thetas {
            g.thetas = t.clone();
        }
        g
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A complete, serializable experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub injection: InjectionSettings,
    #[serde(default)]
    pub upper_bound: UpperBoundSettings,
    #[serde(default)]
    pub scan: Option<ScanSettings>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Seed for model initialization.
    #[serde(default)]
    pub seed: u64,
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, msg } => Error::Config {
            field: format!("{prefix}.{field}"),
            msg,
        },
        other => other,
    }
}

impl ExperimentConfig {
    /// Parses JSON, reporting the dotted path of any offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                field: if path == "." { "<root>".into() } else { path },
                msg: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.preset()?;
        self.train.validate().map_err(|e| prefixed("train", e))?;
        self.sweep.validate().map_err(|e| prefixed("sweep", e))?;
        if let Some(scan) = &self.scan {
            scan.grid().validate().map_err(|e| prefixed("scan", e))?;
        }
        let ub = &self.upper_bound.train_sigmas;
        if ub.is_empty()
            || ub.windows(2).any(|w| w[0] >= w[1])
            || ub.iter().any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return Err(Error::Config {
                field: "upper_bound.train_sigmas".into(),
                msg: "must be a non-empty, strictly increasing list of non-negative values".into(),
            });
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset> {
        self.model.parse().map_err(|_| Error::Config {
            field: "model".into(),
            msg: format!("unknown preset `{}` (expected lenet5 or mlp2)", self.model),
        })
    }

    pub fn injection(&self) -> InjectionConfig {
        self.injection.into()
    }

    /// A fresh, deterministically initialized model for `data`.
    pub fn build_model(&self, data: &Dataset<f32>) -> Result<Model> {
        Model::build_preset(
            self.preset()?,
            data.sample_shape(),
            data.num_classes(),
            self.seed,
            self.injection(),
        )
    }
}

/// Loaded train/test splits plus provenance.
pub struct LoadedData {
    pub train: Dataset<f32>,
    pub test: Dataset<f32>,
    pub metadata: DatasetMetadata,
}

pub fn load_data(source: &DatasetSource) -> Result<LoadedData> {
    let (train, test, name, files) = match source {
        DatasetSource::Cifar10 {
            dir,
            train_subset,
            test_subset,
            subset_seed,
        } => {
            let (mut train, mut test) = load_cifar10_binary(dir)?;
            if let Some(n) = train_subset {
                train = subsample(&train, *n, *subset_seed)?;
            }
            if let Some(n) = test_subset {
                test = subsample(&test, *n, *subset_seed)?;
            }
            (train, test, "cifar10", cifar10_files(dir))
        }
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let (train, test) =
                load_idx_splits(train_images, train_labels, test_images, test_labels)?;
            let files = vec![
                train_images.clone(),
                train_labels.clone(),
                test_images.clone(),
                test_labels.clone(),
            ];
            (train, test, "idx", files)
        }
        DatasetSource::Blobs {
            num_classes,
            n_per_class,
            dim,
            separation,
            seed,
        } => {
            let (train, test) =
                synthetic_blobs(*num_classes, *n_per_class, *dim, *separation, *seed)?;
            (train, test, "blobs", vec![])
        }
        DatasetSource::Patterns(spec) => {
            let (train, test) = synthetic_patterns(spec)?;
            (train, test, "patterns", vec![])
        }
    };
    let metadata = DatasetMetadata::describe(name, &train, &test, &files)?;
    Ok(LoadedData {
        train,
        test,
        metadata,
    })
}
