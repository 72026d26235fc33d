//! Run configuration file: every field optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xfactors::data::{generate_dataset, load, FactorSpec, FactorizedDataset, MiniSprites, SplitPolicy, DEFAULT_CAP};
use xfactors::losses::LossWeights;
use xfactors::metrics::MetricConfig;
use xfactors::model::{Arch, LatentLayout, ModelConfig};
use xfactors::trainer::{AdamConfig, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub scales: Option<usize>,
    pub positions: Option<usize>,
    /// `0` renders every sprite at full intensity with no intensity factor.
    pub intensities: Option<usize>,
    pub min_radius: Option<f64>,
    pub max_radius: Option<f64>,
    pub intensity_supervised: Option<bool>,
    pub cap: Option<usize>,
}

impl GeneratorSection {
    pub fn sprites(&self) -> MiniSprites {
        let d = MiniSprites::default();
        MiniSprites {
            height: self.height.unwrap_or(d.height),
            width: self.width.unwrap_or(d.width),
            scales: self.scales.unwrap_or(d.scales),
            positions: self.positions.unwrap_or(d.positions),
            intensities: match self.intensities {
                Some(0) => None,
                Some(n) => Some(n),
                None => d.intensities,
            },
            min_radius: self.min_radius.unwrap_or(d.min_radius),
            max_radius: self.max_radius.unwrap_or(d.max_radius),
            intensity_supervised: self.intensity_supervised.unwrap_or(d.intensity_supervised),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSection {
    pub dim_s: Option<usize>,
    /// Width shared by every factor subspace.
    pub dim_t: Option<usize>,
    /// Per-factor widths; overrides `dim_t`.
    pub dims_t: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam: Option<AdamConfig>,
    pub beta_s: Option<f64>,
    pub beta_t: Option<f64>,
    /// Shared InfoNCE weight.
    pub lambda: Option<f64>,
    /// Per-factor InfoNCE weights; overrides `lambda`.
    pub lambdas: Option<Vec<f64>>,
    /// InfoNCE temperature. Not given in the method description; 0.1 here.
    pub tau: Option<f64>,
    pub cosine: Option<bool>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    /// Global gradient-norm clip; `null` disables it.
    #[serde(default, deserialize_with = "explicit_option")]
    pub clip_norm: Option<Option<f64>>,
}

/// Distinguishes an absent key (`None`) from an explicit `null` (`Some(None)`).
fn explicit_option<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Option<f64>>, D::Error> {
    Ok(Some(Option::deserialize(d)?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// `.xfds` file; when absent the dataset is generated from `generator`.
    pub dataset: Option<PathBuf>,
    pub generator: Option<GeneratorSection>,
    pub data_seed: Option<u64>,
    pub split: Option<SplitPolicy>,
    pub arch: Option<Arch>,
    pub widths: Option<Vec<usize>>,
    pub layout: Option<LayoutSection>,
    pub train: Option<TrainSection>,
    pub metrics: Option<MetricConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Ablation {
    /// All InfoNCE weights set to zero.
    NoInfonce,
    /// Residual encoder removed, dim_s = 0.
    NoS,
    /// Residual encoder kept with an empty head; every factor supervised.
    EmptyS,
}

/// A parsed configuration plus the raw document it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub file: RunConfigFile,
    pub raw: serde_json::Value,
    /// Directory relative paths are resolved against.
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn read(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self {
                file: RunConfigFile::default(),
                raw: serde_json::json!({}),
                base: PathBuf::from("."),
            });
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let file: RunConfigFile = serde_json::from_value(raw.clone()).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Ok(Self {
            file,
            raw,
            base: path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
        })
    }

    pub fn sprites(&self) -> MiniSprites {
        self.file.generator.clone().unwrap_or_default().sprites()
    }

    pub fn cap(&self) -> usize {
        self.file.generator.as_ref().and_then(|g| g.cap).unwrap_or(DEFAULT_CAP)
    }

    pub fn data_seed(&self) -> u64 {
        self.file.data_seed.unwrap_or(0)
    }

    /// Loads `override_path`, else the configured dataset file, else
    /// generates one.
    pub fn dataset(&self, override_path: Option<&Path>) -> Result<FactorizedDataset, CliError> {
        let path = override_path.map(Path::to_path_buf).or_else(|| {
            self.file
                .dataset
                .as_ref()
                .map(|p| if p.is_absolute() { p.clone() } else { self.base.join(p) })
        });
        match path {
            Some(p) => load(&p).map_err(|e| CliError::Usage(format!("dataset {}: {e}", p.display()))),
            None => generate_dataset(&self.sprites(), self.data_seed(), self.cap()).map_err(|e| CliError::Usage(e.to_string())),
        }
    }

    pub fn metrics(&self) -> MetricConfig {
        self.file.metrics.clone().unwrap_or_default()
    }
}

/// Marks every factor supervised, for the empty-S ablation.
pub fn supervise_all(ds: &FactorizedDataset) -> Result<FactorizedDataset, CliError> {
    let specs: Vec<FactorSpec> = ds.specs().iter().map(|s| FactorSpec::new(s.name.clone(), s.cardinality, true)).collect();
    FactorizedDataset::new(ds.image_shape(), ds.images().to_vec(), ds.labels().to_vec(), specs).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Resolved model and training settings for one run.
#[derive(Clone, Debug)]
pub struct RunPlan {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub arch: Option<Arch>,
    pub ablate: Option<Ablation>,
}

pub fn plan(cfg: &RunConfigFile, ds: &FactorizedDataset, o: &Overrides) -> Result<RunPlan, CliError> {
    let k = ds.supervised().len();
    let usage = |s: String| CliError::Usage(s);
    let layout_s = cfg.layout.clone().unwrap_or_default();
    let mut dim_s = layout_s.dim_s.unwrap_or(126);
    let dims_t = match layout_s.dims_t {
        Some(d) if d.len() != k => {
            return Err(usage(format!(
                "layout lists {} factor subspaces, dataset has {k} supervised factors",
                d.len()
            )))
        }
        Some(d) => d,
        None => vec![layout_s.dim_t.unwrap_or(2); k],
    };
    let mut residual = true;
    match o.ablate {
        Some(Ablation::NoS) => {
            dim_s = 0;
            residual = false;
        }
        Some(Ablation::EmptyS) => dim_s = 0,
        _ => {}
    }
    let layout = LatentLayout::new(dim_s, dims_t).map_err(|e| usage(e.to_string()))?;
    let [c, h, w] = ds.image_shape();
    let arch = o.arch.or(cfg.arch).unwrap_or(Arch::Mlp);
    let mut model = match arch {
        Arch::Mlp => ModelConfig::mlp(layout, [c, h, w]),
        Arch::Conv => ModelConfig::conv(layout, [c, h, w]),
    };
    model.residual_encoder = residual;
    if let Some(widths) = &cfg.widths {
        model.widths = widths.clone();
    }
    model.validate().map_err(|e| usage(e.to_string()))?;

    let t = cfg.train.clone().unwrap_or_default();
    let seed = o.seed.or(t.seed).unwrap_or(0);
    let mut train = TrainConfig::desk(k, seed);
    let paper = LossWeights::paper(k);
    train.epochs = o.epochs.or(t.epochs).unwrap_or(train.epochs);
    train.batch_size = t.batch_size.unwrap_or(train.batch_size);
    train.learning_rate = t.learning_rate.unwrap_or(train.learning_rate);
    train.adam = t.adam.unwrap_or_default();
    train.eval_every = t.eval_every.unwrap_or(0);
    if let Some(c) = t.clip_norm {
        train.clip_norm = c;
    }
    train.weights = LossWeights {
        beta_s: t.beta_s.unwrap_or(paper.beta_s),
        beta_t: t.beta_t.unwrap_or(paper.beta_t),
        lambdas: match (t.lambdas, t.lambda) {
            (Some(l), _) if l.len() != k => return Err(usage(format!("{} lambdas for {k} supervised factors", l.len()))),
            (Some(l), _) => l,
            (None, Some(l)) => vec![l; k],
            (None, None) => paper.lambdas,
        },
        tau: t.tau.unwrap_or(paper.tau),
        cosine: t.cosine.unwrap_or(false),
    };
    if o.ablate == Some(Ablation::NoInfonce) {
        train.weights.lambdas = vec![0.0; k];
    }
    train.validate().map_err(|e| usage(e.to_string()))?;
    Ok(RunPlan { model, train })
}
