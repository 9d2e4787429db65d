//! Experiment configuration (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::discretization::DiscretizationParams;
use crate::losses::LossWeights;
use crate::model::{Head, NetworkConfig};
use crate::scenes::{GeneratorConfig, SparsePattern};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ordinal,
    Ce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceKind {
    Hard,
    Soft,
    CeSoft,
}

impl std::str::FromStr for InferenceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            "ce-soft" => Ok(Self::CeSoft),
            other => Err(format!("unknown inference variant {other:?}")),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ordinal" => Ok(Self::Ordinal),
            "ce" => Ok(Self::Ce),
            other => Err(format!("unknown loss {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sparsify {
    pub keep_fraction: f64,
    pub pattern: SparsePattern,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDataset {
    pub generator: GeneratorConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub sparsify: Option<Sparsify>,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train: 200,
            val: 24,
            test: 40,
            seed: 1_000_000,
            sparsify: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticDataset),
    /// Path to a manifest; relative paths resolve against the config file.
    Manifest(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub decoder_lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            decoder_lr_multiplier: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// The head is set from `loss`; any value given here is overridden.
    pub network: NetworkConfig,
    pub discretization: DiscretizationParams,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub inference: InferenceKind,
    pub attention_loss: bool,
    pub image_pooling: bool,
    pub flip: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SyntheticDataset::default()),
            network: NetworkConfig::default(),
            discretization: DiscretizationParams::default(),
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            epochs: 60,
            seed: 0,
            loss: LossKind::Ordinal,
            inference: InferenceKind::Soft,
            attention_loss: true,
            image_pooling: true,
            flip: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read(path).map_err(|e| TrainError::Io(path.display().to_string(), e))?;
        let mut cfg: Self = serde_json::from_slice(&text)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        if let DatasetSource::Manifest(p) = &mut cfg.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new("")).join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Network with the head matching the configured loss.
    pub fn network(&self) -> NetworkConfig {
        let mut n = self.network.clone();
        n.head = match self.loss {
            LossKind::Ordinal => Head::Ordinal,
            LossKind::Ce => Head::CrossEntropy,
        };
        n
    }

    /// Attention-loss weight after the on/off flag.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            alpha_att: if self.attention_loss {
                self.loss_weights.alpha_att
            } else {
                0.0
            },
            ..self.loss_weights
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.inference == InferenceKind::CeSoft && self.loss != LossKind::Ce {
            return fail("ce-soft inference requires the ce loss".into());
        }
        if self.network.bins != self.discretization.bins {
            return fail(format!(
                "network has {} bins, discretization {}",
                self.network.bins, self.discretization.bins
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch size and epochs must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.base_lr >= 0.0 && o.decoder_lr_multiplier >= 0.0 && o.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&o.momentum)
            || o.poly_power < 0.0
        {
            return fail(format!("bad optimizer settings {o:?}"));
        }
        self.effective_weights()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.network()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        crate::discretization::DepthDiscretization::from_params(self.discretization)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                s.generator
                    .validate()
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                let g = &s.generator;
                if (g.height, g.width) != (self.network.input_height, self.network.input_width) {
                    return fail(format!(
                        "generator makes {}x{} scenes, network expects {}x{}",
                        g.height, g.width, self.network.input_height, self.network.input_width
                    ));
                }
                if s.train == 0 {
                    return fail("synthetic dataset has no training scenes".into());
                }
            }
            DatasetSource::Manifest(p) => {
                if !p.exists() {
                    return fail(format!("manifest {} not found", p.display()));
                }
            }
        }
        Ok(())
    }
}
