//! Run configuration: one TOML file, every field defaulted, unknown keys rejected.

use std::path::{Path, PathBuf};

use noqs::finetune::FinetuneConfig;
use noqs::model::{FnoConfig, LatticeConfig, ModelConfig, TransformerConfig};
use noqs::protocols::{FourierProtocolSpec, TimeGrid};
use noqs::training::{ProtocolSampler, TrainConfig};
use noqs::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub t_max: f64,
    pub n_t: usize,
    pub fourier: FourierProtocolSpec,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { t_max: 1.0, n_t: 100, fourier: FourierProtocolSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples per time point; 0 means exact enumeration.
    pub n_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 4096 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub lattice: LatticeConfig,
    pub protocol: ProtocolConfig,
    pub transformer: TransformerConfig,
    pub fno: FnoConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serialises")
    }

    /// Applies `seed` everywhere a seed is read.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.finetune.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        self.grid()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { lattice: self.lattice.clone(), transformer: self.transformer.clone(), fno: self.fno.clone() }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.protocol.t_max, self.protocol.n_t).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sampler(&self) -> Result<ProtocolSampler> {
        Ok(ProtocolSampler { spec: self.protocol.fourier.clone(), grid: self.grid()? })
    }
}
