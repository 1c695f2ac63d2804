use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraints::ConstraintConfig;
use crate::nn::ModelConfig;
use crate::synthgen::GeneratorConfig;
use crate::{Error, Result};

/// Decoder context during training and default evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    WithHistory,
    NoHistory,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::WithHistory => "with_history",
            Mode::NoHistory => "no_history",
        }
    }
}

/// Source of the current-report text feature used by the constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextFeature {
    /// Text-encode the argmax tokens of the decoder (no gradient into the
    /// decoder through this path).
    #[default]
    GeneratedReport,
    /// Read out the mean final decoder hidden state (gradient reaches the
    /// decoder).
    DecoderHidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub sim: bool,
    pub con: bool,
    pub stru: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        sim: false,
        con: false,
        stru: false,
    };
    pub const ALL: Toggles = Toggles {
        sim: true,
        con: true,
        stru: true,
    };

    pub fn any(self) -> bool {
        self.sim || self.con || self.stru
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory; when absent the dataset is generated from `data`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub mode: Mode,
    pub toggles: Toggles,
    pub text_feature: TextFeature,
    /// Validation cross-entropy every this many steps; 0 disables.
    pub eval_every: usize,
    pub model: ModelConfig,
    pub constraints: ConstraintConfig,
    pub optimizer: OptimizerConfig,
    pub data: GeneratorConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 4,
            mode: Mode::WithHistory,
            toggles: Toggles::ALL,
            text_feature: TextFeature::GeneratedReport,
            eval_every: 500,
            model: ModelConfig::default(),
            constraints: ConstraintConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: GeneratorConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                o.lr
            )));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(
                "optimizer moments must lie in [0, 1) and eps > 0".into(),
            ));
        }
        self.model.validate()?;
        self.constraints.validate()?;
        self.data.validate()?;
        let geo = &self.data.geometry;
        if geo.num_patches() != self.model.num_patches || geo.patch_dim() != self.model.patch_dim {
            return Err(Error::Config(format!(
                "model expects {} patches of {} values, data has {} of {}",
                self.model.num_patches,
                self.model.patch_dim,
                geo.num_patches(),
                geo.patch_dim()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::json("run config", e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON with paths cleared, so relocating a run
    /// keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        hex::encode(Sha256::digest(c.to_json().as_bytes()))
    }

    /// Comment lines heading every CSV artifact.
    pub fn csv_preamble(&self) -> String {
        format!(
            "# config_hash={}\n# config={}\n",
            self.hash(),
            self.to_json()
        )
    }
}
