//! Experiment configuration: one document holding every tunable of the
//! pipeline, read from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DEFAULT_L_IN, DEFAULT_L_OUT, DEFAULT_MAX_SPEED, DEFAULT_STRIDE};
use crate::error::{Error, Result};
use crate::mapmatch::MatchParams;
use crate::predictor::{ModelConfig, TrainConfig};
use crate::roadnet::DEFAULT_DELTA_M;
use crate::synth::SynthSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Edge-list CSV consumed by `build-graph`.
    pub network: Option<PathBuf>,
    /// GPS CSV consumed by `match`.
    pub gps: Option<PathBuf>,
    /// Directory holding every produced artifact.
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            network: None,
            gps: None,
            workdir: PathBuf::from("work"),
        }
    }
}

/// How samples are assigned to train, validation and test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitBy {
    /// Windows are shuffled individually.
    #[default]
    Sample,
    /// All windows of one trajectory go to the same part.
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataParams {
    pub l_in: usize,
    pub l_out: usize,
    pub stride: usize,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub split_by: SplitBy,
    /// Speed above which a GPS fix is dropped, m/s.
    pub max_speed: f64,
    /// UBODT search bound in meters.
    pub ubodt_delta: f64,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            l_in: DEFAULT_L_IN,
            l_out: DEFAULT_L_OUT,
            stride: DEFAULT_STRIDE,
            split: (0.8, 0.1, 0.1),
            split_seed: 1,
            split_by: SplitBy::Sample,
            max_speed: DEFAULT_MAX_SPEED,
            ubodt_delta: DEFAULT_DELTA_M,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepParams {
    pub l_in: Vec<usize>,
    pub l_out: Vec<usize>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            l_in: vec![2, 4, 6, 8],
            l_out: vec![1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub matcher: MatchParams,
    pub data: DataParams,
    /// `n_tokens`, `l_in` and `l_out` are filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepParams,
    pub synth: SynthSpec,
}

impl ExperimentConfig {
    /// The CPU-sized profile: `d_model = 32` on an 8×8 grid.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(0),
            ..Self::default()
        }
    }

    /// Parses JSON when the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Ok(serde_json::from_str(text)?)
        } else {
            toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Model settings for a vocabulary of `n_tokens` and the configured
    /// window lengths.
    pub fn model_for(&self, n_tokens: usize) -> ModelConfig {
        ModelConfig {
            n_tokens,
            l_in: self.data.l_in,
            l_out: self.data.l_out,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.l_in == 0 || d.l_out == 0 {
            return Err(Error::invalid("l_in and l_out must be at least 1"));
        }
        if d.stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        crate::data::split_sizes(3, d.split)?;
        if self.train.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        self.synth.validate()
    }
}
