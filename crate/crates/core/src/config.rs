//! Top-level run configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::msfl::MsflConfig;
use crate::ssfl::SsflConfig;
use crate::synth::ScenarioConfig;
use crate::tracker::TrackerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub ssfl_iterations: usize,
    pub ssfl_lr: f64,
    /// Share of frame pairs used for SSFL training; the rest are held out.
    pub ssfl_train_fraction: f64,
    pub msfl_iterations: usize,
    pub msfl_lr: f64,
    /// Positive pairs per MSFL batch; each comes with `neg_per_pos` negatives.
    pub msfl_positives: usize,
    pub neg_per_pos: usize,
    /// Scenarios pooled into the MSFL held-out evaluation set.
    pub msfl_heldout_scenarios: usize,
    /// Frames between the front and rear tracklet of a pair.
    pub msfl_gap: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ssfl_iterations: 500,
            ssfl_lr: 1e-3,
            ssfl_train_fraction: 0.75,
            msfl_iterations: 500,
            msfl_lr: 1e-4,
            msfl_positives: 6,
            neg_per_pos: 3,
            msfl_heldout_scenarios: 3,
            msfl_gap: [10, 30],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ssfl_train_fraction > 0.0 && self.ssfl_train_fraction < 1.0) {
            return Err(Error::Config("ssfl_train_fraction must lie in (0, 1)".into()));
        }
        if self.msfl_positives < 2 || self.msfl_heldout_scenarios == 0 || self.msfl_gap[0] > self.msfl_gap[1] {
            return Err(Error::Config("invalid MSFL batch settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioConfig,
    pub tracker: TrackerConfig,
    pub ssfl: SsflConfig,
    pub msfl: MsflConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        if self.msfl.tau != self.tracker.banks.tau {
            return Err(Error::Config(format!(
                "msfl.tau ({}) and tracker.banks.tau ({}) differ",
                self.msfl.tau, self.tracker.banks.tau
            )));
        }
        if self.ssfl.in_channels.iter().any(|&c| c != self.scenario.channels) {
            return Err(Error::Config(format!(
                "ssfl.in_channels {:?} must equal scenario.channels {}",
                self.ssfl.in_channels, self.scenario.channels
            )));
        }
        // MSFL is trained on crops of the rendered scene.
        if self.msfl.dim != self.scenario.channels {
            return Err(Error::Config(format!(
                "msfl.dim ({}) must equal scenario.channels ({})",
                self.msfl.dim, self.scenario.channels
            )));
        }
        Ok(())
    }

    /// Small scene and models used for desk-scale SSFL training.
    /// Signatures are noisier and closer together than in the default scene
    /// so that raw crops alone do not separate the targets.
    pub fn training_preset() -> Self {
        let mut cfg = Self::default();
        cfg.scenario = ScenarioConfig {
            width: 128,
            height: 128,
            targets: 6,
            frames: 200,
            box_width: [10.0, 16.0],
            occlusions: 0,
            fp_rate: 0.0,
            channels: 32,
            sigma_bg: 0.3,
            sigma_sig: 0.2,
            max_signature_cosine: 0.8,
            ..ScenarioConfig::default()
        };
        cfg.ssfl = SsflConfig {
            in_channels: [32; 3],
            model_dim: 64,
            heads: 4,
            ffn_dim: 128,
            ..SsflConfig::default()
        };
        cfg.msfl = MsflConfig {
            dim: 32,
            mlp_dim: 64,
            ..MsflConfig::default()
        };
        cfg
    }
}
