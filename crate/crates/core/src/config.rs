//! Shared TOML configuration covering every module's tunables, plus the
//! phantom specification file.
//!
//! The `[kinetics]` section is the single source for the forward-model
//! grid step and frame sampling mode; it is copied into the training and
//! NLLS runtime configurations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::{EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::kinetics::FrameSampling;
use crate::nlls::NllsConfig;
use crate::phantom::PhantomSpec;
use crate::training::{NetworkConfig, TrainConfig};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct KineticsSection {
    pub grid_step_s: f64,
    pub frame_sampling: FrameSampling,
}

impl Default for KineticsSection {
    fn default() -> Self {
        Self {
            grid_step_s: crate::kinetics::DEFAULT_GRID_STEP_S,
            frame_sampling: FrameSampling::Average,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub kinetics: KineticsSection,
    pub encoder: EncoderConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub nlls: NllsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Resolved-config echo written into every run directory.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Encoder configuration with the feature dimension filled in for
    /// the CTFM variant when left at zero.
    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let mut enc = self.encoder;
        if enc.variant == EncoderVariant::Ctfm && enc.feature_dim == 0 {
            enc.feature_dim = crate::dataio::FEATURE_DIM;
        }
        enc.validate()?;
        Ok(enc)
    }

    /// Training configuration with the `[kinetics]` section applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            grid_step_s: self.kinetics.grid_step_s,
            sampling: self.kinetics.frame_sampling,
            ..self.training.clone()
        }
    }

    /// NLLS configuration with the `[kinetics]` section applied.
    pub fn nlls_config(&self) -> NllsConfig {
        NllsConfig {
            grid_step_s: self.kinetics.grid_step_s,
            sampling: self.kinetics.frame_sampling,
            ..self.nlls.clone()
        }
    }

    pub fn network_config(&self) -> NetworkConfig {
        self.network
    }
}

/// Load a phantom specification from TOML.
pub fn load_phantom_spec(path: &Path) -> Result<PhantomSpec> {
    let text = std::fs::read_to_string(path)?;
    let spec: PhantomSpec =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn save_phantom_spec(path: &Path, spec: &PhantomSpec) -> Result<()> {
    std::fs::write(path, toml::to_string_pretty(spec).expect("spec serializes"))?;
    Ok(())
}
