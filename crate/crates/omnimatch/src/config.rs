//! Run configuration: every stage's parameters in one structured
//! bundle. Defaults are the pipeline's reference constants; a JSON file
//! overrides fields it names (unknown keys are rejected by name), and
//! command-line flags override the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::LossConfig;
use crate::matcher::{GpConfig, DEFAULT_EMBEDDING_SEED};
use crate::pose::{
    DEFAULT_CERTAINTY_THRESHOLD, DEFAULT_MAX_MATCHES, DEFAULT_RANSAC_ITERATIONS,
};
use crate::refine::RefinerConfig;
use crate::sphere::ErpGridSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("malformed config {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("invalid config: {reason}")]
    Invalid { reason: String },
}

/// ERP grid dimensions for rendering and matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 128,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<ErpGridSpec, ConfigError> {
        ErpGridSpec::new(self.width, self.height).map_err(|e| ConfigError::Invalid {
            reason: e.to_string(),
        })
    }
}

/// Which analytic descriptor stands in for the learned encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorConfig {
    /// Mean-removed normalized gray patches, `patch_size` x `patch_size`.
    Patch { patch_size: usize },
    /// Gradient-orientation histograms over a `window` x `window` area.
    Gradient { window: usize },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::Patch { patch_size: 5 }
    }
}

/// Correspondence sampling out of a match field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub certainty_threshold: f64,
    pub max_matches: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            certainty_threshold: DEFAULT_CERTAINTY_THRESHOLD,
            max_matches: DEFAULT_MAX_MATCHES,
            seed: 7,
        }
    }
}

/// Robust essential-matrix estimation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Angular epipolar inlier bound, degrees.
    pub inlier_threshold_deg: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_RANSAC_ITERATIONS,
            inlier_threshold_deg: 1.0,
            seed: 7,
        }
    }
}

/// The full pipeline configuration. Every field has a built-in default,
/// so a config file may name only what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub extractor: ExtractorConfig,
    pub gp: GpConfig,
    pub embedding_seed: u64,
    pub refiner: RefinerConfig,
    pub loss: LossConfig,
    pub sampling: SamplingConfig,
    pub ransac: RansacConfig,
    /// Apply a seeded azimuth rotation to frame B before matching and
    /// undo it afterwards; an equivariance exercise, off by default.
    pub augment_azimuth: bool,
}

// A derived Default would zero the embedding seed; keep Default bound
// to the reference constants so serde's fill-in stays faithful.
impl Default for RunConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl RunConfig {
    pub fn reference() -> Self {
        Self {
            grid: GridConfig::default(),
            extractor: ExtractorConfig::default(),
            gp: GpConfig::default(),
            embedding_seed: DEFAULT_EMBEDDING_SEED,
            refiner: RefinerConfig::default(),
            loss: LossConfig::default(),
            sampling: SamplingConfig::default(),
            ransac: RansacConfig::default(),
            augment_azimuth: false,
        }
    }

    /// Reference defaults overridden by the fields a JSON file names.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Malformed {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.grid.spec()?;
        if self.grid.height % 32 != 0 || self.grid.height < 64 {
            return Err(ConfigError::Invalid {
                reason: format!(
                    "grid height {} must be a multiple of 32 and at least 64",
                    self.grid.height
                ),
            });
        }
        match self.extractor {
            ExtractorConfig::Patch { patch_size } => {
                if patch_size % 2 == 0 || patch_size < 3 {
                    return Err(ConfigError::Invalid {
                        reason: format!("patch_size {patch_size} must be odd and at least 3"),
                    });
                }
            }
            ExtractorConfig::Gradient { window } => {
                if window % 2 == 0 || window < 3 {
                    return Err(ConfigError::Invalid {
                        reason: format!("window {window} must be odd and at least 3"),
                    });
                }
            }
        }
        let gp_ok = self.gp.tau > 0.0
            && self.gp.epsilon > 0.0
            && self.gp.sigma_n > 0.0
            && self.gp.embed_dim >= 1;
        if !gp_ok {
            return Err(ConfigError::Invalid {
                reason: "gp requires tau > 0, epsilon > 0, sigma_n > 0, embed_dim >= 1"
                    .into(),
            });
        }
        self.refiner.validate().map_err(|e| ConfigError::Invalid {
            reason: e.to_string(),
        })?;
        self.loss.validate().map_err(|e| ConfigError::Invalid {
            reason: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&self.sampling.certainty_threshold) {
            return Err(ConfigError::Invalid {
                reason: format!(
                    "certainty_threshold {} outside [0, 1]",
                    self.sampling.certainty_threshold
                ),
            });
        }
        if self.sampling.max_matches < 8 {
            return Err(ConfigError::Invalid {
                reason: format!(
                    "max_matches {} cannot support pose estimation (need 8)",
                    self.sampling.max_matches
                ),
            });
        }
        if self.ransac.iterations == 0 {
            return Err(ConfigError::Invalid {
                reason: "ransac iterations must be at least 1".into(),
            });
        }
        if !(self.ransac.inlier_threshold_deg > 0.0) {
            return Err(ConfigError::Invalid {
                reason: format!(
                    "inlier_threshold_deg {} must be positive",
                    self.ransac.inlier_threshold_deg
                ),
            });
        }
        Ok(())
    }
}
