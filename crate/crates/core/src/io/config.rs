use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::ThresholdSpec;
use crate::trainer::{ModelConfig, TrainConfig};

/// Which coordinates make up the retrieval gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GalleryConfig {
    /// Add the unique training coordinates.
    pub include_training: bool,
    /// Spacing of the uniform latitude/longitude grid in degrees; `null` disables the grid.
    pub grid_deg: Option<f64>,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        Self {
            include_training: true,
            grid_deg: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds_km: ThresholdSpec,
    pub gallery: GalleryConfig,
    /// Consecutive embedding rows averaged into one query.
    pub views: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds_km: ThresholdSpec::default(),
            gallery: GalleryConfig::default(),
            views: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretConfig {
    /// Concepts kept per image after sparsification.
    pub k_top: usize,
    /// Images a concept must be retained in before it is ranked within a bin.
    pub min_support: usize,
    /// Length of the top and lowest lists per bin.
    pub rank_length: usize,
    /// Concepts per class in the differential export.
    pub top_m: usize,
    /// Compare maps against `B` columns instead of the frozen embeddings.
    pub map_use_basis: bool,
    pub kmeans_clusters: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            k_top: 20,
            min_support: 5,
            rank_length: 8,
            top_m: 5,
            map_use_basis: false,
            kmeans_clusters: 8,
        }
    }
}

/// Top-level JSON configuration. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub interpret: InterpretConfig,
    /// Concept names to train on; all concepts when absent.
    pub concepts: Option<Vec<String>>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Usage(m) => Error::usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.views == 0 {
            return Err(Error::usage("eval.views must be at least 1"));
        }
        if let Some(g) = self.eval.gallery.grid_deg {
            if !(g > 0.0 && g <= 180.0) {
                return Err(Error::usage(format!("eval.gallery.grid_deg {g} outside (0, 180]")));
            }
        }
        if self.interpret.k_top == 0 || self.interpret.rank_length == 0 || self.interpret.kmeans_clusters == 0 {
            return Err(Error::usage("interpret counts must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        super::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
