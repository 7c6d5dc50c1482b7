//! The TOML run configuration: one file describing the network architecture,
//! input feature selection, scene tiling, and training hyper-parameters.
//! Every field has a default, so an empty document is a valid configuration;
//! unknown keys are rejected to catch typos.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::FeatureSelection;
use crate::error::{Error, Result};
use crate::evaluation::ISPRS_CLASS_NAMES;
use crate::network::GacnnConfig;
use crate::training::TrainConfig;

/// Architecture and attention switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub sample_sizes: [usize; 4],
    pub encoder_dims: [(usize, usize, usize); 4],
    pub decoder_dims: [(usize, usize); 4],
    pub k_encoder: usize,
    pub k_decoder: usize,
    pub num_classes: usize,
    pub use_global: bool,
    pub use_edge_attention: bool,
    pub use_density_attention: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let base = GacnnConfig::default();
        NetworkSection {
            sample_sizes: base.sample_sizes,
            encoder_dims: base.encoder_dims,
            decoder_dims: base.decoder_dims,
            k_encoder: base.k_encoder,
            k_decoder: base.k_decoder,
            num_classes: base.num_classes,
            use_global: base.use_global,
            use_edge_attention: base.use_edge,
            use_density_attention: base.use_density,
        }
    }
}

/// Which point attributes become model input columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub intensity: bool,
    pub height_above_ground: bool,
    pub return_number: bool,
    pub num_returns: bool,
    pub hag_cell_size: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        let base = FeatureSelection::default();
        FeatureSection {
            intensity: base.intensity,
            height_above_ground: base.height_above_ground,
            return_number: base.return_number,
            num_returns: base.num_returns,
            hag_cell_size: base.hag_cell_size,
        }
    }
}

/// Scene tiling and the fixed spatial hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    /// Tile edge lengths in meters.
    pub tile_x: f64,
    pub tile_y: f64,
    pub tile_z: f64,
    /// Tiles with fewer points are merged into a neighbor.
    pub min_tile_points: usize,
    /// Fixed density-kernel bandwidth; omit for the per-level default.
    pub kde_bandwidth: Option<f64>,
    pub idw_neighbors: usize,
    pub idw_power: f64,
    pub fps_seed_index: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            tile_x: 30.0,
            tile_y: 30.0,
            tile_z: 40.0,
            min_tile_points: 1000,
            kde_bandwidth: None,
            idw_neighbors: 3,
            idw_power: 2.0,
            fps_seed_index: 0,
        }
    }
}

/// Optimizer and loop hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub base_lr: f64,
    pub lr_halving_interval: usize,
    pub batch_size: usize,
    pub points_per_block: usize,
    pub drop_fraction: f64,
    pub epochs: usize,
    pub rng_seed: u64,
    pub class_weights: Option<Vec<f64>>,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainingSection {
            base_lr: base.base_lr,
            lr_halving_interval: base.lr_halving_interval,
            batch_size: base.batch_size,
            points_per_block: base.points_per_block,
            drop_fraction: base.drop_fraction,
            epochs: base.epochs,
            rng_seed: base.rng_seed,
            class_weights: base.class_weights,
            checkpoint_interval: 1000,
        }
    }
}

/// Report labeling.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// One name per class; omit for the benchmark names (9 classes) or
    /// generated `class<i>` names.
    pub class_names: Option<Vec<String>>,
}

/// The complete run configuration.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub features: FeatureSection,
    pub geometry: GeometrySection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    /// Parses a TOML document; missing keys fall back to defaults, unknown
    /// keys are errors.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode configuration: {e}")))
    }

    /// The architecture this configuration describes; the input width is the
    /// number of enabled feature columns.
    pub fn to_gacnn_config(&self) -> GacnnConfig {
        GacnnConfig {
            sample_sizes: self.network.sample_sizes,
            encoder_dims: self.network.encoder_dims,
            decoder_dims: self.network.decoder_dims,
            k_encoder: self.network.k_encoder,
            k_decoder: self.network.k_decoder,
            num_classes: self.network.num_classes,
            input_feature_count: self.to_feature_selection().feature_count(),
            use_global: self.network.use_global,
            use_edge: self.network.use_edge_attention,
            use_density: self.network.use_density_attention,
            idw_neighbors: self.geometry.idw_neighbors,
            idw_power: self.geometry.idw_power,
            fps_seed_index: self.geometry.fps_seed_index,
            kde_bandwidth: self.geometry.kde_bandwidth,
        }
    }

    pub fn to_feature_selection(&self) -> FeatureSelection {
        FeatureSelection {
            intensity: self.features.intensity,
            height_above_ground: self.features.height_above_ground,
            return_number: self.features.return_number,
            num_returns: self.features.num_returns,
            hag_cell_size: self.features.hag_cell_size,
        }
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.training.base_lr,
            lr_halving_interval: self.training.lr_halving_interval,
            batch_size: self.training.batch_size,
            points_per_block: self.training.points_per_block,
            drop_fraction: self.training.drop_fraction,
            epochs: self.training.epochs,
            rng_seed: self.training.rng_seed,
            class_weights: self.training.class_weights.clone(),
        }
    }

    /// Class names for reports: the configured list, the benchmark names for
    /// nine classes, or generated `class<i>` names.
    pub fn class_names(&self) -> Vec<String> {
        match &self.evaluation.class_names {
            Some(names) => names.clone(),
            None if self.network.num_classes == ISPRS_CLASS_NAMES.len() => {
                ISPRS_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
            }
            None => (0..self.network.num_classes)
                .map(|i| format!("class{i}"))
                .collect(),
        }
    }

    /// Cross-field validation of the whole document.
    pub fn validate(&self) -> Result<()> {
        self.to_gacnn_config().validate()?;
        self.to_train_config().validate()?;
        for (name, v) in [
            ("tile_x", self.geometry.tile_x),
            ("tile_y", self.geometry.tile_y),
            ("tile_z", self.geometry.tile_z),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a positive real, got {v}"
                )));
            }
        }
        if self.geometry.min_tile_points == 0 {
            return Err(Error::Config("min_tile_points must be at least 1".into()));
        }
        if self.features.height_above_ground
            && (!(self.features.hag_cell_size > 0.0) || !self.features.hag_cell_size.is_finite())
        {
            return Err(Error::Config(format!(
                "hag_cell_size must be a positive real, got {}",
                self.features.hag_cell_size
            )));
        }
        if let Some(names) = &self.evaluation.class_names {
            if names.len() != self.network.num_classes {
                return Err(Error::Config(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.network.num_classes
                )));
            }
        }
        if let Some(w) = &self.training.class_weights {
            if w.len() != self.network.num_classes {
                return Err(Error::Config(format!(
                    "{} class weights for {} classes",
                    w.len(),
                    self.network.num_classes
                )));
            }
        }
        Ok(())
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
