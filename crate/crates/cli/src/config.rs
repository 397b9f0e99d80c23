//! Pipeline configuration file.
//!
//! The file is TOML. Every key is optional and unknown keys are rejected.
//! Command-line flags override the values read here.
//!
//! ```toml
//! seed = 7              # seeds every stochastic stage when set
//! threads = 0           # worker threads, 0 = one per core
//!
//! [paths]               # defaults for the matching flags
//! data = "dataset"
//! rf_model = "rf.json"
//! filter_model = "filter.json"
//! out = "out"
//!
//! [gen]
//! densities = ["sparse", "dense", "very-dense"]
//! seeds = [1, 2]
//! width = 256
//! height = 256
//!
//! [forest]              # n_trees, max_depth, min_leaf, features_per_split,
//!                       # bootstrap, seed, window_radius
//! [training]
//! samples_per_class = 3000
//!
//! [labels]
//! border_thickness = 4
//! overlay_color = [0, 255, 0]
//!
//! [grow]                # connectivity ("4" | "8"), seed_disk_radius,
//!                       # priority ("geodesic_distance" | "intensity_delta")
//! [baseline]            # marker and smoothing parameters of the segmenter
//!
//! [instances]
//! interior_threshold = 0.5
//! min_area = 20
//!
//! [tiling]
//! window = 1340
//! stride = 1220
//! min_weight = 0.1
//! memory_budget_mb = 2048
//!
//! [filter]
//! threshold = 0.3
//! [filter.gbt]          # n_rounds, max_depth, shrinkage, subsample,
//!                       # min_samples_leaf, seed
//! [eval]
//! iou_threshold = 0.5
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use neuseg::forest::ForestParams;
use neuseg::instance::BaselineConfig;
use neuseg::labelsynth::GrowConfig;
use neuseg::postfilter::GbtParams;
use neuseg::synthgen::Density;

use crate::error::{CliError, ExitKind};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub threads: usize,
    pub paths: PathsConfig,
    pub gen: GenConfig,
    pub forest: ForestParams,
    pub training: TrainingConfig,
    pub labels: LabelConfig,
    pub grow: GrowConfig,
    pub baseline: BaselineConfig,
    pub instances: InstanceConfig,
    pub tiling: TilingConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub rf_model: Option<PathBuf>,
    pub filter_model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub densities: Vec<Density>,
    pub seeds: Vec<u64>,
    pub width: usize,
    pub height: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            densities: Density::ALL.to_vec(),
            seeds: vec![1, 2],
            width: 256,
            height: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub samples_per_class: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    pub border_thickness: usize,
    pub overlay_color: [u8; 3],
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            border_thickness: 4,
            overlay_color: [0, 255, 0],
        }
    }
}

/// Turning stitched class maps into candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceConfig {
    pub interior_threshold: f64,
    pub min_area: usize,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            interior_threshold: 0.5,
            min_area: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingConfig {
    pub window: usize,
    pub stride: usize,
    pub min_weight: f64,
    /// Upper bound on the estimated working memory of in-flight tiles.
    pub memory_budget_mb: usize,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            window: 1340,
            stride: 1220,
            min_weight: 0.1,
            memory_budget_mb: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub threshold: f64,
    pub gbt: GbtParams,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            gbt: GbtParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::new(ExitKind::Input, format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| CliError::from_anyhow(ExitKind::Input, e))?;
        Self::from_toml(&text)
    }

    /// Applies the top-level seed to every stochastic stage.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.forest.seed = seed;
            self.filter.gbt.seed = seed;
        }
    }

    pub fn training_seed(&self) -> u64 {
        self.seed.unwrap_or(self.forest.seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::new(ExitKind::Input, format!("config: {m}")));
        if self.tiling.window == 0 || self.tiling.stride == 0 || self.tiling.stride > self.tiling.window {
            return bad(format!(
                "tiling needs 0 < stride <= window (got window {}, stride {})",
                self.tiling.window, self.tiling.stride
            ));
        }
        if !(self.tiling.min_weight > 0.0 && self.tiling.min_weight <= 1.0) {
            return bad("tiling.min_weight must be in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.instances.interior_threshold) {
            return bad("instances.interior_threshold must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return bad("eval.iou_threshold must be in [0, 1]".into());
        }
        if !self.filter.threshold.is_finite() {
            return bad("filter.threshold must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.baseline.rf_threshold) {
            return bad("baseline.rf_threshold must be in [0, 1]".into());
        }
        if self.labels.border_thickness == 0 {
            return bad("labels.border_thickness must be >= 1".into());
        }
        if self.forest.n_trees == 0 {
            return bad("forest.n_trees must be >= 1".into());
        }
        if self.gen.width == 0 || self.gen.height == 0 {
            return bad("gen.width and gen.height must be >= 1".into());
        }
        Ok(())
    }

    /// Canonical JSON of the effective configuration, hashed into run logs.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
