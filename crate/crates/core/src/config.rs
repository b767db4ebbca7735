//! Pipeline configuration as a TOML file. Every section and key is optional
//! and falls back to its default; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [retrieval]
//! top_k_day = 20
//! top_k_night = 30
//!
//! [map]
//! voxel_size = 0.05
//! unstable_classes = [10, 11, 12, 13, 14, 15, 16, 17, 18]
//! [map.depth_filter]
//! tau = 0.01
//! min_consistent_neighbors = 1
//! num_neighbors = 4
//!
//! [matching]
//! active_families = ["sift", "r2d2"]
//! [[matching.families]]
//! name = "sift"
//! dim = 64
//! ratio = 0.8
//!
//! [gate]
//! distance_margin = 1.2
//! angle_margin = 0.1
//!
//! [weighting]
//! enabled = true
//! score_floor = 0
//!
//! [temporary_ransac]
//! min_inliers = 6
//!
//! [ransac]
//! inlier_threshold_px = 8.0
//! max_iterations = 10000
//!
//! [refine]
//! max_iterations = 100
//!
//! [evaluation]
//! day = [{ max_position = 0.25, max_orientation = 2.0 }]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{validate_buckets, BucketSets, Condition};
use crate::features::{validate_families, FeatureFamily};
use crate::map::MapConfig;
use crate::pose::{RansacConfig, RefineConfig};
use crate::retrieval::RetrievalConfig;
use crate::scoring::VisibilityGateConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub top_k_day: usize,
    pub top_k_night: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            top_k_day: RetrievalConfig::DAY_TOP_K,
            top_k_night: RetrievalConfig::NIGHT_TOP_K,
        }
    }
}

impl RetrievalSection {
    pub fn for_condition(&self, c: Condition) -> RetrievalConfig {
        RetrievalConfig {
            top_k: match c {
                Condition::Day => self.top_k_day,
                Condition::Night => self.top_k_night,
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingSection {
    /// Families to use, by name; empty means all families of the dataset.
    pub active_families: Vec<String>,
    /// Replace the dataset's matching rules for families of the same name.
    pub families: Vec<FeatureFamily>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingSection {
    /// When false, the final RANSAC samples uniformly and no temporary poses
    /// or semantic scores are computed.
    pub enabled: bool,
    /// Semantic scores below this value are raised to it before
    /// normalization. Zero leaves scores unchanged.
    pub score_floor: usize,
}

impl Default for WeightingSection {
    fn default() -> Self {
        WeightingSection {
            enabled: true,
            score_floor: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Base seed; every query and retrieved image derives its own stream.
    pub seed: u64,
    pub retrieval: RetrievalSection,
    pub map: MapConfig,
    pub matching: MatchingSection,
    pub gate: VisibilityGateConfig,
    pub weighting: WeightingSection,
    pub temporary_ransac: RansacConfig,
    pub ransac: RansacConfig,
    pub refine: RefineConfig,
    pub evaluation: BucketSets,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            retrieval: RetrievalSection::default(),
            map: MapConfig::default(),
            matching: MatchingSection::default(),
            gate: VisibilityGateConfig::default(),
            weighting: WeightingSection::default(),
            temporary_ransac: RansacConfig::temporary(),
            ransac: RansacConfig::default(),
            refine: RefineConfig::default(),
            evaluation: BucketSets::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieval.top_k_day == 0 || self.retrieval.top_k_night == 0 {
            return Err(Error::InvalidConfig("top_k must be >= 1".into()));
        }
        self.map.depth_filter.validate()?;
        if !(self.map.voxel_size > 0.0 && self.map.voxel_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "voxel_size must be > 0, got {}",
                self.map.voxel_size
            )));
        }
        if !self.matching.families.is_empty() {
            validate_families(&self.matching.families)?;
        }
        self.gate.validate()?;
        self.temporary_ransac.validate()?;
        self.ransac.validate()?;
        if self.refine.max_iterations == 0 || !(self.refine.relative_tolerance >= 0.0) {
            return Err(Error::InvalidConfig(
                "refine needs max_iterations >= 1 and tolerance >= 0".into(),
            ));
        }
        validate_buckets(&self.evaluation.day)?;
        validate_buckets(&self.evaluation.night)?;
        Ok(())
    }

    /// Dataset families with overrides applied, restricted to the active
    /// set (in dataset order).
    pub fn resolve_families(&self, dataset: &[FeatureFamily]) -> Result<Vec<FeatureFamily>> {
        for name in &self.matching.active_families {
            if !dataset.iter().any(|f| &f.name == name) {
                return Err(Error::InvalidConfig(format!(
                    "active family `{name}` not in dataset"
                )));
            }
        }
        let mut out = Vec::new();
        for f in dataset {
            if !self.matching.active_families.is_empty()
                && !self.matching.active_families.contains(&f.name)
            {
                continue;
            }
            let resolved = match self.matching.families.iter().find(|o| o.name == f.name) {
                Some(o) if o.dim != f.dim => {
                    return Err(Error::DimensionMismatch(format!(
                        "family `{}` is {}-d in the dataset, {}-d in the config",
                        f.name, f.dim, o.dim
                    )))
                }
                Some(o) => o.clone(),
                None => f.clone(),
            };
            out.push(resolved);
        }
        validate_families(&out)?;
        Ok(out)
    }
}

/// Recall thresholds only, as read by the evaluate command.
pub fn load_buckets(path: &Path) -> Result<BucketSets> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let b: BucketSets = toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    validate_buckets(&b.day)?;
    validate_buckets(&b.night)?;
    Ok(b)
}
