//! Semantic consistency scoring of retrieved images.
//!
//! A temporary query pose estimated from one retrieved image's matches is
//! judged by projecting the map points that should be visible from it into
//! the query segmentation and counting label agreements. Scores become
//! per-correspondence sampling weights for the final RANSAC.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::classes::UNLABELED;
use crate::error::{Error, Result};
use crate::features::Correspondence2D3D;
use crate::geometry::{angle_between, project, CameraIntrinsics, RigidPose};
use crate::map::{DensePoint, LabelImage};
use crate::ImageId;

/// Slack on the visibility test: the distance interval becomes
/// `[d_min / distance_margin, d_max * distance_margin]` and the angle bound
/// `theta + angle_margin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisibilityGateConfig {
    pub distance_margin: f64,
    pub angle_margin: f64,
}

impl Default for VisibilityGateConfig {
    fn default() -> Self {
        VisibilityGateConfig {
            distance_margin: 1.2,
            angle_margin: 0.1,
        }
    }
}

impl VisibilityGateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_margin >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "distance_margin must be >= 1, got {}",
                self.distance_margin
            )));
        }
        if !(self.angle_margin >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "angle_margin must be >= 0, got {}",
                self.angle_margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticScore {
    pub image: ImageId,
    pub consistent: usize,
    pub projected: usize,
}

impl SemanticScore {
    pub fn zero(image: ImageId) -> Self {
        SemanticScore {
            image,
            consistent: 0,
            projected: 0,
        }
    }

    pub fn value(&self) -> usize {
        self.consistent
    }
}

/// Whether a query camera at `center` sees `point` from a distance and
/// direction similar to the database cameras that reconstructed it.
pub fn is_visible(point: &DensePoint, center: &Vector3<f64>, cfg: &VisibilityGateConfig) -> bool {
    let v = center - point.position.coords;
    let dist = v.norm();
    let cone = &point.cone;
    if !(dist > cone.d_min / cfg.distance_margin && dist < cone.d_max * cfg.distance_margin) {
        return false;
    }
    angle_between(&v, &cone.v_m) < cone.theta + cfg.angle_margin
}

pub fn gate_visible<'a>(
    points: &'a [DensePoint],
    query_pose: &RigidPose,
    cfg: &VisibilityGateConfig,
) -> Vec<&'a DensePoint> {
    let c = query_pose.center();
    points.iter().filter(|p| is_visible(p, c, cfg)).collect()
}

/// Counts gated points projecting onto labeled query pixels (`projected`)
/// and those whose label agrees (`consistent`).
pub fn semantic_consistency_score<'a>(
    image: ImageId,
    points: impl IntoIterator<Item = &'a DensePoint>,
    pose: &RigidPose,
    k: &CameraIntrinsics,
    query_labels: &LabelImage,
) -> SemanticScore {
    let mut score = SemanticScore::zero(image);
    for p in points {
        let Some(px) = project(&p.position, pose, k) else {
            continue;
        };
        match query_labels.at(&px) {
            Some(l) if l != UNLABELED => {
                score.projected += 1;
                if l == p.label {
                    score.consistent += 1;
                }
            }
            _ => {}
        }
    }
    score
}

/// Gates and scores in one pass over the map, without collecting the gated
/// subset.
pub fn score_pose(
    image: ImageId,
    map: &[DensePoint],
    pose: &RigidPose,
    k: &CameraIntrinsics,
    query_labels: &LabelImage,
    cfg: &VisibilityGateConfig,
) -> SemanticScore {
    let c = *pose.center();
    semantic_consistency_score(
        image,
        map.iter().filter(|p| is_visible(p, &c, cfg)),
        pose,
        k,
        query_labels,
    )
}

/// Assigns each correspondence its source image's score, normalized so the
/// weights over all correspondences sum to one. All-zero scores fall back to
/// uniform weights.
pub fn normalize_weights(
    scores: &[SemanticScore],
    mut corrs: Vec<Correspondence2D3D>,
) -> Result<Vec<Correspondence2D3D>> {
    let by_image: BTreeMap<ImageId, f64> = scores
        .iter()
        .map(|s| (s.image, s.consistent as f64))
        .collect();
    let mut total = 0.0;
    for c in &corrs {
        total += by_image
            .get(&c.source)
            .ok_or(Error::MissingScore(c.source))?;
    }
    if corrs.is_empty() {
        return Ok(corrs);
    }
    if total == 0.0 {
        let w = 1.0 / corrs.len() as f64;
        corrs.iter_mut().for_each(|c| c.weight = w);
    } else {
        for c in corrs.iter_mut() {
            c.weight = by_image[&c.source] / total;
        }
    }
    Ok(corrs)
}
