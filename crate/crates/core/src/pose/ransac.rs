use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dlt::dlt_pose;
use super::p3p::{p3p, triangle_area};
use crate::error::{Error, Result};
use crate::features::Correspondence2D3D;
use crate::geometry::{CameraIntrinsics, ImagePoint, RigidPose, WorldPoint};

/// Consecutive degenerate minimal samples after which six-point DLT
/// hypotheses are drawn instead.
const DLT_FALLBACK_AFTER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub inlier_threshold_px: f64,
    pub max_iterations: usize,
    /// Success probability targeted by the adaptive iteration bound.
    pub confidence: f64,
    /// When false, exactly `max_iterations` hypotheses are drawn.
    pub adaptive: bool,
    pub min_inliers: usize,
    /// Minimal samples whose pixels all lie within this distance of each
    /// other are redrawn.
    pub min_sample_span_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            inlier_threshold_px: 8.0,
            max_iterations: 10_000,
            confidence: 0.999,
            adaptive: true,
            min_inliers: 12,
            min_sample_span_px: 10.0,
            seed: 0,
        }
    }
}

impl RansacConfig {
    /// Settings for the per-retrieved-image temporary pose.
    pub fn temporary() -> Self {
        RansacConfig {
            min_inliers: 6,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold_px > 0.0) {
            return Err(Error::InvalidConfig(
                "inlier_threshold_px must be > 0".into(),
            ));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidConfig("confidence must lie in (0, 1)".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnPSolution {
    pub pose: RigidPose,
    pub inliers: Vec<usize>,
    /// Mean reprojection error over the inliers, pixels.
    pub mean_error: f64,
    pub iterations: usize,
}

/// How minimal samples are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    Uniform,
    /// Probability proportional to the weights, without replacement within
    /// one sample: each successive draw renormalizes over the items not yet
    /// chosen.
    Weighted(Vec<f64>),
}

impl Sampling {
    /// Weighted sampling by `weight` unless all weights are equal, in which
    /// case the uniform path is used.
    pub fn from_weights(corrs: &[Correspondence2D3D]) -> Sampling {
        match corrs.first() {
            Some(first) if corrs.iter().any(|c| c.weight != first.weight) => {
                Sampling::Weighted(corrs.iter().map(|c| c.weight).collect())
            }
            _ => Sampling::Uniform,
        }
    }

    /// Draws `k` distinct indices out of `n` into `out`.
    pub fn sample(&self, rng: &mut impl Rng, n: usize, k: usize, out: &mut Vec<usize>) {
        out.clear();
        debug_assert!(k <= n);
        match self {
            Sampling::Uniform => {
                while out.len() < k {
                    let i = rng.gen_range(0..n);
                    if !out.contains(&i) {
                        out.push(i);
                    }
                }
            }
            Sampling::Weighted(w) => {
                let total: f64 = w.iter().sum();
                let mut remaining = total;
                while out.len() < k {
                    if remaining <= 0.0 {
                        // only zero-weight items left: uniform among them
                        let free: Vec<usize> = (0..n).filter(|i| !out.contains(i)).collect();
                        out.push(free[rng.gen_range(0..free.len())]);
                        continue;
                    }
                    let target = rng.gen::<f64>() * remaining;
                    let mut acc = 0.0;
                    let mut pick = None;
                    let mut last_positive = None;
                    for (i, &wi) in w.iter().enumerate() {
                        if wi <= 0.0 || out.contains(&i) {
                            continue;
                        }
                        acc += wi;
                        last_positive = Some(i);
                        if acc > target {
                            pick = Some(i);
                            break;
                        }
                    }
                    let Some(i) = pick.or(last_positive) else {
                        remaining = 0.0;
                        continue;
                    };
                    remaining -= w[i];
                    out.push(i);
                }
            }
        }
    }
}

pub(crate) fn reprojection_error(
    c: &Correspondence2D3D,
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> Option<f64> {
    crate::geometry::project(&c.world_point, pose, k).map(|p| (p - c.query_pixel).norm())
}

/// Inlier indices and their mean reprojection error.
pub fn inliers_of(
    corrs: &[Correspondence2D3D],
    pose: &RigidPose,
    k: &CameraIntrinsics,
    threshold: f64,
) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        if let Some(e) = reprojection_error(c, pose, k) {
            if e < threshold {
                idx.push(i);
                sum += e;
            }
        }
    }
    let mean = if idx.is_empty() {
        f64::INFINITY
    } else {
        sum / idx.len() as f64
    };
    (idx, mean)
}

fn sample_is_degenerate(corrs: &[Correspondence2D3D], sample: &[usize], min_span: f64) -> bool {
    let w: Vec<&WorldPoint> = sample.iter().map(|&i| &corrs[i].world_point).collect();
    let px: Vec<&ImagePoint> = sample.iter().map(|&i| &corrs[i].query_pixel).collect();
    let mut max_side_sq = 0.0f64;
    let mut max_span = 0.0f64;
    for a in 0..3 {
        for b in a + 1..3 {
            max_side_sq = max_side_sq.max((w[a] - w[b]).norm_squared());
            max_span = max_span.max((px[a] - px[b]).norm());
        }
    }
    // twice the area over the squared longest side is the sine-like shape factor
    let area = triangle_area(w[0], w[1], w[2]);
    area <= 1e-12 || 2.0 * area < 1e-4 * max_side_sq || max_span < min_span
}

fn adaptive_limit(cfg: &RansacConfig, inliers: usize, n: usize) -> usize {
    if !cfg.adaptive {
        return cfg.max_iterations;
    }
    let w = inliers as f64 / n as f64;
    let p_good = w * w * w;
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return cfg.max_iterations;
    }
    let needed = ((1.0 - cfg.confidence).ln() / (1.0 - p_good).ln()).ceil();
    if needed.is_finite() && needed >= 0.0 {
        (needed as usize).clamp(1, cfg.max_iterations)
    } else {
        cfg.max_iterations
    }
}

/// RANSAC over P3P hypotheses. Inliers are counted unweighted; the best
/// hypothesis has the most inliers, ties going to the lower mean error. The
/// returned solution's inlier set is recomputed from its pose.
pub fn ransac_pnp(
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
    sampling: &Sampling,
) -> Result<PnPSolution> {
    cfg.validate()?;
    let n = corrs.len();
    if n < 4 {
        return Err(Error::TooFewCorrespondences {
            found: n,
            required: 4,
        });
    }
    if let Sampling::Weighted(w) = sampling {
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {n} correspondences",
                w.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample = Vec::with_capacity(6);
    let mut best: Option<(usize, f64, RigidPose)> = None;
    let mut limit = cfg.max_iterations;
    let mut iterations = 0;
    let mut degenerate_run = 0;

    while iterations < limit {
        iterations += 1;
        let hypotheses: Vec<RigidPose> = if degenerate_run >= DLT_FALLBACK_AFTER && n >= 6 {
            sampling.sample(&mut rng, n, 6, &mut sample);
            let w: Vec<WorldPoint> = sample.iter().map(|&i| corrs[i].world_point).collect();
            let p: Vec<ImagePoint> = sample.iter().map(|&i| corrs[i].query_pixel).collect();
            match dlt_pose(&w, &p, k) {
                Ok(pose) => {
                    degenerate_run = 0;
                    vec![pose]
                }
                Err(_) => continue,
            }
        } else {
            sampling.sample(&mut rng, n, 3, &mut sample);
            if sample_is_degenerate(corrs, &sample, cfg.min_sample_span_px) {
                degenerate_run += 1;
                continue;
            }
            let w = [
                corrs[sample[0]].world_point,
                corrs[sample[1]].world_point,
                corrs[sample[2]].world_point,
            ];
            let p = [
                corrs[sample[0]].query_pixel,
                corrs[sample[1]].query_pixel,
                corrs[sample[2]].query_pixel,
            ];
            match p3p(&w, &p, k) {
                Ok(poses) => {
                    degenerate_run = 0;
                    poses
                }
                Err(_) => {
                    degenerate_run += 1;
                    continue;
                }
            }
        };
        for pose in hypotheses {
            let (inl, mean) = inliers_of(corrs, &pose, k, cfg.inlier_threshold_px);
            let better = match &best {
                None => !inl.is_empty(),
                Some((count, err, _)) => inl.len() > *count || (inl.len() == *count && mean < *err),
            };
            if better {
                limit = limit.min(adaptive_limit(cfg, inl.len(), n)).max(iterations);
                best = Some((inl.len(), mean, pose));
            }
        }
    }

    let required = cfg.min_inliers.max(1);
    let Some((_, _, pose)) = best else {
        return Err(Error::NoConsensus { required });
    };
    let (inliers, mean_error) = inliers_of(corrs, &pose, k, cfg.inlier_threshold_px);
    if inliers.len() < required {
        return Err(Error::NoConsensus { required });
    }
    Ok(PnPSolution {
        pose,
        inliers,
        mean_error,
        iterations,
    })
}

/// Unweighted RANSAC on one retrieved image's correspondences. `None` when
/// there are fewer than four correspondences or no hypothesis reaches
/// `min_inliers`.
pub fn estimate_temporary_pose(
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Option<PnPSolution> {
    ransac_pnp(corrs, k, cfg, &Sampling::Uniform).ok()
}

/// RANSAC whose minimal samples are drawn with probability proportional to
/// each correspondence's weight.
pub fn weighted_ransac_pnp(
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PnPSolution> {
    if corrs
        .iter()
        .any(|c| !(c.weight >= 0.0 && c.weight.is_finite()))
    {
        return Err(Error::InvalidConfig(
            "correspondence weights must be finite and >= 0".into(),
        ));
    }
    ransac_pnp(corrs, k, cfg, &Sampling::from_weights(corrs))
}
