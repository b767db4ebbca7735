//! Levenberg-Marquardt polish of a pose on its inlier correspondences.
//!
//! The rotation is updated on the manifold, `R <- exp([w]x) R`, and the
//! camera center additively, `C <- C + dc`, giving six parameters
//! `(w, dc)` per step.

use nalgebra::{Matrix2x3, Rotation3, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::ransac::PnPSolution;
use crate::features::Correspondence2D3D;
use crate::geometry::{CameraIntrinsics, RigidPose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this
    /// fraction.
    pub relative_tolerance: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_iterations: 100,
            relative_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub pose: RigidPose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Reprojection residual `pi(R (X - C)) - x` and its 2x6 Jacobian with
/// respect to `(w, dc)`, or `None` for points on or behind the camera.
pub fn residual_and_jacobian(
    c: &Correspondence2D3D,
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> Option<(Vector2<f64>, SMatrix<f64, 2, 6>)> {
    let p = pose.to_camera(&c.world_point);
    if p.z <= 0.0 {
        return None;
    }
    let iz = 1.0 / p.z;
    let r = Vector2::new(
        k.fx * p.x * iz + k.cx - c.query_pixel.x,
        k.fy * p.y * iz + k.cy - c.query_pixel.y,
    );
    let dpi = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz * iz,
    );
    let d_rot = -p.cross_matrix();
    let d_center = -pose.rotation_matrix();
    let mut j = SMatrix::<f64, 2, 6>::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * d_rot));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dpi * d_center));
    Some((r, j))
}

/// Applies a parameter step to a pose.
pub fn apply_update(pose: &RigidPose, delta: &Vector6<f64>) -> RigidPose {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let dc = Vector3::new(delta[3], delta[4], delta[5]);
    let rotation = Rotation3::new(w) * pose.rotation();
    // keep the rotation orthonormal to machine precision over many steps
    let rotation = Rotation3::from_matrix_eps(rotation.matrix(), 1e-15, 8, rotation);
    RigidPose::from_rotation(rotation, pose.center() + dc)
}

/// Sum of squared reprojection errors; infinite if any point is behind the
/// camera.
pub fn reprojection_cost(
    corrs: &[&Correspondence2D3D],
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> f64 {
    let mut cost = 0.0;
    for c in corrs {
        let p = pose.to_camera(&c.world_point);
        if p.z <= 0.0 {
            return f64::INFINITY;
        }
        let u = k.fx * p.x / p.z + k.cx - c.query_pixel.x;
        let v = k.fy * p.y / p.z + k.cy - c.query_pixel.y;
        cost += u * u + v * v;
    }
    cost
}

pub fn refine_pose_detailed(
    initial: &RigidPose,
    corrs: &[&Correspondence2D3D],
    k: &CameraIntrinsics,
    cfg: &RefineConfig,
) -> RefineReport {
    let mut pose = *initial;
    let mut cost = reprojection_cost(corrs, &pose, k);
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = 1e-3;
    let mut iterations = 0;

    if !cost.is_finite() || corrs.len() < 3 {
        return RefineReport {
            pose,
            initial_cost,
            final_cost: cost,
            iterations,
            cost_history: history,
        };
    }

    while iterations < cfg.max_iterations && cost > 0.0 {
        iterations += 1;
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in corrs {
            if let Some((r, j)) = residual_and_jacobian(c, &pose, k) {
                h += j.transpose() * j;
                g += j.transpose() * r;
            }
        }
        let mut damped = h;
        for i in 0..6 {
            damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
        }
        let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-g))) else {
            lambda *= 10.0;
            continue;
        };
        let candidate = apply_update(&pose, &step);
        let new_cost = reprojection_cost(corrs, &candidate, k);
        if new_cost < cost {
            let decrease = (cost - new_cost) / cost;
            pose = candidate;
            cost = new_cost;
            history.push(cost);
            lambda = (lambda / 10.0).max(1e-12);
            if decrease < cfg.relative_tolerance {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
    }

    RefineReport {
        pose,
        initial_cost,
        final_cost: cost,
        iterations,
        cost_history: history,
    }
}

/// Minimizes the squared reprojection error over the solution's inliers.
/// Never returns a pose with higher cost than the initial one.
pub fn refine_pose(
    initial: &PnPSolution,
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
) -> RigidPose {
    let inliers: Vec<&Correspondence2D3D> = initial
        .inliers
        .iter()
        .filter_map(|&i| corrs.get(i))
        .collect();
    refine_pose_detailed(&initial.pose, &inliers, k, &RefineConfig::default()).pose
}
