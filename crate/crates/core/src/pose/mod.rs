//! Absolute pose estimation: minimal solvers, RANSAC and refinement.

mod dlt;
mod p3p;
mod ransac;
mod refine;

pub use dlt::dlt_pose;
pub use p3p::{p3p, solve_p3p, triangle_area, SELF_CONSISTENCY_PX};
pub use ransac::{
    estimate_temporary_pose, inliers_of, ransac_pnp, weighted_ransac_pnp, PnPSolution,
    RansacConfig, Sampling,
};
pub use refine::{
    apply_update, refine_pose, refine_pose_detailed, reprojection_cost, residual_and_jacobian,
    RefineConfig, RefineReport,
};
