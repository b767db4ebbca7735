//! Linear pose from six or more correspondences with known intrinsics.

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ImagePoint, RigidPose, WorldPoint};

/// Direct linear transform on normalized image coordinates, projected back
/// onto a rigid pose.
pub fn dlt_pose(
    world: &[WorldPoint],
    pixels: &[ImagePoint],
    k: &CameraIntrinsics,
) -> Result<RigidPose> {
    if world.len() != pixels.len() {
        return Err(Error::DimensionMismatch(
            "world and pixel counts differ".into(),
        ));
    }
    let n = world.len();
    if n < 6 {
        return Err(Error::TooFewCorrespondences {
            found: n,
            required: 6,
        });
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (x, px)) in world.iter().zip(pixels).enumerate() {
        let r = k.ray(px);
        let h = [x.x, x.y, x.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = h[j];
            a[(2 * i, 8 + j)] = -r.x * h[j];
            a[(2 * i + 1, 4 + j)] = h[j];
            a[(2 * i + 1, 8 + j)] = -r.y * h[j];
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .ok_or(Error::Degenerate("empty eigen decomposition"))?;
    let p = eig.eigenvectors.column(min_idx);
    let mut m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let mut t = Vector3::new(p[3], p[7], p[11]);

    // fix the overall sign so that the points lie in front of the camera
    let in_front = world
        .iter()
        .filter(|x| (m.row(2) * x.coords)[0] + t.z > 0.0)
        .count();
    if in_front * 2 < n {
        m = -m;
        t = -t;
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("DLT decomposition failed")),
    };
    let scale = svd.singular_values.mean();
    if !(scale > 1e-12) {
        return Err(Error::Degenerate("DLT solution has zero scale"));
    }
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        return Err(Error::Degenerate("DLT rotation is a reflection"));
    }
    // re-orthonormalized rotation
    r = Rotation3::from_matrix(&r).into_inner();
    Ok(RigidPose::from_rotation_translation(
        Rotation3::from_matrix_unchecked(r),
        t / scale,
    ))
}
