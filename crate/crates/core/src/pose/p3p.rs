//! Three-point absolute pose via Grunert's distance formulation.
//!
//! The unknown distances along the three bearing rays satisfy three law-of-
//! cosines constraints. Substituting `s2 = u s1`, `s3 = v s1` reduces them to
//! a quartic in `v`; each real root gives the distances, and the pose
//! follows from aligning the two point triads.

use nalgebra::{Complex, Matrix3, Matrix4, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::features::Correspondence2D3D;
use crate::geometry::{project, CameraIntrinsics, ImagePoint, RigidPose, WorldPoint};

/// Poses consistent with three exact correspondences must reproject them
/// this closely.
pub const SELF_CONSISTENCY_PX: f64 = 1e-6;

pub fn solve_p3p(corrs: [&Correspondence2D3D; 3], k: &CameraIntrinsics) -> Result<Vec<RigidPose>> {
    let world = [
        corrs[0].world_point,
        corrs[1].world_point,
        corrs[2].world_point,
    ];
    let pixels = [
        corrs[0].query_pixel,
        corrs[1].query_pixel,
        corrs[2].query_pixel,
    ];
    p3p(&world, &pixels, k)
}

pub fn triangle_area(a: &WorldPoint, b: &WorldPoint, c: &WorldPoint) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Up to four poses mapping `world[i]` onto `pixels[i]`. Only solutions
/// reprojecting all three points within [`SELF_CONSISTENCY_PX`] are returned.
pub fn p3p(
    world: &[WorldPoint; 3],
    pixels: &[ImagePoint; 3],
    k: &CameraIntrinsics,
) -> Result<Vec<RigidPose>> {
    if triangle_area(&world[0], &world[1], &world[2]) <= 1e-12 {
        return Err(Error::Degenerate("collinear world points"));
    }
    let f: [Vector3<f64>; 3] = [
        k.ray(&pixels[0]).normalize(),
        k.ray(&pixels[1]).normalize(),
        k.ray(&pixels[2]).normalize(),
    ];
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if f[i].cross(&f[j]).norm() < 1e-12 {
            return Err(Error::Degenerate("coincident bearing vectors"));
        }
    }

    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;

    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * cos_a * cos_a;
    let a3 = 4.0
        * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g
            + 2.0 * c2 / b2 * cos_a * cos_a * cos_b);
    let a2c = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cos_b * cos_b + 2.0 * bmc * cos_a * cos_a
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * bma * cos_g * cos_g);
    let a1 = 4.0
        * (-amc * (1.0 + amc) * cos_b + 2.0 * a2 / b2 * cos_g * cos_g * cos_b
            - (1.0 - apc) * cos_a * cos_g);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cos_g * cos_g;

    let mut poses: Vec<RigidPose> = Vec::with_capacity(4);
    for v in real_roots(&[a0, a1, a2c, a3, a4]) {
        let den = 2.0 * (cos_g - v * cos_a);
        if den.abs() < 1e-14 {
            continue;
        }
        let u = ((amc - 1.0) * v * v - 2.0 * amc * cos_b * v + 1.0 + amc) / den;
        let s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_b);
        if !(s1_sq > 0.0) || u <= 0.0 || v <= 0.0 {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let mut s = Vector3::new(s1, u * s1, v * s1);
        polish_distances(&mut s, &f, [a2, b2, c2]);
        let cam = [f[0] * s[0], f[1] * s[1], f[2] * s[2]];
        let Some(pose) = align_triads(world, &cam) else {
            continue;
        };
        let consistent = (0..3).all(|i| {
            project(&world[i], &pose, k)
                .is_some_and(|p| (p - pixels[i]).norm() < SELF_CONSISTENCY_PX)
        });
        let duplicate = poses.iter().any(|q| {
            (q.center() - pose.center()).norm() < 1e-9
                && (q.rotation_matrix() - pose.rotation_matrix()).abs().max() < 1e-9
        });
        if consistent && !duplicate {
            poses.push(pose);
        }
    }
    Ok(poses)
}

/// Gauss-Newton on the three law-of-cosines equations in the distances.
fn polish_distances(s: &mut Vector3<f64>, f: &[Vector3<f64>; 3], sq: [f64; 3]) {
    let (c01, c02, c12) = (f[0].dot(&f[1]), f[0].dot(&f[2]), f[1].dot(&f[2]));
    let residual = |s: &Vector3<f64>| {
        Vector3::new(
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * c12 - sq[0],
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * c02 - sq[1],
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * c01 - sq[2],
        )
    };
    let mut r = residual(s);
    for _ in 0..5 {
        let j = Matrix3::new(
            0.0,
            2.0 * s[1] - 2.0 * s[2] * c12,
            2.0 * s[2] - 2.0 * s[1] * c12,
            2.0 * s[0] - 2.0 * s[2] * c02,
            0.0,
            2.0 * s[2] - 2.0 * s[0] * c02,
            2.0 * s[0] - 2.0 * s[1] * c01,
            2.0 * s[1] - 2.0 * s[0] * c01,
            0.0,
        );
        let Some(step) = j.lu().solve(&r) else {
            return;
        };
        let next = *s - step;
        let rn = residual(&next);
        if rn.norm() < r.norm() {
            *s = next;
            r = rn;
        } else {
            return;
        }
    }
}

/// Rigid transform taking `world` onto camera-frame points `cam`, from
/// the orthonormal frames the two triads span.
fn align_triads(world: &[WorldPoint; 3], cam: &[Vector3<f64>; 3]) -> Option<RigidPose> {
    let frame = |a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>| {
        let e1 = (b - a).try_normalize(1e-15)?;
        let e3 = e1.cross(&(c - a)).try_normalize(1e-15)?;
        Some(Matrix3::from_columns(&[e1, e3.cross(&e1), e3]))
    };
    // anchor both frames at the pair with the longest side for conditioning
    let (i, j, l) = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]
        .into_iter()
        .max_by(|x, y| {
            (world[x.0] - world[x.1])
                .norm_squared()
                .total_cmp(&(world[y.0] - world[y.1]).norm_squared())
        })?;
    let fw = frame(&world[i].coords, &world[j].coords, &world[l].coords)?;
    let fc = frame(&cam[i], &cam[j], &cam[l])?;
    let rotation = Rotation3::from_matrix_unchecked(fc * fw.transpose());
    let wc = (world[0].coords + world[1].coords + world[2].coords) / 3.0;
    let cc = (cam[0] + cam[1] + cam[2]) / 3.0;
    let t = cc - rotation * wc;
    Some(RigidPose::from_rotation_translation(rotation, t))
}

/// Real roots of `c[0] + c[1] x + ... + c[n] x^n`, via companion-matrix
/// eigenvalues followed by Newton polishing.
pub(crate) fn real_roots(c: &[f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let c: Vec<f64> = c.iter().map(|v| v / scale).collect();
    let mut degree = 4;
    while degree > 0 && c[degree].abs() < 1e-14 {
        degree -= 1;
    }
    let candidates: Vec<Complex<f64>> = match degree {
        0 => return Vec::new(),
        1 => vec![Complex::new(-c[0] / c[1], 0.0)],
        2 => {
            let (a, b, cc) = (c[2], c[1], c[0]);
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                return Vec::new();
            }
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            let mut r = Vec::new();
            if q != 0.0 {
                r.push(Complex::new(cc / q, 0.0));
            }
            r.push(Complex::new(q / a, 0.0));
            r
        }
        3 => {
            let m = nalgebra::Matrix3::new(
                -c[2] / c[3],
                -c[1] / c[3],
                -c[0] / c[3],
                1.0,
                0.0,
                0.0,
                0.0,
                1.0,
                0.0,
            );
            m.complex_eigenvalues().iter().copied().collect()
        }
        _ => {
            let m = Matrix4::new(
                -c[3] / c[4],
                -c[2] / c[4],
                -c[1] / c[4],
                -c[0] / c[4],
                1.0,
                0.0,
                0.0,
                0.0,
                0.0,
                1.0,
                0.0,
                0.0,
                0.0,
                0.0,
                1.0,
                0.0,
            );
            m.complex_eigenvalues().iter().copied().collect()
        }
    };
    let eval = |x: f64| {
        let mut p = 0.0;
        let mut dp = 0.0;
        for i in (0..=degree).rev() {
            dp = dp * x + p;
            p = p * x + c[i];
        }
        (p, dp)
    };
    let mut roots = Vec::new();
    for z in candidates {
        if z.im.abs() > 1e-4 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let (p, dp) = eval(x);
            if dp == 0.0 {
                break;
            }
            let step = p / dp;
            x -= step;
            if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        if x.is_finite() {
            roots.push(x);
        }
    }
    roots
}
