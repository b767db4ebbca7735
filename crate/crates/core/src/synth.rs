//! Analytic street-canyon scenes with exact depth, labels and features.
//!
//! The world frame has `y` pointing down and the street running along `+z`.
//! Geometry is a set of labeled rectangles; every pixel is rendered by
//! casting the ray through its center. Feature anchors are scattered over the
//! rectangles; each is assigned one host database image that observes it and
//! moved onto the surface point seen at the host's nearest pixel center, so
//! the host keypoint lifts back to the anchor exactly. Queries observe every
//! anchor at its exact projection. Each anchor owns a latent descriptor per
//! family and a global code; observations add Gaussian noise and are dropped
//! with a probability that depends on the image condition and the family.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::{self, ClassId};
use crate::error::{Error, Result};
use crate::eval::Condition;
use crate::features::{FeatureFamily, FeatureSet};
use crate::geometry::{project_camera, CameraIntrinsics, ImagePoint, RigidPose, WorldPoint};
use crate::io::Dataset;
use crate::map::{DatabaseImageRecord, DepthMap, LabelImage};
use crate::pipeline::{mix_seed, QueryImage};
use crate::retrieval::GlobalDescriptor;
use crate::ImageId;

/// First query id; database ids start at zero.
pub const QUERY_ID_BASE: ImageId = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub class: ClassId,
    /// Corner of the rectangle.
    pub origin: [f64; 3],
    pub axis_u: [f64; 3],
    pub axis_v: [f64; 3],
    /// Side lengths along `axis_u` and `axis_v`, meters.
    pub extent: [f64; 2],
    /// Feature anchors scattered uniformly over the rectangle.
    pub anchors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    /// Expected norm of the additive descriptor noise.
    pub sigma: f64,
    /// Probability that an observation is dropped.
    pub dropout: f64,
}

impl Corruption {
    pub const NONE: Corruption = Corruption {
        sigma: 0.0,
        dropout: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub family: FeatureFamily,
    pub database: Corruption,
    pub day: Corruption,
    pub night: Corruption,
}

impl FamilySpec {
    fn query(&self, c: Condition) -> Corruption {
        match c {
            Condition::Day => self.day,
            Condition::Night => self.night,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.fx,
            self.fy,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }
}

/// Database cameras evenly spaced from `start` to `end`, cycling through
/// lateral offsets `0, +offset, -offset` and yaws `0, +yaw, -yaw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub count: usize,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub lateral_offset: f64,
    pub yaw_deg: f64,
}

/// Random query poses inside a box, with bounded yaw, pitch and roll.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub day: usize,
    pub night: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    /// Place query `i` exactly at database pose `i mod count` instead.
    #[serde(default)]
    pub at_database_poses: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalSpec {
    pub dim: usize,
    /// Noise norm relative to the unit-norm pooled descriptor.
    pub database_noise: f64,
    pub day_noise: f64,
    pub night_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub camera: CameraSpec,
    pub planes: Vec<PlaneSpec>,
    pub database: TrajectorySpec,
    pub queries: QuerySpec,
    pub families: Vec<FamilySpec>,
    pub global: GlobalSpec,
    /// Anchors farther than this (z-depth) yield no keypoint.
    pub max_feature_depth: f64,
}

fn street_planes() -> Vec<PlaneSpec> {
    let x = [1.0, 0.0, 0.0];
    let y = [0.0, 1.0, 0.0];
    let z = [0.0, 0.0, 1.0];
    let plane = |class, origin, axis_u, axis_v, extent, anchors| PlaneSpec {
        class,
        origin,
        axis_u,
        axis_v,
        extent,
        anchors,
    };
    // gaps of at least 0.15 m keep every voxel on a single rectangle
    vec![
        plane(classes::ROAD, [-3.3, 1.6, -5.0], x, z, [6.6, 70.0], 150),
        plane(classes::SIDEWALK, [3.5, 1.45, -5.0], x, z, [2.3, 70.0], 80),
        plane(classes::SIDEWALK, [-5.8, 1.45, -5.0], x, z, [2.3, 70.0], 80),
        plane(classes::BUILDING, [6.0, -8.0, -5.0], y, z, [9.3, 70.0], 350),
        plane(
            classes::BUILDING,
            [-6.0, -8.0, -5.0],
            y,
            z,
            [9.3, 70.0],
            350,
        ),
        plane(
            classes::BUILDING,
            [-5.7, -8.0, 65.0],
            x,
            y,
            [11.4, 9.3],
            150,
        ),
        plane(classes::VEGETATION, [-5.5, 0.3, 8.0], y, z, [1.0, 14.0], 60),
        plane(classes::CAR, [2.2, 0.2, 28.0], y, z, [1.2, 4.2], 40),
    ]
}

impl SceneSpec {
    /// Handcrafted-like family (`sift`) nearly clean by day and badly
    /// corrupted at night; learned-like family (`r2d2`) noisier by day but
    /// degrading less at night.
    pub fn street() -> Self {
        SceneSpec {
            seed: 2021,
            camera: CameraSpec {
                fx: 200.0,
                fy: 200.0,
                width: 256,
                height: 192,
            },
            planes: street_planes(),
            database: TrajectorySpec {
                count: 20,
                start: [0.0, 0.0, 0.0],
                end: [0.0, 0.0, 38.0],
                lateral_offset: 1.0,
                yaw_deg: 20.0,
            },
            queries: QuerySpec {
                day: 100,
                night: 100,
                x_range: [-1.2, 1.2],
                y_range: [-0.2, 0.2],
                z_range: [2.0, 36.0],
                yaw_deg: 25.0,
                pitch_deg: 4.0,
                roll_deg: 2.0,
                at_database_poses: false,
            },
            families: vec![
                FamilySpec {
                    family: FeatureFamily::sift_like(64),
                    database: Corruption {
                        sigma: 0.1,
                        dropout: 0.1,
                    },
                    day: Corruption {
                        sigma: 0.1,
                        dropout: 0.1,
                    },
                    night: Corruption {
                        sigma: 2.0,
                        dropout: 0.85,
                    },
                },
                FamilySpec {
                    family: FeatureFamily::r2d2_like(64),
                    database: Corruption {
                        sigma: 0.25,
                        dropout: 0.15,
                    },
                    day: Corruption {
                        sigma: 0.25,
                        dropout: 0.15,
                    },
                    night: Corruption {
                        sigma: 1.5,
                        dropout: 0.85,
                    },
                },
            ],
            global: GlobalSpec {
                dim: 256,
                database_noise: 0.02,
                day_noise: 0.05,
                night_noise: 0.3,
            },
            max_feature_depth: 30.0,
        }
    }

    /// Same scene without any descriptor or global-descriptor noise.
    pub fn noiseless() -> Self {
        let mut s = Self::street();
        for f in &mut s.families {
            f.database = Corruption::NONE;
            f.day = Corruption::NONE;
            f.night = Corruption::NONE;
            // exact matches have distance zero; the ratio test then only
            // drops chance mutual matches between unshared keypoints
            f.family.ratio = Some(0.8);
        }
        s.global.database_noise = 0.0;
        s.global.day_noise = 0.0;
        s.global.night_noise = 0.0;
        s
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SceneSpec = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.camera.intrinsics()?;
        if self.database.count < 2 {
            return bad("at least two database cameras required".into());
        }
        if self.planes.is_empty() {
            return bad("scene has no planes".into());
        }
        for (i, p) in self.planes.iter().enumerate() {
            if p.class as usize >= classes::NUM_CLASSES {
                return bad(format!(
                    "plane {i}: class {} is not a Cityscapes id",
                    p.class
                ));
            }
            Plane::new(p).map_err(|_| {
                Error::InvalidConfig(format!("plane {i}: degenerate axes or extent"))
            })?;
        }
        if self.families.is_empty() {
            return bad("at least one feature family required".into());
        }
        crate::features::validate_families(
            &self
                .families
                .iter()
                .map(|f| f.family.clone())
                .collect::<Vec<_>>(),
        )?;
        for f in &self.families {
            for c in [f.database, f.day, f.night] {
                if !(c.sigma >= 0.0 && c.sigma.is_finite() && (0.0..1.0).contains(&c.dropout)) {
                    return bad(format!(
                        "family `{}`: sigma must be >= 0 and dropout in [0, 1)",
                        f.family.name
                    ));
                }
            }
        }
        let g = &self.global;
        if g.dim == 0
            || [g.database_noise, g.day_noise, g.night_noise]
                .iter()
                .any(|n| !(*n >= 0.0))
        {
            return bad("global descriptor needs dim >= 1 and noise >= 0".into());
        }
        if !(self.max_feature_depth > 0.0) {
            return bad("max_feature_depth must be > 0".into());
        }
        let q = &self.queries;
        for r in [q.x_range, q.y_range, q.z_range] {
            if !(r[0] <= r[1]) {
                return bad(format!("empty query range {r:?}"));
            }
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::street()
    }
}

/// A rectangle `origin + s u + t v`, `s in [0, extent_u]`, `t in [0, extent_v]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub class: ClassId,
    pub origin: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub extent: [f64; 2],
}

impl Plane {
    fn new(p: &PlaneSpec) -> Result<Self> {
        let u = Vector3::from(p.axis_u);
        let v = Vector3::from(p.axis_v);
        if u.norm() < 1e-9 || v.norm() < 1e-9 || !(p.extent[0] > 0.0 && p.extent[1] > 0.0) {
            return Err(Error::Degenerate("plane axes"));
        }
        let u = u.normalize();
        let v = v - u * u.dot(&v);
        if v.norm() < 1e-9 {
            return Err(Error::Degenerate("parallel plane axes"));
        }
        let v = v.normalize();
        Ok(Plane {
            class: p.class,
            origin: Vector3::from(p.origin),
            u,
            v,
            normal: u.cross(&v),
            extent: p.extent,
        })
    }

    /// Ray parameter of the hit of `origin + t dir` with this rectangle.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.origin - origin)) / denom;
        if !(t > 1e-9) {
            return None;
        }
        let rel = origin + dir * t - self.origin;
        let (s, w) = (rel.dot(&self.u), rel.dot(&self.v));
        (s >= 0.0 && s <= self.extent[0] && w >= 0.0 && w <= self.extent[1]).then_some(t)
    }

    pub fn distance(&self, p: &WorldPoint) -> f64 {
        self.normal.dot(&(p.coords - self.origin)).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub position: WorldPoint,
    pub plane: usize,
    /// The only database image holding a keypoint for this anchor.
    pub host: ImageId,
    /// One unit-norm latent descriptor per family, in spec order.
    pub descriptors: Vec<Vec<f32>>,
    pub global_code: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub planes: Vec<Plane>,
    pub anchors: Vec<Anchor>,
    pub dataset: Dataset,
}

/// Nearest hit over all planes: `(z-depth, plane index)`. With the camera
/// ray scaled to unit z, the ray parameter equals the z-depth.
pub fn cast_ray(
    planes: &[Plane],
    pose: &RigidPose,
    k: &CameraIntrinsics,
    px: &ImagePoint,
) -> Option<(f64, usize)> {
    let dir = pose.rotation().inverse() * k.ray(px);
    let origin = pose.center();
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in planes.iter().enumerate() {
        if let Some(t) = p.intersect(origin, &dir) {
            if best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    best
}

/// Renders z-depth (0 where the ray escapes) and labels (sky where it
/// escapes) at every pixel center.
pub fn render(planes: &[Plane], pose: &RigidPose, k: &CameraIntrinsics) -> (DepthMap, LabelImage) {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut depth = vec![0.0; w * h];
    let mut labels = vec![classes::SKY; w * h];
    for row in 0..h {
        for col in 0..w {
            if let Some((t, i)) =
                cast_ray(planes, pose, k, &ImagePoint::new(col as f64, row as f64))
            {
                depth[row * w + col] = t;
                labels[row * w + col] = planes[i].class;
            }
        }
    }
    (
        DepthMap::new(w, h, depth).expect("rendered depth is finite"),
        LabelImage::new(w, h, labels).expect("plane classes are valid"),
    )
}

fn ypr_pose(center: Vector3<f64>, yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> RigidPose {
    // camera-to-world: yaw about y (down), then pitch about x, then roll about z
    let cam_to_world = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw_deg.to_radians())
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch_deg.to_radians())
        * Rotation3::from_axis_angle(&Vector3::z_axis(), roll_deg.to_radians());
    RigidPose::from_rotation(cam_to_world.inverse(), center)
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

/// Anchor visibility: projects inside the image, in front of the camera,
/// not occluded, within `max_depth`. Returns the exact projection and depth.
fn observe(
    scene_planes: &[Plane],
    a: &Anchor,
    pose: &RigidPose,
    k: &CameraIntrinsics,
    max_depth: f64,
) -> Option<(ImagePoint, f64)> {
    let pc = pose.to_camera(&a.position);
    if pc.z > max_depth {
        return None;
    }
    let px = project_camera(&pc, k)?;
    k.nearest_pixel(&px)?;
    let (t, plane) = cast_ray(scene_planes, pose, k, &px)?;
    (plane == a.plane && (t - pc.z).abs() <= 1e-6 * pc.z).then_some((px, pc.z))
}

struct ImageContent {
    features: BTreeMap<String, FeatureSet>,
    global: GlobalDescriptor,
    depth: DepthMap,
    labels: LabelImage,
}

fn noisy(latent: &[f32], sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    let scale = sigma / (latent.len() as f64).sqrt();
    latent
        .iter()
        .map(|&x| {
            let n: f64 = StandardNormal.sample(rng);
            (x as f64 + scale * n) as f32
        })
        .collect()
}

impl SyntheticScene {
    fn image_content(
        &self,
        id: ImageId,
        pose: &RigidPose,
        corruption: &[Corruption],
        global_noise: f64,
        host: Option<ImageId>,
    ) -> Result<ImageContent> {
        let spec = &self.spec;
        let k = &self.intrinsics;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x1000_0000 + id as u64));
        let (depth, labels) = render(&self.planes, pose, k);
        if depth.valid_count() == 0 {
            return Err(Error::InvalidConfig(format!(
                "camera {id} sees no geometry"
            )));
        }

        let mut features: BTreeMap<String, FeatureSet> = spec
            .families
            .iter()
            .map(|f| {
                (
                    f.family.name.clone(),
                    FeatureSet::new(f.family.name.clone(), f.family.dim),
                )
            })
            .collect();
        let mut pooled = vec![0.0; spec.global.dim];
        let mut visible = 0;
        for a in &self.anchors {
            let Some((px, _)) = observe(&self.planes, a, pose, k, spec.max_feature_depth) else {
                continue;
            };
            visible += 1;
            for (p, g) in pooled.iter_mut().zip(&a.global_code) {
                *p += g;
            }
            let location = match host {
                Some(h) if h != a.host => continue,
                Some(_) => {
                    let (col, row) = k.nearest_pixel(&px).expect("checked in observe");
                    ImagePoint::new(col as f64, row as f64)
                }
                None => px,
            };
            for (fi, fam) in spec.families.iter().enumerate() {
                let c = corruption[fi];
                let drop = rng.gen::<f64>() < c.dropout;
                let desc = noisy(&a.descriptors[fi], c.sigma, &mut rng);
                if !drop {
                    features
                        .get_mut(&fam.family.name)
                        .unwrap()
                        .push(location, &desc)?;
                }
            }
        }
        if visible == 0 {
            return Err(Error::InvalidConfig(format!("camera {id} sees no anchors")));
        }
        let pooled = unit(pooled);
        let noise = unit(gaussian_vec(&mut rng, spec.global.dim));
        let values = pooled
            .iter()
            .zip(&noise)
            .map(|(p, n)| (p + global_noise * n) as f32)
            .collect();
        Ok(ImageContent {
            features,
            global: GlobalDescriptor::new(id, values),
            depth,
            labels,
        })
    }

    pub fn database_poses(spec: &SceneSpec) -> Vec<RigidPose> {
        let t = &spec.database;
        let (start, end) = (Vector3::from(t.start), Vector3::from(t.end));
        (0..t.count)
            .map(|i| {
                let s = i as f64 / (t.count - 1) as f64;
                let sign = [0.0, 1.0, -1.0][i % 3];
                let c = start + (end - start) * s + Vector3::new(sign * t.lateral_offset, 0.0, 0.0);
                ypr_pose(c, sign * t.yaw_deg, 0.0, 0.0)
            })
            .collect()
    }

    fn query_poses(spec: &SceneSpec, db: &[RigidPose]) -> Vec<(ImageId, Condition, RigidPose)> {
        let q = &spec.queries;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x2000_0000));
        let range = |r: [f64; 2], rng: &mut ChaCha8Rng| {
            if r[0] < r[1] {
                rng.gen_range(r[0]..=r[1])
            } else {
                r[0]
            }
        };
        let conditions = std::iter::repeat(Condition::Day)
            .take(q.day)
            .chain(std::iter::repeat(Condition::Night).take(q.night));
        conditions
            .enumerate()
            .map(|(i, c)| {
                let pose = if q.at_database_poses {
                    db[i % db.len()]
                } else {
                    let center = Vector3::new(
                        range(q.x_range, &mut rng),
                        range(q.y_range, &mut rng),
                        range(q.z_range, &mut rng),
                    );
                    let yaw = range([-q.yaw_deg, q.yaw_deg], &mut rng);
                    let pitch = range([-q.pitch_deg, q.pitch_deg], &mut rng);
                    let roll = range([-q.roll_deg, q.roll_deg], &mut rng);
                    ypr_pose(center, yaw, pitch, roll)
                };
                (QUERY_ID_BASE + i as ImageId, c, pose)
            })
            .collect()
    }

    /// Anchors scattered over the planes, each moved onto its host's
    /// pixel-center ray. Anchors no database image observes are discarded.
    fn anchors(
        spec: &SceneSpec,
        planes: &[Plane],
        k: &CameraIntrinsics,
        db_poses: &[RigidPose],
    ) -> Vec<Anchor> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x3000_0000));
        let mut out = Vec::new();
        for (pi, (p, ps)) in planes.iter().zip(&spec.planes).enumerate() {
            let margin = |e: f64| (0.05f64).min(e / 4.0);
            for _ in 0..ps.anchors {
                let (mu, mv) = (margin(p.extent[0]), margin(p.extent[1]));
                let s = rng.gen_range(mu..=p.extent[0] - mu);
                let t = rng.gen_range(mv..=p.extent[1] - mv);
                let descriptors: Vec<Vec<f32>> = spec
                    .families
                    .iter()
                    .map(|f| {
                        unit(gaussian_vec(&mut rng, f.family.dim))
                            .into_iter()
                            .map(|x| x as f32)
                            .collect()
                    })
                    .collect();
                let global_code = gaussian_vec(&mut rng, spec.global.dim);
                let host_pick: f64 = rng.gen();

                let mut anchor = Anchor {
                    position: WorldPoint::from(p.origin + p.u * s + p.v * t),
                    plane: pi,
                    host: 0,
                    descriptors,
                    global_code,
                };
                // candidate hosts: observed, and the nearest pixel center still lands on the plane
                let hosts: Vec<(ImageId, WorldPoint)> = db_poses
                    .iter()
                    .enumerate()
                    .filter_map(|(id, pose)| {
                        let (px, _) = observe(planes, &anchor, pose, k, spec.max_feature_depth)?;
                        let (col, row) = k.nearest_pixel(&px)?;
                        let center = ImagePoint::new(col as f64, row as f64);
                        let (depth, hit) = cast_ray(planes, pose, k, &center)?;
                        (hit == pi)
                            .then(|| (id as ImageId, pose.to_world(&(k.ray(&center) * depth))))
                    })
                    .collect();
                if hosts.is_empty() {
                    continue;
                }
                let (host, position) =
                    hosts[((host_pick * hosts.len() as f64) as usize).min(hosts.len() - 1)];
                anchor.host = host;
                anchor.position = position;
                if observe(
                    planes,
                    &anchor,
                    &db_poses[host as usize],
                    k,
                    spec.max_feature_depth,
                )
                .is_some()
                {
                    out.push(anchor);
                }
            }
        }
        out
    }

    /// Generates the full dataset. Deterministic given the spec; images are
    /// generated in parallel and collected in id order.
    pub fn generate(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let intrinsics = spec.camera.intrinsics()?;
        let planes = spec
            .planes
            .iter()
            .map(Plane::new)
            .collect::<Result<Vec<_>>>()?;
        let db_poses = Self::database_poses(spec);
        let anchors = Self::anchors(spec, &planes, &intrinsics, &db_poses);
        let mut scene = SyntheticScene {
            spec: spec.clone(),
            intrinsics,
            planes,
            anchors,
            dataset: Dataset {
                families: spec.families.iter().map(|f| f.family.clone()).collect(),
                database: Vec::new(),
                queries: Vec::new(),
                ground_truth: BTreeMap::new(),
            },
        };

        let db_corruption: Vec<Corruption> = spec.families.iter().map(|f| f.database).collect();
        let database = db_poses
            .par_iter()
            .enumerate()
            .map(|(i, pose)| {
                let id = i as ImageId;
                let c = scene.image_content(
                    id,
                    pose,
                    &db_corruption,
                    spec.global.database_noise,
                    Some(id),
                )?;
                let mut rec = DatabaseImageRecord::new(id, intrinsics, *pose, c.depth, c.labels)?;
                rec.global = Some(c.global);
                rec.features = c.features;
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()?;

        let query_poses = Self::query_poses(spec, &db_poses);
        let queries = query_poses
            .par_iter()
            .map(|&(id, condition, pose)| {
                let corruption: Vec<Corruption> =
                    spec.families.iter().map(|f| f.query(condition)).collect();
                let noise = match condition {
                    Condition::Day => spec.global.day_noise,
                    Condition::Night => spec.global.night_noise,
                };
                let c = scene.image_content(id, &pose, &corruption, noise, None)?;
                Ok(QueryImage {
                    id,
                    intrinsics,
                    condition,
                    labels: c.labels,
                    global: c.global,
                    features: c.features,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        scene.dataset.database = database;
        scene.dataset.queries = queries;
        scene.dataset.ground_truth = query_poses
            .iter()
            .map(|&(id, _, pose)| (id, pose))
            .collect();
        Ok(scene)
    }

    /// Class of the rectangle closest to `p`, if any lies within `tol`.
    pub fn class_at(&self, p: &WorldPoint, tol: f64) -> Option<ClassId> {
        self.planes
            .iter()
            .map(|pl| (pl.distance(p), pl))
            .filter(|(d, pl)| {
                let rel = p.coords - pl.origin;
                let (s, w) = (rel.dot(&pl.u), rel.dot(&pl.v));
                *d <= tol
                    && s >= -tol
                    && s <= pl.extent[0] + tol
                    && w >= -tol
                    && w <= pl.extent[1] + tol
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, pl)| pl.class)
    }
}
