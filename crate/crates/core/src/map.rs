//! Dense semantic map construction.
//!
//! Database depth maps are cross-checked against their nearest neighbor
//! views, fused on a voxel grid, labeled by majority vote over the
//! contributing segmentations, stripped of unstable classes, and annotated
//! with the visibility cone of the cameras that observed each point.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::{self, ClassId, UNLABELED};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::geometry::{
    angle_between, back_project, project, CameraIntrinsics, ImagePoint, RigidPose, WorldPoint,
};
use crate::retrieval::GlobalDescriptor;
use crate::ImageId;

/// Row-major z-depth grid in meters; values `<= 0` are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidDepth(*v));
        }
        Ok(DepthMap {
            width,
            height,
            values,
        })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Valid depth at `(col, row)`.
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        if col >= self.width || row >= self.height {
            return None;
        }
        let d = self.values[row * self.width + col];
        (d > 0.0).then_some(d)
    }

    pub fn invalidate(&mut self, col: usize, row: usize) {
        self.values[row * self.width + col] = 0.0;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn validity_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&d| d > 0.0).collect()
    }
}

/// Row-major class-id grid; 255 marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    width: usize,
    height: usize,
    values: Vec<ClassId>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize, values: Vec<ClassId>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "label image {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| !classes::is_valid(v)) {
            return Err(Error::DimensionMismatch(format!("invalid class id {v}")));
        }
        Ok(LabelImage {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, label: ClassId) -> Self {
        LabelImage {
            width,
            height,
            values: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[ClassId] {
        &self.values
    }

    pub fn get(&self, col: usize, row: usize) -> ClassId {
        self.values[row * self.width + col]
    }

    /// Label at the nearest pixel to `p`, or `None` outside the image.
    pub fn at(&self, p: &ImagePoint) -> Option<ClassId> {
        crate::geometry::nearest_pixel(p, self.width, self.height).map(|(c, r)| self.get(c, r))
    }
}

/// A calibrated database image with everything the pipeline reads from it.
#[derive(Debug, Clone)]
pub struct DatabaseImageRecord {
    pub id: ImageId,
    pub intrinsics: CameraIntrinsics,
    pub pose: RigidPose,
    pub depth: DepthMap,
    pub labels: LabelImage,
    pub global: Option<GlobalDescriptor>,
    pub features: BTreeMap<String, FeatureSet>,
}

impl DatabaseImageRecord {
    pub fn new(
        id: ImageId,
        intrinsics: CameraIntrinsics,
        pose: RigidPose,
        depth: DepthMap,
        labels: LabelImage,
    ) -> Result<Self> {
        let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
        if depth.width != w || depth.height != h {
            return Err(Error::DimensionMismatch(format!(
                "image {id}: depth map is {}x{}, camera is {w}x{h}",
                depth.width, depth.height
            )));
        }
        if labels.width != w || labels.height != h {
            return Err(Error::DimensionMismatch(format!(
                "image {id}: label image is {}x{}, camera is {w}x{h}",
                labels.width, labels.height
            )));
        }
        Ok(DatabaseImageRecord {
            id,
            intrinsics,
            pose,
            depth,
            labels,
            global: None,
            features: BTreeMap::new(),
        })
    }

    pub fn center(&self) -> &Vector3<f64> {
        self.pose.center()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthFilterConfig {
    /// Relative depth tolerance.
    pub tau: f64,
    /// Minimum number of agreeing neighbor views.
    pub min_consistent_neighbors: usize,
    /// Neighbor views per image when selecting by camera-center distance.
    pub num_neighbors: usize,
    /// Explicit neighbor ids per image. When an entry exists for a target,
    /// the records passed to [`filter_depth_map`] must match it.
    #[serde(skip)]
    pub neighbor_ids: BTreeMap<ImageId, Vec<ImageId>>,
}

impl Default for DepthFilterConfig {
    fn default() -> Self {
        DepthFilterConfig {
            tau: 0.01,
            min_consistent_neighbors: 1,
            num_neighbors: 4,
            neighbor_ids: BTreeMap::new(),
        }
    }
}

impl DepthFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if self.min_consistent_neighbors < 1 {
            return Err(Error::InvalidConfig(
                "min_consistent_neighbors must be >= 1".into(),
            ));
        }
        if self.num_neighbors < 1 {
            return Err(Error::InvalidConfig("num_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

/// The `m` records with camera centers closest to each record, excluding
/// itself. Ties are broken by image id.
pub fn select_neighbors(
    records: &[DatabaseImageRecord],
    m: usize,
) -> BTreeMap<ImageId, Vec<ImageId>> {
    records
        .iter()
        .map(|r| {
            let mut others: Vec<(f64, ImageId)> = records
                .iter()
                .filter(|o| o.id != r.id)
                .map(|o| ((o.center() - r.center()).norm(), o.id))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            (r.id, others.into_iter().take(m).map(|(_, id)| id).collect())
        })
        .collect()
}

/// Number of neighbor views confirming depth `depth` at `(col, row)` of
/// `target`.
fn consistent_views(
    target: &DatabaseImageRecord,
    neighbors: &[&DatabaseImageRecord],
    col: usize,
    row: usize,
    depth: f64,
    tau: f64,
) -> Result<usize> {
    let x = back_project(
        &ImagePoint::new(col as f64, row as f64),
        depth,
        &target.pose,
        &target.intrinsics,
    )?;
    let mut count = 0;
    for n in neighbors {
        let p_cam = n.pose.to_camera(&x);
        let d_r = p_cam.z;
        let Some(q) = crate::geometry::project_camera(&p_cam, &n.intrinsics) else {
            continue;
        };
        let Some((nc, nr)) = n.intrinsics.nearest_pixel(&q) else {
            continue;
        };
        let Some(d_n) = n.depth.get(nc, nr) else {
            continue;
        };
        if (d_r - d_n).abs() / d_n < tau {
            count += 1;
        }
    }
    Ok(count)
}

/// Keeps a depth pixel only when at least `min_consistent_neighbors`
/// neighbor views agree with it within relative tolerance `tau`.
pub fn filter_depth_map(
    target: &DatabaseImageRecord,
    neighbors: &[&DatabaseImageRecord],
    cfg: &DepthFilterConfig,
) -> Result<DepthMap> {
    cfg.validate()?;
    if neighbors.is_empty() {
        return Err(Error::EmptyInput(
            "depth filtering needs at least one neighbor view",
        ));
    }
    if let Some(expected) = cfg.neighbor_ids.get(&target.id) {
        let mut a: Vec<ImageId> = expected.clone();
        let mut b: Vec<ImageId> = neighbors.iter().map(|n| n.id).collect();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::DimensionMismatch(format!(
                "image {}: configured neighbors {a:?}, provided {b:?}",
                target.id
            )));
        }
    }
    let mut out = target.depth.clone();
    let w = target.depth.width;
    for row in 0..target.depth.height {
        for col in 0..w {
            let Some(d) = target.depth.get(col, row) else {
                continue;
            };
            if consistent_views(target, neighbors, col, row, d, cfg.tau)?
                < cfg.min_consistent_neighbors
            {
                out.invalidate(col, row);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPoint {
    pub position: WorldPoint,
    /// Sorted, unique ids of images with a pixel in this voxel.
    pub sources: Vec<ImageId>,
}

pub(crate) type VoxelKey = (i64, i64, i64);

pub(crate) fn voxel_key(p: &WorldPoint, voxel_size: f64) -> VoxelKey {
    (
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    )
}

/// Merges every valid depth pixel into one point per occupied voxel, placed
/// at the centroid of its members. Members are accumulated in (image id,
/// pixel index) order and the output is sorted by voxel, so the result does
/// not depend on the order of `records`.
pub fn fuse_depth_maps(
    records: &[DatabaseImageRecord],
    voxel_size: f64,
) -> Result<Vec<FusedPoint>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("fusion needs at least one image"));
    }
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "voxel size must be > 0, got {voxel_size}"
        )));
    }
    let mut order: Vec<&DatabaseImageRecord> = records.iter().collect();
    order.sort_by_key(|r| r.id);

    struct Acc {
        sum: Vector3<f64>,
        count: usize,
        sources: Vec<ImageId>,
    }
    let mut voxels: BTreeMap<VoxelKey, Acc> = BTreeMap::new();
    for r in order {
        let w = r.depth.width;
        for (idx, &d) in r.depth.values.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            let px = ImagePoint::new((idx % w) as f64, (idx / w) as f64);
            let x = back_project(&px, d, &r.pose, &r.intrinsics)?;
            let acc = voxels
                .entry(voxel_key(&x, voxel_size))
                .or_insert_with(|| Acc {
                    sum: Vector3::zeros(),
                    count: 0,
                    sources: Vec::new(),
                });
            acc.sum += x.coords;
            acc.count += 1;
            if acc.sources.last() != Some(&r.id) {
                acc.sources.push(r.id);
            }
        }
    }
    Ok(voxels
        .into_values()
        .map(|a| FusedPoint {
            position: WorldPoint::from(a.sum / a.count as f64),
            sources: a.sources,
        })
        .collect())
}

/// Majority label over the nearest-pixel labels of `point` in each
/// contributing image. Unlabeled and out-of-bounds lookups do not vote; ties
/// go to the smallest class id; no votes yields 255.
pub fn vote_semantic_label(point: &WorldPoint, contributing: &[&DatabaseImageRecord]) -> ClassId {
    let mut votes = [0usize; classes::NUM_CLASSES];
    for r in contributing {
        let Some(p) = project(point, &r.pose, &r.intrinsics) else {
            continue;
        };
        match r.labels.at(&p) {
            Some(l) if l != UNLABELED && (l as usize) < classes::NUM_CLASSES => {
                votes[l as usize] += 1
            }
            _ => {}
        }
    }
    let (best, &count) =
        votes.iter().enumerate().fold(
            (0, &0),
            |acc, (i, c)| if *c > *acc.1 { (i, c) } else { acc },
        );
    if count == 0 {
        UNLABELED
    } else {
        best as ClassId
    }
}

/// Distance range and angular spread of the cameras that observed a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityCone {
    pub d_min: f64,
    pub d_max: f64,
    /// Extreme point-to-camera directions (unit, world frame).
    pub v_l: Vector3<f64>,
    pub v_u: Vector3<f64>,
    /// Normalized mean of `v_l` and `v_u`.
    pub v_m: Vector3<f64>,
    /// Angle between `v_l` and `v_u`, radians.
    pub theta: f64,
}

const UNIT_TOL: f64 = 1e-9;

impl VisibilityCone {
    /// Cone spanned by two extreme directions; `theta` and `v_m` are derived.
    pub fn from_extremes(
        d_min: f64,
        d_max: f64,
        v_l: Vector3<f64>,
        v_u: Vector3<f64>,
    ) -> Result<Self> {
        let theta = angle_between(&v_l, &v_u);
        Self::from_parts(d_min, d_max, v_l, v_u, theta, UNIT_TOL)
    }

    /// Cone with an explicitly stored `theta`, checked against the directions
    /// within `tol` (used when loading single-precision maps).
    pub fn from_parts(
        d_min: f64,
        d_max: f64,
        v_l: Vector3<f64>,
        v_u: Vector3<f64>,
        theta: f64,
        tol: f64,
    ) -> Result<Self> {
        if !(d_min > 0.0 && d_min <= d_max && d_max.is_finite()) {
            return Err(Error::Degenerate(
                "visibility cone needs 0 < d_min <= d_max",
            ));
        }
        if (v_l.norm() - 1.0).abs() > tol || (v_u.norm() - 1.0).abs() > tol {
            return Err(Error::Degenerate(
                "visibility cone directions must be unit vectors",
            ));
        }
        if !(0.0..=std::f64::consts::PI + tol).contains(&theta)
            || (theta - angle_between(&v_l, &v_u)).abs() > tol
        {
            return Err(Error::Degenerate(
                "visibility cone angle inconsistent with its directions",
            ));
        }
        let sum = v_l + v_u;
        let v_m = if sum.norm() > 1e-12 {
            sum.normalize()
        } else {
            // opposite extremes: any direction orthogonal to both
            let helper = if v_l.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            v_l.cross(&helper).normalize()
        };
        Ok(VisibilityCone {
            d_min,
            d_max,
            v_l,
            v_u,
            v_m,
            theta,
        })
    }
}

/// Visibility cone of `point` from camera centers. The extreme pair is the
/// pair of directions with the largest angle (first such pair in index
/// order); a single camera gives `theta = 0`.
pub fn cone_from_centers(point: &WorldPoint, centers: &[Vector3<f64>]) -> Result<VisibilityCone> {
    if centers.is_empty() {
        return Err(Error::EmptyInput(
            "visibility cone needs at least one camera",
        ));
    }
    let mut dirs = Vec::with_capacity(centers.len());
    let (mut d_min, mut d_max) = (f64::INFINITY, 0f64);
    for c in centers {
        let v = c - point.coords;
        let r = v.norm();
        if r < 1e-9 {
            return Err(Error::Degenerate("point coincides with a camera center"));
        }
        d_min = d_min.min(r);
        d_max = d_max.max(r);
        dirs.push(v / r);
    }
    let (mut li, mut ui, mut best) = (0, 0, -1.0);
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let a = angle_between(&dirs[i], &dirs[j]);
            if a > best {
                (li, ui, best) = (i, j, a);
            }
        }
    }
    VisibilityCone::from_extremes(d_min, d_max, dirs[li], dirs[ui])
}

pub fn compute_visibility_cone(
    point: &WorldPoint,
    contributing: &[&DatabaseImageRecord],
) -> Result<VisibilityCone> {
    let centers: Vec<Vector3<f64>> = contributing.iter().map(|r| *r.center()).collect();
    cone_from_centers(point, &centers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensePoint {
    pub position: WorldPoint,
    pub label: ClassId,
    pub cone: VisibilityCone,
    /// Number of contributing database images.
    pub support: u16,
}

/// Points whose label is neither unlabeled nor in `unstable`, in order.
pub fn remove_unstable_classes(
    points: &[DensePoint],
    unstable: &BTreeSet<ClassId>,
) -> Vec<DensePoint> {
    points
        .iter()
        .filter(|p| p.label != UNLABELED && !unstable.contains(&p.label))
        .copied()
        .collect()
}

pub fn default_unstable() -> BTreeSet<ClassId> {
    classes::DEFAULT_UNSTABLE.into_iter().collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenseMap {
    pub points: Vec<DensePoint>,
}

impl DenseMap {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub depth_filter: DepthFilterConfig,
    pub voxel_size: f64,
    pub unstable_classes: BTreeSet<ClassId>,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            depth_filter: DepthFilterConfig::default(),
            voxel_size: 0.05,
            unstable_classes: default_unstable(),
        }
    }
}

/// Point counts after each map-building stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub depth_pixels_raw: usize,
    pub depth_pixels_filtered: usize,
    pub fused_points: usize,
    pub labeled_points: usize,
    pub stable_points: usize,
}

/// Filters every depth map in place against its neighbor views: the `m`
/// nearest by camera center unless `cfg.neighbor_ids` names them. All
/// filters read the unfiltered maps.
pub fn filter_depth_maps(
    records: &mut [DatabaseImageRecord],
    cfg: &DepthFilterConfig,
) -> Result<()> {
    cfg.validate()?;
    let mut table = select_neighbors(records, cfg.num_neighbors);
    for (id, ids) in &cfg.neighbor_ids {
        table.insert(*id, ids.clone());
    }
    let by_id: BTreeMap<ImageId, usize> =
        records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    if by_id.len() != records.len() {
        return Err(Error::DimensionMismatch(
            "duplicate database image ids".into(),
        ));
    }
    if records.len() < 2 {
        log::warn!("single database image: depth filtering skipped");
        return Ok(());
    }
    let filtered: Vec<DepthMap> = {
        let view: &[DatabaseImageRecord] = records;
        view.par_iter()
            .map(|r| {
                let neighbors = table[&r.id]
                    .iter()
                    .map(|id| {
                        by_id.get(id).map(|&i| &view[i]).ok_or_else(|| {
                            Error::DimensionMismatch(format!("unknown neighbor id {id}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                filter_depth_map(r, &neighbors, cfg)
            })
            .collect::<Result<_>>()?
    };
    for (r, d) in records.iter_mut().zip(filtered) {
        r.depth = d;
    }
    Ok(())
}

/// Filters every depth map against its neighbors (in place), then fuses,
/// labels, removes unstable classes and attaches visibility cones.
pub fn build_map(
    records: &mut [DatabaseImageRecord],
    cfg: &MapConfig,
) -> Result<(DenseMap, BuildStats)> {
    if records.is_empty() {
        return Err(Error::EmptyInput("map building needs database images"));
    }
    let mut stats = BuildStats {
        depth_pixels_raw: records.iter().map(|r| r.depth.valid_count()).sum(),
        ..Default::default()
    };

    filter_depth_maps(records, &cfg.depth_filter)?;
    stats.depth_pixels_filtered = records.iter().map(|r| r.depth.valid_count()).sum();

    let fused = fuse_depth_maps(records, cfg.voxel_size)?;
    stats.fused_points = fused.len();

    let by_id: BTreeMap<ImageId, usize> =
        records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    let view: &[DatabaseImageRecord] = records;
    let labeled: Vec<DensePoint> = fused
        .par_iter()
        .map(|f| {
            let contributing: Vec<&DatabaseImageRecord> =
                f.sources.iter().map(|id| &view[by_id[id]]).collect();
            let label = vote_semantic_label(&f.position, &contributing);
            if label == UNLABELED {
                return Ok(None);
            }
            Ok(Some(DensePoint {
                position: f.position,
                label,
                cone: compute_visibility_cone(&f.position, &contributing)?,
                support: f.sources.len().min(u16::MAX as usize) as u16,
            }))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    stats.labeled_points = labeled.len();

    let points = remove_unstable_classes(&labeled, &cfg.unstable_classes);
    stats.stable_points = points.len();
    Ok((DenseMap { points }, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::{BUILDING, CAR, ROAD};
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k5() -> CameraIntrinsics {
        CameraIntrinsics::new(5.0, 5.0, 2.0, 2.0, 5, 5).unwrap()
    }

    /// Camera at `center` looking along +z at the plane z = `plane_z`.
    fn plane_record(id: ImageId, center: Vector3<f64>, plane_z: f64) -> DatabaseImageRecord {
        let k = k5();
        let depth = vec![plane_z - center.z; 25];
        DatabaseImageRecord::new(
            id,
            k,
            RigidPose::from_rotation(Rotation3::identity(), center),
            DepthMap::new(5, 5, depth).unwrap(),
            LabelImage::filled(5, 5, BUILDING),
        )
        .unwrap()
    }

    /// Per-pixel recomputation of the consistency test, independent of
    /// `filter_depth_map`'s loop.
    fn oracle_mask(
        t: &DatabaseImageRecord,
        ns: &[&DatabaseImageRecord],
        tau: f64,
        n_min: usize,
    ) -> Vec<bool> {
        let w = t.depth.width();
        (0..t.depth.values().len())
            .map(|i| {
                let d = t.depth.values()[i];
                if d <= 0.0 {
                    return false;
                }
                let (c, r) = ((i % w) as f64, (i / w) as f64);
                let k = &t.intrinsics;
                let cam = Vector3::new((c - k.cx) / k.fx * d, (r - k.cy) / k.fy * d, d);
                let world = t.pose.rotation().transpose() * cam + t.pose.center();
                let agree = ns
                    .iter()
                    .filter(|n| {
                        let p = n.pose.rotation() * (world - n.pose.center());
                        if p.z <= 0.0 {
                            return false;
                        }
                        let u = n.intrinsics.fx * p.x / p.z + n.intrinsics.cx;
                        let v = n.intrinsics.fy * p.y / p.z + n.intrinsics.cy;
                        let (uc, vr) = ((u + 0.5).floor(), (v + 0.5).floor());
                        if uc < 0.0
                            || vr < 0.0
                            || uc >= n.depth.width() as f64
                            || vr >= n.depth.height() as f64
                        {
                            return false;
                        }
                        let dn = n.depth.values()[vr as usize * n.depth.width() + uc as usize];
                        dn > 0.0 && ((p.z - dn) / dn).abs() < tau
                    })
                    .count();
                agree >= n_min
            })
            .collect()
    }

    #[test]
    fn consistency_ratio_example() {
        let (d_r, d_n): (f64, f64) = (1.0, 1.005);
        assert!(((d_r - d_n) / d_n).abs() < 0.01);
    }

    #[test]
    fn corrupted_pixel_removed() {
        let a = plane_record(0, Vector3::new(0.0, 0.0, 0.0), 10.0);
        let b = plane_record(1, Vector3::new(0.3, 0.0, 0.0), 10.0);
        let mut corrupted = a.clone();
        let idx = 2 * 5 + 2;
        let mut values = corrupted.depth.values().to_vec();
        values[idx] *= 1.5;
        corrupted.depth = DepthMap::new(5, 5, values).unwrap();
        let cfg = DepthFilterConfig::default();
        let out = filter_depth_map(&corrupted, &[&b], &cfg).unwrap();
        let oracle = oracle_mask(&corrupted, &[&b], cfg.tau, cfg.min_consistent_neighbors);
        assert_eq!(out.validity_mask(), oracle);
        // pixels reprojecting outside the neighbor fail too; the corrupted one
        // must be among the removed and every in-view pixel must survive
        assert!(!out.validity_mask()[idx]);
        let kept_before = filter_depth_map(&a, &[&b], &cfg).unwrap().validity_mask();
        for i in 0..25 {
            assert_eq!(
                out.validity_mask()[i],
                kept_before[i] && i != idx,
                "pixel {i}"
            );
        }
    }

    #[test]
    fn neighbor_without_depth_does_not_count() {
        let a = plane_record(0, Vector3::zeros(), 10.0);
        let mut b = plane_record(1, Vector3::new(0.1, 0.0, 0.0), 10.0);
        b.depth = DepthMap::invalid(5, 5);
        let out = filter_depth_map(&a, &[&b], &DepthFilterConfig::default()).unwrap();
        assert_eq!(out.valid_count(), 0);
    }

    #[test]
    fn filter_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = plane_record(0, Vector3::zeros(), 10.0);
        let mut b = plane_record(1, Vector3::new(0.2, 0.1, 0.0), 10.0);
        let noisy: Vec<f64> = b
            .depth
            .values()
            .iter()
            .map(|d| d * rng.gen_range(0.9..1.1))
            .collect();
        b.depth = DepthMap::new(5, 5, noisy).unwrap();
        let loose = DepthFilterConfig {
            tau: f64::INFINITY,
            ..Default::default()
        };
        let out = filter_depth_map(&a, &[&b], &loose).unwrap();
        // every pixel that lands in b passes; with an infinite tau nothing else can fail
        assert_eq!(
            out.validity_mask(),
            oracle_mask(&a, &[&b], f64::INFINITY, 1)
        );
        let strict = DepthFilterConfig {
            min_consistent_neighbors: 2,
            ..Default::default()
        };
        assert_eq!(
            filter_depth_map(&a, &[&b], &strict).unwrap().valid_count(),
            0
        );
        assert!(filter_depth_map(&a, &[], &DepthFilterConfig::default()).is_err());
    }

    #[test]
    fn infinite_tau_with_full_overlap_is_identity() {
        let a = plane_record(0, Vector3::zeros(), 10.0);
        // identical neighbor: every pixel reprojects onto itself
        let b = plane_record(1, Vector3::zeros(), 10.0);
        let loose = DepthFilterConfig {
            tau: f64::INFINITY,
            ..Default::default()
        };
        assert_eq!(filter_depth_map(&a, &[&b], &loose).unwrap(), a.depth);
    }

    #[test]
    fn configured_neighbors_must_match() {
        let a = plane_record(0, Vector3::zeros(), 10.0);
        let b = plane_record(1, Vector3::new(0.1, 0.0, 0.0), 10.0);
        let mut cfg = DepthFilterConfig::default();
        cfg.neighbor_ids.insert(0, vec![2]);
        assert!(matches!(
            filter_depth_map(&a, &[&b], &cfg),
            Err(Error::DimensionMismatch(_))
        ));
        cfg.neighbor_ids.insert(0, vec![1]);
        assert!(filter_depth_map(&a, &[&b], &cfg).is_ok());
    }

    #[test]
    fn fuse_single_pixel() {
        let mut r = plane_record(3, Vector3::zeros(), 10.0);
        let mut values = vec![0.0; 25];
        values[7] = 4.0;
        r.depth = DepthMap::new(5, 5, values).unwrap();
        let fused = fuse_depth_maps(&[r.clone()], 0.05).unwrap();
        assert_eq!(fused.len(), 1);
        let expected =
            back_project(&ImagePoint::new(2.0, 1.0), 4.0, &r.pose, &r.intrinsics).unwrap();
        assert!((fused[0].position - expected).norm() < 1e-12);
        assert_eq!(fused[0].sources, vec![3]);
        assert!(fuse_depth_maps(&[], 0.05).is_err());
        assert!(fuse_depth_maps(&[r], 0.0).is_err());
    }

    #[test]
    fn fuse_two_views_of_same_point() {
        let mut a = plane_record(0, Vector3::zeros(), 10.0);
        let mut b = plane_record(1, Vector3::new(0.0, 0.0, 2.0), 10.0);
        let mut va = vec![0.0; 25];
        va[12] = 10.0;
        let mut vb = vec![0.0; 25];
        vb[12] = 8.0;
        a.depth = DepthMap::new(5, 5, va).unwrap();
        b.depth = DepthMap::new(5, 5, vb).unwrap();
        let fused = fuse_depth_maps(&[b, a], 0.05).unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused[0].sources, vec![0, 1]);
    }

    #[test]
    fn fuse_order_independent_and_monotone() {
        let recs: Vec<_> = (0..4)
            .map(|i| {
                plane_record(
                    i,
                    Vector3::new(0.37 * i as f64, -0.11 * i as f64, 0.0),
                    7.0 + i as f64,
                )
            })
            .collect();
        let fwd = fuse_depth_maps(&recs, 0.3).unwrap();
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(fwd, fuse_depth_maps(&rev, 0.3).unwrap());
        let mut prev = usize::MAX;
        for v in [0.01, 0.05, 0.1, 0.3, 1.0, 3.0, 10.0] {
            let n = fuse_depth_maps(&recs, v).unwrap().len();
            assert!(n <= prev);
            prev = n;
        }
    }

    fn labeled(label: ClassId) -> DatabaseImageRecord {
        let mut r = plane_record(0, Vector3::zeros(), 10.0);
        r.labels = LabelImage::filled(5, 5, label);
        r
    }

    #[test]
    fn voting_rules() {
        let x = WorldPoint::new(0.0, 0.0, 10.0);
        let (b1, b2, c) = (labeled(BUILDING), labeled(BUILDING), labeled(CAR));
        assert_eq!(vote_semantic_label(&x, &[&b1, &b2, &c]), BUILDING);
        let road = labeled(ROAD);
        assert_eq!(vote_semantic_label(&x, &[&road, &b1]), ROAD.min(BUILDING));
        assert_eq!(vote_semantic_label(&x, &[&b1, &road]), ROAD.min(BUILDING));
        let far = WorldPoint::new(100.0, 0.0, 10.0);
        assert_eq!(vote_semantic_label(&far, &[&b1, &c]), UNLABELED);
        let unl = labeled(UNLABELED);
        assert_eq!(vote_semantic_label(&x, &[&unl, &c]), CAR);
    }

    fn dense(label: ClassId) -> DensePoint {
        DensePoint {
            position: WorldPoint::origin(),
            label,
            cone: cone_from_centers(&WorldPoint::origin(), &[Vector3::new(0.0, 0.0, -5.0)])
                .unwrap(),
            support: 1,
        }
    }

    #[test]
    fn unstable_removal() {
        assert_eq!(
            default_unstable(),
            [11, 12, 13, 14, 15, 16, 17, 18, 10]
                .into_iter()
                .collect::<BTreeSet<_>>()
        );
        let only_building: Vec<_> = (0..5).map(|_| dense(BUILDING)).collect();
        let car: BTreeSet<_> = [CAR].into_iter().collect();
        assert_eq!(remove_unstable_classes(&only_building, &car), only_building);
        let mixed: Vec<_> = (0..10)
            .map(|i| dense(if i % 3 == 0 { CAR } else { ROAD }))
            .collect();
        let survivors = remove_unstable_classes(&mixed, &car);
        let expected: Vec<_> = mixed.iter().filter(|p| p.label != CAR).copied().collect();
        assert_eq!(survivors.len(), 6);
        assert_eq!(survivors, expected);
        let mut with_void = only_building.clone();
        with_void.push(dense(UNLABELED));
        let once = remove_unstable_classes(&with_void, &BTreeSet::new());
        assert_eq!(once, only_building);
        assert_eq!(remove_unstable_classes(&once, &BTreeSet::new()), once);
    }

    #[test]
    fn cone_examples() {
        let x = WorldPoint::origin();
        let c = cone_from_centers(&x, &[Vector3::new(0.0, 0.0, -5.0)]).unwrap();
        assert_eq!((c.d_min, c.d_max, c.theta), (5.0, 5.0, 0.0));
        assert!((c.v_m - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);

        let s = 5.0 / 2f64.sqrt();
        let c =
            cone_from_centers(&x, &[Vector3::new(s, 0.0, -s), Vector3::new(-s, 0.0, -s)]).unwrap();
        assert!((c.theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((c.v_m - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!(cone_from_centers(&x, &[Vector3::zeros()]).is_err());
    }

    #[test]
    fn cone_extremes_match_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let x = WorldPoint::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let centers: Vec<_> = (0..8)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-20.0..-2.0),
                    )
                })
                .collect();
            let cone = cone_from_centers(&x, &centers).unwrap();
            let unit: Vec<_> = centers.iter().map(|c| (c - x.coords).normalize()).collect();
            let mut best = 0.0f64;
            for a in &unit {
                for b in &unit {
                    best = best.max(a.dot(b).clamp(-1.0, 1.0).acos());
                }
            }
            assert!((cone.theta - best).abs() < 1e-7);
            assert!((cone.v_l.norm() - 1.0).abs() < 1e-9 && (cone.v_u.norm() - 1.0).abs() < 1e-9);
            assert!((cone.v_m.norm() - 1.0).abs() < 1e-9);
            let dists: Vec<f64> = centers.iter().map(|c| (c - x.coords).norm()).collect();
            assert_eq!(
                cone.d_min,
                dists.iter().cloned().fold(f64::INFINITY, f64::min)
            );
            assert_eq!(cone.d_max, dists.iter().cloned().fold(0.0, f64::max));
        }
    }
}
