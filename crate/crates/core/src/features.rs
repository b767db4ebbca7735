//! Per-family descriptor matching and lifting of 2D-2D matches to 2D-3D
//! correspondences through database depth maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{back_project, ImagePoint, WorldPoint};
use crate::map::DatabaseImageRecord;
use crate::ImageId;

/// A named keypoint/descriptor type together with its matching rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFamily {
    pub name: String,
    pub dim: usize,
    #[serde(default = "default_true")]
    pub use_mutual_nn: bool,
    /// Lowe ratio threshold in `(0, 1]`; `None` disables the test.
    #[serde(default)]
    pub ratio: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl FeatureFamily {
    /// Handcrafted gradient-histogram family: mutual NN, no ratio test.
    pub fn sift_like(dim: usize) -> Self {
        FeatureFamily {
            name: "sift".into(),
            dim,
            use_mutual_nn: true,
            ratio: None,
        }
    }

    /// Learned dense family matched without a ratio test.
    pub fn r2d2_like(dim: usize) -> Self {
        FeatureFamily {
            name: "r2d2".into(),
            dim,
            use_mutual_nn: true,
            ratio: None,
        }
    }

    /// Learned family matched with a 0.9 ratio test.
    pub fn superpoint_like(dim: usize) -> Self {
        FeatureFamily {
            name: "superpoint".into(),
            dim,
            use_mutual_nn: true,
            ratio: Some(0.9),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "family `{}` has zero descriptor dimension",
                self.name
            )));
        }
        if let Some(r) = self.ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "family `{}` ratio {r} outside (0, 1]",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

pub fn validate_families(families: &[FeatureFamily]) -> Result<()> {
    if families.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one feature family required".into(),
        ));
    }
    for (i, f) in families.iter().enumerate() {
        f.validate()?;
        if families[..i].iter().any(|g| g.name == f.name) {
            return Err(Error::InvalidConfig(format!(
                "duplicate family `{}`",
                f.name
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub location: ImagePoint,
    pub descriptor: Vec<f32>,
}

/// All keypoints of one family in one image. Descriptors are stored
/// contiguously, `dim` values per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    family: String,
    dim: usize,
    locations: Vec<ImagePoint>,
    descriptors: Vec<f32>,
}

impl FeatureSet {
    pub fn new(family: impl Into<String>, dim: usize) -> Self {
        FeatureSet {
            family: family.into(),
            dim,
            locations: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    pub fn from_keypoints(
        family: impl Into<String>,
        dim: usize,
        keypoints: impl IntoIterator<Item = Keypoint>,
    ) -> Result<Self> {
        let mut set = FeatureSet::new(family, dim);
        for kp in keypoints {
            set.push(kp.location, &kp.descriptor)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, location: ImagePoint, descriptor: &[f32]) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "family `{}` expects {}-d descriptors, got {}",
                self.family,
                self.dim,
                descriptor.len()
            )));
        }
        self.locations.push(location);
        self.descriptors.extend_from_slice(descriptor);
        Ok(())
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn location(&self, i: usize) -> ImagePoint {
        self.locations[i]
    }

    pub fn locations(&self) -> &[ImagePoint] {
        &self.locations
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keypoint(&self, i: usize) -> Keypoint {
        Keypoint {
            location: self.locations[i],
            descriptor: self.descriptor(i).to_vec(),
        }
    }

    fn check_family(&self, family: &FeatureFamily) -> Result<()> {
        if self.family != family.name {
            return Err(Error::FamilyMismatch {
                expected: family.name.clone(),
                found: self.family.clone(),
            });
        }
        if self.dim != family.dim {
            return Err(Error::DimensionMismatch(format!(
                "family `{}` is {}-d, feature set is {}-d",
                family.name, family.dim, self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match2D2D {
    pub query_index: usize,
    pub db_index: usize,
    pub family: String,
    /// L2 descriptor distance.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D3D {
    pub query_pixel: ImagePoint,
    pub world_point: WorldPoint,
    pub source: ImageId,
    pub family: String,
    pub weight: f64,
}

impl Correspondence2D3D {
    pub fn new(query_pixel: ImagePoint, world_point: WorldPoint, source: ImageId) -> Self {
        Correspondence2D3D {
            query_pixel,
            world_point,
            source,
            family: String::new(),
            weight: 1.0,
        }
    }
}

pub(crate) fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-neighbor descriptor matching for one family.
///
/// Ties in distance go to the lower index. The ratio test, when configured,
/// runs before the mutual check and is skipped when the database side has
/// fewer than two keypoints.
pub fn match_family(
    query: &FeatureSet,
    db: &FeatureSet,
    family: &FeatureFamily,
) -> Result<Vec<Match2D2D>> {
    query.check_family(family)?;
    db.check_family(family)?;
    let (nq, nd) = (query.len(), db.len());
    if nq == 0 || nd == 0 {
        return Ok(Vec::new());
    }

    let mut dist = vec![0f32; nq * nd];
    for i in 0..nq {
        let qd = query.descriptor(i);
        for j in 0..nd {
            dist[i * nd + j] = squared_l2(qd, db.descriptor(j));
        }
    }

    // best query for every database column, for the mutual check
    let mut col_best = vec![0usize; nd];
    if family.use_mutual_nn {
        for (j, best) in col_best.iter_mut().enumerate() {
            let mut bi = 0;
            for i in 1..nq {
                if dist[i * nd + j] < dist[bi * nd + j] {
                    bi = i;
                }
            }
            *best = bi;
        }
    }

    let mut out = Vec::new();
    for i in 0..nq {
        let row = &dist[i * nd..(i + 1) * nd];
        let mut best = 0;
        for j in 1..nd {
            if row[j] < row[best] {
                best = j;
            }
        }
        let d1 = row[best];
        if let Some(ratio) = family.ratio {
            if nd >= 2 {
                let d2 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != best)
                    .map(|(_, &d)| d)
                    .fold(f32::INFINITY, f32::min);
                if (d1 as f64).sqrt() >= ratio * (d2 as f64).sqrt() {
                    continue;
                }
            }
        }
        if family.use_mutual_nn && col_best[best] != i {
            continue;
        }
        out.push(Match2D2D {
            query_index: i,
            db_index: best,
            family: family.name.clone(),
            distance: (d1 as f64).sqrt(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftStats {
    pub lifted: usize,
    pub invalid_depth: usize,
    pub out_of_bounds: usize,
}

/// Turns 2D-2D matches into 2D-3D correspondences using the database image's
/// depth map. The database keypoint's nearest pixel center is back-projected
/// with the depth stored there; matches over invalid depth or outside the
/// image are dropped and counted.
pub fn lift_to_3d(
    matches: &[Match2D2D],
    query: &FeatureSet,
    db_features: &FeatureSet,
    db: &DatabaseImageRecord,
) -> Result<(Vec<Correspondence2D3D>, LiftStats)> {
    let mut stats = LiftStats::default();
    let mut out = Vec::with_capacity(matches.len());
    for m in matches {
        if m.query_index >= query.len() || m.db_index >= db_features.len() {
            return Err(Error::DimensionMismatch(format!(
                "match ({}, {}) indexes past feature sets of size ({}, {})",
                m.query_index,
                m.db_index,
                query.len(),
                db_features.len()
            )));
        }
        let kp = db_features.location(m.db_index);
        let Some((col, row)) = db.intrinsics.nearest_pixel(&kp) else {
            stats.out_of_bounds += 1;
            continue;
        };
        let Some(depth) = db.depth.get(col, row) else {
            stats.invalid_depth += 1;
            continue;
        };
        let center = ImagePoint::new(col as f64, row as f64);
        let world_point = back_project(&center, depth, &db.pose, &db.intrinsics)?;
        out.push(Correspondence2D3D {
            query_pixel: query.location(m.query_index),
            world_point,
            source: db.id,
            family: m.family.clone(),
            weight: 1.0,
        });
        stats.lifted += 1;
    }
    Ok((out, stats))
}

/// Concatenates per-family correspondence lists without deduplication.
pub fn merge_hybrid(per_family: Vec<Vec<Correspondence2D3D>>) -> Vec<Correspondence2D3D> {
    per_family.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, CameraIntrinsics, RigidPose};
    use crate::map::{DepthMap, LabelImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut impl Rng, family: &str, n: usize, dim: usize) -> FeatureSet {
        let mut s = FeatureSet::new(family, dim);
        for _ in 0..n {
            let d: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            s.push(
                ImagePoint::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)),
                &d,
            )
            .unwrap();
        }
        s
    }

    /// Double-loop reference with the same rules, written independently of
    /// the distance-matrix path.
    fn oracle(q: &FeatureSet, d: &FeatureSet, fam: &FeatureFamily) -> Vec<(usize, usize)> {
        let dist = |i: usize, j: usize| -> f64 {
            q.descriptor(i)
                .iter()
                .zip(d.descriptor(j))
                .map(|(a, b)| ((a - b) * (a - b)) as f64)
                .sum::<f64>()
                .sqrt()
        };
        let mut out = Vec::new();
        for i in 0..q.len() {
            let mut order: Vec<usize> = (0..d.len()).collect();
            order.sort_by(|&a, &b| dist(i, a).partial_cmp(&dist(i, b)).unwrap().then(a.cmp(&b)));
            let j = order[0];
            if let Some(r) = fam.ratio {
                if order.len() >= 2 && dist(i, j) / dist(i, order[1]) >= r {
                    continue;
                }
            }
            if fam.use_mutual_nn {
                let back = (0..q.len())
                    .min_by(|&a, &b| dist(a, j).partial_cmp(&dist(b, j)).unwrap().then(a.cmp(&b)))
                    .unwrap();
                if back != i {
                    continue;
                }
            }
            out.push((i, j));
        }
        out
    }

    #[test]
    fn identical_sets_match_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_set(&mut rng, "sift", 30, 16);
        let fam = FeatureFamily::sift_like(16);
        let m = match_family(&s, &s, &fam).unwrap();
        assert_eq!(m.len(), 30);
        assert!(m
            .iter()
            .all(|m| m.query_index == m.db_index && m.distance == 0.0));
    }

    #[test]
    fn equidistant_rejected_by_ratio() {
        let fam = FeatureFamily {
            name: "sp".into(),
            dim: 2,
            use_mutual_nn: false,
            ratio: Some(0.9),
        };
        let q = FeatureSet::from_keypoints(
            "sp",
            2,
            [Keypoint {
                location: ImagePoint::origin(),
                descriptor: vec![0.0, 0.0],
            }],
        )
        .unwrap();
        let d = FeatureSet::from_keypoints(
            "sp",
            2,
            [
                Keypoint {
                    location: ImagePoint::origin(),
                    descriptor: vec![1.0, 0.0],
                },
                Keypoint {
                    location: ImagePoint::origin(),
                    descriptor: vec![0.0, -1.0],
                },
            ],
        )
        .unwrap();
        assert!(match_family(&q, &d, &fam).unwrap().is_empty());
        // one candidate: ratio test skipped
        let d1 = FeatureSet::from_keypoints("sp", 2, [d.keypoint(0)]).unwrap();
        assert_eq!(match_family(&q, &d1, &fam).unwrap().len(), 1);
    }

    #[test]
    fn random_sets_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (mutual, ratio) in [
            (true, None),
            (true, Some(0.9)),
            (false, Some(0.8)),
            (false, None),
        ] {
            let fam = FeatureFamily {
                name: "f".into(),
                dim: 8,
                use_mutual_nn: mutual,
                ratio,
            };
            for _ in 0..5 {
                let q = random_set(&mut rng, "f", 50, 8);
                let d = random_set(&mut rng, "f", 50, 8);
                let got: Vec<_> = match_family(&q, &d, &fam)
                    .unwrap()
                    .iter()
                    .map(|m| (m.query_index, m.db_index))
                    .collect();
                assert_eq!(got, oracle(&q, &d, &fam), "mutual={mutual} ratio={ratio:?}");
            }
        }
    }

    #[test]
    fn mutual_matching_is_symmetric_and_injective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fam = FeatureFamily::r2d2_like(8);
        let q = random_set(&mut rng, "r2d2", 40, 8);
        let d = random_set(&mut rng, "r2d2", 60, 8);
        let fwd = match_family(&q, &d, &fam).unwrap();
        let bwd = match_family(&d, &q, &fam).unwrap();
        let mut a: Vec<_> = fwd.iter().map(|m| (m.query_index, m.db_index)).collect();
        let mut b: Vec<_> = bwd.iter().map(|m| (m.db_index, m.query_index)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        let mut dbs: Vec<_> = a.iter().map(|p| p.1).collect();
        dbs.sort();
        dbs.dedup();
        assert_eq!(dbs.len(), a.len());
    }

    #[test]
    fn family_mismatch_is_error() {
        let q = FeatureSet::new("sift", 4);
        let d = FeatureSet::new("r2d2", 4);
        assert!(matches!(
            match_family(&q, &d, &FeatureFamily::sift_like(4)),
            Err(Error::FamilyMismatch { .. })
        ));
        assert!(matches!(
            match_family(&q, &q, &FeatureFamily::sift_like(8)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    fn flat_record(depth: f64) -> DatabaseImageRecord {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let mut values = vec![depth; 100 * 100];
        values[10 * 100 + 10] = 0.0;
        DatabaseImageRecord::new(
            4,
            k,
            RigidPose::identity(),
            DepthMap::new(100, 100, values).unwrap(),
            LabelImage::filled(100, 100, crate::classes::BUILDING),
        )
        .unwrap()
    }

    #[test]
    fn lift_examples() {
        let db = flat_record(5.0);
        let mut qs = FeatureSet::new("f", 1);
        let mut ds = FeatureSet::new("f", 1);
        qs.push(ImagePoint::new(1.0, 2.0), &[0.0]).unwrap();
        ds.push(ImagePoint::new(70.2, 49.9), &[0.0]).unwrap();
        qs.push(ImagePoint::new(3.0, 4.0), &[0.0]).unwrap();
        ds.push(ImagePoint::new(10.0, 10.0), &[0.0]).unwrap();
        qs.push(ImagePoint::new(3.0, 4.0), &[0.0]).unwrap();
        ds.push(ImagePoint::new(-3.0, 10.0), &[0.0]).unwrap();
        let matches: Vec<_> = (0..3)
            .map(|i| Match2D2D {
                query_index: i,
                db_index: i,
                family: "f".into(),
                distance: 0.0,
            })
            .collect();
        let (c, stats) = lift_to_3d(&matches, &qs, &ds, &db).unwrap();
        assert_eq!(
            stats,
            LiftStats {
                lifted: 1,
                invalid_depth: 1,
                out_of_bounds: 1
            }
        );
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].world_point, WorldPoint::new(1.0, 0.0, 5.0));
        assert_eq!(c[0].query_pixel, ImagePoint::new(1.0, 2.0));
        assert_eq!(c[0].source, 4);
        assert_eq!(c[0].weight, 1.0);
    }

    #[test]
    fn lifted_points_reproject_near_keypoint() {
        let db = flat_record(5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ds = FeatureSet::new("f", 1);
        for _ in 0..200 {
            ds.push(
                ImagePoint::new(rng.gen_range(0.0..99.0), rng.gen_range(0.0..99.0)),
                &[0.0],
            )
            .unwrap();
        }
        let matches: Vec<_> = (0..200)
            .map(|i| Match2D2D {
                query_index: i,
                db_index: i,
                family: "f".into(),
                distance: 0.0,
            })
            .collect();
        let (c, _) = lift_to_3d(&matches, &ds, &ds, &db).unwrap();
        for corr in &c {
            // plane z = 5 in front of an identity camera
            assert!((corr.world_point.z - 5.0).abs() < 1e-12);
            let r = project(&corr.world_point, &db.pose, &db.intrinsics).unwrap();
            let kp = corr.query_pixel;
            assert!((r.x - kp.x).abs() <= 0.5 + 1e-6 && (r.y - kp.y).abs() <= 0.5 + 1e-6);
        }
    }

    #[test]
    fn merge_keeps_everything() {
        let c = |x: f64, fam: &str| Correspondence2D3D {
            family: fam.into(),
            ..Correspondence2D3D::new(ImagePoint::new(x, x), WorldPoint::origin(), 0)
        };
        let a: Vec<_> = (0..10).map(|i| c(i as f64, "a")).collect();
        let b: Vec<_> = (0..15).map(|i| c(i as f64, "b")).collect();
        assert_eq!(merge_hybrid(vec![Vec::new(), b.clone()]), b);
        let merged = merge_hybrid(vec![a, b]);
        assert_eq!(merged.len(), 25);
        assert_eq!(merged.iter().filter(|c| c.query_pixel.x == 0.0).count(), 2);
    }

    #[test]
    fn family_validation() {
        assert!(
            validate_families(&[FeatureFamily::sift_like(128), FeatureFamily::r2d2_like(128)])
                .is_ok()
        );
        assert!(
            validate_families(&[FeatureFamily::sift_like(128), FeatureFamily::sift_like(64)])
                .is_err()
        );
        assert!(validate_families(&[]).is_err());
        let mut f = FeatureFamily::superpoint_like(256);
        f.ratio = Some(1.5);
        assert!(f.validate().is_err());
    }
}
