//! Per-query localization: retrieve, match, lift, score retrieved images
//! under temporary poses, then weighted RANSAC and refinement.

use std::collections::BTreeMap;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::Condition;
use crate::features::{
    lift_to_3d, match_family, merge_hybrid, Correspondence2D3D, FeatureFamily, FeatureSet,
};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::map::{DatabaseImageRecord, DenseMap, LabelImage};
use crate::pose::{
    estimate_temporary_pose, ransac_pnp, refine_pose_detailed, RansacConfig, Sampling,
};
use crate::retrieval::{build_index, query_top_k, GlobalDescriptor, RetrievalIndex};
use crate::scoring::{normalize_weights, score_pose, SemanticScore};
use crate::ImageId;

/// Everything known about a query image at localization time.
#[derive(Debug, Clone)]
pub struct QueryImage {
    pub id: ImageId,
    pub intrinsics: CameraIntrinsics,
    pub condition: Condition,
    pub labels: LabelImage,
    pub global: GlobalDescriptor,
    pub features: BTreeMap<String, FeatureSet>,
}

/// Serialized pose: world-to-camera unit quaternion `[w, x, y, z]` and
/// camera center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub quaternion: [f64; 4],
    pub center: [f64; 3],
}

impl From<&RigidPose> for PoseRecord {
    fn from(p: &RigidPose) -> Self {
        let q = p.quaternion();
        let c = p.center();
        PoseRecord {
            quaternion: [q.w, q.i, q.j, q.k],
            center: [c.x, c.y, c.z],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<RigidPose> {
        let [w, x, y, z] = self.quaternion;
        let q = Quaternion::new(w, x, y, z);
        if !(q.norm() - 1.0).abs().lt(&1e-6) || self.center.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose(format!("bad pose record {self:?}")));
        }
        Ok(RigidPose::from_quaternion(
            UnitQuaternion::from_quaternion(q),
            Vector3::from(self.center),
        ))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDiagnostics {
    pub image: ImageId,
    pub retrieval_distance: f64,
    /// 2D-2D matches per family.
    pub matches: BTreeMap<String, usize>,
    pub lifted: usize,
    pub invalid_depth: usize,
    pub out_of_bounds: usize,
    pub temporary_inliers: Option<usize>,
    pub consistent: usize,
    pub projected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryDiagnostics {
    pub retrieved: Vec<RetrievedDiagnostics>,
    pub correspondences: usize,
    pub inliers: usize,
    pub ransac_iterations: usize,
    pub mean_inlier_error_px: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: ImageId,
    pub condition: Condition,
    pub pose: Option<PoseRecord>,
    pub failure: Option<String>,
    pub diagnostics: QueryDiagnostics,
}

impl QueryResult {
    pub fn estimate(&self) -> Option<RigidPose> {
        self.pose.as_ref().and_then(|p| p.to_pose().ok())
    }
}

/// Machine-readable output of a localization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub queries: Vec<QueryResult>,
}

impl Estimates {
    pub fn poses(&self) -> Result<BTreeMap<ImageId, Option<RigidPose>>> {
        self.queries
            .iter()
            .map(|q| Ok((q.id, q.pose.as_ref().map(PoseRecord::to_pose).transpose()?)))
            .collect()
    }

    pub fn conditions(&self) -> BTreeMap<ImageId, Condition> {
        self.queries.iter().map(|q| (q.id, q.condition)).collect()
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Localizer<'a> {
    database: BTreeMap<ImageId, &'a DatabaseImageRecord>,
    index: RetrievalIndex,
    map: &'a DenseMap,
    families: Vec<FeatureFamily>,
    cfg: &'a PipelineConfig,
}

impl<'a> Localizer<'a> {
    /// `families` are the dataset's families; the config selects and
    /// overrides among them. Matches are lifted with the database depth maps
    /// as given, which should already be filtered
    /// ([`crate::map::filter_depth_maps`]).
    pub fn new(
        database: &'a [DatabaseImageRecord],
        map: &'a DenseMap,
        families: &[FeatureFamily],
        cfg: &'a PipelineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let families = cfg.resolve_families(families)?;
        let globals = database
            .iter()
            .map(|r| {
                r.global.clone().ok_or(Error::EmptyInput(
                    "database image without global descriptor",
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let index = build_index(&globals)?;
        for r in database {
            for f in &families {
                if !r.features.contains_key(&f.name) {
                    return Err(Error::FamilyMismatch {
                        expected: f.name.clone(),
                        found: format!("nothing in database image {}", r.id),
                    });
                }
            }
        }
        Ok(Localizer {
            database: database.iter().map(|r| (r.id, r)).collect(),
            index,
            map,
            families,
            cfg,
        })
    }

    pub fn families(&self) -> &[FeatureFamily] {
        &self.families
    }

    /// Localizes every query in parallel; output order follows input order.
    pub fn localize_all(&self, queries: &[QueryImage]) -> Result<Estimates> {
        let queries = queries
            .par_iter()
            .map(|q| self.localize(q))
            .collect::<Result<Vec<_>>>()?;
        Ok(Estimates { queries })
    }

    /// Errors are reserved for malformed input; an unlocalizable query is
    /// returned as a result with a failure reason.
    pub fn localize(&self, q: &QueryImage) -> Result<QueryResult> {
        Ok(self.run(q)?.0)
    }

    /// The refined pose at full precision (the result record stores a
    /// quaternion).
    pub fn localize_pose(&self, q: &QueryImage) -> Result<Option<RigidPose>> {
        Ok(self.run(q)?.1)
    }

    fn run(&self, q: &QueryImage) -> Result<(QueryResult, Option<RigidPose>)> {
        let cfg = self.cfg;
        let k = &q.intrinsics;
        let mut diag = QueryDiagnostics::default();
        let query_seed = mix_seed(cfg.seed, q.id as u64);

        let retrieved = query_top_k(
            &self.index,
            &q.global,
            &cfg.retrieval.for_condition(q.condition),
        )?;

        // per family, per retrieved image
        let mut per_image: Vec<Vec<Correspondence2D3D>> = vec![Vec::new(); retrieved.len()];
        let mut per_family: Vec<Vec<Correspondence2D3D>> = Vec::with_capacity(self.families.len());
        for &(id, dist) in &retrieved {
            diag.retrieved.push(RetrievedDiagnostics {
                image: id,
                retrieval_distance: dist,
                ..Default::default()
            });
        }
        for family in &self.families {
            let qf = q
                .features
                .get(&family.name)
                .ok_or_else(|| Error::FamilyMismatch {
                    expected: family.name.clone(),
                    found: format!("nothing in query {}", q.id),
                })?;
            let mut fam_corrs = Vec::new();
            for (rank, &(id, _)) in retrieved.iter().enumerate() {
                let db = self.database[&id];
                let df = &db.features[&family.name];
                let matches = match_family(qf, df, family)?;
                let (corrs, stats) = lift_to_3d(&matches, qf, df, db)?;
                let d = &mut diag.retrieved[rank];
                d.matches.insert(family.name.clone(), matches.len());
                d.lifted += stats.lifted;
                d.invalid_depth += stats.invalid_depth;
                d.out_of_bounds += stats.out_of_bounds;
                per_image[rank].extend(corrs.iter().cloned());
                fam_corrs.extend(corrs);
            }
            per_family.push(fam_corrs);
        }
        let corrs = merge_hybrid(per_family);
        diag.correspondences = corrs.len();

        let fail = |diag: QueryDiagnostics, reason: String| QueryResult {
            id: q.id,
            condition: q.condition,
            pose: None,
            failure: Some(reason),
            diagnostics: diag,
        };
        if corrs.is_empty() {
            return Ok((fail(diag, "no correspondences".into()), None));
        }

        let (corrs, sampling) = if cfg.weighting.enabled {
            let mut scores = Vec::with_capacity(retrieved.len());
            for (rank, &(id, _)) in retrieved.iter().enumerate() {
                let tmp_cfg = RansacConfig {
                    seed: mix_seed(query_seed, 1 + id as u64),
                    ..cfg.temporary_ransac
                };
                let mut score = SemanticScore::zero(id);
                if let Some(sol) = estimate_temporary_pose(&per_image[rank], k, &tmp_cfg) {
                    diag.retrieved[rank].temporary_inliers = Some(sol.inliers.len());
                    score = score_pose(id, &self.map.points, &sol.pose, k, &q.labels, &cfg.gate);
                }
                diag.retrieved[rank].consistent = score.consistent;
                diag.retrieved[rank].projected = score.projected;
                score.consistent = score.consistent.max(cfg.weighting.score_floor);
                scores.push(score);
            }
            let weighted = normalize_weights(&scores, corrs)?;
            let sampling = Sampling::from_weights(&weighted);
            (weighted, sampling)
        } else {
            (corrs, Sampling::Uniform)
        };

        let final_cfg = RansacConfig {
            seed: query_seed,
            ..cfg.ransac
        };
        let solution = match ransac_pnp(&corrs, k, &final_cfg, &sampling) {
            Ok(s) => s,
            Err(e @ (Error::TooFewCorrespondences { .. } | Error::NoConsensus { .. })) => {
                return Ok((fail(diag, e.to_string()), None));
            }
            Err(e) => return Err(e),
        };
        diag.inliers = solution.inliers.len();
        diag.ransac_iterations = solution.iterations;
        diag.mean_inlier_error_px = solution.mean_error;

        let inliers: Vec<&Correspondence2D3D> =
            solution.inliers.iter().map(|&i| &corrs[i]).collect();
        let refined = refine_pose_detailed(&solution.pose, &inliers, k, &cfg.refine);
        diag.initial_cost = refined.initial_cost;
        diag.final_cost = refined.final_cost;

        let result = QueryResult {
            id: q.id,
            condition: q.condition,
            pose: Some(PoseRecord::from(&refined.pose)),
            failure: None,
            diagnostics: diag,
        };
        Ok((result, Some(refined.pose)))
    }
}
