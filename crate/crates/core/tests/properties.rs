use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

use semloc::eval::{day_buckets, RecallReport, ThresholdBucket};
use semloc::features::{match_family, FeatureFamily, FeatureSet};
use semloc::geometry::{back_project, project, rotation_error_deg, PoseError};
use semloc::io;
use semloc::map::{
    cone_from_centers, fuse_depth_maps, remove_unstable_classes, vote_semantic_label,
    DatabaseImageRecord,
};
use semloc::pose::{
    ransac_pnp, refine_pose_detailed, reprojection_cost, RansacConfig, RefineConfig, Sampling,
};
use semloc::retrieval::{build_index, query_top_k};
use semloc::scoring::{gate_visible, normalize_weights, SemanticScore, VisibilityGateConfig};
use semloc::{
    CameraIntrinsics, Correspondence2D3D, DensePoint, DepthMap, GlobalDescriptor, ImagePoint,
    LabelImage, RetrievalConfig, RigidPose, WorldPoint,
};

fn k() -> CameraIntrinsics {
    CameraIntrinsics::new(400.0, 380.0, 319.5, 239.5, 640, 480).unwrap()
}

fn rotation() -> impl Strategy<Value = Rotation3<f64>> {
    (-3.1..3.1f64, -3.1..3.1f64, -3.1..3.1f64)
        .prop_map(|(a, b, c)| Rotation3::new(Vector3::new(a, b, c) / 1.8))
}

fn pose() -> impl Strategy<Value = RigidPose> {
    (rotation(), -20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64)
        .prop_map(|(r, x, y, z)| RigidPose::from_rotation(r, Vector3::new(x, y, z)))
}

fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, dim)
        .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn feature_set(name: &str, dim: usize, max: usize) -> impl Strategy<Value = FeatureSet> {
    let name = name.to_string();
    prop::collection::vec(unit_vec(dim), 0..max).prop_map(move |descs| {
        let mut s = FeatureSet::new(name.clone(), dim);
        for (i, d) in descs.iter().enumerate() {
            s.push(ImagePoint::new(i as f64, 0.0), d).unwrap();
        }
        s
    })
}

proptest! {
    #[test]
    fn back_project_then_project_is_identity(
        pose in pose(), u in 0.0..640.0f64, v in 0.0..480.0f64, d in 0.01..500.0f64,
    ) {
        let px = ImagePoint::new(u, v);
        let x = back_project(&px, d, &pose, &k()).unwrap();
        let p = project(&x, &pose, &k()).unwrap();
        prop_assert!((p - px).norm() < 1e-9);
    }

    #[test]
    fn rotation_error_is_a_metric(a in rotation(), b in rotation(), c in rotation()) {
        let ab = rotation_error_deg(&a, &b);
        prop_assert!((ab - rotation_error_deg(&b, &a)).abs() < 1e-9);
        prop_assert!(rotation_error_deg(&a, &c) <= ab + rotation_error_deg(&b, &c) + 1e-6);
        prop_assert!((0.0..=180.0).contains(&ab));
    }

    #[test]
    fn retrieval_ranking_properties(
        db in prop::collection::vec(unit_vec(8), 1..30),
        q in unit_vec(8),
        k in 1usize..40,
        scale in 0.001..1000.0f32,
    ) {
        let descs: Vec<GlobalDescriptor> =
            db.into_iter().enumerate().map(|(i, v)| GlobalDescriptor::new(i as u32, v)).collect();
        let index = build_index(&descs).unwrap();
        let query = GlobalDescriptor::new(999, q.clone());
        let all = query_top_k(&index, &query, &RetrievalConfig { top_k: usize::MAX }).unwrap();
        prop_assert_eq!(all.len(), descs.len());
        prop_assert!(all.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert!(all.iter().all(|(_, d)| (0.0..=2.0 + 1e-12).contains(d)));
        let top = query_top_k(&index, &query, &RetrievalConfig { top_k: k }).unwrap();
        prop_assert_eq!(&all[..top.len()], &top[..]);
        let scaled = GlobalDescriptor::new(999, q.iter().map(|x| x * scale).collect());
        let ids = |r: &[(u32, f64)]| r.iter().map(|x| x.0).collect::<Vec<_>>();
        let rescaled = query_top_k(&index, &scaled, &RetrievalConfig { top_k: usize::MAX }).unwrap();
        prop_assert_eq!(ids(&all), ids(&rescaled));
    }

    #[test]
    fn mutual_matching_is_injective_and_symmetric(
        a in feature_set("f", 4, 25), b in feature_set("f", 4, 25), ratio in prop::option::of(0.5..1.0f64),
    ) {
        let fam = FeatureFamily { name: "f".into(), dim: 4, use_mutual_nn: true, ratio: None };
        let ab = match_family(&a, &b, &fam).unwrap();
        let q: BTreeSet<usize> = ab.iter().map(|m| m.query_index).collect();
        let d: BTreeSet<usize> = ab.iter().map(|m| m.db_index).collect();
        prop_assert_eq!(q.len(), ab.len());
        prop_assert_eq!(d.len(), ab.len());
        let ba = match_family(&b, &a, &fam).unwrap();
        let fwd: BTreeSet<(usize, usize)> = ab.iter().map(|m| (m.query_index, m.db_index)).collect();
        let back: BTreeSet<(usize, usize)> = ba.iter().map(|m| (m.db_index, m.query_index)).collect();
        prop_assert_eq!(fwd, back);

        // without the mutual check only query indices are unique
        let one_way = FeatureFamily { use_mutual_nn: false, ratio, ..fam };
        let m = match_family(&a, &b, &one_way).unwrap();
        let q: BTreeSet<usize> = m.iter().map(|m| m.query_index).collect();
        prop_assert_eq!(q.len(), m.len());
    }

    #[test]
    fn weights_sum_to_one_and_ignore_scale(
        scores in prop::collection::vec(0usize..1000, 1..6),
        sources in prop::collection::vec(0u32..6, 1..60),
        factor in 1usize..50,
    ) {
        let scores: Vec<SemanticScore> = scores
            .iter()
            .enumerate()
            .map(|(i, &c)| SemanticScore { image: i as u32, consistent: c, projected: c })
            .collect();
        let corrs: Vec<Correspondence2D3D> = sources
            .iter()
            .map(|&s| Correspondence2D3D::new(ImagePoint::origin(), WorldPoint::origin(), s % scores.len() as u32))
            .collect();
        let w = normalize_weights(&scores, corrs.clone()).unwrap();
        let total: f64 = w.iter().map(|c| c.weight).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let scaled: Vec<SemanticScore> =
            scores.iter().map(|s| SemanticScore { consistent: s.consistent * factor, ..*s }).collect();
        let w2 = normalize_weights(&scaled, corrs).unwrap();
        for (x, y) in w.iter().zip(&w2) {
            prop_assert!((x.weight - y.weight).abs() < 1e-15);
        }
    }

    #[test]
    fn unstable_removal_is_idempotent(labels in prop::collection::vec(prop_oneof![0u8..19, Just(255u8)], 0..40),
                                      unstable in prop::collection::btree_set(0u8..19, 0..10)) {
        let points: Vec<DensePoint> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let x = WorldPoint::new(i as f64, 0.0, 0.0);
                DensePoint {
                    position: x,
                    label: l,
                    cone: cone_from_centers(&x, &[Vector3::new(i as f64, 0.0, -3.0)]).unwrap(),
                    support: 1,
                }
            })
            .collect();
        let once = remove_unstable_classes(&points, &unstable);
        prop_assert_eq!(remove_unstable_classes(&once, &unstable), once.clone());
        let labeled = labels.iter().filter(|&&l| l != 255).count();
        prop_assert_eq!(remove_unstable_classes(&points, &BTreeSet::new()).len(), labeled);
        prop_assert!(once.iter().all(|p| !unstable.contains(&p.label) && p.label != 255));
    }

    #[test]
    fn cones_satisfy_invariants(
        x in (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64),
        offsets in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64), 1..6),
        repeat in any::<bool>(),
    ) {
        let x = WorldPoint::new(x.0, x.1, x.2);
        let mut centers: Vec<Vector3<f64>> = offsets
            .iter()
            .map(|o| x.coords + Vector3::new(o.0, o.1, o.2))
            .filter(|c| (c - x.coords).norm() > 1e-3)
            .collect();
        prop_assume!(!centers.is_empty());
        if repeat {
            centers = vec![centers[0]; centers.len()];
        }
        let c = cone_from_centers(&x, &centers).unwrap();
        prop_assert!(c.d_min > 0.0 && c.d_min <= c.d_max);
        for v in [c.v_l, c.v_u, c.v_m] {
            prop_assert!((v.norm() - 1.0).abs() < 1e-9);
        }
        prop_assert!((0.0..=std::f64::consts::PI).contains(&c.theta));
        prop_assert!((c.theta - c.v_l.angle(&c.v_u)).abs() < 1e-9);
        if repeat {
            prop_assert_eq!(c.theta, 0.0);
        }
    }

    #[test]
    fn gate_is_monotone_in_margins(
        pose in pose(),
        dm in 1.0..2.0f64, extra_d in 0.0..1.0f64,
        am in 0.0..0.5f64, extra_a in 0.0..0.5f64,
        pts in prop::collection::vec(((-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64), (-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64)), 1..30),
    ) {
        let points: Vec<DensePoint> = pts
            .iter()
            .filter_map(|(p, c)| {
                let x = WorldPoint::new(p.0, p.1, p.2);
                let cone = cone_from_centers(&x, &[Vector3::new(c.0, c.1, c.2), Vector3::new(c.1, c.2, c.0)]).ok()?;
                Some(DensePoint { position: x, label: 2, cone, support: 2 })
            })
            .collect();
        let tight = gate_visible(&points, &pose, &VisibilityGateConfig { distance_margin: dm, angle_margin: am });
        let loose = gate_visible(
            &points,
            &pose,
            &VisibilityGateConfig { distance_margin: dm + extra_d, angle_margin: am + extra_a },
        );
        prop_assert!(tight.len() <= loose.len());
        prop_assert!(tight.iter().all(|p| loose.iter().any(|q| std::ptr::eq(*p, *q))));
    }

    #[test]
    fn recall_is_monotone_over_nested_buckets(
        errors in prop::collection::vec(prop::option::of((0.0..8.0f64, 0.0..15.0f64)), 1..50),
    ) {
        let errors: BTreeMap<u32, Option<PoseError>> = errors
            .iter()
            .enumerate()
            .map(|(i, e)| (i as u32, e.map(|(p, o)| PoseError { position_error: p, orientation_error: o })))
            .collect();
        let r = RecallReport::from_errors("day", errors.clone(), &day_buckets()).unwrap();
        prop_assert!(r.percentages.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.percentages.iter().all(|p| (0.0..=100.0).contains(p)));
        let json = serde_json::to_string(&r).unwrap();
        let back: RecallReport = serde_json::from_str(&json).unwrap();
        prop_assert!(back.percentages.iter().zip(&r.percentages).all(|(a, b)| (a - b).abs() < 1e-12));
        prop_assert_eq!(back.total, r.total);
        let single = [ThresholdBucket::new(1.0, 1.0)];
        prop_assert!(RecallReport::from_errors("x", errors, &single).is_ok());
    }

    #[test]
    fn depth_and_label_round_trip(
        w in 1usize..12, h in 1usize..12,
        vals in prop::collection::vec(prop_oneof![Just(0.0f32), 0.0f32..1e4, -5.0f32..0.0], 144),
        labels in prop::collection::vec(prop_oneof![0u8..19, Just(255u8)], 144),
    ) {
        let d = DepthMap::new(w, h, vals[..w * h].iter().map(|&v| v as f64).collect()).unwrap();
        prop_assert_eq!(io::decode_depth(&io::encode_depth(&d), Path::new("p")).unwrap(), d);
        let l = LabelImage::new(w, h, labels[..w * h].to_vec()).unwrap();
        prop_assert_eq!(io::decode_labels(&io::encode_labels(&l), Path::new("p")).unwrap(), l);
    }
}

fn plane_record(
    id: u32,
    center: Vector3<f64>,
    depth: &[f64],
    labels: &[u8],
) -> DatabaseImageRecord {
    let k = CameraIntrinsics::new(4.0, 4.0, 1.5, 1.5, 4, 4).unwrap();
    DatabaseImageRecord::new(
        id,
        k,
        RigidPose::from_rotation(Rotation3::identity(), center),
        DepthMap::new(4, 4, depth.to_vec()).unwrap(),
        LabelImage::new(4, 4, labels.to_vec()).unwrap(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_count_non_increasing_in_voxel_size(
        depths in prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), 1.0..3.0f64], 16), 1..4),
        small in 0.01..0.2f64, factor in 1.0..4.0f64,
    ) {
        let labels = [2u8; 16];
        let recs: Vec<DatabaseImageRecord> = depths
            .iter()
            .enumerate()
            .map(|(i, d)| plane_record(i as u32, Vector3::new(i as f64 * 0.1, 0.0, 0.0), d, &labels))
            .collect();
        let fine = fuse_depth_maps(&recs, small).unwrap().len();
        let coarse = fuse_depth_maps(&recs, small * factor).unwrap().len();
        prop_assert!(coarse <= fine);
    }

    #[test]
    fn voting_ignores_contributor_order(
        labels in prop::collection::vec(prop::collection::vec(prop_oneof![0u8..4, Just(255u8)], 16), 1..6),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let recs: Vec<DatabaseImageRecord> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| plane_record(i as u32, Vector3::new(0.0, 0.0, -(i as f64)), &[1.0; 16], l))
            .collect();
        let x = WorldPoint::new(0.1, -0.2, 2.0);
        let refs: Vec<&DatabaseImageRecord> = recs.iter().collect();
        let mut shuffled = refs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(vote_semantic_label(&x, &refs), vote_semantic_label(&x, &shuffled));
    }

    #[test]
    fn refinement_never_increases_cost_and_ransac_is_deterministic(
        gt in pose(), seed in any::<u64>(), noise in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 30),
        pixels in prop::collection::vec((0.0..640.0f64, 0.0..480.0f64, 2.0..30.0f64), 30),
        start in pose(),
    ) {
        let corrs: Vec<Correspondence2D3D> = pixels
            .iter()
            .zip(&noise)
            .map(|(&(u, v, d), &(nu, nv))| {
                let x = back_project(&ImagePoint::new(u, v), d, &gt, &k()).unwrap();
                Correspondence2D3D::new(ImagePoint::new(u + nu, v + nv), x, 0)
            })
            .collect();
        let refs: Vec<&Correspondence2D3D> = corrs.iter().collect();
        let report = refine_pose_detailed(&start, &refs, &k(), &RefineConfig::default());
        prop_assert!(report.final_cost <= report.initial_cost);
        prop_assert!(report.cost_history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(reprojection_cost(&refs, &report.pose, &k()), report.final_cost);

        let cfg = RansacConfig { seed, max_iterations: 200, ..Default::default() };
        let a = ransac_pnp(&corrs, &k(), &cfg, &Sampling::Uniform);
        let b = ransac_pnp(&corrs, &k(), &cfg, &Sampling::Uniform);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.pose.rotation_matrix(), b.pose.rotation_matrix());
                prop_assert_eq!(a.pose.center(), b.pose.center());
                prop_assert_eq!(a.inliers, b.inliers);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "runs disagree"),
        }
    }
}
