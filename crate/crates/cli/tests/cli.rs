use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semloc::classes;
use semloc::features::FeatureSet;
use semloc::geometry::back_project;
use semloc::io::{read_map, Dataset};
use semloc::map::{filter_depth_maps, DepthFilterConfig};
use semloc::pipeline::Estimates;
use semloc::synth::SceneSpec;
use semloc::ImagePoint;

fn semloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_spec(dir: &Path, spec: &SceneSpec) -> PathBuf {
    let path = dir.join("spec.toml");
    std::fs::write(&path, spec.to_toml()).unwrap();
    path
}

fn small_noiseless() -> SceneSpec {
    let mut spec = SceneSpec::noiseless();
    spec.queries.day = 4;
    spec.queries.night = 2;
    spec
}

fn synth_and_map(dir: &Path, spec: &SceneSpec) -> (PathBuf, PathBuf) {
    let spec_path = write_spec(dir, spec);
    let ds = dir.join("ds");
    let map = dir.join("map.bin");
    let o = semloc(&["synth", "--spec", p(&spec_path), "--out", p(&ds)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = semloc(&["build-map", "--dataset", p(&ds), "--out", p(&map)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (ds, map)
}

#[test]
fn full_run_localizes_noiseless_queries() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, map) = synth_and_map(dir.path(), &small_noiseless());
    let est = dir.path().join("est.json");
    let o = semloc(&[
        "localize",
        "--dataset",
        p(&ds),
        "--map",
        p(&map),
        "--out",
        p(&est),
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());

    let report = dir.path().join("report");
    let gt = ds.join("ground_truth.txt");
    let o = semloc(&[
        "evaluate",
        "--estimates",
        p(&est),
        "--ground-truth",
        p(&gt),
        "--out",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(report.with_extension("txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("day: 100.0 / 100.0 / 100.0"), "{text}");
    assert!(
        lines[1].starts_with("night: 100.0 / 100.0 / 100.0"),
        "{text}"
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);

    // same seed, same bytes
    let again = dir.path().join("est2.json");
    let o = semloc(&[
        "localize",
        "--dataset",
        p(&ds),
        "--map",
        p(&map),
        "--out",
        p(&again),
        "--seed",
        "5",
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&est).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn build_map_is_deterministic_and_logs_stage_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_noiseless();
    spec.database.count = 6;
    spec.database.end = [0.0, 0.0, 10.0];
    let (ds, map) = synth_and_map(dir.path(), &spec);
    let map2 = dir.path().join("map2.bin");
    let o = semloc(&[
        "--threads",
        "1",
        "build-map",
        "--dataset",
        p(&ds),
        "--out",
        p(&map2),
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&map).unwrap(), std::fs::read(&map2).unwrap());

    let log = std::fs::read_to_string(dir.path().join("map.bin.log")).unwrap();
    let count = |key: &str| -> usize {
        let line = log.lines().find(|l| l.starts_with(key)).unwrap();
        line.rsplit(' ').next().unwrap().parse().unwrap()
    };

    // oracle: distinct 5 cm voxels over the filtered depth pixels
    let mut data = Dataset::load(&ds).unwrap();
    filter_depth_maps(&mut data.database, &DepthFilterConfig::default()).unwrap();
    let mut voxels = BTreeSet::new();
    for r in &data.database {
        let w = r.depth.width();
        for (i, &d) in r.depth.values().iter().enumerate() {
            if d > 0.0 {
                let x = back_project(
                    &ImagePoint::new((i % w) as f64, (i / w) as f64),
                    d,
                    &r.pose,
                    &r.intrinsics,
                )
                .unwrap();
                voxels.insert([
                    (x.x / 0.05).floor() as i64,
                    (x.y / 0.05).floor() as i64,
                    (x.z / 0.05).floor() as i64,
                ]);
            }
        }
    }
    assert_eq!(count("fused points"), voxels.len());
    let stored = read_map(&map).unwrap();
    assert_eq!(count("after removing unstable classes"), stored.len());
    assert!(stored
        .points
        .iter()
        .all(|pt| !classes::DEFAULT_UNSTABLE.contains(&pt.label)));
}

#[test]
fn unstable_only_scene_gives_empty_map_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_noiseless();
    spec.database.count = 4;
    for plane in &mut spec.planes {
        plane.class = classes::CAR;
    }
    let spec_path = write_spec(dir.path(), &spec);
    let ds = dir.path().join("ds");
    assert!(semloc(&["synth", "--spec", p(&spec_path), "--out", p(&ds)])
        .status
        .success());
    let map = dir.path().join("map.bin");
    let o = semloc(&["build-map", "--dataset", p(&ds), "--out", p(&map)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("map is empty"));
    assert!(std::fs::read_to_string(dir.path().join("map.bin.log"))
        .unwrap()
        .contains("warning: map is empty"));
    assert!(read_map(&map).unwrap().is_empty());
}

#[test]
fn query_without_matches_reports_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, map) = synth_and_map(dir.path(), &small_noiseless());
    let mut data = Dataset::load(&ds).unwrap();
    let q = &mut data.queries[0];
    for (name, set) in q.features.iter_mut() {
        *set = FeatureSet::new(name.clone(), set.dim());
    }
    let blank_id = q.id;
    let ds2 = dir.path().join("ds2");
    data.store(&ds2).unwrap();

    let est = dir.path().join("est.json");
    let o = semloc(&[
        "localize",
        "--dataset",
        p(&ds2),
        "--map",
        p(&map),
        "--out",
        p(&est),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e: Estimates = serde_json::from_str(&std::fs::read_to_string(&est).unwrap()).unwrap();
    let r = e.queries.iter().find(|r| r.id == blank_id).unwrap();
    assert_eq!(r.failure.as_deref(), Some("no correspondences"));
    assert!(r.pose.is_none());
    assert!(e
        .queries
        .iter()
        .filter(|r| r.id != blank_id)
        .all(|r| r.pose.is_some()));
}

#[test]
fn exit_codes() {
    assert_eq!(semloc(&[]).status.code(), Some(1));
    assert_eq!(semloc(&["--help"]).status.code(), Some(0));
    assert_eq!(semloc(&["--version"]).status.code(), Some(0));
    assert_eq!(
        semloc(&["localize", "--dataset", "x"]).status.code(),
        Some(1)
    );

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = dir.path().join("m.bin");
    assert_eq!(
        semloc(&["build-map", "--dataset", p(&missing), "--out", p(&out)])
            .status
            .code(),
        Some(2)
    );

    let (ds, map) = synth_and_map(dir.path(), &small_noiseless());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[ransac]\nthreshold = 2.0\n").unwrap();
    let o = semloc(&[
        "build-map",
        "--dataset",
        p(&ds),
        "--config",
        p(&cfg),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));

    // truncated map: data error naming the file and offset
    let bytes = std::fs::read(&map).unwrap();
    let broken = dir.path().join("broken.bin");
    std::fs::write(&broken, &bytes[..bytes.len() - 7]).unwrap();
    let est = dir.path().join("est.json");
    let o = semloc(&[
        "localize",
        "--dataset",
        p(&ds),
        "--map",
        p(&broken),
        "--out",
        p(&est),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("broken.bin") && err.contains("offset"),
        "{err}"
    );

    // estimates for a query the ground truth does not know
    let o = semloc(&[
        "localize",
        "--dataset",
        p(&ds),
        "--map",
        p(&map),
        "--out",
        p(&est),
    ]);
    assert!(o.status.success());
    let gt = dir.path().join("gt.txt");
    let full = std::fs::read_to_string(ds.join("ground_truth.txt")).unwrap();
    let kept: Vec<&str> = full.lines().filter(|l| !l.starts_with("10000 ")).collect();
    std::fs::write(&gt, kept.join("\n")).unwrap();
    let report = dir.path().join("r");
    let o = semloc(&[
        "evaluate",
        "--estimates",
        p(&est),
        "--ground-truth",
        p(&gt),
        "--out",
        p(&report),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
