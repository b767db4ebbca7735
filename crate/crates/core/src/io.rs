//! On-disk formats. Every multi-byte value is little-endian and every binary
//! file starts with a four-byte magic whose last character is the version.
//!
//! | file            | layout                                                        |
//! |-----------------|---------------------------------------------------------------|
//! | depth map       | `DMP1` u32 w, u32 h, f32 x w*h (row-major, <= 0 invalid)      |
//! | label image     | `LBL1` u32 w, u32 h, u8 x w*h (255 unlabeled)                 |
//! | features        | `FEA1` u32 len + family name, u32 n, u32 dim, n x (f32 x, f32 y, f32 x dim) |
//! | global desc.    | `GDS1` u32 dim, f32 x dim                                     |
//! | dense map       | `MAP1` u32 n, n x (f32 x3 pos, u8 label, f32 x3 v_l, f32 x3 v_u, f32 theta, f32 d_min, f32 d_max, u16 support) |
//!
//! Cameras are text, one line per image:
//! `id fx fy cx cy width height qw qx qy qz cx_w cy_w cz_w`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::classes;
use crate::error::{Error, Result};
use crate::eval::Condition;
use crate::features::{validate_families, FeatureFamily, FeatureSet};
use crate::geometry::{CameraIntrinsics, ImagePoint, RigidPose, WorldPoint};
use crate::map::{DatabaseImageRecord, DenseMap, DensePoint, DepthMap, LabelImage, VisibilityCone};
use crate::pipeline::QueryImage;
use crate::retrieval::GlobalDescriptor;
use crate::ImageId;

pub const DEPTH_MAGIC: &[u8; 4] = b"DMP1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";
pub const FEATURE_MAGIC: &[u8; 4] = b"FEA1";
pub const GLOBAL_MAGIC: &[u8; 4] = b"GDS1";
pub const MAP_MAGIC: &[u8; 4] = b"MAP1";

/// Tolerance when re-validating single-precision visibility cones.
const CONE_LOAD_TOL: f64 = 1e-4;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader {
            bytes,
            pos: 0,
            path,
        }
    }

    fn error_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos,
                format!(
                    "truncated: need {n} bytes for {what}, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(self.error_at(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn finite_f32(&mut self, what: &str) -> Result<f32> {
        let at = self.pos;
        let v = self.f32(what)?;
        if !v.is_finite() {
            return Err(self.error_at(at, format!("non-finite {what}")));
        }
        Ok(v)
    }

    fn vec3(&mut self, what: &str) -> Result<Vector3<f64>> {
        Ok(Vector3::new(
            self.finite_f32(what)? as f64,
            self.finite_f32(what)? as f64,
            self.finite_f32(what)? as f64,
        ))
    }

    /// Guards against absurd counts before allocating.
    fn expect_remaining(&self, n: usize, what: &str) -> Result<()> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos,
                format!(
                    "truncated: {what} needs {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error_at(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes a whole file at once, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * d.values().len());
    out.extend_from_slice(DEPTH_MAGIC);
    put_u32(&mut out, d.width());
    put_u32(&mut out, d.height());
    for &v in d.values() {
        put_f32(&mut out, v);
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let mut r = Reader::new(bytes, path);
    r.magic(DEPTH_MAGIC)?;
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    r.expect_remaining(w.saturating_mul(h).saturating_mul(4), "depth values")?;
    let mut values = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        values.push(r.finite_f32("depth")? as f64);
    }
    r.finish()?;
    DepthMap::new(w, h, values)
}

pub fn encode_labels(l: &LabelImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + l.values().len());
    out.extend_from_slice(LABEL_MAGIC);
    put_u32(&mut out, l.width());
    put_u32(&mut out, l.height());
    out.extend_from_slice(l.values());
    out
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<LabelImage> {
    let mut r = Reader::new(bytes, path);
    r.magic(LABEL_MAGIC)?;
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let start = r.pos;
    let values = r.take(w.saturating_mul(h), "labels")?.to_vec();
    if let Some(i) = values.iter().position(|&v| !classes::is_valid(v)) {
        return Err(r.error_at(start + i, format!("invalid class id {}", values[i])));
    }
    r.finish()?;
    LabelImage::new(w, h, values)
}

pub fn encode_features(f: &FeatureSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + f.family().len() + f.len() * 4 * (2 + f.dim()));
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, f.family().len());
    out.extend_from_slice(f.family().as_bytes());
    put_u32(&mut out, f.len());
    put_u32(&mut out, f.dim());
    for i in 0..f.len() {
        let p = f.location(i);
        put_f32(&mut out, p.x);
        put_f32(&mut out, p.y);
        for &d in f.descriptor(i) {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes, path);
    r.magic(FEATURE_MAGIC)?;
    let len = r.u32("family name length")? as usize;
    let at = r.pos;
    let name = std::str::from_utf8(r.take(len, "family name")?)
        .map_err(|_| r.error_at(at, "family name is not UTF-8"))?
        .to_string();
    let n = r.u32("keypoint count")? as usize;
    let dim = r.u32("descriptor dim")? as usize;
    r.expect_remaining(
        n.saturating_mul(dim.saturating_add(2)).saturating_mul(4),
        "keypoint records",
    )?;
    let mut set = FeatureSet::new(name, dim);
    let mut desc = vec![0f32; dim];
    for _ in 0..n {
        let x = r.finite_f32("keypoint x")? as f64;
        let y = r.finite_f32("keypoint y")? as f64;
        for d in desc.iter_mut() {
            *d = r.finite_f32("descriptor")?;
        }
        set.push(ImagePoint::new(x, y), &desc)?;
    }
    r.finish()?;
    Ok(set)
}

pub fn encode_global(g: &GlobalDescriptor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * g.dim());
    out.extend_from_slice(GLOBAL_MAGIC);
    put_u32(&mut out, g.dim());
    for &v in &g.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// The owner id is not stored in the file and is supplied by the caller.
pub fn decode_global(bytes: &[u8], path: &Path, owner: ImageId) -> Result<GlobalDescriptor> {
    let mut r = Reader::new(bytes, path);
    r.magic(GLOBAL_MAGIC)?;
    let dim = r.u32("dim")? as usize;
    r.expect_remaining(dim.saturating_mul(4), "descriptor values")?;
    let values = (0..dim)
        .map(|_| r.finite_f32("descriptor"))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(GlobalDescriptor::new(owner, values))
}

const MAP_RECORD_BYTES: usize = 12 + 1 + 12 + 12 + 4 + 4 + 4 + 2;

pub fn encode_map(map: &DenseMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + map.len() * MAP_RECORD_BYTES);
    out.extend_from_slice(MAP_MAGIC);
    put_u32(&mut out, map.len());
    for p in &map.points {
        for v in p.position.iter() {
            put_f32(&mut out, *v);
        }
        out.push(p.label);
        for v in p.cone.v_l.iter().chain(p.cone.v_u.iter()) {
            put_f32(&mut out, *v);
        }
        put_f32(&mut out, p.cone.theta);
        put_f32(&mut out, p.cone.d_min);
        put_f32(&mut out, p.cone.d_max);
        out.extend_from_slice(&p.support.to_le_bytes());
    }
    out
}

pub fn decode_map(bytes: &[u8], path: &Path) -> Result<DenseMap> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAP_MAGIC)?;
    let n = r.u32("point count")? as usize;
    r.expect_remaining(n.saturating_mul(MAP_RECORD_BYTES), "map records")?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let start = r.pos;
        let position = WorldPoint::from(r.vec3("position")?);
        let label = r.u8("label")?;
        if !classes::is_valid(label) {
            return Err(r.error_at(start + 12, format!("invalid class id {label}")));
        }
        let v_l = r.vec3("v_l")?;
        let v_u = r.vec3("v_u")?;
        let theta = r.finite_f32("theta")? as f64;
        let d_min = r.finite_f32("d_min")? as f64;
        let d_max = r.finite_f32("d_max")? as f64;
        let support = r.u16("support")?;
        let cone = VisibilityCone::from_parts(d_min, d_max, v_l, v_u, theta, CONE_LOAD_TOL)
            .map_err(|e| r.error_at(start, format!("corrupt visibility cone: {e}")))?;
        points.push(DensePoint {
            position,
            label,
            cone,
            support,
        });
    }
    r.finish()?;
    Ok(DenseMap { points })
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    decode_depth(&read_bytes(path)?, path)
}

pub fn read_labels(path: &Path) -> Result<LabelImage> {
    decode_labels(&read_bytes(path)?, path)
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    decode_features(&read_bytes(path)?, path)
}

pub fn read_global(path: &Path, owner: ImageId) -> Result<GlobalDescriptor> {
    decode_global(&read_bytes(path)?, path, owner)
}

pub fn read_map(path: &Path) -> Result<DenseMap> {
    decode_map(&read_bytes(path)?, path)
}

pub fn write_map(path: &Path, map: &DenseMap) -> Result<()> {
    write_bytes(path, &encode_map(map))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraEntry {
    pub id: ImageId,
    pub intrinsics: CameraIntrinsics,
    pub pose: RigidPose,
}

/// One camera per line; `#` starts a comment. Floats are written in their
/// shortest round-trip form.
pub fn format_cameras(entries: &[CameraEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let k = &e.intrinsics;
        let q = e.pose.quaternion();
        let c = e.pose.center();
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            e.id, k.fx, k.fy, k.cx, k.cy, k.width, k.height, q.w, q.i, q.j, q.k, c.x, c.y, c.z
        ));
    }
    s
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<CameraEntry>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 14 {
            return Err(parse_err(
                i + 1,
                format!("expected 14 fields, got {}", fields.len()),
            ));
        }
        let id: ImageId = fields[0]
            .parse()
            .map_err(|e| parse_err(i + 1, format!("id: {e}")))?;
        let f = |j: usize| -> Result<f64> {
            fields[j]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    parse_err(
                        i + 1,
                        format!("field {}: bad number `{}`", j + 1, fields[j]),
                    )
                })
        };
        let u = |j: usize| -> Result<u32> {
            fields[j]
                .parse::<u32>()
                .map_err(|e| parse_err(i + 1, format!("field {}: {e}", j + 1)))
        };
        let intrinsics = CameraIntrinsics::new(f(1)?, f(2)?, f(3)?, f(4)?, u(5)?, u(6)?)
            .map_err(|e| parse_err(i + 1, e.to_string()))?;
        let q = Quaternion::new(f(7)?, f(8)?, f(9)?, f(10)?);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(parse_err(
                i + 1,
                format!("quaternion norm {} is not 1", q.norm()),
            ));
        }
        let pose = RigidPose::from_quaternion(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(f(11)?, f(12)?, f(13)?),
        );
        if !seen.insert(id) {
            return Err(parse_err(i + 1, format!("duplicate id {id}")));
        }
        out.push(CameraEntry {
            id,
            intrinsics,
            pose,
        });
    }
    Ok(out)
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text, path)
}

pub fn write_cameras(path: &Path, entries: &[CameraEntry]) -> Result<()> {
    write_bytes(path, format_cameras(entries).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseEntry {
    pub id: ImageId,
    pub depth: PathBuf,
    pub labels: PathBuf,
    pub global: PathBuf,
    /// Family name to feature file.
    pub features: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEntry {
    pub id: ImageId,
    pub condition: Condition,
    pub labels: PathBuf,
    pub global: PathBuf,
    pub features: BTreeMap<String, PathBuf>,
}

/// Index of a dataset directory. Paths are relative to the manifest's
/// directory. Intrinsics and poses come from the camera files by id; query
/// poses in `query_cameras` are ignored (ground truth lives in its own
/// file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub database_cameras: PathBuf,
    pub query_cameras: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    pub families: Vec<FeatureFamily>,
    #[serde(default)]
    pub database: Vec<DatabaseEntry>,
    #[serde(default)]
    pub query: Vec<QueryEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

/// Accepts either the manifest file or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = manifest_path(path);
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: file.clone(),
            message: e.to_string(),
        })?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(&file)?;
        Ok(m)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Ids unique across both lists, families valid and consistent, and
    /// every referenced file present.
    pub fn validate(&self, file: &Path) -> Result<()> {
        let bad = |message: String| Error::Parse {
            path: file.to_path_buf(),
            message,
        };
        if self.version != MANIFEST_VERSION {
            return Err(bad(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        validate_families(&self.families).map_err(|e| bad(e.to_string()))?;
        let names: BTreeSet<&str> = self.families.iter().map(|f| f.name.as_str()).collect();
        let mut ids = BTreeSet::new();
        let mut files: Vec<&Path> = vec![&self.database_cameras, &self.query_cameras];
        files.extend(self.ground_truth.as_deref());
        let entries = self
            .database
            .iter()
            .map(|d| (d.id, &d.features, [&d.labels, &d.global], Some(&d.depth)))
            .chain(
                self.query
                    .iter()
                    .map(|q| (q.id, &q.features, [&q.labels, &q.global], None)),
            );
        for (id, features, paths, depth) in entries {
            if !ids.insert(id) {
                return Err(bad(format!("duplicate image id {id}")));
            }
            let keys: BTreeSet<&str> = features.keys().map(String::as_str).collect();
            if keys != names {
                return Err(bad(format!(
                    "image {id}: feature families {keys:?} differ from {names:?}"
                )));
            }
            files.extend(paths.iter().map(|p| p.as_path()));
            files.extend(depth.map(|p| p.as_path()));
            files.extend(features.values().map(|p| p.as_path()));
        }
        for f in files {
            if !self.resolve(f).is_file() {
                return Err(bad(format!("missing file {}", self.resolve(f).display())));
            }
        }
        Ok(())
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        write_bytes(path, text.as_bytes())
    }
}

/// Everything the pipeline reads, in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub families: Vec<FeatureFamily>,
    pub database: Vec<DatabaseImageRecord>,
    pub queries: Vec<QueryImage>,
    pub ground_truth: BTreeMap<ImageId, RigidPose>,
}

fn camera_table(path: &Path) -> Result<BTreeMap<ImageId, CameraEntry>> {
    Ok(read_cameras(path)?.into_iter().map(|e| (e.id, e)).collect())
}

fn lookup<'a>(
    table: &'a BTreeMap<ImageId, CameraEntry>,
    id: ImageId,
    path: &Path,
) -> Result<&'a CameraEntry> {
    table.get(&id).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        message: format!("no camera line for image {id}"),
    })
}

fn load_features(
    m: &DatasetManifest,
    files: &BTreeMap<String, PathBuf>,
    id: ImageId,
) -> Result<BTreeMap<String, FeatureSet>> {
    let mut out = BTreeMap::new();
    for family in &m.families {
        let path = m.resolve(&files[&family.name]);
        let set = read_features(&path)?;
        if set.family() != family.name || set.dim() != family.dim {
            return Err(Error::Parse {
                path,
                message: format!(
                    "image {id}: expected family `{}` ({}-d), file holds `{}` ({}-d)",
                    family.name,
                    family.dim,
                    set.family(),
                    set.dim()
                ),
            });
        }
        out.insert(family.name.clone(), set);
    }
    Ok(out)
}

fn check_size(
    path: &Path,
    id: ImageId,
    (w, h): (usize, usize),
    k: &CameraIntrinsics,
) -> Result<()> {
    if (w, h) != (k.width as usize, k.height as usize) {
        return Err(Error::DimensionMismatch(format!(
            "{}: image {id} is {w}x{h}, camera is {}x{}",
            path.display(),
            k.width,
            k.height
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let m = DatasetManifest::load(path)?;
        Self::load_manifest(&m)
    }

    pub fn load_manifest(m: &DatasetManifest) -> Result<Self> {
        let db_cams_path = m.resolve(&m.database_cameras);
        let q_cams_path = m.resolve(&m.query_cameras);
        let db_cams = camera_table(&db_cams_path)?;
        let q_cams = camera_table(&q_cams_path)?;

        let mut database = Vec::with_capacity(m.database.len());
        for e in &m.database {
            let cam = lookup(&db_cams, e.id, &db_cams_path)?;
            let depth_path = m.resolve(&e.depth);
            let depth = read_depth(&depth_path)?;
            check_size(
                &depth_path,
                e.id,
                (depth.width(), depth.height()),
                &cam.intrinsics,
            )?;
            let labels_path = m.resolve(&e.labels);
            let labels = read_labels(&labels_path)?;
            check_size(
                &labels_path,
                e.id,
                (labels.width(), labels.height()),
                &cam.intrinsics,
            )?;
            let mut rec = DatabaseImageRecord::new(e.id, cam.intrinsics, cam.pose, depth, labels)?;
            rec.global = Some(read_global(&m.resolve(&e.global), e.id)?);
            rec.features = load_features(m, &e.features, e.id)?;
            database.push(rec);
        }

        let mut queries = Vec::with_capacity(m.query.len());
        for e in &m.query {
            let cam = lookup(&q_cams, e.id, &q_cams_path)?;
            let labels_path = m.resolve(&e.labels);
            let labels = read_labels(&labels_path)?;
            check_size(
                &labels_path,
                e.id,
                (labels.width(), labels.height()),
                &cam.intrinsics,
            )?;
            queries.push(QueryImage {
                id: e.id,
                intrinsics: cam.intrinsics,
                condition: e.condition,
                labels,
                global: read_global(&m.resolve(&e.global), e.id)?,
                features: load_features(m, &e.features, e.id)?,
            });
        }

        let ground_truth = match &m.ground_truth {
            Some(p) => read_cameras(&m.resolve(p))?
                .into_iter()
                .map(|e| (e.id, e.pose))
                .collect(),
            None => BTreeMap::new(),
        };
        Ok(Dataset {
            families: m.families.clone(),
            database,
            queries,
            ground_truth,
        })
    }

    /// Writes the standard layout under `root` and returns the manifest.
    pub fn store(&self, root: &Path) -> Result<DatasetManifest> {
        let db_name = |id: ImageId, ext: &str| PathBuf::from(format!("database/{id:05}.{ext}"));
        let q_name = |id: ImageId, ext: &str| PathBuf::from(format!("query/{id:05}.{ext}"));

        let mut manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            database_cameras: "database_cameras.txt".into(),
            query_cameras: "query_cameras.txt".into(),
            ground_truth: (!self.ground_truth.is_empty()).then(|| "ground_truth.txt".into()),
            families: self.families.clone(),
            database: Vec::new(),
            query: Vec::new(),
            root: root.to_path_buf(),
        };

        let mut db_cams = Vec::new();
        for r in &self.database {
            let global = r.global.as_ref().ok_or(Error::EmptyInput(
                "database image without global descriptor",
            ))?;
            let entry = DatabaseEntry {
                id: r.id,
                depth: db_name(r.id, "dmp"),
                labels: db_name(r.id, "lbl"),
                global: db_name(r.id, "gds"),
                features: r
                    .features
                    .keys()
                    .map(|f| (f.clone(), db_name(r.id, &format!("{f}.fea"))))
                    .collect(),
            };
            write_bytes(&root.join(&entry.depth), &encode_depth(&r.depth))?;
            write_bytes(&root.join(&entry.labels), &encode_labels(&r.labels))?;
            write_bytes(&root.join(&entry.global), &encode_global(global))?;
            for (f, set) in &r.features {
                write_bytes(&root.join(&entry.features[f]), &encode_features(set))?;
            }
            db_cams.push(CameraEntry {
                id: r.id,
                intrinsics: r.intrinsics,
                pose: r.pose,
            });
            manifest.database.push(entry);
        }

        let mut q_cams = Vec::new();
        for q in &self.queries {
            let entry = QueryEntry {
                id: q.id,
                condition: q.condition,
                labels: q_name(q.id, "lbl"),
                global: q_name(q.id, "gds"),
                features: q
                    .features
                    .keys()
                    .map(|f| (f.clone(), q_name(q.id, &format!("{f}.fea"))))
                    .collect(),
            };
            write_bytes(&root.join(&entry.labels), &encode_labels(&q.labels))?;
            write_bytes(&root.join(&entry.global), &encode_global(&q.global))?;
            for (f, set) in &q.features {
                write_bytes(&root.join(&entry.features[f]), &encode_features(set))?;
            }
            q_cams.push(CameraEntry {
                id: q.id,
                intrinsics: q.intrinsics,
                pose: RigidPose::identity(),
            });
            manifest.query.push(entry);
        }

        write_cameras(&root.join(&manifest.database_cameras), &db_cams)?;
        write_cameras(&root.join(&manifest.query_cameras), &q_cams)?;
        if let Some(gt) = &manifest.ground_truth {
            let by_id: BTreeMap<ImageId, &QueryImage> =
                self.queries.iter().map(|q| (q.id, q)).collect();
            let entries = self
                .ground_truth
                .iter()
                .map(|(id, pose)| {
                    let intrinsics = by_id
                        .get(id)
                        .map(|q| q.intrinsics)
                        .ok_or(Error::UnknownQuery(*id))?;
                    Ok(CameraEntry {
                        id: *id,
                        intrinsics,
                        pose: *pose,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_cameras(&root.join(gt), &entries)?;
        }
        manifest.store(&root.join(MANIFEST_FILE))?;
        Ok(manifest)
    }
}
