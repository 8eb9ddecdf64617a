//! Readers for the KITTI road benchmark layout: velodyne scans, calibration
//! text files, camera images and ground-truth masks.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result, ResultExt};
use crate::raster::{self, Raster};

/// One LiDAR return: x forward, y lateral, z up (meters) and reflectance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x as f64, self.y as f64, self.z as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Bookkeeping from decoding a velodyne scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanReport {
    /// Records dropped because a coordinate or the intensity was NaN/Inf.
    pub rejected_non_finite: usize,
    /// Records whose intensity was clamped into [0, 1].
    pub clamped_intensity: usize,
}

const RECORD_BYTES: usize = 16;

/// Decodes a velodyne scan: consecutive records of four little-endian f32
/// (x, y, z, intensity).
pub fn parse_velodyne(bytes: &[u8]) -> Result<(PointCloud, ScanReport)> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::TruncatedRecord { len: bytes.len() });
    }
    let mut report = ScanReport::default();
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]);
        let (x, y, z, mut intensity) = (f(0), f(4), f(8), f(12));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && intensity.is_finite()) {
            report.rejected_non_finite += 1;
            continue;
        }
        if !(0.0..=1.0).contains(&intensity) {
            report.clamped_intensity += 1;
            intensity = intensity.clamp(0.0, 1.0);
        }
        points.push(Point { x, y, z, intensity });
    }
    Ok((PointCloud { points }, report))
}

pub fn read_velodyne(path: &Path) -> Result<(PointCloud, ScanReport)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_velodyne(&bytes).context_with(|| path.display().to_string())
}

/// Reference writer for the velodyne record layout.
pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_velodyne(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, encode_velodyne(cloud)).map_err(|e| Error::io(path, e))
}

/// Pinhole intrinsics plus the rigid LiDAR-to-camera transform
/// `X_cam = rotation * X_lidar + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Largest `|R^T R - I|` entry accepted from a calibration file before the
/// rotation is snapped to the nearest orthonormal matrix.
pub const ROTATION_LOAD_TOLERANCE: f64 = 1e-4;
/// Orthonormality and determinant tolerance of a constructed set.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

impl CalibrationSet {
    /// Validates the invariants: upper-triangular `K` with positive focal
    /// lengths and a proper rotation.
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let k = &intrinsics;
        let lower = k[(1, 0)].abs().max(k[(2, 0)].abs()).max(k[(2, 1)].abs());
        if lower > 1e-9 * k.amax().max(1.0) {
            return Err(Error::Calibration("intrinsics are not upper-triangular".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0 && k[(2, 2)] > 0.0) {
            return Err(Error::Calibration(
                "intrinsics need positive focal entries".into(),
            ));
        }
        if !(k.iter().all(|v| v.is_finite())
            && rotation.iter().all(|v| v.is_finite())
            && translation.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Calibration("non-finite calibration entry".into()));
        }
        let err = orthonormality_error(&rotation);
        if err > ROTATION_TOLERANCE {
            return Err(Error::Calibration(format!(
                "rotation is not orthonormal (|R^T R - I| = {err:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::Calibration(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(CalibrationSet {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Serializes as a KITTI calibration file with `P2 = [K | 0]`,
    /// `R0_rect = I` and `Tr_velo_to_cam = [R | T]`.
    pub fn to_kitti_text(&self) -> String {
        let k = &self.intrinsics;
        let r = &self.rotation;
        let t = &self.translation;
        let row = |vals: &[f64]| {
            vals.iter()
                .map(|v| format!("{v:.12e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let p2 = [
            k[(0, 0)], k[(0, 1)], k[(0, 2)], 0.0,
            k[(1, 0)], k[(1, 1)], k[(1, 2)], 0.0,
            k[(2, 0)], k[(2, 1)], k[(2, 2)], 0.0,
        ];
        let r0 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let tr = [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ];
        format!(
            "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
            row(&p2),
            row(&r0),
            row(&tr)
        )
    }
}

pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

fn snap_to_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    u * vt
}

fn find_key<'a>(text: &'a str, keys: &[&str]) -> Option<&'a str> {
    text.lines().find_map(|line| {
        let line = line.trim();
        let (key, rest) = match line.split_once(':') {
            Some((k, r)) => (k.trim(), r),
            None => {
                let mut it = line.splitn(2, char::is_whitespace);
                (it.next()?, it.next().unwrap_or(""))
            }
        };
        keys.contains(&key).then_some(rest)
    })
}

fn parse_values(text: &str, keys: &[&str], count: usize) -> Result<Vec<f64>> {
    let raw = find_key(text, keys)
        .ok_or_else(|| Error::Calibration(format!("missing key `{}`", keys[0])))?;
    let vals = raw
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| {
                Error::Calibration(format!("malformed float `{tok}` under `{}`", keys[0]))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != count {
        return Err(Error::Calibration(format!(
            "`{}` has {} values, expected {count}",
            keys[0],
            vals.len()
        )));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Calibration(format!("non-finite value under `{}`", keys[0])));
    }
    Ok(vals)
}

/// Parses KITTI calibration text into a single `(K, R, T)` triple. The
/// rectifying rotation is folded into `R` and the `P2` baseline column into
/// `T`.
pub fn parse_calibration_str(text: &str) -> Result<CalibrationSet> {
    let p2 = parse_values(text, &["P2"], 12)?;
    let r0 = parse_values(text, &["R0_rect", "R_rect"], 9)?;
    let tr = parse_values(text, &["Tr_velo_to_cam", "Tr_velo_cam"], 12)?;

    let mut k = Matrix3::new(p2[0], p2[1], p2[2], p2[4], p2[5], p2[6], p2[8], p2[9], p2[10]);
    let mut offset = Vector3::new(p2[3], p2[7], p2[11]);
    let scale = k[(2, 2)];
    if scale.abs() < f64::EPSILON {
        return Err(Error::Calibration("P2 has a zero homogeneous scale".into()));
    }
    k /= scale;
    offset /= scale;

    let rect = Matrix3::from_row_slice(&r0);
    let velo_rot = Matrix3::new(tr[0], tr[1], tr[2], tr[4], tr[5], tr[6], tr[8], tr[9], tr[10]);
    let velo_t = Vector3::new(tr[3], tr[7], tr[11]);

    for (name, m) in [("R0_rect", &rect), ("Tr_velo_to_cam", &velo_rot)] {
        let err = orthonormality_error(m);
        if err > ROTATION_LOAD_TOLERANCE {
            return Err(Error::Calibration(format!(
                "{name} rotation is not orthonormal (|R^T R - I| = {err:.3e})"
            )));
        }
    }
    let mut rotation = rect * velo_rot;
    if orthonormality_error(&rotation) > ROTATION_TOLERANCE {
        rotation = snap_to_rotation(&rotation);
    }
    let k_inv = k
        .try_inverse()
        .ok_or_else(|| Error::Calibration("P2 intrinsics are singular".into()))?;
    let translation = rect * velo_t + k_inv * offset;
    CalibrationSet::new(k, rotation, translation)
}

pub fn parse_calibration(path: &Path) -> Result<CalibrationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibration_str(&text).context_with(|| path.display().to_string())
}

/// Road and evaluation-validity masks in image space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub road: Vec<bool>,
    pub valid: Vec<bool>,
}

/// Channel thresholds for the devkit color convention (magenta = road,
/// red = valid non-road). A sample counts when it is at least the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtThresholds {
    pub red: u8,
    pub blue: u8,
}

impl Default for GtThresholds {
    fn default() -> Self {
        GtThresholds {
            red: 255,
            blue: 255,
        }
    }
}

pub fn decode_ground_truth(image: &Raster) -> Result<GroundTruth> {
    decode_ground_truth_with(image, GtThresholds::default())
}

pub fn decode_ground_truth_with(image: &Raster, thr: GtThresholds) -> Result<GroundTruth> {
    if image.channels != 3 {
        return Err(Error::Image(format!(
            "ground truth needs 3 channels, got {}",
            image.channels
        )));
    }
    let n = image.width * image.height;
    let mut road = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for px in image.data.chunks_exact(3) {
        let v = px[0] >= thr.red;
        valid.push(v);
        road.push(v && px[2] >= thr.blue);
    }
    Ok(GroundTruth {
        width: image.width,
        height: image.height,
        road,
        valid,
    })
}

/// Inverse of [`decode_ground_truth`] for writing masks.
pub fn encode_ground_truth(gt: &GroundTruth) -> Raster {
    let mut r = Raster::new(gt.width, gt.height, 3);
    for (i, px) in r.data.chunks_exact_mut(3).enumerate() {
        if gt.valid[i] {
            px[0] = 255;
            if gt.road[i] {
                px[2] = 255;
            }
        }
    }
    r
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub id: String,
    pub image: Raster,
    pub cloud: PointCloud,
    pub calib: CalibrationSet,
    pub gt: Option<GroundTruth>,
}

/// File locations of one frame inside a KITTI road directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePaths {
    pub velodyne: PathBuf,
    pub calib: PathBuf,
    pub image: PathBuf,
    pub gt: PathBuf,
}

impl FramePaths {
    pub fn new(root: &Path, id: &str) -> Self {
        let gt_name = match id.rsplit_once('_') {
            Some((cat, num)) => format!("{cat}_road_{num}.png"),
            None => format!("{id}.png"),
        };
        FramePaths {
            velodyne: root.join("velodyne").join(format!("{id}.bin")),
            calib: root.join("calib").join(format!("{id}.txt")),
            image: root.join("image_2").join(format!("{id}.png")),
            gt: root.join("gt_image_2").join(gt_name),
        }
    }
}

pub fn load_frame(root: &Path, id: &str) -> Result<Frame> {
    if id.is_empty() {
        return Err(Error::Config("frame id must be nonempty".into()));
    }
    let paths = FramePaths::new(root, id);
    let ctx = || format!("frame {id}");
    let (cloud, _) = read_velodyne(&paths.velodyne).context_with(ctx)?;
    let calib = parse_calibration(&paths.calib).context_with(ctx)?;
    let image = raster::read_png(&paths.image)
        .and_then(Raster::into_rgb)
        .context_with(ctx)?;
    let gt = if paths.gt.exists() {
        let raw = raster::read_png(&paths.gt).context_with(ctx)?;
        let gt = decode_ground_truth(&raw).context_with(ctx)?;
        if (gt.width, gt.height) != (image.width, image.height) {
            return Err(Error::Image(format!(
                "ground truth is {}x{}, image is {}x{}",
                gt.width, gt.height, image.width, image.height
            ))
            .context(ctx()));
        }
        Some(gt)
    } else {
        None
    };
    Ok(Frame {
        id: id.to_string(),
        image,
        cloud,
        calib,
        gt,
    })
}

/// Writes a frame in the KITTI directory layout (creating subdirectories).
pub fn write_frame(root: &Path, frame: &Frame) -> Result<()> {
    let paths = FramePaths::new(root, &frame.id);
    for p in [&paths.velodyne, &paths.calib, &paths.image, &paths.gt] {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    write_velodyne(&paths.velodyne, &frame.cloud)?;
    std::fs::write(&paths.calib, frame.calib.to_kitti_text())
        .map_err(|e| Error::io(&paths.calib, e))?;
    raster::write_png(&paths.image, &frame.image)?;
    if let Some(gt) = &frame.gt {
        raster::write_png(&paths.gt, &encode_ground_truth(gt))?;
    }
    Ok(())
}

/// Frame ids present under `root/velodyne`, sorted.
pub fn list_frame_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("velodyne");
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "bin") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
