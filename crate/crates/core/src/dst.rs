//! Dense space transformation between the camera image and the BEV grid.
//!
//! Both directions need a dense height field: in the image it comes from
//! inverse-distance weighting of projected LiDAR points, in BEV from linear
//! interpolation along the scan columns of an azimuth/elevation arrangement
//! of the cloud. With a height per pixel, a camera pixel is lifted onto the
//! ray of constant LiDAR height, and a BEV cell is lifted to
//! `(x, y, height)` and projected.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;

use crate::bev::BevGeometry;
use crate::error::{Error, Result};
use crate::kitti::{CalibrationSet, PointCloud};
use crate::warp::WarpTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl ImageDims {
    pub fn new(width: usize, height: usize) -> Self {
        ImageDims { width, height }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether a continuous pixel position lies within the pixel-center span.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Dense LiDAR-frame height per pixel. Invalid pixels hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl HeightMap {
    pub fn empty(width: usize, height: usize) -> Self {
        HeightMap {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.valid[i].then_some(self.values[i])
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let i = row * self.width + col;
        self.values[i] = value;
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth (`z` of `R X + T`).
    pub depth: f64,
    /// LiDAR-frame height of the source point.
    pub height: f64,
    /// Index into the source cloud.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedCloud {
    pub dims: ImageDims,
    pub points: Vec<ProjectedPoint>,
}

/// Pinhole projection of a LiDAR-frame point: `(u, v, depth)`, or `None`
/// when the point is not in front of the camera.
pub fn project_point(calib: &CalibrationSet, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let cam = calib.rotation * p + calib.translation;
    if cam.z <= 0.0 {
        return None;
    }
    let h = calib.intrinsics * cam;
    Some((h.x / h.z, h.y / h.z, cam.z))
}

pub fn project_points(cloud: &PointCloud, calib: &CalibrationSet, dims: ImageDims) -> ProjectedCloud {
    let points = cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let (u, v, depth) = project_point(calib, &p.position())?;
            dims.contains(u, v).then_some(ProjectedPoint {
                u,
                v,
                depth,
                height: p.z as f64,
                index,
            })
        })
        .collect();
    ProjectedCloud { dims, points }
}

/// Neighborhood of the inverse-distance height estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborhoodConfig {
    /// At most this many nearest projected points contribute.
    pub max_neighbors: usize,
    /// Neighbors farther than this (pixels) are ignored.
    pub radius_px: f64,
    /// A neighbor closer than this donates its height unchanged.
    pub epsilon_px: f64,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        NeighborhoodConfig {
            max_neighbors: 4,
            radius_px: 9.0,
            epsilon_px: 1e-6,
        }
    }
}

impl NeighborhoodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_neighbors == 0
            || !(self.radius_px > 0.0 && self.radius_px.is_finite())
            || !(self.epsilon_px >= 0.0)
        {
            return Err(Error::Config(format!("invalid neighborhood {self:?}")));
        }
        Ok(())
    }
}

/// Inverse-distance weighted height of the given neighbors, which must be
/// sorted by distance. Returns `None` for an empty set.
pub fn idw_height(neighbors: &[(f64, f64)], epsilon_px: f64) -> Option<f64> {
    let &(d0, z0) = neighbors.first()?;
    if d0 < epsilon_px {
        return Some(z0);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &(d, z) in neighbors {
        num += z / d;
        den += 1.0 / d;
    }
    Some(num / den)
}

/// Keeps `best` as the `k` smallest `(distance, index, height)` entries.
#[inline]
fn offer(best: &mut Vec<(f64, usize, f64)>, k: usize, cand: (f64, usize, f64)) {
    let key = |e: &(f64, usize, f64)| (e.0, e.1);
    if best.len() == k {
        let last = best[k - 1];
        if key(&cand) >= key(&last) {
            return;
        }
        best.pop();
    }
    let pos = best
        .iter()
        .position(|e| key(&cand) < key(e))
        .unwrap_or(best.len());
    best.insert(pos, cand);
}

/// Dense image-space height: each pixel averages the heights of its nearest
/// projected points with weights `1 / distance`, normalized by the weight
/// sum. Ties in distance resolve to the lower point index.
pub fn upsample_perspective_height(
    proj: &ProjectedCloud,
    dims: ImageDims,
    cfg: &NeighborhoodConfig,
) -> Result<HeightMap> {
    cfg.validate()?;
    let mut out = HeightMap::empty(dims.width, dims.height);
    if proj.points.is_empty() {
        return Ok(out);
    }
    let cell = cfg.radius_px.ceil().max(1.0);
    let bw = (dims.width as f64 / cell).ceil() as usize + 1;
    let bh = (dims.height as f64 / cell).ceil() as usize + 1;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); bw * bh];
    for (i, p) in proj.points.iter().enumerate() {
        let bx = ((p.u / cell).floor().max(0.0) as usize).min(bw - 1);
        let by = ((p.v / cell).floor().max(0.0) as usize).min(bh - 1);
        buckets[by * bw + bx].push(i);
    }
    let r2 = cfg.radius_px;
    let mut best = Vec::with_capacity(cfg.max_neighbors + 1);
    let mut neighbors = Vec::with_capacity(cfg.max_neighbors);
    for row in 0..dims.height {
        let v = row as f64;
        let by0 = ((v - r2) / cell).floor().max(0.0) as usize;
        let by1 = (((v + r2) / cell).floor().max(0.0) as usize).min(bh - 1);
        for col in 0..dims.width {
            let u = col as f64;
            let bx0 = ((u - r2) / cell).floor().max(0.0) as usize;
            let bx1 = (((u + r2) / cell).floor().max(0.0) as usize).min(bw - 1);
            best.clear();
            for by in by0..=by1 {
                for bx in bx0..=bx1 {
                    for &i in &buckets[by * bw + bx] {
                        let p = &proj.points[i];
                        let d = ((p.u - u).powi(2) + (p.v - v).powi(2)).sqrt();
                        if d <= cfg.radius_px {
                            offer(&mut best, cfg.max_neighbors, (d, p.index, p.height));
                        }
                    }
                }
            }
            neighbors.clear();
            neighbors.extend(best.iter().map(|&(d, _, z)| (d, z)));
            if let Some(z) = idw_height(&neighbors, cfg.epsilon_px) {
                out.set(row, col, z);
            }
        }
    }
    Ok(out)
}

/// Angular resolutions (radians) of the arrangement map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrangementConfig {
    pub azimuth_res: f64,
    pub elevation_res: f64,
}

impl Default for ArrangementConfig {
    fn default() -> Self {
        ArrangementConfig {
            azimuth_res: 0.1f64.to_radians(),
            elevation_res: 0.42f64.to_radians(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrangementEntry {
    /// Horizontal range `sqrt(x^2 + y^2)`.
    pub range: f64,
    pub height: f64,
    /// Elevation index, offset to be nonnegative.
    pub row: usize,
    /// Azimuth index, offset to be nonnegative.
    pub col: usize,
}

/// The cloud re-indexed by azimuth column and elevation row. Each column is
/// stored sorted by strictly increasing horizontal range.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrangementMap {
    pub config: ArrangementConfig,
    pub rows: usize,
    pub cols: usize,
    pub row_offset: i64,
    pub col_offset: i64,
    pub columns: Vec<Vec<ArrangementEntry>>,
    /// Points at the sensor origin, which have no direction.
    pub dropped: usize,
}

impl ArrangementMap {
    /// Raw azimuth index `floor(atan2(y, x) / azimuth_res)`.
    pub fn raw_col(&self, x: f64, y: f64) -> i64 {
        (y.atan2(x) / self.config.azimuth_res).floor() as i64
    }

    /// Raw elevation index `floor(atan2(z, sqrt(x^2 + y^2)) / elevation_res)`.
    pub fn raw_row(&self, x: f64, y: f64, z: f64) -> i64 {
        (z.atan2(x.hypot(y)) / self.config.elevation_res).floor() as i64
    }

    pub fn col_index(&self, x: f64, y: f64) -> usize {
        ((self.raw_col(x, y) + self.col_offset).max(0) as usize).min(self.cols - 1)
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&ArrangementEntry> {
        self.columns.get(col)?.iter().find(|e| e.row == row)
    }

    pub fn len(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_arrangement_map(cloud: &PointCloud, cfg: &ArrangementConfig) -> Result<ArrangementMap> {
    if !(cfg.azimuth_res > 0.0 && cfg.elevation_res > 0.0)
        || !(cfg.azimuth_res.is_finite() && cfg.elevation_res.is_finite())
    {
        return Err(Error::Config(format!("invalid angular resolution {cfg:?}")));
    }
    let col_offset = -(-PI / cfg.azimuth_res).floor() as i64;
    let cols = ((PI / cfg.azimuth_res).floor() as i64 + col_offset + 1) as usize;
    let row_offset = -(-FRAC_PI_2 / cfg.elevation_res).floor() as i64;
    let rows = ((FRAC_PI_2 / cfg.elevation_res).floor() as i64 + row_offset + 1) as usize;
    let mut map = ArrangementMap {
        config: *cfg,
        rows,
        cols,
        row_offset,
        col_offset,
        columns: vec![Vec::new(); cols],
        dropped: 0,
    };
    // (entry, source index) per column before collision handling
    let mut raw: Vec<Vec<(ArrangementEntry, usize)>> = vec![Vec::new(); cols];
    for (i, p) in cloud.points.iter().enumerate() {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        if x == 0.0 && y == 0.0 && z == 0.0 {
            map.dropped += 1;
            continue;
        }
        let col = ((map.raw_col(x, y) + col_offset).clamp(0, cols as i64 - 1)) as usize;
        let row = ((map.raw_row(x, y, z) + row_offset).clamp(0, rows as i64 - 1)) as usize;
        raw[col].push((
            ArrangementEntry {
                range: x.hypot(y),
                height: z,
                row,
                col,
            },
            i,
        ));
    }
    for (col, mut entries) in raw.into_iter().enumerate() {
        // nearest point wins each (row, col) cell
        entries.sort_by(|a, b| {
            a.0.row
                .cmp(&b.0.row)
                .then(a.0.range.total_cmp(&b.0.range))
                .then(a.1.cmp(&b.1))
        });
        entries.dedup_by_key(|e| e.0.row);
        // strictly increasing range; equal ranges keep the lowest point
        entries.sort_by(|a, b| {
            a.0.range
                .total_cmp(&b.0.range)
                .then(a.0.height.total_cmp(&b.0.height))
                .then(a.1.cmp(&b.1))
        });
        entries.dedup_by(|later, earlier| later.0.range == earlier.0.range);
        map.columns[col] = entries.into_iter().map(|e| e.0).collect();
    }
    Ok(map)
}

/// Range-linear interpolation between two scan neighbors, exact at both
/// endpoints and bounded by their heights.
pub fn interpolate_bracket(lo: (f64, f64), hi: (f64, f64), range: f64) -> f64 {
    let ((r0, z0), (r1, z1)) = (lo, hi);
    if range == r0 {
        return z0;
    }
    if range == r1 {
        return z1;
    }
    let t = (range - r0) / (r1 - r0);
    (z0 + t * (z1 - z0)).clamp(z0.min(z1), z0.max(z1))
}

/// Height of one BEV position from the scan column it falls in, or `None`
/// outside the column's range bracket.
pub fn column_height(amap: &ArrangementMap, x: f64, y: f64) -> Option<f64> {
    let column = &amap.columns[amap.col_index(x, y)];
    let range = x.hypot(y);
    let idx = column.partition_point(|e| e.range <= range);
    if idx == 0 {
        return None;
    }
    let lo = &column[idx - 1];
    if lo.range == range {
        return Some(lo.height);
    }
    let hi = column.get(idx)?;
    Some(interpolate_bracket(
        (lo.range, lo.height),
        (hi.range, hi.height),
        range,
    ))
}

/// Dense BEV height at every cell center.
pub fn upsample_bev_height(amap: &ArrangementMap, geom: &BevGeometry) -> Result<HeightMap> {
    geom.validate()?;
    let mut out = HeightMap::empty(geom.cols(), geom.rows());
    for row in 0..geom.rows() {
        for col in 0..geom.cols() {
            let (x, y) = geom.cell_center(row, col);
            if let Some(z) = column_height(amap, x, y) {
                out.set(row, col, z);
            }
        }
    }
    Ok(out)
}

/// Rays closer to horizontal than this (in the LiDAR `z` component of the
/// back-projected direction) are not lifted.
pub const MIN_RAY_Z: f64 = 1e-6;

/// Lifts pixel `(u, v)` to the LiDAR-frame point on its viewing ray whose
/// height is `height`.
///
/// With `X_cam = R X + T`, the pixel ray is `X = s * R^-1 K^-1 [u v 1]^T -
/// R^-1 T`; the scale `s` is fixed by the height constraint. Returns `None`
/// for near-horizontal rays and for heights only reachable behind the
/// camera.
pub fn reconstruct_pixel(calib: &CalibrationSet, u: f64, v: f64, height: f64) -> Option<Vector3<f64>> {
    let r_inv = calib.rotation.transpose();
    let k_inv = calib.intrinsics.try_inverse()?;
    let pseudo = r_inv * (k_inv * Vector3::new(u, v, 1.0));
    if pseudo.z.abs() < MIN_RAY_Z {
        return None;
    }
    let offset = r_inv * calib.translation;
    let scale = (height + offset.z) / pseudo.z;
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    Some(scale * pseudo - offset)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpBuild {
    pub table: WarpTable,
    /// Sources whose lifted position fell outside the target grid.
    pub skipped: usize,
    /// Targets reached directly by a source (before hole filling).
    pub scattered: usize,
}

/// Nearest scatter into a target grid followed by a single 3x3 hole fill.
/// `sources` yields `(target_row_f, target_col_f, source_u, source_v)`.
struct Scatter {
    rows: usize,
    cols: usize,
    best: Vec<Option<(f64, usize, f64, f64)>>,
    skipped: usize,
}

impl Scatter {
    fn new(rows: usize, cols: usize) -> Self {
        Scatter {
            rows,
            cols,
            best: vec![None; rows * cols],
            skipped: 0,
        }
    }

    fn offer(&mut self, row_f: f64, col_f: f64, order: usize, su: f64, sv: f64) {
        let (tr, tc) = (row_f.round(), col_f.round());
        if !(tr >= 0.0 && tc >= 0.0 && tr < self.rows as f64 && tc < self.cols as f64) {
            self.skipped += 1;
            return;
        }
        let dist = (row_f - tr).hypot(col_f - tc);
        let slot = &mut self.best[tr as usize * self.cols + tc as usize];
        match slot {
            Some((d, o, _, _)) if (*d, *o) <= (dist, order) => {}
            _ => *slot = Some((dist, order, su, sv)),
        }
    }

    fn finish(self, source_height: usize, source_width: usize) -> Result<WarpBuild> {
        let (rows, cols) = (self.rows, self.cols);
        let mut table = WarpTable::empty(rows, cols, source_height, source_width);
        let mut scattered = 0;
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if let Some((_, _, su, sv)) = self.best[i] {
                    table.set(i, su, sv)?;
                    scattered += 1;
                    continue;
                }
                let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
                for nr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                    for nc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                        if let Some((_, _, u, v)) = self.best[nr * cols + nc] {
                            su += u;
                            sv += v;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    let (u, v) = (su / n as f64, sv / n as f64);
                    let u = u.clamp(0.0, (source_width - 1) as f64);
                    let v = v.clamp(0.0, (source_height - 1) as f64);
                    table.set(i, u, v)?;
                }
            }
        }
        Ok(WarpBuild {
            table,
            skipped: self.skipped,
            scattered,
        })
    }
}

/// Table with BEV targets and camera-pixel sources: every camera pixel with
/// a valid height is lifted onto the ground-height ray and scattered to the
/// BEV cell it lands in.
pub fn camera_to_bev_warp(
    persp_height: &HeightMap,
    calib: &CalibrationSet,
    geom: &BevGeometry,
) -> Result<WarpBuild> {
    geom.validate()?;
    let (w, h) = (persp_height.width, persp_height.height);
    if w == 0 || h == 0 {
        return Err(Error::Shape("empty perspective height map".into()));
    }
    let mut scatter = Scatter::new(geom.rows(), geom.cols());
    for row in 0..h {
        for col in 0..w {
            let Some(z) = persp_height.get(row, col) else { continue };
            let Some(p) = reconstruct_pixel(calib, col as f64, row as f64, z) else {
                scatter.skipped += 1;
                continue;
            };
            let (gc, gr) = geom.to_grid(p.x, p.y);
            scatter.offer(gr, gc, row * w + col, col as f64, row as f64);
        }
    }
    scatter.finish(h, w)
}

/// Table with camera-pixel targets and BEV-cell sources: every BEV cell with
/// a valid height is lifted to `(x, y, height)` and projected.
pub fn bev_to_camera_warp(
    bev_height: &HeightMap,
    calib: &CalibrationSet,
    geom: &BevGeometry,
    dims: ImageDims,
) -> Result<WarpBuild> {
    geom.validate()?;
    if (bev_height.width, bev_height.height) != (geom.cols(), geom.rows()) {
        return Err(Error::Shape(format!(
            "BEV height map is {}x{}, geometry is {}x{}",
            bev_height.width,
            bev_height.height,
            geom.cols(),
            geom.rows()
        )));
    }
    if dims.is_empty() {
        return Err(Error::Shape("empty image dims".into()));
    }
    let mut scatter = Scatter::new(dims.height, dims.width);
    for row in 0..geom.rows() {
        for col in 0..geom.cols() {
            let Some(z) = bev_height.get(row, col) else { continue };
            let (x, y) = geom.cell_center(row, col);
            match project_point(calib, &Vector3::new(x, y, z)) {
                Some((u, v, _)) => {
                    scatter.offer(v, u, row * geom.cols() + col, col as f64, row as f64)
                }
                None => scatter.skipped += 1,
            }
        }
    }
    scatter.finish(geom.rows(), geom.cols())
}

/// Every dense-geometry product of one frame.
#[derive(Clone, Debug)]
pub struct FrameGeometry {
    pub projected: ProjectedCloud,
    pub persp_height: HeightMap,
    pub arrangement: ArrangementMap,
    pub bev_height: HeightMap,
    /// BEV targets, camera sources.
    pub to_bev: WarpBuild,
    /// Camera targets, BEV sources.
    pub to_img: WarpBuild,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeometryConfig {
    pub bev: BevGeometry,
    pub neighborhood: NeighborhoodConfig,
    pub arrangement: ArrangementConfig,
}

pub fn frame_geometry(
    cloud: &PointCloud,
    calib: &CalibrationSet,
    dims: ImageDims,
    cfg: &GeometryConfig,
) -> Result<FrameGeometry> {
    let projected = project_points(cloud, calib, dims);
    let persp_height = upsample_perspective_height(&projected, dims, &cfg.neighborhood)?;
    let arrangement = build_arrangement_map(cloud, &cfg.arrangement)?;
    let bev_height = upsample_bev_height(&arrangement, &cfg.bev)?;
    let to_bev = camera_to_bev_warp(&persp_height, calib, &cfg.bev)?;
    let to_img = bev_to_camera_warp(&bev_height, calib, &cfg.bev, dims)?;
    Ok(FrameGeometry {
        projected,
        persp_height,
        arrangement,
        bev_height,
        to_bev,
        to_img,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti::Point;
    use nalgebra::Matrix3;

    fn identity_calib() -> CalibrationSet {
        CalibrationSet::new(Matrix3::identity(), Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    /// LiDAR (x fwd, y left, z up) to camera (x right, y down, z fwd).
    pub(crate) fn forward_calib(f: f64, cx: f64, cy: f64, cam_height: f64) -> CalibrationSet {
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let t = -r * Vector3::new(0.0, 0.0, cam_height);
        CalibrationSet::new(k, r, t).unwrap()
    }

    #[test]
    fn optical_axis_projection() {
        let (u, v, d) = project_point(&identity_calib(), &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!((u, v, d), (0.0, 0.0, 5.0));
        assert!(project_point(&identity_calib(), &Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn pinhole_hand_arithmetic() {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        let calib = CalibrationSet::new(k, Matrix3::identity(), Vector3::zeros()).unwrap();
        let (u, v, d) = project_point(&calib, &Vector3::new(1.0, 0.0, 10.0)).unwrap();
        // brute-force homogeneous evaluation
        let h = [
            100.0 * 1.0 + 50.0 * 10.0,
            100.0 * 0.0 + 50.0 * 10.0,
            10.0,
        ];
        assert!((u - h[0] / h[2]).abs() < 1e-12 && (u - 60.0).abs() < 1e-12);
        assert!((v - h[1] / h[2]).abs() < 1e-12 && (v - 50.0).abs() < 1e-12);
        assert_eq!(d, 10.0);
    }

    #[test]
    fn project_points_drops_behind_and_outside() {
        let calib = identity_calib();
        let cloud = PointCloud::new(vec![
            Point::new(0.0, 0.0, 5.0, 0.1),
            Point::new(0.0, 0.0, -1.0, 0.1),
            Point::new(100.0, 0.0, 1.0, 0.1),
        ]);
        let proj = project_points(&cloud, &calib, ImageDims::new(10, 10));
        assert_eq!(proj.points.len(), 1);
        assert_eq!(proj.points[0].index, 0);
    }

    fn single(u: f64, v: f64, height: f64, index: usize) -> ProjectedPoint {
        ProjectedPoint {
            u,
            v,
            depth: 1.0,
            height,
            index,
        }
    }

    #[test]
    fn zero_distance_copies_height() {
        let dims = ImageDims::new(20, 20);
        let proj = ProjectedCloud {
            dims,
            points: vec![single(10.0, 10.0, -1.7, 0), single(12.0, 10.0, 5.0, 1)],
        };
        let hm = upsample_perspective_height(&proj, dims, &NeighborhoodConfig::default()).unwrap();
        assert_eq!(hm.get(10, 10), Some(-1.7));
    }

    #[test]
    fn equidistant_neighbors_average() {
        let dims = ImageDims::new(20, 20);
        let proj = ProjectedCloud {
            dims,
            points: vec![single(8.0, 10.0, -1.0, 0), single(12.0, 10.0, -2.0, 1)],
        };
        let hm = upsample_perspective_height(&proj, dims, &NeighborhoodConfig::default()).unwrap();
        assert!((hm.get(10, 10).unwrap() + 1.5).abs() < 1e-15);
        // farther than 9 px from both
        assert_eq!(hm.get(0, 0), None);
        assert_eq!(hm.values[0], 0.0);
    }

    #[test]
    fn arrangement_indices() {
        let cfg = ArrangementConfig {
            azimuth_res: 0.01,
            elevation_res: 0.01,
        };
        let cloud = PointCloud::new(vec![
            Point::new(1.0, 0.0, 0.0, 0.0),
            Point::new(0.0, 1.0, 0.0, 0.0),
            Point::new(0.0, 0.0, 0.0, 0.0),
        ]);
        let m = build_arrangement_map(&cloud, &cfg).unwrap();
        assert_eq!(m.dropped, 1);
        assert_eq!(m.raw_col(1.0, 0.0), 0);
        assert_eq!(m.raw_row(1.0, 0.0, 0.0), 0);
        assert_eq!(m.raw_col(0.0, 1.0), 157);
        let c0 = m.col_offset as usize;
        let r0 = m.row_offset as usize;
        assert!(m.cell(r0, c0).is_some());
        assert!(m.cell(r0, c0 + 157).is_some());
    }

    #[test]
    fn arrangement_collision_keeps_nearer() {
        let cfg = ArrangementConfig::default();
        let cloud = PointCloud::new(vec![
            Point::new(7.0, 0.0, 0.0, 0.0),
            Point::new(5.0, 0.0, 0.0, 0.0),
        ]);
        let m = build_arrangement_map(&cloud, &cfg).unwrap();
        assert_eq!(m.len(), 1);
        let col = m.col_index(1.0, 0.0);
        assert_eq!(m.columns[col][0].range, 5.0);
    }

    #[test]
    fn columns_strictly_increase() {
        let cfg = ArrangementConfig::default();
        let mut pts = Vec::new();
        for k in 0..40 {
            let e = (-20.0 + k as f64 * 0.5f64).to_radians();
            let r = 1.73 / (-e.tan()).max(0.02);
            pts.push(Point::new(r as f32, 0.01, (r * e.tan()) as f32, 0.1));
            pts.push(Point::new(r as f32, 0.01, (r * e.tan() + 0.3) as f32, 0.1));
        }
        let m = build_arrangement_map(&PointCloud::new(pts), &cfg).unwrap();
        for col in &m.columns {
            assert!(col.windows(2).all(|w| w[0].range < w[1].range));
        }
    }

    #[test]
    fn bracket_interpolation() {
        assert_eq!(interpolate_bracket((10.0, -1.0), (20.0, -2.0), 10.0), -1.0);
        assert_eq!(interpolate_bracket((10.0, -1.0), (20.0, -2.0), 20.0), -2.0);
        assert!((interpolate_bracket((10.0, -1.0), (20.0, -2.0), 15.0) + 1.5).abs() < 1e-15);
        assert!((interpolate_bracket((10.0, -1.0), (20.0, -2.0), 12.0) + 1.2).abs() < 1e-12);
    }

    #[test]
    fn identity_like_reconstruction_by_hand() {
        // Camera at the LiDAR origin looking along +x. Pixel (u, v) with
        // f = 1, c = 0 is the ray (1, -u, -v) in LiDAR axes; the point at
        // height z is at scale s = z / -v.
        let calib = forward_calib(1.0, 0.0, 0.0, 0.0);
        let (u, v, z) = (0.25, 0.1, -1.5);
        let s = z / -v;
        let expected = Vector3::new(s, -u * s, z);
        let p = reconstruct_pixel(&calib, u, v, z).unwrap();
        assert!((p - expected).amax() < 1e-9, "{p:?} vs {expected:?}");
        let (pu, pv, _) = project_point(&calib, &p).unwrap();
        assert!((pu - u).abs() < 1e-12 && (pv - v).abs() < 1e-12);
    }

    #[test]
    fn unreachable_heights_are_rejected() {
        let calib = forward_calib(100.0, 50.0, 50.0, 1.7);
        // above the horizon a ground height is only reachable backwards
        assert!(reconstruct_pixel(&calib, 50.0, 20.0, -1.7).is_none());
        // on the horizon the ray is parallel to the ground
        assert!(reconstruct_pixel(&calib, 50.0, 50.0, -1.7).is_none());
        assert!(reconstruct_pixel(&calib, 50.0, 80.0, -1.7).is_some());
    }

    #[test]
    fn invalid_heights_contribute_nothing() {
        let calib = forward_calib(100.0, 50.0, 50.0, 1.7);
        let hm = HeightMap::empty(100, 100);
        let out = camera_to_bev_warp(&hm, &calib, &BevGeometry::default()).unwrap();
        assert_eq!(out.table.valid_count(), 0);
        let bev = HeightMap::empty(40, 80);
        let out =
            bev_to_camera_warp(&bev, &calib, &BevGeometry::default(), ImageDims::new(100, 100))
                .unwrap();
        assert_eq!(out.table.valid_count(), 0);
    }

    #[test]
    fn bev_scatter_points_back_to_cell() {
        let calib = forward_calib(100.0, 50.0, 50.0, 1.7);
        let geom = BevGeometry::default();
        let mut hm = HeightMap::empty(geom.cols(), geom.rows());
        hm.set(20, 20, -1.7);
        let out = bev_to_camera_warp(&hm, &calib, &geom, ImageDims::new(100, 100)).unwrap();
        let (x, y) = geom.cell_center(20, 20);
        let (u, v, _) = project_point(&calib, &Vector3::new(x, y, -1.7)).unwrap();
        let target = v.round() as usize * 100 + u.round() as usize;
        assert_eq!(out.table.coords[target], (20.0, 20.0));
        assert_eq!(out.scattered, 1);
        // the 3x3 neighborhood is filled with the same source
        assert_eq!(out.table.valid_count(), 9);
    }
}
