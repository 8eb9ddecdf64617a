//! Seeded synthetic driving scenes: a straight road with raised sidewalks,
//! grass verges and box obstacles, scanned by a ring LiDAR and rendered by a
//! pinhole camera with exact calibration and ground truth in both spaces.

use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::BevGeometry;
use crate::dst::ImageDims;
use crate::error::{Error, Result};
use crate::kitti::{CalibrationSet, Frame, GroundTruth, Point, PointCloud};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Corruption {
    #[default]
    None,
    /// Strong underexposure with sensor noise.
    Dark,
    /// Overexposure clipping most of the image to white.
    Blind,
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Corruption::None),
            "dark" => Ok(Corruption::Dark),
            "blind" => Ok(Corruption::Blind),
            other => Err(Error::Config(format!(
                "unknown corruption `{other}` (expected none, dark or blind)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig {
    pub dims: ImageDims,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Downward tilt in radians.
    pub pitch: f64,
    /// Optical center in the LiDAR frame.
    pub position: Vector3<f64>,
}

impl CameraRig {
    pub fn calibration(&self) -> Result<CalibrationSet> {
        let k = Matrix3::new(self.focal, 0.0, self.cx, 0.0, self.focal, self.cy, 0.0, 0.0, 1.0);
        let (s, c) = self.pitch.sin_cos();
        // rows: camera right, down, forward in LiDAR axes
        let r = Matrix3::new(0.0, -1.0, 0.0, -s, 0.0, -c, c, 0.0, -s);
        let t = -(r * self.position);
        CalibrationSet::new(k, r, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarSpec {
    pub beams: usize,
    /// Elevation of the top and bottom beam, radians.
    pub top: f64,
    pub bottom: f64,
    pub azimuth_res: f64,
    /// Scanned azimuths are within this of straight ahead.
    pub half_fov: f64,
    pub max_range: f64,
    /// Uniform range noise amplitude, meters.
    pub range_noise: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        LidarSpec {
            beams: 64,
            top: 2.0f64.to_radians(),
            bottom: (-24.8f64).to_radians(),
            azimuth_res: 0.1f64.to_radians(),
            half_fov: 50f64.to_radians(),
            max_range: 80.0,
            range_noise: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub camera: CameraRig,
    pub lidar: LidarSpec,
    /// LiDAR height above the road surface.
    pub lidar_height: f64,
    pub bev: BevGeometry,
}

impl SceneConfig {
    /// Small camera for network training.
    pub fn toy() -> Self {
        SceneConfig {
            camera: CameraRig {
                dims: ImageDims::new(128, 48),
                focal: 64.0,
                cx: 63.5,
                cy: 23.5,
                pitch: 5f64.to_radians(),
                position: Vector3::new(0.27, 0.0, -0.08),
            },
            lidar: LidarSpec::default(),
            lidar_height: 1.73,
            bev: BevGeometry::default(),
        }
    }

    /// Full-resolution camera close to the KITTI rig.
    pub fn kitti_like() -> Self {
        SceneConfig {
            camera: CameraRig {
                dims: ImageDims::new(1242, 375),
                focal: 721.5,
                cx: 609.6,
                cy: 172.9,
                pitch: 0.0,
                position: Vector3::new(0.27, 0.0, -0.08),
            },
            ..Self::toy()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub color: [u8; 3],
}

/// Road centerline `y = offset + slope * x`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadLayout {
    pub offset: f64,
    pub slope: f64,
    pub width: f64,
    pub sidewalk: f64,
    pub curb: f64,
    pub obstacles: Vec<Obstacle>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Road,
    Marking,
    Curb,
    Sidewalk,
    Grass,
    Obstacle(usize),
}

impl Surface {
    pub fn is_road(self) -> bool {
        matches!(self, Surface::Road | Surface::Marking)
    }
}

impl RoadLayout {
    /// Random layout for a sensor `lidar_height` above the road.
    pub fn random<R: Rng>(rng: &mut R, lidar_height: f64) -> Self {
        let mut layout = RoadLayout {
            offset: rng.gen_range(-2.5..2.5),
            slope: rng.gen_range(-0.15..0.15),
            width: rng.gen_range(6.0..10.0),
            sidewalk: rng.gen_range(2.0..3.5),
            curb: rng.gen_range(0.12..0.18),
            obstacles: Vec::new(),
        };
        for _ in 0..rng.gen_range(2..6) {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let along = rng.gen_range(6.0..38.0);
            let lat = side * (layout.width / 2.0 + rng.gen_range(0.6..4.0));
            let (len, wid, hgt) = (rng.gen_range(1.5..4.5), rng.gen_range(1.2..2.0), rng.gen_range(1.0..1.6));
            let (cx, cy) = layout.from_road(along, lat + side * wid / 2.0);
            let ground = layout.curb - lidar_height;
            layout.obstacles.push(Obstacle {
                min: Vector3::new(cx - len / 2.0, cy - wid / 2.0, ground),
                max: Vector3::new(cx + len / 2.0, cy + wid / 2.0, ground + hgt),
                color: [rng.gen_range(30..220), rng.gen_range(30..220), rng.gen_range(30..220)],
            });
        }
        layout
    }

    fn norm(&self) -> f64 {
        (1.0 + self.slope * self.slope).sqrt()
    }

    /// Signed perpendicular distance from the centerline.
    pub fn lateral(&self, x: f64, y: f64) -> f64 {
        (y - self.offset - self.slope * x) / self.norm()
    }

    /// Distance along the centerline from its `x = 0` point.
    pub fn along(&self, x: f64, y: f64) -> f64 {
        (x + self.slope * (y - self.offset)) / self.norm()
    }

    /// Inverse of `(along, lateral)`.
    pub fn from_road(&self, along: f64, lateral: f64) -> (f64, f64) {
        let n = self.norm();
        let (dx, dy) = (1.0 / n, self.slope / n);
        (along * dx - lateral * dy, self.offset + along * dy + lateral * dx)
    }

    pub fn is_road(&self, x: f64, y: f64) -> bool {
        self.lateral(x, y).abs() < self.width / 2.0
    }

    /// Surface type of the ground at `(x, y)`.
    pub fn ground_surface(&self, x: f64, y: f64) -> Surface {
        let lat = self.lateral(x, y).abs();
        let half = self.width / 2.0;
        if lat < half {
            let dash = self.along(x, y).rem_euclid(6.0) < 3.0;
            if (lat < 0.08 && dash) || (half - 0.35..half - 0.2).contains(&lat) {
                Surface::Marking
            } else {
                Surface::Road
            }
        } else if lat < half + self.sidewalk {
            Surface::Sidewalk
        } else {
            Surface::Grass
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vector3<f64>,
    pub surface: Surface,
}

/// Scene geometry relative to the LiDAR origin, road surface at
/// `-lidar_height`.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub layout: RoadLayout,
    pub lidar_height: f64,
}

impl World {
    /// First surface along the unit-direction ray from `o`, within `max`.
    pub fn raycast(&self, o: &Vector3<f64>, d: &Vector3<f64>, max: f64) -> Option<Hit> {
        let mut best = self.hit_ground(o, d).filter(|h| h.0 <= max);
        for (i, b) in self.layout.obstacles.iter().enumerate() {
            if let Some(t) = slab(o, d, b) {
                if t <= max && best.map_or(true, |h| t < h.0) {
                    best = Some((t, Surface::Obstacle(i)));
                }
            }
        }
        best.map(|(t, surface)| Hit {
            distance: t,
            point: o + t * d,
            surface,
        })
    }

    fn hit_ground(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Surface)> {
        let road_z = -self.lidar_height;
        let top_z = road_z + self.layout.curb;
        if d.z >= 0.0 || o.z <= top_z {
            return None;
        }
        let t_top = (top_z - o.z) / d.z;
        let p = o + t_top * d;
        if !self.layout.is_road(p.x, p.y) {
            return Some((t_top, self.layout.ground_surface(p.x, p.y)));
        }
        let t_road = (road_z - o.z) / d.z;
        // the ray dips below the curb top over the road; a curb face is hit
        // if it leaves the road before reaching the road surface
        let lat0 = self.layout.lateral(o.x, o.y);
        let lat_d = self.layout.lateral(o.x + d.x, o.y + d.y) - lat0;
        let half = self.layout.width / 2.0;
        if lat_d != 0.0 {
            let exit = [(half - lat0) / lat_d, (-half - lat0) / lat_d]
                .into_iter()
                .filter(|&t| t > t_top && t <= t_road)
                .fold(f64::INFINITY, f64::min);
            if exit.is_finite() {
                return Some((exit, Surface::Curb));
            }
        }
        let p = o + t_road * d;
        Some((t_road, self.layout.ground_surface(p.x, p.y)))
    }
}

fn slab(o: &Vector3<f64>, d: &Vector3<f64>, b: &Obstacle) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((b.min[a] - o[a]) / d[a], (b.max[a] - o[a]) / d[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Stateless texture noise in `[-1, 1]` for integer lattice coordinates.
fn lattice_noise(seed: u64, a: i64, b: i64) -> f64 {
    let mut h = seed ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn shade(base: [f64; 3], delta: f64) -> [f64; 3] {
    base.map(|c| c + delta)
}

fn surface_color(world: &World, hit: &Hit, seed: u64) -> [f64; 3] {
    let (x, y) = (hit.point.x, hit.point.y);
    let fine = lattice_noise(seed, (x * 4.0).floor() as i64, (y * 4.0).floor() as i64);
    let tile = lattice_noise(seed ^ 1, (x * 2.0).floor() as i64, (y * 2.0).floor() as i64);
    match hit.surface {
        Surface::Road => shade([92.0, 92.0, 98.0], 10.0 * fine),
        Surface::Marking => shade([232.0, 230.0, 220.0], 6.0 * fine),
        Surface::Curb => [185.0, 183.0, 178.0],
        Surface::Sidewalk => shade([165.0, 148.0, 126.0], 12.0 * tile),
        Surface::Grass => {
            let g = 18.0 * fine;
            [68.0 + 0.5 * g, 124.0 + g, 52.0 + 0.3 * g]
        }
        Surface::Obstacle(i) => world.layout.obstacles[i].color.map(|c| c as f64 + 5.0 * fine),
    }
}

fn surface_intensity(surface: Surface) -> f64 {
    match surface {
        Surface::Road => 0.12,
        Surface::Marking => 0.75,
        Surface::Curb => 0.3,
        Surface::Sidewalk => 0.35,
        Surface::Grass => 0.5,
        Surface::Obstacle(_) => 0.2,
    }
}

/// Deterministic ring scan from the LiDAR origin.
pub fn scan(world: &World, spec: &LidarSpec, rng: &mut ChaCha8Rng) -> PointCloud {
    let steps = (2.0 * spec.half_fov / spec.azimuth_res).round() as usize;
    let mut points = Vec::with_capacity(spec.beams * steps / 2);
    let origin = Vector3::zeros();
    for k in 0..spec.beams {
        let e = if spec.beams == 1 {
            spec.top
        } else {
            spec.top - k as f64 * (spec.top - spec.bottom) / (spec.beams - 1) as f64
        };
        for j in 0..steps {
            let a = -spec.half_fov + (j as f64 + 0.5) * spec.azimuth_res;
            let d = Vector3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
            let noise = rng.gen_range(-1.0..=1.0) * spec.range_noise;
            let jitter = rng.gen_range(-0.04..0.04);
            let Some(hit) = world.raycast(&origin, &d, spec.max_range) else { continue };
            let inten = (surface_intensity(hit.surface) + jitter).clamp(0.0, 1.0);
            let p = (hit.distance + noise) * d;
            points.push(Point::new(p.x as f32, p.y as f32, p.z as f32, inten as f32));
        }
    }
    PointCloud::new(points)
}

/// Rendered image and per-pixel road mask.
pub fn render(world: &World, rig: &CameraRig, calib: &CalibrationSet, seed: u64, rng: &mut ChaCha8Rng) -> (Raster, GroundTruth) {
    let ImageDims { width, height } = rig.dims;
    let mut image = Raster::new(width, height, 3);
    let mut road = vec![false; width * height];
    let r_t = calib.rotation.transpose();
    for v in 0..height {
        for u in 0..width {
            let ray = Vector3::new((u as f64 - rig.cx) / rig.focal, (v as f64 - rig.cy) / rig.focal, 1.0);
            let d = (r_t * ray).normalize();
            let rgb = match world.raycast(&rig.position, &d, 500.0) {
                Some(hit) => {
                    road[v * width + u] = hit.surface.is_road();
                    surface_color(world, &hit, seed)
                }
                None => {
                    let t = (v as f64 / height as f64).min(1.0);
                    [120.0 + 60.0 * t, 170.0 + 40.0 * t, 235.0]
                }
            };
            let px = image.pixel_mut(v, u);
            for (c, val) in rgb.iter().enumerate() {
                px[c] = (val + rng.gen_range(-4.0..4.0)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let gt = GroundTruth {
        width,
        height,
        road,
        valid: vec![true; width * height],
    };
    (image, gt)
}

/// Applies a brightness corruption in place.
pub fn corrupt(image: &mut Raster, corruption: Corruption, rng: &mut ChaCha8Rng) {
    match corruption {
        Corruption::None => {}
        Corruption::Dark => {
            for p in image.data.iter_mut() {
                let v = *p as f64 * 0.1 + rng.gen_range(-3.0..3.0);
                *p = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        Corruption::Blind => {
            for p in image.data.iter_mut() {
                let v = *p as f64 * 4.0 + rng.gen_range(-6.0..6.0);
                *p = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub frame: Frame,
    pub config: SceneConfig,
    pub world: World,
    /// Exact road mask at BEV cell centers, row-major.
    pub bev_gt: Vec<bool>,
    pub corruption: Corruption,
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64, corruption: Corruption) -> Result<SyntheticScene> {
    cfg.bev.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World {
        layout: RoadLayout::random(&mut rng, cfg.lidar_height),
        lidar_height: cfg.lidar_height,
    };
    let calib = cfg.camera.calibration()?;
    let cloud = scan(&world, &cfg.lidar, &mut rng);
    let (mut image, gt) = render(&world, &cfg.camera, &calib, seed, &mut rng);
    corrupt(&mut image, corruption, &mut rng);
    let mut bev_gt = vec![false; cfg.bev.cells()];
    for r in 0..cfg.bev.rows() {
        for c in 0..cfg.bev.cols() {
            let (x, y) = cfg.bev.cell_center(r, c);
            bev_gt[r * cfg.bev.cols() + c] = world.layout.is_road(x, y);
        }
    }
    Ok(SyntheticScene {
        frame: Frame {
            id: format!("um_{seed:06}"),
            image,
            cloud,
            calib,
            gt: Some(gt),
        },
        config: *cfg,
        world,
        bev_gt,
        corruption,
    })
}
