use std::path::Path;

use bifnet::bev::{rasterize, BevGeometry};
use bifnet::dst::{frame_geometry, project_point, GeometryConfig, ImageDims};
use bifnet::kitti::{list_frame_ids, load_frame, write_frame};
use bifnet::training::net::{BEV_STRIDE, IMG_STRIDE};
use bifnet::training::{generate_scene, Corruption, Sample, SceneConfig};
use bifnet::warp::sample_nearest;
use nalgebra::Vector3;

fn data_root() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/road"))
}

fn toy_geometry() -> GeometryConfig {
    GeometryConfig {
        bev: SceneConfig::toy().bev,
        ..Default::default()
    }
}

#[test]
fn sample_frame_loads() {
    let ids = list_frame_ids(data_root()).unwrap();
    assert_eq!(ids, ["um_000003"]);
    let f = load_frame(data_root(), "um_000003").unwrap();
    assert_eq!((f.image.width, f.image.height), (128, 48));
    assert_eq!(f.cloud.len(), 2821);
    let gt = f.gt.as_ref().unwrap();
    assert!(gt.road.iter().any(|&r| r) && gt.valid.iter().all(|&v| v));
    assert!((f.calib.intrinsics[(0, 0)] - 64.0).abs() < 1e-12);
}

#[test]
fn frame_survives_a_disk_round_trip() {
    let scene = generate_scene(&SceneConfig::toy(), 11, Corruption::Dark).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_frame(dir.path(), &scene.frame).unwrap();
    let back = load_frame(dir.path(), &scene.frame.id).unwrap();
    assert_eq!(back.image, scene.frame.image);
    assert_eq!(back.cloud, scene.frame.cloud);
    assert_eq!(back.gt, scene.frame.gt);
    let c = (back.calib.rotation - scene.frame.calib.rotation).amax();
    assert!(c < 1e-11);
}

/// Carrying the image road mask into BEV through the camera-to-BEV table
/// should agree with the road labels computed directly in BEV.
#[test]
fn camera_to_bev_agrees_with_bev_labels() {
    let cfg = SceneConfig::kitti_like();
    let geom = GeometryConfig {
        bev: cfg.bev,
        ..Default::default()
    };
    let scene = generate_scene(&cfg, 4, Corruption::None).unwrap();
    let f = &scene.frame;
    let gt = f.gt.as_ref().unwrap();
    let g = frame_geometry(&f.cloud, &f.calib, ImageDims::new(f.image.width, f.image.height), &geom).unwrap();
    let t = &g.to_bev.table;
    let (mut agree, mut total) = (0, 0);
    for i in 0..t.target_len() {
        if t.valid[i] {
            let (u, v) = t.coords[i];
            total += 1;
            agree += (sample_nearest(&gt.road, gt.width, u, v) == scene.bev_gt[i]) as usize;
        }
    }
    assert!(total > 1000);
    assert!(agree as f64 / total as f64 > 0.95, "{agree}/{total}");
}

/// The BEV position a camera pixel reads from projects back onto that pixel.
#[test]
fn bev_to_camera_points_back_at_the_pixel() {
    let scene = generate_scene(&SceneConfig::kitti_like(), 2, Corruption::None).unwrap();
    let f = &scene.frame;
    let bev = BevGeometry::default();
    let geom = GeometryConfig {
        bev,
        ..Default::default()
    };
    let g = frame_geometry(&f.cloud, &f.calib, ImageDims::new(f.image.width, f.image.height), &geom).unwrap();
    let t = &g.to_img.table;
    let (mut near, mut total) = (0, 0);
    for i in 0..t.target_len() {
        if !t.valid[i] {
            continue;
        }
        let (u, v) = t.coords[i];
        let (r, c) = (v.round() as usize, u.round() as usize);
        let Some(z) = g.bev_height.get(r, c) else { continue };
        let (x, y) = bev.from_grid(u, v);
        let Some((pu, pv, _)) = project_point(&f.calib, &Vector3::new(x, y, z)) else { continue };
        let (col, row) = ((i % t.target_width) as f64, (i / t.target_width) as f64);
        total += 1;
        near += ((pu - col).abs().max((pv - row).abs()) <= 2.0) as usize;
    }
    assert!(total > 1000);
    assert!(near as f64 / total as f64 > 0.95, "{near}/{total}");
}

#[test]
fn sample_tables_fit_feature_grids() {
    let f = load_frame(data_root(), "um_000003").unwrap();
    let geom = toy_geometry();
    let s = Sample::new(&f, None, &geom).unwrap();
    let (rows, cols) = (geom.bev.rows(), geom.bev.cols());
    let w = &s.warps;
    assert_eq!((w.to_img.target_height, w.to_img.target_width), (48 / IMG_STRIDE, 128 / IMG_STRIDE));
    assert_eq!((w.to_img.source_height, w.to_img.source_width), (rows / BEV_STRIDE, cols / BEV_STRIDE));
    assert_eq!((w.to_bev.source_height, w.to_bev.source_width), (48 / IMG_STRIDE, 128 / IMG_STRIDE));
    w.to_img.check_invariants().unwrap();
    w.to_bev.check_invariants().unwrap();
    assert_eq!(s.bev.dims(), [1, 6, rows, cols]);
    let r = rasterize(&f.cloud, &geom.bev).unwrap();
    assert_eq!(s.bev.data(), &r.grid.features[..]);
}
