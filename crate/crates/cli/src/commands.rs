use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bifnet::bev::{self, BEV_CHANNELS};
use bifnet::dst::{frame_geometry, FrameGeometry, GeometryConfig, HeightMap, ImageDims};
use bifnet::formats::{quantize, write_channel_dump, write_warp_table, Sidecar};
use bifnet::fusion::{bidirectional_fuse, Combiner, FusionBlockParams, FusionWarps};
use bifnet::gradsuite::gradient_suite;
use bifnet::kitti::{list_frame_ids, load_frame, write_frame, Frame, FramePaths};
use bifnet::loss::LossConfig;
use bifnet::metrics::{aggregate, evaluate, evaluate_in_bev, MetricsReport, ScoredMask};
use bifnet::raster::read_gray_unit;
use bifnet::tensor::{encode_checkpoint, Graph, ParamStore, Tensor};
use bifnet::training::net::image_tensor;
use bifnet::training::{
    generate_scene, log_csv, scene_samples, train_toy as run_training, MicroBiFNet, NetConfig, SceneConfig,
    TrainConfig,
};
use bifnet::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{
    EvalArgs, Failure, FrameArgs, FuseDemoArgs, GradcheckArgs, PresetArg, SpaceArg, SyntheticArgs, TrainArgs,
};

type CmdResult = std::result::Result<(), Failure>;

const CHANNEL_NAMES: [&str; BEV_CHANNELS] = [
    "max_height",
    "min_height",
    "mean_height",
    "max_intensity",
    "min_intensity",
    "mean_intensity",
];

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn frame_ids(root: &Path, requested: &[String]) -> Result<Vec<String>> {
    if requested.is_empty() {
        list_frame_ids(root)
    } else {
        Ok(requested.to_vec())
    }
}

fn geometry_sidecar(cfg: &GeometryConfig) -> Sidecar {
    let mut s = Sidecar::new();
    let b = &cfg.bev;
    s.set("x_min", b.x_min)
        .set("x_max", b.x_max)
        .set("y_min", b.y_min)
        .set("y_max", b.y_max)
        .set("resolution", b.resolution)
        .set("rows", b.rows())
        .set("cols", b.cols());
    s
}

fn dump(dir: &Path, stem: &str, w: usize, h: usize, values: &[f64], valid: Option<&[bool]>, extra: &Sidecar) -> Result<()> {
    let q = quantize(w, h, values, valid)?;
    write_channel_dump(dir, stem, &q, extra)
}

fn dump_height(dir: &Path, stem: &str, map: &HeightMap, extra: &Sidecar) -> Result<()> {
    dump(dir, stem, map.width, map.height, &map.values, Some(&map.valid), extra)
}

/// Runs `f` over every frame on the current pool, keeping input order.
fn per_frame(ids: &[String], f: impl Fn(&str) -> Result<()> + Sync) -> Result<()> {
    ids.par_iter()
        .map(|id| f(id))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn frame_dir(out: &Path, id: &str) -> Result<PathBuf> {
    let dir = out.join(id);
    mkdir(&dir)?;
    Ok(dir)
}

fn geometry_of(frame: &Frame, cfg: &GeometryConfig) -> Result<FrameGeometry> {
    let dims = ImageDims::new(frame.image.width, frame.image.height);
    frame_geometry(&frame.cloud, &frame.calib, dims, cfg)
}

pub fn rasterize(a: &FrameArgs) -> CmdResult {
    let cfg = a.geometry.config()?;
    let ids = frame_ids(&a.root, &a.frames)?;
    per_frame(&ids, |id| {
        let frame = load_frame(&a.root, id)?;
        let r = bev::rasterize(&frame.cloud, &cfg.bev)?;
        let dir = frame_dir(&a.out, id)?;
        let (rows, cols) = (cfg.bev.rows(), cfg.bev.cols());
        let occupied: Vec<bool> = r.grid.counts.iter().map(|&c| c > 0).collect();
        let mut extra = geometry_sidecar(&cfg);
        extra.set("points", frame.cloud.len()).set("skipped", r.skipped);
        for (ch, name) in CHANNEL_NAMES.iter().enumerate() {
            extra.set("channel", name);
            dump(&dir, &format!("bev_{name}"), cols, rows, r.grid.channel(ch), Some(&occupied), &extra)?;
        }
        let counts: Vec<f64> = r.grid.counts.iter().map(|&c| c as f64).collect();
        extra.set("channel", "count");
        dump(&dir, "bev_count", cols, rows, &counts, None, &extra)
    })?;
    Ok(())
}

pub fn heightmap(a: &FrameArgs) -> CmdResult {
    let cfg = a.geometry.config()?;
    let ids = frame_ids(&a.root, &a.frames)?;
    per_frame(&ids, |id| {
        let frame = load_frame(&a.root, id)?;
        let g = geometry_of(&frame, &cfg)?;
        let dir = frame_dir(&a.out, id)?;
        let mut extra = Sidecar::new();
        extra.set("projected", g.projected.points.len());
        dump_height(&dir, "persp_height", &g.persp_height, &extra)?;
        let mut extra = geometry_sidecar(&cfg);
        extra.set("arrangement_dropped", g.arrangement.dropped);
        dump_height(&dir, "bev_height", &g.bev_height, &extra)
    })?;
    Ok(())
}

pub fn warp(a: &FrameArgs) -> CmdResult {
    let cfg = a.geometry.config()?;
    let ids = frame_ids(&a.root, &a.frames)?;
    per_frame(&ids, |id| {
        let frame = load_frame(&a.root, id)?;
        let g = geometry_of(&frame, &cfg)?;
        let dir = frame_dir(&a.out, id)?;
        write_warp_table(&dir.join("to_bev.bfwt"), &g.to_bev.table)?;
        write_warp_table(&dir.join("to_img.bfwt"), &g.to_img.table)?;
        let mut s = geometry_sidecar(&cfg);
        for (name, b) in [("to_bev", &g.to_bev), ("to_img", &g.to_img)] {
            s.set(&format!("{name}.valid"), b.table.valid_count())
                .set(&format!("{name}.scattered"), b.scattered)
                .set(&format!("{name}.skipped"), b.skipped);
        }
        write_text(&dir.join("warp.txt"), &s.to_text())
    })?;
    Ok(())
}

/// Per-pixel L2 norm over channels of a `[1, C, H, W]` tensor.
fn channel_norm(t: &Tensor) -> Vec<f64> {
    let hw = t.height() * t.width();
    (0..hw)
        .map(|i| (0..t.channels()).map(|c| t.plane(0, c)[i].powi(2)).sum::<f64>().sqrt())
        .collect()
}

pub fn fuse_demo(a: &FuseDemoArgs) -> CmdResult {
    let cfg = a.geometry.config()?;
    let c = a.channels;
    if c == 0 || c % 4 != 0 {
        return Err(Failure::Usage(format!("--channels {c} must be a positive multiple of 4")));
    }
    let frame = load_frame(&a.root, &a.frame)?;
    let dir = a.out.clone();
    mkdir(&dir)?;
    let (w, h) = (frame.image.width, frame.image.height);
    let g = geometry_of(&frame, &cfg)?;

    let mut depth = vec![0.0; w * h];
    let mut hit = vec![false; w * h];
    for p in &g.projected.points {
        let i = (p.v.round() as usize).min(h - 1) * w + (p.u.round() as usize).min(w - 1);
        if !hit[i] || p.depth < depth[i] {
            depth[i] = p.depth;
            hit[i] = true;
        }
    }
    let none = Sidecar::new();
    let geo = geometry_sidecar(&cfg);
    dump(&dir, "01_depth", w, h, &depth, Some(&hit), &none)?;
    dump_height(&dir, "02_persp_height", &g.persp_height, &none)?;
    dump_height(&dir, "03_bev_height", &g.bev_height, &geo)?;
    write_warp_table(&dir.join("04_to_bev.bfwt"), &g.to_bev.table)?;
    write_warp_table(&dir.join("04_to_img.bfwt"), &g.to_img.table)?;

    let r = bev::rasterize(&frame.cloud, &cfg.bev)?;
    let (rows, cols) = (cfg.bev.rows(), cfg.bev.cols());
    let bev_in = Tensor::from_vec([1, BEV_CHANNELS, rows, cols], r.grid.features.clone())?;
    let img_in = image_tensor(&frame.image)?;

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut store = ParamStore::new();
    store.insert_glorot("demo.img_proj", [c, 3, 1, 1], 3, c, &mut rng);
    store.insert_glorot("demo.bev_proj", [c, BEV_CHANNELS, 1, 1], BEV_CHANNELS, c, &mut rng);
    FusionBlockParams::init(&mut store, "fuse", c, c, 4, true, &mut rng)?;

    let mut graph = Graph::new();
    let xi = graph.input(img_in)?;
    let xb = graph.input(bev_in)?;
    let wi = graph.param("demo.img_proj", store.require("demo.img_proj")?.clone())?;
    let wb = graph.param("demo.bev_proj", store.require("demo.bev_proj")?.clone())?;
    let fi = graph.conv1x1(xi, wi)?;
    let fi = graph.relu(fi)?;
    let fb = graph.conv1x1(xb, wb)?;
    let fb = graph.relu(fb)?;
    let p = FusionBlockParams::bind(&mut graph, &store, "fuse")?;
    let warps = FusionWarps {
        to_img: Arc::new(g.to_img.table.clone()),
        to_bev: Arc::new(g.to_bev.table.clone()),
    };
    let (oi, ob) = bidirectional_fuse(&mut graph, fi, fb, &warps, &p, Combiner::Cbf)?;

    let stages = [
        ("05_img_features", fi, w, h, &none),
        ("05_bev_features", fb, cols, rows, &geo),
        ("06_fused_img", oi, w, h, &none),
        ("06_fused_bev", ob, cols, rows, &geo),
    ];
    let mut summary = geometry_sidecar(&cfg);
    summary
        .set("frame", &a.frame)
        .set("seed", a.seed)
        .set("channels", c)
        .set("projected", g.projected.points.len())
        .set("to_bev.valid", g.to_bev.table.valid_count())
        .set("to_img.valid", g.to_img.table.valid_count());
    for (stem, var, sw, sh, extra) in stages {
        let t = graph.value(var);
        if !t.is_finite() {
            return Err(Failure::Numeric(format!("{stem} has non-finite values")));
        }
        let norm = channel_norm(t);
        summary.set(&format!("{stem}.mean_norm"), norm.iter().sum::<f64>() / norm.len() as f64);
        dump(&dir, stem, sw, sh, &norm, None, extra)?;
    }
    write_text(&dir.join("summary.txt"), &summary.to_text())?;
    Ok(())
}

pub fn train_toy(a: &TrainArgs) -> CmdResult {
    let loss = LossConfig {
        alpha: a.alpha,
        gamma: a.gamma,
        beta: a.beta,
    };
    let cfg = TrainConfig {
        lr: a.lr,
        iterations: a.iters,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    loss.validate()?;
    if a.scenes == 0 {
        return Err(Failure::Usage("--scenes must be at least 1".into()));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    let corruption = a.corrupt.into();
    let samples = scene_samples(&SceneConfig::toy(), (0..a.scenes).map(|s| (s, corruption)))?;
    let mut net = MicroBiFNet::new(
        NetConfig {
            mode: a.mode.into(),
            ..NetConfig::default()
        },
        a.seed,
    )?;
    let log = run_training(&samples, &mut net, &cfg, &loss, |_| {})?;
    write_text(&a.out.with_extension("csv"), &log_csv(&log))?;
    let bytes = encode_checkpoint(&net.params);
    std::fs::write(&a.out, bytes).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let last = log.last().expect("at least one iteration");
    println!("iterations {} final loss {:e}", log.len(), last.total);
    Ok(())
}

fn score_path(dir: &Path, id: &str) -> PathBuf {
    let direct = dir.join(format!("{id}.png"));
    if direct.exists() {
        return direct;
    }
    let gt_name = FramePaths::new(Path::new(""), id).gt;
    dir.join(gt_name.file_name().expect("gt file name"))
}

fn eval_frame(a: &EvalArgs, cfg: &GeometryConfig, id: &str) -> Result<MetricsReport> {
    let frame = load_frame(&a.root, id)?;
    let gt = frame
        .gt
        .as_ref()
        .ok_or_else(|| Error::Config(format!("frame {id} has no ground truth")))?;
    let path = score_path(&a.scores, id);
    let (w, h, scores) = read_gray_unit(&path)?;
    if (w, h) != (gt.width, gt.height) {
        return Err(Error::Image(format!(
            "{}: {w}x{h} scores for a {}x{} ground truth",
            path.display(),
            gt.width,
            gt.height
        )));
    }
    match a.space {
        SpaceArg::Perspective => evaluate(&ScoredMask::new(scores, gt.road.clone(), gt.valid.clone())?),
        SpaceArg::Bev => {
            let g = geometry_of(&frame, cfg)?;
            evaluate_in_bev(&scores, gt, &g.to_bev.table)
        }
    }
    .map_err(|e| e.context(format!("frame {id}")))
}

fn report_row(out: &mut String, id: &str, r: &MetricsReport) {
    writeln!(
        out,
        "{id},{:.2},{:.2},{:.2},{:.2},{:.6}",
        r.max_f, r.ap, r.precision, r.recall, r.threshold
    )
    .expect("string write");
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let cfg = a.geometry.config()?;
    let ids = frame_ids(&a.root, &a.frames)?;
    if ids.is_empty() {
        return Err(Failure::Usage("no frames to evaluate".into()));
    }
    let reports = ids
        .par_iter()
        .map(|id| eval_frame(a, &cfg, id))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("frame_id,MaxF,AP,PRE,REC,threshold\n");
    for (id, r) in ids.iter().zip(&reports) {
        report_row(&mut csv, id, r);
    }
    let mean = aggregate(&reports).expect("nonempty");
    report_row(&mut csv, "aggregate", &mean);
    mkdir(&a.out)?;
    write_text(&a.out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    if !(a.step > 0.0 && a.tolerance > 0.0) {
        return Err(Failure::Usage("--step and --tolerance must be positive".into()));
    }
    let suite = gradient_suite(a.step, a.seed)?;
    let mut failed = Vec::new();
    for e in &suite {
        let ok = e.report.passes(a.tolerance);
        println!(
            "{:<24} {} max_rel_error {:.3e} over {} coordinates",
            e.name,
            if ok { "PASS" } else { "FAIL" },
            e.report.max_rel_error,
            e.report.checked
        );
        if !ok {
            failed.push(e.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn make_synthetic(a: &SyntheticArgs) -> CmdResult {
    let cfg = match a.preset {
        PresetArg::Toy => SceneConfig::toy(),
        PresetArg::Kitti => SceneConfig::kitti_like(),
    };
    let seeds: Vec<u64> = (a.seed..a.seed.saturating_add(a.count)).collect();
    seeds
        .par_iter()
        .map(|&s| {
            let scene = generate_scene(&cfg, s, a.corrupt.into())?;
            write_frame(&a.out, &scene.frame)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<()>>()?;
    Ok(())
}
