//! Finite-difference check of every differentiable operator on seeded
//! random inputs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{bidirectional_fuse, cbf_gate, CbfParams, Combiner, FusionBlockParams, FusionWarps};
use crate::tensor::{finite_diff_check, Dims, FocalSpec, GradReport, Graph, Tensor, Var};
use crate::warp::WarpTable;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradReport,
}

fn random(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Table with fractional in-bounds coordinates on about 80% of targets.
pub fn random_warp(th: usize, tw: usize, sh: usize, sw: usize, rng: &mut ChaCha8Rng) -> WarpTable {
    let mut t = WarpTable::empty(th, tw, sh, sw);
    for i in 0..th * tw {
        if rng.gen_bool(0.8) {
            let u = rng.gen_range(0.0..(sw - 1) as f64);
            let v = rng.gen_range(0.0..(sh - 1) as f64);
            t.set(i, u, v).expect("in bounds");
        }
    }
    t
}

fn gate(v: &[Var], at: usize) -> CbfParams {
    CbfParams {
        w1: v[at],
        b1: Some(v[at + 1]),
        w2: v[at + 2],
        b2: Some(v[at + 3]),
    }
}

fn gate_inputs(channels: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let hidden = channels / 2;
    vec![
        random([hidden, channels, 1, 1], rng),
        random([1, hidden, 1, 1], rng),
        random([channels, hidden, 1, 1], rng),
        random([1, channels, 1, 1], rng),
    ]
}

/// Runs every check with central step `step`. Each entry's seed derives
/// from `seed`, so the suite is reproducible.
pub fn gradient_suite(step: f64, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name, report| out.push(SuiteEntry { name, report });

    let inputs = [random([2, 3, 6, 5], &mut rng), random([4, 3, 3, 3], &mut rng), random([1, 4, 1, 1], &mut rng)];
    push("conv2d", finite_diff_check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1), &inputs, step, seed)?);
    push(
        "conv2d_stride2",
        finite_diff_check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1), &inputs, step, seed + 1)?,
    );

    let inputs = [random([2, 3, 4, 5], &mut rng), random([4, 3, 1, 1], &mut rng)];
    push("conv1x1", finite_diff_check(|g, v| g.conv1x1(v[0], v[1]), &inputs, step, seed + 2)?);

    let inputs = [random([2, 3, 4, 5], &mut rng)];
    push("global_avg_pool", finite_diff_check(|g, v| g.global_avg_pool(v[0]), &inputs, step, seed + 3)?);

    let mut inputs = vec![random([2, 4, 3, 3], &mut rng)];
    inputs.extend(gate_inputs(4, &mut rng));
    push(
        "cbf_gate",
        finite_diff_check(|g, v| Ok(cbf_gate(g, v[0], &gate(v, 1))?.1), &inputs, step, seed + 4)?,
    );

    let table = Arc::new(random_warp(5, 4, 6, 7, &mut rng));
    let inputs = [random([2, 3, 6, 7], &mut rng)];
    push("warp_features", finite_diff_check(|g, v| g.warp(v[0], table.clone()), &inputs, step, seed + 5)?);

    let n = 2 * 1 * 5 * 6;
    let pred = Tensor::from_fn([2, 1, 5, 6], |_| rng.gen_range(0.05..0.95));
    let target: Arc<[f64]> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
    let mask: Arc<[bool]> = (0..n).map(|_| rng.gen_bool(0.85)).collect();
    let spec = FocalSpec { alpha: 0.25, gamma: 2.0 };
    push(
        "focal_loss",
        finite_diff_check(
            |g, v| g.focal_loss(v[0], target.clone(), mask.clone(), spec),
            &[pred],
            step,
            seed + 6,
        )?,
    );

    let (ci, cb) = (4, 2);
    let warps = FusionWarps {
        to_img: Arc::new(random_warp(3, 4, 5, 3, &mut rng)),
        to_bev: Arc::new(random_warp(5, 3, 3, 4, &mut rng)),
    };
    let mut inputs = vec![
        random([1, ci, 3, 4], &mut rng),
        random([1, cb, 5, 3], &mut rng),
        random([ci, cb, 1, 1], &mut rng),
        random([cb, ci, 1, 1], &mut rng),
    ];
    for c in [ci, ci, cb, cb] {
        inputs.extend(gate_inputs(c, &mut rng));
    }
    for (name, combiner, s) in [
        ("bidirectional_fuse", Combiner::Cbf, 7),
        ("bidirectional_fuse_add", Combiner::Add, 8),
    ] {
        let report = finite_diff_check(
            |g: &mut Graph, v: &[Var]| {
                let p = FusionBlockParams {
                    dt_to_img: v[2],
                    dt_to_bev: v[3],
                    img_gate: gate(v, 4),
                    bev_in_img_gate: gate(v, 8),
                    bev_gate: gate(v, 12),
                    img_in_bev_gate: gate(v, 16),
                };
                let (a, b) = bidirectional_fuse(g, v[0], v[1], &warps, &p, combiner)?;
                let wa = Arc::new(Tensor::from_fn(g.value(a).dims(), |i| ((i % 7) as f64 - 3.0) / 3.0));
                let wb = Arc::new(Tensor::from_fn(g.value(b).dims(), |i| ((i % 5) as f64 - 2.0) / 2.0));
                let (da, db) = (g.dot(a, wa)?, g.dot(b, wb)?);
                g.add(da, db)
            },
            &inputs,
            step,
            seed + s,
        )?;
        push(name, report);
    }
    Ok(out)
}
