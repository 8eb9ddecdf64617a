//! Cross-space fusion: the context gate, the 1x1 domain transform and the
//! bidirectional block that exchanges features between image and BEV.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::warp::WarpTable;

pub const DEFAULT_REDUCTION: usize = 4;

/// Graph handles of one gate: `C -> C/r` and `C/r -> C` affine layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CbfParams {
    pub w1: Var,
    pub b1: Option<Var>,
    pub w2: Var,
    pub b2: Option<Var>,
}

impl CbfParams {
    /// Adds gate weights for `channels` inputs to `store` under `prefix`.
    /// Biases start at zero.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        if reduction == 0 || channels == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "gate reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        store.insert_glorot(format!("{prefix}.w1"), [hidden, channels, 1, 1], channels, hidden, rng);
        store.insert_glorot(format!("{prefix}.w2"), [channels, hidden, 1, 1], hidden, channels, rng);
        if bias {
            store.insert(format!("{prefix}.b1"), Tensor::zeros([1, hidden, 1, 1]));
            store.insert(format!("{prefix}.b2"), Tensor::zeros([1, channels, 1, 1]));
        }
        Ok(())
    }

    /// Registers the gate stored under `prefix` on `g`. Biases are used when
    /// present in the store.
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut bind = |name: String| g.param(name.clone(), store.require(&name)?.clone());
        let w1 = bind(format!("{prefix}.w1"))?;
        let w2 = bind(format!("{prefix}.w2"))?;
        let b1 = match store.get(&format!("{prefix}.b1")) {
            Some(_) => Some(bind(format!("{prefix}.b1"))?),
            None => None,
        };
        let b2 = match store.get(&format!("{prefix}.b2")) {
            Some(_) => Some(bind(format!("{prefix}.b2"))?),
            None => None,
        };
        Ok(CbfParams { w1, b1, w2, b2 })
    }
}

/// Context gate: `mu = sigmoid(W2 relu(W1 mean(f) + b1) + b2)` and the
/// channel-reweighted features `mu_c * f_c`. Returns `(mu, gated)`.
pub fn cbf_gate(g: &mut Graph, f: Var, p: &CbfParams) -> Result<(Var, Var)> {
    let kappa = g.global_avg_pool(f)?;
    let hidden = g.linear(kappa, p.w1, p.b1)?;
    let hidden = g.relu(hidden)?;
    let logits = g.linear(hidden, p.w2, p.b2)?;
    let mu = g.sigmoid(logits)?;
    let gated = g.channel_scale(f, mu)?;
    Ok((mu, gated))
}

/// Gates both streams independently and adds them.
pub fn cbf_fuse(g: &mut Graph, fa: Var, fb: Var, pa: &CbfParams, pb: &CbfParams) -> Result<Var> {
    let da = g.value(fa).dims();
    let db = g.value(fb).dims();
    if da != db {
        return Err(Error::Shape(format!("cbf_fuse: {da:?} vs {db:?}")));
    }
    let (_, a) = cbf_gate(g, fa, pa)?;
    let (_, b) = cbf_gate(g, fb, pb)?;
    g.add(a, b)
}

/// How the two streams are combined inside a fusion block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combiner {
    Add,
    Cbf,
}

/// Graph handles of one bidirectional block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionBlockParams {
    /// BEV channels to image channels, `[C_img, C_bev, 1, 1]`.
    pub dt_to_img: Var,
    /// Image channels to BEV channels, `[C_bev, C_img, 1, 1]`.
    pub dt_to_bev: Var,
    pub img_gate: CbfParams,
    pub bev_in_img_gate: CbfParams,
    pub bev_gate: CbfParams,
    pub img_in_bev_gate: CbfParams,
}

const GATES: [&str; 4] = ["img_gate", "bev_in_img_gate", "bev_gate", "img_in_bev_gate"];

impl FusionBlockParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        img_channels: usize,
        bev_channels: usize,
        reduction: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        store.insert_glorot(
            format!("{prefix}.dt_to_img"),
            [img_channels, bev_channels, 1, 1],
            bev_channels,
            img_channels,
            rng,
        );
        store.insert_glorot(
            format!("{prefix}.dt_to_bev"),
            [bev_channels, img_channels, 1, 1],
            img_channels,
            bev_channels,
            rng,
        );
        for (name, ch) in GATES.iter().zip([img_channels, img_channels, bev_channels, bev_channels]) {
            CbfParams::init(store, &format!("{prefix}.{name}"), ch, reduction, bias, rng)?;
        }
        Ok(())
    }

    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let dt_name = |s: &str| format!("{prefix}.{s}");
        let dt_to_img = g.param(dt_name("dt_to_img"), store.require(&dt_name("dt_to_img"))?.clone())?;
        let dt_to_bev = g.param(dt_name("dt_to_bev"), store.require(&dt_name("dt_to_bev"))?.clone())?;
        let mut gates = Vec::with_capacity(4);
        for name in GATES {
            gates.push(CbfParams::bind(g, store, &format!("{prefix}.{name}"))?);
        }
        Ok(FusionBlockParams {
            dt_to_img,
            dt_to_bev,
            img_gate: gates[0],
            bev_in_img_gate: gates[1],
            bev_gate: gates[2],
            img_in_bev_gate: gates[3],
        })
    }
}

/// Warp tables at feature resolution for both directions.
#[derive(Clone, Debug)]
pub struct FusionWarps {
    /// Camera targets, BEV sources.
    pub to_img: Arc<WarpTable>,
    /// BEV targets, camera sources.
    pub to_bev: Arc<WarpTable>,
}

/// One exchange between spaces. Each branch warps the partner's features
/// into its own space, maps channels with the domain transform and combines
/// with its own features. Returns `(fused_img, fused_bev)`.
pub fn bidirectional_fuse(
    g: &mut Graph,
    f_img: Var,
    f_bev: Var,
    warps: &FusionWarps,
    p: &FusionBlockParams,
    combiner: Combiner,
) -> Result<(Var, Var)> {
    let [_, _, ih, iw] = g.value(f_img).dims();
    let [_, _, bh, bw] = g.value(f_bev).dims();
    let (ti, tb) = (&warps.to_img, &warps.to_bev);
    if (ti.target_height, ti.target_width, ti.source_height, ti.source_width) != (ih, iw, bh, bw)
        || (tb.target_height, tb.target_width, tb.source_height, tb.source_width) != (bh, bw, ih, iw)
    {
        return Err(Error::Shape(format!(
            "warp tables do not match image features {ih}x{iw} and BEV features {bh}x{bw}"
        )));
    }
    let bev_in_img = g.warp(f_bev, warps.to_img.clone())?;
    let bev_in_img = g.conv1x1(bev_in_img, p.dt_to_img)?;
    let img_in_bev = g.warp(f_img, warps.to_bev.clone())?;
    let img_in_bev = g.conv1x1(img_in_bev, p.dt_to_bev)?;
    match combiner {
        Combiner::Cbf => {
            let img = cbf_fuse(g, f_img, bev_in_img, &p.img_gate, &p.bev_in_img_gate)?;
            let bev = cbf_fuse(g, f_bev, img_in_bev, &p.bev_gate, &p.img_in_bev_gate)?;
            Ok((img, bev))
        }
        Combiner::Add => Ok((g.add(f_img, bev_in_img)?, g.add(f_bev, img_in_bev)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    fn gate_params(g: &mut Graph, c: usize, h: usize, w1: f64, w2: f64, b2: f64) -> CbfParams {
        CbfParams {
            w1: g.input(Tensor::full([h, c, 1, 1], w1)).unwrap(),
            b1: Some(g.input(Tensor::zeros([1, h, 1, 1])).unwrap()),
            w2: g.input(Tensor::full([c, h, 1, 1], w2)).unwrap(),
            b2: Some(g.input(Tensor::full([1, c, 1, 1], b2)).unwrap()),
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_gate_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = random([1, 4, 3, 3], &mut rng);
        let f = g.input(x.clone()).unwrap();
        let p = gate_params(&mut g, 4, 1, 0.0, 0.0, 0.0);
        let (mu, out) = cbf_gate(&mut g, f, &p).unwrap();
        assert!(g.value(mu).data().iter().all(|&m| m == 0.5));
        assert_eq!(g.value(out), &x.map(|v| v * 0.5));
    }

    #[test]
    fn saturated_gate_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = random([1, 4, 3, 3], &mut rng);
        let f = g.input(x.clone()).unwrap();
        let p = gate_params(&mut g, 4, 1, 0.3, 0.0, 40.0);
        let (_, out) = cbf_gate(&mut g, f, &p).unwrap();
        assert!(g.value(out).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn gate_matches_hand_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h) = (8, 2);
        let x = random([1, c, 4, 5], &mut rng);
        let w1 = random([h, c, 1, 1], &mut rng);
        let b1 = random([1, h, 1, 1], &mut rng);
        let w2 = random([c, h, 1, 1], &mut rng);
        let b2 = random([1, c, 1, 1], &mut rng);
        let mut g = Graph::new();
        let f = g.input(x.clone()).unwrap();
        let p = CbfParams {
            w1: g.input(w1.clone()).unwrap(),
            b1: Some(g.input(b1.clone()).unwrap()),
            w2: g.input(w2.clone()).unwrap(),
            b2: Some(g.input(b2.clone()).unwrap()),
        };
        let (mu, _) = cbf_gate(&mut g, f, &p).unwrap();
        let kappa: Vec<f64> = (0..c).map(|ch| x.plane(0, ch).iter().sum::<f64>() / 20.0).collect();
        let hidden: Vec<f64> = (0..h)
            .map(|j| (b1.data()[j] + (0..c).map(|i| w1.data()[j * c + i] * kappa[i]).sum::<f64>()).max(0.0))
            .collect();
        for k in 0..c {
            let z = b2.data()[k] + (0..h).map(|j| w2.data()[k * h + j] * hidden[j]).sum::<f64>();
            let m = g.value(mu).data()[k];
            assert!((m - sig(z)).abs() < 1e-12);
            assert!(m > 0.0 && m < 1.0);
        }
    }

    #[test]
    fn symmetric_fuse_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([1, 4, 2, 3], &mut rng);
        let mut g = Graph::new();
        let a = g.input(x.clone()).unwrap();
        let b = g.input(x).unwrap();
        let p = gate_params(&mut g, 4, 1, 0.2, -0.4, 0.1);
        let out = cbf_fuse(&mut g, a, b, &p, &p).unwrap();
        let (_, gated) = cbf_gate(&mut g, a, &p).unwrap();
        let twice = g.value(gated).map(|v| 2.0 * v);
        assert!(g.value(out).max_abs_diff(&twice) < 1e-15);
    }

    fn identity_dt(g: &mut Graph, c: usize) -> Var {
        g.input(Tensor::from_fn([c, c, 1, 1], |i| (i / c == i % c) as u8 as f64)).unwrap()
    }

    fn saturated_block(g: &mut Graph, c: usize) -> FusionBlockParams {
        let gate = gate_params(g, c, 1, 0.0, 0.0, 60.0);
        FusionBlockParams {
            dt_to_img: identity_dt(g, c),
            dt_to_bev: identity_dt(g, c),
            img_gate: gate,
            bev_in_img_gate: gate,
            bev_gate: gate,
            img_in_bev_gate: gate,
        }
    }

    #[test]
    fn transparent_block_sums_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (xi, xb) = (random([1, 4, 3, 3], &mut rng), random([1, 4, 3, 3], &mut rng));
        let mut g = Graph::new();
        let (fi, fb) = (g.input(xi.clone()).unwrap(), g.input(xb.clone()).unwrap());
        let p = saturated_block(&mut g, 4);
        let warps = FusionWarps {
            to_img: Arc::new(WarpTable::identity(3, 3)),
            to_bev: Arc::new(WarpTable::identity(3, 3)),
        };
        let sum = Tensor::from_fn(xi.dims(), |i| xi.data()[i] + xb.data()[i]);
        for combiner in [Combiner::Cbf, Combiner::Add] {
            let (oi, ob) = bidirectional_fuse(&mut g, fi, fb, &warps, &p, combiner).unwrap();
            assert!(g.value(oi).max_abs_diff(&sum) < 1e-14);
            assert!(g.value(ob).max_abs_diff(&sum) < 1e-14);
        }
    }

    #[test]
    fn invalid_warps_keep_self_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (xi, xb) = (random([1, 4, 2, 5], &mut rng), random([1, 4, 3, 3], &mut rng));
        let mut g = Graph::new();
        let (fi, fb) = (g.input(xi.clone()).unwrap(), g.input(xb.clone()).unwrap());
        let p = saturated_block(&mut g, 4);
        let warps = FusionWarps {
            to_img: Arc::new(WarpTable::empty(2, 5, 3, 3)),
            to_bev: Arc::new(WarpTable::empty(3, 3, 2, 5)),
        };
        let (oi, ob) = bidirectional_fuse(&mut g, fi, fb, &warps, &p, Combiner::Cbf).unwrap();
        assert!(g.value(oi).max_abs_diff(&xi) < 1e-15);
        assert!(g.value(ob).max_abs_diff(&xb) < 1e-15);
        // swapped tables are a resolution mismatch
        let swapped = FusionWarps {
            to_img: warps.to_bev.clone(),
            to_bev: warps.to_img.clone(),
        };
        assert!(bidirectional_fuse(&mut g, fi, fb, &swapped, &p, Combiner::Cbf).is_err());
    }

    #[test]
    fn store_round_trip_binds_all_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        FusionBlockParams::init(&mut store, "fuse", 8, 4, 4, true, &mut rng).unwrap();
        assert_eq!(store.len(), 2 + 4 * 4);
        let mut g = Graph::new();
        FusionBlockParams::bind(&mut g, &store, "fuse").unwrap();
        assert_eq!(g.params().len(), store.len());
        assert!(CbfParams::init(&mut store, "bad", 6, 4, false, &mut rng).is_err());
    }

    #[test]
    fn gate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![
            random([1, 4, 3, 3], &mut rng),
            random([2, 4, 1, 1], &mut rng),
            random([1, 2, 1, 1], &mut rng),
            random([4, 2, 1, 1], &mut rng),
            random([1, 4, 1, 1], &mut rng),
        ];
        let report = finite_diff_check(
            |g, v| {
                let p = CbfParams {
                    w1: v[1],
                    b1: Some(v[2]),
                    w2: v[3],
                    b2: Some(v[4]),
                };
                Ok(cbf_gate(g, v[0], &p)?.1)
            },
            &inputs,
            1e-5,
            9,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }
}
