use std::sync::Arc;

use super::{Dims, Tensor};
use crate::error::{Error, Result};
use crate::loss::focal_pixel;
use crate::warp::WarpTable;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalSpec {
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Conv1x1 {
        x: Var,
        w: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Warp {
        x: Var,
        table: Arc<WarpTable>,
    },
    Focal {
        pred: Var,
        target: Arc<[f64]>,
        mask: Arc<[bool]>,
        spec: FocalSpec,
        count: usize,
    },
    Dot {
        x: Var,
        weights: Arc<Tensor>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "fully_connected",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Warp { .. } => "warp_features",
            Op::Focal { .. } => "focal_loss",
            Op::Dot { .. } => "dot",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Nodes are recorded in execution order and
/// [`Graph::backward`] visits them in exact reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// Records a named parameter; its gradient is reported by
    /// [`Gradients::params`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.params.push((name.into(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        )
    }

    /// Per-pixel channel map `out[k] = sum_c w[k, c] * x[c]`; `w` is `[K, C, 1, 1]`.
    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [b, c, h, wd] = xv.dims();
        let [k, wc, kh, kw] = wv.dims();
        if wc != c || kh != 1 || kw != 1 {
            return Err(shape_err(
                "conv1x1",
                format!("weights {:?} for input {:?}", wv.dims(), xv.dims()),
            ));
        }
        let hw = h * wd;
        let mut out = Tensor::zeros([b, k, h, wd]);
        for bi in 0..b {
            for ki in 0..k {
                let o0 = (bi * k + ki) * hw;
                for ci in 0..c {
                    let wkc = wv.data()[ki * c + ci];
                    let xp = xv.plane(bi, ci);
                    let op = &mut out.data_mut()[o0..o0 + hw];
                    for (o, &xv) in op.iter_mut().zip(xp) {
                        *o += wkc * xv;
                    }
                }
            }
        }
        self.push(out, Op::Conv1x1 { x, w })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims();
        let n = (h * w) as f64;
        let out = Tensor::from_fn([b, c, 1, 1], |i| xv.plane(i / c, i % c).iter().sum::<f64>() / n);
        self.push(out, Op::GlobalAvgPool { x })
    }

    /// Affine map over channels of a `[B, C, 1, 1]` input; `w` is
    /// `[K, C, 1, 1]`, `b` is `[1, K, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [bn, c, h, wd] = xv.dims();
        let [k, wc, kh, kw] = wv.dims();
        if h != 1 || wd != 1 || wc != c || kh != 1 || kw != 1 {
            return Err(shape_err(
                "fully_connected",
                format!("weights {:?} for input {:?}", wv.dims(), xv.dims()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).dims() != [1, k, 1, 1] {
                return Err(shape_err(
                    "fully_connected",
                    format!("bias {:?}, expected [1, {k}, 1, 1]", self.value(b).dims()),
                ));
            }
        }
        let bias = b.map(|b| self.value(b));
        let out = Tensor::from_fn([bn, k, 1, 1], |i| {
            let (bi, ki) = (i / k, i % k);
            let mut acc = bias.map_or(0.0, |t| t.data()[ki]);
            for ci in 0..c {
                acc += wv.data()[ki * c + ci] * xv.data()[bi * c + ci];
            }
            acc
        });
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    /// `out[b, c] = s[b, c] * x[b, c]` with `s` of dims `[B, C, 1, 1]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let [b, c, h, w] = xv.dims();
        if sv.dims() != [b, c, 1, 1] {
            return Err(shape_err(
                "channel_scale",
                format!("scale {:?} for input {:?}", sv.dims(), xv.dims()),
            ));
        }
        let hw = h * w;
        let out = Tensor::from_fn(xv.dims(), |i| sv.data()[i / hw] * xv.data()[i]);
        self.push(out, Op::ChannelScale { x, s })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.dims(), bv.dims())));
        }
        let out = Tensor::from_fn(av.dims(), |i| av.data()[i] + bv.data()[i]);
        self.push(out, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| k * v);
        self.push(out, Op::Scale { x, k })
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edges
    /// clamped).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(shape_err("bilinear_upsample", "factor must be positive".into()));
        }
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims();
        let (oh, ow) = (h * factor, w * factor);
        let rows = axis_taps(h, factor);
        let cols = axis_taps(w, factor);
        let mut out = Tensor::zeros([b, c, oh, ow]);
        for p in 0..b * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            for (r, &(r0, r1, tr)) in rows.iter().enumerate() {
                for (cc, &(c0, c1, tc)) in cols.iter().enumerate() {
                    let top = (1.0 - tc) * src[r0 * w + c0] + tc * src[r0 * w + c1];
                    let bot = (1.0 - tc) * src[r1 * w + c0] + tc * src[r1 * w + c1];
                    dst[r * ow + cc] = (1.0 - tr) * top + tr * bot;
                }
            }
        }
        self.push(out, Op::Upsample { x, factor })
    }

    /// Bilinear resampling through a warp table; invalid targets are zero.
    pub fn warp(&mut self, x: Var, table: Arc<WarpTable>) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims();
        if (h, w) != (table.source_height, table.source_width) {
            return Err(shape_err(
                "warp_features",
                format!(
                    "input is {h}x{w}, table source is {}x{}",
                    table.source_height, table.source_width
                ),
            ));
        }
        let (th, tw) = (table.target_height, table.target_width);
        let mut out = Tensor::zeros([b, c, th, tw]);
        for p in 0..b * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * th * tw..(p + 1) * th * tw];
            for (t, o) in dst.iter_mut().enumerate() {
                if let Some((taps, n)) = table.taps(t) {
                    *o = taps[..n].iter().map(|&(i, wt)| wt * src[i]).sum();
                }
            }
        }
        self.push(out, Op::Warp { x, table })
    }

    /// Mean focal loss over `mask`ed elements of `pred` against binary
    /// `target`.
    pub fn focal_loss(
        &mut self,
        pred: Var,
        target: Arc<[f64]>,
        mask: Arc<[bool]>,
        spec: FocalSpec,
    ) -> Result<Var> {
        let pv = self.value(pred);
        if target.len() != pv.len() || mask.len() != pv.len() {
            return Err(shape_err(
                "focal_loss",
                format!(
                    "prediction has {} elements, target {}, mask {}",
                    pv.len(),
                    target.len(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Config("focal_loss: mask selects no pixels".into()));
        }
        let mut total = 0.0;
        for ((&y, &g), _) in pv.data().iter().zip(target.iter()).zip(mask.iter()).filter(|(_, &m)| m) {
            total += focal_pixel(y, g, spec.alpha, spec.gamma).0;
        }
        let out = Tensor::scalar(total / count as f64);
        self.push(
            out,
            Op::Focal {
                pred,
                target,
                mask,
                spec,
                count,
            },
        )
    }

    /// Scalar `sum(x * weights)` for a constant weight tensor.
    pub fn dot(&mut self, x: Var, weights: Arc<Tensor>) -> Result<Var> {
        let xv = self.value(x);
        if xv.dims() != weights.dims() {
            return Err(shape_err(
                "dot",
                format!("{:?} vs {:?}", xv.dims(), weights.dims()),
            ));
        }
        let v = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(v), Op::Dot { x, weights })
    }

    /// Reverse pass from a single-element output. Every recorded node that
    /// influences `loss` receives an accumulated gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.value(loss).dims(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (var, grad) in self.local_grads(node, &g) {
                match &mut adj[var.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
            adj[idx] = Some(g);
        }
        Ok(Gradients { grads: adj })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), g, *stride, *padding);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Conv1x1 { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [bn, c, h, wd] = xv.dims();
                let k = wv.dims()[0];
                let hw = h * wd;
                let mut dx = Tensor::zeros(xv.dims());
                let mut dw = Tensor::zeros(wv.dims());
                for bi in 0..bn {
                    for ki in 0..k {
                        let gp = g.plane(bi, ki);
                        for ci in 0..c {
                            let xp = xv.plane(bi, ci);
                            dw.data_mut()[ki * c + ci] +=
                                gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                            let wkc = wv.data()[ki * c + ci];
                            let d0 = (bi * c + ci) * hw;
                            for (d, &gv) in dx.data_mut()[d0..d0 + hw].iter_mut().zip(gp) {
                                *d += wkc * gv;
                            }
                        }
                    }
                }
                vec![(*x, dx), (*w, dw)]
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let [_, c, h, w] = xv.dims();
                let n = (h * w) as f64;
                let hw = h * w;
                let dx = Tensor::from_fn(xv.dims(), |i| {
                    let p = i / hw;
                    g.data()[(p / c) * c + p % c] / n
                });
                vec![(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [bn, c, _, _] = xv.dims();
                let k = wv.dims()[0];
                let mut dx = Tensor::zeros(xv.dims());
                let mut dw = Tensor::zeros(wv.dims());
                let mut db = Tensor::zeros([1, k, 1, 1]);
                for bi in 0..bn {
                    for ki in 0..k {
                        let gk = g.data()[bi * k + ki];
                        db.data_mut()[ki] += gk;
                        for ci in 0..c {
                            dw.data_mut()[ki * c + ci] += gk * xv.data()[bi * c + ci];
                            dx.data_mut()[bi * c + ci] += gk * wv.data()[ki * c + ci];
                        }
                    }
                }
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = Tensor::from_fn(xv.dims(), |i| {
                    if xv.data()[i] > 0.0 {
                        g.data()[i]
                    } else {
                        0.0
                    }
                });
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let dx = Tensor::from_fn(y.dims(), |i| {
                    let s = y.data()[i];
                    g.data()[i] * s * (1.0 - s)
                });
                vec![(*x, dx)]
            }
            Op::ChannelScale { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let [_, _, h, w] = xv.dims();
                let hw = h * w;
                let dx = Tensor::from_fn(xv.dims(), |i| sv.data()[i / hw] * g.data()[i]);
                let ds = Tensor::from_fn(sv.dims(), |p| {
                    let r = p * hw..(p + 1) * hw;
                    g.data()[r.clone()]
                        .iter()
                        .zip(&xv.data()[r])
                        .map(|(a, b)| a * b)
                        .sum()
                });
                vec![(*x, dx), (*s, ds)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale { x, k } => vec![(*x, g.map(|v| k * v))],
            Op::Upsample { x, factor } => {
                let xv = self.value(*x);
                let [b, c, h, w] = xv.dims();
                let (oh, ow) = (h * factor, w * factor);
                let rows = axis_taps(h, *factor);
                let cols = axis_taps(w, *factor);
                let mut dx = Tensor::zeros(xv.dims());
                for p in 0..b * c {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let d = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                    for (r, &(r0, r1, tr)) in rows.iter().enumerate() {
                        for (cc, &(c0, c1, tc)) in cols.iter().enumerate() {
                            let gv = gp[r * ow + cc];
                            d[r0 * w + c0] += (1.0 - tr) * (1.0 - tc) * gv;
                            d[r0 * w + c1] += (1.0 - tr) * tc * gv;
                            d[r1 * w + c0] += tr * (1.0 - tc) * gv;
                            d[r1 * w + c1] += tr * tc * gv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Warp { x, table } => {
                let xv = self.value(*x);
                let [b, c, h, w] = xv.dims();
                let (th, tw) = (table.target_height, table.target_width);
                let mut dx = Tensor::zeros(xv.dims());
                for p in 0..b * c {
                    let gp = &g.data()[p * th * tw..(p + 1) * th * tw];
                    let d = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                    for (t, &gv) in gp.iter().enumerate() {
                        if let Some((taps, n)) = table.taps(t) {
                            for &(i, wt) in &taps[..n] {
                                d[i] += wt * gv;
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Focal {
                pred,
                target,
                mask,
                spec,
                count,
            } => {
                let pv = self.value(*pred);
                let scale = g.data()[0] / *count as f64;
                let dx = Tensor::from_fn(pv.dims(), |i| {
                    if mask[i] {
                        scale * focal_pixel(pv.data()[i], target[i], spec.alpha, spec.gamma).1
                    } else {
                        0.0
                    }
                });
                vec![(*pred, dx)]
            }
            Op::Dot { x, weights } => {
                let gv = g.data()[0];
                vec![(*x, weights.map(|w| gv * w))]
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `(i0, i1, t)` per output index of a bilinear upsample along one axis.
fn axis_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn conv_out(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    (n + 2 * padding).checked_sub(k).map(|v| v / stride + 1)
}

/// Output positions `o` with `o*stride + j - padding` inside `[0, n)`.
#[inline]
fn valid_range(j: usize, padding: usize, stride: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = if j >= padding {
        0
    } else {
        (padding - j).div_ceil(stride)
    };
    let hi = if n + padding > j {
        ((n - 1 + padding - j) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [bn, c, h, wd] = x.dims();
    let [k, wc, kh, kw] = w.dims();
    if wc != c || stride == 0 {
        return Err(shape_err(
            "conv2d",
            format!("weights {:?} for input {:?}, stride {stride}", w.dims(), x.dims()),
        ));
    }
    if let Some(b) = b {
        if b.dims() != [1, k, 1, 1] {
            return Err(shape_err("conv2d", format!("bias {:?}", b.dims())));
        }
    }
    let (Some(oh), Some(ow)) = (conv_out(h, kh, stride, padding), conv_out(wd, kw, stride, padding))
    else {
        return Err(shape_err("conv2d", format!("kernel larger than padded input {:?}", x.dims())));
    };
    let mut out = Tensor::zeros([bn, k, oh, ow]);
    let dims: Dims = out.dims();
    for bi in 0..bn {
        for ki in 0..k {
            let o0 = (bi * k + ki) * oh * ow;
            let op = &mut out.data_mut()[o0..o0 + oh * ow];
            if let Some(b) = b {
                op.fill(b.data()[ki]);
            }
            for ci in 0..c {
                let xp = x.plane(bi, ci);
                for i in 0..kh {
                    let (rlo, rhi) = valid_range(i, padding, stride, h, oh);
                    for j in 0..kw {
                        let wv = w.data()[((ki * c + ci) * kh + i) * kw + j];
                        let (clo, chi) = valid_range(j, padding, stride, wd, ow);
                        for orow in rlo..rhi {
                            let ir = orow * stride + i - padding;
                            let xrow = &xp[ir * wd..(ir + 1) * wd];
                            let dst = &mut op[orow * ow..(orow + 1) * ow];
                            if stride == 1 {
                                let src = &xrow[clo + j - padding..chi + j - padding];
                                for (d, &s) in dst[clo..chi].iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for oc in clo..chi {
                                    dst[oc] += wv * xrow[oc * stride + j - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(dims, out.dims());
    Ok(out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let [bn, c, h, wd] = x.dims();
    let [k, _, kh, kw] = w.dims();
    let [_, _, oh, ow] = g.dims();
    let mut dx = Tensor::zeros(x.dims());
    let mut dw = Tensor::zeros(w.dims());
    let mut db = Tensor::zeros([1, k, 1, 1]);
    for bi in 0..bn {
        for ki in 0..k {
            let gp = g.plane(bi, ki);
            db.data_mut()[ki] += gp.iter().sum::<f64>();
            for ci in 0..c {
                let xp = x.plane(bi, ci);
                let d0 = (bi * c + ci) * h * wd;
                for i in 0..kh {
                    let (rlo, rhi) = valid_range(i, padding, stride, h, oh);
                    for j in 0..kw {
                        let widx = ((ki * c + ci) * kh + i) * kw + j;
                        let wv = w.data()[widx];
                        let (clo, chi) = valid_range(j, padding, stride, wd, ow);
                        let mut acc = 0.0;
                        for orow in rlo..rhi {
                            let ir = orow * stride + i - padding;
                            let grow = &gp[orow * ow..(orow + 1) * ow];
                            let xrow = &xp[ir * wd..(ir + 1) * wd];
                            let drow = &mut dx.data_mut()[d0 + ir * wd..d0 + (ir + 1) * wd];
                            for oc in clo..chi {
                                let ic = oc * stride + j - padding;
                                acc += grow[oc] * xrow[ic];
                                drow[ic] += wv * grow[oc];
                            }
                        }
                        dw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Adjoints from one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every registered parameter in registration order; zero
    /// for parameters the loss does not depend on.
    pub fn params(&self, graph: &Graph) -> Vec<(String, Tensor)> {
        graph
            .params()
            .iter()
            .map(|(name, v)| {
                let g = self
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(*v).dims()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: Dims, vals: &[f64]) -> Tensor {
        Tensor::from_vec(dims, vals.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut g = Graph::new();
        let x = g.input(t([1, 1, 1, 3], &[0.0, -1.0, 2.0])).unwrap();
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv2d_matches_hand_values() {
        // 3x3 input, 2x2 kernel of ones, stride 1, no padding: window sums.
        let mut g = Graph::new();
        let x = g
            .input(Tensor::from_fn([1, 1, 3, 3], |i| i as f64))
            .unwrap();
        let w = g.input(Tensor::full([1, 1, 2, 2], 1.0)).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[8.0, 12.0, 20.0, 24.0]);
        let y2 = g.conv2d(x, w, None, 2, 1).unwrap();
        // padded windows at (-1,-1), (-1,1), (1,-1), (1,1)
        assert_eq!(g.value(y2).data(), &[0.0, 1.0 + 2.0, 3.0 + 6.0, 4.0 + 5.0 + 7.0 + 8.0]);
    }

    #[test]
    fn nan_is_a_hard_error() {
        let mut g = Graph::new();
        let err = g.input(t([1, 1, 1, 1], &[f64::NAN])).unwrap_err();
        assert!(err.is_numeric());
        let x = g.input(t([1, 1, 1, 1], &[1e308])).unwrap();
        assert!(g.scale(x, 10.0).unwrap_err().is_numeric());
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut g = Graph::new();
        let p = g.param("p", t([1, 1, 1, 1], &[3.0])).unwrap();
        let a = g.scale(p, 2.0).unwrap();
        let b = g.add(a, p).unwrap();
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.params(&g)[0].1.data(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 1, 1, 2])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 2, 3, 2], 4.0)).unwrap();
        let y = g.upsample(x, 4).unwrap();
        assert_eq!(g.value(y).dims(), [1, 2, 12, 8]);
        assert!(g.value(y).data().iter().all(|&v| (v - 4.0).abs() < 1e-15));
    }

    #[test]
    fn warp_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 1, 3, 3])).unwrap();
        let table = Arc::new(WarpTable::identity(2, 2));
        assert!(g.warp(x, table).is_err());
    }
}
