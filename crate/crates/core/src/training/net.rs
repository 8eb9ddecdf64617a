//! The micro two-branch network: strided conv encoders in image and BEV
//! space, one bidirectional fusion block at the deepest level, and
//! upsampling decoders with additive skips.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bev::{rasterize, BevGeometry, BEV_CHANNELS};
use crate::dst::{frame_geometry, GeometryConfig, ImageDims};
use crate::error::{Error, Result};
use crate::fusion::{bidirectional_fuse, Combiner, FusionBlockParams, FusionWarps, DEFAULT_REDUCTION};
use crate::kitti::Frame;
use crate::raster::Raster;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::warp::WarpTable;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// Image branch alone; no LiDAR input.
    ImageOnly,
    /// Cross-space features combined by plain addition.
    Add,
    #[default]
    Cbf,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image-only" => Ok(FusionMode::ImageOnly),
            "add" => Ok(FusionMode::Add),
            "cbf" => Ok(FusionMode::Cbf),
            other => Err(Error::Config(format!(
                "unknown fusion mode `{other}` (expected image-only, add or cbf)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub img_channels: [usize; 3],
    pub bev_channels: [usize; 2],
    pub reduction: usize,
    pub gate_bias: bool,
    pub mode: FusionMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            img_channels: [16, 32, 64],
            bev_channels: [16, 32],
            reduction: DEFAULT_REDUCTION,
            gate_bias: true,
            mode: FusionMode::Cbf,
        }
    }
}

/// Downsampling of the deepest image and BEV features.
pub const IMG_STRIDE: usize = 8;
pub const BEV_STRIDE: usize = 4;

/// Network inputs, targets and warp tables of one frame.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `[1, 3, H, W]`, centered to `[-0.5, 0.5]`.
    pub image: Tensor,
    /// `[1, 6, rows, cols]` rasterized LiDAR.
    pub bev: Tensor,
    pub img_target: Arc<[f64]>,
    pub img_mask: Arc<[bool]>,
    pub bev_target: Arc<[f64]>,
    pub bev_mask: Arc<[bool]>,
    /// Full-resolution camera-to-BEV table, used for evaluation.
    pub to_bev: Arc<WarpTable>,
    /// Tables at the fusion resolution.
    pub warps: FusionWarps,
}

pub fn image_tensor(image: &Raster) -> Result<Tensor> {
    if image.channels != 3 {
        return Err(Error::Image(format!("expected RGB, got {} channels", image.channels)));
    }
    let (w, h) = (image.width, image.height);
    Ok(Tensor::from_fn([1, 3, h, w], |i| {
        let (c, p) = (i / (w * h), i % (w * h));
        image.data[p * 3 + c] as f64 / 255.0 - 0.5
    }))
}

impl Sample {
    /// Builds a sample from a frame with image ground truth and, optionally,
    /// an exact BEV road mask (otherwise BEV targets come from the image
    /// ground truth through the camera-to-BEV table).
    pub fn new(frame: &Frame, bev_gt: Option<&[bool]>, geom: &GeometryConfig) -> Result<Self> {
        let gt = frame
            .gt
            .as_ref()
            .ok_or_else(|| Error::Config(format!("frame {} has no ground truth", frame.id)))?;
        let dims = ImageDims::new(frame.image.width, frame.image.height);
        let bev: &BevGeometry = &geom.bev;
        if dims.width % IMG_STRIDE != 0 || dims.height % IMG_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not a multiple of {IMG_STRIDE}",
                dims.width, dims.height
            )));
        }
        if bev.rows() % BEV_STRIDE != 0 || bev.cols() % BEV_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "BEV grid {}x{} is not a multiple of {BEV_STRIDE}",
                bev.rows(),
                bev.cols()
            )));
        }
        let fg = frame_geometry(&frame.cloud, &frame.calib, dims, geom)?;
        let raster = rasterize(&frame.cloud, bev)?.grid;
        let bev_tensor = Tensor::from_vec([1, BEV_CHANNELS, bev.rows(), bev.cols()], raster.features)?;
        let (bev_target, bev_mask): (Vec<f64>, Vec<bool>) = match bev_gt {
            Some(m) if m.len() == bev.cells() => (m.iter().map(|&r| r as u8 as f64).collect(), vec![true; m.len()]),
            Some(m) => {
                return Err(Error::Shape(format!("BEV mask has {} cells, grid {}", m.len(), bev.cells())))
            }
            None => {
                let t = &fg.to_bev.table;
                (0..t.target_len())
                    .map(|i| match t.valid[i] {
                        true => {
                            let (u, v) = t.coords[i];
                            let p = v.round() as usize * dims.width + u.round() as usize;
                            (gt.road[p] as u8 as f64, gt.valid[p])
                        }
                        false => (0.0, false),
                    })
                    .unzip()
            }
        };
        let to_img = fg.to_img.table.rescale(
            IMG_STRIDE,
            BEV_STRIDE,
            (dims.height / IMG_STRIDE, dims.width / IMG_STRIDE),
            (bev.rows() / BEV_STRIDE, bev.cols() / BEV_STRIDE),
        )?;
        let to_bev_small = fg.to_bev.table.rescale(
            BEV_STRIDE,
            IMG_STRIDE,
            (bev.rows() / BEV_STRIDE, bev.cols() / BEV_STRIDE),
            (dims.height / IMG_STRIDE, dims.width / IMG_STRIDE),
        )?;
        Ok(Sample {
            id: frame.id.clone(),
            image: image_tensor(&frame.image)?,
            bev: bev_tensor,
            img_target: gt.road.iter().map(|&r| r as u8 as f64).collect(),
            img_mask: gt.valid.clone().into(),
            bev_target: bev_target.into(),
            bev_mask: bev_mask.into(),
            to_bev: Arc::new(fg.to_bev.table),
            warps: FusionWarps {
                to_img: Arc::new(to_img),
                to_bev: Arc::new(to_bev_small),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroBiFNet {
    pub config: NetConfig,
    pub params: ParamStore,
}

/// Handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// Road probability in image space, `[1, 1, H, W]`.
    pub img: Var,
    /// Road probability in BEV, absent for the image-only network.
    pub bev: Option<Var>,
}

fn conv_init(store: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize, rng: &mut ChaCha8Rng) {
    store.insert_glorot(format!("{name}.w"), [out, inp, k, k], inp * k * k, out * k * k, rng);
    store.insert(format!("{name}.b"), Tensor::zeros([1, out, 1, 1]));
}

impl MicroBiFNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let [i1, i2, i3] = config.img_channels;
        let [b1, b2] = config.bev_channels;
        conv_init(&mut p, "img.enc1", i1, 3, 3, &mut rng);
        conv_init(&mut p, "img.enc2", i2, i1, 3, &mut rng);
        conv_init(&mut p, "img.enc3", i3, i2, 3, &mut rng);
        conv_init(&mut p, "img.dec3", i2, i3, 3, &mut rng);
        conv_init(&mut p, "img.dec2", i1, i2, 3, &mut rng);
        conv_init(&mut p, "img.head", 1, i1, 3, &mut rng);
        if config.mode != FusionMode::ImageOnly {
            conv_init(&mut p, "bev.enc1", b1, BEV_CHANNELS, 3, &mut rng);
            conv_init(&mut p, "bev.enc2", b2, b1, 3, &mut rng);
            conv_init(&mut p, "bev.dec2", b1, b2, 3, &mut rng);
            conv_init(&mut p, "bev.head", 1, b1, 3, &mut rng);
            FusionBlockParams::init(&mut p, "fuse", i3, b2, config.reduction, config.gate_bias, &mut rng)?;
        }
        Ok(MicroBiFNet { config, params: p })
    }

    /// Rebuilds a network around loaded parameters, checking every expected
    /// weight is present with the right dims.
    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        for (name, t) in fresh.params.iter() {
            let got = params.require(name)?;
            if got.dims() != t.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has dims {:?}, expected {:?}",
                    got.dims(),
                    t.dims()
                )));
            }
        }
        Ok(MicroBiFNet { config, params })
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = g.param(format!("{name}.w"), self.params.require(&format!("{name}.w"))?.clone())?;
        let b = g.param(format!("{name}.b"), self.params.require(&format!("{name}.b"))?.clone())?;
        g.conv2d(x, w, Some(b), stride, 1)
    }

    fn conv_relu(&self, g: &mut Graph, x: Var, name: &str, stride: usize) -> Result<Var> {
        let y = self.conv(g, x, name, stride)?;
        g.relu(y)
    }

    pub fn forward(&self, g: &mut Graph, s: &Sample) -> Result<Outputs> {
        let img_in = g.input(s.image.clone())?;
        let e1 = self.conv_relu(g, img_in, "img.enc1", 2)?;
        let e2 = self.conv_relu(g, e1, "img.enc2", 2)?;
        let mut e3 = self.conv_relu(g, e2, "img.enc3", 2)?;
        let mut bev_out = None;
        if self.config.mode != FusionMode::ImageOnly {
            let bev_in = g.input(s.bev.clone())?;
            let b1 = self.conv_relu(g, bev_in, "bev.enc1", 2)?;
            let b2 = self.conv_relu(g, b1, "bev.enc2", 2)?;
            let block = FusionBlockParams::bind(g, &self.params, "fuse")?;
            let combiner = match self.config.mode {
                FusionMode::Add => Combiner::Add,
                _ => Combiner::Cbf,
            };
            let (fi, fb) = bidirectional_fuse(g, e3, b2, &s.warps, &block, combiner)?;
            e3 = fi;
            let d = self.conv_relu(g, fb, "bev.dec2", 1)?;
            let d = g.upsample(d, 2)?;
            let d = g.add(d, b1)?;
            let d = self.conv(g, d, "bev.head", 1)?;
            let d = g.upsample(d, 2)?;
            bev_out = Some(g.sigmoid(d)?);
        }
        let d = self.conv_relu(g, e3, "img.dec3", 1)?;
        let d = g.upsample(d, 2)?;
        let d = g.add(d, e2)?;
        let d = self.conv_relu(g, d, "img.dec2", 1)?;
        let d = g.upsample(d, 2)?;
        let d = g.add(d, e1)?;
        let d = self.conv(g, d, "img.head", 1)?;
        let d = g.upsample(d, 2)?;
        let img = g.sigmoid(d)?;
        Ok(Outputs { img, bev: bev_out })
    }

    /// Road probabilities `(image, bev)` as flat row-major planes.
    pub fn predict(&self, s: &Sample) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, s)?;
        let img = g.value(out.img).data().to_vec();
        let bev = out.bev.map(|b| g.value(b).data().to_vec());
        Ok((img, bev))
    }
}
