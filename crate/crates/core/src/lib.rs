//! Camera / LiDAR bird's-eye-view fusion for road segmentation.
//!
//! The crate covers the full data path: KITTI readers ([`kitti`]), BEV
//! rasterization ([`bev`]), dense height upsampling and the bidirectional
//! camera/BEV warps ([`dst`]), a small reverse-mode tensor engine
//! ([`tensor`]), channel-attention fusion blocks ([`fusion`]), losses and a
//! desk-scale two-branch network ([`loss`], [`training`]), and the road
//! benchmark metrics ([`metrics`]).

pub mod bev;
pub mod dst;
pub mod error;
pub mod formats;
pub mod fusion;
pub mod gradsuite;
pub mod kitti;
pub mod loss;
pub mod metrics;
pub mod raster;
pub mod tensor;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
