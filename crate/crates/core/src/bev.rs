//! Bird's-eye-view grid construction.
//!
//! Rows index the forward axis (`x`), columns the lateral axis (`y`); cell
//! `(row, col)` covers `[x_min + row*res, x_min + (row+1)*res) x
//! [y_min + col*res, y_min + (col+1)*res)`.

use crate::error::{Error, Result};
use crate::kitti::PointCloud;

pub const BEV_CHANNELS: usize = 6;

/// Feature channel order of a [`BevGrid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum BevChannel {
    MaxHeight = 0,
    MinHeight = 1,
    MeanHeight = 2,
    MaxIntensity = 3,
    MinIntensity = 4,
    MeanIntensity = 5,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGeometry {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
}

impl Default for BevGeometry {
    fn default() -> Self {
        BevGeometry {
            x_min: 0.0,
            x_max: 40.0,
            y_min: -10.0,
            y_max: 10.0,
            resolution: 0.5,
        }
    }
}

impl BevGeometry {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, resolution: f64) -> Result<Self> {
        let g = BevGeometry {
            x_min,
            x_max,
            y_min,
            y_max,
            resolution,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max, self.resolution]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min || self.resolution <= 0.0
        {
            return Err(Error::Config(format!("invalid BEV geometry {self:?}")));
        }
        for extent in [self.x_max - self.x_min, self.y_max - self.y_min] {
            let cells = extent / self.resolution;
            if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0) || cells.round() < 1.0 {
                return Err(Error::Config(format!(
                    "extent {extent} is not an integral number of {} m cells",
                    self.resolution
                )));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        ((self.x_max - self.x_min) / self.resolution).round() as usize
    }

    pub fn cols(&self) -> usize {
        ((self.y_max - self.y_min) / self.resolution).round() as usize
    }

    pub fn cells(&self) -> usize {
        self.rows() * self.cols()
    }

    fn bin(v: f64, lo: f64, res: f64, n: usize) -> Option<usize> {
        let mut i = ((v - lo) / res).floor();
        // Keep the binning consistent with the half-open cell bounds.
        if v < lo + i * res {
            i -= 1.0;
        } else if v >= lo + (i + 1.0) * res {
            i += 1.0;
        }
        (i >= 0.0 && i < n as f64).then_some(i as usize)
    }

    /// Cell containing a metric point, or `None` outside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let r = Self::bin(x, self.x_min, self.resolution, self.rows())?;
        let c = Self::bin(y, self.y_min, self.resolution, self.cols())?;
        Some((r, c))
    }

    /// Metric `(x, y)` of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (row as f64 + 0.5) * self.resolution,
            self.y_min + (col as f64 + 0.5) * self.resolution,
        )
    }

    /// Continuous grid coordinates `(col, row)` of a metric point, with
    /// integers at cell centers.
    pub fn to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.y_min) / self.resolution - 0.5,
            (x - self.x_min) / self.resolution - 0.5,
        )
    }

    /// Inverse of [`BevGeometry::to_grid`].
    pub fn from_grid(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.x_min + (row + 0.5) * self.resolution,
            self.y_min + (col + 0.5) * self.resolution,
        )
    }
}

/// Six-channel BEV features, channel-major (`features[ch * cells + idx]`).
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub geometry: BevGeometry,
    pub features: Vec<f64>,
    pub counts: Vec<u32>,
}

impl BevGrid {
    pub fn rows(&self) -> usize {
        self.geometry.rows()
    }

    pub fn cols(&self) -> usize {
        self.geometry.cols()
    }

    pub fn occupied(&self, row: usize, col: usize) -> bool {
        self.counts[row * self.cols() + col] > 0
    }

    pub fn feature(&self, channel: BevChannel, row: usize, col: usize) -> f64 {
        self.features[channel as usize * self.geometry.cells() + row * self.cols() + col]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.geometry.cells();
        &self.features[channel * n..(channel + 1) * n]
    }

    pub fn cell_features(&self, row: usize, col: usize) -> [f64; BEV_CHANNELS] {
        let n = self.geometry.cells();
        let idx = row * self.cols() + col;
        std::array::from_fn(|ch| self.features[ch * n + idx])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rasterized {
    pub grid: BevGrid,
    /// Points outside the grid extent.
    pub skipped: usize,
}

/// Max, min and mean of a sample set. The mean is summed in ascending value
/// order so the result does not depend on input order, and is clamped into
/// `[min, max]` against rounding.
pub(crate) fn order_free_stats(values: &mut [f64]) -> (f64, f64, f64) {
    values.sort_by(f64::total_cmp);
    let sum: f64 = values.iter().sum();
    let (min, max) = (values[0], values[values.len() - 1]);
    (max, min, (sum / values.len() as f64).clamp(min, max))
}

pub fn rasterize(cloud: &PointCloud, geom: &BevGeometry) -> Result<Rasterized> {
    geom.validate()?;
    let cells = geom.cells();
    let cols = geom.cols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cells];
    let mut skipped = 0;
    for (i, p) in cloud.points.iter().enumerate() {
        match geom.cell_of(p.x as f64, p.y as f64) {
            Some((r, c)) => members[r * cols + c].push(i),
            None => skipped += 1,
        }
    }
    let mut features = vec![0.0; cells * BEV_CHANNELS];
    let mut counts = vec![0u32; cells];
    let mut heights = Vec::new();
    let mut intensities = Vec::new();
    for (idx, m) in members.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        counts[idx] = m.len() as u32;
        heights.clear();
        intensities.clear();
        for &i in m {
            heights.push(cloud.points[i].z as f64);
            intensities.push(cloud.points[i].intensity as f64);
        }
        let (hmax, hmin, hmean) = order_free_stats(&mut heights);
        let (imax, imin, imean) = order_free_stats(&mut intensities);
        for (ch, v) in [hmax, hmin, hmean, imax, imin, imean].into_iter().enumerate() {
            features[ch * cells + idx] = v;
        }
    }
    Ok(Rasterized {
        grid: BevGrid {
            geometry: *geom,
            features,
            counts,
        },
        skipped,
    })
}

/// Per-cell majority labels of labelled metric points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub rows: usize,
    pub cols: usize,
    pub label: Vec<bool>,
    /// Cells that received at least one point.
    pub covered: Vec<bool>,
}

/// Majority vote per cell; ties resolve to the positive label.
pub fn rasterize_mask(points: &[(f64, f64, bool)], geom: &BevGeometry) -> Result<LabelGrid> {
    geom.validate()?;
    let cols = geom.cols();
    let mut pos = vec![0u32; geom.cells()];
    let mut neg = vec![0u32; geom.cells()];
    for &(x, y, label) in points {
        if let Some((r, c)) = geom.cell_of(x, y) {
            if label {
                pos[r * cols + c] += 1;
            } else {
                neg[r * cols + c] += 1;
            }
        }
    }
    Ok(LabelGrid {
        rows: geom.rows(),
        cols,
        label: pos.iter().zip(&neg).map(|(p, n)| p + n > 0 && p >= n).collect(),
        covered: pos.iter().zip(&neg).map(|(p, n)| p + n > 0).collect(),
    })
}
