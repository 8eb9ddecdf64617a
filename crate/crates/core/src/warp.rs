//! Dense per-target-pixel resampling tables.
//!
//! Coordinates are continuous pixel positions `(u, v)` = (column, row) with
//! integers at pixel centers. A valid entry always lies inside
//! `[0, width-1] x [0, height-1]` of the source.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct WarpTable {
    pub target_height: usize,
    pub target_width: usize,
    pub source_height: usize,
    pub source_width: usize,
    /// `(u, v)` per target pixel, row-major. Zero where invalid.
    pub coords: Vec<(f64, f64)>,
    pub valid: Vec<bool>,
}

/// Bilinear taps: `(source index, weight)`; zero-weight taps are omitted.
pub type Taps = ([(usize, f64); 4], usize);

impl WarpTable {
    /// A table with every target invalid.
    pub fn empty(
        target_height: usize,
        target_width: usize,
        source_height: usize,
        source_width: usize,
    ) -> Self {
        let n = target_height * target_width;
        WarpTable {
            target_height,
            target_width,
            source_height,
            source_width,
            coords: vec![(0.0, 0.0); n],
            valid: vec![false; n],
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        let mut t = Self::empty(height, width, height, width);
        for r in 0..height {
            for c in 0..width {
                t.coords[r * width + c] = (c as f64, r as f64);
                t.valid[r * width + c] = true;
            }
        }
        t
    }

    pub fn target_len(&self) -> usize {
        self.target_height * self.target_width
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Whether `(u, v)` is a legal source coordinate.
    pub fn in_source(&self, u: f64, v: f64) -> bool {
        u.is_finite()
            && v.is_finite()
            && u >= 0.0
            && v >= 0.0
            && u <= (self.source_width - 1) as f64
            && v <= (self.source_height - 1) as f64
    }

    /// Sets a target entry, rejecting out-of-bounds sources.
    pub fn set(&mut self, target: usize, u: f64, v: f64) -> Result<()> {
        if !self.in_source(u, v) {
            return Err(Error::Shape(format!(
                "source coordinate ({u}, {v}) outside {}x{}",
                self.source_width, self.source_height
            )));
        }
        self.coords[target] = (u, v);
        self.valid[target] = true;
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.target_len();
        if self.coords.len() != n || self.valid.len() != n {
            return Err(Error::Shape("warp table payload size".into()));
        }
        if self.source_height == 0 || self.source_width == 0 {
            return Err(Error::Shape("warp table source dims must be positive".into()));
        }
        for (i, (&(u, v), &ok)) in self.coords.iter().zip(&self.valid).enumerate() {
            if ok && !self.in_source(u, v) {
                return Err(Error::Shape(format!(
                    "target {i} points outside the source: ({u}, {v})"
                )));
            }
        }
        Ok(())
    }

    /// Bilinear taps into a row-major source plane, or `None` if invalid.
    #[inline]
    pub fn taps(&self, target: usize) -> Option<Taps> {
        if !self.valid[target] {
            return None;
        }
        let (u, v) = self.coords[target];
        Some(bilinear_taps(u, v, self.source_width, self.source_height))
    }

    /// Resamples the table for feature maps downsampled by `target_factor`
    /// (target side) and `source_factor` (source side). A coarse target is
    /// valid when at least half of its fine block is; its source is the block
    /// mean mapped into the coarse source grid.
    pub fn rescale(
        &self,
        target_factor: usize,
        source_factor: usize,
        target_dims: (usize, usize),
        source_dims: (usize, usize),
    ) -> Result<WarpTable> {
        if target_factor == 0 || source_factor == 0 {
            return Err(Error::Config("downsample factors must be positive".into()));
        }
        let (th, tw) = target_dims;
        let (sh, sw) = source_dims;
        if th * target_factor > self.target_height + target_factor - 1
            || tw * target_factor > self.target_width + target_factor - 1
        {
            return Err(Error::Shape(format!(
                "coarse target {th}x{tw} does not fit {}x{} at factor {target_factor}",
                self.target_height, self.target_width
            )));
        }
        let mut out = WarpTable::empty(th, tw, sh, sw);
        let sf = source_factor as f64;
        for r in 0..th {
            for c in 0..tw {
                let (mut su, mut sv, mut hits, mut total) = (0.0, 0.0, 0usize, 0usize);
                for fr in r * target_factor..((r + 1) * target_factor).min(self.target_height) {
                    for fc in c * target_factor..((c + 1) * target_factor).min(self.target_width) {
                        let i = fr * self.target_width + fc;
                        total += 1;
                        if self.valid[i] {
                            su += self.coords[i].0;
                            sv += self.coords[i].1;
                            hits += 1;
                        }
                    }
                }
                if hits == 0 || 2 * hits < total {
                    continue;
                }
                let u = ((su / hits as f64 + 0.5) / sf - 0.5).clamp(0.0, (sw - 1) as f64);
                let v = ((sv / hits as f64 + 0.5) / sf - 0.5).clamp(0.0, (sh - 1) as f64);
                out.set(r * tw + c, u, v)?;
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> Taps {
    let u0 = u.floor();
    let v0 = v.floor();
    let (fu, fv) = (u - u0, v - v0);
    let (u0, v0) = (u0 as usize, v0 as usize);
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    let mut taps = [(0usize, 0.0f64); 4];
    let mut n = 0;
    for (idx, w) in [
        (v0 * width + u0, (1.0 - fu) * (1.0 - fv)),
        (v0 * width + u1, fu * (1.0 - fv)),
        (v1 * width + u0, (1.0 - fu) * fv),
        (v1 * width + u1, fu * fv),
    ] {
        if w != 0.0 {
            taps[n] = (idx, w);
            n += 1;
        }
    }
    (taps, n)
}

/// Bilinear sample of a row-major plane.
#[inline]
pub fn sample_bilinear(plane: &[f64], width: usize, height: usize, u: f64, v: f64) -> f64 {
    let (taps, n) = bilinear_taps(u, v, width, height);
    taps[..n].iter().map(|&(i, w)| w * plane[i]).sum()
}

/// Nearest-neighbour sample of a row-major plane.
#[inline]
pub fn sample_nearest<T: Copy>(plane: &[T], width: usize, u: f64, v: f64) -> T {
    plane[v.round() as usize * width + u.round() as usize]
}

/// Per-target taps a bilinear warp reads, for straddle checks.
pub fn tap_indices(table: &WarpTable, target: usize) -> Vec<usize> {
    match table.taps(target) {
        Some((taps, n)) => taps[..n].iter().map(|t| t.0).collect(),
        None => Vec::new(),
    }
}

/// Warps a single plane; invalid targets become `fill`.
pub fn warp_plane(table: &WarpTable, plane: &[f64], fill: f64) -> Result<Vec<f64>> {
    if plane.len() != table.source_height * table.source_width {
        return Err(Error::Shape(format!(
            "plane has {} samples, table source is {}x{}",
            plane.len(),
            table.source_height,
            table.source_width
        )));
    }
    Ok((0..table.target_len())
        .map(|t| match table.taps(t) {
            Some((taps, n)) => taps[..n].iter().map(|&(i, w)| w * plane[i]).sum(),
            None => fill,
        })
        .collect())
}
