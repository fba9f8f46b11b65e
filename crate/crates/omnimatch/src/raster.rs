//! Dense row-major rasters and ERP-aware bilinear sampling.
//!
//! Sampling wraps columns across the longitude seam and clamps rows at the
//! poles, matching the pixel-center lattice of [`crate::sphere`].

use crate::sphere::{ErpGridSpec, PixelCoord};

/// Row-major multi-channel f32 raster. Pixel `(row, col)` starts at
/// `(row * width + col) * channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(width > 0 && height > 0 && channels > 0);
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn from_fn<F: FnMut(usize, usize) -> f32>(width: usize, height: usize, mut f: F) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self::from_vec(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let base = (row * self.width + col) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    /// Scalar accessor for single-channel grids.
    pub fn at(&self, row: usize, col: usize) -> f32 {
        debug_assert_eq!(self.channels, 1);
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        debug_assert_eq!(self.channels, 1);
        self.data[row * self.width + col] = value;
    }
}

/// The four taps of a bilinear lookup: wrapped columns, clamped rows, and
/// their weights. Weights sum to 1.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    /// `(row, col, weight)` per tap.
    pub taps: [(usize, usize, f64); 4],
}

/// Computes ERP bilinear taps for a continuous pixel position on a
/// `width x height` lattice. Columns wrap modulo width; rows clamp so
/// samples beyond the pole rows reuse the edge row.
pub fn erp_bilinear_taps(p: PixelCoord, width: usize, height: usize) -> BilinearTaps {
    let w = width as f64;
    let col = p.col.rem_euclid(w);
    let col = if col >= w { 0.0 } else { col };
    let row = p.row.clamp(-0.5, height as f64 - 0.5);

    let c0 = col.floor();
    let fc = col - c0;
    let r0 = row.floor();
    let fr = row - r0;

    let c0i = (c0 as i64).rem_euclid(width as i64) as usize;
    let c1i = (c0i + 1) % width;
    let clamp_row = |r: i64| r.clamp(0, height as i64 - 1) as usize;
    let r0i = clamp_row(r0 as i64);
    let r1i = clamp_row(r0 as i64 + 1);

    BilinearTaps {
        taps: [
            (r0i, c0i, (1.0 - fr) * (1.0 - fc)),
            (r0i, c1i, (1.0 - fr) * fc),
            (r1i, c0i, fr * (1.0 - fc)),
            (r1i, c1i, fr * fc),
        ],
    }
}

/// Bilinear sample of every channel at `p`, written into `out`
/// (`out.len() == grid.channels()`).
pub fn erp_bilinear_sample_into(grid: &Grid, p: PixelCoord, out: &mut [f32]) {
    debug_assert_eq!(out.len(), grid.channels());
    out.fill(0.0);
    let taps = erp_bilinear_taps(p, grid.width(), grid.height());
    for (r, c, w) in taps.taps {
        if w == 0.0 {
            continue;
        }
        let px = grid.pixel(r, c);
        for (o, v) in out.iter_mut().zip(px) {
            *o += (w as f32) * v;
        }
    }
}

/// Bilinear sample of a single-channel grid.
pub fn erp_bilinear_sample(grid: &Grid, p: PixelCoord) -> f32 {
    debug_assert_eq!(grid.channels(), 1);
    let taps = erp_bilinear_taps(p, grid.width(), grid.height());
    let mut acc = 0.0f64;
    for (r, c, w) in taps.taps {
        acc += w * grid.at(r, c) as f64;
    }
    acc as f32
}

/// Weights at or below this are treated as zero when deciding which taps a
/// masked sample depends on. Coordinate round trips through trig functions
/// leave jitter of a few ulps; without the floor, a sample that lands on a
/// pixel center would spuriously depend on the validity of its neighbors.
pub const NEGLIGIBLE_TAP_WEIGHT: f64 = 1e-12;

/// Bilinear sample where each tap carries a validity bit; returns `None`
/// unless every tap with non-negligible weight is valid.
pub fn erp_bilinear_sample_masked(
    values: &Grid,
    valid: &[bool],
    p: PixelCoord,
) -> Option<f32> {
    debug_assert_eq!(values.channels(), 1);
    debug_assert_eq!(valid.len(), values.width() * values.height());
    let taps = erp_bilinear_taps(p, values.width(), values.height());
    let mut acc = 0.0f64;
    for (r, c, w) in taps.taps {
        if w <= NEGLIGIBLE_TAP_WEIGHT {
            continue;
        }
        if !valid[r * values.width() + c] {
            return None;
        }
        acc += w * values.at(r, c) as f64;
    }
    Some(acc as f32)
}

/// 2x2 box downsample. Both dimensions must be even.
pub fn box_downsample(grid: &Grid) -> Grid {
    assert!(grid.width() % 2 == 0 && grid.height() % 2 == 0);
    assert_eq!(grid.channels(), 1);
    let (w, h) = (grid.width() / 2, grid.height() / 2);
    let mut out = Grid::new(w, h, 1);
    for row in 0..h {
        for col in 0..w {
            let s = grid.at(2 * row, 2 * col)
                + grid.at(2 * row, 2 * col + 1)
                + grid.at(2 * row + 1, 2 * col)
                + grid.at(2 * row + 1, 2 * col + 1);
            out.set(row, col, s * 0.25);
        }
    }
    out
}

/// Convenience check that a grid matches an ERP spec.
pub fn matches_spec(grid: &Grid, spec: &ErpGridSpec) -> bool {
    grid.width() == spec.width() && grid.height() == spec.height()
}
