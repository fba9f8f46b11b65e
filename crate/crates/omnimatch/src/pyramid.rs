//! Multi-scale descriptor extraction.
//!
//! The pyramid contract fixes strides and shapes only, so a learned encoder
//! can replace the built-in extractors without touching downstream modules.
//! Both baselines are deterministic functions of the grayscale image:
//! mean-removed patch descriptors and gradient-orientation histograms.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::frame::ErpImage;
use crate::raster::{box_downsample, Grid};
use crate::sphere::ErpGridSpec;

/// Strides of the full pyramid, coarsest first.
pub const ALL_STRIDES: [usize; 6] = [32, 16, 8, 4, 2, 1];
/// Strides used by global matching.
pub const COARSE_STRIDES: [usize; 2] = [32, 16];
/// Strides walked by the refiner.
pub const FINE_STRIDES: [usize; 4] = [8, 4, 2, 1];

/// Minimum input height: the stride-32 level must be at least 2 rows.
pub const MIN_HEIGHT: usize = 64;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("image height {height} too small: stride-32 level needs height >= {MIN_HEIGHT}")]
    ImageTooSmall { height: usize },
    #[error("image height {height} not divisible by 32")]
    UnalignedImage { height: usize },
    #[error("level stride {stride} missing or malformed: {reason}")]
    MalformedLevel { stride: usize, reason: String },
    #[error("cache file rejected: {reason}")]
    BadCache { reason: String },
    #[error("cache i/o: {0}")]
    CacheIo(#[from] std::io::Error),
}

/// Dense descriptor grid at one stride: `dim` floats per cell, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    stride: usize,
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(stride: usize, height: usize, width: usize, dim: usize, data: Vec<f32>) -> Self {
        assert!(dim > 0);
        assert_eq!(data.len(), height * width * dim);
        Self {
            stride,
            height,
            width,
            dim,
            data,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn descriptor(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn descriptor_at(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }
}

/// Descriptor grids for every stride in [`ALL_STRIDES`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: BTreeMap<usize, FeatureGrid>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureGrid>) -> Result<Self, PyramidError> {
        let map: BTreeMap<usize, FeatureGrid> =
            levels.into_iter().map(|g| (g.stride(), g)).collect();
        for stride in ALL_STRIDES {
            let grid = map.get(&stride).ok_or(PyramidError::MalformedLevel {
                stride,
                reason: "missing".into(),
            })?;
            if grid.width() != 2 * grid.height() {
                return Err(PyramidError::MalformedLevel {
                    stride,
                    reason: format!("width {} != 2 x height {}", grid.width(), grid.height()),
                });
            }
        }
        Ok(Self { levels: map })
    }

    pub fn level(&self, stride: usize) -> &FeatureGrid {
        &self.levels[&stride]
    }

    /// Grid spec of the level at `stride`.
    pub fn spec(&self, stride: usize) -> ErpGridSpec {
        let g = self.level(stride);
        ErpGridSpec::new(g.width(), g.height()).expect("validated on construction")
    }
}

/// Extraction contract: deterministic, full stride set, fixed dimensionality
/// per stride.
pub trait FeatureExtractor {
    fn extract(&self, img: &ErpImage) -> Result<FeaturePyramid, PyramidError>;
    fn dim(&self) -> usize;
}

fn check_size(img: &ErpImage) -> Result<(), PyramidError> {
    let h = img.spec().height();
    if h < MIN_HEIGHT {
        return Err(PyramidError::ImageTooSmall { height: h });
    }
    if h % 32 != 0 {
        return Err(PyramidError::UnalignedImage { height: h });
    }
    Ok(())
}

/// Grayscale images box-downsampled to every stride, stride 1 first.
fn gray_levels(img: &ErpImage) -> Vec<(usize, Grid)> {
    let mut levels = vec![(1usize, img.to_grayscale())];
    let mut stride = 1;
    while stride < 32 {
        stride *= 2;
        let next = box_downsample(&levels.last().unwrap().1);
        levels.push((stride, next));
    }
    levels
}

fn wrap_col(c: i64, w: usize) -> usize {
    c.rem_euclid(w as i64) as usize
}

fn clamp_row(r: i64, h: usize) -> usize {
    r.clamp(0, h as i64 - 1) as usize
}

/// Mean-removed, L2-normalized n x n patches of the level image. Constant
/// patches normalize to the zero vector (kept as a low-texture marker; the
/// matching kernel's guard handles them).
#[derive(Debug, Clone, Copy)]
pub struct PatchExtractor {
    /// Odd patch side length.
    pub patch_size: usize,
}

impl Default for PatchExtractor {
    fn default() -> Self {
        Self { patch_size: 5 }
    }
}

impl FeatureExtractor for PatchExtractor {
    fn extract(&self, img: &ErpImage) -> Result<FeaturePyramid, PyramidError> {
        check_size(img)?;
        assert!(self.patch_size % 2 == 1, "patch size must be odd");
        let r = (self.patch_size / 2) as i64;
        let dim = self.dim();

        let mut grids = Vec::new();
        for (stride, level) in gray_levels(img) {
            let (h, w) = (level.height(), level.width());
            let mut data = vec![0.0f32; h * w * dim];
            for row in 0..h {
                for col in 0..w {
                    let base = (row * w + col) * dim;
                    let patch = &mut data[base..base + dim];
                    let mut sum = 0.0f32;
                    let mut lo = f32::INFINITY;
                    let mut hi = f32::NEG_INFINITY;
                    let mut k = 0;
                    for dr in -r..=r {
                        for dc in -r..=r {
                            let v =
                                level.at(clamp_row(row as i64 + dr, h), wrap_col(col as i64 + dc, w));
                            patch[k] = v;
                            sum += v;
                            lo = lo.min(v);
                            hi = hi.max(v);
                            k += 1;
                        }
                    }
                    // Constant patches are exactly textureless; comparing
                    // extrema avoids calling f32 cancellation noise texture.
                    if lo == hi {
                        patch.fill(0.0);
                        continue;
                    }
                    let mean = sum / dim as f32;
                    let mut norm_sq = 0.0f32;
                    for v in patch.iter_mut() {
                        *v -= mean;
                        norm_sq += *v * *v;
                    }
                    let norm = norm_sq.sqrt();
                    if norm > 1e-12 {
                        for v in patch.iter_mut() {
                            *v /= norm;
                        }
                    } else {
                        patch.fill(0.0);
                    }
                }
            }
            grids.push(FeatureGrid::new(stride, h, w, dim, data));
        }
        FeaturePyramid::new(grids)
    }

    fn dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Magnitude-weighted 8-bin gradient-orientation histograms over an n x n
/// window, L2-normalized. Gradients come from seam-aware central
/// differences of the level image.
#[derive(Debug, Clone, Copy)]
pub struct GradientExtractor {
    /// Odd histogram window side length.
    pub window: usize,
}

impl Default for GradientExtractor {
    fn default() -> Self {
        Self { window: 5 }
    }
}

pub const ORIENTATION_BINS: usize = 8;

impl FeatureExtractor for GradientExtractor {
    fn extract(&self, img: &ErpImage) -> Result<FeaturePyramid, PyramidError> {
        check_size(img)?;
        assert!(self.window % 2 == 1, "window must be odd");
        let r = (self.window / 2) as i64;

        let mut grids = Vec::new();
        for (stride, level) in gray_levels(img) {
            let (h, w) = (level.height(), level.width());
            // Per-pixel gradient orientation bin and magnitude.
            let mut bins = vec![0usize; h * w];
            let mut mags = vec![0.0f32; h * w];
            for row in 0..h {
                for col in 0..w {
                    let gx = (level.at(row, wrap_col(col as i64 + 1, w))
                        - level.at(row, wrap_col(col as i64 - 1, w)))
                        * 0.5;
                    let gy = (level.at(clamp_row(row as i64 + 1, h), col)
                        - level.at(clamp_row(row as i64 - 1, h), col))
                        * 0.5;
                    let mag = (gx * gx + gy * gy).sqrt();
                    let angle = (gy as f64).atan2(gx as f64);
                    let t = (angle + std::f64::consts::PI)
                        / (2.0 * std::f64::consts::PI / ORIENTATION_BINS as f64);
                    bins[row * w + col] = (t as usize).min(ORIENTATION_BINS - 1);
                    mags[row * w + col] = mag;
                }
            }

            let mut data = vec![0.0f32; h * w * ORIENTATION_BINS];
            for row in 0..h {
                for col in 0..w {
                    let base = (row * w + col) * ORIENTATION_BINS;
                    let hist = &mut data[base..base + ORIENTATION_BINS];
                    for dr in -r..=r {
                        for dc in -r..=r {
                            let i = clamp_row(row as i64 + dr, h) * w + wrap_col(col as i64 + dc, w);
                            hist[bins[i]] += mags[i];
                        }
                    }
                    let norm = hist.iter().map(|v| v * v).sum::<f32>().sqrt();
                    if norm > 1e-12 {
                        for v in hist.iter_mut() {
                            *v /= norm;
                        }
                    }
                }
            }
            grids.push(FeatureGrid::new(stride, h, w, ORIENTATION_BINS, data));
        }
        FeaturePyramid::new(grids)
    }

    fn dim(&self) -> usize {
        ORIENTATION_BINS
    }
}

const CACHE_MAGIC: &[u8; 8] = b"OMPYRv01";

/// Writes a pyramid to a little-endian binary cache file.
pub fn save_pyramid(path: &Path, pyramid: &FeaturePyramid) -> Result<(), PyramidError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CACHE_MAGIC)?;
    file.write_all(&(ALL_STRIDES.len() as u32).to_le_bytes())?;
    for stride in ALL_STRIDES {
        let g = pyramid.level(stride);
        for v in [g.stride() as u32, g.height() as u32, g.width() as u32, g.dim() as u32] {
            file.write_all(&v.to_le_bytes())?;
        }
        for v in g.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a cache written by [`save_pyramid`], rejecting unknown versions.
pub fn load_pyramid(path: &Path) -> Result<FeaturePyramid, PyramidError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| PyramidError::BadCache { reason: "truncated magic".into() })?;
    if &magic != CACHE_MAGIC {
        return Err(PyramidError::BadCache {
            reason: format!("bad magic {magic:?}"),
        });
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |file: &mut std::io::BufReader<std::fs::File>| -> Result<u32, PyramidError> {
        file.read_exact(&mut u32buf)
            .map_err(|_| PyramidError::BadCache { reason: "truncated header".into() })?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let n = read_u32(&mut file)? as usize;
    if n != ALL_STRIDES.len() {
        return Err(PyramidError::BadCache {
            reason: format!("expected {} levels, got {n}", ALL_STRIDES.len()),
        });
    }
    let mut grids = Vec::with_capacity(n);
    for _ in 0..n {
        let stride = read_u32(&mut file)? as usize;
        let h = read_u32(&mut file)? as usize;
        let w = read_u32(&mut file)? as usize;
        let dim = read_u32(&mut file)? as usize;
        if dim == 0 || h == 0 || h > 1 << 16 || w != 2 * h || dim > 1 << 20 {
            return Err(PyramidError::BadCache {
                reason: format!("implausible level header {stride}/{h}/{w}/{dim}"),
            });
        }
        let mut raw = vec![0u8; h * w * dim * 4];
        file.read_exact(&mut raw)
            .map_err(|_| PyramidError::BadCache { reason: "truncated level data".into() })?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        grids.push(FeatureGrid::new(stride, h, w, dim, data));
    }
    FeaturePyramid::new(grids)
}
