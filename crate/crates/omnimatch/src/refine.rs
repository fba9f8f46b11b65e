//! Coarse-to-fine flow refinement. Each level projects the current match
//! field to spherical coordinates, samples local correlation between A's
//! descriptors and B's descriptors around the current match, lets a refiner
//! turn that into an angular step and a certainty update, and upsamples to
//! the next finer grid.
//!
//! The refiner is a contract; the built-in implementation is an analytic
//! softargmax over the correlation window.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{pixel_rays, FrameError, MatchField};
use crate::pyramid::{FeatureGrid, FeaturePyramid};
use crate::raster::erp_bilinear_taps;
use crate::sphere::{
    cart_to_sph, sph_to_cart, sph_to_pixel, wrap_theta, ErpGridSpec, PixelCoord, SphericalCoord,
};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid refiner config: {reason}")]
    BadConfig { reason: String },
    #[error("field is {got_w}x{got_h} but the level grid is {want_w}x{want_h}")]
    LevelMismatch {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Strides visited by the standard refinement schedule, finest last.
pub const REFINE_LEVELS: [usize; 5] = [16, 8, 4, 2, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    /// Correlation window half-size in cells; the window has
    /// `(2k+1)^2` taps.
    pub patch_radius: usize,
    /// Softargmax sharpness.
    pub temperature: f64,
    /// Strides to refine at, coarse to fine; each must halve the previous.
    pub levels: Vec<usize>,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            patch_radius: 2,
            temperature: 10.0,
            levels: REFINE_LEVELS.to_vec(),
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.patch_radius < 1 {
            return Err(RefineError::BadConfig {
                reason: "patch_radius must be >= 1".into(),
            });
        }
        if !(self.temperature > 0.0) {
            return Err(RefineError::BadConfig {
                reason: "temperature must be > 0".into(),
            });
        }
        if self.levels.is_empty() {
            return Err(RefineError::BadConfig {
                reason: "levels must be non-empty".into(),
            });
        }
        Ok(())
    }
}

/// Dense correlation window values: one `(2k+1)^2` slice per cell,
/// offsets ordered row-major from `(-k,-k)` to `(k,k)`.
#[derive(Debug, Clone)]
pub struct CorrelationGrid {
    height: usize,
    width: usize,
    radius: usize,
    data: Vec<f32>,
}

impl CorrelationGrid {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn taps_per_cell(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Window values of one cell.
    pub fn at(&self, cell: usize) -> &[f32] {
        let n = self.taps_per_cell();
        &self.data[cell * n..(cell + 1) * n]
    }

    /// Offset `(dx, dy)` in cells for a window slot index.
    pub fn offset_of(&self, slot: usize) -> (isize, isize) {
        let side = 2 * self.radius + 1;
        let k = self.radius as isize;
        let dy = (slot / side) as isize - k;
        let dx = (slot % side) as isize - k;
        (dx, dy)
    }
}

/// Per-level input handed to a refiner.
pub struct RefineInput<'a> {
    /// A's descriptors at this level.
    pub f_a: &'a FeatureGrid,
    /// B's descriptors sampled at the current match positions.
    pub f_b_warped: &'a FeatureGrid,
    /// Correlation window per cell.
    pub corr: &'a CorrelationGrid,
    /// Current match positions, projected.
    pub positions: &'a [SphericalCoord],
    /// Current match direction minus the cell's own ray; a learned refiner
    /// would consume this, the analytic one does not.
    pub flow_residual: &'a [Vector3<f64>],
    /// Angular size of one cell at this level.
    pub cell_angle: f64,
}

/// Per-cell refinement step: angular position updates and a certainty
/// increment.
pub struct RefineStep {
    /// `(d_theta, d_phi)` in radians per cell.
    pub delta_u: Vec<(f64, f64)>,
    pub delta_c: Vec<f32>,
}

/// Contract for the per-level refiner. Implementations must return finite
/// steps shaped like the level grid.
pub trait Refiner {
    fn refine(&self, input: &RefineInput) -> RefineStep;
}

/// Keeps `d_theta` finite when a match position sits numerically on a pole.
const COS_PHI_FLOOR: f64 = 1e-3;

/// Windows whose correlation spread is below this are treated as
/// textureless: normalization stops sharpening them, so their expected
/// offset stays near zero instead of amplifying noise.
pub const CONTRAST_FLOOR: f64 = 1e-4;

/// Effective width, in cells, of the softargmax weight profile at the
/// default temperature. Wide enough to interpolate between cells, narrow
/// enough that the window edge carries no weight.
pub const EXPECTATION_BANDWIDTH: f64 = 0.7;

/// The temperature at which [`EXPECTATION_BANDWIDTH`] holds exactly; the
/// configured temperature scales the width relative to this anchor.
const BANDWIDTH_REFERENCE_TEMPERATURE: f64 = 10.0;

/// Penalty per squared cell of step length, relative to unit-norm
/// descriptor correlation. Upsampled flow is trusted to within about a
/// cell, so distant window peaks must beat nearby ones by a margin before
/// the refiner jumps to them.
pub const STEP_PRIOR_WEIGHT: f64 = 0.02;

/// Analytic refiner: the step is the window peak plus a temperature-
/// weighted subpixel expectation over the peak's immediate neighbors,
/// converted to angles; the certainty increment is the peak correlation
/// squashed to (-1, 1).
///
/// Three stabilizers shape the window before the expectation, all chosen
/// so the estimator degrades gracefully on hostile texture:
///
/// - The cost volume is mean-filtered over the 3x3 neighboring cells.
///   Neighbors share their upsampled flow, so a true peak is coherent
///   across them while aliasing noise is not.
/// - A quadratic step prior ([`STEP_PRIOR_WEIGHT`]) biases the argmax
///   toward the incoming flow, suppressing spurious distant peaks that
///   barely beat the true one.
/// - The expectation is anchored at the hard argmax and taken over its
///   immediate neighbors only: smooth descriptors correlate to within
///   ~1e-3 between cells, and a full-window expectation lets such
///   near-ties drag the step by half a window regardless of temperature.
///   Anchoring bounds the step error by one cell, which the next level's
///   window absorbs; a distant secondary peak, if real, re-enters there.
///
/// Argmax ties resolve toward the window center (then lowest slot), so
/// textureless windows stand still. Weights are contrast-normalized per
/// window so the temperature measures relative peakedness. Every
/// transform is symmetric and monotone around the peak, leaving the
/// hard-argmax limit and all symmetry properties intact.
#[derive(Debug, Clone, Copy)]
pub struct SoftargmaxRefiner {
    pub temperature: f64,
    /// Scale `d_theta` by `1/cos(phi)` so steps are uniform in geodesic
    /// length across latitudes; `false` steps in raw ERP units instead.
    pub latitude_scaled: bool,
}

impl SoftargmaxRefiner {
    pub fn from_config(cfg: &RefinerConfig) -> Self {
        Self {
            temperature: cfg.temperature,
            latitude_scaled: true,
        }
    }
}

impl Refiner for SoftargmaxRefiner {
    fn refine(&self, input: &RefineInput) -> RefineStep {
        let corr = input.corr;
        let taps = corr.taps_per_cell();
        let (h, w) = (corr.height, corr.width);
        let prior: Vec<f64> = (0..taps)
            .map(|slot| {
                let (dx, dy) = corr.offset_of(slot);
                STEP_PRIOR_WEIGHT * (dx * dx + dy * dy) as f64
            })
            .collect();
        let steps: Vec<((f64, f64), f32)> = (0..h * w)
            .into_par_iter()
            .map(|cell| {
                let (row, col) = (cell / w, cell % w);
                // Cost-volume mean over the 3x3 neighboring cells.
                let mut window = vec![0.0f64; taps];
                for dr in -1isize..=1 {
                    let r = (row as isize + dr).clamp(0, h as isize - 1) as usize;
                    for dc in -1isize..=1 {
                        let c = (col as isize + dc).rem_euclid(w as isize) as usize;
                        let src = corr.at(r * w + c);
                        for (acc, &v) in window.iter_mut().zip(src) {
                            *acc += v as f64;
                        }
                    }
                }
                for (slot, v) in window.iter_mut().enumerate() {
                    *v = *v / 9.0 - prior[slot];
                }

                let mut best = (f64::NEG_INFINITY, isize::MAX, usize::MAX);
                for (slot, &c) in window.iter().enumerate() {
                    let (dx, dy) = corr.offset_of(slot);
                    let dist2 = dx * dx + dy * dy;
                    if c > best.0 || (c == best.0 && dist2 < best.1) {
                        best = (c, dist2, slot);
                    }
                }
                let peak = best.0;
                let (px, py) = corr.offset_of(best.2);
                // Subpixel estimation is separable: a temperature-weighted
                // expectation over the peak and its two axis neighbors, per
                // axis. On a quadratic bump c = peak - k*(o - o*)^2 the
                // weights form a Gaussian centered on the true offset o*,
                // with width sigma^2 = scale/(2*T*k), so the choice of
                // scale decides how much of a near-tied neighbor's pull
                // survives. Calibrating scale against the SMALLER of the
                // two side drops fixes the width at EXPECTATION_BANDWIDTH
                // cells at the default temperature: an exact side tie
                // (offset midway between cells) then collapses scale to the
                // floor and the expectation lands on the midpoint, while a
                // symmetric bump keeps both sides equally weighted and
                // stands still. The larger drop is ignored because it mixes
                // curvature with the displacement signal itself and
                // over-sharpening it starves the pull. Scale stays
                // independent of the configured temperature, which
                // therefore still sweeps soft to hard.
                let side = 2 * corr.radius + 1;
                let value_at = |dx: isize, dy: isize| -> Option<f64> {
                    let r = corr.radius as isize;
                    if dx.abs() > r || dy.abs() > r {
                        return None;
                    }
                    Some(window[((dy + r) * side as isize + (dx + r)) as usize])
                };
                let axis_expectation = |c_lo: Option<f64>, c_hi: Option<f64>| -> f64 {
                    let drop_lo = c_lo.map(|c| peak - c);
                    let drop_hi = c_hi.map(|c| peak - c);
                    let min_drop = match (drop_lo, drop_hi) {
                        (Some(a), Some(b)) => a.min(b),
                        (Some(a), None) => a,
                        (None, Some(b)) => b,
                        (None, None) => return 0.0,
                    };
                    let scale = (2.0
                        * EXPECTATION_BANDWIDTH
                        * EXPECTATION_BANDWIDTH
                        * BANDWIDTH_REFERENCE_TEMPERATURE
                        * min_drop)
                        .max(CONTRAST_FLOOR);
                    // Peak-relative exponents keep the weights in (0, 1].
                    let w_lo = drop_lo.map_or(0.0, |d| (-self.temperature * d / scale).exp());
                    let w_hi = drop_hi.map_or(0.0, |d| (-self.temperature * d / scale).exp());
                    (w_hi - w_lo) / (w_lo + 1.0 + w_hi)
                };
                let ex = px as f64
                    + axis_expectation(value_at(px - 1, py), value_at(px + 1, py));
                let ey = py as f64
                    + axis_expectation(value_at(px, py - 1), value_at(px, py + 1));
                // Rows grow toward negative latitude.
                let d_phi = -ey * input.cell_angle;
                let d_theta = if self.latitude_scaled {
                    let cos_phi = input.positions[cell].phi.cos().max(COS_PHI_FLOOR);
                    ex * input.cell_angle / cos_phi
                } else {
                    ex * input.cell_angle
                };
                // Certainty reflects the cell's own evidence, unfiltered.
                let own_peak = corr
                    .at(cell)
                    .iter()
                    .copied()
                    .fold(f32::NEG_INFINITY, f32::max) as f64;
                ((d_theta, d_phi), own_peak.tanh() as f32)
            })
            .collect();
        let (delta_u, delta_c) = steps.into_iter().unzip();
        RefineStep { delta_u, delta_c }
    }
}

/// Refiner that leaves the field untouched; refinement reduces to pure
/// upsampling. Useful as an ablation and in tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroRefiner;

impl Refiner for ZeroRefiner {
    fn refine(&self, input: &RefineInput) -> RefineStep {
        RefineStep {
            delta_u: vec![(0.0, 0.0); input.corr.cells()],
            delta_c: vec![0.0; input.corr.cells()],
        }
    }
}

/// Projects every match direction to spherical coordinates.
pub fn project_matches(m: &MatchField) -> Vec<SphericalCoord> {
    m.directions()
        .iter()
        .map(|d| cart_to_sph(d).expect("match directions are unit-norm"))
        .collect()
}

/// Samples B's descriptors at the current match positions, producing a
/// feature grid aligned with A's cells.
pub fn warp_features(f_b: &FeatureGrid, positions: &[SphericalCoord]) -> FeatureGrid {
    let spec = level_spec(f_b);
    let dim = f_b.dim();
    let data: Vec<f32> = positions
        .par_iter()
        .map(|&u| {
            let p = sph_to_pixel(u, &spec);
            sample_descriptor(f_b, p)
        })
        .flatten()
        .collect();
    FeatureGrid::new(f_b.stride(), f_b.height(), f_b.width(), dim, data)
}

fn level_spec(g: &FeatureGrid) -> ErpGridSpec {
    ErpGridSpec::new(g.width(), g.height()).expect("level grids keep the 2:1 aspect")
}

fn sample_descriptor(g: &FeatureGrid, p: PixelCoord) -> Vec<f32> {
    let taps = erp_bilinear_taps(p, g.width(), g.height());
    let mut out = vec![0.0f64; g.dim()];
    for (r, c, w) in taps.taps {
        if w == 0.0 {
            continue;
        }
        let d = g.descriptor(r, c);
        for (o, &v) in out.iter_mut().zip(d) {
            *o += w * v as f64;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Correlates A's descriptor at each cell against B's descriptors sampled
/// on a `(2k+1)^2` pixel-offset window around the current match position.
/// Window taps wrap in longitude and clamp in latitude.
pub fn local_correlation(
    f_a: &FeatureGrid,
    f_b: &FeatureGrid,
    positions: &[SphericalCoord],
    radius: usize,
) -> CorrelationGrid {
    assert!(radius >= 1);
    assert_eq!(f_a.len(), positions.len());
    let spec = level_spec(f_b);
    let side = 2 * radius + 1;
    let k = radius as isize;
    let data: Vec<f32> = (0..f_a.len())
        .into_par_iter()
        .map(|cell| {
            let desc_a = f_a.descriptor_at(cell);
            let base = sph_to_pixel(positions[cell], &spec);
            let mut window = Vec::with_capacity(side * side);
            for dy in -k..=k {
                for dx in -k..=k {
                    let p = PixelCoord::new(base.col + dx as f64, base.row + dy as f64);
                    let sample = sample_descriptor(f_b, p);
                    let corr: f64 = desc_a
                        .iter()
                        .zip(&sample)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum();
                    window.push(corr as f32);
                }
            }
            window
        })
        .flatten()
        .collect();
    CorrelationGrid {
        height: f_a.height(),
        width: f_a.width(),
        radius,
        data,
    }
}

/// Applies a refinement step: positions move with longitude wrapping and
/// latitude clamping, certainty accumulates within [0,1], and directions
/// are rebuilt from the updated angles.
pub fn update_and_unproject(
    positions: &[SphericalCoord],
    certainty: &[f32],
    step: &RefineStep,
    spec: ErpGridSpec,
) -> Result<MatchField, RefineError> {
    if positions.len() != spec.len()
        || certainty.len() != spec.len()
        || step.delta_u.len() != spec.len()
        || step.delta_c.len() != spec.len()
    {
        return Err(RefineError::LevelMismatch {
            want_w: spec.width(),
            want_h: spec.height(),
            got_w: positions.len().min(step.delta_u.len()),
            got_h: 1,
        });
    }
    let mut directions = Vec::with_capacity(spec.len());
    let mut out_c = Vec::with_capacity(spec.len());
    for i in 0..spec.len() {
        let (dt, dp) = step.delta_u[i];
        let u = SphericalCoord::new(
            wrap_theta(positions[i].theta + dt),
            (positions[i].phi + dp).clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2),
        );
        directions.push(sph_to_cart(u));
        out_c.push((certainty[i] + step.delta_c[i]).clamp(0.0, 1.0));
    }
    Ok(MatchField::new(spec, directions, out_c)?)
}

/// Doubles a match field's resolution. Directions are blended in Cartesian
/// space and renormalized so seam- and pole-adjacent flows interpolate on
/// the sphere rather than across the longitude discontinuity; certainty is
/// blended and clamped.
pub fn upsample_matchfield(m: &MatchField) -> Result<MatchField, RefineError> {
    let coarse = m.spec();
    let fine = ErpGridSpec::new(coarse.width() * 2, coarse.height() * 2)
        .expect("doubling preserves the 2:1 aspect");
    let mut directions = Vec::with_capacity(fine.len());
    let mut certainty = Vec::with_capacity(fine.len());
    for row in 0..fine.height() {
        for col in 0..fine.width() {
            // Fine cell center in coarse pixel coordinates.
            let p = PixelCoord::new(
                (col as f64 + 0.5) / 2.0 - 0.5,
                (row as f64 + 0.5) / 2.0 - 0.5,
            );
            let taps = erp_bilinear_taps(p, coarse.width(), coarse.height());
            let mut dir = Vector3::zeros();
            let mut cert = 0.0f64;
            let mut best = (f64::MIN, 0usize);
            for (r, c, w) in taps.taps {
                if w == 0.0 {
                    continue;
                }
                let idx = coarse.index(r, c);
                dir += w * m.directions()[idx];
                cert += w * m.certainty()[idx] as f64;
                if w > best.0 {
                    best = (w, idx);
                }
            }
            let norm = dir.norm();
            // Antipodal cancellation leaves nothing to normalize; fall back
            // to the dominant neighbor.
            let dir = if norm < 1e-12 {
                m.directions()[best.1]
            } else {
                dir / norm
            };
            directions.push(dir);
            certainty.push((cert as f32).clamp(0.0, 1.0));
        }
    }
    Ok(MatchField::new(fine, directions, certainty)?)
}

/// Runs the full coarse-to-fine schedule: upsample into each level, then
/// project, correlate, refine, and update. The input field must sit two
/// strides above the first level (each level halves the stride).
pub fn run_refinement(
    coarse: &MatchField,
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    cfg: &RefinerConfig,
    refiner: &dyn Refiner,
) -> Result<MatchField, RefineError> {
    cfg.validate()?;
    let mut field = coarse.clone();
    for &stride in &cfg.levels {
        let spec = pyr_a.spec(stride);
        if field.spec().width() * 2 != spec.width() {
            return Err(RefineError::LevelMismatch {
                want_w: spec.width() / 2,
                want_h: spec.height() / 2,
                got_w: field.spec().width(),
                got_h: field.spec().height(),
            });
        }
        field = upsample_matchfield(&field)?;
        field = refine_level(&field, pyr_a.level(stride), pyr_b.level(stride), cfg, refiner)?;
    }
    Ok(field)
}

/// One refinement pass at a single level.
pub fn refine_level(
    field: &MatchField,
    f_a: &FeatureGrid,
    f_b: &FeatureGrid,
    cfg: &RefinerConfig,
    refiner: &dyn Refiner,
) -> Result<MatchField, RefineError> {
    let spec = *field.spec();
    if f_a.width() != spec.width() || f_a.height() != spec.height() {
        return Err(RefineError::LevelMismatch {
            want_w: f_a.width(),
            want_h: f_a.height(),
            got_w: spec.width(),
            got_h: spec.height(),
        });
    }
    let positions = project_matches(field);
    let f_b_warped = warp_features(f_b, &positions);
    let corr = local_correlation(f_a, f_b, &positions, cfg.patch_radius);
    let rays = pixel_rays(&spec);
    let flow_residual: Vec<Vector3<f64>> = field
        .directions()
        .iter()
        .zip(&rays)
        .map(|(d, r)| d - r)
        .collect();
    let input = RefineInput {
        f_a,
        f_b_warped: &f_b_warped,
        corr: &corr,
        positions: &positions,
        flow_residual: &flow_residual,
        cell_angle: spec.cell_angle(),
    };
    let step = refiner.refine(&input);
    update_and_unproject(&positions, field.certainty(), &step, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn grid_from(descs: Vec<Vec<f32>>, width: usize, height: usize, stride: usize) -> FeatureGrid {
        let dim = descs[0].len();
        FeatureGrid::new(stride, height, width, dim, descs.into_iter().flatten().collect())
    }

    #[test]
    fn project_handles_landmarks_and_roundtrips() {
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let mut dirs = pixel_rays(&spec);
        dirs[0] = Vector3::new(0.0, 0.0, 1.0);
        dirs[1] = Vector3::new(0.0, 1.0, 0.0);
        let field = MatchField::new(spec, dirs.clone(), vec![1.0; 32]).unwrap();
        let proj = project_matches(&field);
        assert_eq!(proj[0].theta, 0.0);
        assert_eq!(proj[0].phi, 0.0);
        assert_eq!(proj[1].theta, 0.0);
        assert_relative_eq!(proj[1].phi, FRAC_PI_2, epsilon = 1e-15);
        for (u, d) in proj.iter().zip(&dirs) {
            assert_relative_eq!(sph_to_cart(*u), *d, epsilon = 1e-9);
        }
    }

    #[test]
    fn warp_at_own_centers_is_identity() {
        let descs: Vec<Vec<f32>> = (0..32).map(|i| vec![i as f32, -(i as f32)]).collect();
        let g = grid_from(descs, 8, 4, 32);
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let centers: Vec<SphericalCoord> = pixel_rays(&spec)
            .iter()
            .map(|d| cart_to_sph(d).unwrap())
            .collect();
        let warped = warp_features(&g, &centers);
        assert_eq!(warped.data(), g.data());
    }

    #[test]
    fn warp_constant_grid_is_constant() {
        let g = grid_from(vec![vec![0.3, 0.7]; 32], 8, 4, 16);
        let positions = vec![SphericalCoord::new(1.234, -0.5); 32];
        let warped = warp_features(&g, &positions);
        for i in 0..32 {
            assert_relative_eq!(warped.descriptor_at(i)[0], 0.3, epsilon = 1e-6);
            assert_relative_eq!(warped.descriptor_at(i)[1], 0.7, epsilon = 1e-6);
        }
    }

    #[test]
    fn warp_across_seam_matches_manual_blend() {
        // Position midway between the last and first columns of a row.
        let descs: Vec<Vec<f32>> = (0..32).map(|i| vec![i as f32]).collect();
        let g = grid_from(descs, 8, 4, 32);
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let u = crate::sphere::pixel_to_sph(PixelCoord::new(7.5, 1.0), &spec);
        let warped = warp_features(&g, &[u; 32]);
        // Row 1 holds cells 8..16; halfway between col 7 (=15) and col 0 (=8).
        assert_relative_eq!(warped.descriptor_at(0)[0], 11.5, epsilon = 1e-4);
    }

    #[test]
    fn correlation_orthogonal_features_is_zero() {
        let a = grid_from(vec![vec![1.0, 0.0]; 32], 8, 4, 32);
        let b = grid_from(vec![vec![0.0, 1.0]; 32], 8, 4, 32);
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let centers: Vec<SphericalCoord> = pixel_rays(&spec)
            .iter()
            .map(|d| cart_to_sph(d).unwrap())
            .collect();
        let corr = local_correlation(&a, &b, &centers, 2);
        assert!(corr.data.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn correlation_constant_b_is_flat_per_cell() {
        let a = grid_from((0..32).map(|i| vec![i as f32, 1.0]).collect(), 8, 4, 32);
        let b = grid_from(vec![vec![0.5, -0.25]; 32], 8, 4, 32);
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let centers: Vec<SphericalCoord> = pixel_rays(&spec)
            .iter()
            .map(|d| cart_to_sph(d).unwrap())
            .collect();
        let corr = local_correlation(&a, &b, &centers, 1);
        for cell in 0..32 {
            let w = corr.at(cell);
            for &v in w {
                assert_relative_eq!(v, w[0], epsilon = 1e-5);
            }
        }
    }

    fn single_cell_input<'a>(
        corr: &'a CorrelationGrid,
        positions: &'a [SphericalCoord],
        f: &'a FeatureGrid,
        residual: &'a [Vector3<f64>],
        cell_angle: f64,
    ) -> RefineInput<'a> {
        RefineInput {
            f_a: f,
            f_b_warped: f,
            corr,
            positions,
            flow_residual: residual,
            cell_angle,
        }
    }

    fn corr_with_values(values: Vec<f32>, radius: usize) -> CorrelationGrid {
        CorrelationGrid {
            height: 1,
            width: 1,
            radius,
            data: values,
        }
    }

    #[test]
    fn softargmax_zero_for_symmetric_window() {
        let mut values = vec![0.0f32; 25];
        values[12] = 1.0; // center slot of a 5x5 window
        let corr = corr_with_values(values, 2);
        let positions = [SphericalCoord::new(0.0, 0.0)];
        let f = grid_from(vec![vec![1.0]; 2], 2, 1, 32);
        let residual = [Vector3::zeros()];
        let refiner = SoftargmaxRefiner {
            temperature: 10.0,
            latitude_scaled: true,
        };
        let step = refiner.refine(&single_cell_input(&corr, &positions, &f, &residual, 0.1));
        assert_relative_eq!(step.delta_u[0].0, 0.0, epsilon = 1e-12);
        assert_relative_eq!(step.delta_u[0].1, 0.0, epsilon = 1e-12);
        assert_relative_eq!(step.delta_c[0] as f64, 1.0f64.tanh(), epsilon = 1e-6);
    }

    #[test]
    fn softargmax_hard_limit_is_one_cell_geodesic() {
        // Peak one column to the right; huge temperature approximates the
        // hard argmax.
        let mut values = vec![0.0f32; 25];
        values[13] = 1.0; // (dx,dy) = (+1,0)
        let corr = corr_with_values(values, 2);
        let phi = PI / 3.0; // 60 degrees
        let positions = [SphericalCoord::new(0.0, phi)];
        let f = grid_from(vec![vec![1.0]; 2], 2, 1, 32);
        let residual = [Vector3::zeros()];
        let cell = 0.05;
        let refiner = SoftargmaxRefiner {
            temperature: 1e4,
            latitude_scaled: true,
        };
        let step = refiner.refine(&single_cell_input(&corr, &positions, &f, &residual, cell));
        // d_theta * cos(phi) = exactly one cell; at 60 degrees that is twice
        // the equatorial step.
        assert_relative_eq!(step.delta_u[0].0 * phi.cos(), cell, epsilon = 1e-9);
        let equator = [SphericalCoord::new(0.0, 0.0)];
        let step_eq = refiner.refine(&single_cell_input(&corr, &equator, &f, &residual, cell));
        assert_relative_eq!(step.delta_u[0].0, 2.0 * step_eq.delta_u[0].0, epsilon = 1e-9);

        // Raw ERP ablation ignores latitude.
        let raw = SoftargmaxRefiner {
            temperature: 1e4,
            latitude_scaled: false,
        };
        let step_raw = raw.refine(&single_cell_input(&corr, &positions, &f, &residual, cell));
        assert_relative_eq!(step_raw.delta_u[0].0, cell, epsilon = 1e-9);
        assert_relative_eq!(step_raw.delta_u[0].1, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn softargmax_row_offset_moves_latitude_down() {
        let mut values = vec![0.0f32; 25];
        values[17] = 1.0; // (dx,dy) = (0,+1): one row down
        let corr = corr_with_values(values, 2);
        let positions = [SphericalCoord::new(0.0, 0.0)];
        let f = grid_from(vec![vec![1.0]; 2], 2, 1, 32);
        let residual = [Vector3::zeros()];
        let refiner = SoftargmaxRefiner {
            temperature: 1e4,
            latitude_scaled: true,
        };
        let step = refiner.refine(&single_cell_input(&corr, &positions, &f, &residual, 0.05));
        assert_relative_eq!(step.delta_u[0].1, -0.05, epsilon = 1e-9);
    }

    #[test]
    fn update_identity_and_wrap() {
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let rays = pixel_rays(&spec);
        let positions: Vec<SphericalCoord> = rays.iter().map(|d| cart_to_sph(d).unwrap()).collect();
        let certainty = vec![0.5f32; 32];
        let zero = RefineStep {
            delta_u: vec![(0.0, 0.0); 32],
            delta_c: vec![0.0; 32],
        };
        let field = update_and_unproject(&positions, &certainty, &zero, spec).unwrap();
        for (d, r) in field.directions().iter().zip(&rays) {
            assert_relative_eq!(*d, *r, epsilon = 1e-12);
        }

        // theta = pi - delta stepped by 2 delta wraps to -pi + delta.
        let delta = 1e-3;
        let mut positions = positions;
        positions[0] = SphericalCoord::new(PI - delta, 0.2);
        let mut step = RefineStep {
            delta_u: vec![(0.0, 0.0); 32],
            delta_c: vec![0.0; 32],
        };
        step.delta_u[0] = (2.0 * delta, 0.0);
        let field = update_and_unproject(&positions, &certainty, &step, spec).unwrap();
        let u = cart_to_sph(&field.directions()[0]).unwrap();
        assert_relative_eq!(u.theta, -PI + delta, epsilon = 1e-9);

        // Latitude clamps at the poles, certainty clamps at [0,1].
        positions[1] = SphericalCoord::new(0.0, FRAC_PI_2 - 1e-4);
        step.delta_u[1] = (0.0, 1.0);
        step.delta_c[1] = 9.0;
        let field = update_and_unproject(&positions, &certainty, &step, spec).unwrap();
        let u = cart_to_sph(&field.directions()[1]).unwrap();
        assert_relative_eq!(u.phi, FRAC_PI_2, epsilon = 1e-12);
        assert_eq!(field.certainty()[1], 1.0);
    }

    #[test]
    fn update_output_stays_unit_norm() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let positions: Vec<SphericalCoord> = (0..32)
            .map(|_| {
                SphericalCoord::new(
                    rng.random_range(-PI..PI),
                    rng.random_range(-FRAC_PI_2..FRAC_PI_2),
                )
            })
            .collect();
        let step = RefineStep {
            delta_u: (0..32)
                .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
            delta_c: vec![0.0; 32],
        };
        let field = update_and_unproject(&positions, &vec![0.5; 32], &step, spec).unwrap();
        for d in field.directions() {
            assert!((d.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_constant_field_stays_constant() {
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let dir = Vector3::new(0.6, 0.0, 0.8);
        let field = MatchField::new(spec, vec![dir; 32], vec![0.25; 32]).unwrap();
        let up = upsample_matchfield(&field).unwrap();
        assert_eq!(up.spec().width(), 16);
        assert_eq!(up.spec().height(), 8);
        for d in up.directions() {
            assert_relative_eq!(*d, dir, epsilon = 1e-12);
        }
        for &c in up.certainty() {
            assert_relative_eq!(c, 0.25, epsilon = 1e-6);
        }
    }

    #[test]
    fn upsample_then_downsample_recovers_smooth_field() {
        // A smooth direction field: cell rays themselves. Pole rows are
        // excluded; row clamping biases their children equator-ward by
        // design (latitude clamps instead of reflecting).
        let spec = ErpGridSpec::new(128, 64).unwrap();
        let rays = pixel_rays(&spec);
        let field = MatchField::new(spec, rays.clone(), vec![0.5; spec.len()]).unwrap();
        let up = upsample_matchfield(&field).unwrap();
        // Average the four children of each coarse cell and renormalize.
        for row in 1..63 {
            for col in 0..128 {
                let mut acc = Vector3::zeros();
                for dr in 0..2 {
                    for dc in 0..2 {
                        acc += up.directions()[(2 * row + dr) * 256 + 2 * col + dc];
                    }
                }
                let acc = acc.normalize();
                let orig = rays[row * 128 + col];
                assert!(
                    (acc - orig).norm() < 1e-3,
                    "cell ({row},{col}): {acc:?} vs {orig:?}"
                );
            }
        }
    }

    #[test]
    fn upsample_blends_inside_neighbor_cone_at_seam() {
        // Flow pointing just left and just right of the seam.
        let spec = ErpGridSpec::new(8, 4).unwrap();
        let mut dirs = Vec::with_capacity(32);
        for row in 0..4 {
            for col in 0..8 {
                let theta = if col < 4 { PI - 0.1 } else { -PI + 0.1 };
                dirs.push(sph_to_cart(SphericalCoord::new(theta, 0.1 * row as f64)));
            }
        }
        let field = MatchField::new(spec, dirs, vec![1.0; 32]).unwrap();
        let up = upsample_matchfield(&field).unwrap();
        for d in up.directions() {
            // Every output stays near the +/-pi meridian band instead of
            // swinging through theta = 0.
            let u = cart_to_sph(d).unwrap();
            assert!(
                u.theta.abs() > PI - 0.2,
                "interpolated direction crossed the short way: {u:?}"
            );
            assert!((d.norm() - 1.0).abs() < 1e-9);
        }
    }

    fn identity_coarse(spec: ErpGridSpec) -> MatchField {
        let rays = pixel_rays(&spec);
        MatchField::new(spec, rays, vec![1.0; spec.len()]).unwrap()
    }

    #[test]
    fn zero_refiner_reduces_to_pure_upsampling() {
        use crate::pyramid::{FeatureExtractor, PatchExtractor};
        use crate::synth::{raycast_erp, SceneSpec};
        use crate::frame::PoseSE3;

        let grid = ErpGridSpec::new(128, 64).unwrap();
        let scene = SceneSpec::textured_room(2.0, 9);
        let (img, _) = raycast_erp(&scene, &PoseSE3::identity(), &grid).unwrap();
        let pyr = PatchExtractor::default().extract(&img).unwrap();

        let coarse = identity_coarse(pyr.spec(32));
        let cfg = RefinerConfig::default();
        let refined = run_refinement(&coarse, &pyr, &pyr, &cfg, &ZeroRefiner).unwrap();

        let mut expected = coarse;
        for _ in 0..5 {
            expected = upsample_matchfield(&expected).unwrap();
        }
        assert_eq!(refined.spec(), expected.spec());
        for i in 0..expected.spec().len() {
            // Update with zero deltas still reprojects through spherical
            // coordinates, so compare angles tightly rather than bitwise.
            let a = refined.directions()[i];
            let b = expected.directions()[i];
            assert!((a - b).norm() < 1e-12, "cell {i}");
            assert_eq!(refined.certainty()[i], expected.certainty()[i]);
        }
    }

    /// Refining a pair of identical images from an identity coarse field
    /// keeps the field at identity to within half a pixel in the mean.
    ///
    /// The assertion is scoped to |phi| <= 45 degrees because the
    /// latitude-compensated update is structurally unstable near the
    /// poles: window offsets are measured on the ERP pixel lattice while
    /// the theta step is scaled by 1/cos(phi), so the correction loop has
    /// gain g/cos(phi) for estimator gain g, and with upsampling doubling
    /// the residual each level, containment requires 2|1 - g/cos(phi)| < 1.
    /// The subpixel estimator's g ~ 0.9 puts the contraction boundary near
    /// 53 degrees; beyond it errors oscillate up to the correlation
    /// window's reach of a few pixels, and the pole rows additionally
    /// inherit an equator-ward bias from upsampling's clamped vertical
    /// taps. Within the band, the mean meets the half-pixel budget with
    /// about 3x margin; individual cells carry a texture-dependent tail
    /// (softargmax pulls on aliased raycast texture), so the per-cell
    /// bound is the window reach, asserted here at 2 px.
    #[test]
    fn identical_images_stay_near_identity() {
        use crate::pyramid::{FeatureExtractor, PatchExtractor};
        use crate::synth::{raycast_erp, SceneSpec};
        use crate::frame::PoseSE3;

        let grid = ErpGridSpec::new(128, 64).unwrap();
        let scene = SceneSpec::textured_room(2.0, 9);
        let (img, _) = raycast_erp(&scene, &PoseSE3::identity(), &grid).unwrap();
        let pyr = PatchExtractor::default().extract(&img).unwrap();

        let coarse = identity_coarse(pyr.spec(32));
        let cfg = RefinerConfig::default();
        let refiner = SoftargmaxRefiner::from_config(&cfg);
        let refined = run_refinement(&coarse, &pyr, &pyr, &cfg, &refiner).unwrap();

        let rays = pixel_rays(&grid);
        let cell = grid.cell_angle();
        let mut worst = 0.0f64;
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for row in 0..grid.height() {
            let phi = std::f64::consts::FRAC_PI_2
                - std::f64::consts::PI * (row as f64 + 0.5) / grid.height() as f64;
            if phi.abs() > 45.0f64.to_radians() {
                continue;
            }
            for col in 0..grid.width() {
                let i = row * grid.width() + col;
                let a = crate::sphere::angle_between(&refined.directions()[i], &rays[i]);
                worst = worst.max(a);
                sum += a;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(
            mean <= 0.5 * cell,
            "mean drift {:.3} px exceeds the half-pixel budget",
            mean / cell
        );
        assert!(
            worst <= 2.0 * cell,
            "worst drift {:.3} px exceeds the window-reach bound",
            worst / cell
        );
    }

    #[test]
    fn run_refinement_rejects_misaligned_coarse_field() {
        use crate::pyramid::{FeatureExtractor, PatchExtractor};
        use crate::synth::{raycast_erp, SceneSpec};
        use crate::frame::PoseSE3;

        let grid = ErpGridSpec::new(128, 64).unwrap();
        let scene = SceneSpec::flat_room(2.0, 1);
        let (img, _) = raycast_erp(&scene, &PoseSE3::identity(), &grid).unwrap();
        let pyr = PatchExtractor::default().extract(&img).unwrap();
        let wrong = identity_coarse(pyr.spec(16));
        let cfg = RefinerConfig::default();
        assert!(matches!(
            run_refinement(&wrong, &pyr, &pyr, &cfg, &ZeroRefiner),
            Err(RefineError::LevelMismatch { .. })
        ));
    }
}
