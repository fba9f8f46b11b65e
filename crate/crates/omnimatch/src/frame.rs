//! ERP frames: images, depth maps, camera poses, and the geometric
//! operations between two frames (warping, co-visibility, overlap,
//! azimuth augmentation).
//!
//! Poses are camera-to-world: `X_world = R * X_cam + t`. All directions are
//! unit vectors in the owning camera's frame.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

use crate::raster::{erp_bilinear_sample_masked, Grid};
use crate::sphere::{
    azimuth_rotation, cart_to_sph, pixel_to_sph, sph_to_pixel, ErpGridSpec, PixelCoord,
};

/// Points warped closer to the destination camera center than this are
/// treated as direction-less and flagged invalid.
pub const MIN_WARP_RADIUS: f64 = 1e-9;

/// Default relative depth tolerance for the co-visibility mask.
pub const DEFAULT_CERTAINTY_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("grid mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("matrix is not a rotation (orthonormality residual {residual:e})")]
    InvalidRotation { residual: f64 },
    #[error("image must have 1 or 3 channels, got {0}")]
    BadChannelCount(usize),
}

/// Intensity image on an ERP grid; 1 (gray) or 3 (RGB) channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage {
    spec: ErpGridSpec,
    grid: Grid,
}

impl ErpImage {
    pub fn new(spec: ErpGridSpec, grid: Grid) -> Result<Self, FrameError> {
        if grid.width() != spec.width() || grid.height() != spec.height() {
            return Err(FrameError::DimensionMismatch {
                expected: (spec.width(), spec.height()),
                got: (grid.width(), grid.height()),
            });
        }
        if grid.channels() != 1 && grid.channels() != 3 {
            return Err(FrameError::BadChannelCount(grid.channels()));
        }
        Ok(Self { spec, grid })
    }

    pub fn spec(&self) -> &ErpGridSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.grid.channels()
    }

    /// Rec.601 luma; identity for single-channel images.
    pub fn to_grayscale(&self) -> Grid {
        if self.grid.channels() == 1 {
            return self.grid.clone();
        }
        let mut out = Grid::new(self.spec.width(), self.spec.height(), 1);
        for row in 0..self.spec.height() {
            for col in 0..self.spec.width() {
                let px = self.grid.pixel(row, col);
                out.set(row, col, 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
            }
        }
        out
    }
}

/// Per-pixel range along the viewing ray, in meters, with a validity mask.
/// Depths that are non-finite or non-positive are forced invalid on
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    spec: ErpGridSpec,
    depth: Grid,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(spec: ErpGridSpec, depth: Vec<f32>, valid: Vec<bool>) -> Result<Self, FrameError> {
        if depth.len() != spec.len() || valid.len() != spec.len() {
            return Err(FrameError::DimensionMismatch {
                expected: (spec.width(), spec.height()),
                got: (depth.len().min(valid.len()), 1),
            });
        }
        let valid = depth
            .iter()
            .zip(valid)
            .map(|(&d, v)| v && d.is_finite() && d > 0.0)
            .collect();
        Ok(Self {
            spec,
            depth: Grid::from_vec(spec.width(), spec.height(), 1, depth),
            valid,
        })
    }

    pub fn spec(&self) -> &ErpGridSpec {
        &self.spec
    }

    pub fn depth(&self) -> &Grid {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[self.spec.index(row, col)]
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.depth.at(row, col)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Masked bilinear sample; `None` unless every contributing tap is valid.
    pub fn sample(&self, p: PixelCoord) -> Option<f32> {
        erp_bilinear_sample_masked(&self.depth, &self.valid, p)
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw 3x3 matrix, rejecting matrices that are not
    /// proper rotations to within `1e-6`.
    pub fn from_matrix(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, FrameError> {
        let residual = (r.transpose() * r - Matrix3::identity()).norm();
        let det = r.determinant();
        if residual > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(FrameError::InvalidRotation {
                residual: residual.max((det - 1.0).abs()),
            });
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(r),
            translation: t,
        })
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rot_inv = self.rotation.inverse();
        PoseSE3 {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// Transform taking points in `a`'s camera frame to `b`'s camera frame:
    /// `P_b = R_b^T R_a P_a + R_b^T (t_a - t_b)`.
    pub fn relative(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
        b.inverse().compose(a)
    }
}

/// Dense field over frame A's grid mapping each pixel to a direction in
/// frame B, with a confidence in `[0, 1]`. Directions are unit length even
/// for zero-confidence entries (placeholder rays).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchField {
    spec: ErpGridSpec,
    directions: Vec<Vector3<f64>>,
    certainty: Vec<f32>,
}

impl MatchField {
    pub fn new(
        spec: ErpGridSpec,
        directions: Vec<Vector3<f64>>,
        certainty: Vec<f32>,
    ) -> Result<Self, FrameError> {
        if directions.len() != spec.len() || certainty.len() != spec.len() {
            return Err(FrameError::DimensionMismatch {
                expected: (spec.width(), spec.height()),
                got: (directions.len().min(certainty.len()), 1),
            });
        }
        Ok(Self {
            spec,
            directions,
            certainty,
        })
    }

    /// Field of zero-confidence placeholder rays (each pixel's own direction).
    pub fn unresolved(spec: ErpGridSpec) -> Self {
        let directions = pixel_rays(&spec);
        let certainty = vec![0.0; spec.len()];
        Self {
            spec,
            directions,
            certainty,
        }
    }

    pub fn spec(&self) -> &ErpGridSpec {
        &self.spec
    }

    pub fn directions(&self) -> &[Vector3<f64>] {
        &self.directions
    }

    pub fn certainty(&self) -> &[f32] {
        &self.certainty
    }

    pub fn direction(&self, row: usize, col: usize) -> &Vector3<f64> {
        &self.directions[self.spec.index(row, col)]
    }

    pub fn certainty_at(&self, row: usize, col: usize) -> f32 {
        self.certainty[self.spec.index(row, col)]
    }

    pub fn directions_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.directions
    }

    pub fn certainty_mut(&mut self) -> &mut [f32] {
        &mut self.certainty
    }
}

/// Unit viewing ray of every pixel center, row-major.
pub fn pixel_rays(spec: &ErpGridSpec) -> Vec<Vector3<f64>> {
    let mut rays = Vec::with_capacity(spec.len());
    for row in 0..spec.height() {
        for col in 0..spec.width() {
            let u = pixel_to_sph(PixelCoord::new(col as f64, row as f64), spec);
            rays.push(crate::sphere::sph_to_cart(u));
        }
    }
    rays
}

/// Warps a single point: `dir_a` scaled by `depth` in A's frame, expressed
/// as a direction and range in B's frame. `None` when the point lands on
/// B's center.
pub fn warp_point(
    depth: f64,
    dir_a: &Vector3<f64>,
    a_to_b: &PoseSE3,
) -> Option<(Vector3<f64>, f64)> {
    let p = a_to_b.transform_point(&(dir_a * depth));
    let n = p.norm();
    if n < MIN_WARP_RADIUS {
        return None;
    }
    Some((p / n, n))
}

/// Warps every valid pixel of `depth_a` into B's frame. Returns the dense
/// direction field (confidence 1 where resolvable, 0 elsewhere) and the
/// range of each warped point as a depth map on A's grid. Points that
/// coincide with B's center are flagged invalid rather than failing the
/// whole warp.
pub fn warp_frame(
    depth_a: &DepthMap,
    pose_a: &PoseSE3,
    pose_b: &PoseSE3,
) -> (MatchField, DepthMap) {
    let spec = *depth_a.spec();
    let a_to_b = PoseSE3::relative(pose_a, pose_b);
    let rays = pixel_rays(&spec);

    let mut directions = Vec::with_capacity(spec.len());
    let mut certainty = vec![0.0f32; spec.len()];
    let mut warped_depth = vec![0.0f32; spec.len()];
    let mut warped_valid = vec![false; spec.len()];

    for (i, ray) in rays.iter().enumerate() {
        if !depth_a.valid()[i] {
            directions.push(*ray);
            continue;
        }
        match warp_point(depth_a.depth().data()[i] as f64, ray, &a_to_b) {
            Some((dir, range)) => {
                directions.push(dir);
                certainty[i] = 1.0;
                warped_depth[i] = range as f32;
                warped_valid[i] = true;
            }
            None => directions.push(*ray),
        }
    }

    let field = MatchField::new(spec, directions, certainty).expect("lengths match spec");
    let depth = DepthMap::new(spec, warped_depth, warped_valid).expect("lengths match spec");
    (field, depth)
}

/// Co-visibility mask on A's grid: true where the warped range agrees with
/// B's observed depth at the warped direction to within relative tolerance
/// `alpha`. Pixels whose warp is invalid, or whose bilinear depth lookup in
/// B touches any invalid sample, are false.
pub fn certainty_mask(
    field: &MatchField,
    warped_depth: &DepthMap,
    depth_b: &DepthMap,
    alpha: f64,
) -> Result<Vec<bool>, FrameError> {
    if field.spec() != warped_depth.spec() {
        return Err(FrameError::DimensionMismatch {
            expected: (field.spec().width(), field.spec().height()),
            got: (warped_depth.spec().width(), warped_depth.spec().height()),
        });
    }
    let spec_b = *depth_b.spec();
    let mut mask = vec![false; field.spec().len()];
    for i in 0..mask.len() {
        if !warped_depth.valid()[i] {
            continue;
        }
        let u = match cart_to_sph(&field.directions()[i]) {
            Ok(u) => u,
            Err(_) => continue,
        };
        let Some(d_b) = depth_b.sample(sph_to_pixel(u, &spec_b)) else {
            continue;
        };
        let d_warp = warped_depth.depth().data()[i];
        mask[i] = ((d_warp - d_b) / d_b).abs() < alpha as f32;
    }
    Ok(mask)
}

/// How overlap compares the warped range against B's depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OverlapCriterion {
    /// `|d_warp - d_b| < meters`.
    AbsoluteMeters(f64),
    /// `|d_warp - d_b| / d_b < fraction`.
    Relative(f64),
}

impl Default for OverlapCriterion {
    fn default() -> Self {
        OverlapCriterion::AbsoluteMeters(0.1)
    }
}

/// Fraction of A's valid-depth pixels whose surface point is co-visible in
/// B under `criterion`. Returns 0 when A has no valid depth.
pub fn overlap_ratio(
    depth_a: &DepthMap,
    pose_a: &PoseSE3,
    depth_b: &DepthMap,
    pose_b: &PoseSE3,
    criterion: OverlapCriterion,
) -> f64 {
    let denom = depth_a.valid_count();
    if denom == 0 {
        return 0.0;
    }
    let (field, warped) = warp_frame(depth_a, pose_a, pose_b);
    let spec_b = *depth_b.spec();
    let mut hits = 0usize;
    for i in 0..field.spec().len() {
        if !warped.valid()[i] {
            continue;
        }
        let Ok(u) = cart_to_sph(&field.directions()[i]) else {
            continue;
        };
        let Some(d_b) = depth_b.sample(sph_to_pixel(u, &spec_b)) else {
            continue;
        };
        let d_warp = warped.depth().data()[i] as f64;
        let agrees = match criterion {
            OverlapCriterion::AbsoluteMeters(m) => (d_warp - d_b as f64).abs() < m,
            OverlapCriterion::Relative(f) => ((d_warp - d_b as f64) / d_b as f64).abs() < f,
        };
        if agrees {
            hits += 1;
        }
    }
    hits as f64 / denom as f64
}

/// Column-shift policy for azimuth augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftMode {
    /// Snap the rotation to a whole number of columns so the shift is an
    /// exact permutation (no resampling).
    #[default]
    Snap,
    /// Honor the requested angle exactly and resample bilinearly.
    Bilinear,
}

/// An azimuth-augmented frame plus the yaw that was actually applied
/// (snapped to the pixel lattice in [`ShiftMode::Snap`]).
#[derive(Debug, Clone)]
pub struct AugmentedFrame {
    pub image: ErpImage,
    pub depth: Option<DepthMap>,
    pub pose: PoseSE3,
    pub applied_angle: f64,
}

/// Rotates a frame about the gravity axis by shifting ERP columns and
/// composing the pose with the same yaw, so the augmented frame depicts the
/// identical scene: `I'(col) = I(col + shift)`, `R' = R * R_y(angle)`.
pub fn augment_azimuth(
    image: &ErpImage,
    depth: Option<&DepthMap>,
    pose: &PoseSE3,
    angle: f64,
    mode: ShiftMode,
) -> AugmentedFrame {
    let spec = *image.spec();
    let w = spec.width() as f64;

    let (shift, applied_angle) = match mode {
        ShiftMode::Snap => {
            let cols = (angle * w / TAU).round();
            (cols, cols * TAU / w)
        }
        ShiftMode::Bilinear => (angle * w / TAU, angle),
    };

    let shifted_image = shift_columns(image.grid(), shift, mode);
    let image_out = ErpImage::new(spec, shifted_image).expect("shape preserved");

    let depth_out = depth.map(|d| shift_depth(d, shift, mode));

    let pose_out = PoseSE3::new(pose.rotation() * azimuth_rotation(applied_angle), *pose.translation());

    AugmentedFrame {
        image: image_out,
        depth: depth_out,
        pose: pose_out,
        applied_angle,
    }
}

fn shift_columns(grid: &Grid, shift: f64, mode: ShiftMode) -> Grid {
    let (w, h, ch) = (grid.width(), grid.height(), grid.channels());
    let mut out = Grid::new(w, h, ch);
    match mode {
        ShiftMode::Snap => {
            let s = shift as i64;
            for row in 0..h {
                for col in 0..w {
                    let src = (col as i64 + s).rem_euclid(w as i64) as usize;
                    out.pixel_mut(row, col).copy_from_slice(grid.pixel(row, src));
                }
            }
        }
        ShiftMode::Bilinear => {
            let mut buf = vec![0.0f32; ch];
            for row in 0..h {
                for col in 0..w {
                    crate::raster::erp_bilinear_sample_into(
                        grid,
                        PixelCoord::new(col as f64 + shift, row as f64),
                        &mut buf,
                    );
                    out.pixel_mut(row, col).copy_from_slice(&buf);
                }
            }
        }
    }
    out
}

fn shift_depth(depth: &DepthMap, shift: f64, mode: ShiftMode) -> DepthMap {
    let spec = *depth.spec();
    let (w, h) = (spec.width(), spec.height());
    match mode {
        ShiftMode::Snap => {
            let s = shift as i64;
            let mut d = vec![0.0f32; spec.len()];
            let mut v = vec![false; spec.len()];
            for row in 0..h {
                for col in 0..w {
                    let src = (col as i64 + s).rem_euclid(w as i64) as usize;
                    d[spec.index(row, col)] = depth.at(row, src);
                    v[spec.index(row, col)] = depth.is_valid(row, src);
                }
            }
            DepthMap::new(spec, d, v).expect("shape preserved")
        }
        ShiftMode::Bilinear => {
            let mut d = vec![0.0f32; spec.len()];
            let mut v = vec![false; spec.len()];
            for row in 0..h {
                for col in 0..w {
                    let p = PixelCoord::new(col as f64 + shift, row as f64);
                    if let Some(val) = depth.sample(p) {
                        d[spec.index(row, col)] = val;
                        v[spec.index(row, col)] = true;
                    }
                }
            }
            DepthMap::new(spec, d, v).expect("shape preserved")
        }
    }
}
