//! Spherical / Cartesian / ERP-pixel conversions and rotations.
//!
//! Conventions: `theta` is longitude in `[-pi, pi)`, `phi` is latitude in
//! `[-pi/2, pi/2]`, and the y axis is the gravity (up) axis, so
//! `S = (sin(theta)cos(phi), sin(phi), cos(theta)cos(phi))`. The ERP pixel
//! lattice uses pixel centers at integer coordinates with the image center
//! column at `theta = 0` and the top row nearest the north pole.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SphereError {
    #[error("cannot normalize a (near-)zero vector, |v| = {norm:e}")]
    ZeroVector { norm: f64 },
    #[error("invalid ERP grid {width}x{height}: width must equal 2*height and be >= 2")]
    InvalidGrid { width: usize, height: usize },
}

/// Longitude/latitude pair in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    /// Longitude in `[-pi, pi)`.
    pub theta: f64,
    /// Latitude in `[-pi/2, pi/2]`.
    pub phi: f64,
}

impl SphericalCoord {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }
}

/// Continuous position on the ERP pixel lattice; integer values are pixel
/// centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub col: f64,
    pub row: f64,
}

impl PixelCoord {
    pub fn new(col: f64, row: f64) -> Self {
        Self { col, row }
    }
}

/// Dimensions of an ERP grid. Width is always twice the height so a pixel
/// spans the same angle in longitude and latitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(usize, usize)", into = "(usize, usize)")]
pub struct ErpGridSpec {
    width: usize,
    height: usize,
}

impl ErpGridSpec {
    pub fn new(width: usize, height: usize) -> Result<Self, SphereError> {
        if width != 2 * height || width < 2 {
            return Err(SphereError::InvalidGrid { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Angle subtended by one pixel, identical in both axes.
    pub fn cell_angle(&self) -> f64 {
        TAU / self.width as f64
    }

    /// The grid of the pyramid level at `stride`, if the stride divides both
    /// dimensions.
    pub fn at_stride(&self, stride: usize) -> Result<Self, SphereError> {
        if stride == 0 || self.width % stride != 0 || self.height % stride != 0 {
            return Err(SphereError::InvalidGrid {
                width: self.width / stride.max(1),
                height: self.height / stride.max(1),
            });
        }
        Self::new(self.width / stride, self.height / stride)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }
}

impl TryFrom<(usize, usize)> for ErpGridSpec {
    type Error = SphereError;
    fn try_from((width, height): (usize, usize)) -> Result<Self, SphereError> {
        Self::new(width, height)
    }
}

impl From<ErpGridSpec> for (usize, usize) {
    fn from(g: ErpGridSpec) -> Self {
        (g.width, g.height)
    }
}

/// Wraps a longitude into `[-pi, pi)`.
pub fn wrap_theta(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(TAU) - PI;
    // rem_euclid can return exactly TAU for inputs just below a period edge.
    if t >= PI {
        t - TAU
    } else {
        t
    }
}

/// Spherical to Cartesian on the unit sphere.
pub fn sph_to_cart(u: SphericalCoord) -> Vector3<f64> {
    let (st, ct) = u.theta.sin_cos();
    let (sp, cp) = u.phi.sin_cos();
    Vector3::new(st * cp, sp, ct * cp)
}

/// Cartesian to spherical. Accepts non-unit input and normalizes internally;
/// at the poles the longitude is defined as 0.
pub fn cart_to_sph(s: &Vector3<f64>) -> Result<SphericalCoord, SphereError> {
    let norm = s.norm();
    if norm < 1e-12 {
        return Err(SphereError::ZeroVector { norm });
    }
    let theta = s.x.atan2(s.z);
    let phi = (s.y / norm).clamp(-1.0, 1.0).asin();
    Ok(SphericalCoord { theta, phi })
}

/// ERP pixel to spherical coordinates. Columns wrap; rows clamp at the poles.
pub fn pixel_to_sph(p: PixelCoord, g: &ErpGridSpec) -> SphericalCoord {
    let w = g.width as f64;
    let h = g.height as f64;
    let row = p.row.clamp(-0.5, h - 0.5);
    let theta = wrap_theta(TAU * (p.col + 0.5) / w - PI);
    let phi = FRAC_PI_2 - PI * (row + 0.5) / h;
    SphericalCoord { theta, phi }
}

/// Spherical coordinates to ERP pixel, with the column canonicalized into
/// `[0, width)`.
pub fn sph_to_pixel(u: SphericalCoord, g: &ErpGridSpec) -> PixelCoord {
    let w = g.width as f64;
    let h = g.height as f64;
    let col = ((u.theta + PI) * w / TAU - 0.5).rem_euclid(w);
    let col = if col >= w { col - w } else { col };
    let row = (FRAC_PI_2 - u.phi) * h / PI - 0.5;
    PixelCoord { col, row }
}

/// Proper rotation about the gravity (y) axis; maps longitude `theta` to
/// `theta + angle` while preserving latitude.
pub fn azimuth_rotation(angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), angle)
}

/// Normalizes a vector, rejecting near-zero input.
pub fn normalize(v: &Vector3<f64>) -> Result<Vector3<f64>, SphereError> {
    let norm = v.norm();
    if norm < 1e-12 {
        return Err(SphereError::ZeroVector { norm });
    }
    Ok(v / norm)
}

/// Angle in radians between two directions (inputs need not be unit length).
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos()
}
