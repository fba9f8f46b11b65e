//! Synthetic ground truth: analytic primitives raycast to ERP image and
//! depth at arbitrary poses.
//!
//! Everything is closed-form (sphere, axis-aligned box, plane) and textures
//! are pure functions of the world-space hit point, so two raycasts of the
//! same scene are bit-identical and warped ground truth can be checked
//! against an exact re-raycast.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{
    certainty_mask, overlap_ratio, warp_frame, DepthMap, ErpImage, MatchField,
    OverlapCriterion, PoseSE3, DEFAULT_CERTAINTY_ALPHA,
};
use crate::raster::Grid;
use crate::sphere::{pixel_to_sph, sph_to_cart, ErpGridSpec, PixelCoord};

/// Minimum clearance between the camera center and any primitive surface.
pub const CAMERA_CLEARANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("camera within {distance:e} m of primitive {index} (clearance {CAMERA_CLEARANCE:e})")]
    CameraInsideGeometry { index: usize, distance: f64 },
    #[error("scene has no primitives")]
    EmptyScene,
    #[error("primitive {index} invalid: {reason}")]
    InvalidPrimitive { index: usize, reason: String },
}

/// Procedural surface color as a function of the world hit point and, for
/// boxes, the face index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    /// 3D checkerboard with cells of `scale` meters.
    Checker {
        scale: f64,
        color_a: [f32; 3],
        color_b: [f32; 3],
    },
    /// Multi-octave trilinear value noise on a hashed integer lattice.
    ValueNoise {
        scale: f64,
        octaves: u32,
        seed: u64,
        color_a: [f32; 3],
        color_b: [f32; 3],
    },
    /// Sinusoidal stripes along one world axis; each box face gets its own
    /// phase so opposite walls are distinguishable.
    Stripes {
        scale: f64,
        axis: usize,
        color_a: [f32; 3],
        color_b: [f32; 3],
    },
}

impl Texture {
    fn shade(&self, p: &Vector3<f64>, face: usize) -> [f32; 3] {
        match self {
            Texture::Checker {
                scale,
                color_a,
                color_b,
            } => {
                let parity = (p.x / scale).floor() as i64
                    + (p.y / scale).floor() as i64
                    + (p.z / scale).floor() as i64;
                if parity.rem_euclid(2) == 0 {
                    *color_a
                } else {
                    *color_b
                }
            }
            Texture::ValueNoise {
                scale,
                octaves,
                seed,
                color_a,
                color_b,
            } => {
                let v = fractal_value_noise(&(p / *scale), *octaves, *seed) as f32;
                lerp_color(color_a, color_b, v)
            }
            Texture::Stripes {
                scale,
                axis,
                color_a,
                color_b,
            } => {
                let coord = p[*axis % 3];
                // Golden-angle phase offset per face.
                let phase = face as f64 * 2.399963229728653;
                let v = 0.5 * (1.0 + (std::f64::consts::TAU * coord / scale + phase).sin());
                lerp_color(color_a, color_b, v as f32)
            }
        }
    }
}

fn lerp_color(a: &[f32; 3], b: &[f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn lattice_value(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let h = splitmix64(
        seed ^ splitmix64(x as u64 ^ splitmix64(y as u64 ^ splitmix64(z as u64))),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let (x0, y0, z0) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (fx, fy, fz) = (fade(p.x - x0), fade(p.y - y0), fade(p.z - z0));
    let (xi, yi, zi) = (x0 as i64, y0 as i64, z0 as i64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                acc += wx * wy * wz * lattice_value(xi + dx, yi + dy, zi + dz, seed);
            }
        }
    }
    acc
}

fn fractal_value_noise(p: &Vector3<f64>, octaves: u32, seed: u64) -> f64 {
    let octaves = octaves.max(1);
    let mut acc = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0;
    let mut total = 0.0;
    for octave in 0..octaves {
        acc += amp * value_noise(&(p * freq), seed.wrapping_add(octave as u64));
        total += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    acc / total
}

/// An analytic scene element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        texture: Texture,
    },
    /// Axis-aligned box; a camera inside it sees the interior walls, which
    /// is how room scenes are built.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        texture: Texture,
    },
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        texture: Texture,
    },
}

/// A ray-primitive intersection: parameter along the ray and face index
/// (boxes only; 0 elsewhere).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub face: usize,
}

const RAY_EPS: f64 = 1e-9;

impl Primitive {
    fn validate(&self, index: usize) -> Result<(), SynthError> {
        let fail = |reason: &str| SynthError::InvalidPrimitive {
            index,
            reason: reason.to_string(),
        };
        match self {
            Primitive::Sphere { radius, .. } if *radius <= 0.0 => {
                Err(fail("radius must be positive"))
            }
            Primitive::Box { min, max, .. }
                if min.iter().zip(max).any(|(lo, hi)| lo >= hi) =>
            {
                Err(fail("min must be strictly below max on every axis"))
            }
            Primitive::Plane { normal, .. }
                if Vector3::from(*normal).norm() < 1e-12 =>
            {
                Err(fail("normal must be nonzero"))
            }
            _ => Ok(()),
        }
    }

    /// Signed distance from `p` to the primitive's surface (negative inside
    /// a sphere or box). Used for the camera clearance check.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                (p - Vector3::from(*center)).norm() - radius
            }
            Primitive::Box { min, max, .. } => {
                let (min, max) = (Vector3::from(*min), Vector3::from(*max));
                let mut outside = 0.0f64;
                let mut inside = f64::NEG_INFINITY;
                for i in 0..3 {
                    let d_lo = min[i] - p[i];
                    let d_hi = p[i] - max[i];
                    let d = d_lo.max(d_hi);
                    if d > 0.0 {
                        outside += d * d;
                    }
                    inside = inside.max(d);
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside // negative: distance to the nearest wall
                }
            }
            Primitive::Plane { point, normal, .. } => {
                let n = Vector3::from(*normal).normalize();
                (p - Vector3::from(*point)).dot(&n)
            }
        }
    }

    /// Nearest intersection with `origin + t * dir`, `t > 0`. `dir` must be
    /// unit length so `t` doubles as radial depth.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = origin - Vector3::from(*center);
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > RAY_EPS {
                    -b - sq
                } else if -b + sq > RAY_EPS {
                    -b + sq // camera inside the sphere
                } else {
                    return None;
                };
                Some(Hit { t, face: 0 })
            }
            Primitive::Box { min, max, .. } => {
                let (min, max) = (Vector3::from(*min), Vector3::from(*max));
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_face = 0usize;
                let mut far_face = 0usize;
                for i in 0..3 {
                    if dir[i].abs() < 1e-15 {
                        if origin[i] < min[i] || origin[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[i];
                    let (mut t0, mut t1) = ((min[i] - origin[i]) * inv, (max[i] - origin[i]) * inv);
                    // Face index: 2*axis for the min wall, 2*axis+1 for max.
                    let (mut f0, mut f1) = (2 * i, 2 * i + 1);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                        std::mem::swap(&mut f0, &mut f1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        near_face = f0;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        far_face = f1;
                    }
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near > RAY_EPS {
                    Some(Hit {
                        t: t_near,
                        face: near_face,
                    })
                } else if t_far > RAY_EPS {
                    // Camera inside: the exit wall is the visible surface.
                    Some(Hit {
                        t: t_far,
                        face: far_face,
                    })
                } else {
                    None
                }
            }
            Primitive::Plane { point, normal, .. } => {
                let n = Vector3::from(*normal).normalize();
                let denom = dir.dot(&n);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (Vector3::from(*point) - origin).dot(&n) / denom;
                (t > RAY_EPS).then_some(Hit { t, face: 0 })
            }
        }
    }

    fn texture(&self) -> &Texture {
        match self {
            Primitive::Sphere { texture, .. }
            | Primitive::Box { texture, .. }
            | Primitive::Plane { texture, .. } => texture,
        }
    }
}

/// A complete scene description; serializable as a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background: [f32; 3],
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.primitives.is_empty() {
            return Err(SynthError::EmptyScene);
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate(i)?;
        }
        Ok(())
    }

    /// A cubic room of half-extent `half` meters centered on the origin,
    /// with value-noise walls and two textured spheres standing in the
    /// interior. The noise base wavelength matches the room size and six
    /// octaves carry it down to a few pixels, so every pyramid level sees
    /// texture: coarse cells average to distinct values and fine patches
    /// still have local contrast.
    pub fn textured_room(half: f64, seed: u64) -> SceneSpec {
        SceneSpec {
            primitives: vec![
                Primitive::Box {
                    min: [-half, -half, -half],
                    max: [half, half, half],
                    texture: Texture::ValueNoise {
                        scale: half * 2.0,
                        octaves: 6,
                        seed: seed.wrapping_add(1),
                        color_a: [0.05, 0.08, 0.12],
                        color_b: [0.95, 0.9, 0.8],
                    },
                },
                Primitive::Sphere {
                    center: [half * 0.45, -half * 0.15, half * 0.4],
                    radius: half * 0.22,
                    texture: Texture::Checker {
                        scale: half * 0.1,
                        color_a: [0.9, 0.2, 0.15],
                        color_b: [0.1, 0.7, 0.9],
                    },
                },
                Primitive::Sphere {
                    center: [-half * 0.5, half * 0.2, -half * 0.35],
                    radius: half * 0.18,
                    texture: Texture::Stripes {
                        scale: half * 0.08,
                        axis: 1,
                        color_a: [0.95, 0.85, 0.2],
                        color_b: [0.2, 0.25, 0.3],
                    },
                },
            ],
            background: [0.0, 0.0, 0.0],
            seed,
        }
    }

    /// A texture-poor variant: one near-uniform room, for degradation tests.
    pub fn flat_room(half: f64, seed: u64) -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive::Box {
                min: [-half, -half, -half],
                max: [half, half, half],
                texture: Texture::ValueNoise {
                    scale: half * 4.0,
                    octaves: 1,
                    seed,
                    color_a: [0.5, 0.5, 0.5],
                    color_b: [0.52, 0.52, 0.52],
                },
            }],
            background: [0.0, 0.0, 0.0],
            seed,
        }
    }
}

/// Raycasts the scene to an ERP image and radial depth map at `pose`.
/// Rays that miss all primitives produce background color and invalid depth.
pub fn raycast_erp(
    scene: &SceneSpec,
    pose: &PoseSE3,
    grid: &ErpGridSpec,
) -> Result<(ErpImage, DepthMap), SynthError> {
    scene.validate()?;
    let origin = *pose.translation();
    for (index, prim) in scene.primitives.iter().enumerate() {
        let distance = prim.surface_distance(&origin).abs();
        if distance < CAMERA_CLEARANCE {
            return Err(SynthError::CameraInsideGeometry { index, distance });
        }
    }

    let (w, h) = (grid.width(), grid.height());
    let mut image = Grid::new(w, h, 3);
    let mut depth = vec![0.0f32; grid.len()];
    let mut valid = vec![false; grid.len()];

    use rayon::prelude::*;
    let rows: Vec<(Vec<f32>, Vec<f32>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut img_row = vec![0.0f32; w * 3];
            let mut depth_row = vec![0.0f32; w];
            let mut valid_row = vec![false; w];
            for col in 0..w {
                let u = pixel_to_sph(PixelCoord::new(col as f64, row as f64), grid);
                let dir = pose.rotation() * sph_to_cart(u);
                let mut best: Option<(Hit, usize)> = None;
                for (pi, prim) in scene.primitives.iter().enumerate() {
                    if let Some(hit) = prim.intersect(&origin, &dir) {
                        if best.map_or(true, |(b, _)| hit.t < b.t) {
                            best = Some((hit, pi));
                        }
                    }
                }
                let color = match best {
                    Some((hit, pi)) => {
                        depth_row[col] = hit.t as f32;
                        valid_row[col] = true;
                        let point = origin + dir * hit.t;
                        scene.primitives[pi].texture().shade(&point, hit.face)
                    }
                    None => scene.background,
                };
                img_row[col * 3..col * 3 + 3].copy_from_slice(&color);
            }
            (img_row, depth_row, valid_row)
        })
        .collect();

    for (row, (img_row, depth_row, valid_row)) in rows.into_iter().enumerate() {
        image.data_mut()[row * w * 3..(row + 1) * w * 3].copy_from_slice(&img_row);
        depth[row * w..(row + 1) * w].copy_from_slice(&depth_row);
        valid[row * w..(row + 1) * w].copy_from_slice(&valid_row);
    }

    let image = ErpImage::new(*grid, image).expect("grid shape matches spec");
    let depth = DepthMap::new(*grid, depth, valid).expect("grid shape matches spec");
    Ok((image, depth))
}

/// A rendered frame pair with exact ground truth.
#[derive(Debug, Clone)]
pub struct FramePairGt {
    pub image_a: ErpImage,
    pub depth_a: DepthMap,
    pub pose_a: PoseSE3,
    pub image_b: ErpImage,
    pub depth_b: DepthMap,
    pub pose_b: PoseSE3,
    /// A->B directions with certainty = the co-visibility mask (0 or 1).
    pub gt_field: MatchField,
    /// Range of each warped point, on A's grid.
    pub warped_depth: DepthMap,
    pub overlap: f64,
}

/// Renders a pair: frame A at the origin, frame B displaced by `baseline`
/// meters in a seeded random direction and rotated by `rotation` radians
/// about a seeded random axis.
pub fn make_pair(
    scene: &SceneSpec,
    baseline: f64,
    rotation: f64,
    grid: &ErpGridSpec,
    seed: u64,
) -> Result<FramePairGt, SynthError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dir = random_unit(&mut rng);
    let axis = random_unit(&mut rng);
    let translation = dir * baseline;
    let rotation_b = if rotation.abs() < 1e-15 {
        nalgebra::Rotation3::identity()
    } else {
        nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            rotation,
        )
    };

    let pose_a = PoseSE3::identity();
    let pose_b = pose_a.compose(&PoseSE3::new(rotation_b, translation));

    let (image_a, depth_a) = raycast_erp(scene, &pose_a, grid)?;
    let (image_b, depth_b) = raycast_erp(scene, &pose_b, grid)?;

    let (mut gt_field, warped_depth) = warp_frame(&depth_a, &pose_a, &pose_b);
    let mask = certainty_mask(&gt_field, &warped_depth, &depth_b, DEFAULT_CERTAINTY_ALPHA)
        .expect("warp outputs share A's grid");
    for (c, &m) in gt_field.certainty_mut().iter_mut().zip(&mask) {
        *c = if m { 1.0 } else { 0.0 };
    }

    let overlap = overlap_ratio(
        &depth_a,
        &pose_a,
        &depth_b,
        &pose_b,
        OverlapCriterion::default(),
    );

    Ok(FramePairGt {
        image_a,
        depth_a,
        pose_a,
        image_b,
        depth_b,
        pose_b,
        gt_field,
        warped_depth,
        overlap,
    })
}

fn random_unit(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    // Rejection sampling: uniform over the sphere, deterministic per seed.
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}
