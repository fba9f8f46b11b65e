//! File formats: PNG images, PFM depth maps with validity sidecars,
//! plain-text poses, pair lists, and ASCII PLY point clouds.
//!
//! Depth and pose round-trip losslessly: PFM stores raw f32, poses are
//! written with 17 significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::frame::{DepthMap, ErpImage, FrameError, MatchField, PoseSE3};
use crate::raster::Grid;
use crate::sphere::{cart_to_sph, sph_to_cart, ErpGridSpec, SphereError, SphericalCoord};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("{path}: dimension mismatch: width {width} != 2 x height {height}")]
    DimensionMismatch {
        path: PathBuf,
        width: usize,
        height: usize,
    },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn spec_for(path: &Path, width: usize, height: usize) -> Result<ErpGridSpec, IoError> {
    ErpGridSpec::new(width, height).map_err(|e| match e {
        SphereError::InvalidGrid { width, height } => IoError::DimensionMismatch {
            path: path.to_path_buf(),
            width,
            height,
        },
        SphereError::ZeroVector { .. } => malformed(path, "unexpected geometry error"),
    })
}

/// A frame as stored on disk: `<name>.png` plus optional `<name>.pfm`
/// (with `<name>.valid.png` sidecar) and `<name>.pose.txt`.
#[derive(Debug, Clone)]
pub struct Frame {
    pub name: String,
    pub image: ErpImage,
    pub depth: Option<DepthMap>,
    pub pose: Option<PoseSE3>,
}

/// Loads `<dir>/<name>.png` and, when present, the depth and pose files.
pub fn load_frame(dir: &Path, name: &str) -> Result<Frame, IoError> {
    let image = load_image(&dir.join(format!("{name}.png")))?;
    let depth_path = dir.join(format!("{name}.pfm"));
    let depth = if depth_path.exists() {
        Some(load_depth(&depth_path)?)
    } else {
        None
    };
    let pose_path = dir.join(format!("{name}.pose.txt"));
    let pose = if pose_path.exists() {
        Some(load_pose(&pose_path)?)
    } else {
        None
    };
    if let Some(d) = &depth {
        if d.spec() != image.spec() {
            return Err(IoError::DimensionMismatch {
                path: depth_path,
                width: d.spec().width(),
                height: d.spec().height(),
            });
        }
    }
    Ok(Frame {
        name: name.to_string(),
        image,
        depth,
        pose,
    })
}

/// Saves a frame's components next to each other under `<dir>/<name>.*`.
pub fn save_frame(dir: &Path, frame: &Frame) -> Result<(), IoError> {
    save_image(&dir.join(format!("{}.png", frame.name)), &frame.image)?;
    if let Some(depth) = &frame.depth {
        save_depth(&dir.join(format!("{}.pfm", frame.name)), depth)?;
    }
    if let Some(pose) = &frame.pose {
        save_pose(&dir.join(format!("{}.pose.txt", frame.name)), pose)?;
    }
    Ok(())
}

/// Loads an 8- or 16-bit gray/RGB PNG into `[0, 1]` floats. Alpha channels
/// are dropped.
pub fn load_image(path: &Path) -> Result<ErpImage, IoError> {
    let dynamic = image::open(path).map_err(|e| malformed(path, e.to_string()))?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let spec = spec_for(path, w, h)?;

    use image::DynamicImage::*;
    let grid = match dynamic {
        ImageLuma8(img) => {
            let data = img.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Grid::from_vec(w, h, 1, data)
        }
        ImageLuma16(img) => {
            let data = img.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
            Grid::from_vec(w, h, 1, data)
        }
        other => {
            // Everything else funnels through rgb16 (lossless for 8-bit).
            let rgb = other.into_rgb16();
            let data = rgb.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
            Grid::from_vec(w, h, 3, data)
        }
    };
    ErpImage::new(spec, grid).map_err(IoError::Frame)
}

/// Writes a 16-bit PNG (gray or RGB to match the image's channel count).
pub fn save_image(path: &Path, img: &ErpImage) -> Result<(), IoError> {
    save_grid_png(path, img.grid())
}

/// Saves any raster grid (1 or 3 channels, values clamped to `[0, 1]`)
/// as a 16-bit PNG. Unlike [`save_image`] this accepts grids whose
/// aspect ratio is not equirectangular, such as side-by-side overlays.
pub fn save_grid_png(path: &Path, grid: &Grid) -> Result<(), IoError> {
    let (w, h) = (grid.width() as u32, grid.height() as u32);
    let quantize = |v: f32| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let raw: Vec<u16> = grid.data().iter().map(|&v| quantize(v)).collect();
    let result = match grid.channels() {
        1 => image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, raw)
            .expect("raw buffer sized from grid")
            .save(path),
        3 => image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, raw)
            .expect("raw buffer sized from grid")
            .save(path),
        n => return Err(IoError::Frame(FrameError::BadChannelCount(n))),
    };
    result.map_err(|e| malformed(path, e.to_string()))
}

fn validity_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("valid.png")
}

/// Loads a PFM depth map. Validity comes from the `<name>.valid.png`
/// sidecar when present, otherwise from the finite-and-positive rule.
/// Parses a scalar (`Pf`) PFM into top-to-bottom row-major floats.
fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>), IoError> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);

    let mut token = |what: &str| -> Result<String, IoError> {
        let mut s = String::new();
        let mut byte = [0u8; 1];
        // Skip leading whitespace, then read until the next whitespace byte.
        loop {
            file.read_exact(&mut byte)
                .map_err(|_| malformed(path, format!("truncated header before {what}")))?;
            if !byte[0].is_ascii_whitespace() {
                break;
            }
        }
        loop {
            s.push(byte[0] as char);
            match file.read_exact(&mut byte) {
                Ok(()) if byte[0].is_ascii_whitespace() => break,
                Ok(()) => {}
                Err(_) => return Err(malformed(path, format!("truncated header at {what}"))),
            }
        }
        Ok(s)
    };

    let magic = token("magic")?;
    if magic != "Pf" {
        return Err(malformed(path, format!("expected Pf magic, got {magic:?}")));
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|_| malformed(path, "unparsable width"))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|_| malformed(path, "unparsable height"))?;
    let scale: f64 = token("scale")?
        .parse()
        .map_err(|_| malformed(path, "unparsable scale"))?;
    if scale == 0.0 {
        return Err(malformed(path, "scale must be nonzero"));
    }

    let mut raw = vec![0u8; width * height * 4];
    file.read_exact(&mut raw)
        .map_err(|_| malformed(path, "truncated pixel data"))?;

    // PFM rows run bottom-to-top; a negative scale marks little-endian.
    let little_endian = scale < 0.0;
    let mut values = vec![0.0f32; width * height];
    for file_row in 0..height {
        let grid_row = height - 1 - file_row;
        for col in 0..width {
            let o = (file_row * width + col) * 4;
            let bytes = [raw[o], raw[o + 1], raw[o + 2], raw[o + 3]];
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            values[grid_row * width + col] = v;
        }
    }
    Ok((width, height, values))
}

/// Writes a little-endian scalar PFM from top-to-bottom row-major floats.
fn write_pfm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<(), IoError> {
    assert_eq!(values.len(), width * height, "value count matches shape");
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write!(file, "Pf\n{width} {height}\n-1.0\n").map_err(io_err(path))?;
    for file_row in 0..height {
        let grid_row = height - 1 - file_row;
        for col in 0..width {
            let v = values[grid_row * width + col];
            file.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    file.flush().map_err(io_err(path))
}

pub fn load_depth(path: &Path) -> Result<DepthMap, IoError> {
    let (width, height, depth) = read_pfm(path)?;
    let spec = spec_for(path, width, height)?;

    let sidecar = validity_sidecar_path(path);
    let valid = if sidecar.exists() {
        let img = image::open(&sidecar)
            .map_err(|e| malformed(&sidecar, e.to_string()))?
            .into_luma8();
        if img.width() as usize != width || img.height() as usize != height {
            return Err(IoError::DimensionMismatch {
                path: sidecar,
                width: img.width() as usize,
                height: img.height() as usize,
            });
        }
        img.into_raw().iter().map(|&v| v > 127).collect()
    } else {
        depth.iter().map(|&d| d.is_finite() && d > 0.0).collect()
    };

    DepthMap::new(spec, depth, valid).map_err(IoError::Frame)
}

/// Writes a little-endian PFM plus the validity sidecar PNG.
pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    let (w, h) = (depth.spec().width(), depth.spec().height());
    write_pfm(path, w, h, depth.depth().data())?;

    let sidecar = validity_sidecar_path(path);
    let raw: Vec<u8> = depth.valid().iter().map(|&v| if v { 255 } else { 0 }).collect();
    let buf = image::ImageBuffer::<image::Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
        .expect("raw buffer sized from mask");
    buf.save(&sidecar)
        .map_err(|e| malformed(&sidecar, e.to_string()))?;
    Ok(())
}

/// Writes a match field as three PFMs under `<dir>/<name>.{theta,phi,
/// certainty}.pfm`. Directions are stored as spherical angles; poles
/// keep the azimuth-zero convention, so the round-trip is exact up to
/// f32 on every representable direction.
pub fn save_matchfield(dir: &Path, name: &str, field: &MatchField) -> Result<(), IoError> {
    let spec = *field.spec();
    let (w, h) = (spec.width(), spec.height());
    let mut theta = vec![0.0f32; spec.len()];
    let mut phi = vec![0.0f32; spec.len()];
    for (i, d) in field.directions().iter().enumerate() {
        let sph = cart_to_sph(d).map_err(|e| {
            malformed(&dir.join(format!("{name}.theta.pfm")), e.to_string())
        })?;
        theta[i] = sph.theta as f32;
        phi[i] = sph.phi as f32;
    }
    write_pfm(&dir.join(format!("{name}.theta.pfm")), w, h, &theta)?;
    write_pfm(&dir.join(format!("{name}.phi.pfm")), w, h, &phi)?;
    write_pfm(
        &dir.join(format!("{name}.certainty.pfm")),
        w,
        h,
        field.certainty(),
    )
}

/// Loads a match field saved by [`save_matchfield`].
pub fn load_matchfield(dir: &Path, name: &str) -> Result<MatchField, IoError> {
    let theta_path = dir.join(format!("{name}.theta.pfm"));
    let (w, h, theta) = read_pfm(&theta_path)?;
    let spec = spec_for(&theta_path, w, h)?;
    let phi_path = dir.join(format!("{name}.phi.pfm"));
    let (pw, ph, phi) = read_pfm(&phi_path)?;
    if (pw, ph) != (w, h) {
        return Err(IoError::DimensionMismatch {
            path: phi_path,
            width: pw,
            height: ph,
        });
    }
    let certainty_path = dir.join(format!("{name}.certainty.pfm"));
    let (cw, chh, certainty) = read_pfm(&certainty_path)?;
    if (cw, chh) != (w, h) {
        return Err(IoError::DimensionMismatch {
            path: certainty_path,
            width: cw,
            height: chh,
        });
    }
    let directions = theta
        .iter()
        .zip(&phi)
        .map(|(&t, &p)| sph_to_cart(SphericalCoord::new(t as f64, p as f64)))
        .collect();
    MatchField::new(spec, directions, certainty).map_err(IoError::Frame)
}

/// Loads a camera-to-world pose: 12 whitespace-separated numbers, row-major
/// 3x4 `[R|t]`.
pub fn load_pose(path: &Path) -> Result<PoseSE3, IoError> {
    let mut text = String::new();
    File::open(path)
        .map_err(io_err(path))?
        .read_to_string(&mut text)
        .map_err(io_err(path))?;
    let nums: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| malformed(path, format!("unparsable number: {e}")))?;
    if nums.len() != 12 {
        return Err(malformed(
            path,
            format!("expected 12 numbers, got {}", nums.len()),
        ));
    }
    let r = Matrix3::new(
        nums[0], nums[1], nums[2], nums[4], nums[5], nums[6], nums[8], nums[9], nums[10],
    );
    let t = Vector3::new(nums[3], nums[7], nums[11]);
    PoseSE3::from_matrix(r, t).map_err(IoError::Frame)
}

/// Writes a pose with enough digits for an exact f64 round trip.
pub fn save_pose(path: &Path, pose: &PoseSE3) -> Result<(), IoError> {
    let r = pose.rotation().matrix();
    let t = pose.translation();
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for row in 0..3 {
        writeln!(
            file,
            "{:.16e} {:.16e} {:.16e} {:.16e}",
            r[(row, 0)],
            r[(row, 1)],
            r[(row, 2)],
            t[row]
        )
        .map_err(io_err(path))?;
    }
    file.flush().map_err(io_err(path))
}

/// One row of a pair list.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub frame_a: String,
    pub frame_b: String,
    pub overlap: f64,
}

/// Loads a `frameA,frameB,overlap` CSV.
pub fn load_pairs(path: &Path) -> Result<Vec<PairEntry>, IoError> {
    let file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| malformed(path, "empty file"))?
        .map_err(io_err(path))?;
    if header.trim() != "frameA,frameB,overlap" {
        return Err(malformed(path, format!("bad header {header:?}")));
    }
    let mut pairs = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(a), Some(b), Some(o), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(malformed(path, format!("row {}: expected 3 fields", idx + 2)));
        };
        let overlap: f64 = o
            .trim()
            .parse()
            .map_err(|_| malformed(path, format!("row {}: bad overlap {o:?}", idx + 2)))?;
        pairs.push(PairEntry {
            frame_a: a.trim().to_string(),
            frame_b: b.trim().to_string(),
            overlap,
        });
    }
    Ok(pairs)
}

pub fn save_pairs(path: &Path, pairs: &[PairEntry]) -> Result<(), IoError> {
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(file, "frameA,frameB,overlap").map_err(io_err(path))?;
    for p in pairs {
        writeln!(file, "{},{},{:.6}", p.frame_a, p.frame_b, p.overlap).map_err(io_err(path))?;
    }
    file.flush().map_err(io_err(path))
}

/// A colored 3D point for PLY export.
#[derive(Debug, Clone, Copy)]
pub struct PlyPoint {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
}

/// Writes an ASCII PLY point cloud (positions plus uchar RGB).
pub fn save_ply(path: &Path, points: &[PlyPoint]) -> Result<(), IoError> {
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(file, "ply").map_err(io_err(path))?;
    writeln!(file, "format ascii 1.0").map_err(io_err(path))?;
    writeln!(file, "element vertex {}", points.len()).map_err(io_err(path))?;
    for axis in ["x", "y", "z"] {
        writeln!(file, "property float {axis}").map_err(io_err(path))?;
    }
    for ch in ["red", "green", "blue"] {
        writeln!(file, "property uchar {ch}").map_err(io_err(path))?;
    }
    writeln!(file, "end_header").map_err(io_err(path))?;
    for p in points {
        writeln!(
            file,
            "{} {} {} {} {} {}",
            p.position.x as f32,
            p.position.y as f32,
            p.position.z as f32,
            p.color[0],
            p.color[1],
            p.color[2]
        )
        .map_err(io_err(path))?;
    }
    file.flush().map_err(io_err(path))
}
