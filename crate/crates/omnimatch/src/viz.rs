//! Visualization artifacts: certainty heat images, the matched warp of
//! frame B weighted by certainty, and sparse match-line overlays. All
//! outputs are plain float images ready for the PNG writer.

use crate::frame::{ErpImage, MatchField};
use crate::raster::{erp_bilinear_sample_into, Grid};
use crate::sphere::{cart_to_sph, sph_to_pixel};

/// Upper bound on overlay lines; more is unreadable.
pub const MAX_OVERLAY_LINES: usize = 200;

/// Grayscale image of the certainty map.
pub fn certainty_image(field: &MatchField) -> ErpImage {
    let spec = *field.spec();
    let grid = Grid::from_fn(spec.width(), spec.height(), |row, col| {
        field.certainty_at(row, col).clamp(0.0, 1.0)
    });
    ErpImage::new(spec, grid).expect("grid built from spec")
}

/// Frame B resampled at each cell's matched direction and scaled by the
/// cell's certainty. Where matching worked, this reconstructs frame A
/// dimmed by confidence; where it failed, the image goes dark.
pub fn warp_times_certainty(field: &MatchField, image_b: &ErpImage) -> ErpImage {
    let spec = *field.spec();
    let b_spec = *image_b.spec();
    let ch = image_b.channels();
    let mut out = Grid::new(spec.width(), spec.height(), ch);
    let mut buf = vec![0.0f32; ch];
    for row in 0..spec.height() {
        for col in 0..spec.width() {
            let dir = field.direction(row, col);
            let Ok(sph) = cart_to_sph(dir) else {
                continue;
            };
            let p = sph_to_pixel(sph, &b_spec);
            erp_bilinear_sample_into(image_b.grid(), p, &mut buf);
            let c = field.certainty_at(row, col).clamp(0.0, 1.0);
            let px = out.pixel_mut(row, col);
            for (o, v) in px.iter_mut().zip(&buf) {
                *o = v * c;
            }
        }
    }
    ErpImage::new(spec, out).expect("grid built from spec")
}

/// Cell indices for overlay lines: cells ranked by certainty
/// (descending, ties to the lower index), then thinned to at most
/// `max_lines` evenly spaced ranks so the picks span the confidence
/// range instead of crowding the top.
pub fn overlay_line_cells(field: &MatchField, max_lines: usize) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..field.spec().len())
        .filter(|&i| field.certainty()[i] > 0.0)
        .collect();
    ranked.sort_by(|&a, &b| {
        field.certainty()[b]
            .partial_cmp(&field.certainty()[a])
            .expect("certainties are finite")
            .then(a.cmp(&b))
    });
    if ranked.len() <= max_lines {
        return ranked;
    }
    (0..max_lines)
        .map(|k| ranked[k * ranked.len() / max_lines])
        .collect()
}

/// Side-by-side A|B panel with match lines from A cells to their
/// matched B positions, at most [`MAX_OVERLAY_LINES`] of them sampled
/// by certainty rank. Line color cycles a small palette so neighboring
/// lines stay distinguishable.
pub fn match_overlay(
    image_a: &ErpImage,
    image_b: &ErpImage,
    field: &MatchField,
    max_lines: usize,
) -> Grid {
    let a = image_a.grid();
    let b = image_b.grid();
    assert_eq!(a.height(), b.height(), "overlay needs equal heights");
    let (w, h) = (a.width() + b.width(), a.height());
    let mut canvas = Grid::new(w, h, 3);
    for row in 0..h {
        for col in 0..a.width() {
            paint_rgb(&mut canvas, row, col, a, row, col);
        }
        for col in 0..b.width() {
            paint_rgb(&mut canvas, row, a.width() + col, b, row, col);
        }
    }

    const PALETTE: [[f32; 3]; 6] = [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.3, 0.5, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.4, 1.0],
        [0.2, 1.0, 1.0],
    ];
    let spec = *field.spec();
    let b_spec = *image_b.spec();
    let sx = image_a.spec().width() as f64 / spec.width() as f64;
    let sy = image_a.spec().height() as f64 / spec.height() as f64;
    for (k, idx) in overlay_line_cells(field, max_lines).into_iter().enumerate() {
        let (row, col) = (idx / spec.width(), idx % spec.width());
        let Ok(sph) = cart_to_sph(&field.directions()[idx]) else {
            continue;
        };
        let pb = sph_to_pixel(sph, &b_spec);
        let from = (
            ((col as f64 + 0.5) * sx) as i64,
            ((row as f64 + 0.5) * sy) as i64,
        );
        let to = (
            image_a.spec().width() as i64 + pb.col.round() as i64,
            pb.row.round() as i64,
        );
        draw_line(&mut canvas, from, to, &PALETTE[k % PALETTE.len()]);
    }
    canvas
}

fn paint_rgb(canvas: &mut Grid, row: usize, col: usize, src: &Grid, srow: usize, scol: usize) {
    let px = src.pixel(srow, scol);
    let out = canvas.pixel_mut(row, col);
    match px.len() {
        1 => out.fill(px[0]),
        _ => out.copy_from_slice(&px[..3]),
    }
}

/// Integer line rasterization, clipped to the canvas.
fn draw_line(canvas: &mut Grid, from: (i64, i64), to: (i64, i64), color: &[f32; 3]) {
    let (mut x, mut y) = from;
    let (x1, y1) = to;
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as usize) < canvas.width() && (y as usize) < canvas.height() {
            canvas
                .pixel_mut(y as usize, x as usize)
                .copy_from_slice(color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::pixel_rays;
    use crate::sphere::ErpGridSpec;

    fn uniform_image(w: usize, h: usize, v: f32) -> ErpImage {
        let spec = ErpGridSpec::new(w, h).unwrap();
        ErpImage::new(spec, Grid::from_vec(w, h, 1, vec![v; w * h])).unwrap()
    }

    #[test]
    fn identity_field_warp_reproduces_image_scaled_by_certainty() {
        let spec = ErpGridSpec::new(32, 16).unwrap();
        let field = MatchField::new(spec, pixel_rays(&spec), vec![0.5; spec.len()]).unwrap();
        let img = uniform_image(32, 16, 0.8);
        let warped = warp_times_certainty(&field, &img);
        for v in warped.grid().data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn line_budget_is_respected_and_ranked() {
        let spec = ErpGridSpec::new(32, 16).unwrap();
        let mut certainty = vec![0.0f32; spec.len()];
        for (i, c) in certainty.iter_mut().enumerate() {
            *c = (i % 100) as f32 / 100.0;
        }
        let field = MatchField::new(spec, pixel_rays(&spec), certainty).unwrap();
        let cells = overlay_line_cells(&field, 200);
        assert_eq!(cells.len(), 200);
        // First pick is the global argmax rank.
        let max_c = field
            .certainty()
            .iter()
            .cloned()
            .fold(f32::MIN, f32::max);
        assert_eq!(field.certainty()[cells[0]], max_c);

        let few = overlay_line_cells(&field, 10);
        assert_eq!(few.len(), 10);
    }

    #[test]
    fn overlay_canvas_is_side_by_side() {
        let spec = ErpGridSpec::new(32, 16).unwrap();
        let field = MatchField::new(spec, pixel_rays(&spec), vec![1.0; spec.len()]).unwrap();
        let a = uniform_image(32, 16, 0.2);
        let b = uniform_image(32, 16, 0.9);
        let canvas = match_overlay(&a, &b, &field, 0);
        assert_eq!(canvas.width(), 64);
        assert_eq!(canvas.height(), 16);
        assert!((canvas.pixel(8, 4)[0] - 0.2).abs() < 1e-6);
        assert!((canvas.pixel(8, 40)[0] - 0.9).abs() < 1e-6);
    }
}
