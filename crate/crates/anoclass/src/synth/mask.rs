//! Binary mask generation: border flood fill for foreground extraction,
//! thresholded Poisson noise fields, and filled convex polygons.

use std::collections::VecDeque;

use image::RgbImage;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};

/// 0/1 mask, (height, width).
pub type BitMask = Array2<u8>;

pub fn mask_coverage(mask: &BitMask) -> f64 {
    let ones = mask.iter().filter(|&&v| v == 1).count();
    ones as f64 / mask.len() as f64
}

pub fn mask_and(a: &BitMask, b: &BitMask) -> BitMask {
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| *x &= y);
    out
}

pub fn mask_is_empty(mask: &BitMask) -> bool {
    mask.iter().all(|&v| v == 0)
}

fn within_tolerance(a: &[u8; 3], b: &[u8; 3], tolerance: u8) -> bool {
    a.iter()
        .zip(b.iter())
        .all(|(&x, &y)| x.abs_diff(y) <= tolerance)
}

/// Background extraction by flood fill from every border pixel.
///
/// Each border seed grows a 4-connected region of pixels whose per-channel
/// difference from that seed's color stays within `tolerance`. The
/// complement is foreground, reduced to its largest connected component.
/// A fully uniform image yields an all-zero mask.
pub fn foreground_mask(img: &RgbImage, tolerance: u8) -> BitMask {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut background = Array2::<u8>::zeros((h, w));
    let mut queue = VecDeque::new();

    let seed = |x: usize, y: usize, background: &mut Array2<u8>, queue: &mut VecDeque<(usize, usize, [u8; 3])>| {
        if background[(y, x)] == 0 {
            let ref_color = img.get_pixel(x as u32, y as u32).0;
            background[(y, x)] = 1;
            queue.push_back((x, y, ref_color));
        }
    };

    for x in 0..w {
        seed(x, 0, &mut background, &mut queue);
        seed(x, h - 1, &mut background, &mut queue);
    }
    for y in 0..h {
        seed(0, y, &mut background, &mut queue);
        seed(w - 1, y, &mut background, &mut queue);
    }

    while let Some((x, y, ref_color)) = queue.pop_front() {
        let neighbors = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbors {
            if nx >= w || ny >= h || background[(ny, nx)] == 1 {
                continue;
            }
            let c = img.get_pixel(nx as u32, ny as u32).0;
            if within_tolerance(&c, &ref_color, tolerance) {
                background[(ny, nx)] = 1;
                queue.push_back((nx, ny, ref_color));
            }
        }
    }

    let mut foreground = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            foreground[(y, x)] = 1 - background[(y, x)];
        }
    }
    largest_component(&foreground)
}

/// Keeps only the largest 4-connected component of a mask. Ties go to the
/// component found first in scan order.
pub fn largest_component(mask: &BitMask) -> BitMask {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes: Vec<usize> = vec![0]; // label 0 = unlabeled
    let mut queue = VecDeque::new();

    for sy in 0..h {
        for sx in 0..w {
            if mask[(sy, sx)] == 0 || labels[(sy, sx)] != 0 {
                continue;
            }
            let label = sizes.len() as u32;
            sizes.push(0);
            labels[(sy, sx)] = label;
            queue.push_back((sx, sy));
            while let Some((x, y)) = queue.pop_front() {
                sizes[label as usize] += 1;
                let neighbors = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ];
                for (nx, ny) in neighbors {
                    if nx >= w || ny >= h {
                        continue;
                    }
                    if mask[(ny, nx)] == 1 && labels[(ny, nx)] == 0 {
                        labels[(ny, nx)] = label;
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
    }

    let best = match sizes.iter().enumerate().skip(1).max_by(|a, b| {
        a.1.cmp(b.1).then(b.0.cmp(&a.0)) // largest size, then lowest label
    }) {
        Some((label, &size)) if size > 0 => label as u32,
        _ => return Array2::zeros((h, w)),
    };

    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if labels[(y, x)] == best {
                out[(y, x)] = 1;
            }
        }
    }
    out
}

/// Mean filter over the intersection of a `k`x`k` window with the image.
pub fn box_filter(field: &Array2<f32>, k: usize) -> Array2<f32> {
    let (h, w) = field.dim();
    let r = k / 2;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let mut acc = 0f64;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    acc += field[(yy, xx)] as f64;
                }
            }
            out[(y, x)] = (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32;
        }
    }
    out
}

/// Seeded per-pixel Poisson field, box-smoothed with a 5x5 window.
pub fn poisson_field(shape: (usize, usize), seed: u64, lambda: f64) -> Result<Array2<f32>> {
    if !(lambda > 0.0) {
        return Err(Error::Argument(format!("lambda = {lambda} must be positive")));
    }
    let (h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist =
        Poisson::new(lambda).map_err(|e| Error::Argument(format!("poisson({lambda}): {e}")))?;
    let raw = Array2::from_shape_fn((h, w), |_| dist.sample(&mut rng) as f32);
    Ok(box_filter(&raw, 5))
}

/// Poisson noise mask: smoothed Poisson field thresholded at `threshold`
/// (values >= threshold become 1). Deterministic per seed.
pub fn poisson_noise_mask(
    shape: (usize, usize),
    seed: u64,
    lambda: f64,
    threshold: u32,
) -> Result<BitMask> {
    let field = poisson_field(shape, seed, lambda)?;
    Ok(field.mapv(|v| u8::from(v >= threshold as f32)))
}

/// Filled convex n-gon with vertices on a jittered circle of radius
/// `scale * min(H, W) / 2`. With `center = None` the center is drawn from
/// the central half of the image; callers that know the foreground pass a
/// foreground-biased center instead. Returns the mask and the vertices.
pub fn polygon_mask(
    shape: (usize, usize),
    n_sides: usize,
    seed: u64,
    scale: f64,
    jitter: f64,
    center: Option<(f64, f64)>,
) -> Result<(BitMask, Vec<(f64, f64)>)> {
    if !(3..=6).contains(&n_sides) {
        return Err(Error::Argument(format!(
            "n_sides = {n_sides} must be in 3..=6"
        )));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Argument(format!("scale = {scale} must be in (0, 1]")));
    }
    let (h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy) = center.unwrap_or_else(|| {
        (
            rng.random_range(0.25 * w as f64..0.75 * w as f64),
            rng.random_range(0.25 * h as f64..0.75 * h as f64),
        )
    });
    let radius = scale * (h.min(w) as f64) / 2.0;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut vertices = Vec::with_capacity(n_sides);
    for i in 0..n_sides {
        let ang_jit: f64 = rng.random_range(-0.5..0.5) * jitter;
        let rad_jit: f64 = rng.random_range(0.0..0.5) * jitter;
        let theta = phase + std::f64::consts::TAU * (i as f64 + ang_jit) / n_sides as f64;
        let r = radius * (1.0 - rad_jit);
        vertices.push((cx + r * theta.cos(), cy + r * theta.sin()));
    }

    let mut mask = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            if point_in_convex_polygon(px, py, &vertices) {
                mask[(y, x)] = 1;
            }
        }
    }
    Ok((mask, vertices))
}

/// Vertices are in increasing-angle (counter-clockwise) order by
/// construction, so the point is inside iff all cross products agree.
fn point_in_convex_polygon(px: f64, py: f64, vertices: &[(f64, f64)]) -> bool {
    let n = vertices.len();
    for i in 0..n {
        let (x1, y1) = vertices[i];
        let (x2, y2) = vertices[(i + 1) % n];
        let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
        if cross < 0.0 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn canvas(w: u32, h: u32, bg: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb(bg))
    }

    #[test]
    fn foreground_of_centered_square() {
        let mut img = canvas(64, 64, [128, 128, 128]);
        for y in 22..42 {
            for x in 22..42 {
                img.put_pixel(x, y, Rgb([200, 30, 30]));
            }
        }
        let mask = foreground_mask(&img, 12);
        for y in 0..64usize {
            for x in 0..64usize {
                let inside = (22..42).contains(&x) && (22..42).contains(&y);
                assert_eq!(mask[(y, x)], u8::from(inside), "pixel ({x}, {y})");
            }
        }
    }

    #[test]
    fn foreground_of_uniform_image_is_empty() {
        let img = canvas(64, 64, [90, 90, 90]);
        let mask = foreground_mask(&img, 12);
        assert!(mask_is_empty(&mask));
    }

    #[test]
    fn foreground_tolerance_irrelevant_on_noiseless_image() {
        let mut img = canvas(64, 64, [128, 128, 128]);
        for y in 10..30 {
            for x in 15..50 {
                img.put_pixel(x, y, Rgb([10, 200, 80]));
            }
        }
        let a = foreground_mask(&img, 0);
        let b = foreground_mask(&img, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn foreground_keeps_largest_component() {
        let mut img = canvas(64, 64, [0, 0, 0]);
        // large blob
        for y in 5..30 {
            for x in 5..30 {
                img.put_pixel(x, y, Rgb([255, 255, 255]));
            }
        }
        // small blob
        for y in 45..50 {
            for x in 45..50 {
                img.put_pixel(x, y, Rgb([255, 255, 255]));
            }
        }
        let mask = foreground_mask(&img, 4);
        assert_eq!(mask[(10, 10)], 1);
        assert_eq!(mask[(47, 47)], 0);
    }

    #[test]
    fn poisson_threshold_zero_is_all_ones() {
        let mask = poisson_noise_mask((16, 16), 3, 4.0, 0).unwrap();
        assert!(mask.iter().all(|&v| v == 1));
    }

    #[test]
    fn poisson_huge_threshold_is_empty() {
        let mask = poisson_noise_mask((32, 32), 1, 4.0, 50).unwrap();
        assert!(mask_is_empty(&mask));
    }

    #[test]
    fn poisson_is_deterministic() {
        let a = poisson_noise_mask((24, 24), 9, 4.0, 4).unwrap();
        let b = poisson_noise_mask((24, 24), 9, 4.0, 4).unwrap();
        assert_eq!(a, b);
        let c = poisson_noise_mask((24, 24), 10, 4.0, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn polygon_vertex_count_and_validation() {
        let (_, verts) = polygon_mask((64, 64), 3, 1, 0.5, 0.0, None).unwrap();
        assert_eq!(verts.len(), 3);
        assert!(polygon_mask((64, 64), 7, 1, 0.5, 0.0, None).is_err());
        assert!(polygon_mask((64, 64), 2, 1, 0.5, 0.0, None).is_err());
    }

    #[test]
    fn polygon_area_matches_shoelace() {
        // zero jitter: regular quadrilateral with circumradius 16 on a 64px
        // canvas. Rasterized area vs the shoelace formula of the vertices.
        for seed in [1u64, 5, 9] {
            let (mask, verts) = polygon_mask((64, 64), 4, seed, 0.5, 0.0, None).unwrap();
            let shoelace: f64 = {
                let n = verts.len();
                let mut acc = 0.0;
                for i in 0..n {
                    let (x1, y1) = verts[i];
                    let (x2, y2) = verts[(i + 1) % n];
                    acc += x1 * y2 - x2 * y1;
                }
                acc.abs() / 2.0
            };
            let pixels = mask.iter().filter(|&&v| v == 1).count() as f64;
            let rel = (pixels - shoelace).abs() / shoelace;
            assert!(rel < 0.10, "seed {seed}: {pixels} px vs shoelace {shoelace}");
        }
    }

    #[test]
    fn box_filter_constant_field() {
        let f = Array2::from_elem((10, 10), 3.5f32);
        let out = box_filter(&f, 5);
        for v in out.iter() {
            assert!((v - 3.5).abs() < 1e-6);
        }
    }
}
