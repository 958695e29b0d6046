//! Exact t-SNE for embedding visualization. Point counts here are a few
//! hundred at most, so the quadratic formulation is plenty and keeps the
//! output deterministic per seed.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const MIN_POINTS: usize = 5;

/// 2-D coordinates for each input point, deterministic per seed.
///
/// Perplexity is clamped below `points / 3`. Fewer than 5 points is an
/// error.
pub fn tsne(
    points: &[Vec<f32>],
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let n = points.len();
    if n < MIN_POINTS {
        return Err(Error::Argument(format!(
            "t-SNE needs at least {MIN_POINTS} points, got {n}"
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("inconsistent point dimensions".into()));
    }
    let perplexity = perplexity.min((n as f64 - 1.0) / 3.0).max(2.0);

    // pairwise squared distances
    let mut d2 = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..dim {
                let d = points[i][k] as f64 - points[j][k] as f64;
                acc += d * d;
            }
            d2[(i, j)] = acc;
            d2[(j, i)] = acc;
        }
    }

    // per-point precision by binary search on entropy
    let target_entropy = perplexity.ln();
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-d2[(i, j)] * beta).exp();
                sum += w;
                weighted += w * d2[(i, j)];
            }
            let entropy = if sum > 0.0 {
                beta * weighted / sum + sum.ln()
            } else {
                0.0
            };
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_infinite() {
                    beta * 2.0
                } else {
                    (beta + beta_max) / 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_infinite() {
                    beta / 2.0
                } else {
                    (beta + beta_min) / 2.0
                };
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                p[(i, j)] = (-d2[(i, j)] * beta).exp();
                sum += p[(i, j)];
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                p[(i, j)] /= sum;
            }
        }
    }

    // symmetrize
    let mut joint = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            joint[(i, j)] = ((p[(i, j)] + p[(j, i)]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    // seeded tiny init
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1e-4).unwrap();
    let mut y: Vec<(f64, f64)> = (0..n)
        .map(|_| (dist.sample(&mut rng), dist.sample(&mut rng)))
        .collect();
    let mut velocity = vec![(0.0f64, 0.0f64); n];
    let mut gains = vec![(1.0f64, 1.0f64); n];
    let learning_rate = (n as f64 / (EXAGGERATION * 4.0)).max(50.0);

    for iter in 0..iterations {
        let exaggeration = if iter < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if iter < EXAGGERATION_ITERS { 0.5 } else { 0.8 };

        // student-t affinities in the embedding
        let mut num = Array2::<f64>::zeros((n, n));
        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i].0 - y[j].0;
                let dy = y[i].1 - y[j].1;
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                num[(i, j)] = w;
                num[(j, i)] = w;
                z += 2.0 * w;
            }
        }
        let z = z.max(1e-12);

        let update_gain = |gain: f64, grad: f64, vel: f64| -> f64 {
            let g = if grad.signum() == vel.signum() {
                gain * 0.8
            } else {
                gain + 0.2
            };
            g.max(0.01)
        };

        for i in 0..n {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[(i, j)] / z).max(1e-12);
                let mult = (exaggeration * joint[(i, j)] - q) * num[(i, j)];
                gx += 4.0 * mult * (y[i].0 - y[j].0);
                gy += 4.0 * mult * (y[i].1 - y[j].1);
            }
            gains[i].0 = update_gain(gains[i].0, gx, velocity[i].0);
            gains[i].1 = update_gain(gains[i].1, gy, velocity[i].1);
            velocity[i].0 = momentum * velocity[i].0 - learning_rate * gains[i].0 * gx;
            velocity[i].1 = momentum * velocity[i].1 - learning_rate * gains[i].1 * gy;
        }
        for i in 0..n {
            y[i].0 += velocity[i].0;
            y[i].1 += velocity[i].1;
        }
        // re-center
        let (mx, my) = y
            .iter()
            .fold((0.0, 0.0), |(ax, ay), &(px, py)| (ax + px, ay + py));
        let (mx, my) = (mx / n as f64, my / n as f64);
        for v in &mut y {
            v.0 -= mx;
            v.1 -= my;
        }
    }
    Ok(y)
}

const PALETTE: [[u8; 3]; 10] = [
    [230, 60, 60],
    [60, 120, 230],
    [50, 170, 90],
    [240, 160, 30],
    [150, 80, 200],
    [40, 190, 190],
    [230, 120, 180],
    [120, 120, 40],
    [90, 90, 90],
    [20, 40, 140],
];

/// Runs t-SNE on labeled vectors and writes a CSV of (x, y, label) plus a
/// scatter image.
pub fn tsne_emit(
    embeddings: &[(Vec<f32>, usize)],
    csv_path: &Path,
    image_path: &Path,
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let points: Vec<Vec<f32>> = embeddings.iter().map(|(v, _)| v.clone()).collect();
    let coords = tsne(&points, perplexity, iterations, seed)?;

    let mut csv = String::from("x,y,label\n");
    for ((x, y), (_, label)) in coords.iter().zip(embeddings.iter()) {
        csv.push_str(&format!("{x},{y},{label}\n"));
    }
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;

    write_scatter(&coords, embeddings, image_path)?;
    Ok(coords)
}

fn write_scatter(
    coords: &[(f64, f64)],
    embeddings: &[(Vec<f32>, usize)],
    path: &Path,
) -> Result<()> {
    const SIZE: u32 = 800;
    const MARGIN: f64 = 40.0;
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in coords {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);
    let scale = (SIZE as f64 - 2.0 * MARGIN) / span_x.max(span_y);

    let mut img = image::RgbImage::from_pixel(SIZE, SIZE, image::Rgb([255, 255, 255]));
    for (&(x, y), &(_, label)) in coords.iter().zip(embeddings.iter()) {
        let px = MARGIN + (x - min_x) * scale;
        let py = MARGIN + (y - min_y) * scale;
        let color = image::Rgb(PALETTE[label % PALETTE.len()]);
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                let (ix, iy) = (px as i32 + dx, py as i32 + dy);
                if ix >= 0 && iy >= 0 && (ix as u32) < SIZE && (iy as u32) < SIZE {
                    img.put_pixel(ix as u32, iy as u32, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::load(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn clustered_points(n_per: usize, seed: u64) -> Vec<(Vec<f32>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for cls in 0..2usize {
            for _ in 0..n_per {
                let base = cls as f32 * 10.0;
                out.push((
                    (0..8)
                        .map(|_| base + rng.random_range(-0.5f32..0.5))
                        .collect(),
                    cls,
                ));
            }
        }
        out
    }

    #[test]
    fn cardinality_is_preserved() {
        let pts = clustered_points(6, 1);
        let vecs: Vec<Vec<f32>> = pts.iter().map(|(v, _)| v.clone()).collect();
        let coords = tsne(&vecs, 5.0, 200, 3).unwrap();
        assert_eq!(coords.len(), 12);
    }

    #[test]
    fn rejects_too_few_points() {
        let vecs = vec![vec![0.0f32; 3]; 4];
        assert!(matches!(tsne(&vecs, 5.0, 50, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let pts = clustered_points(5, 2);
        let vecs: Vec<Vec<f32>> = pts.iter().map(|(v, _)| v.clone()).collect();
        let a = tsne(&vecs, 4.0, 150, 9).unwrap();
        let b = tsne(&vecs, 4.0, 150, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicates_land_near_coincident() {
        let mut pts = clustered_points(8, 7);
        // exact duplicate of point 0; defaults with perplexity auto-clamped
        let dup = pts[0].clone();
        pts.push(dup);
        let vecs: Vec<Vec<f32>> = pts.iter().map(|(v, _)| v.clone()).collect();
        let coords = tsne(&vecs, 30.0, 1000, 5).unwrap();
        let first = coords[0];
        let last = coords[coords.len() - 1];
        let dist = ((first.0 - last.0).powi(2) + (first.1 - last.1).powi(2)).sqrt();
        let spread = coords
            .iter()
            .flat_map(|&(x, y)| [x.abs(), y.abs()])
            .fold(0.0f64, f64::max)
            * 2.0;
        assert!(
            dist < spread / 100.0,
            "duplicates ended {dist} apart with spread {spread}"
        );
    }

    #[test]
    fn separated_clusters_separate_in_2d() {
        let pts = clustered_points(8, 11);
        let vecs: Vec<Vec<f32>> = pts.iter().map(|(v, _)| v.clone()).collect();
        let coords = tsne(&vecs, 5.0, 400, 2).unwrap();
        // max intra-cluster distance < min inter-cluster distance
        let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let mut max_intra = 0.0f64;
        let mut min_inter = f64::INFINITY;
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                let d = dist(coords[i], coords[j]);
                if pts[i].1 == pts[j].1 {
                    max_intra = max_intra.max(d);
                } else {
                    min_inter = min_inter.min(d);
                }
            }
        }
        assert!(
            max_intra < min_inter,
            "clusters overlap: intra {max_intra} vs inter {min_inter}"
        );
    }

    #[test]
    fn emit_writes_csv_and_image() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("coords.csv");
        let png = dir.path().join("scatter.png");
        let pts = clustered_points(5, 3);
        let coords = tsne_emit(&pts, &csv, &png, 4.0, 100, 1).unwrap();
        assert_eq!(coords.len(), 10);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("x,y,label\n"));
        assert_eq!(text.lines().count(), 11);
        assert!(png.exists());
        let img = image::open(&png).unwrap();
        assert_eq!(img.width(), 800);
    }
}

