//! Memory bank of normal patch features and nearest-neighbor residuals.
//!
//! The bank is a coreset of the pooled patch vectors from all normal images,
//! chosen by greedy farthest-point (k-center) subsampling. Residual maps are
//! the test features minus their nearest bank vector, which suppresses the
//! normal signal and leaves the anomalous regions.
//!
//! All distances are Euclidean, accumulated in f64 over the f32 vectors in
//! index order, so results are deterministic and independent of thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{rows_to_tensor, PatchFeatureMap};
use crate::error::{Error, Result};
use crate::io::{
    read_f32_vec, read_f64, read_magic, read_u32, read_u64, write_f32_slice, write_f64,
    write_u32, write_u64,
};

pub const BANK_MAGIC: &[u8; 4] = b"ANOB";
pub const BANK_VERSION: u32 = 1;

/// Coreset-subsampled normal patch vectors with build provenance.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    vectors: Array2<f32>,
    seed: u64,
    p: f64,
    source_count: usize,
    /// Cached squared norms of every row, for the matrix-product shortlist.
    row_sq: Vec<f64>,
}

fn row_squared_norms(vectors: &Array2<f32>) -> Vec<f64> {
    vectors
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum())
        .collect()
}

/// Squared Euclidean distance, f64 accumulation in index order.
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        acc += d * d;
    }
    acc
}

/// Greedy farthest-point selection of `target` row indices.
///
/// The first index is drawn uniformly from the seeded generator; each later
/// pick maximizes the minimum distance to the already-chosen set, ties broken
/// by lowest index.
pub fn coreset_subsample(vectors: &Array2<f32>, target: usize, seed: u64) -> Result<Vec<usize>> {
    let m = vectors.nrows();
    if target < 1 || target > m {
        return Err(Error::Argument(format!(
            "coreset target {target} out of range [1, {m}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..m);

    let rows: Vec<&[f32]> = (0..m)
        .map(|i| vectors.row(i).to_slice().expect("contiguous row"))
        .collect();

    let mut chosen = Vec::with_capacity(target);
    chosen.push(first);
    let mut min_sq: Vec<f64> = rows
        .par_iter()
        .map(|r| sq_dist(r, rows[first]))
        .collect();

    while chosen.len() < target {
        // Serial argmax keeps the lowest-index tie rule exact.
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_sq.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        let newest = rows[best];
        min_sq
            .par_iter_mut()
            .zip(rows.par_iter())
            .for_each(|(d, r)| {
                let nd = sq_dist(r, newest);
                if nd < *d {
                    *d = nd;
                }
            });
    }
    Ok(chosen)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

impl MemoryBank {
    /// Builds the bank from the patch vectors of all normal images.
    ///
    /// The bank size is `max(1, round(total_patches * p))` with round-half-up.
    pub fn build(normal_maps: &[PatchFeatureMap], p: f64, seed: u64) -> Result<Self> {
        if normal_maps.is_empty() {
            return Err(Error::Argument("no normal feature maps given".into()));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Argument(format!("p = {p} must be in (0, 1]")));
        }
        let dim = normal_maps[0].feature_dim();
        for m in normal_maps {
            if m.feature_dim() != dim {
                return Err(Error::Shape(format!(
                    "feature dim mismatch: {} vs {dim}",
                    m.feature_dim()
                )));
            }
        }
        let total: usize = normal_maps.iter().map(|m| m.patch_count()).sum();
        let mut source = Array2::zeros((total, dim));
        let mut row = 0;
        for m in normal_maps {
            for r in m.vectors.rows() {
                source.row_mut(row).assign(&r);
                row += 1;
            }
        }
        let n_d = round_half_up(total as f64 * p).max(1);
        let indices = coreset_subsample(&source, n_d, seed)?;
        let mut vectors = Array2::zeros((n_d, dim));
        for (out_row, &src_row) in indices.iter().enumerate() {
            vectors.row_mut(out_row).assign(&source.row(src_row));
        }
        let row_sq = row_squared_norms(&vectors);
        Ok(MemoryBank {
            vectors,
            seed,
            p,
            source_count: total,
            row_sq,
        })
    }

    /// Wraps raw vectors as a bank (tests, file loading).
    pub fn from_vectors(vectors: Array2<f32>, seed: u64, p: f64, source_count: usize) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::Argument("bank must contain at least one vector".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite bank vector".into()));
        }
        let row_sq = row_squared_norms(&vectors);
        Ok(MemoryBank {
            vectors,
            seed,
            p,
            source_count,
            row_sq,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.vectors
    }

    /// Index and Euclidean distance of the nearest bank vector, ties broken
    /// by lowest index.
    pub fn nearest(&self, q: &ArrayView1<f32>) -> Result<(usize, f64)> {
        if q.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query dim {} vs bank dim {}",
                q.len(),
                self.dim()
            )));
        }
        let q = q.to_slice().map(|s| s.to_vec()).unwrap_or_else(|| q.to_vec());
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, row) in self.vectors.rows().into_iter().enumerate() {
            let d = sq_dist(row.to_slice().expect("contiguous row"), &q);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok((best, best_d.sqrt()))
    }

    /// Nearest bank rows for a whole query matrix.
    ///
    /// A single f32 matrix product shortlists candidates per query via
    /// `d^2 = |q|^2 + |b|^2 - 2 q.b`; every candidate within a generous
    /// slack of the approximate minimum is then re-evaluated with the exact
    /// f64 distance, in ascending index order. The result is identical to
    /// the exhaustive scan, including the lowest-index tie rule.
    pub fn nearest_batch(&self, queries: &Array2<f32>) -> Result<Vec<(usize, f64)>> {
        if queries.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "query dim {} vs bank dim {}",
                queries.ncols(),
                self.dim()
            )));
        }
        let products = queries.dot(&self.vectors.t()); // (P, N_d) f32
        let max_row_sq = self.row_sq.iter().copied().fold(0.0f64, f64::max);
        (0..queries.nrows())
            .into_par_iter()
            .map(|i| {
                let q = queries.row(i);
                let q_slice = q.to_slice().expect("contiguous query row");
                let qq: f64 = q_slice.iter().map(|&v| (v as f64) * (v as f64)).sum();

                let mut approx_min = f64::INFINITY;
                for j in 0..self.len() {
                    let d = qq + self.row_sq[j] - 2.0 * products[(i, j)] as f64;
                    if d < approx_min {
                        approx_min = d;
                    }
                }
                let slack = 1e-2 * (qq + max_row_sq) + 1e-6;
                let mut best = usize::MAX;
                let mut best_d = f64::INFINITY;
                for j in 0..self.len() {
                    let d = qq + self.row_sq[j] - 2.0 * products[(i, j)] as f64;
                    if d <= approx_min + slack {
                        let exact = sq_dist(
                            q_slice,
                            self.vectors.row(j).to_slice().expect("contiguous row"),
                        );
                        if exact < best_d {
                            best_d = exact;
                            best = j;
                        }
                    }
                }
                Ok((best, best_d.sqrt()))
            })
            .collect()
    }

    /// Residuals of every feature row against its nearest bank vector.
    pub fn residual_map(&self, features: &PatchFeatureMap) -> Result<ResidualMap> {
        if features.feature_dim() != self.dim() {
            return Err(Error::Shape(format!(
                "feature dim {} vs bank dim {}",
                features.feature_dim(),
                self.dim()
            )));
        }
        let p = features.patch_count();
        let results: Vec<(usize, f64)> = self.nearest_batch(&features.vectors)?;

        let dim = self.dim();
        let mut residuals = Array2::zeros((p, dim));
        let mut indices = Vec::with_capacity(p);
        let mut distances = Vec::with_capacity(p);
        for (i, (idx, dist)) in results.into_iter().enumerate() {
            for j in 0..dim {
                residuals[(i, j)] = features.vectors[(i, j)] - self.vectors[(idx, j)];
            }
            indices.push(idx as u32);
            distances.push(dist as f32);
        }
        Ok(ResidualMap {
            residuals,
            nearest_indices: indices,
            nearest_distances: distances,
            grid: features.grid,
        })
    }

    /// Writes the bank file (`ANOB`) plus a JSON sidecar naming the sources.
    pub fn write(&self, path: &Path, sidecar: &BankSidecar) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(BANK_MAGIC).map_err(io_err)?;
        write_u32(&mut w, BANK_VERSION).map_err(io_err)?;
        write_u32(&mut w, self.len() as u32).map_err(io_err)?;
        write_u32(&mut w, self.dim() as u32).map_err(io_err)?;
        write_u64(&mut w, self.seed).map_err(io_err)?;
        write_f64(&mut w, self.p).map_err(io_err)?;
        write_f32_slice(&mut w, self.vectors.as_slice().expect("contiguous bank"))
            .map_err(io_err)?;
        w.flush().map_err(io_err)?;

        let sidecar_path = path.with_extension("json");
        let json = serde_json::to_string_pretty(sidecar)
            .map_err(|e| Error::format(&sidecar_path, e.to_string()))?;
        std::fs::write(&sidecar_path, json).map_err(|e| Error::io(&sidecar_path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| Error::io(path, e);
        if !read_magic(&mut r, BANK_MAGIC).map_err(io_err)? {
            return Err(Error::format(path, "bad magic, expected ANOB"));
        }
        let version = read_u32(&mut r).map_err(io_err)?;
        if version != BANK_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n_d = read_u32(&mut r).map_err(io_err)? as usize;
        let dim = read_u32(&mut r).map_err(io_err)? as usize;
        let seed = read_u64(&mut r).map_err(io_err)?;
        let p = read_f64(&mut r).map_err(io_err)?;
        let data = read_f32_vec(&mut r, n_d * dim).map_err(io_err)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io_err)? != 0 {
            return Err(Error::format(path, "trailing bytes after bank data"));
        }
        let vectors =
            Array2::from_shape_vec((n_d, dim), data).map_err(|e| Error::Shape(e.to_string()))?;

        // Recover the pre-subsampling patch count from the sidecar when
        // available; fall back to the bank size itself.
        let source_count = BankSidecar::read(path)
            .map(|s| s.source_count)
            .unwrap_or(n_d);
        MemoryBank::from_vectors(vectors, seed, p, source_count)
    }
}

/// Sidecar metadata written next to every bank file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankSidecar {
    pub source_feature_files: Vec<String>,
    pub source_count: usize,
    pub p: f64,
    pub seed: u64,
}

impl BankSidecar {
    pub fn read(bank_path: &Path) -> Result<Self> {
        let sidecar_path = bank_path.with_extension("json");
        let text =
            std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&sidecar_path, e.to_string()))
    }
}

/// Per-patch residuals against the bank, with the matched indices and
/// distances.
#[derive(Debug, Clone)]
pub struct ResidualMap {
    pub residuals: Array2<f32>,
    pub nearest_indices: Vec<u32>,
    pub nearest_distances: Vec<f32>,
    pub grid: (usize, usize),
}

impl ResidualMap {
    /// Reshapes the residual rows into a (c3, h, w) tensor for conv heads.
    pub fn to_feature_tensor(&self) -> Array3<f32> {
        rows_to_tensor(&self.residuals, self.grid)
    }

    pub fn max_distance(&self) -> f32 {
        self.nearest_distances
            .iter()
            .copied()
            .fold(0.0f32, f32::max)
    }
}
