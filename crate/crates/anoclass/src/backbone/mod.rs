//! Patch feature extraction from a pretrained convolutional backbone.
//!
//! Images are preprocessed to a fixed resolution, run through the backbone,
//! and the stride-8 and stride-16 activations are turned into one aggregated
//! feature vector per stride-8 grid cell: 3x3 neighborhoods around every
//! position are adaptively average-pooled to the stride-16 channel count,
//! the coarse grid is upsampled by nearest-neighbor index replication, and
//! the two vectors per cell are averaged.

pub mod preprocess;
pub mod resnet;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_f32_vec, read_magic, read_u32, write_f32_slice, write_u32};

pub use preprocess::{preprocess, ImageTensor, CHANNEL_MEAN, CHANNEL_STD, RESIZE_RATIO};
pub use resnet::{ResNet, ResNetSpec};

pub const FEATURE_MAGIC: &[u8; 4] = b"ANOF";
pub const FEATURE_VERSION: u32 = 1;

/// Activation tensor from one backbone stage.
#[derive(Debug, Clone)]
pub struct LayerFeatures {
    pub tensor: Array3<f32>,
    pub layer_index: u8,
}

impl LayerFeatures {
    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.tensor.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim().0
    }
}

/// Per-image grid of aggregated patch feature vectors: one row per stride-8
/// grid cell, in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    pub vectors: Array2<f32>,
    pub grid: (usize, usize),
    pub source_image_id: String,
}

impl PatchFeatureMap {
    pub fn new(vectors: Array2<f32>, grid: (usize, usize), source_image_id: String) -> Result<Self> {
        let (p, _) = vectors.dim();
        if p != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "{p} rows but grid {}x{}",
                grid.0, grid.1
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "non-finite feature value in {source_image_id}"
            )));
        }
        Ok(PatchFeatureMap {
            vectors,
            grid,
            source_image_id,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.vectors.dim().0
    }

    pub fn feature_dim(&self) -> usize {
        self.vectors.dim().1
    }

    /// Reshapes the rows into a (c3, h, w) tensor for convolutional heads.
    pub fn to_feature_tensor(&self) -> Array3<f32> {
        rows_to_tensor(&self.vectors, self.grid)
    }
}

/// Row-major (P, c) rows into a (c, h, w) tensor.
pub fn rows_to_tensor(rows: &Array2<f32>, grid: (usize, usize)) -> Array3<f32> {
    let (h, w) = grid;
    let (p, c) = rows.dim();
    assert_eq!(p, h * w, "row count does not match grid");
    let mut out = Array3::zeros((c, h, w));
    for idx in 0..p {
        let (r, col) = (idx / w, idx % w);
        for ch in 0..c {
            out[(ch, r, col)] = rows[(idx, ch)];
        }
    }
    out
}

/// Loaded backbone plus derived channel metadata. Immutable after load and
/// shareable across worker threads.
#[derive(Debug, Clone)]
pub struct BackboneHandle {
    net: ResNet,
    id: String,
}

impl BackboneHandle {
    pub fn id(&self) -> &str {
        &self.id
    }

    /// Channel count of the stride-8 stage, read from the loaded weights.
    pub fn c2(&self) -> usize {
        self.net.c2
    }

    /// Channel count of the stride-16 stage, read from the loaded weights.
    pub fn c3(&self) -> usize {
        self.net.c3
    }

    pub fn net(&self) -> &ResNet {
        &self.net
    }

    /// Builds a handle directly from an in-memory archive (demo backbones).
    pub fn from_archive(archive: &crate::io::TensorArchive) -> Result<Self> {
        let net = ResNet::from_archive(archive)?;
        let id = net.spec.id.clone();
        Ok(BackboneHandle { net, id })
    }
}

/// Loads backbone weights from an archive file.
pub fn load_backbone(path: &Path) -> Result<BackboneHandle> {
    let archive = crate::io::TensorArchive::read(path)?;
    BackboneHandle::from_archive(&archive)
}

/// Runs a preprocessed (3, s, s) input through the backbone and returns the
/// stride-8 and stride-16 activations.
pub fn extract_layer_features(
    handle: &BackboneHandle,
    input: &Array3<f32>,
) -> Result<(LayerFeatures, LayerFeatures)> {
    let (c, h, w) = input.dim();
    if c != 3 || h < 64 || w < 64 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!(
            "backbone input must be (3, s, s) with s a multiple of 32 and >= 64, got ({c}, {h}, {w})"
        )));
    }
    let (f2, f3) = handle.net.forward_features(input);
    Ok((
        LayerFeatures {
            tensor: f2,
            layer_index: 2,
        },
        LayerFeatures {
            tensor: f3,
            layer_index: 3,
        },
    ))
}

/// Extracts the 3x3 neighborhood around every grid position, zero-padded at
/// the borders. Output shape (h*w, c, 3, 3), grid cells in row-major order.
pub fn patchify(features: &ArrayView3<f32>) -> Array4<f32> {
    let (c, h, w) = features.dim();
    let mut out = Array4::zeros((h * w, c, 3, 3));
    for r in 0..h {
        for col in 0..w {
            let p = r * w + col;
            for dy in 0..3usize {
                let iy = r as isize + dy as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..3usize {
                    let ix = col as isize + dx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    for ch in 0..c {
                        out[(p, ch, dy, dx)] = features[(ch, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    out
}

/// Adaptive average pooling of one flattened (c, 3, 3) patch down to
/// `target` values: output `i` is the mean of the window
/// `[floor(i*L/target), ceil((i+1)*L/target))` with `L = c*9`.
pub fn pool_patch(patch: &ArrayView3<f32>, target: usize) -> Result<Vec<f32>> {
    let (c, kh, kw) = patch.dim();
    let len = c * kh * kw;
    if target > len {
        return Err(Error::Unsupported(format!(
            "pooling target {target} exceeds patch length {len}"
        )));
    }
    if target == 0 {
        return Err(Error::Argument("pooling target must be positive".into()));
    }
    let flat: Vec<f32> = patch.iter().copied().collect();
    Ok(adaptive_avg_pool_1d(&flat, target))
}

pub(crate) fn adaptive_avg_pool_1d(values: &[f32], target: usize) -> Vec<f32> {
    let len = values.len();
    let mut out = Vec::with_capacity(target);
    for i in 0..target {
        let start = i * len / target;
        let end = ((i + 1) * len).div_ceil(target);
        let mut acc = 0f64;
        for v in &values[start..end] {
            acc += *v as f64;
        }
        out.push((acc / (end - start) as f64) as f32);
    }
    out
}

/// Pools every patch of a (P, c, 3, 3) stack to `target` values.
pub fn pool_patches(patches: &Array4<f32>, target: usize) -> Result<Array2<f32>> {
    let (p, c, kh, kw) = patches.dim();
    let mut out = Array2::zeros((p, target));
    for i in 0..p {
        let patch = patches
            .index_axis(ndarray::Axis(0), i)
            .into_shape_with_order((c, kh, kw))
            .expect("patch view");
        let pooled = pool_patch(&patch, target)?;
        for (j, v) in pooled.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Maps a fine-grid cell to its coarse-grid cell by integer index scaling.
fn coarse_index(r: usize, c: usize, grid_fine: (usize, usize), grid_coarse: (usize, usize)) -> usize {
    let fy = grid_fine.0 / grid_coarse.0;
    let fx = grid_fine.1 / grid_coarse.1;
    (r / fy) * grid_coarse.1 + c / fx
}

/// Upsamples the coarse pooled vectors to the fine grid by nearest-neighbor
/// index replication and averages them with the fine pooled vectors.
pub fn align_and_aggregate(
    pooled_fine: &Array2<f32>,
    pooled_coarse: &Array2<f32>,
    grid_fine: (usize, usize),
    grid_coarse: (usize, usize),
) -> Result<Array2<f32>> {
    let (h2, w2) = grid_fine;
    let (h3, w3) = grid_coarse;
    if h3 == 0 || w3 == 0 || h2 % h3 != 0 || w2 % w3 != 0 {
        return Err(Error::Alignment(format!(
            "coarse grid {h3}x{w3} does not divide fine grid {h2}x{w2}"
        )));
    }
    let (pf, cf) = pooled_fine.dim();
    let (pc, cc) = pooled_coarse.dim();
    if pf != h2 * w2 || pc != h3 * w3 {
        return Err(Error::Shape(format!(
            "pooled row counts ({pf}, {pc}) do not match grids {h2}x{w2}, {h3}x{w3}"
        )));
    }
    if cf != cc {
        return Err(Error::Shape(format!(
            "pooled dims differ: {cf} vs {cc}"
        )));
    }

    let mut out = Array2::zeros((pf, cf));
    for r in 0..h2 {
        for c in 0..w2 {
            let idx = r * w2 + c;
            let cidx = coarse_index(r, c, grid_fine, grid_coarse);
            for ch in 0..cf {
                out[(idx, ch)] = 0.5 * (pooled_fine[(idx, ch)] + pooled_coarse[(cidx, ch)]);
            }
        }
    }
    Ok(out)
}

/// Full extraction pipeline: preprocess, run the backbone, patchify both
/// stages, pool to the stride-16 channel count, and aggregate onto the
/// stride-8 grid.
pub fn extract_feature_map(
    handle: &BackboneHandle,
    img: &ImageTensor,
    input_size: usize,
    source_image_id: &str,
) -> Result<PatchFeatureMap> {
    let x = preprocess(img, input_size)?;
    extract_feature_map_from_input(handle, &x, source_image_id)
}

/// As [`extract_feature_map`] but starting from an already-preprocessed
/// (3, s, s) tensor.
pub fn extract_feature_map_from_input(
    handle: &BackboneHandle,
    input: &Array3<f32>,
    source_image_id: &str,
) -> Result<PatchFeatureMap> {
    let (f2, f3) = extract_layer_features(handle, input)?;
    let grid2 = f2.grid();
    let grid3 = f3.grid();
    let c3 = handle.c3();
    let pooled2 = pool_patches(&patchify(&f2.tensor.view()), c3)?;
    let pooled3 = pool_patches(&patchify(&f3.tensor.view()), c3)?;
    let vectors = align_and_aggregate(&pooled2, &pooled3, grid2, grid3)?;
    PatchFeatureMap::new(vectors, grid2, source_image_id.to_string())
}

/// Sidecar metadata written next to every feature cache file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub source_image: String,
    pub backbone_id: String,
    pub input_size: usize,
    pub resize_ratio: f64,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
}

impl FeatureSidecar {
    pub fn new(source_image: &str, backbone_id: &str, input_size: usize) -> Self {
        FeatureSidecar {
            source_image: source_image.to_string(),
            backbone_id: backbone_id.to_string(),
            input_size,
            resize_ratio: RESIZE_RATIO,
            channel_mean: CHANNEL_MEAN,
            channel_std: CHANNEL_STD,
        }
    }
}

/// Writes a feature cache file (`ANOF`) and its JSON sidecar.
pub fn write_feature_map(
    path: &Path,
    map: &PatchFeatureMap,
    sidecar: &FeatureSidecar,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(FEATURE_MAGIC).map_err(io_err)?;
    write_u32(&mut w, FEATURE_VERSION).map_err(io_err)?;
    write_u32(&mut w, map.grid.0 as u32).map_err(io_err)?;
    write_u32(&mut w, map.grid.1 as u32).map_err(io_err)?;
    write_u32(&mut w, map.feature_dim() as u32).map_err(io_err)?;
    write_f32_slice(&mut w, map.vectors.as_slice().expect("contiguous vectors"))
        .map_err(io_err)?;
    w.flush().map_err(io_err)?;

    let sidecar_path = path.with_extension("json");
    let json = serde_json::to_string_pretty(sidecar)
        .map_err(|e| Error::format(&sidecar_path, e.to_string()))?;
    std::fs::write(&sidecar_path, json).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(())
}

/// Reads a feature cache file. The source image id is taken from the sidecar
/// when present, else from the file stem.
pub fn read_feature_map(path: &Path) -> Result<PatchFeatureMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);
    if !read_magic(&mut r, FEATURE_MAGIC).map_err(io_err)? {
        return Err(Error::format(path, "bad magic, expected ANOF"));
    }
    let version = read_u32(&mut r).map_err(io_err)?;
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let h = read_u32(&mut r).map_err(io_err)? as usize;
    let w = read_u32(&mut r).map_err(io_err)? as usize;
    let c = read_u32(&mut r).map_err(io_err)? as usize;
    let data = read_f32_vec(&mut r, h * w * c).map_err(io_err)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(Error::format(path, "trailing bytes after feature data"));
    }
    let vectors =
        Array2::from_shape_vec((h * w, c), data).map_err(|e| Error::Shape(e.to_string()))?;

    let id = read_sidecar(path)
        .map(|s| s.source_image)
        .unwrap_or_else(|_| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
    PatchFeatureMap::new(vectors, (h, w), id)
}

pub fn read_sidecar(feature_path: &Path) -> Result<FeatureSidecar> {
    let sidecar_path = feature_path.with_extension("json");
    let text =
        std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&sidecar_path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_shapes_match_grid() {
        // stride-8 stage of a 224px input: 512 channels on a 28x28 grid.
        let f = Array3::<f32>::zeros((512, 28, 28));
        let p = patchify(&f.view());
        assert_eq!(p.dim(), (784, 512, 3, 3));
    }

    #[test]
    fn patchify_single_cell_is_padding_only() {
        let f = Array3::from_elem((1, 1, 1), 7.5f32);
        let p = patchify(&f.view());
        assert_eq!(p.dim(), (1, 1, 3, 3));
        for dy in 0..3 {
            for dx in 0..3 {
                let want = if dy == 1 && dx == 1 { 7.5 } else { 0.0 };
                assert_eq!(p[(0, 0, dy, dx)], want);
            }
        }
    }

    #[test]
    fn patchify_center_patch_reproduces_input() {
        // 1x3x3 input: the patch at grid position (1,1) sees the whole input.
        let f = Array3::from_shape_vec(
            (1, 3, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let p = patchify(&f.view());
        let center = p.index_axis(ndarray::Axis(0), 4);
        for dy in 0..3 {
            for dx in 0..3 {
                assert_eq!(center[(0, dy, dx)], f[(0, dy, dx)]);
            }
        }
    }

    #[test]
    fn patchify_locality() {
        // Changing one feature cell changes only the <=9 patches whose 3x3
        // window covers it.
        let mut f = Array3::<f32>::zeros((2, 5, 5));
        let base = patchify(&f.view());
        f[(1, 2, 3)] = 1.0;
        let changed = patchify(&f.view());
        let mut differing = 0;
        for p in 0..25 {
            if base.index_axis(ndarray::Axis(0), p) != changed.index_axis(ndarray::Axis(0), p) {
                differing += 1;
            }
        }
        assert_eq!(differing, 9);
    }

    #[test]
    fn pool_patch_constant_is_identity() {
        let patch = Array3::from_elem((16, 3, 3), 2.25f32);
        let out = pool_patch(&patch.view(), 12).unwrap();
        assert_eq!(out.len(), 12);
        for v in out {
            assert!((v - 2.25).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_patch_exact_windows() {
        // L = 1024*9 divides evenly into 1024 windows of 9: each output is
        // the mean of one contiguous 9-element run.
        let c = 1024;
        let patch = Array3::from_shape_fn((c, 3, 3), |(ch, y, x)| (ch * 9 + y * 3 + x) as f32);
        let out = pool_patch(&patch.view(), c).unwrap();
        let flat: Vec<f32> = patch.iter().copied().collect();
        for (i, v) in out.iter().enumerate() {
            let want: f32 = flat[i * 9..(i + 1) * 9].iter().sum::<f32>() / 9.0;
            assert!((v - want).abs() < 1e-4, "window {i}: {v} vs {want}");
        }
    }

    #[test]
    fn pool_patch_matches_window_oracle() {
        // Brute-force oracle: recompute every window from the floor/ceil rule
        // with independent arithmetic (overlapping windows, L=512*9, out=1024).
        let c = 512;
        let target = 1024;
        let patch = Array3::from_shape_fn((c, 3, 3), |(ch, y, x)| {
            ((ch * 31 + y * 7 + x * 3) % 97) as f32 * 0.125 - 4.0
        });
        let flat: Vec<f32> = patch.iter().copied().collect();
        let len = flat.len();
        let out = pool_patch(&patch.view(), target).unwrap();
        assert_eq!(out.len(), target);
        for i in 0..target {
            let start = (i * len) / target;
            let mut end = ((i + 1) * len) / target;
            if ((i + 1) * len) % target != 0 {
                end += 1;
            }
            let window = &flat[start..end];
            let want = window.iter().map(|&v| v as f64).sum::<f64>() / window.len() as f64;
            assert!(
                (out[i] as f64 - want).abs() < 1e-5,
                "window {i}: {} vs {want}",
                out[i]
            );
        }
    }

    #[test]
    fn pool_patch_rejects_oversized_target() {
        let patch = Array3::<f32>::zeros((1, 3, 3));
        assert!(matches!(
            pool_patch(&patch.view(), 10),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn align_replicates_coarse_cells() {
        // 2x2 coarse grid onto 4x4 fine grid: each coarse vector lands in a
        // 2x2 block, so it appears in exactly 4 output cells.
        let fine = Array2::<f32>::zeros((16, 1));
        let coarse =
            Array2::from_shape_vec((4, 1), vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let out = align_and_aggregate(&fine, &coarse, (4, 4), (2, 2)).unwrap();
        // fine is zero, so out = coarse/2 replicated.
        let expect = |r: usize, c: usize| coarse[((r / 2) * 2 + c / 2, 0)] / 2.0;
        let mut counts = [0usize; 4];
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(out[(r * 4 + c, 0)], expect(r, c));
                counts[(r / 2) * 2 + c / 2] += 1;
            }
        }
        assert_eq!(counts, [4, 4, 4, 4]);
    }

    #[test]
    fn align_averages_the_two_vectors() {
        let fine = Array2::from_elem((1, 3), 2.0f32);
        let coarse = Array2::from_elem((1, 3), 6.0f32);
        let out = align_and_aggregate(&fine, &coarse, (1, 1), (1, 1)).unwrap();
        assert_eq!(out, Array2::from_elem((1, 3), 4.0f32));
    }

    #[test]
    fn align_full_grid_row_count() {
        let fine = Array2::<f32>::zeros((784, 4));
        let coarse = Array2::<f32>::zeros((196, 4));
        let out = align_and_aggregate(&fine, &coarse, (28, 28), (14, 14)).unwrap();
        assert_eq!(out.dim(), (784, 4));
    }

    #[test]
    fn align_rejects_non_integer_factor() {
        let fine = Array2::<f32>::zeros((25, 2));
        let coarse = Array2::<f32>::zeros((4, 2));
        assert!(matches!(
            align_and_aggregate(&fine, &coarse, (5, 5), (2, 2)),
            Err(Error::Alignment(_))
        ));
    }

    fn demo_handle(width: usize, seed: u64) -> BackboneHandle {
        let archive = ResNetSpec::tiny(width).synthetic_archive(seed);
        BackboneHandle::from_archive(&archive).unwrap()
    }

    #[test]
    fn extract_grids_at_224() {
        let handle = demo_handle(2, 11);
        let x = Array3::from_shape_fn((3, 224, 224), |(c, y, z)| {
            0.01 * (c as f32 + 1.0) * ((y % 13) as f32 - (z % 7) as f32)
        });
        let (f2, f3) = extract_layer_features(&handle, &x).unwrap();
        assert_eq!(f2.grid(), (28, 28));
        assert_eq!(f3.grid(), (14, 14));
        assert_eq!(f2.layer_index, 2);
        assert_eq!(f3.layer_index, 3);
    }

    #[test]
    fn extract_rejects_bad_shape() {
        let handle = demo_handle(2, 11);
        let x = Array3::<f32>::zeros((3, 100, 100));
        assert!(matches!(
            extract_layer_features(&handle, &x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let handle = demo_handle(2, 5);
        let img = ImageTensor::filled(96, 96, [0, 0, 0]).unwrap();
        let map = extract_feature_map(&handle, &img, 64, "zero").unwrap();
        assert!(map.vectors.iter().all(|v| v.is_finite()));
        assert_eq!(map.grid, (8, 8));
        assert_eq!(map.feature_dim(), handle.c3());
    }

    #[test]
    fn distinct_images_give_distinct_features() {
        let handle = demo_handle(2, 5);
        let a = ImageTensor::filled(96, 96, [10, 10, 10]).unwrap();
        let b = ImageTensor::filled(96, 96, [240, 240, 240]).unwrap();
        let fa = extract_feature_map(&handle, &a, 64, "a").unwrap();
        let fb = extract_feature_map(&handle, &b, 64, "b").unwrap();
        assert_ne!(fa.vectors, fb.vectors);
    }

    #[test]
    fn extraction_is_bit_identical() {
        let handle = demo_handle(2, 5);
        let mut img = image::RgbImage::new(96, 96);
        for (x, y, p) in img.enumerate_pixels_mut() {
            p.0 = [(x * 2 % 255) as u8, (y * 3 % 255) as u8, ((x + y) % 255) as u8];
        }
        let img = ImageTensor::new(img).unwrap();
        let fa = extract_feature_map(&handle, &img, 64, "img").unwrap();
        let fb = extract_feature_map(&handle, &img, 64, "img").unwrap();
        assert_eq!(fa.vectors, fb.vectors);
    }

    #[test]
    fn load_backbone_missing_path_names_it() {
        let err = load_backbone(Path::new("/no/such/weights.anoc")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/no/such/weights.anoc"), "{msg}");
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img0.anof");
        let vectors = Array2::from_shape_fn((12, 5), |(i, j)| (i * 5 + j) as f32 * 0.5);
        let map = PatchFeatureMap::new(vectors, (3, 4), "img0.png".into()).unwrap();
        let sidecar = FeatureSidecar::new("img0.png", "tiny-resnet-w2", 64);
        write_feature_map(&path, &map, &sidecar).unwrap();

        let back = read_feature_map(&path).unwrap();
        assert_eq!(back.vectors, map.vectors);
        assert_eq!(back.grid, (3, 4));
        assert_eq!(back.source_image_id, "img0.png");
        let side = read_sidecar(&path).unwrap();
        assert_eq!(side.backbone_id, "tiny-resnet-w2");
        assert_eq!(side.input_size, 64);
    }

    #[test]
    fn feature_file_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.anof");
        std::fs::write(&path, b"WXYZ\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_feature_map(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn rows_round_trip_through_tensor() {
        let rows = Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f32);
        let t = rows_to_tensor(&rows, (2, 3));
        assert_eq!(t.dim(), (2, 2, 3));
        // row-major grid order: cell (r, c) = row r*w + c
        assert_eq!(t[(0, 0, 0)], rows[(0, 0)]);
        assert_eq!(t[(1, 0, 2)], rows[(2, 1)]);
        assert_eq!(t[(0, 1, 0)], rows[(3, 0)]);
    }
}
