//! Pseudo-class defect synthesis.
//!
//! A fabricated defect is a texture patch blended into the foreground of a
//! normal image: the defect region is the intersection of the image's
//! foreground mask with a noise- or polygon-shaped mask, and inside that
//! region the pixel is `(1-beta) * normal + beta * texture`. The pseudo-class
//! label comes from the texture category (and, in the polygon variant, the
//! polygon side count), giving a labeled pretraining set with no real
//! defects.

pub mod mask;

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};

pub use mask::{
    box_filter, foreground_mask, largest_component, mask_and, mask_coverage, mask_is_empty,
    poisson_field, poisson_noise_mask, polygon_mask, BitMask,
};

/// The 47 texture category names, in the canonical (alphabetical) order that
/// fixes the pseudo-class ids.
pub const TEXTURE_CATEGORIES: [&str; 47] = [
    "banded",
    "blotchy",
    "braided",
    "bubbly",
    "bumpy",
    "chequered",
    "cobwebbed",
    "cracked",
    "crosshatched",
    "crystalline",
    "dotted",
    "fibrous",
    "flecked",
    "freckled",
    "frilly",
    "gauzy",
    "grid",
    "grooved",
    "honeycombed",
    "interlaced",
    "knitted",
    "lacelike",
    "lined",
    "marbled",
    "matted",
    "meshed",
    "paisley",
    "perforated",
    "pitted",
    "pleated",
    "polka-dotted",
    "porous",
    "potholed",
    "scaly",
    "smeared",
    "spiralled",
    "sprinkled",
    "stained",
    "stratified",
    "striped",
    "studded",
    "swirly",
    "veined",
    "waffled",
    "woven",
    "wrinkled",
    "zigzagged",
];

/// Polygon side counts used by the shape-labeled variant.
pub const POLYGON_SIDES: [usize; 4] = [3, 4, 5, 6];

/// Number of pseudo-classes per generation kind.
pub fn class_count(kind: MaskKind) -> usize {
    match kind {
        MaskKind::Poisson => TEXTURE_CATEGORIES.len(),
        MaskKind::Polygon => TEXTURE_CATEGORIES.len() * POLYGON_SIDES.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Poisson,
    Polygon,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(MaskKind::Poisson),
            "polygon" => Ok(MaskKind::Polygon),
            other => Err(Error::Argument(format!(
                "unknown mask kind {other:?}, expected poisson or polygon"
            ))),
        }
    }
}

/// One texture image with its category id.
#[derive(Debug, Clone)]
pub struct TextureSource {
    pub image: ImageTensor,
    pub texture_category: u32,
    pub file_path: PathBuf,
}

/// Final defect mask of a generated image.
#[derive(Debug, Clone)]
pub struct DefectMask {
    pub mask: BitMask,
    pub kind: MaskKind,
    /// For the polygon kind, the side count behind the label arithmetic.
    pub sides: Option<usize>,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub normal_id: String,
    pub texture_id: u32,
    pub seed: u64,
}

/// A generated defect image: the blended picture, its mask, and provenance.
#[derive(Debug, Clone)]
pub struct SyntheticDefect {
    pub image: ImageTensor,
    pub mask: DefectMask,
    pub pseudo_label: u32,
    pub beta: f64,
    pub provenance: Provenance,
}

impl SyntheticDefect {
    pub fn item_id(&self, index: usize) -> String {
        format!("{}_{index}", self.provenance.normal_id)
    }
}

/// Pseudo-label arithmetic for the polygon variant: texture id times the
/// number of shapes plus the shape index, for a maximum of 47*4 classes.
pub fn polygon_label(texture_id: u32, n_sides: usize) -> u32 {
    let shape_idx = POLYGON_SIDES
        .iter()
        .position(|&n| n == n_sides)
        .expect("n_sides validated upstream") as u32;
    texture_id * POLYGON_SIDES.len() as u32 + shape_idx
}

fn resize_to(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    if img.width() == w && img.height() == h {
        img.clone()
    } else {
        image::imageops::resize(img, w, h, image::imageops::FilterType::Triangle)
    }
}

/// Blends the texture into the normal image inside `fg AND raw_mask`.
///
/// Pixels outside the final mask are copied byte-for-byte from the normal
/// image; inside, each channel is `round((1-beta)*normal + beta*texture)`.
/// The texture is resized to the image size and not otherwise augmented.
/// An empty final mask is a rejection signal: the caller resamples.
pub fn compose_defect(
    normal: &ImageTensor,
    fg: &BitMask,
    raw_mask: &BitMask,
    texture: &TextureSource,
    beta: f64,
    kind: MaskKind,
    sides: Option<usize>,
    provenance: Provenance,
) -> Result<SyntheticDefect> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Argument(format!("beta = {beta} must be in [0, 1]")));
    }
    let (w, h) = (normal.width(), normal.height());
    let expect = (h as usize, w as usize);
    if fg.dim() != expect || raw_mask.dim() != expect {
        return Err(Error::Shape(format!(
            "mask dims {:?} / {:?} do not match image {}x{}",
            fg.dim(),
            raw_mask.dim(),
            w,
            h
        )));
    }

    let final_mask = mask_and(fg, raw_mask);
    if mask_is_empty(&final_mask) {
        return Err(Error::EmptyMask);
    }

    let tex = resize_to(texture.image.as_rgb(), w, h);
    let mut out = normal.as_rgb().clone();
    for y in 0..h {
        for x in 0..w {
            if final_mask[(y as usize, x as usize)] == 1 {
                let n = out.get_pixel(x, y).0;
                let t = tex.get_pixel(x, y).0;
                let mut blended = [0u8; 3];
                for c in 0..3 {
                    let v = (1.0 - beta) * n[c] as f64 + beta * t[c] as f64;
                    blended[c] = v.round().clamp(0.0, 255.0) as u8;
                }
                out.put_pixel(x, y, image::Rgb(blended));
            }
        }
    }

    let pseudo_label = match kind {
        MaskKind::Poisson => texture.texture_category,
        MaskKind::Polygon => polygon_label(
            texture.texture_category,
            sides.ok_or_else(|| Error::Argument("polygon kind requires a side count".into()))?,
        ),
    };
    let coverage = mask_coverage(&final_mask);
    Ok(SyntheticDefect {
        image: ImageTensor::new(out)?,
        mask: DefectMask {
            mask: final_mask,
            kind,
            sides,
            coverage,
        },
        pseudo_label,
        beta,
        provenance,
    })
}

/// Finds the texture directory for a category under the dataset root,
/// accepting both `<root>/images/<category>` and `<root>/<category>`.
fn texture_dir(root: &Path, category: &str) -> Option<PathBuf> {
    let nested = root.join("images").join(category);
    if nested.is_dir() {
        return Some(nested);
    }
    let flat = root.join(category);
    if flat.is_dir() {
        return Some(flat);
    }
    None
}

fn first_image_in(dir: &Path) -> Result<Option<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_lowercase),
                    Some(ref ext) if ["png", "jpg", "jpeg", "bmp"].contains(&ext.as_str())
                )
        })
        .collect();
    files.sort();
    Ok(files.into_iter().next())
}

/// Loads exactly one texture per category: the lexicographically first image
/// file in each category directory. Errors list every absent category.
pub fn load_textures(dtd_root: &Path) -> Result<Vec<TextureSource>> {
    let mut missing = Vec::new();
    let mut sources = Vec::new();
    for (id, name) in TEXTURE_CATEGORIES.iter().enumerate() {
        let Some(dir) = texture_dir(dtd_root, name) else {
            missing.push(*name);
            continue;
        };
        match first_image_in(&dir)? {
            Some(path) => sources.push(TextureSource {
                image: ImageTensor::open(&path)?,
                texture_category: id as u32,
                file_path: path,
            }),
            None => missing.push(*name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Argument(format!(
            "texture categories absent under {}: {}",
            dtd_root.display(),
            missing.join(", ")
        )));
    }
    Ok(sources)
}

/// A normal image paired with a stable id (usually the file stem).
#[derive(Debug, Clone)]
pub struct NormalImage {
    pub id: String,
    pub image: ImageTensor,
}

/// Generation parameters with the working defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Flood-fill per-channel tolerance for foreground extraction.
    pub fg_tolerance: u8,
    /// Poisson rate of the noise field.
    pub lambda: f64,
    /// Blend ratio range, sampled uniformly per item.
    pub beta_range: (f64, f64),
    /// Target mask coverage range as a fraction of the foreground.
    pub coverage_range: (f64, f64),
    /// Circumradius of polygon masks as a fraction of min(H, W).
    pub polygon_scale: f64,
    /// Vertex jitter of polygon masks (0 = regular polygon).
    pub polygon_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            fg_tolerance: 12,
            lambda: 4.0,
            beta_range: (0.2, 0.8),
            coverage_range: (0.01, 0.20),
            polygon_scale: 0.25,
            polygon_jitter: 0.5,
        }
    }
}

/// Per-item generator seed: every item's randomness is a pure function of
/// (global seed, class, index), so parallel and serial runs agree.
fn item_rng(seed: u64, class: u32, index: u32) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&class.to_le_bytes());
    key[12..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&0x616e6f636c617373u64.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Thresholds the smoothed noise field so the in-foreground mask hits the
/// requested coverage: the cutoff is the k-th largest foreground value.
fn poisson_mask_with_coverage(
    field: &ndarray::Array2<f32>,
    fg: &BitMask,
    coverage: f64,
) -> BitMask {
    let mut fg_values: Vec<f32> = field
        .iter()
        .zip(fg.iter())
        .filter(|(_, &m)| m == 1)
        .map(|(&v, _)| v)
        .collect();
    let fg_count = fg_values.len();
    let k = ((fg_count as f64 * coverage).round() as usize).clamp(1, fg_count);
    fg_values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let cutoff = fg_values[k - 1];
    let mut out = BitMask::zeros(field.dim());
    out.zip_mut_with(field, |m, &v| *m = u8::from(v >= cutoff));
    out
}

/// Generates a balanced pseudo-class pretraining set: `count_per_class`
/// items for each pseudo-class of the requested kind. Deterministic in
/// (normals, textures, kind, count_per_class, seed).
pub fn generate_pretrain_set(
    normals: &[NormalImage],
    textures: &[TextureSource],
    kind: MaskKind,
    count_per_class: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Vec<SyntheticDefect>> {
    if normals.is_empty() {
        return Err(Error::Argument("no normal images given".into()));
    }
    if textures.len() != TEXTURE_CATEGORIES.len() {
        return Err(Error::Argument(format!(
            "expected {} textures, got {}",
            TEXTURE_CATEGORIES.len(),
            textures.len()
        )));
    }
    if count_per_class == 0 {
        return Err(Error::Argument("count_per_class must be positive".into()));
    }

    // Foreground masks are per normal image; compute once. Images whose
    // foreground is empty cannot host a defect and are skipped.
    let foregrounds: Vec<BitMask> = normals
        .iter()
        .map(|n| foreground_mask(n.image.as_rgb(), cfg.fg_tolerance))
        .collect();
    let usable: Vec<usize> = (0..normals.len())
        .filter(|&i| !mask_is_empty(&foregrounds[i]))
        .collect();
    if usable.is_empty() {
        return Err(Error::Argument(
            "every normal image has an empty foreground mask".into(),
        ));
    }

    let classes: Vec<(u32, Option<usize>)> = match kind {
        MaskKind::Poisson => (0..TEXTURE_CATEGORIES.len() as u32)
            .map(|t| (t, None))
            .collect(),
        MaskKind::Polygon => (0..TEXTURE_CATEGORIES.len() as u32)
            .flat_map(|t| POLYGON_SIDES.iter().map(move |&n| (t, Some(n))))
            .collect(),
    };

    let mut out = Vec::with_capacity(classes.len() * count_per_class);
    for (class_idx, &(texture_id, sides)) in classes.iter().enumerate() {
        let texture = &textures[texture_id as usize];
        for idx in 0..count_per_class {
            let mut rng = item_rng(seed, class_idx as u32, idx as u32);
            let normal_idx = usable[rng.random_range(0..usable.len())];
            let normal = &normals[normal_idx];
            let fg = &foregrounds[normal_idx];
            let beta = rng.random_range(cfg.beta_range.0..cfg.beta_range.1);
            let shape = (normal.image.height() as usize, normal.image.width() as usize);
            let provenance = Provenance {
                normal_id: normal.id.clone(),
                texture_id,
                seed,
            };

            let defect = match kind {
                MaskKind::Poisson => {
                    let coverage =
                        rng.random_range(cfg.coverage_range.0..cfg.coverage_range.1);
                    let field_seed: u64 = rng.random();
                    let field = poisson_field(shape, field_seed, cfg.lambda)?;
                    let raw = poisson_mask_with_coverage(&field, fg, coverage);
                    compose_defect(
                        &normal.image,
                        fg,
                        &raw,
                        texture,
                        beta,
                        kind,
                        None,
                        provenance,
                    )?
                }
                MaskKind::Polygon => {
                    // Polygon centers are drawn from the foreground; resample
                    // on the rare empty intersection.
                    let n_sides = sides.expect("polygon class carries sides");
                    let fg_pixels: Vec<(usize, usize)> = fg
                        .indexed_iter()
                        .filter(|(_, &v)| v == 1)
                        .map(|((y, x), _)| (y, x))
                        .collect();
                    let mut attempt = 0;
                    loop {
                        let (cy, cx) = fg_pixels[rng.random_range(0..fg_pixels.len())];
                        let poly_seed: u64 = rng.random();
                        let (raw, _) = polygon_mask(
                            shape,
                            n_sides,
                            poly_seed,
                            cfg.polygon_scale,
                            cfg.polygon_jitter,
                            Some((cx as f64 + 0.5, cy as f64 + 0.5)),
                        )?;
                        match compose_defect(
                            &normal.image,
                            fg,
                            &raw,
                            texture,
                            beta,
                            kind,
                            Some(n_sides),
                            provenance.clone(),
                        ) {
                            Ok(d) => break d,
                            Err(Error::EmptyMask) if attempt < 32 => {
                                attempt += 1;
                                continue;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
            };
            out.push(defect);
        }
    }
    Ok(out)
}

/// One line of the generation manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub file: String,
    pub mask_file: String,
    pub pseudo_label: u32,
    pub beta: f64,
    pub normal_id: String,
    pub texture_id: u32,
    pub seed: u64,
    pub kind: MaskKind,
    pub coverage: f64,
}

/// Writes the generated set as `<out>/<label>/<normal_id>_<idx>.png` plus a
/// `_mask.png` per item and a `manifest.json` listing provenance.
pub fn write_synthetic_set(out_dir: &Path, items: &[SyntheticDefect]) -> Result<Vec<ManifestItem>> {
    let mut manifest = Vec::with_capacity(items.len());
    let mut per_class_index = std::collections::HashMap::<u32, usize>::new();
    for item in items {
        let idx = per_class_index.entry(item.pseudo_label).or_insert(0);
        let class_dir = out_dir.join(item.pseudo_label.to_string());
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let stem = format!("{}_{}", item.provenance.normal_id, idx);
        *idx += 1;

        let img_path = class_dir.join(format!("{stem}.png"));
        item.image.save(&img_path)?;

        let (h, w) = item.mask.mask.dim();
        let mut mask_img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                mask_img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Luma([item.mask.mask[(y, x)] * 255]),
                );
            }
        }
        let mask_path = class_dir.join(format!("{stem}_mask.png"));
        mask_img
            .save(&mask_path)
            .map_err(|e| Error::load(&mask_path, e.to_string()))?;

        manifest.push(ManifestItem {
            file: img_path.to_string_lossy().into_owned(),
            mask_file: mask_path.to_string_lossy().into_owned(),
            pseudo_label: item.pseudo_label,
            beta: item.beta,
            normal_id: item.provenance.normal_id.clone(),
            texture_id: item.provenance.texture_id,
            seed: item.provenance.seed,
            kind: item.mask.kind,
            coverage: item.mask.coverage,
        });
    }
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}
