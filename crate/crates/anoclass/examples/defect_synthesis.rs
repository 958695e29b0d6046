//! Pseudo-class defect generation.
//!
//! Takes normal images, extracts their foreground via border flood fill,
//! carves defect masks from thresholded Poisson noise (or polygons), and
//! blends one texture per pseudo-class into the masked region. Writes the
//! generated set with masks and a provenance manifest.
//!
//! Run with: cargo run --example defect_synthesis

use anoclass::backbone::ImageTensor;
use anoclass::synth::{
    generate_pretrain_set, write_synthetic_set, MaskKind, NormalImage, SynthConfig, TextureSource,
    TEXTURE_CATEGORIES,
};
use anoclass::Result;

fn checkered_texture(id: u32) -> TextureSource {
    let mut img = image::RgbImage::new(96, 96);
    let a = [(id * 37 % 200 + 55) as u8, (id * 61 % 200 + 55) as u8, (id * 13 % 200) as u8];
    let b = [255 - a[0], 255 - a[1], 200 - a[2]];
    let cell = 4 + (id % 5) as u32;
    for (x, y, p) in img.enumerate_pixels_mut() {
        p.0 = if (x / cell + y / cell) % 2 == 0 { a } else { b };
    }
    TextureSource {
        image: ImageTensor::new(img).unwrap(),
        texture_category: id,
        file_path: format!("synthetic/{}", TEXTURE_CATEGORIES[id as usize]).into(),
    }
}

fn main() -> Result<()> {
    let out_dir = std::path::PathBuf::from("target/examples-output/defect_synthesis");

    // two normal "products" on a uniform background
    let normals: Vec<NormalImage> = (0..2)
        .map(|i| {
            let mut img = image::RgbImage::from_pixel(128, 128, image::Rgb([200, 200, 200]));
            for y in 24..104 {
                for x in 24..104 {
                    img.put_pixel(x, y, image::Rgb([90, 60 + i * 40, 120]));
                }
            }
            NormalImage {
                id: format!("part_{i}"),
                image: ImageTensor::new(img).unwrap(),
            }
        })
        .collect();

    // one texture per category (synthetic stand-ins for the texture dataset)
    let textures: Vec<TextureSource> = (0..TEXTURE_CATEGORIES.len() as u32)
        .map(checkered_texture)
        .collect();

    let cfg = SynthConfig::default();
    let items = generate_pretrain_set(&normals, &textures, MaskKind::Poisson, 2, 1, &cfg)?;
    println!(
        "generated {} items across {} pseudo-classes (poisson masks)",
        items.len(),
        TEXTURE_CATEGORIES.len()
    );
    let sample = &items[0];
    println!(
        "first item: label {}, beta {:.2}, mask covers {:.1}% of the image",
        sample.pseudo_label,
        sample.beta,
        sample.mask.coverage * 100.0
    );

    std::fs::create_dir_all(&out_dir).unwrap();
    let manifest = write_synthetic_set(&out_dir, &items[..8.min(items.len())])?;
    println!(
        "wrote {} sample images (+masks) and manifest.json under {}",
        manifest.len(),
        out_dir.display()
    );

    // the polygon variant multiplies labels by shape: up to 47*4 classes
    let poly = generate_pretrain_set(&normals, &textures, MaskKind::Polygon, 1, 2, &cfg)?;
    let max_label = poly.iter().map(|d| d.pseudo_label).max().unwrap();
    println!(
        "polygon variant: {} items, labels up to {max_label} (< {})",
        poly.len(),
        anoclass::synth::class_count(MaskKind::Polygon)
    );
    Ok(())
}
