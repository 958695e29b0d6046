//! Extract patch feature maps with a demo backbone.
//!
//! Builds a narrow residual backbone with seeded random weights (a stand-in
//! for pretrained weights, which you would export with
//! tools/export_backbone.py), runs an image through it, and writes the
//! feature cache file plus its sidecar.
//!
//! Run with: cargo run --example feature_extraction

use anoclass::backbone::{
    extract_feature_map, BackboneHandle, FeatureSidecar, ImageTensor, ResNetSpec,
};
use anoclass::Result;

fn main() -> Result<()> {
    let out_dir = std::path::PathBuf::from("target/examples-output/feature_extraction");
    std::fs::create_dir_all(&out_dir).unwrap();

    // Demo backbone: same topology as the full 50-layer network, width 4.
    let spec = ResNetSpec::tiny(4);
    let archive = spec.synthetic_archive(7);
    let weights_path = out_dir.join("demo_backbone.anoc");
    archive.write(&weights_path)?;
    let handle = BackboneHandle::from_archive(&archive)?;
    println!(
        "backbone {}: c2={} channels at stride 8, c3={} at stride 16",
        handle.id(),
        handle.c2(),
        handle.c3()
    );

    // A synthetic "product photo": gray canvas with a colored part.
    let mut img = image::RgbImage::from_pixel(256, 256, image::Rgb([140, 140, 140]));
    for y in 60..200 {
        for x in 80..180 {
            img.put_pixel(x, y, image::Rgb([40, 90, 190]));
        }
    }
    let img = ImageTensor::new(img)?;

    let map = extract_feature_map(&handle, &img, 64, "demo_part")?;
    println!(
        "feature map: {} patches on a {}x{} grid, {} dims each",
        map.patch_count(),
        map.grid.0,
        map.grid.1,
        map.feature_dim()
    );

    let feature_path = out_dir.join("demo_part.anof");
    let sidecar = FeatureSidecar::new("demo_part.png", handle.id(), 64);
    anoclass::backbone::write_feature_map(&feature_path, &map, &sidecar)?;
    let back = anoclass::backbone::read_feature_map(&feature_path)?;
    assert_eq!(back.vectors, map.vectors);
    println!("round-tripped feature cache at {}", feature_path.display());
    Ok(())
}
