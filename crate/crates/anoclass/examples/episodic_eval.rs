//! The full episodic evaluation on a generated miniature dataset.
//!
//! Fabricates a tiny category on disk (train/good plus three defect types),
//! extracts features with a demo backbone, then runs the seeded protocol:
//! bank per seed, residual maps, fine-tune on the first-n support shots,
//! classify every query, aggregate mean and sample standard deviation, and
//! write the report tables.
//!
//! Run with: cargo run --example episodic_eval

use anoclass::backbone::ResNetSpec;
use anoclass::config::{ExperimentConfig, ModelKind};
use anoclass::harness;
use anoclass::Result;
use std::path::Path;

fn paint_image(path: &Path, base: [u8; 3], defect: Option<[u8; 3]>, jitter: u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let mut img = image::RgbImage::from_pixel(96, 96, image::Rgb([210, 210, 210]));
    for y in 16..80 {
        for x in 16..80 {
            let v = [
                base[0].wrapping_add((x as u8).wrapping_mul(jitter) % 12),
                base[1].wrapping_add((y as u8).wrapping_mul(jitter) % 12),
                base[2],
            ];
            img.put_pixel(x, y, image::Rgb(v));
        }
    }
    if let Some(d) = defect {
        for y in 36..60 {
            for x in 36..60 {
                img.put_pixel(x, y, image::Rgb(d));
            }
        }
    }
    img.save(path).unwrap();
}

fn main() -> Result<()> {
    let root = std::path::PathBuf::from("target/examples-output/episodic_eval");
    let _ = std::fs::remove_dir_all(&root);
    let data = root.join("data");

    // miniature category: 6 normals, 3 defect types x 6 images
    let cat = data.join("widget");
    for i in 0..6 {
        paint_image(
            &cat.join(format!("train/good/{i:03}.png")),
            [90, 120, 160],
            None,
            i as u8 + 1,
        );
    }
    let defects = [
        ("scratch", [230u8, 40u8, 40u8]),
        ("dent", [40, 220, 60]),
        ("stain", [240, 220, 40]),
    ];
    for (name, color) in defects {
        for i in 0..6 {
            paint_image(
                &cat.join(format!("test/{name}/{i:03}.png")),
                [90, 120, 160],
                Some(color),
                i as u8 + 1,
            );
        }
    }

    // demo backbone weights
    let weights = root.join("backbone.anoc");
    ResNetSpec::tiny(2).synthetic_archive(4).write(&weights)?;

    // configuration: 2-shot contrastive, no pretraining, seeds 1..3
    let mut cfg = ExperimentConfig::default();
    cfg.data.root = data.clone();
    cfg.data.category = "widget".into();
    cfg.protocol.shots = 2;
    cfg.protocol.seeds = vec![1, 2, 3];
    cfg.protocol.model = ModelKind::Contrastive;
    cfg.protocol.pretrain = false;
    cfg.backbone.weights = weights.clone();
    cfg.backbone.input_size = 64;
    cfg.train.embed_channels = vec![8, 8, 8, 8];
    cfg.train.embed_dim = 16;
    cfg.train.lr = 1e-3;
    cfg.paths.features = root.join("features");
    cfg.paths.results = root.join("results");
    cfg.paths.checkpoints = root.join("ckpts");

    // extract features for both splits (what `anoclass extract` does)
    let handle = anoclass::backbone::load_backbone(&weights)?;
    let spec = harness::DatasetSpec::from_config(&cfg)?;
    let splits = harness::ingest(&spec)?;
    println!(
        "ingested widget: {} defect types {:?}, {} train-good images",
        splits.defect_types.len(),
        splits.defect_types,
        splits.train_good.len()
    );
    let out_cat = cfg.paths.features.join("widget");
    let extract = |img: &Path, split: &str, class: &str| -> Result<()> {
        let stem = img.file_stem().unwrap().to_string_lossy();
        let dir = out_cat.join(split).join(class);
        std::fs::create_dir_all(&dir).unwrap();
        let map = anoclass::backbone::extract_feature_map(
            &handle,
            &anoclass::backbone::ImageTensor::open(img)?,
            64,
            &img.to_string_lossy(),
        )?;
        let sidecar =
            anoclass::backbone::FeatureSidecar::new(&img.to_string_lossy(), handle.id(), 64);
        anoclass::backbone::write_feature_map(&dir.join(format!("{stem}.anof")), &map, &sidecar)
    };
    for img in &splits.train_good {
        extract(img, "train", "good")?;
    }
    for (class, files) in splits.test_by_class.iter().enumerate() {
        for img in files {
            extract(img, "test", &splits.defect_types[class])?;
        }
    }

    // run the seeded protocol and report
    let row = harness::run_experiment(&cfg)?;
    println!(
        "widget {}-shot over seeds {:?}: {}",
        row.shot,
        row.seeds,
        row.formatted()
    );
    let (md, csv) = harness::report(&[row], &cfg.paths.results.join("report"))?;
    println!("report: {} and {}", md.display(), csv.display());
    Ok(())
}
