//! t-SNE export: 2-D coordinates as CSV plus a scatter image.
//!
//! Run with: cargo run --example tsne_export

use anoclass::harness::tsne_emit;
use anoclass::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let out = std::path::PathBuf::from("target/examples-output/tsne_export");
    std::fs::create_dir_all(&out).unwrap();

    // three well-separated clusters in 32 dims
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut points = Vec::new();
    for class in 0..3usize {
        for _ in 0..20 {
            let center = class as f32 * 6.0;
            let v: Vec<f32> = (0..32).map(|_| center + rng.random_range(-0.8f32..0.8)).collect();
            points.push((v, class));
        }
    }

    let coords = tsne_emit(
        &points,
        &out.join("coords.csv"),
        &out.join("scatter.png"),
        30.0,
        1000,
        1,
    )?;
    println!("embedded {} points", coords.len());
    println!(
        "wrote {} and {}",
        out.join("coords.csv").display(),
        out.join("scatter.png").display()
    );
    Ok(())
}
