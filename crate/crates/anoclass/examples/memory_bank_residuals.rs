//! Memory bank construction and residual maps.
//!
//! Normal patch vectors go through greedy farthest-point subsampling into a
//! bank; test features become residuals against their nearest bank vector.
//! Normal-looking patches give near-zero residuals, anomalous ones stand out.
//!
//! Run with: cargo run --example memory_bank_residuals

use anoclass::backbone::PatchFeatureMap;
use anoclass::bank::MemoryBank;
use anoclass::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy_map(rng: &mut ChaCha8Rng, id: &str, anomaly: Option<(usize, f32)>) -> PatchFeatureMap {
    // 8x8 grid of 16-dim patch vectors around a fixed normal pattern
    let mut vectors = Array2::from_shape_fn((64, 16), |(p, d)| {
        ((p % 8) as f32 * 0.1 + d as f32 * 0.05) + rng.random_range(-0.02f32..0.02)
    });
    if let Some((patch, offset)) = anomaly {
        for d in 0..16 {
            vectors[(patch, d)] += offset;
        }
    }
    PatchFeatureMap::new(vectors, (8, 8), id.to_string()).unwrap()
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // 12 normal images -> 768 patch vectors -> 10% coreset
    let normals: Vec<PatchFeatureMap> = (0..12)
        .map(|i| noisy_map(&mut rng, &format!("normal_{i}"), None))
        .collect();
    let bank = MemoryBank::build(&normals, 0.10, 1)?;
    println!(
        "bank: {} of {} source patches kept (p={}, seed={})",
        bank.len(),
        bank.source_count(),
        bank.p(),
        bank.seed()
    );

    // a normal-looking test image: residuals stay small
    let normal_test = noisy_map(&mut rng, "test_normal", None);
    let rm = bank.residual_map(&normal_test)?;
    println!("normal test image: max residual distance {:.4}", rm.max_distance());

    // an anomalous image: one patch pushed far from the normal manifold
    let defect_test = noisy_map(&mut rng, "test_defect", Some((27, 3.0)));
    let rm = bank.residual_map(&defect_test)?;
    let worst = rm
        .nearest_distances
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    println!(
        "defective test image: max residual distance {:.4} at patch {} (row {}, col {})",
        worst.1,
        worst.0,
        worst.0 / 8,
        worst.0 % 8
    );
    assert_eq!(worst.0, 27);

    // residual tensor ready for a conv head
    let tensor = rm.to_feature_tensor();
    println!("residual tensor shape: {:?}", tensor.dim());
    Ok(())
}
