//! The vanilla relation baseline on a separable toy problem.
//!
//! The scorer sees stacked (support, query) residual maps and learns a
//! same-class score with class-weighted binary cross-entropy (positive
//! weight C-1). Support is the first feature of each class; every other
//! feature queries against it.
//!
//! Run with: cargo run --example relation_baseline_toy

use anoclass::relation::{
    classify_vanilla, train_vanilla, RelationConfig, RelationHead, VanillaTrainConfig,
};
use anoclass::Result;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn feature(rng: &mut ChaCha8Rng, offset: f32) -> Array3<f32> {
    Array3::from_shape_fn((4, 16, 16), |_| offset + rng.random_range(-0.3f32..0.3))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // three classes, three shots each, separated by mean offset
    let offsets = [0.0f32, 2.0, -2.0];
    let mut features = Vec::new();
    for (class, &off) in offsets.iter().enumerate() {
        for _ in 0..3 {
            features.push((feature(&mut rng, off), class));
        }
    }

    let mut head = RelationHead::new(RelationConfig::toy(4, 5));
    let log = train_vanilla(
        &mut head,
        &features,
        &VanillaTrainConfig {
            lr: 1e-3,
            epochs: 45,
        },
    )?;
    println!(
        "trained {} epochs, {} scored pairs per pass",
        log.epoch_accuracies.len(),
        log.pairs_per_epoch
    );
    println!(
        "train accuracy: first epoch {:.2}, last epoch {:.2}",
        log.epoch_accuracies.first().unwrap(),
        log.epoch_accuracies.last().unwrap()
    );

    // classify held-out queries against a 1-shot-per-class support set
    let support: Vec<_> = (0..3).map(|c| (features[c * 3].0.clone(), c)).collect();
    let mut correct = 0;
    let total = 30;
    for i in 0..total {
        let class = i % 3;
        let q = feature(&mut rng, offsets[class]);
        if classify_vanilla(&head, &support, &q)? == class {
            correct += 1;
        }
    }
    println!("held-out accuracy: {correct}/{total}");
    Ok(())
}
