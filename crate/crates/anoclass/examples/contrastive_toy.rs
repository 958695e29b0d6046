//! The contrastive classifier end to end on toy data: pseudo-class
//! pretraining with the early-stop rule, query-support pair generation,
//! shot-dependent fine-tuning, and mean-similarity classification.
//!
//! Run with: cargo run --example contrastive_toy

use anoclass::contrastive::{
    classify, finetune, make_pairs, pretrain, ContrastivePretrainConfig, EmbeddingConfig,
    EmbeddingNet, FinetuneConfig,
};
use anoclass::Result;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn feature(rng: &mut ChaCha8Rng, offset: f32) -> Array3<f32> {
    Array3::from_shape_fn((4, 16, 16), |_| offset + rng.random_range(-0.3f32..0.3))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    // pseudo-class pool: 12 classes of 4 items (stand-ins for generated
    // defect residuals)
    let mut pseudo = Vec::new();
    for class in 0..12usize {
        for _ in 0..4 {
            pseudo.push((feature(&mut rng, class as f32 * 1.5 - 8.0), class));
        }
    }

    let mut net = EmbeddingNet::new(EmbeddingConfig::toy(4, 9));
    let log = pretrain(
        &mut net,
        &pseudo,
        &ContrastivePretrainConfig {
            lr: 1e-3,
            seed: 1,
            max_iterations: 500,
            ..Default::default()
        },
    )?;
    println!(
        "pretraining: {} episodes, stopped early: {} (last accuracy {:.2})",
        log.episode_accuracies.len(),
        log.stopped_early,
        log.episode_accuracies.last().unwrap()
    );

    // two real classes, two shots each
    let offsets = [3.0f32, -3.0];
    let support: Vec<_> = (0..2)
        .flat_map(|c| {
            (0..2)
                .map(|_| (feature(&mut rng, offsets[c]), c))
                .collect::<Vec<_>>()
        })
        .collect();

    let pairs = make_pairs(&support, 2, 2)?;
    println!(
        "pair generation: {} batches, support pool size {}",
        pairs.len(),
        pairs[0].support_indices.len()
    );

    let tune = finetune(&mut net, &support, 2, &FinetuneConfig::default())?;
    println!(
        "fine-tuning: {} epochs ({} optimizer steps)",
        tune.epochs, tune.iterations
    );

    let mut correct = 0;
    let total = 20;
    for i in 0..total {
        let class = i % 2;
        let q = feature(&mut rng, offsets[class]);
        if classify(&net, &support, &q)? == class {
            correct += 1;
        }
    }
    println!("query accuracy: {correct}/{total}");
    Ok(())
}
