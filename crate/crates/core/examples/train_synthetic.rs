//! Trains the full model and the encoder-free ablation on the synthetic
//! multi-view task and compares their test accuracy.
//!
//! ```text
//! cargo run --release --example train_synthetic [epochs]
//! ```

use std::error::Error;
use std::time::Instant;

use viewformer::synthetic::{generate_synthetic, SyntheticConfig};
use viewformer::training::{train_with, TrainConfig};
use viewformer::{Model, ModelConfig};

pub fn desk_model(num_blocks: usize) -> ModelConfig {
    ModelConfig {
        dim_in: 32,
        dim_view: 64,
        num_blocks,
        num_heads: 4,
        mlp_ratio: 2,
        dropout_rate: 0.1,
        num_classes: 10,
        decoder_depth: 2,
        decoder_hidden: 128,
        ..ModelConfig::default()
    }
}

pub fn desk_training(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

pub fn run_example(epochs: usize, verbose: bool) -> Result<(f64, f64), Box<dyn Error>> {
    let data = generate_synthetic(&SyntheticConfig::default())?;
    let mut scores = Vec::new();
    for blocks in [2, 0] {
        let start = Instant::now();
        let mut model = Model::new(desk_model(blocks), 0)?;
        let outcome = train_with(
            &mut model,
            &data.train,
            Some(&data.test),
            &desk_training(epochs),
            |r| {
                if verbose && (r.epoch % 10 == 9 || r.epoch == 0) {
                    println!("blocks={blocks}\t{}", r.log_line());
                }
            },
        )?;
        println!(
            "blocks={blocks}: best test instance accuracy {:.4} (epoch {}), {:.1}s",
            outcome.best_instance_accuracy,
            outcome.best_epoch,
            start.elapsed().as_secs_f64()
        );
        scores.push(outcome.best_instance_accuracy);
    }
    Ok((scores[0], scores[1]))
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    let epochs = std::env::args()
        .nth(1)
        .map(|a| a.parse())
        .transpose()?
        .unwrap_or(100);
    let (full, ablated) = run_example(epochs, true)?;
    println!("encoder gain: {:+.1} points", 100.0 * (full - ablated));
    Ok(())
}
