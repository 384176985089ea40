//! Trains briefly on synthetic data and prints the attention maps of one
//! shape, one row per query view.
//!
//! ```text
//! cargo run --release --example attention_maps [epochs]
//! ```

use std::error::Error;

use viewformer::cli::format_attention;
use viewformer::model::AttentionMap;
use viewformer::synthetic::{generate_synthetic, SyntheticConfig};
use viewformer::training::{train, TrainConfig};
use viewformer::{Model, ModelConfig};

pub fn run_example(epochs: usize) -> Result<Vec<AttentionMap>, Box<dyn Error>> {
    let data = generate_synthetic(&SyntheticConfig {
        shapes_per_class: 20,
        ..SyntheticConfig::default()
    })?;
    let mut model = Model::new(
        ModelConfig {
            dim_in: 32,
            dim_view: 32,
            num_blocks: 2,
            num_heads: 4,
            num_classes: 10,
            decoder_hidden: 64,
            ..ModelConfig::default()
        },
        0,
    )?;
    let cfg = TrainConfig {
        epochs,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &data.train, Some(&data.test), &cfg)?;
    let shape = &data.test[0];
    println!(
        "shape {} (label {}), model accuracy {:.2}",
        shape.shape_id, shape.label, outcome.best_instance_accuracy
    );
    Ok(outcome.best_model.export_attention(shape)?)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    let epochs = std::env::args()
        .nth(1)
        .map(|a| a.parse())
        .transpose()?
        .unwrap_or(10);
    print!("{}", format_attention(&run_example(epochs)?));
    Ok(())
}
