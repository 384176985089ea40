//! Shuffles the views of a shape and shows the logits do not move, then
//! turns on position encodings and shows that they do.
//!
//! ```text
//! cargo run --example permutation_invariance
//! ```

use std::error::Error;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use viewformer::{Matrix, Model, ModelConfig};

fn small(position: bool) -> ModelConfig {
    ModelConfig {
        dim_in: 12,
        dim_view: 16,
        num_blocks: 2,
        num_heads: 4,
        num_classes: 5,
        decoder_hidden: 24,
        use_position_encoding: position,
        ..ModelConfig::default()
    }
}

fn max_logit_shift(
    model: &Model,
    views: &Matrix,
    rng: &mut ChaCha8Rng,
) -> Result<f64, Box<dyn Error>> {
    let base = model.predict_features(views)?;
    let mut perm: Vec<usize> = (0..views.rows()).collect();
    perm.shuffle(rng);
    let shuffled = model.predict_features(&views.permute_rows(&perm))?;
    Ok(base
        .logits
        .iter()
        .zip(&shuffled.logits)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Returns the logit shift without and with position encodings.
pub fn run_example(seed: u64) -> Result<(f64, f64), Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = Matrix::from_vec(
        6,
        12,
        (0..72).map(|i| ((i * 7 % 13) as f64 - 6.0) / 4.0).collect(),
    )?;
    let plain = max_logit_shift(&Model::new(small(false), seed)?, &views, &mut rng)?;
    let positional = max_logit_shift(&Model::new(small(true), seed)?, &views, &mut rng)?;
    Ok((plain, positional))
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    let (plain, positional) = run_example(7)?;
    println!("max logit change after shuffling views: {plain:.3e}");
    println!("same, with position encodings:          {positional:.3e}");
    Ok(())
}
