//! Writes a synthetic dataset as a feature file plus manifest, reads it
//! back and prints a summary of each split.
//!
//! ```text
//! cargo run --example feature_files [dir]
//! ```

use std::error::Error;
use std::path::Path;

use viewformer::io::{load_dataset, write_synthetic, Split};
use viewformer::synthetic::{generate_synthetic, SyntheticConfig};

/// Returns the number of shapes per split after the round trip.
pub fn run_example(dir: &Path) -> Result<Vec<(Split, usize)>, Box<dyn Error>> {
    let data = generate_synthetic(&SyntheticConfig {
        shapes_per_class: 10,
        ..SyntheticConfig::default()
    })?;
    let features = dir.join("synthetic.vsf");
    let manifest = dir.join("synthetic.tsv");
    write_synthetic(&data, &features, &manifest)?;

    let loaded = load_dataset(&features, &manifest)?;
    println!(
        "{}: {} classes, {}-dim views, subcategories: {}",
        loaded.name, loaded.num_classes, loaded.dim, loaded.has_subcategories
    );
    let mut counts = Vec::new();
    for (split, shapes) in &loaded.splits {
        let views: usize = shapes.iter().map(|s| s.num_views()).sum();
        println!("  {split}: {} shapes, {views} view rows", shapes.len());
        counts.push((*split, shapes.len()));
    }
    Ok(counts)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| ".".to_string());
    run_example(Path::new(&dir))?;
    Ok(())
}
