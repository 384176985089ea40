//! Prints the warm-restart cosine learning-rate schedule.
//!
//! ```text
//! cargo run --example lr_schedule
//! ```

use viewformer::training::{lr_at, TrainConfig};

/// `(epoch, lr)` at the start, warmup end, mid-cycle and end of each cycle.
pub fn run_example() -> Vec<(usize, f64)> {
    let cfg = TrainConfig::default();
    let mut out = Vec::new();
    for cycle in 0..cfg.epochs / cfg.restart_interval {
        let base = cycle * cfg.restart_interval;
        for e in [
            0,
            cfg.warmup_epochs - 1,
            cfg.restart_interval / 2,
            cfg.restart_interval - 1,
        ] {
            out.push((base + e, lr_at(base + e, &cfg)));
        }
    }
    out
}

#[allow(dead_code)]
fn main() {
    for (epoch, lr) in run_example() {
        let bar = "#".repeat((lr * 5e4).round() as usize);
        println!("{epoch:>4}  {lr:.3e}  {bar}");
    }
}
