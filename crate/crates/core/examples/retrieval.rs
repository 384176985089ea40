//! Two-step retrieval on synthetic shapes: a class model builds the first
//! ranking, a subcategory model re-ranks it, and both are scored.
//!
//! The data has 20 synthetic classes; pairs of them are merged into 10
//! categories and the original class becomes the subcategory. Relevance is
//! scored both by category and by subcategory.
//!
//! ```text
//! cargo run --release --example retrieval [epochs]
//! ```

use std::collections::HashMap;
use std::error::Error;

use viewformer::retrieval::{
    aggregate, build_l1, rerank_l2, score_query, GroundTruth, MetricsReport,
};
use viewformer::synthetic::{generate_synthetic, SyntheticConfig};
use viewformer::training::{train, TrainConfig};
use viewformer::{Model, ModelConfig, ViewFeatureSet};

fn fit(
    shapes: &[ViewFeatureSet],
    num_classes: usize,
    epochs: usize,
) -> Result<Model, Box<dyn Error>> {
    let mut model = Model::new(
        ModelConfig {
            dim_in: 32,
            dim_view: 32,
            num_blocks: 1,
            num_heads: 4,
            num_classes,
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
    Ok(train(&mut model, shapes, None, &cfg)?.best_model)
}

pub struct Reports {
    pub l1: MetricsReport,
    pub l2: MetricsReport,
    pub l1_sub: MetricsReport,
    pub l2_sub: MetricsReport,
}

/// Category- and subcategory-level reports of both stages on the test split.
pub fn run_example(epochs: usize) -> Result<Reports, Box<dyn Error>> {
    let mut data = generate_synthetic(&SyntheticConfig {
        num_classes: 20,
        shapes_per_class: 20,
        ..SyntheticConfig::default()
    })?;
    for s in data.train.iter_mut().chain(data.test.iter_mut()) {
        s.sublabel = Some(s.label);
        s.label /= 2;
    }
    let class_model = fit(&data.train, 10, epochs)?;
    let sub_train: Vec<ViewFeatureSet> = data
        .train
        .iter()
        .map(|s| ViewFeatureSet {
            label: s.sublabel.unwrap(),
            ..s.clone()
        })
        .collect();
    let sub_model = fit(&sub_train, 20, epochs)?;

    let mut gt = GroundTruth::new();
    let mut gt_sub = GroundTruth::new();
    let mut corpus = Vec::new();
    let mut subs = HashMap::new();
    for s in &data.test {
        gt.insert(s.shape_id.clone(), s.label, s.sublabel);
        gt_sub.insert(s.shape_id.clone(), s.sublabel.unwrap(), None);
        corpus.push((s.shape_id.clone(), class_model.forward(s)?));
        subs.insert(s.shape_id.clone(), sub_model.forward(s)?.class());
    }
    let mut scores: [Vec<_>; 4] = Default::default();
    for (s, (id, pred)) in data.test.iter().zip(&corpus) {
        let l1 = build_l1(id, pred, &corpus);
        let l2 = rerank_l2(&l1, subs[id], &subs);
        let sub = s.sublabel.unwrap();
        scores[0].push((s.label, score_query(&l1, &gt)?));
        scores[1].push((s.label, score_query(&l2, &gt)?));
        scores[2].push((sub, score_query(&l1, &gt_sub)?));
        scores[3].push((sub, score_query(&l2, &gt_sub)?));
    }
    Ok(Reports {
        l1: aggregate(&scores[0])?,
        l2: aggregate(&scores[1])?,
        l1_sub: aggregate(&scores[2])?,
        l2_sub: aggregate(&scores[3])?,
    })
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    let epochs = std::env::args()
        .nth(1)
        .map(|a| a.parse())
        .transpose()?
        .unwrap_or(30);
    let r = run_example(epochs)?;
    println!("relevance by category");
    println!("L1\n{}L2\n{}", r.l1, r.l2);
    println!("relevance by subcategory");
    println!("L1\n{}L2\n{}", r.l1_sub, r.l2_sub);
    Ok(())
}
