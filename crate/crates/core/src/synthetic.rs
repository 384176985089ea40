//! Desk-scale multi-view classification task.
//!
//! Every class owns a multiset of `M` "aspect" prototypes and a shape of that
//! class shows each aspect once, in random order, with isotropic Gaussian
//! noise. Each individual aspect also belongs to at least one other class, so
//! a single view cannot determine the class; the full multiset can.
//!
//! With at least three classes and seven views per shape the aspects are
//! laid out so that order-free pooling of linear features carries no class
//! information either:
//!
//! - `M - 4` shared *frame* aspects form a regular simplex centred at the
//!   origin and appear in every class;
//! - class `c` adds the pairs `±p_c` and `±p_{c+1}` (indices mod `K`), all
//!   strictly inside the simplex.
//!
//! The column mean of a shape is then the same for every class, and the
//! column max along any direction is attained on the frame, so adapter plus
//! max/mean pooling alone is at chance; recognising which interior points are
//! present needs per-view nonlinearity and view interaction. Smaller
//! configurations fall back to layouts that keep the sharing property only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::ViewFeatureSet;
use crate::tensor::Matrix;

/// Circumradius scale of the frame simplex.
const FRAME_SCALE: f64 = 5.0;
/// Interior points sit at this fraction of the simplex inradius.
const INTERIOR_FRACTION: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub shapes_per_class: usize,
    pub views: usize,
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
    /// Fraction of each class's shapes placed in the training split.
    pub train_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            shapes_per_class: 50,
            views: 8,
            dim: 32,
            noise: 0.1,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

/// How the aspect prototypes were arranged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Shared simplex frame plus class-specific interior pairs.
    Frame,
    /// Cyclic windows over a pool of random prototypes.
    Window,
    /// Two classes sharing both prototypes with different multiplicities.
    TwoClass,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub train: Vec<ViewFeatureSet>,
    pub test: Vec<ViewFeatureSet>,
    /// One prototype per row.
    pub prototypes: Matrix,
    /// Prototype indices making up each class (a multiset, sorted).
    pub class_aspects: Vec<Vec<usize>>,
    pub layout: Layout,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    let (k, m) = (cfg.num_classes, cfg.views);
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "aspect sharing needs at least 2 classes, got {k}"
        )));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 views per shape, got {m}"
        )));
    }
    if k == 2 && m < 3 {
        return Err(Error::InvalidArgument(
            "two classes with two views cannot share every aspect and stay distinct".into(),
        ));
    }
    if cfg.dim == 0 || cfg.shapes_per_class == 0 {
        return Err(Error::InvalidArgument(
            "dim and shapes_per_class must be positive".into(),
        ));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "invalid noise {}",
            cfg.noise
        )));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::InvalidArgument(
            "train_fraction must be in [0, 1]".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frame_vertices = m.saturating_sub(4);
    let (layout, prototypes, mut class_aspects) =
        if k >= 3 && frame_vertices >= 3 && cfg.dim >= frame_vertices {
            frame_layout(k, frame_vertices, cfg.dim, &mut rng)
        } else if k >= 3 {
            window_layout(k, m, cfg.dim, &mut rng)
        } else {
            two_class_layout(m, cfg.dim, &mut rng)
        };
    for a in &mut class_aspects {
        a.sort_unstable();
    }

    let noise = Normal::new(0.0, cfg.noise).expect("finite noise");
    let n_train = (cfg.train_fraction * cfg.shapes_per_class as f64).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, aspects) in class_aspects.iter().enumerate() {
        for s in 0..cfg.shapes_per_class {
            let mut order = aspects.clone();
            order.shuffle(&mut rng);
            let mut features = Matrix::zeros(m, cfg.dim);
            for (row, &a) in order.iter().enumerate() {
                for (col, v) in features.row_mut(row).iter_mut().enumerate() {
                    *v = prototypes.get(a, col) + noise.sample(&mut rng);
                }
            }
            let shape = ViewFeatureSet {
                shape_id: format!("c{c:02}_s{s:03}"),
                features,
                label: c,
                sublabel: Some(c),
            };
            if s < n_train {
                train.push(shape);
            } else {
                test.push(shape);
            }
        }
    }
    Ok(SyntheticDataset {
        train,
        test,
        prototypes,
        class_aspects,
        layout,
    })
}

fn frame_layout(
    k: usize,
    vertices: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> (Layout, Matrix, Vec<Vec<usize>>) {
    let n = vertices as f64;
    let mut protos = Matrix::zeros(vertices + 2 * k, dim);
    // regular simplex: scaled basis vectors minus their centroid
    for v in 0..vertices {
        for c in 0..vertices {
            let e = if c == v { 1.0 } else { 0.0 };
            protos.set(v, c, FRAME_SCALE * (e - 1.0 / n));
        }
    }
    let inradius = FRAME_SCALE / (n * (n - 1.0)).sqrt();
    let radius = INTERIOR_FRACTION * inradius;

    // interior directions spread by greedy farthest-point selection among
    // random unit vectors in the simplex's subspace, counting antipodes
    let candidates: Vec<Vec<f64>> = (0..64 * k)
        .map(|_| {
            let mut u: Vec<f64> = (0..vertices).map(|_| rng.sample(StandardNormal)).collect();
            let mean = u.iter().sum::<f64>() / n;
            u.iter_mut().for_each(|x| *x -= mean);
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            u
        })
        .collect();
    let mut chosen: Vec<Vec<f64>> = vec![candidates[0].clone()];
    while chosen.len() < k {
        let best = candidates
            .iter()
            .map(|cand| {
                let gap = chosen
                    .iter()
                    .flat_map(|u| {
                        let d_plus: f64 = cand.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum();
                        let d_minus: f64 = cand.iter().zip(u).map(|(a, b)| (a + b).powi(2)).sum();
                        [d_plus, d_minus]
                    })
                    .fold(f64::INFINITY, f64::min);
                (gap, cand)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, c)| c.clone())
            .unwrap();
        chosen.push(best);
    }
    for (c, u) in chosen.iter().enumerate() {
        for (j, x) in u.iter().enumerate() {
            protos.set(vertices + 2 * c, j, radius * x);
            protos.set(vertices + 2 * c + 1, j, -radius * x);
        }
    }
    let classes = (0..k)
        .map(|c| {
            let next = (c + 1) % k;
            let mut a: Vec<usize> = (0..vertices).collect();
            a.extend([
                vertices + 2 * c,
                vertices + 2 * c + 1,
                vertices + 2 * next,
                vertices + 2 * next + 1,
            ]);
            a
        })
        .collect();
    (Layout::Frame, protos, classes)
}

fn random_prototypes(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut protos = Matrix::zeros(count, dim);
    for r in 0..count {
        let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (o, x) in protos.row_mut(r).iter_mut().zip(&row) {
            *o = FRAME_SCALE * x / norm;
        }
    }
    protos
}

fn window_layout(
    k: usize,
    m: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> (Layout, Matrix, Vec<Vec<usize>>) {
    // windows of length m over a cycle longer than m are pairwise distinct;
    // with k >= 3 every pool entry lands in at least two windows
    let pool = k.max(m + 1);
    let protos = random_prototypes(pool, dim, rng);
    let classes = (0..k)
        .map(|c| (0..m).map(|j| (c + j) % pool).collect())
        .collect();
    (Layout::Window, protos, classes)
}

fn two_class_layout(
    m: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> (Layout, Matrix, Vec<Vec<usize>>) {
    let protos = random_prototypes(2, dim, rng);
    let mut a = vec![0; m - 1];
    a.push(1);
    let mut b = vec![1; m - 1];
    b.push(0);
    (Layout::TwoClass, protos, vec![a, b])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_infeasible_requests() {
        for (k, m) in [(1, 8), (0, 8), (5, 1), (2, 2)] {
            let cfg = SyntheticConfig {
                num_classes: k,
                views: m,
                ..SyntheticConfig::default()
            };
            assert!(generate_synthetic(&cfg).is_err(), "k={k} m={m}");
        }
    }

    #[test]
    fn every_aspect_is_shared_and_classes_distinct() {
        for (k, m) in [(10, 8), (3, 7), (4, 3), (12, 4), (2, 3), (3, 2)] {
            let cfg = SyntheticConfig {
                num_classes: k,
                views: m,
                shapes_per_class: 1,
                ..SyntheticConfig::default()
            };
            let ds = generate_synthetic(&cfg).unwrap();
            let n_protos = ds.prototypes.rows();
            for p in 0..n_protos {
                let owners = ds.class_aspects.iter().filter(|a| a.contains(&p)).count();
                assert!(owners != 1, "k={k} m={m}: aspect {p} has a single owner");
            }
            for i in 0..k {
                assert_eq!(ds.class_aspects[i].len(), m);
                for j in 0..i {
                    assert_ne!(ds.class_aspects[i], ds.class_aspects[j]);
                }
            }
        }
    }

    #[test]
    fn frame_layout_balances_means() {
        let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
        assert_eq!(ds.layout, Layout::Frame);
        let dim = ds.prototypes.cols();
        let sums: Vec<Vec<f64>> = ds
            .class_aspects
            .iter()
            .map(|a| {
                (0..dim)
                    .map(|c| a.iter().map(|&p| ds.prototypes.get(p, c)).sum())
                    .collect()
            })
            .collect();
        for s in &sums[1..] {
            for (x, y) in s.iter().zip(&sums[0]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let b = generate_synthetic(&SyntheticConfig::default()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_synthetic(&SyntheticConfig {
            seed: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_sizes() {
        let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
        assert_eq!(ds.train.len(), 400);
        assert_eq!(ds.test.len(), 100);
    }
}
