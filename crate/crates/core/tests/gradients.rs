mod common;

use common::{
    check_gradients, check_model_gradients, random_matrix, tiny_config, weighted_sum, GRAD_TOL,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewformer::autograd::{Tape, Var};
use viewformer::Matrix;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn x34(seed: u64) -> Matrix {
    random_matrix(&mut rng(seed), 3, 4, 2.0)
}

/// Entries kept at least 0.05 away from zero (relu kink).
fn away_from_zero(seed: u64) -> Matrix {
    x34(seed).map(|v| {
        if v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    })
}

/// `rows x cols` matrix whose columns are shuffles of well separated values.
/// Avoids max ties and the steep curvature of normalizing near-equal values.
fn spread_columns(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut r = rng(seed);
    let mut m = Matrix::zeros(rows, cols);
    for c in 0..cols {
        let base = r.random_range(-1.0..1.0);
        let mut order: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        for (k, &row) in order.iter().enumerate() {
            m.set(row, c, base + 0.5 * k as f64 + r.random_range(0.0..0.1));
        }
    }
    m
}

fn separated(seed: u64) -> Matrix {
    spread_columns(seed, 3, 4)
}

type UnaryOp = fn(&mut Tape, Var) -> Var;

fn check_unary(x: Matrix, seed: u64, op: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    check_gradients(&[x], |t, v| {
        let y = op(t, v[0]);
        weighted_sum(t, y, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_gradients(seed in any::<u64>()) {
        let b = random_matrix(&mut rng(seed ^ 1), 4, 3, 2.0);
        let e = check_gradients(&[x34(seed), b], |t, v| {
            let y = t.matmul(v[0], v[1]);
            weighted_sum(t, y, seed)
        });
        prop_assert!(e < GRAD_TOL, "rel err {e}");
    }

    #[test]
    fn matmul_nt_gradients(seed in any::<u64>()) {
        let e = check_gradients(&[x34(seed), x34(seed ^ 2)], |t, v| {
            let y = t.matmul_nt(v[0], v[1]);
            weighted_sum(t, y, seed)
        });
        prop_assert!(e < GRAD_TOL, "rel err {e}");
    }

    #[test]
    fn elementwise_binary_gradients(seed in any::<u64>()) {
        let row = random_matrix(&mut rng(seed ^ 3), 1, 4, 2.0);
        for which in 0..3 {
            let e = check_gradients(&[x34(seed), x34(seed ^ 4), row.clone()], |t, v| {
                let y = match which {
                    0 => t.add(v[0], v[1]),
                    1 => t.mul(v[0], v[1]),
                    _ => t.add_row(v[0], v[2]),
                };
                weighted_sum(t, y, seed)
            });
            prop_assert!(e < GRAD_TOL, "op {which}: rel err {e}");
        }
    }

    #[test]
    fn unary_smooth_gradients(seed in any::<u64>()) {
        let cases: [(&str, UnaryOp); 5] = [
            ("scale", |t, a| t.scale(a, -1.7)),
            ("softmax", |t, a| t.softmax_rows(a)),
            ("gelu", |t, a| t.gelu(a)),
            ("slice_cols", |t, a| t.slice_cols(a, 1, 2)),
            ("slice_rows", |t, a| t.slice_rows(a, 1, 2)),
        ];
        for (name, op) in cases {
            let e = check_unary(x34(seed), seed, op);
            prop_assert!(e < GRAD_TOL, "{name}: rel err {e}");
        }
    }

    #[test]
    fn relu_gradients(seed in any::<u64>()) {
        let e = check_unary(away_from_zero(seed), seed, |t, a| t.relu(a));
        prop_assert!(e < GRAD_TOL, "rel err {e}");
    }

    #[test]
    fn max_mean_pool_gradients(seed in any::<u64>()) {
        let e = check_unary(separated(seed), seed, |t, a| t.max_mean_pool(a));
        prop_assert!(e < GRAD_TOL, "rel err {e}");
    }

    #[test]
    fn dropout_gradients(seed in any::<u64>()) {
        let e = check_unary(x34(seed), seed, |t, a| {
            t.dropout(a, 0.3, &mut rng(seed)).unwrap()
        });
        prop_assert!(e < GRAD_TOL, "rel err {e}");
    }

    #[test]
    fn concat_gradients(seed in any::<u64>()) {
        let e = check_gradients(&[x34(seed), x34(seed ^ 5)], |t, v| {
            let a = t.concat_cols(&[v[0], v[1]]);
            let b = t.concat_rows(&[v[1], v[0]]);
            let s = weighted_sum(t, a, seed);
            let u = weighted_sum(t, b, seed ^ 6);
            t.add(s, u)
        });
        prop_assert!(e < GRAD_TOL, "rel err {e}");
    }

    #[test]
    fn normalization_gradients(seed in any::<u64>()) {
        let mut r = rng(seed ^ 7);
        let gamma = random_matrix(&mut r, 1, 4, 2.0);
        let beta = random_matrix(&mut r, 1, 4, 2.0);
        let mean: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..4).map(|_| r.random_range(0.5..2.0)).collect();
        for which in 0..3 {
            let x = match which {
                0 => spread_columns(seed, 4, 3).transpose(),
                1 => separated(seed),
                _ => x34(seed),
            };
            let e = check_gradients(&[x, gamma.clone(), beta.clone()], |t, v| {
                let y = match which {
                    0 => t.layer_norm(v[0], v[1], v[2], 1e-5),
                    1 => t.batch_norm(v[0], v[1], v[2], 1e-5).0,
                    _ => t.frozen_norm(v[0], &mean, &var, v[1], v[2], 1e-5),
                };
                weighted_sum(t, y, seed)
            });
            prop_assert!(e < GRAD_TOL, "norm {which}: rel err {e}");
        }
    }

    #[test]
    fn cross_entropy_gradients(seed in any::<u64>()) {
        let labels = [seed as usize % 4, (seed >> 8) as usize % 4, (seed >> 16) as usize % 4];
        let e = check_gradients(&[x34(seed)], |t, v| t.cross_entropy(v[0], &labels).unwrap());
        prop_assert!(e < GRAD_TOL, "rel err {e}");
    }
}

#[test]
fn sum_gradient_is_ones() {
    let e = check_gradients(&[x34(3)], |t, v| t.sum(v[0]));
    assert!(e < 1e-9);
}

#[test]
fn model_gradients_cover_toggles() {
    let mut r = rng(11);
    let batch: Vec<Matrix> = (0..3)
        .map(|i| random_matrix(&mut r, 2 + i, 5, 1.0))
        .collect();
    for (pos, cls) in [(true, false), (false, true)] {
        let cfg = viewformer::ModelConfig {
            use_position_encoding: pos,
            use_class_token: cls,
            ..tiny_config(5, 1)
        };
        let model = common::perturbed_model(cfg, 5);
        let e = check_model_gradients(&model, &batch, &[0, 2, 1]);
        assert!(e < GRAD_TOL, "pos={pos} cls={cls}: rel err {e}");
    }
}

// Batches of two are avoided: batch norm then maps each column to nearly
// +-1 and its curvature swamps a 1e-4 central difference.
#[test]
fn model_gradients_with_dropout() {
    let mut r = rng(12);
    let batch: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut r, 3, 5, 1.0)).collect();
    let cfg = viewformer::ModelConfig {
        dropout_rate: 0.2,
        decoder_depth: 3,
        ..tiny_config(5, 1)
    };
    let model = common::perturbed_model(cfg, 8);
    let e = check_model_gradients(&model, &batch, &[1, 0, 2]);
    assert!(e < GRAD_TOL, "rel err {e}");
}
