//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewformer::autograd::{Tape, Var};
use viewformer::model::Mode;
use viewformer::{Matrix, Model, ModelConfig};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor so gradients near zero are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every entry of every input.
///
/// `f` builds a scalar on a fresh tape from leaves holding `inputs`.
pub fn check_gradients(inputs: &[Matrix], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |values: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).get(0, 0)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zero = Matrix::zeros(inputs[i].rows(), inputs[i].cols());
        let analytic = grads.get(*v).unwrap_or(&zero);
        for k in 0..inputs[i].len() {
            let x = inputs[i].data()[k];
            probe[i].data_mut()[k] = x + FD_STEP;
            let up = eval(&probe);
            probe[i].data_mut()[k] = x - FD_STEP;
            let down = eval(&probe);
            probe[i].data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    worst
}

/// Reduces `out` to a scalar with fixed pseudo-random weights, so that
/// gradients of constant-sum outputs (softmax rows) are not trivially zero.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.value(out).shape();
    let w = random_matrix(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), r, c, 1.0);
    let w = tape.leaf(w);
    let p = tape.mul(out, w);
    tape.sum(p)
}

/// Mean cross-entropy of `model` on `batch` in train mode, using a dropout
/// stream seeded by `seed`.
pub fn model_loss(
    model: &Model,
    batch: &[Matrix],
    labels: &[usize],
    seed: u64,
) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let refs: Vec<&Matrix> = batch.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = model
        .forward_batch(&mut tape, &bound, &refs, Mode::Train, &mut rng)
        .unwrap();
    let loss = tape.cross_entropy(out.logits, labels).unwrap();
    let vars = bound.vars().to_vec();
    (tape, loss, vars)
}

/// Worst relative error over every parameter scalar of `model`.
pub fn check_model_gradients(model: &Model, batch: &[Matrix], labels: &[usize]) -> f64 {
    let (tape, loss, vars) = model_loss(model, batch, labels, 1);
    let grads = tape.backward(loss).unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.params().ids().collect();
    for (id, var) in ids.into_iter().zip(vars) {
        let analytic = grads.get(var).cloned().unwrap_or_else(|| {
            let m = model.params().get(id);
            Matrix::zeros(m.rows(), m.cols())
        });
        for k in 0..analytic.len() {
            let x = model.params().get(id).data()[k];
            probe.params_mut().get_mut(id).data_mut()[k] = x + FD_STEP;
            let (t, l, _) = model_loss(&probe, batch, labels, 1);
            let up = t.value(l).get(0, 0);
            probe.params_mut().get_mut(id).data_mut()[k] = x - FD_STEP;
            let (t, l, _) = model_loss(&probe, batch, labels, 1);
            let down = t.value(l).get(0, 0);
            probe.params_mut().get_mut(id).data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    worst
}

/// Small model used by the structural tests.
pub fn tiny_config(dim_in: usize, blocks: usize) -> ModelConfig {
    ModelConfig {
        dim_in,
        dim_view: 8,
        num_blocks: blocks,
        num_heads: 2,
        mlp_ratio: 2,
        dropout_rate: 0.0,
        num_classes: 3,
        decoder_depth: 2,
        decoder_hidden: 8,
        max_views: 8,
        ..ModelConfig::default()
    }
}

/// Random model with every parameter jittered and non-trivial running
/// statistics, so no path sits at its initial symmetric value.
pub fn perturbed_model(config: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    for r in model.running_stats_mut() {
        for m in &mut r.mean {
            *m = rng.random_range(-0.5..0.5);
        }
        for v in &mut r.var {
            *v = rng.random_range(0.5..2.0);
        }
    }
    model
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}
