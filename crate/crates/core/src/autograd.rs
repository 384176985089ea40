//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Each operation appends a node holding its forward value and a record of
//! its inputs. Nodes are only ever appended after their inputs, so the tape
//! is already in topological order and [`Tape::backward`] is a single reverse
//! sweep that visits every node once.
//!
//! ```
//! use viewformer::autograd::Tape;
//! use viewformer::tensor::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.5]]));
//! let sq = tape.mul(x, x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Dropout(Var, Matrix),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaxMeanPool(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Batch statistics observed by a training-mode batch norm, for updating
/// running estimates outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance over the batch.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.value(a), self.value(b)).expect("matmul shapes");
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul_nt(self.value(a), self.value(b)).expect("matmul_nt shapes");
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let r = r.data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shapes");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data).unwrap();
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// Per-row normalization; `gamma` and `beta` are `1 x D`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (means, inv_std) = tensor::row_stats(xv, eps);
        let mut xhat = xv.clone();
        for r in 0..xhat.rows() {
            for v in xhat.row_mut(r) {
                *v = (*v - means[r]) * inv_std[r];
            }
        }
        let out = self.affine_cols(&xhat, gamma, beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Per-column normalization over the rows of a batch (training-mode
    /// batch norm). Returns the batch statistics for running estimates.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        assert!(n >= 1, "batch norm on an empty batch");
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / n as f64).collect();
        let unbiased: Vec<f64> = if n > 1 {
            var.iter().map(|s| s / (n - 1) as f64).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for r in 0..n {
            for (c, v) in xhat.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
        let out = self.affine_cols(&xhat, gamma, beta);
        let var_ = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        (
            var_,
            BatchStats {
                mean,
                var: unbiased,
            },
        )
    }

    /// Per-column normalization with fixed statistics (eval-mode batch norm).
    pub fn frozen_norm(
        &mut self,
        x: Var,
        mean: &[f64],
        var: &[f64],
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        assert_eq!(mean.len(), xv.cols());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for r in 0..xhat.rows() {
            for (c, v) in xhat.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
        let out = self.affine_cols(&xhat, gamma, beta);
        self.push(
            out,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    fn affine_cols(&self, xhat: &Matrix, gamma: Var, beta: Var) -> Matrix {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), xhat.cols(), "norm gamma width");
        assert_eq!(b.len(), xhat.cols(), "norm beta width");
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = g[c] * *v + b[c];
            }
        }
        out
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Inverted dropout: each entry is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let mask_data = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mask = Matrix::from_vec(x.rows(), x.cols(), mask_data).unwrap();
        let data = x
            .data()
            .iter()
            .zip(mask.data())
            .map(|(v, m)| v * m)
            .collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data).unwrap();
        Ok(self.push(v, Op::Dropout(a, mask)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let mut v = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "slice_rows out of range");
        let idx: Vec<usize> = (start..start + len).collect();
        let v = x.select_rows(&idx);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row count");
                v.row_mut(r)[offset..offset + src.cols()].copy_from_slice(src.row(r));
                offset += src.cols();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.cols(), cols, "concat_rows column count");
            data.extend_from_slice(src.data());
            rows += src.rows();
        }
        let v = Matrix::from_vec(rows, cols, data).unwrap();
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Column max concatenated with column mean (`M x D -> 1 x 2D`).
    pub fn max_mean_pool(&mut self, a: Var) -> Var {
        let (v, argmax) = tensor::max_mean_pool(self.value(a));
        self.push(v, Op::MaxMeanPool(a, argmax))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} logit rows",
                labels.len(),
                z.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                z.cols()
            )));
        }
        let probs = tensor::softmax_rows(z);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    /// Propagates d(loss)/d(node) to every node the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = tensor::matmul_nt(g, self.value(*b)).unwrap();
                let db = tensor::matmul_tn(self.value(*a), g).unwrap();
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let da = tensor::matmul(g, self.value(*b)).unwrap();
                let db = tensor::matmul_tn(g, self.value(*a)).unwrap();
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, hadamard(g, y));
                accumulate(grads, *b, hadamard(g, x));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let (n, d) = xhat.shape();
                let mut dx = Matrix::zeros(n, d);
                for r in 0..n {
                    let (xr, gr) = (xhat.row(r), g.row(r));
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let k = inv_std[r] / d as f64;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = k * (d as f64 * dxhat[c] - s1 - xr[c] * s2);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, column_sums(&hadamard(g, xhat)));
                accumulate(grads, *beta, column_sums(g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let (n, d) = xhat.shape();
                let mut s1 = vec![0.0; d];
                let mut s2 = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        let dxh = g.get(r, c) * gam[c];
                        s1[c] += dxh;
                        s2[c] += dxh * xhat.get(r, c);
                    }
                }
                let mut dx = Matrix::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        let dxh = g.get(r, c) * gam[c];
                        let v = inv_std[c] / n as f64
                            * (n as f64 * dxh - s1[c] - xhat.get(r, c) * s2[c]);
                        dx.set(r, c, v);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, column_sums(&hadamard(g, xhat)));
                accumulate(grads, *beta, column_sums(g));
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
                        *v *= gam[c] * inv_std[c];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, column_sums(&hadamard(g, xhat)));
                accumulate(grads, *beta, column_sums(g));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = x.map(tensor::gelu_grad);
                accumulate(grads, *a, hadamard(g, &d));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                accumulate(grads, *a, hadamard(g, &d));
            }
            Op::Dropout(a, mask) => accumulate(grads, *a, hadamard(g, mask)),
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, dx);
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Matrix::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    accumulate(grads, p, dp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    let idx: Vec<usize> = (offset..offset + h).collect();
                    accumulate(grads, p, g.select_rows(&idx));
                    offset += h;
                }
            }
            Op::MaxMeanPool(a, argmax) => {
                let x = self.value(*a);
                let (m, d) = x.shape();
                let mut dx = Matrix::filled(m, d, 0.0);
                for c in 0..d {
                    let mean_g = g.get(0, d + c) / m as f64;
                    for r in 0..m {
                        dx.set(r, c, mean_g);
                    }
                    let r = argmax[c];
                    dx.set(r, c, dx.get(r, c) + g.get(0, c));
                }
                accumulate(grads, *a, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let upstream = g.get(0, 0) / labels.len() as f64;
                let mut dz = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dz.set(r, l, dz.get(r, l) - 1.0);
                }
                accumulate(grads, *logits, dz.scale(upstream));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).unwrap()
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
