//! Deterministic numerical kernel: dense row-major matrices, activations,
//! cross-entropy, Adam, a seedable xoshiro256** PRNG, and an independent
//! finite-difference gradient oracle.
//!
//! Storage is 32-bit IEEE-754; reductions (dot products, entropy sums, means)
//! accumulate in 64-bit with a fixed order so results are bit-stable across
//! runs, platforms, and thread counts. No BLAS, no SIMD intrinsics.

mod rng;

pub use rng::Rng;

use thiserror::Error;

/// Errors from the numerical kernel.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {context}: {left} vs {right}")]
    DimMismatch {
        context: &'static str,
        left: String,
        right: String,
    },
    #[error("index out of range: {context}: {index} >= {bound}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("data length {got} does not match {rows}x{cols}")]
    BadDataLength { rows: usize, cols: usize, got: usize },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major matrix of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadDataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Gaussian-initialized matrix, entries N(0, std^2).
    pub fn randn(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Standard matrix product with 64-bit accumulation.
    ///
    /// Each output row is accumulated sequentially over the inner dimension,
    /// so the reduction order is fixed regardless of platform or threading.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(NumericsError::DimMismatch {
                context: "matmul",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        let mut acc = vec![0.0f64; other.cols];
        for i in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let a_row = self.row(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                let a_ik = a_ik as f64;
                let b_row = other.row(k);
                for (a, &b) in acc.iter_mut().zip(b_row) {
                    *a += a_ik * b as f64;
                }
            }
            for (o, &a) in out.row_mut(i).iter_mut().zip(acc.iter()) {
                *o = a as f32;
            }
        }
        Ok(out)
    }

    /// `self^T * other`, accumulating over the shared row dimension.
    pub fn matmul_tn(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(NumericsError::DimMismatch {
                context: "matmul_tn",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut acc = vec![0.0f64; self.cols * other.cols];
        for i in 0..self.rows {
            let a_row = self.row(i);
            let b_row = other.row(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                let a_ik = a_ik as f64;
                let acc_row = &mut acc[k * other.cols..(k + 1) * other.cols];
                for (a, &b) in acc_row.iter_mut().zip(b_row) {
                    *a += a_ik * b as f64;
                }
            }
        }
        let mut out = Mat::zeros(self.cols, other.cols);
        for (o, &a) in out.data.iter_mut().zip(acc.iter()) {
            *o = a as f32;
        }
        Ok(out)
    }

    /// `self * other^T`; rows of both operands are contiguous dot products.
    pub fn matmul_nt(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(NumericsError::DimMismatch {
                context: "matmul_nt",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.set(i, j, dot_f64(a_row, other.row(j)) as f32);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Mat, scale: f32) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Mat, context: &'static str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumericsError::DimMismatch {
                context,
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }
}

/// Sequential 64-bit dot product of two f32 slices.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    acc
}

/// Numerically stable softmax with temperature; computed in 64-bit.
///
/// Entries are positive and sum to 1; invariant to additive shifts of `v`.
pub fn softmax(v: &[f32], temperature: f32) -> Vec<f32> {
    assert!(temperature > 0.0, "softmax temperature must be positive");
    if v.is_empty() {
        return Vec::new();
    }
    let max = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let t = temperature as f64;
    let exps: Vec<f64> = v.iter().map(|&x| ((x as f64 - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

/// 64-bit softmax over an f64 slice, used at loss boundaries.
pub fn softmax_f64(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits`, plus the gradient `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> Result<(f32, Mat)> {
    if logits.rows() != labels.len() {
        return Err(NumericsError::DimMismatch {
            context: "cross_entropy",
            left: format!("{} logit rows", logits.rows()),
            right: format!("{} labels", labels.len()),
        });
    }
    let n = logits.rows();
    let mut grad = Mat::zeros(n, logits.cols());
    let mut loss = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(NumericsError::IndexOutOfRange {
                context: "cross_entropy label",
                index: label,
                bound: logits.cols(),
            });
        }
        let row: Vec<f64> = logits.row(i).iter().map(|&x| x as f64).collect();
        let probs = softmax_f64(&row);
        loss -= probs[label].max(f64::MIN_POSITIVE).ln();
        let g = grad.row_mut(i);
        for (j, &p) in probs.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            g[j] = ((p - onehot) / n as f64) as f32;
        }
    }
    let loss = (loss / n as f64) as f32;
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite("cross_entropy"));
    }
    Ok((loss, grad))
}

/// Adam optimizer state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f32) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction; increments `state.step`.
pub fn adam_step(params: &mut Mat, grads: &Mat, state: &mut AdamState) -> Result<()> {
    if params.rows() != grads.rows() || params.cols() != grads.cols() {
        return Err(NumericsError::DimMismatch {
            context: "adam_step",
            left: format!("{}x{}", params.rows(), params.cols()),
            right: format!("{}x{}", grads.rows(), grads.cols()),
        });
    }
    if params.data().len() != state.m.len() {
        return Err(NumericsError::DimMismatch {
            context: "adam_step state",
            left: params.data().len().to_string(),
            right: state.m.len().to_string(),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = state.beta1 as f64;
    let b2 = state.beta2 as f64;
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let lr = state.lr as f64;
    let eps = state.eps as f64;
    for ((p, &g), (m, v)) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let g = g as f64;
        let m64 = b1 * *m as f64 + (1.0 - b1) * g;
        let v64 = b2 * *v as f64 + (1.0 - b2) * g * g;
        *m = m64 as f32;
        *v = v64 as f32;
        let m_hat = m64 / bc1;
        let v_hat = v64 / bc2;
        *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
    }
    Ok(())
}

/// Central-difference gradient oracle: `(f(x+h e_i) - f(x-h e_i)) / 2h`.
///
/// Independent of any backprop path; `f` is re-evaluated 2n times. The
/// divisor is the realized spread of the perturbed f32 coordinates, so
/// representation error of `x ± h` does not leak into the quotient.
pub fn finite_difference_gradient<F>(f: F, x: &[f32], h: f32) -> Vec<f64>
where
    F: Fn(&[f32]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let x_plus = probe[i];
        let fp = f(&probe);
        probe[i] = orig - h;
        let x_minus = probe[i];
        let fm = f(&probe);
        probe[i] = orig;
        let spread = x_plus as f64 - x_minus as f64;
        grad.push(if spread == 0.0 {
            0.0
        } else {
            (fp - fm) / spread
        });
    }
    grad
}

/// Relative error between two scalars, guarded against tiny denominators.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests;
