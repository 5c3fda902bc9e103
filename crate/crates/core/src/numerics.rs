//! Dense row-major matrices, activations, batch normalization and a
//! central-difference gradient estimator.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Matrix::new".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape(
                "Matrix::from_rows",
                format!("row of {cols}"),
                format!("row of {}", bad.len()),
            ));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        Matrix::new(1, values.len(), values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `out += self · x`
    pub fn mul_vec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += selfᵀ · y`
    pub fn mul_vec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }

    /// `self += a ⊗ b`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols;
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            for (w, &bc) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("matmul output".into()));
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

pub fn sigmoid_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = sigmoid(*x));
}

pub fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if [&self.beta, &self.running_mean, &self.running_var]
            .iter()
            .any(|v| v.len() != n)
        {
            return Err(Error::Format {
                kind: "batch-norm",
                reason: "per-feature vectors differ in length".into(),
            });
        }
        if !(self.epsilon > 0.0) || self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Format {
                kind: "batch-norm",
                reason: "epsilon must be > 0 and running variances >= 0".into(),
            });
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Format {
                kind: "batch-norm",
                reason: format!("momentum {} outside (0, 1)", self.momentum),
            });
        }
        Ok(())
    }

    /// Gradients of the scale/shift parameters given upstream gradients of the
    /// normalized output.
    pub fn param_grads(&self, cache: &BnCache, upstream: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let n = self.features();
        let mut dgamma = vec![0.0; n];
        let mut dbeta = vec![0.0; n];
        for r in 0..upstream.rows() {
            for (j, (&dy, &xh)) in upstream.row(r).iter().zip(cache.x_hat.row(r)).enumerate() {
                dgamma[j] += dy * xh;
                dbeta[j] += dy;
            }
        }
        (dgamma, dbeta)
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    /// Normalized input before scale and shift.
    pub x_hat: Matrix,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnOutput {
    pub normalized: Matrix,
    pub cache: BnCache,
    /// Running statistics after this batch; `None` in inference mode.
    pub updated: Option<BatchNormState>,
}

pub fn batchnorm_forward(batch: &Matrix, state: &BatchNormState, mode: BnMode) -> Result<BnOutput> {
    let (rows, cols) = batch.shape();
    if rows == 0 {
        return Err(Error::Empty("batchnorm_forward"));
    }
    if cols != state.features() {
        return Err(Error::shape(
            "batchnorm_forward",
            format!("{cols} batch features"),
            format!("{} state features", state.features()),
        ));
    }
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; cols];
            for r in 0..rows {
                for (m, x) in mean.iter_mut().zip(batch.row(r)) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; cols];
            for r in 0..rows {
                for ((v, x), m) in var.iter_mut().zip(batch.row(r)).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            (mean, var)
        }
        BnMode::Infer => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
    let mut x_hat = Matrix::zeros(rows, cols);
    let mut normalized = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for j in 0..cols {
            let xh = (batch.get(r, j) - mean[j]) * inv_std[j];
            x_hat.set(r, j, xh);
            normalized.set(r, j, xh * state.gamma[j] + state.beta[j]);
        }
    }
    let updated = match mode {
        BnMode::Train => {
            let m = state.momentum;
            let mut next = state.clone();
            for j in 0..cols {
                next.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mean[j];
                next.running_var[j] = (1.0 - m) * state.running_var[j] + m * var[j];
            }
            Some(next)
        }
        BnMode::Infer => None,
    };
    Ok(BnOutput {
        normalized,
        cache: BnCache { x_hat, inv_std },
        updated,
    })
}

/// Central-difference gradient of `f` at `at`, one entry at a time.
pub fn finite_diff_grad<F>(mut f: F, at: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    let mut point = at.clone();
    let grad = finite_diff_slice(
        |values| {
            point.data_mut().copy_from_slice(values);
            f(&point)
        },
        at.data(),
        h,
    )?;
    Matrix::new(at.rows(), at.cols(), grad)
}

/// Slice form of [`finite_diff_grad`].
pub fn finite_diff_slice<F>(mut f: F, at: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} must be > 0")));
    }
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        x[i] = at[i] + h;
        let plus = f(&x);
        x[i] = at[i] - h;
        let minus = f(&x);
        x[i] = at[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn identity_times_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 3, 3);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 7, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatch_names_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(tanh(0.0), 0.0);
        for x in [-30.0, -3.0, -0.1, 0.4, 8.0, 700.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
            assert!(sigmoid(x) >= 0.0 && sigmoid(x) <= 1.0);
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-50.0, 0.0, 3.0, 600.0] {
            for p in softmax(&[c, c, c]).unwrap() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let direct: Vec<f64> = {
            let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        };
        for (a, b) in softmax(&[1.0, 2.0, 3.0]).unwrap().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn batchnorm_constant_column_is_zero() {
        let batch = Matrix::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let out = batchnorm_forward(&batch, &BatchNormState::new(2), BnMode::Train).unwrap();
        for r in 0..3 {
            assert_eq!(out.normalized.get(r, 0), 0.0);
        }
    }

    #[test]
    fn batchnorm_train_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_matrix(&mut rng, 6, 4);
        let state = BatchNormState::new(4);
        let out = batchnorm_forward(&batch, &state, BnMode::Train).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..6).map(|r| out.normalized.get(r, j)).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        let next = out.updated.unwrap();
        assert!(next.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_infer_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = random_matrix(&mut rng, 4, 3);
        let state = BatchNormState {
            gamma: vec![1.5, -0.5, 2.0],
            beta: vec![0.1, 0.2, -0.3],
            running_mean: vec![0.3, -0.2, 1.0],
            running_var: vec![0.5, 2.0, 0.01],
            epsilon: 1e-5,
            momentum: 0.1,
        };
        let out = batchnorm_forward(&batch, &state, BnMode::Infer).unwrap();
        assert!(out.updated.is_none());
        for r in 0..4 {
            for j in 0..3 {
                let expect = (batch.get(r, j) - state.running_mean[j])
                    / (state.running_var[j] + state.epsilon).sqrt()
                    * state.gamma[j]
                    + state.beta[j];
                assert!((out.normalized.get(r, j) - expect).abs() < 1e-12);
            }
        }
        let again = batchnorm_forward(&batch, &state, BnMode::Infer).unwrap();
        assert_eq!(again.normalized, out.normalized);
    }

    #[test]
    fn batchnorm_feature_mismatch() {
        let err = batchnorm_forward(&Matrix::zeros(2, 3), &BatchNormState::new(4), BnMode::Train);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn finite_diff_basic() {
        let x = Matrix::row_vector(vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|m| m.data().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 2.0).abs() < 1e-8);
        assert!((g.get(0, 1) - 4.0).abs() < 1e-8);
        let z = finite_diff_grad(|_| 4.2, &x, 1e-5).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(finite_diff_grad(|_| f64::NAN, &x, 1e-5).is_err());
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-700.0f64..700.0, 1..20)) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 0.0 && x.is_finite()));
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            for (a, b) in softmax(&v).unwrap().iter().zip(softmax(&shifted).unwrap()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn matmul_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 3, 4);
            let b = random_matrix(&mut rng, 4, 5);
            let c = random_matrix(&mut rng, 5, 2);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().map(|x| x.abs()).fold(1.0, f64::max);
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() / scale < 1e-9);
            }
        }
    }
}
