//! Minimal dense kernels: row-major matrices, batched affine layers,
//! activations, log-softmax, Adam and a finite-difference gradient checker.
//!
//! Backward passes are written by hand per layer; there is no autodiff graph.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rows per parallel work unit in the GEMM kernels.
const ROW_BLOCK: usize = 16;
/// Inner-dimension block, sized so a block of `B` rows stays in L2.
const K_BLOCK: usize = 128;
/// Below this many multiply-adds the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        self.data.iter_mut().for_each(|x| *x = f(*x));
    }

    /// Sum over rows, one entry per column.
    pub fn col_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Copies selected rows into a new matrix, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

fn check_inner(what: &str, a: (usize, usize), b: (usize, usize), ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{what}: {}x{} and {}x{} are incompatible",
            a.0, a.1, b.0, b.1
        )))
    }
}

/// `C = A B`, blocked over rows of `A` and the inner dimension.
///
/// Every output row accumulates its inner products in ascending inner index,
/// whichever thread computes it, so the result is independent of scheduling.
pub fn matmul<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    check_inner("matmul", a.shape(), b.shape(), a.cols == b.rows)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = DenseMatrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(c);
    }
    let kernel = |(block, c_block): (usize, &mut [T])| {
        let i0 = block * ROW_BLOCK;
        let rows_here = c_block.len() / n;
        for k0 in (0..k).step_by(K_BLOCK) {
            let k1 = (k0 + K_BLOCK).min(k);
            for ii in 0..rows_here {
                let a_row = a.row(i0 + ii);
                let c_row = &mut c_block[ii * n..(ii + 1) * n];
                for kk in k0..k1 {
                    let aik = a_row[kk];
                    if aik == T::zero() {
                        continue;
                    }
                    let b_row = b.row(kk);
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += aik * bv;
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.data
            .par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(kernel);
    } else {
        c.data
            .chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(kernel);
    }
    Ok(c)
}

/// `C = Aᵀ B` without materializing the transpose. Used for weight gradients.
pub fn matmul_tn<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    check_inner("matmul_tn", a.shape(), b.shape(), a.rows == b.rows)?;
    let (r, m, n) = (a.rows, a.cols, b.cols);
    let mut c = DenseMatrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(c);
    }
    let kernel = |(block, c_block): (usize, &mut [T])| {
        let i0 = block * ROW_BLOCK;
        let rows_here = c_block.len() / n;
        for rr in 0..r {
            let a_row = a.row(rr);
            let b_row = b.row(rr);
            for ii in 0..rows_here {
                let av = a_row[i0 + ii];
                if av == T::zero() {
                    continue;
                }
                let c_row = &mut c_block[ii * n..(ii + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    };
    if r * m * n >= PAR_THRESHOLD {
        c.data
            .par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(kernel);
    } else {
        c.data
            .chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(kernel);
    }
    Ok(c)
}

/// `C = A Bᵀ`. Used to propagate gradients back through a weight matrix.
pub fn matmul_nt<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    check_inner("matmul_nt", a.shape(), b.shape(), a.cols == b.cols)?;
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut c = DenseMatrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(c);
    }
    let kernel = |(i, c_row): (usize, &mut [T])| {
        let a_row = a.row(i);
        for (j, cv) in c_row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b.row(j)) {
                acc += x * y;
            }
            *cv = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.data.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        c.data.chunks_mut(n).enumerate().for_each(kernel);
    }
    Ok(c)
}

/// `Y = X W + b`, with `b` broadcast over the rows of `X`.
pub fn affine_forward<T: Scalar>(
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    b: &[T],
) -> Result<DenseMatrix<T>> {
    if b.len() != w.cols {
        return Err(Error::Dimension(format!(
            "bias of length {} for a layer with {} outputs",
            b.len(),
            w.cols
        )));
    }
    let mut y = matmul(x, w)?;
    for r in 0..y.rows {
        for (v, &bias) in y.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok(y)
}

pub struct AffineGrads<T> {
    pub dx: Option<DenseMatrix<T>>,
    pub dw: DenseMatrix<T>,
    pub db: Vec<T>,
}

/// Gradients of `Y = X W + b` given `dL/dY`. `dx` is skipped when the input
/// needs no gradient.
pub fn affine_backward<T: Scalar>(
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    dy: &DenseMatrix<T>,
    need_dx: bool,
) -> Result<AffineGrads<T>> {
    let dw = matmul_tn(x, dy)?;
    let db = dy.col_sums();
    let dx = if need_dx {
        Some(matmul_nt(dy, w)?)
    } else {
        None
    };
    Ok(AffineGrads { dx, dw, db })
}

pub fn tanh_inplace<T: Scalar>(m: &mut DenseMatrix<T>) {
    m.map_inplace(|v| v.tanh());
}

/// Turns `dL/dY` into `dL/dX` in place for `Y = tanh(X)`, given `Y`.
pub fn tanh_backward_inplace<T: Scalar>(y: &DenseMatrix<T>, dy: &mut DenseMatrix<T>) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        *d *= T::one() - v * v;
    }
}

/// Numerically stable log-softmax (max subtraction).
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    log_softmax_inplace(&mut out);
    out
}

pub fn log_softmax_inplace<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &x in v.iter() {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    v.iter_mut().for_each(|x| *x -= lse);
}

/// `log Σ exp(v)`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let mut sum = T::zero();
    for &x in v {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    log_softmax(logits).into_iter().map(|v| v.exp()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam moments. Tensors are addressed by position, so the
/// caller must pass parameters in the same order on every step.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

/// One tensor handed to the optimizer.
pub struct ParamSlot<'a, T> {
    pub name: &'a str,
    pub value: &'a mut [T],
    pub grad: &'a [T],
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    /// Bias-corrected Adam update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_, T>]) -> Result<()> {
        if slots.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, step received {}",
                self.m.len(),
                slots.len()
            )));
        }
        for (i, slot) in slots.iter().enumerate() {
            if slot.value.len() != self.m[i].len() || slot.grad.len() != slot.value.len() {
                return Err(Error::Dimension(format!(
                    "parameter `{}`: value {}, grad {}, moments {}",
                    slot.name,
                    slot.value.len(),
                    slot.grad.len(),
                    self.m[i].len()
                )));
            }
            if let Some(pos) = slot.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite gradient in `{}` at index {pos}",
                    slot.name
                )));
            }
        }
        self.t += 1;
        let cfg = self.config;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let step = self.t as i32;
        let bc1 = T::one() - b1.powi(step);
        let bc2 = T::one() - b2.powi(step);
        for (i, slot) in slots.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..slot.value.len() {
                let g = slot.grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                slot.value[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Central finite-difference check of an analytic gradient.
///
/// Returns the maximum over coordinates of
/// `|g_fd - g| / (|g_fd| + |g| + 1e-8)`.
pub fn grad_check<T: Scalar>(mut f: impl FnMut(&[T]) -> T, analytic: &[T], point: &[T], h: T) -> T {
    assert_eq!(
        analytic.len(),
        point.len(),
        "gradient and point lengths differ"
    );
    let mut x = point.to_vec();
    let two = T::lit(2.0);
    let floor = T::lit(1e-8);
    let mut worst = T::zero();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let fd = (up - down) / (two * h);
        let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs() + floor);
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix<f64> {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> DenseMatrix<f64> {
        let mut c = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn transpose(a: &DenseMatrix<f64>) -> DenseMatrix<f64> {
        DenseMatrix::from_fn(a.cols(), a.rows(), |r, c| a.get(c, r))
    }

    fn max_abs_diff(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn affine_identity_input_returns_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(4, 3, &mut rng);
        let y = affine_forward(&DenseMatrix::identity(4), &w, &[0.0; 3]).unwrap();
        assert_eq!(y, w);
    }

    #[test]
    fn affine_scalar_case() {
        let x = DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap();
        let w = DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap();
        let y = affine_forward(&x, &w, &[1.0]).unwrap();
        assert_eq!(y.as_slice(), &[7.0]);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(4, 5, &mut rng);
        let w = random(5, 3, &mut rng);
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = affine_forward(&x, &w, &b).unwrap();
        let mut expect = naive_matmul(&x, &w);
        for r in 0..4 {
            for c in 0..3 {
                expect.set(r, c, expect.get(r, c) + b[c]);
            }
        }
        assert!(max_abs_diff(&y, &expect) < 1e-12);
    }

    #[test]
    fn blocked_kernels_match_naive_on_large_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(37, 300, &mut rng);
        let b = random(300, 41, &mut rng);
        assert!(max_abs_diff(&matmul(&a, &b).unwrap(), &naive_matmul(&a, &b)) < 1e-10);
        let c = random(37, 41, &mut rng);
        let tn = matmul_tn(&a, &c).unwrap();
        assert!(max_abs_diff(&tn, &naive_matmul(&transpose(&a), &c)) < 1e-10);
        let d = random(29, 300, &mut rng);
        let nt = matmul_nt(&a, &d).unwrap();
        assert!(max_abs_diff(&nt, &naive_matmul(&a, &transpose(&d))) < 1e-10);
    }

    #[test]
    fn kernels_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(100, 200, &mut rng);
        let b = random(200, 50, &mut rng);
        let first = matmul(&a, &b).unwrap();
        for _ in 0..3 {
            assert_eq!(first.as_slice(), matmul(&a, &b).unwrap().as_slice());
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = DenseMatrix::<f64>::zeros(2, 3);
        let b = DenseMatrix::<f64>::zeros(4, 2);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(
            affine_forward(&a, &DenseMatrix::zeros(3, 2), &[0.0; 3]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn log_softmax_cases() {
        let v = log_softmax(&[0.5f64; 4]);
        for x in &v {
            assert!((x - 0.25f64.ln()).abs() < 1e-15);
        }
        let v = log_softmax(&[0.0f64, 3f64.ln()]);
        assert!((v[0] - 0.25f64.ln()).abs() < 1e-12);
        assert!((v[1] - 0.75f64.ln()).abs() < 1e-12);

        let x = [0.3f64, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 1000.0).collect();
        let a = log_softmax(&x);
        let b = log_softmax(&shifted);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        let total: f64 = a.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_handles_negative_infinity() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[f64::NEG_INFINITY, 1.5]);
        assert_eq!(v, 1.5);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![1.0f64, -2.0];
        let g = vec![0.0; 2];
        let mut st = AdamState::new(AdamConfig::default(), &[2]);
        st.step(&mut [ParamSlot {
            name: "p",
            value: &mut p,
            grad: &g,
        }])
        .unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1, update = lr / (1 + eps).
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![0.5f64];
        let mut st = AdamState::new(cfg, &[1]);
        st.step(&mut [ParamSlot {
            name: "p",
            value: &mut p,
            grad: &[1.0],
        }])
        .unwrap();
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((0.5 - p[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_identical_tensors_get_identical_updates() {
        let mut a = vec![0.1f64, 0.2, 0.3];
        let mut b = a.clone();
        let g = vec![0.5, -0.25, 2.0];
        let mut st = AdamState::new(AdamConfig::default(), &[3, 3]);
        for _ in 0..5 {
            st.step(&mut [
                ParamSlot {
                    name: "a",
                    value: &mut a,
                    grad: &g,
                },
                ParamSlot {
                    name: "b",
                    value: &mut b,
                    grad: &g,
                },
            ])
            .unwrap();
        }
        assert_eq!(a, b);
        assert!(st.v.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_rejects_non_finite_gradient_and_names_it() {
        let mut p = vec![1.0f64];
        let mut st = AdamState::new(AdamConfig::default(), &[1]);
        let err = st
            .step(&mut [ParamSlot {
                name: "dec_w2",
                value: &mut p,
                grad: &[f64::NAN],
            }])
            .unwrap_err();
        assert!(matches!(&err, Error::Diverged(m) if m.contains("dec_w2")));
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn grad_check_polynomial_and_constant() {
        let err = grad_check(|x: &[f64]| x[0] * x[0], &[6.0], &[3.0], 1e-5);
        assert!(err < 1e-8, "{err}");
        let err = grad_check(|_: &[f64]| 4.2, &[0.0, 0.0], &[1.0, -1.0], 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_affine_tanh_head() {
        // f(w) = Σ_j v_j tanh((x W + b)_j) for a single row x.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(1, 4, &mut rng);
        let w = random(4, 3, &mut rng);
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let head: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |wv: &[f64]| {
            let wm = DenseMatrix::from_vec(4, 3, wv.to_vec()).unwrap();
            let mut y = affine_forward(&x, &wm, &b).unwrap();
            tanh_inplace(&mut y);
            y.row(0).iter().zip(&head).map(|(a, c)| a * c).sum::<f64>()
        };
        let mut y = affine_forward(&x, &w, &b).unwrap();
        tanh_inplace(&mut y);
        let mut dy = DenseMatrix::from_vec(1, 3, head.clone()).unwrap();
        tanh_backward_inplace(&y, &mut dy);
        let grads = affine_backward(&x, &w, &dy, true).unwrap();
        let err = grad_check(eval, grads.dw.as_slice(), w.as_slice(), 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn generic_over_f32() {
        let a = DenseMatrix::<f32>::identity(3);
        let b = DenseMatrix::<f32>::from_fn(3, 2, |r, c| (r * 2 + c) as f32);
        assert_eq!(matmul(&a, &b).unwrap(), b);
        let v = log_softmax(&[1.0f32, 1.0]);
        assert!((v[0] - 0.5f32.ln()).abs() < 1e-6);
    }
}
