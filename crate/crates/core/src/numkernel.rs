//! Dense numeric kernel: a row-major matrix, probability vectors, and the
//! losses used throughout the crate together with their analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor added inside every logarithm so one-hot posteriors stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn ensure_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, mut f: impl FnMut(f64, f64) -> f64) -> Result<Matrix> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|x| x * k)
    }

    /// In-place `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Matrix) -> Result<()> {
        self.ensure_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Largest absolute entry; zero for an empty matrix.
    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · v` for a column vector `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · v` for a column vector `v` of length `rows`.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }

    /// In-place `self += k · u vᵀ`.
    pub fn add_outer(&mut self, k: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = k * ur;
            if s == 0.0 {
                continue;
            }
            for (a, &vc) in self.row_mut(r).iter_mut().zip(v) {
                *a += s * vc;
            }
        }
    }

    /// Rounds every entry to the nearest `f32`, the precision of every
    /// on-disk format.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }
}

/// A probability vector: non-negative entries summing to one, length ≥ 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates `probs` (entries in `[0, 1]`, sum within 1e-6 of one).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid(
                "probability vector needs at least 2 entries",
            ));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::invalid("probability entries must lie in [0, 1]"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("probabilities sum to {s}, not 1")));
        }
        Ok(ProbVector(probs))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, at: usize) -> Result<Self> {
        if at >= n {
            return Err(Error::invalid(format!(
                "one-hot index {at} out of range {n}"
            )));
        }
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        Self::new(v)
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax needs at least 2 logits"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("softmax logits must be finite"));
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / s).collect()))
}

/// Backpropagates `dprobs` through softmax: `dz_j = p_j (g_j − Σ p_i g_i)`.
pub fn softmax_backward(p: &ProbVector, dprobs: &[f64]) -> Vec<f64> {
    let dot: f64 = p.0.iter().zip(dprobs).map(|(a, b)| a * b).sum();
    p.0.iter()
        .zip(dprobs)
        .map(|(&pj, &gj)| pj * (gj - dot))
        .collect()
}

fn check_label(p: &ProbVector, target: usize) -> Result<()> {
    if target >= p.len() {
        return Err(Error::invalid(format!(
            "target label {target} out of range for {} classes",
            p.len()
        )));
    }
    Ok(())
}

/// `−ln(p[target] + floor)`.
pub fn cross_entropy(p: &ProbVector, target: usize) -> Result<f64> {
    check_label(p, target)?;
    Ok(-(p.0[target] + PROB_FLOOR).ln())
}

/// Gradient of [`cross_entropy`] with respect to the logits that produced `p`.
pub fn cross_entropy_grad_logits(p: &ProbVector, target: usize) -> Result<Vec<f64>> {
    check_label(p, target)?;
    let pt = p.0[target];
    let k = pt / (pt + PROB_FLOOR);
    Ok(p.0
        .iter()
        .enumerate()
        .map(|(j, &pj)| k * (pj - if j == target { 1.0 } else { 0.0 }))
        .collect())
}

fn check_lengths(p: &ProbVector, q: &ProbVector) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "KL divergence length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `Σ p_i ln((p_i + floor)/(q_i + floor))`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_lengths(p, q)?;
    Ok(p.0
        .iter()
        .zip(&q.0)
        .map(|(&pi, &qi)| pi * ((pi + PROB_FLOOR) / (qi + PROB_FLOOR)).ln())
        .sum())
}

/// Partial derivatives of [`kl_divergence`] with respect to the entries of
/// `p` and of `q`.
pub fn kl_divergence_grads(p: &ProbVector, q: &ProbVector) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(p, q)?;
    let dp =
        p.0.iter()
            .zip(&q.0)
            .map(|(&pi, &qi)| ((pi + PROB_FLOOR) / (qi + PROB_FLOOR)).ln() + pi / (pi + PROB_FLOOR))
            .collect();
    let dq =
        p.0.iter()
            .zip(&q.0)
            .map(|(&pi, &qi)| -pi / (qi + PROB_FLOOR))
            .collect();
    Ok((dp, dq))
}

/// Mean absolute elementwise difference.
pub fn l1_loss(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.ensure_same_shape(b, "l1_loss")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Gradient of [`l1_loss`] with respect to `a`: `sign(a − b) / n`.
pub fn l1_loss_grad(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.ensure_same_shape(b, "l1_loss_grad")?;
    let n = a.len().max(1) as f64;
    a.zip_map(b, |x, y| signum0(x - y) / n)
}

/// Clamps every entry into `[−eps, eps]`.
pub fn clip_linf(m: &Matrix, eps: f64) -> Result<Matrix> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::invalid(format!(
            "clip budget must be ≥ 0, got {eps}"
        )));
    }
    Ok(m.map(|x| x.clamp(-eps, eps)))
}

#[inline]
pub(crate) fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Elementwise sign with `sign(0) = 0`.
pub fn sign(m: &Matrix) -> Matrix {
    m.map(signum0)
}
