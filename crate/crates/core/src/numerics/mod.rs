//! Dense linear algebra, normalizations and closed-form gradient helpers.
//!
//! Everything here works on `f64` row-major storage. Vectors are plain
//! `Vec<f64>` / `&[f64]`; matrices use [`Mat`]. Gradients elsewhere in the
//! crate are hand-derived on top of these primitives and verified with
//! [`gradcheck::finite_diff_check`].

pub mod adam;
pub mod gradcheck;
pub mod rng;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState, Parameters};
pub use gradcheck::{finite_diff_check, FdReport};
pub use rng::SeedStream;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Entries drawn i.i.d. from `N(0, scale^2)`.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `W x`. Panics on a dimension mismatch; use [`linear_forward`] for a
    /// checked variant.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec: {}x{} by {}", self.rows, self.cols, x.len());
        self.data.chunks_exact(self.cols.max(1)).take(self.rows).map(|row| dot(row, x)).collect()
    }

    /// `W^T y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, y.len(), "matvec_t: {}x{} by {}", self.rows, self.cols, y.len());
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += yr * w;
            }
        }
        out
    }

    /// `W += scale * u v^T`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        assert_eq!(self.rows, u.len());
        assert_eq!(self.cols, v.len());
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            if s == 0.0 {
                continue;
            }
            for (w, &vc) in self.row_mut(r).iter_mut().zip(v) {
                *w += s * vc;
            }
        }
    }

    /// Inserts `count` zero columns before column `at`.
    pub fn insert_zero_cols(&mut self, at: usize, count: usize) {
        assert!(at <= self.cols);
        let new_cols = self.cols + count;
        let mut data = Vec::with_capacity(self.rows * new_cols);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend_from_slice(&row[..at]);
            data.extend(std::iter::repeat_n(0.0, count));
            data.extend_from_slice(&row[at..]);
        }
        self.cols = new_cols;
        self.data = data;
    }

    /// Appends `count` zero rows.
    pub fn push_zero_rows(&mut self, count: usize) {
        self.rows += count;
        self.data.resize(self.rows * self.cols, 0.0);
    }
}

/// `y = W x (+ b)` with shape and finiteness checks.
pub fn linear_forward(w: &Mat, b: Option<&[f64]>, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::Shape(format!(
            "linear: weight has {} columns, input has {}",
            w.cols(),
            x.len()
        )));
    }
    let mut y = w.matvec(x);
    if let Some(b) = b {
        if b.len() != w.rows() {
            return Err(Error::Shape(format!(
                "linear: bias has {} entries, weight has {} rows",
                b.len(),
                w.rows()
            )));
        }
        add_assign(&mut y, b);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear output".into()));
    }
    Ok(y)
}

/// Temperature softmax with max-subtraction.
pub fn softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    if temperature == 1.0 {
        return Ok(softmax1(z));
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    Ok(softmax1(&scaled))
}

/// Unit-temperature softmax. Input is assumed finite.
pub fn softmax1(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(z)))`, stable.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy of `logits` against class `target`; returns the loss
/// and `d loss / d logits = softmax - onehot`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Label(format!(
            "target class {target} outside {} logits",
            logits.len()
        )));
    }
    let mut p = softmax1(logits);
    let loss = log_sum_exp(logits) - logits[target];
    p[target] -= 1.0;
    Ok((loss, p))
}

/// Backpropagates `d/dp` through `p = softmax(z)` to `d/dz`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner = dot(p, grad_p);
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales to unit norm; a zero vector is returned unchanged.
pub fn normalize(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n == 0.0 {
        return a.to_vec();
    }
    a.iter().map(|v| v / n).collect()
}

pub fn add_assign(a: &mut [f64], b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub fn axpy(a: &mut [f64], scale: f64, b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += scale * y;
    }
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|v| v * s).collect()
}

/// Elementwise mean of equal-length vectors.
pub fn mean_vec(vs: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = vs.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.len()];
    for v in vs {
        add_assign(&mut acc, v);
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    acc
}

/// Cosine similarity, or `None` if either input has zero norm.
pub fn try_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity; a zero-norm input yields 0 (see [`try_cosine`] to
/// observe the degenerate case).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    match try_cosine(a, b) {
        Some(v) => v,
        None => {
            log::debug!("cosine similarity of a zero-norm vector treated as 0");
            0.0
        }
    }
}

/// Gradient of `cos(a, b)` with respect to `a`; zero when degenerate.
pub fn cosine_grad_a(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; a.len()];
    }
    let c = dot(a, b) / (na * nb);
    a.iter()
        .zip(b)
        .map(|(ai, bi)| bi / (na * nb) - c * ai / (na * na))
        .collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy (nats) of a nonnegative count or weight vector.
pub fn entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum()
}
