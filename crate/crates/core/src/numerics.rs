//! Dense f64 primitives and the finite-difference gradient checker.
//!
//! All reductions iterate in index order so results are bit-stable across runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm threshold below which a vector has no usable direction.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::contract(format!(
                "matrix {}x{} has {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `out = self · x` (rows outputs from cols inputs).
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.row_iter()) {
            *o = dot(row, x);
        }
    }

    /// `out += selfᵀ · y`.
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.row_iter()) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += scale · y xᵀ`.
    pub fn add_outer(&mut self, scale: f64, y: &[f64], x: &[f64]) {
        let cols = self.cols;
        for (r, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(scale * yi, x, &mut self.data[r * cols..(r + 1) * cols]);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n <= NORM_EPS {
        return Err(Error::Degenerate(format!("vector norm {n:e} <= {NORM_EPS:e}")));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cos_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "cos_sim length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::Degenerate(format!(
            "cosine with near-zero norm ({na:e}, {nb:e})"
        )));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine of `a` against a direction whose norm is known, plus `∂cos/∂a`
/// accumulated as `grad += scale · ∂cos/∂a`. Returns `None` for a degenerate pair.
///
/// The value is not clamped here: clamping would zero the derivative at the
/// boundary and break gradient checks on parallel vectors.
#[inline]
pub fn cos_grad_acc(
    a: &[f64],
    a_norm: f64,
    b: &[f64],
    b_norm: f64,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> Option<f64> {
    if a_norm <= NORM_EPS || b_norm <= NORM_EPS {
        return None;
    }
    let c = dot(a, b) / (a_norm * b_norm);
    if let Some(g) = grad {
        if scale != 0.0 {
            // ∂/∂a (a·b / |a||b|) = b/(|a||b|) − c·a/|a|²
            let kb = scale / (a_norm * b_norm);
            let ka = -scale * c / (a_norm * a_norm);
            for ((gi, ai), bi) in g.iter_mut().zip(a).zip(b) {
                *gi += kb * bi + ka * ai;
            }
        }
    }
    Some(c)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    out
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coordinates: usize,
}

/// Compares `analytic` against central differences of `f` at `x0`.
///
/// The per-coordinate error is `|a − cd| / max(1, |a|, |cd|)`.
pub fn grad_check<F>(f: F, analytic: &[f64], x0: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != x0.len() {
        return Err(Error::contract(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x0.len()
        )));
    }
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        coordinates: x0.len(),
    };
    for j in 0..x.len() {
        x[j] = x0[j] + h;
        let fp = f(&x);
        x[j] = x0[j] - h;
        let fm = f(&x);
        x[j] = x0[j];
        if !fp.is_finite() || !fm.is_finite() || !analytic[j].is_finite() {
            return Err(Error::GradCheck { coordinate: j });
        }
        let cd = (fp - fm) / (2.0 * h);
        let err = (analytic[j] - cd).abs() / 1f64.max(analytic[j].abs()).max(cd.abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = j;
        }
    }
    Ok(report)
}
