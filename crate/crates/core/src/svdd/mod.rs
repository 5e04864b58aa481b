//! Support vector data description.
//!
//! The hypersphere problem `min r^2 + c * sum(xi)` subject to
//! `|x_i - a|^2 <= r^2 + xi_i, xi_i >= 0` is solved through its dual
//!
//! ```text
//! max  sum_i alpha_i K(x_i, x_i) - sum_ij alpha_i alpha_j K(x_i, x_j)
//! s.t. sum_i alpha_i = 1,  0 <= alpha_i <= c
//! ```
//!
//! with center `a = sum_i alpha_i phi(x_i)`. [`fit`] is an SMO-style solver;
//! [`oracle_fit`] is an exhaustive reference for tiny problems.

mod oracle;
mod smo;

pub use oracle::oracle_fit;
pub use smo::{fit, fit_with, FitOptions};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Bound on the fraction of training points the automatic trade-off leaves
/// outside the sphere.
pub const DEFAULT_OUTLIER_FRACTION: f64 = 0.1;
pub const DEFAULT_KKT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Rbf { gamma } if !(gamma > 0.0 && gamma.is_finite()) => Err(Error::Contract(
                format!("rbf gamma must be positive, got {gamma}"),
            )),
            _ => Ok(()),
        }
    }

    /// Full Gram matrix of `x` against itself.
    pub fn gram(&self, x: &Matrix) -> Result<Vec<f64>> {
        let ip = x.inner_products(x)?;
        Ok(match *self {
            Kernel::Linear => ip,
            Kernel::Rbf { gamma } => {
                let n = x.rows();
                let diag: Vec<f64> = (0..n).map(|i| ip[i * n + i]).collect();
                let mut k = ip;
                for i in 0..n {
                    for j in 0..n {
                        let d2 = (diag[i] + diag[j] - 2.0 * k[i * n + j]).max(0.0);
                        k[i * n + j] = if i == j { 1.0 } else { (-gamma * d2).exp() };
                    }
                }
                k
            }
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dual objective `sum_i alpha_i K_ii - alpha^T K alpha` for a dense Gram matrix.
pub fn dual_objective(gram: &[f64], alphas: &[f64]) -> f64 {
    let n = alphas.len();
    let mut lin = 0.0;
    let mut quad = 0.0;
    for i in 0..n {
        lin += alphas[i] * gram[i * n + i];
        let row: f64 = (0..n).map(|j| gram[i * n + j] * alphas[j]).sum();
        quad += alphas[i] * row;
    }
    lin - quad
}

/// Fitted hypersphere.
#[derive(Clone, Debug, PartialEq)]
pub struct SvddModel {
    kernel: Kernel,
    c: f64,
    /// Support vectors, `[m, d]`.
    support_vectors: Matrix,
    alphas: Vec<f64>,
    /// `|a|^2 = alpha^T K alpha` over the support vectors.
    center_norm2: f64,
    radius2: f64,
}

impl SvddModel {
    /// Assembles a model from solver output over the full training set,
    /// keeping rows with positive weight and deriving the radius.
    pub(crate) fn from_solution(
        features: &Matrix,
        gram: &[f64],
        alphas: &[f64],
        c: f64,
        kernel: Kernel,
    ) -> Result<Self> {
        let n = alphas.len();
        let quad: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| gram[i * n + j] * alphas[j]).sum())
            .collect();
        let center_norm2: f64 = alphas.iter().zip(&quad).map(|(a, q)| a * q).sum();
        let dist2: Vec<f64> = (0..n)
            .map(|i| gram[i * n + i] - 2.0 * quad[i] + center_norm2)
            .collect();
        let radius2 = radius_from(alphas, &dist2, c);
        let sv: Vec<usize> = (0..n).filter(|&i| alphas[i] > 0.0).collect();
        Self::from_parts(
            kernel,
            c,
            features.select_rows(&sv),
            sv.iter().map(|&i| alphas[i]).collect(),
            radius2,
        )
    }

    /// Rebuilds a model from stored parts; the center norm is recomputed.
    pub fn from_parts(
        kernel: Kernel,
        c: f64,
        support_vectors: Matrix,
        alphas: Vec<f64>,
        radius2: f64,
    ) -> Result<Self> {
        if support_vectors.rows() != alphas.len() || alphas.is_empty() {
            return Err(Error::dim(format!(
                "{} support vectors with {} coefficients",
                support_vectors.rows(),
                alphas.len()
            )));
        }
        kernel.validate()?;
        let gram = kernel.gram(&support_vectors)?;
        let m = alphas.len();
        let mut center_norm2 = 0.0;
        for i in 0..m {
            let row: f64 = (0..m).map(|j| gram[i * m + j] * alphas[j]).sum();
            center_norm2 += alphas[i] * row;
        }
        Ok(SvddModel {
            kernel,
            c,
            support_vectors,
            alphas,
            center_norm2,
            radius2,
        })
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.support_vectors.cols()
    }

    pub fn support_vectors(&self) -> &Matrix {
        &self.support_vectors
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn radius2(&self) -> f64 {
        self.radius2
    }

    pub fn center_norm2(&self) -> f64 {
        self.center_norm2
    }

    /// Explicit center `sum_i alpha_i x_i`; only meaningful for the linear kernel.
    pub fn linear_center(&self) -> Option<Vec<f64>> {
        if self.kernel != Kernel::Linear {
            return None;
        }
        let mut a = vec![0.0; self.dim()];
        for (row, &alpha) in self.support_vectors.iter_rows().zip(&self.alphas) {
            a.iter_mut().zip(row).for_each(|(c, x)| *c += alpha * x);
        }
        Some(a)
    }

    /// Number of support vectors strictly inside the box (on the sphere).
    pub fn unbounded_count(&self) -> usize {
        self.alphas.iter().filter(|&&a| is_free(a, self.c)).count()
    }

    /// Squared feature-space distance of `x` from the center.
    pub fn distance2(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim(format!(
                "svdd model has dimension {}, query has {}",
                self.dim(),
                x.len()
            )));
        }
        let cross: f64 = self
            .support_vectors
            .iter_rows()
            .zip(&self.alphas)
            .map(|(sv, a)| a * self.kernel.eval(sv, x))
            .sum();
        Ok(self.kernel.eval(x, x) - 2.0 * cross + self.center_norm2)
    }

    /// `dist^2(x, a) - r^2`: non-positive inside the sphere, positive outside.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.distance2(x)? - self.radius2)
    }

    pub fn score_rows(&self, x: &Matrix) -> Result<Vec<f64>> {
        x.iter_rows().map(|r| self.score(r)).collect()
    }
}

/// Free (unbounded) coefficient test shared by the solver and diagnostics.
pub(crate) fn is_free(alpha: f64, c: f64) -> bool {
    alpha > 0.0 && alpha < c
}

/// Radius from the KKT conditions: the mean `dist^2` over unbounded support
/// vectors, or the midpoint of the interval allowed by the bounded ones.
pub(crate) fn radius_from(alphas: &[f64], dist2: &[f64], c: f64) -> f64 {
    let free: Vec<f64> = alphas
        .iter()
        .zip(dist2)
        .filter(|(&a, _)| is_free(a, c))
        .map(|(_, &d)| d)
        .collect();
    let r2 = if !free.is_empty() {
        free.iter().sum::<f64>() / free.len() as f64
    } else {
        let inside = alphas
            .iter()
            .zip(dist2)
            .filter(|(&a, _)| a <= 0.0)
            .map(|(_, &d)| d)
            .fold(f64::NEG_INFINITY, f64::max);
        let outside = alphas
            .iter()
            .zip(dist2)
            .filter(|(&a, _)| a >= c)
            .map(|(_, &d)| d)
            .fold(f64::INFINITY, f64::min);
        match (inside.is_finite(), outside.is_finite()) {
            (true, true) => 0.5 * (inside + outside),
            (true, false) => inside,
            (false, true) => outside,
            (false, false) => 0.0,
        }
    };
    r2.max(0.0)
}

/// Largest KKT complementarity violation of `model` over its training rows.
///
/// Rows are matched to support vectors by exact value; unmatched rows carry
/// `alpha = 0` and must lie inside the sphere, bounded ones outside, and
/// unbounded ones on it.
pub fn kkt_residual(model: &SvddModel, features: &Matrix) -> Result<f64> {
    let mut used = vec![false; model.alphas.len()];
    let mut worst: f64 = 0.0;
    for row in features.iter_rows() {
        let alpha = model
            .support_vectors
            .iter_rows()
            .enumerate()
            .find(|(j, sv)| !used[*j] && *sv == row)
            .map(|(j, _)| {
                used[j] = true;
                model.alphas[j]
            })
            .unwrap_or(0.0);
        let s = model.score(row)?;
        let violation = if alpha <= 0.0 {
            s.max(0.0)
        } else if alpha >= model.c {
            (-s).max(0.0)
        } else {
            s.abs()
        };
        worst = worst.max(violation);
    }
    // coefficients must also stay feasible
    let sum: f64 = model.alphas.iter().sum();
    worst = worst.max((sum - 1.0).abs());
    for &a in &model.alphas {
        worst = worst.max((-a).max(0.0)).max((a - model.c).max(0.0));
    }
    Ok(worst)
}

/// Checks shared by [`fit`] and [`oracle_fit`].
pub(crate) fn validate_problem(features: &Matrix, c: f64, kernel: Kernel) -> Result<()> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }
    kernel.validate()?;
    // sum(alpha) = 1 with alpha_i <= c needs n * c >= 1
    if !(c * n as f64 >= 1.0 - 1e-12) {
        return Err(Error::Infeasible { c, n });
    }
    Ok(())
}

/// Automatic trade-off `c = 1 / (nu * n)` with `nu = DEFAULT_OUTLIER_FRACTION`,
/// capped at 1. At most `nu * n` coefficients can reach the bound.
pub fn default_c(n: usize) -> f64 {
    (1.0 / (DEFAULT_OUTLIER_FRACTION * n.max(1) as f64)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_c_scales_with_set_size() {
        assert_eq!(default_c(100), 0.1);
        assert_eq!(default_c(2000), 0.005);
        assert_eq!(default_c(5), 1.0);
    }

    #[test]
    fn radius_falls_back_without_free_vectors() {
        // all at the bound: take the smallest outside distance
        assert_eq!(radius_from(&[0.5, 0.5], &[2.0, 3.0], 0.5), 2.0);
        assert_eq!(radius_from(&[1.0, 0.0], &[0.0, 0.0], 1.0), 0.0);
        assert_eq!(radius_from(&[0.5, 0.5, 0.0], &[2.0, 3.0, 1.0], 0.5), 1.5);
    }

    #[test]
    fn rbf_gram_has_unit_diagonal() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
        let k = Kernel::Rbf { gamma: 0.5 }.gram(&x).unwrap();
        assert_eq!(k[0], 1.0);
        assert!((k[1] - (-0.5f64 * 8.0).exp()).abs() < 1e-15);
        assert!(Kernel::Rbf { gamma: -1.0 }.validate().is_err());
    }
}
