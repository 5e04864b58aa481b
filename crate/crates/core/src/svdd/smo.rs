use super::{validate_problem, Kernel, SvddModel, DEFAULT_KKT_TOL};
use crate::error::Result;
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    /// Stop once the maximal KKT violation drops to this value.
    pub tol: f64,
    /// Iteration cap as a multiple of the sample count.
    pub iterations_per_sample: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: DEFAULT_KKT_TOL,
            iterations_per_sample: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverStats {
    pub iterations: usize,
    /// Final maximal violating-pair gap.
    pub gap: f64,
    pub converged: bool,
}

/// Fits the hypersphere with default iteration limits.
pub fn fit(features: &Matrix, c: f64, kernel: Kernel, tol: f64) -> Result<SvddModel> {
    let opts = FitOptions {
        tol,
        ..FitOptions::default()
    };
    fit_with(features, c, kernel, &opts).map(|(m, _)| m)
}

/// Pairwise coordinate ascent on the dual.
///
/// Coefficients start uniform at `1/n`. Each step moves weight from the
/// maximal violator `j` (largest gradient among `alpha > 0`) to `i` (smallest
/// gradient among `alpha < c`) along `e_i - e_j`, which keeps `sum(alpha) = 1`
/// and the box constraints at every iterate.
pub fn fit_with(
    features: &Matrix,
    c: f64,
    kernel: Kernel,
    opts: &FitOptions,
) -> Result<(SvddModel, SolverStats)> {
    validate_problem(features, c, kernel)?;
    let n = features.rows();
    let gram = kernel.gram(features)?;
    let diag: Vec<f64> = (0..n).map(|i| gram[i * n + i]).collect();

    let mut alphas = vec![1.0 / n as f64; n];
    // gradient of alpha^T K alpha - sum alpha_i K_ii (the minimised form)
    let recompute = |alphas: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let row = &gram[i * n..(i + 1) * n];
                2.0 * row.iter().zip(alphas).map(|(k, a)| k * a).sum::<f64>() - diag[i]
            })
            .collect()
    };
    let mut grad = recompute(&alphas);

    let max_iter = (opts.iterations_per_sample * n).max(100);
    let refresh_every = n.max(1000);
    let mut stats = SolverStats {
        iterations: 0,
        gap: f64::INFINITY,
        converged: false,
    };
    let mut idle = 0usize;

    while stats.iterations < max_iter {
        let (i, j) = select_pair(&alphas, &grad, c);
        let (Some(i), Some(j)) = (i, j) else {
            stats.gap = 0.0;
            stats.converged = true;
            break;
        };
        stats.gap = grad[j] - grad[i];
        if stats.gap <= opts.tol {
            stats.converged = true;
            break;
        }
        stats.iterations += 1;

        let eta = diag[i] + diag[j] - 2.0 * gram[i * n + j];
        let room = (c - alphas[i]).min(alphas[j]);
        let step = if eta > 1e-12 {
            (stats.gap / (2.0 * eta)).min(room)
        } else {
            room
        };
        let before = (alphas[i], alphas[j]);
        if step >= room {
            // land exactly on the bound that limited the step
            if c - alphas[i] <= alphas[j] {
                alphas[j] -= c - alphas[i];
                alphas[i] = c;
            } else {
                alphas[i] += alphas[j];
                alphas[j] = 0.0;
            }
        } else {
            alphas[i] += step;
            alphas[j] -= step;
        }
        let di = alphas[i] - before.0;
        let dj = alphas[j] - before.1;
        if di == 0.0 && dj == 0.0 {
            idle += 1;
            if idle > 50 {
                break;
            }
            continue;
        }
        idle = 0;
        let (ri, rj) = (&gram[i * n..(i + 1) * n], &gram[j * n..(j + 1) * n]);
        for k in 0..n {
            grad[k] += 2.0 * (di * ri[k] + dj * rj[k]);
        }
        if stats.iterations % refresh_every == 0 {
            grad = recompute(&alphas);
        }
    }

    let model = SvddModel::from_solution(features, &gram, &alphas, c, kernel)?;
    Ok((model, stats))
}

/// Maximal violating pair: `i` may grow, `j` may shrink.
fn select_pair(alphas: &[f64], grad: &[f64], c: f64) -> (Option<usize>, Option<usize>) {
    let mut i = None;
    let mut j = None;
    let mut gmin = f64::INFINITY;
    let mut gmax = f64::NEG_INFINITY;
    for (k, (&a, &g)) in alphas.iter().zip(grad).enumerate() {
        if a < c && g < gmin {
            gmin = g;
            i = Some(k);
        }
        if a > 0.0 && g > gmax {
            gmax = g;
            j = Some(k);
        }
    }
    (i, j)
}
