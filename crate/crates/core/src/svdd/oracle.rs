use super::{dual_objective, validate_problem, Kernel, SvddModel};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Largest problem the exhaustive search accepts.
pub const ORACLE_MAX_ROWS: usize = 8;

const SLACK: f64 = 1e-10;

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Zero,
    Free,
    Bound,
}

/// Reference solver for tiny problems.
///
/// Enumerates every assignment of coefficients to `{0, free, c}`, solves the
/// stationarity system on the free block and keeps the best candidate that
/// satisfies the optimality conditions. Falls back to projected gradient
/// ascent when no assignment yields a nonsingular system.
pub fn oracle_fit(features: &Matrix, c: f64, kernel: Kernel) -> Result<SvddModel> {
    validate_problem(features, c, kernel)?;
    let n = features.rows();
    if n > ORACLE_MAX_ROWS {
        return Err(Error::Contract(format!(
            "oracle handles at most {ORACLE_MAX_ROWS} rows, got {n}"
        )));
    }
    let gram = kernel.gram(features)?;
    let c_eff = c.min(1.0);

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut roles = vec![Role::Zero; n];
    for code in 0..3usize.pow(n as u32) {
        let mut rest = code;
        for r in roles.iter_mut() {
            *r = match rest % 3 {
                0 => Role::Zero,
                1 => Role::Free,
                _ => Role::Bound,
            };
            rest /= 3;
        }
        if let Some(alphas) = candidate(&gram, &roles, c_eff) {
            let obj = dual_objective(&gram, &alphas);
            if !matches!(&best, Some((b, _)) if obj <= *b) {
                best = Some((obj, alphas));
            }
        }
    }
    let alphas = match best {
        Some((_, a)) => a,
        None => projected_ascent(&gram, c_eff),
    };
    SvddModel::from_solution(features, &gram, &alphas, c, kernel)
}

fn gradient(gram: &[f64], alphas: &[f64], k: usize) -> f64 {
    let n = alphas.len();
    let row = &gram[k * n..(k + 1) * n];
    2.0 * row.iter().zip(alphas).map(|(g, a)| g * a).sum::<f64>() - gram[k * n + k]
}

fn candidate(gram: &[f64], roles: &[Role], c: f64) -> Option<Vec<f64>> {
    let n = roles.len();
    let free: Vec<usize> = (0..n).filter(|&i| roles[i] == Role::Free).collect();
    let bound: Vec<usize> = (0..n).filter(|&i| roles[i] == Role::Bound).collect();
    let mass = 1.0 - c * bound.len() as f64;
    let mut alphas = vec![0.0; n];
    for &b in &bound {
        alphas[b] = c;
    }

    if free.is_empty() {
        if mass.abs() > SLACK {
            return None;
        }
    } else {
        // [2 K_FF  -1] [alpha_F]   [diag_F - 2 c K_FB 1]
        // [ 1^T     0] [  mu   ] = [       mass       ]
        let m = free.len();
        let w = m + 1;
        let mut a = vec![0.0; w * w];
        let mut rhs = vec![0.0; w];
        for (r, &i) in free.iter().enumerate() {
            for (s, &j) in free.iter().enumerate() {
                a[r * w + s] = 2.0 * gram[i * n + j];
            }
            a[r * w + m] = -1.0;
            let pull: f64 = bound.iter().map(|&b| gram[i * n + b]).sum();
            rhs[r] = gram[i * n + i] - 2.0 * c * pull;
            a[m * w + r] = 1.0;
        }
        rhs[m] = mass;
        let sol = solve(&mut a, &mut rhs, w)?;
        for (r, &i) in free.iter().enumerate() {
            if !(sol[r] > -SLACK && sol[r] < c + SLACK) {
                return None;
            }
            alphas[i] = sol[r].clamp(0.0, c);
        }
    }

    // multiplier range allowed by the non-free coefficients
    let g: Vec<f64> = (0..n).map(|k| gradient(gram, &alphas, k)).collect();
    let lo = (0..n)
        .filter(|&k| roles[k] == Role::Bound)
        .map(|k| g[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = (0..n)
        .filter(|&k| roles[k] == Role::Zero)
        .map(|k| g[k])
        .fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * (1.0 + g.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    if let Some(&f) = free.first() {
        let mu = g[f];
        if free.iter().any(|&i| (g[i] - mu).abs() > tol) || lo > mu + tol || hi < mu - tol {
            return None;
        }
    } else if lo > hi + tol {
        return None;
    }
    Some(alphas)
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve(a: &mut [f64], b: &mut [f64], w: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..w {
        let piv =
            (col..w).max_by(|&x, &y| a[x * w + col].abs().total_cmp(&a[y * w + col].abs()))?;
        if a[piv * w + col].abs() < 1e-12 * scale {
            return None;
        }
        if piv != col {
            for k in 0..w {
                a.swap(piv * w + k, col * w + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..w {
            let f = a[r * w + col] / a[col * w + col];
            if f != 0.0 {
                for k in col..w {
                    a[r * w + k] -= f * a[col * w + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; w];
    for r in (0..w).rev() {
        let s: f64 = (r + 1..w).map(|k| a[r * w + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * w + r];
    }
    Some(x)
}

fn projected_ascent(gram: &[f64], c: f64) -> Vec<f64> {
    let n = (gram.len() as f64).sqrt() as usize;
    let lipschitz = 2.0
        * (0..n)
            .map(|i| gram[i * n + i].abs())
            .sum::<f64>()
            .max(1e-12);
    let mut alphas = vec![1.0 / n as f64; n];
    for _ in 0..200_000 {
        let step: Vec<f64> = (0..n)
            .map(|k| alphas[k] - gradient(gram, &alphas, k) / lipschitz)
            .collect();
        alphas = project_capped_simplex(&step, c);
    }
    alphas
}

/// Euclidean projection onto `{sum = 1, 0 <= x <= c}` by bisection on the shift.
fn project_capped_simplex(v: &[f64], c: f64) -> Vec<f64> {
    let total = |t: f64| v.iter().map(|x| (x - t).clamp(0.0, c)).sum::<f64>();
    let mut lo = v.iter().copied().fold(f64::INFINITY, f64::min) - c;
    let mut hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    v.iter().map(|x| (x - t).clamp(0.0, c)).collect()
}
