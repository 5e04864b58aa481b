//! Random small SVDD instances compared against the exhaustive reference.

use ocrm_core::svdd::{self, dual_objective, Kernel};
use ocrm_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const C_VALUES: [f64; 3] = [0.34, 0.5, 1.0];
pub const OBJECTIVE_TOL: f64 = 1e-6;

pub struct Instance {
    pub features: Matrix,
    pub c: f64,
}

/// `n <= 6`, `d <= 3`, `c` from [`C_VALUES`], always feasible.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let c = C_VALUES[rng.random_range(0..C_VALUES.len())];
    let min_n = (1.0 / c).ceil() as usize;
    let n = rng.random_range(min_n..=6);
    let d = rng.random_range(1..=3);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    Instance {
        features: Matrix::from_rows(&rows).unwrap(),
        c,
    }
}

/// Dual objective evaluated on the full training set from a model's support vectors.
pub fn objective_of(model: &svdd::SvddModel, features: &Matrix) -> f64 {
    let mut used = vec![false; model.alphas().len()];
    let alphas: Vec<f64> = features
        .iter_rows()
        .map(|row| {
            match model
                .support_vectors()
                .iter_rows()
                .enumerate()
                .position(|(j, sv)| !used[j] && sv == row)
            {
                Some(j) => {
                    used[j] = true;
                    model.alphas()[j]
                }
                None => 0.0,
            }
        })
        .collect();
    let gram = model.kernel().gram(features).unwrap();
    dual_objective(&gram, &alphas)
}

pub struct Agreement {
    pub instances: usize,
    pub worst_gap: f64,
}

/// Worst `|objective(fit) - objective(oracle)|` over `count` seeded instances.
pub fn solver_agreement(count: usize, seed: u64) -> Agreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let inst = random_instance(&mut rng);
        let fast = svdd::fit(&inst.features, inst.c, Kernel::Linear, 1e-9).unwrap();
        let slow = svdd::oracle_fit(&inst.features, inst.c, Kernel::Linear).unwrap();
        let gap = (objective_of(&fast, &inst.features) - objective_of(&slow, &inst.features)).abs();
        worst = worst.max(gap);
    }
    Agreement {
        instances: count,
        worst_gap: worst,
    }
}

pub fn triangle() -> Matrix {
    Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
}
