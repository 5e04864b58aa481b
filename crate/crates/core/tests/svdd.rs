mod support;

use ocrm_core::svdd::{
    self, dual_objective, fit_with, kkt_residual, FitOptions, Kernel, SvddModel,
};
use ocrm_core::{Error, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::svdd_cases::{self, objective_of, random_instance, triangle, OBJECTIVE_TOL};

#[test]
fn fit_matches_oracle_on_random_instances() {
    let a = svdd_cases::solver_agreement(200, 7);
    assert!(
        a.worst_gap < OBJECTIVE_TOL,
        "worst objective gap {:e}",
        a.worst_gap
    );
}

#[test]
fn oracle_satisfies_kkt_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let m = svdd::oracle_fit(&inst.features, inst.c, Kernel::Linear).unwrap();
        let r = kkt_residual(&m, &inst.features).unwrap();
        assert!(r <= 1e-8, "oracle residual {r:e}");
    }
}

#[test]
fn fit_satisfies_kkt_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let m = svdd::fit(&inst.features, inst.c, Kernel::Linear, 1e-6).unwrap();
        assert!(kkt_residual(&m, &inst.features).unwrap() <= 1e-6);
    }
}

#[test]
fn triangle_sphere() {
    for m in [
        svdd::fit(&triangle(), 1.0, Kernel::Linear, 1e-10).unwrap(),
        svdd::oracle_fit(&triangle(), 1.0, Kernel::Linear).unwrap(),
    ] {
        let a = m.linear_center().unwrap();
        assert!((a[0] - 0.5).abs() < 1e-4 && (a[1] - 0.5).abs() < 1e-4);
        assert!((m.radius2() - 0.5).abs() < 1e-4);
        // every vertex sits on the sphere, including the one with zero weight
        for row in triangle().iter_rows() {
            assert!(m.score(row).unwrap().abs() < 1e-4);
        }
        assert!((m.score(&[5.0, 5.0]).unwrap() - 40.0).abs() < 1e-4);
    }
}

#[test]
fn two_point_cases() {
    let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    let m = svdd::oracle_fit(&same, 1.0, Kernel::Linear).unwrap();
    let a = m.linear_center().unwrap();
    assert!((a[0] - 1.0).abs() < 1e-12 && (a[1] - 2.0).abs() < 1e-12);
    assert!(m.radius2().abs() < 1e-12);

    let apart = Matrix::from_rows(&[vec![-1.0, 0.0], vec![3.0, 0.0]]).unwrap();
    for m in [
        svdd::oracle_fit(&apart, 1.0, Kernel::Linear).unwrap(),
        svdd::fit(&apart, 1.0, Kernel::Linear, 1e-12).unwrap(),
    ] {
        let a = m.linear_center().unwrap();
        assert!((a[0] - 1.0).abs() < 1e-9 && a[1].abs() < 1e-9);
        assert!((m.radius2() - 4.0).abs() < 1e-9);
    }
}

#[test]
fn single_point_and_infeasible() {
    let one = Matrix::from_rows(&[vec![0.25, -1.0, 3.0]]).unwrap();
    let m = svdd::fit(&one, 1.0, Kernel::Linear, 1e-6).unwrap();
    assert_eq!(m.alphas(), &[1.0]);
    assert_eq!(m.radius2(), 0.0);

    let five = Matrix::from_rows(&vec![vec![1.0]; 5]).unwrap();
    assert!(matches!(
        svdd::fit(&five, 0.1, Kernel::Linear, 1e-6),
        Err(Error::Infeasible { .. })
    ));
    assert!(matches!(
        svdd::oracle_fit(&five, 0.1, Kernel::Linear),
        Err(Error::Infeasible { .. })
    ));
}

#[test]
fn score_at_center_is_negative_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = random_instance(&mut rng);
    let m = svdd::fit(&inst.features, inst.c, Kernel::Linear, 1e-9).unwrap();
    let a = m.linear_center().unwrap();
    assert!((m.score(&a).unwrap() + m.radius2()).abs() < 1e-9);
}

#[test]
fn perturbed_coefficients_violate_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let m = svdd::fit(&x, 0.1, Kernel::Linear, 1e-6).unwrap();
    assert!(kkt_residual(&m, &x).unwrap() <= 1e-6);
    let mut alphas = m.alphas().to_vec();
    alphas[0] -= 0.1f64.min(alphas[0]);
    alphas[1] += 0.1;
    let bent = SvddModel::from_parts(
        m.kernel(),
        m.c(),
        m.support_vectors().clone(),
        alphas,
        m.radius2(),
    )
    .unwrap();
    assert!(kkt_residual(&bent, &x).unwrap() > 1e-6);
}

#[test]
fn translation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let n = 30;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let t: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&t).map(|(x, s)| x + s).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let xs = Matrix::from_rows(&shifted).unwrap();
        let m = svdd::fit(&x, 0.1, Kernel::Linear, 1e-10).unwrap();
        let ms = svdd::fit(&xs, 0.1, Kernel::Linear, 1e-10).unwrap();
        assert_eq!(m.alphas().len(), ms.alphas().len());
        for (a, b) in m.alphas().iter().zip(ms.alphas()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((m.radius2() - ms.radius2()).abs() < 1e-8);
        for _ in 0..10 {
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let qs: Vec<f64> = q.iter().zip(&t).map(|(x, s)| x + s).collect();
            assert!((m.score(&q).unwrap() - ms.score(&qs).unwrap()).abs() < 1e-8);
        }
    }
}

#[test]
fn optimal_objective_grows_with_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let mut last = f64::NEG_INFINITY;
        for c in [0.2, 0.3, 0.5, 0.75, 1.0] {
            let m = svdd::oracle_fit(&x, c, Kernel::Linear).unwrap();
            let obj = objective_of(&m, &x);
            assert!(obj >= last - 1e-12, "c={c}: {obj} < {last}");
            last = obj;
        }
    }
}

#[test]
fn constant_kernel_shift_keeps_score_ranking() {
    // an extra constant coordinate adds the same value to every linear kernel entry
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let rows: Vec<Vec<f64>> = (0..25)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let lift = |r: &Vec<f64>| {
        let mut v = r.clone();
        v.push(2.5);
        v
    };
    let x = Matrix::from_rows(&rows).unwrap();
    let xl = Matrix::from_rows(&rows.iter().map(lift).collect::<Vec<_>>()).unwrap();
    let m = svdd::fit(&x, 0.1, Kernel::Linear, 1e-10).unwrap();
    let ml = svdd::fit(&xl, 0.1, Kernel::Linear, 1e-10).unwrap();

    let test: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let rank = |scores: Vec<f64>| {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        idx
    };
    let s: Vec<f64> = test.iter().map(|q| m.score(q).unwrap()).collect();
    let sl: Vec<f64> = test.iter().map(|q| ml.score(&lift(q)).unwrap()).collect();
    assert_eq!(rank(s), rank(sl));
}

#[test]
fn objective_of_matches_dual_formula() {
    let x = triangle();
    let gram = Kernel::Linear.gram(&x).unwrap();
    assert!((dual_objective(&gram, &[0.0, 0.5, 0.5]) - 0.5).abs() < 1e-15);
}

#[test]
fn rbf_fit_agrees_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..30 {
        let inst = random_instance(&mut rng);
        let k = Kernel::Rbf { gamma: 0.7 };
        let fast = svdd::fit(&inst.features, inst.c, k, 1e-9).unwrap();
        let slow = svdd::oracle_fit(&inst.features, inst.c, k).unwrap();
        assert!(
            (objective_of(&fast, &inst.features) - objective_of(&slow, &inst.features)).abs()
                < 1e-6
        );
    }
}

#[test]
fn stats_report_convergence() {
    let (_, stats) = fit_with(&triangle(), 1.0, Kernel::Linear, &FitOptions::default()).unwrap();
    assert!(stats.converged);
    assert!(stats.gap <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coefficients_stay_feasible(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..40),
        frac in 0.0f64..1.0,
    ) {
        let n = rows.len();
        let c = 1.0 / n as f64 + frac * (1.0 - 1.0 / n as f64);
        let x = Matrix::from_rows(&rows).unwrap();
        let m = svdd::fit(&x, c, Kernel::Linear, 1e-6).unwrap();
        let sum: f64 = m.alphas().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(m.alphas().iter().all(|&a| a >= 0.0 && a <= c));
        prop_assert!(m.radius2() >= 0.0);
    }
}
