mod common;

use common::{gauss_double_integral, norm, random_spec};
use crossdiff::entropy::relative_shannon_density;
use crossdiff::specmat::{
    coercivity_constant, coercivity_integral, project_kernel, project_range,
    symmetrize_detailed_balance, validate_diffusion,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 1000;

#[test]
fn square_root_and_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..DRAWS {
        let s = random_spec(&mut rng);
        let b = s.matrix();
        let r = s.sqrt_b();
        let err = (r * r - b).norm() / b.norm();
        assert!(err <= 1e-12, "sqrt defect {err:e} for {b}");

        let (pr, pk) = (s.p_range(), s.p_kernel());
        let n = s.n();
        assert!((pr * pr - pr).norm() <= 1e-12);
        assert!((pk * pk - pk).norm() <= 1e-12);
        assert!((pr + pk - DMatrix::<f64>::identity(n, n)).norm() <= 1e-12);
        assert!((pr * pk).norm() <= 1e-12);
        assert!((b * pk).norm() <= 1e-10 * b.norm());
    }
}

#[test]
fn range_component_is_controlled_by_sqrt_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut violations = 0;
    for _ in 0..DRAWS {
        let s = random_spec(&mut rng);
        let z: Vec<f64> = (0..s.n()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let lhs = norm(&project_range(&s, &z));
        let rhs = norm(&s.apply_sqrt(&z)) / s.lambda();
        if lhs > rhs + 1e-12 {
            violations += 1;
        }
        let back: Vec<f64> = project_range(&s, &z)
            .iter()
            .zip(project_kernel(&s, &z))
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in back.iter().zip(&z) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn coercivity_of_relative_entropies() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut violations = 0;
    for _ in 0..DRAWS {
        let s = random_spec(&mut rng);
        let m = rng.gen_range(0.1..10.0);
        let c = coercivity_constant(&s, m).unwrap();
        let n = s.n();
        let u: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    0.0
                } else {
                    rng.gen_range(0.0..10.0)
                }
            })
            .collect();
        let v: Vec<f64> = (0..n).map(|_| m * (1.0 - rng.gen::<f64>())).collect();
        let d: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        let hs: f64 = u
            .iter()
            .zip(&v)
            .map(|(a, b)| relative_shannon_density(*a, *b))
            .sum();
        let hr = 0.5 * s.quadratic_form(&d);
        if hs + hr < c * norm(&d).powi(2) - 1e-12 {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn closed_form_matches_double_quadrature() {
    for k in [0.0, 1e-8, 1e-4, 0.3, 1.0, 3.0, 5.5, 20.0, 100.0] {
        let q = gauss_double_integral(k);
        let c = coercivity_integral(k);
        assert!(((c - q) / q).abs() <= 1e-10, "kappa {k}: {c} vs {q}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn detailed_balance_output_is_admissible(
        n in 1usize..5,
        seed in any::<u64>(),
    ) {
        // a_ij = π_j s_ij with s symmetric, so π_i a_ij = π_i π_j s_ij is symmetric
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..5.0)).collect();
        let mut g = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] = rng.gen_range(0.0..2.0);
            }
            g[(i, i)] += 0.5;
        }
        let s = &g * g.transpose();
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = pi[j] * 0.5 * (s[(i, j)] + s[(j, i)]);
            }
        }
        let spec = symmetrize_detailed_balance(&a, &pi, 1e-10).unwrap();
        prop_assert!(validate_diffusion(spec.matrix(), 1e-10).is_ok());
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let back = spec.from_symmetrized(&spec.to_symmetrized(&u));
        for (x, y) in back.iter().zip(&u) {
            prop_assert!((x - y).abs() <= 1e-14 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn coercivity_constant_decreases_in_bound(m in 0.01f64..100.0, f in 1.0f64..10.0) {
        let spec = validate_diffusion(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]), 1e-12).unwrap();
        prop_assert!(coercivity_constant(&spec, m * f).unwrap() <= coercivity_constant(&spec, m).unwrap());
    }
}
