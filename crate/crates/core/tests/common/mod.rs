//! Oracles shared by the property suites and the acceptance runner.
#![allow(dead_code)]

use crossdiff::mesh::{CellField, Mesh};
use crossdiff::scheme::{step_jacobian, step_residual, SchemeConfig, Variables};
use crossdiff::specmat::{validate_diffusion, DiffusionSpec};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-7;

/// `G G^T` with `G >= 0` of random rank, every row of `G` nonzero so the
/// diagonal stays positive.
pub fn random_spec(rng: &mut ChaCha8Rng) -> DiffusionSpec {
    let n = rng.gen_range(1..=6);
    let r = rng.gen_range(1..=n);
    let mut g = DMatrix::<f64>::zeros(n, r);
    for i in 0..n {
        for j in 0..r {
            if rng.gen_bool(0.7) {
                g[(i, j)] = rng.gen_range(0.0..3.0);
            }
        }
        let j = rng.gen_range(0..r);
        g[(i, j)] += 0.1 + rng.gen::<f64>();
    }
    let b = &g * g.transpose();
    let b = (&b + b.transpose()) * 0.5;
    validate_diffusion(&b, 1e-13).expect("G G^T with G >= 0 is admissible")
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn gauss_double_integral(kappa: f64) -> f64 {
    // ∫_0^1 ∫_0^θ ds / (κ s + 1) dθ as a genuine 2D tensor-product rule
    let (x, w) = gauss_legendre_16();
    let panels = 64;
    let mut total = 0.0;
    for p in 0..panels {
        let (a, b) = (p as f64 / panels as f64, (p + 1) as f64 / panels as f64);
        for (xi, wi) in x.iter().zip(&w) {
            let theta = 0.5 * (a + b) + 0.5 * (b - a) * xi;
            let mut inner = 0.0;
            for q in 0..panels {
                let (c, d) = (
                    theta * q as f64 / panels as f64,
                    theta * (q + 1) as f64 / panels as f64,
                );
                for (xj, wj) in x.iter().zip(&w) {
                    let s = 0.5 * (c + d) + 0.5 * (d - c) * xj;
                    inner += 0.5 * (d - c) * wj / (kappa * s + 1.0);
                }
            }
            total += 0.5 * (b - a) * wi * inner;
        }
    }
    total
}

fn gauss_legendre_16() -> (Vec<f64>, Vec<f64>) {
    // Newton on P_16 from Chebyshev guesses
    let n = 16;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

fn residual(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    prev: &CellField,
    u: &[f64],
) -> Vec<f64> {
    let n = spec.n();
    step_residual(
        spec,
        mesh,
        cfg,
        prev,
        &CellField::from_values(n, u.to_vec()),
    )
    .unwrap()
    .into_values()
}

/// Largest entry of `J - J_fd` relative to the largest entry of `J`.
/// Central differences in the chosen unknowns (`u` or `w = log u`).
pub fn fd_mismatch(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    prev: &CellField,
    u: &CellField,
    vars: Variables,
) -> f64 {
    let jac = step_jacobian(spec, mesh, cfg, prev, u, vars)
        .unwrap()
        .to_dense();
    let x0 = u.values().to_vec();
    let dim = x0.len();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for j in 0..dim {
        let (mut up, mut dn) = (x0.clone(), x0.clone());
        let h = match vars {
            Variables::Density => {
                let h = STEP * x0[j].abs().max(1e-3);
                up[j] += h;
                dn[j] -= h;
                h
            }
            Variables::Entropic => {
                up[j] = x0[j] * STEP.exp();
                dn[j] = x0[j] * (-STEP).exp();
                STEP
            }
        };
        let rp = residual(spec, mesh, cfg, prev, &up);
        let rm = residual(spec, mesh, cfg, prev, &dn);
        for i in 0..dim {
            let fd = (rp[i] - rm[i]) / (2.0 * h);
            worst = worst.max((fd - jac[i][j]).abs());
            scale = scale.max(jac[i][j].abs());
        }
    }
    worst / scale
}

pub fn random_field(rng: &mut ChaCha8Rng, cells: usize, n: usize) -> CellField {
    CellField::from_values(
        n,
        (0..cells * n).map(|_| rng.gen_range(0.05..3.0)).collect(),
    )
}
