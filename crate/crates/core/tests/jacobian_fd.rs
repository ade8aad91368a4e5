mod common;

use common::{fd_mismatch, random_field};
use crossdiff::mesh::{build_mesh_rect2d, build_uniform_1d, CellField, Mesh};
use crossdiff::scheme::{step_jacobian, Mobility, SchemeConfig, Variables};
use crossdiff::specmat::{validate_rows, DiffusionSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STATES: usize = 50;

fn sweep(mesh: &Mesh, spec: &DiffusionSpec, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n();
    for s in 0..STATES {
        let prev = random_field(&mut rng, mesh.n_cells(), n);
        let u = random_field(&mut rng, mesh.n_cells(), n);
        let dt = rng.gen_range(1e-3..1e-1);
        let eta = if s % 5 == 0 {
            0.0
        } else {
            rng.gen_range(0.01..0.3)
        };
        for mobility in [Mobility::Upwind, Mobility::LogMean] {
            let cfg = SchemeConfig::new(dt, 1.0)
                .with_mobility(mobility)
                .with_eta(eta);
            for vars in [Variables::Density, Variables::Entropic] {
                let e = fd_mismatch(spec, mesh, &cfg, &prev, &u, vars);
                assert!(
                    e <= 1e-6,
                    "state {s}, {mobility:?}, {vars:?}: relative mismatch {e:e}"
                );
            }
        }
    }
}

#[test]
fn eight_cells_rank_one() {
    let spec = validate_rows(&[vec![0.5, 1.0], vec![1.0, 2.0]], 1e-12).unwrap();
    sweep(&build_uniform_1d(0.0, 1.0, 8).unwrap(), &spec, 21);
}

#[test]
fn eight_cells_three_species_full_rank() {
    let spec = validate_rows(
        &[
            vec![2.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 1.0],
        ],
        1e-12,
    )
    .unwrap();
    sweep(&build_uniform_1d(-1.0, 2.0, 8).unwrap(), &spec, 22);
}

#[test]
fn rect_three_by_three() {
    let spec = validate_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]], 1e-12).unwrap();
    sweep(&build_mesh_rect2d(3, 3, 1.0, 2.0).unwrap(), &spec, 23);
}

#[test]
fn constant_state_scalar_has_mass_diagonal() {
    let spec = validate_rows(&[vec![1.0]], 1e-12).unwrap();
    let mesh = build_uniform_1d(0.0, 1.0, 6).unwrap();
    let u = CellField::constant(6, &[0.7]);
    let cfg = SchemeConfig::new(0.01, 1.0).with_eta(0.0);
    let jac = step_jacobian(&spec, &mesh, &cfg, &u, &u, Variables::Density)
        .unwrap()
        .to_dense();
    assert!(fd_mismatch(&spec, &mesh, &cfg, &u, &u, Variables::Density) <= 1e-6);
    // constant state: fluxes vanish, and the linearized flux only sees u_σ D p
    for (k, c) in mesh.cells().iter().enumerate() {
        let row: f64 = jac[k].iter().sum();
        assert!((row - c.measure / 0.01).abs() <= 1e-9 * c.measure / 0.01);
    }
}
