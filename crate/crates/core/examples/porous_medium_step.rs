//! One species, b = 1: the scheme reduces to an implicit porous-medium
//! discretization. Runs a few steps from a compactly supported bump.

use std::sync::Arc;

use crossdiff::mesh::build_uniform_1d;
use crossdiff::scheme::{init_cell_averages, InitialDatum, SchemeConfig};
use crossdiff::solver::solve_step_newton;
use crossdiff::specmat::validate_rows;

fn main() {
    let spec = validate_rows(&[vec![1.0]], 1e-12).unwrap();
    let mesh = build_uniform_1d(-1.0, 1.0, 50).unwrap();
    let bump = InitialDatum::Function {
        n: 1,
        f: Arc::new(|x| vec![(1.0 - 4.0 * x[0] * x[0]).max(0.0)]),
    };
    let mut u = init_cell_averages(&mesh, &bump, 1).unwrap();
    let cfg = SchemeConfig::new(1e-3, 1.0);
    let m0 = u.mass(&mesh)[0];
    for k in 1..=10 {
        let r = solve_step_newton(&spec, &mesh, &cfg, &u).unwrap();
        u = r.u_new;
        println!(
            "step {k:2}: newton {} residual {:.2e} min {:.3e} mass drift {:.1e}",
            r.stats.iterations,
            r.stats.residual,
            u.min(),
            (u.mass(&mesh)[0] - m0) / m0
        );
    }
}
