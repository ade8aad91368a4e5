//! Relative entropy between a coarse run and a fine reference run, against
//! the Gronwall envelope built from the reference gradients.

use crossdiff::entropy::gronwall_monitor;
use crossdiff::mesh::build_uniform_1d;
use crossdiff::run::{integrate, IntegrateOptions};
use crossdiff::scheme::{init_cell_averages, InitialDatum, SchemeConfig};
use crossdiff::specmat::validate_rows;

fn main() {
    let spec = validate_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]], 1e-12).unwrap();
    let datum = |a0: f64, a1: f64| InitialDatum::Cosine {
        mean: vec![1.0, 0.8],
        amplitude: vec![a0, a1],
        modes: vec![1.0, 2.0],
    };
    let coarse = build_uniform_1d(0.0, 1.0, 32).unwrap();
    let fine = build_uniform_1d(0.0, 1.0, 512).unwrap();
    let cfg = SchemeConfig::new(2e-3, 0.5);
    let opts = IntegrateOptions {
        stride: 1,
        edge_checks: false,
    };
    let reference = integrate(
        &spec,
        &fine,
        &cfg,
        &init_cell_averages(&fine, &datum(0.4, -0.3), 2).unwrap(),
        opts,
    )
    .unwrap();

    for (label, d) in [
        ("identical", datum(0.4, -0.3)),
        ("perturbed", datum(0.45, -0.25)),
    ] {
        let u0 = init_cell_averages(&coarse, &d, 2).unwrap();
        let run = integrate(&spec, &coarse, &cfg, &u0, opts).unwrap();
        let g =
            gronwall_monitor(&spec, &coarse, &run.states, &fine, &reference.states, 0.1).unwrap();
        println!(
            "{label}: C = {:.1}, H_rel(0) = {:.3e}, floor {:.3e}, max ratio {:?}",
            g.c, g.h_rel[0], g.floor, g.max_ratio
        );
        for k in (0..g.times.len()).step_by(50) {
            println!("  t {:.2}  H_rel {:.3e}", g.times[k], g.h_rel[k]);
        }
    }
}
