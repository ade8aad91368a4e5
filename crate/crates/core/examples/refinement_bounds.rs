//! A priori bounds on a refinement family (32 to 256 cells, dt = dx/4), the
//! drift slope and self-convergence of the diffusing component.

use crossdiff::bounds::{
    compute_bounds_report, fit_log_slope, oscillation_defect, spread, Level, TestFunction,
};
use crossdiff::mesh::{build_uniform_1d, Mesh};
use crossdiff::run::{integrate, IntegrateOptions};
use crossdiff::scheme::{init_cell_averages, InitialDatum, SchemeConfig};
use crossdiff::specmat::validate_rows;

fn main() {
    let spec = validate_rows(&[vec![0.5, 1.0], vec![1.0, 2.0]], 1e-12).unwrap();
    let datum = InitialDatum::Cosine {
        mean: vec![1.0, 0.6],
        amplitude: vec![0.5, -0.3],
        modes: vec![1.0, 2.0],
    };
    let t = 0.25;
    let mut meshes: Vec<Mesh> = vec![];
    let mut trajectories = vec![];
    let mut reports = vec![];
    for cells in [32, 64, 128, 256] {
        let mesh = build_uniform_1d(0.0, 1.0, cells).unwrap();
        let cfg = SchemeConfig::new(0.25 / cells as f64, t);
        let u0 = init_cell_averages(&mesh, &datum, 2).unwrap();
        let out = integrate(&spec, &mesh, &cfg, &u0, IntegrateOptions::default()).unwrap();
        let r = compute_bounds_report(&spec, &mesh, &cfg, &out.states).unwrap();
        println!(
            "{cells:4} cells: S1 {:.4} S2 {:.4} Flux {:.4} eta*G43 {:.4} Drift {:.3e}",
            r.s1,
            r.s2,
            r.flux_l2l43,
            r.eta_alpha * r.g43,
            r.drift
        );
        reports.push(r);
        meshes.push(mesh);
        trajectories.push(out.states);
    }
    let col = |f: &dyn Fn(&crossdiff::bounds::BoundsReport) -> f64| {
        reports.iter().map(f).collect::<Vec<_>>()
    };
    println!("spread S1 {:.3}", spread(&col(&|r| r.s1)));
    println!(
        "spread eta*G43 {:.3}",
        spread(&col(&|r| r.eta_alpha * r.g43))
    );
    println!(
        "drift slope {:.3}",
        fit_log_slope(&col(&|r| r.eta), &col(&|r| r.drift))
    );

    let levels: Vec<Level> = meshes
        .iter()
        .zip(&trajectories)
        .map(|(mesh, states)| Level { mesh, states })
        .collect();
    let d =
        oscillation_defect(&spec, &levels, TestFunction::ProjectedSquare, (0.1 * t, t)).unwrap();
    println!("defects of |P s|^2: {d:?}");
}
