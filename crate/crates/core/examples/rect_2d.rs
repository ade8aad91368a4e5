//! Two species on a rectangle with the log-mean mobility.

use crossdiff::mesh::build_mesh_rect2d;
use crossdiff::run::{integrate, IntegrateOptions};
use crossdiff::scheme::{init_cell_averages, Block, InitialDatum, Mobility, SchemeConfig};
use crossdiff::specmat::validate_rows;

fn main() {
    let spec = validate_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]], 1e-12).unwrap();
    let mesh = build_mesh_rect2d(16, 16, 1.0, 1.0).unwrap();
    let datum = InitialDatum::Blocks {
        background: vec![0.2, 0.2],
        blocks: vec![
            Block {
                lo: vec![0.0, 0.0],
                hi: vec![0.5, 0.5],
                value: vec![1.5, 0.0],
            },
            Block {
                lo: vec![0.25, 0.5],
                hi: vec![1.0, 1.0],
                value: vec![0.0, 1.0],
            },
        ],
    };
    let u0 = init_cell_averages(&mesh, &datum, 2).unwrap();
    let cfg = SchemeConfig::new(5e-3, 0.1).with_mobility(Mobility::LogMean);
    let out = integrate(
        &spec,
        &mesh,
        &cfg,
        &u0,
        IntegrateOptions {
            stride: 5,
            edge_checks: true,
        },
    )
    .unwrap();
    for s in &out.states {
        println!("t {:.3}  min {:.4}  max {:.4}", s.time, s.min(), s.max());
    }
    println!(
        "mass defect {:.1e}, edge identity defect {:.1e}",
        out.ledger.max_mass_defect(),
        out.max_edge_defect
    );
}
