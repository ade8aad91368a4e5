//! Two segregated species with a rank-one diffusion matrix. Prints the
//! entropy ledger every 100 steps.

use crossdiff::mesh::build_uniform_1d;
use crossdiff::run::{integrate, IntegrateOptions};
use crossdiff::scheme::{init_cell_averages, Block, InitialDatum, Mobility, SchemeConfig};
use crossdiff::specmat::validate_rows;

fn main() {
    let spec = validate_rows(&[vec![0.5, 1.0], vec![1.0, 2.0]], 1e-12).unwrap();
    let mesh = build_uniform_1d(0.0, 1.0, 64).unwrap();
    let datum = InitialDatum::Blocks {
        background: vec![0.5, 0.5],
        blocks: vec![
            Block {
                lo: vec![0.0],
                hi: vec![0.5],
                value: vec![1.0, 0.0],
            },
            Block {
                lo: vec![0.5],
                hi: vec![1.0],
                value: vec![0.0, 1.0],
            },
        ],
    };
    let u0 = init_cell_averages(&mesh, &datum, 2).unwrap();
    for mobility in [Mobility::Upwind, Mobility::LogMean] {
        let cfg = SchemeConfig::new(1e-3, 0.5).with_mobility(mobility);
        let out = integrate(&spec, &mesh, &cfg, &u0, IntegrateOptions::default()).unwrap();
        println!("{mobility:?}");
        println!(
            "{:>6} {:>12} {:>12} {:>10} {:>10}",
            "t", "H_S", "H_R", "r_S", "r_R"
        );
        for row in out.ledger.rows().iter().step_by(100) {
            println!(
                "{:6.3} {:12.8} {:12.8} {:10.2e} {:10.2e}",
                row.t, row.h_s, row.h_r, row.r_s, row.r_r
            );
        }
        println!(
            "mass defect {:.1e}, min density {:.3e}, edge defect {:.1e}\n",
            out.ledger.max_mass_defect(),
            out.ledger.min_density(),
            out.max_edge_defect
        );
    }
}
