//! Long-time behavior for B with equal entries: the sum of the densities is a
//! porous-medium flow, and the projected state converges to its mean.

use crossdiff::asymptotics::{
    l2_difference, longtime_run, reduced_sum_oracle, sum_field, LongTimeConfig,
};
use crossdiff::mesh::build_uniform_1d;
use crossdiff::scheme::{init_cell_averages, Block, InitialDatum, SchemeConfig};
use crossdiff::specmat::validate_rows;

fn main() {
    let spec = validate_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]], 1e-12).unwrap();
    let mesh = build_uniform_1d(0.0, 1.0, 64).unwrap();
    let datum = InitialDatum::Blocks {
        background: vec![0.0, 0.0],
        blocks: vec![
            Block {
                lo: vec![0.0],
                hi: vec![0.5],
                value: vec![3.0, 0.0],
            },
            Block {
                lo: vec![0.5],
                hi: vec![1.0],
                value: vec![0.0, 1.0],
            },
        ],
    };
    let u0 = init_cell_averages(&mesh, &datum, 2).unwrap();
    let cfg = SchemeConfig::new(1e-2, 20.0);
    let lt = LongTimeConfig {
        t_max: 20.0,
        tol_steady: 0.0,
        sample_times: vec![0.1, 1.0, 10.0],
        ..Default::default()
    };
    let out = longtime_run(&spec, &mesh, &cfg, &u0, &lt).unwrap();
    println!(
        "u_hat* = {:?}, L-inf bounds {:?}",
        out.info.u_hat_star, out.info.linf_bounds
    );
    for row in out.rows.iter().step_by(200) {
        println!(
            "t {:6.2}  |u_hat - u_hat*| {:.3e}  H_R(u|u*) {:.3e}",
            row.t, row.dist_hat, row.h_r_rel
        );
    }
    println!("monotone: {}", out.verify().is_ok());

    let (scalar, _) = reduced_sum_oracle(&spec, &mesh, &cfg, &u0).unwrap();
    for s in &out.samples {
        let r = scalar
            .states
            .iter()
            .find(|r| (r.time - s.time).abs() < 1e-9)
            .unwrap();
        println!(
            "t {:5.1}: |sum - scalar run| = {:.2e}",
            s.time,
            l2_difference(&mesh, &sum_field(s), r)
        );
    }
}
