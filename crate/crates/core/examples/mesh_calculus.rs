//! Meshes, discrete Sobolev norms, the dual norm and nested-mesh transfer.

use crossdiff::mesh::{
    build_mesh_1d, build_mesh_rect2d, build_uniform_1d, dual_norm, nesting_map, norm_0q, prolong,
    restrict, seminorm_1q, CellField,
};

fn main() {
    let graded: Vec<f64> = (0..=20).map(|k| (k as f64 / 20.0).powi(2)).collect();
    let m1 = build_mesh_1d(&graded).unwrap();
    println!(
        "graded 1D: {} cells, size {:.4}, zeta {:.4}",
        m1.n_cells(),
        m1.size(),
        m1.zeta()
    );

    let m2 = build_mesh_rect2d(16, 8, 2.0, 1.0).unwrap();
    println!(
        "rect: {} cells, {} interior edges",
        m2.n_cells(),
        m2.interior_edges().len()
    );

    let m = build_uniform_1d(0.0, 1.0, 64).unwrap();
    let v: Vec<f64> = m
        .cells()
        .iter()
        .map(|c| (std::f64::consts::PI * c.center[0]).sin())
        .collect();
    for q in [1.0, 4.0 / 3.0, 2.0] {
        println!(
            "q = {q:.3}: |v|_0,q = {:.6}  |v|_1,q = {:.6}",
            norm_0q(&m, &v, q).unwrap(),
            seminorm_1q(&m, &v, q).unwrap()
        );
    }
    for q in [2.0, 4.0] {
        println!("|v|_-1,{q} = {:.6}", dual_norm(&m, &v, q, 1e-10).unwrap());
    }

    let coarse = build_uniform_1d(0.0, 1.0, 16).unwrap();
    let map = nesting_map(&coarse, &m).unwrap();
    let u = CellField::from_values(1, v);
    let uc = restrict(&m, &coarse, &map, &u);
    let back = prolong(&map, &uc);
    println!(
        "mass fine {:?} coarse {:?} prolonged {:?}",
        u.mass(&m),
        uc.mass(&coarse),
        back.mass(&m)
    );
}
