//! Validate a diffusion matrix, symmetrize a detailed-balance system and
//! print the spectral constants used everywhere else.

use crossdiff::specmat::{
    coercivity_constant, project_kernel, project_range, symmetrize_detailed_balance, validate_rows,
};
use nalgebra::DMatrix;

fn main() {
    let b = validate_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]], 1e-12).unwrap();
    println!("full rank: {:?}", b.summary());

    // A is not symmetric, but pi_i a_ij = pi_j a_ji
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
    let s = symmetrize_detailed_balance(&a, &[2.0, 1.0], 1e-12).unwrap();
    let sum = s.summary();
    println!("symmetrized B = {:?}", sum.matrix);
    println!(
        "rank {} lambda {} a0 {} a1 {}",
        sum.rank, sum.lambda, sum.a0, sum.a1
    );

    let z = [1.0, 1.0];
    println!(
        "P_range z = {:?}, P_kernel z = {:?}",
        project_range(&s, &z),
        project_kernel(&s, &z)
    );

    for m in [0.5, 1.0, 4.0] {
        println!("c_* (M = {m}) = {:.6}", coercivity_constant(&b, m).unwrap());
    }

    match validate_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]], 1e-12) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
}
