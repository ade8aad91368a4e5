//! Spectral toolkit for the diffusion matrix `B`.
//!
//! Validation against the structural hypotheses (symmetric, positive
//! semidefinite, nonnegative entries, positive diagonal), the square root
//! `B^{1/2}`, the projections onto `ker B` and `ran B`, the detailed-balance
//! symmetrization of a non-symmetric interaction matrix, and the constants
//! entering the coercivity estimate of the relative entropy.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::SpecError;

/// Default relative threshold below which eigenvalues are clamped to zero.
pub const DEFAULT_TOL_PSD: f64 = 1e-12;

/// A validated diffusion matrix together with its spectral data.
#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    n: usize,
    b: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    rank: usize,
    lambda: f64,
    sqrt_b: DMatrix<f64>,
    p_kernel: DMatrix<f64>,
    p_range: DMatrix<f64>,
    a0: f64,
    a1: f64,
    invariant_measure: Option<Vec<f64>>,
}

/// Serializable digest of a [`DiffusionSpec`] for run reports.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralSummary {
    pub n: usize,
    pub matrix: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
    pub lambda: f64,
    pub a0: f64,
    pub a1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariant_measure: Option<Vec<f64>>,
}

impl DiffusionSpec {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    #[inline]
    pub fn b(&self, i: usize, j: usize) -> f64 {
        self.b[(i, j)]
    }

    /// Eigenvalues of `B`, nonincreasing, with the kernel clamped to zero.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors (columns), ordered like [`Self::eigenvalues`].
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Smallest positive eigenvalue of `B^{1/2}`.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sqrt_b(&self) -> &DMatrix<f64> {
        &self.sqrt_b
    }

    /// Orthogonal projection onto `ker B`.
    pub fn p_kernel(&self) -> &DMatrix<f64> {
        &self.p_kernel
    }

    /// Orthogonal projection onto `ran B = (ker B)^⊥`.
    pub fn p_range(&self) -> &DMatrix<f64> {
        &self.p_range
    }

    /// `a0 = min_i b_ii / 2`.
    pub fn a0(&self) -> f64 {
        self.a0
    }

    /// `a1 = ||B||_2`.
    pub fn a1(&self) -> f64 {
        self.a1
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.n
    }

    /// Weights `pi` of the detailed-balance change of variables, when the
    /// matrix came from [`symmetrize_detailed_balance`].
    pub fn invariant_measure(&self) -> Option<&[f64]> {
        self.invariant_measure.as_deref()
    }

    /// Maps original densities `u` to symmetrized ones `pi_j u_j`.
    pub fn to_symmetrized(&self, u: &[f64]) -> Vec<f64> {
        match &self.invariant_measure {
            Some(pi) => u.iter().zip(pi).map(|(a, p)| a * p).collect(),
            None => u.to_vec(),
        }
    }

    /// Inverse of [`Self::to_symmetrized`].
    pub fn from_symmetrized(&self, u: &[f64]) -> Vec<f64> {
        match &self.invariant_measure {
            Some(pi) => u.iter().zip(pi).map(|(a, p)| a / p).collect(),
            None => u.to_vec(),
        }
    }

    /// `B z` into `out`.
    #[inline]
    pub fn apply_into(&self, z: &[f64], out: &mut [f64]) {
        apply(&self.b, z, out);
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        apply(&self.b, z, &mut out);
        out
    }

    pub fn apply_sqrt(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        apply(&self.sqrt_b, z, &mut out);
        out
    }

    /// `z^T B z`.
    pub fn quadratic_form(&self, z: &[f64]) -> f64 {
        let mut q = 0.0;
        for i in 0..self.n {
            let mut row = 0.0;
            for j in 0..self.n {
                row += self.b[(i, j)] * z[j];
            }
            q += z[i] * row;
        }
        q
    }

    pub fn summary(&self) -> SpectralSummary {
        SpectralSummary {
            n: self.n,
            matrix: (0..self.n)
                .map(|i| (0..self.n).map(|j| self.b[(i, j)]).collect())
                .collect(),
            eigenvalues: self.eigenvalues.clone(),
            rank: self.rank,
            lambda: self.lambda,
            a0: self.a0,
            a1: self.a1,
            invariant_measure: self.invariant_measure.clone(),
        }
    }
}

#[inline]
fn apply(m: &DMatrix<f64>, z: &[f64], out: &mut [f64]) {
    let n = m.nrows();
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += m[(i, j)] * z[j];
        }
        out[i] = s;
    }
}

/// Validates `B` and computes its spectral data.
///
/// Eigenvalues in `[-tol_psd * λ_max, tol_psd * λ_max]` are clamped to zero
/// and span `ker B`; anything more negative is rejected.
pub fn validate_diffusion(b: &DMatrix<f64>, tol_psd: f64) -> Result<DiffusionSpec, SpecError> {
    let (rows, cols) = b.shape();
    if rows != cols {
        return Err(SpecError::NotSquare { rows, cols });
    }
    let n = rows;
    if n == 0 {
        return Err(SpecError::ZeroRank);
    }
    for i in 0..n {
        for j in 0..n {
            if !b[(i, j)].is_finite() {
                return Err(SpecError::NonFinite(i, j));
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if b[(i, j)] != b[(j, i)] {
                return Err(SpecError::NotSymmetric {
                    i,
                    j,
                    bij: b[(i, j)],
                    bji: b[(j, i)],
                });
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if b[(i, j)] < 0.0 {
                return Err(SpecError::NonnegativityViolation {
                    i,
                    j,
                    value: b[(i, j)],
                });
            }
        }
    }

    let eig = SymmetricEigen::new(b.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[q].total_cmp(&eig.eigenvalues[p]));
    let lambda_max = eig.eigenvalues[order[0]];
    let threshold = tol_psd * lambda_max.abs();
    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = DMatrix::<f64>::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut ev = eig.eigenvalues[k];
        if ev < -threshold {
            return Err(SpecError::NotPsd { eigenvalue: ev });
        }
        if ev <= threshold {
            ev = 0.0;
        }
        eigenvalues.push(ev);
        eigenvectors.set_column(col, &eig.eigenvectors.column(k));
    }

    for i in 0..n {
        if b[(i, i)] <= 0.0 {
            return Err(SpecError::DegenerateDiagonal {
                i,
                value: b[(i, i)],
            });
        }
    }

    let rank = eigenvalues.iter().filter(|&&e| e > 0.0).count();
    if rank == 0 {
        return Err(SpecError::ZeroRank);
    }

    let mut sqrt_b = DMatrix::<f64>::zeros(n, n);
    let mut p_kernel = DMatrix::<f64>::zeros(n, n);
    let mut p_range = DMatrix::<f64>::zeros(n, n);
    for (col, &ev) in eigenvalues.iter().enumerate() {
        let v = eigenvectors.column(col);
        let outer = &v * v.transpose();
        if ev > 0.0 {
            sqrt_b += &outer * ev.sqrt();
            p_range += &outer;
        } else {
            p_kernel += &outer;
        }
    }
    // enforce exact symmetry of the reconstructed matrices
    for m in [&mut sqrt_b, &mut p_kernel, &mut p_range] {
        for i in 0..n {
            for j in i + 1..n {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
    }

    let smallest_positive = eigenvalues[rank - 1];
    let a0 = 0.5 * (0..n).map(|i| b[(i, i)]).fold(f64::INFINITY, f64::min);
    let a1 = eigenvalues[0];

    Ok(DiffusionSpec {
        n,
        b: b.clone(),
        eigenvalues,
        eigenvectors,
        rank,
        lambda: smallest_positive.sqrt(),
        sqrt_b,
        p_kernel,
        p_range,
        a0,
        a1,
        invariant_measure: None,
    })
}

/// Convenience wrapper taking rows.
pub fn validate_rows(rows: &[Vec<f64>], tol_psd: f64) -> Result<DiffusionSpec, SpecError> {
    let n = rows.len();
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) || cols != n {
        return Err(SpecError::NotSquare { rows: n, cols });
    }
    let b = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    validate_diffusion(&b, tol_psd)
}

/// Turns a detailed-balance interaction matrix `A` with invariant measure `pi`
/// into the symmetric matrix `b_ij = a_ij / pi_j` acting on `pi_j u_j`.
pub fn symmetrize_detailed_balance(
    a: &DMatrix<f64>,
    pi: &[f64],
    tol_psd: f64,
) -> Result<DiffusionSpec, SpecError> {
    let (rows, cols) = a.shape();
    if rows != cols || pi.len() != rows {
        return Err(SpecError::NotSquare { rows, cols });
    }
    let n = rows;
    for (i, &p) in pi.iter().enumerate() {
        if !(p > 0.0) || !p.is_finite() {
            return Err(SpecError::InvalidInvariantMeasure { i, value: p });
        }
    }
    for i in 0..n {
        for j in 0..n {
            if !a[(i, j)].is_finite() {
                return Err(SpecError::NonFinite(i, j));
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let lhs = pi[i] * a[(i, j)];
            let rhs = pi[j] * a[(j, i)];
            let scale = lhs.abs().max(rhs.abs());
            if (lhs - rhs).abs() > 1e-12 * scale {
                return Err(SpecError::DetailedBalanceViolated { i, j, lhs, rhs });
            }
        }
    }
    let b = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            a[(i, i)] / pi[i]
        } else {
            0.5 * (a[(i, j)] / pi[j] + a[(j, i)] / pi[i])
        }
    });
    let mut spec = validate_diffusion(&b, tol_psd)?;
    spec.invariant_measure = Some(pi.to_vec());
    Ok(spec)
}

/// `P_{L^⊥} z`.
pub fn project_range(spec: &DiffusionSpec, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; spec.n];
    apply(&spec.p_range, z, &mut out);
    out
}

/// `P_L z`.
pub fn project_kernel(spec: &DiffusionSpec, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; spec.n];
    apply(&spec.p_kernel, z, &mut out);
    out
}

/// Moore–Penrose pseudoinverse of `B` applied to `z`.
pub fn pseudo_inverse_apply(spec: &DiffusionSpec, z: &[f64]) -> Vec<f64> {
    let v = &spec.eigenvectors;
    let zv = DVector::from_column_slice(z);
    let coeffs = v.transpose() * zv;
    let mut out = DVector::<f64>::zeros(spec.n);
    for (k, &ev) in spec.eigenvalues.iter().enumerate() {
        if ev > 0.0 {
            out += v.column(k) * (coeffs[k] / ev);
        }
    }
    out.iter().copied().collect()
}

/// `∫_0^1 ∫_0^θ ds dθ / (κ s + 1) = ((1+κ) ln(1+κ) − κ) / κ²`.
pub fn coercivity_integral(kappa: f64) -> f64 {
    if kappa.abs() < 1e-3 {
        // ∫_0^1 (1 − s) (−κ s)^k ds = (−κ)^k / ((k+1)(k+2))
        let mut sum = 0.0;
        let mut pow = 1.0;
        for k in 0..12 {
            sum += pow / ((k + 1) as f64 * (k + 2) as f64);
            pow *= -kappa;
        }
        sum
    } else {
        ((1.0 + kappa) * kappa.ln_1p() - kappa) / (kappa * kappa)
    }
}

/// Coercivity constant `c_* = min{a0/3, c1}` with
/// `c1 = (1/M) ∫_0^1 ∫_0^θ ds dθ / (s(2 a1/a0 − 1) + 1)`, so that
/// `h_S(u|v) + h_R(u|v) >= c_* |u − v|²` whenever `0 < v_i <= M`.
pub fn coercivity_constant(spec: &DiffusionSpec, m: f64) -> Result<f64, SpecError> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(SpecError::InvalidBound(m));
    }
    let kappa = 2.0 * spec.a1 / spec.a0 - 1.0;
    let c1 = coercivity_integral(kappa) / m;
    Ok((spec.a0 / 3.0).min(c1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(rows: &[&[f64]]) -> Result<DiffusionSpec, SpecError> {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        validate_rows(&v, DEFAULT_TOL_PSD)
    }

    #[test]
    fn identity_is_full_rank() {
        let s = spec(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(s.rank(), 2);
        assert_relative_eq!(s.lambda(), 1.0, epsilon = 1e-14);
        assert!(s.p_kernel().iter().all(|v| v.abs() < 1e-14));
        assert_relative_eq!(s.a0(), 0.5);
        assert_relative_eq!(s.a1(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn all_ones_has_rank_one() {
        let s = spec(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        assert_eq!(s.rank(), 1);
        assert_relative_eq!(s.eigenvalues()[0], 2.0, epsilon = 1e-14);
        assert_eq!(s.eigenvalues()[1], 0.0);
        assert_relative_eq!(s.lambda(), 2f64.sqrt(), epsilon = 1e-14);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(s.p_range()[(i, j)], 0.5, epsilon = 1e-14);
            }
        }
        assert_eq!(s.summary().rank, 1);
    }

    #[test]
    fn rejection_paths() {
        assert!(matches!(
            spec(&[&[0.0, 1.0], &[1.0, 0.0]]),
            Err(SpecError::NotPsd { .. })
        ));
        assert!(matches!(
            spec(&[&[1.0, 0.0], &[0.0, 0.0]]),
            Err(SpecError::DegenerateDiagonal { i: 1, .. })
        ));
        assert!(matches!(
            spec(&[&[1.0, 0.5], &[0.4, 1.0]]),
            Err(SpecError::NotSymmetric { .. })
        ));
        assert!(matches!(
            spec(&[&[1.0, -0.1], &[-0.1, 1.0]]),
            Err(SpecError::NonnegativityViolation { .. })
        ));
        assert!(matches!(
            spec(&[&[1.0, f64::NAN], &[f64::NAN, 1.0]]),
            Err(SpecError::NonFinite(..))
        ));
        assert!(matches!(
            validate_diffusion(&DMatrix::zeros(0, 0), DEFAULT_TOL_PSD),
            Err(SpecError::ZeroRank)
        ));
    }

    #[test]
    fn detailed_balance_two_species_model() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let s = symmetrize_detailed_balance(&a, &[2.0, 1.0], DEFAULT_TOL_PSD).unwrap();
        assert_eq!(s.b(0, 0), 0.5);
        assert_eq!(s.b(0, 1), 1.0);
        assert_eq!(s.b(1, 0), 1.0);
        assert_eq!(s.b(1, 1), 2.0);
        assert_eq!(s.rank(), 1);
        assert_eq!(s.to_symmetrized(&[1.0, 3.0]), vec![2.0, 3.0]);
        assert_eq!(s.from_symmetrized(&[2.0, 3.0]), vec![1.0, 3.0]);

        let id = symmetrize_detailed_balance(&DMatrix::identity(3, 3), &[1.0; 3], 1e-12).unwrap();
        assert_eq!(id.matrix(), &DMatrix::<f64>::identity(3, 3));

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 3.0, 2.0]);
        assert!(matches!(
            symmetrize_detailed_balance(&bad, &[2.0, 1.0], 1e-12),
            Err(SpecError::DetailedBalanceViolated { i: 0, j: 1, .. })
        ));
    }

    #[test]
    fn range_projection_examples() {
        let s = spec(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let z = project_range(&s, &[1.0, -1.0]);
        assert!(z.iter().all(|v| v.abs() < 1e-15));
        let z = project_range(&s, &[1.0, 0.0]);
        assert_relative_eq!(z[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(z[1], 0.5, epsilon = 1e-15);
        let id = spec(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(project_range(&id, &[0.3, -7.0]), vec![0.3, -7.0]);
    }

    #[test]
    fn pseudo_inverse_on_range() {
        let s = spec(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let x = pseudo_inverse_apply(&s, &[2.0, 2.0]);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-14);
    }

    /// Composite Gauss–Legendre quadrature of the inner-integrated form
    /// `∫_0^1 (1 − s)/(κ s + 1) ds`, computed independently of the closed form.
    fn quadrature_oracle(kappa: f64) -> f64 {
        let nodes = [
            (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
            (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.0, 0.568_888_888_888_888_9),
            (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
            (0.906_179_845_938_664, 0.236_926_885_056_189_1),
        ];
        // panels graded toward s = 0, where 1/(κ s + 1) varies fastest
        let panels = 400;
        let edge = |p: usize| (p as f64 / panels as f64).powi(3);
        let mut total = 0.0;
        for p in 0..panels {
            let (a, b) = (edge(p), edge(p + 1));
            let (mid, h) = (0.5 * (a + b), b - a);
            for &(x, w) in &nodes {
                let s = mid + 0.5 * h * x;
                total += 0.5 * h * w * (1.0 - s) / (kappa * s + 1.0);
            }
        }
        total
    }

    #[test]
    fn coercivity_closed_form_matches_quadrature() {
        for &k in &[0.0, 1e-6, 1e-3, 0.5, 1.0, 3.0, 7.0, 50.0, 1e3] {
            assert_relative_eq!(
                coercivity_integral(k),
                quadrature_oracle(k),
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn coercivity_constant_examples() {
        // B = I: a0 = 1/2, a1 = 1, κ = 3, c1 = 4 ln 4 / 9 − 1/3 ≈ 0.282797
        let id = spec(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let c1 = 4.0 * 4f64.ln() / 9.0 - 1.0 / 3.0;
        assert_relative_eq!(c1, 0.282_797_493_831_062_5, epsilon = 1e-12);
        assert_relative_eq!(
            coercivity_constant(&id, 1.0).unwrap(),
            1.0 / 6.0,
            epsilon = 1e-15
        );
        // B = 2I: a0 = 1, a1 = 2, κ = 3 again, c* = min(1/3, c1) = c1
        let two = spec(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap();
        assert_relative_eq!(coercivity_constant(&two, 1.0).unwrap(), c1, epsilon = 1e-14);
        // decays like 1/M past the crossover
        let mut prev = f64::INFINITY;
        for m in [1.0, 2.0, 4.0, 8.0, 100.0, 1e6] {
            let c = coercivity_constant(&id, m).unwrap();
            assert!(c <= prev);
            prev = c;
        }
        assert!(prev < 1e-6);
        assert!(matches!(
            coercivity_constant(&id, 0.0),
            Err(SpecError::InvalidBound(_))
        ));
    }
}
