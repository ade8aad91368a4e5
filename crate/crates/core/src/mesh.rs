//! Admissible finite-volume meshes and the discrete calculus built on them.
//!
//! Two families are supported: arbitrary partitions of an interval and uniform
//! tensor-product rectangles. Both satisfy the orthogonality condition by
//! construction, so the two-point flux `τ_σ (v_L − v_K)` is consistent.
//!
//! In 1D the measure of an edge (a point) is taken to be 1, which keeps the
//! transmissibility `τ_σ = m̃(σ)/d_σ` and all norm formulas dimension-uniform.

use serde::Serialize;

use crate::error::MeshError;
use crate::linalg::BandMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub center: [f64; 2],
    pub measure: f64,
}

/// Interior edge `σ = K|L`. The normal points from `K` to `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InteriorEdge {
    pub k: usize,
    pub l: usize,
    pub measure: f64,
    /// `d_σ = d(x_K, x_L)`.
    pub dist: f64,
    /// `d(x_K, σ)`.
    pub dist_k: f64,
    /// `d(x_L, σ)`.
    pub dist_l: f64,
    pub normal: [f64; 2],
    pub transmissibility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExteriorEdge {
    pub k: usize,
    pub measure: f64,
    /// `d_σ = d(x_K, σ)`.
    pub dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MeshFamily {
    Interval {
        edges: Vec<f64>,
    },
    Rect {
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct Mesh {
    dim: usize,
    family: MeshFamily,
    cells: Vec<Cell>,
    interior: Vec<InteriorEdge>,
    exterior: Vec<ExteriorEdge>,
    zeta: f64,
    size: f64,
    domain_measure: f64,
}

impl Mesh {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> &MeshFamily {
        &self.family
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn interior_edges(&self) -> &[InteriorEdge] {
        &self.interior
    }

    pub fn exterior_edges(&self) -> &[ExteriorEdge] {
        &self.exterior
    }

    /// Regularity constant: `d(x_K, σ) >= ζ d_σ` for all `K`, `σ ∈ E_K`.
    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// `Δx = max_K diam(K)`.
    pub fn size(&self) -> f64 {
        self.size
    }

    pub fn domain_measure(&self) -> f64 {
        self.domain_measure
    }

    /// Half-bandwidth of cell-major operators with `n` unknowns per cell.
    pub fn bandwidth(&self, n: usize) -> usize {
        let max_gap = self
            .interior
            .iter()
            .map(|e| e.l.abs_diff(e.k))
            .max()
            .unwrap_or(0);
        (max_gap + 1) * n - 1
    }

    /// Measures of the two halves `T_{K,σ}` and `T_{L,σ}` of a diamond.
    pub fn dual_halves(&self, e: &InteriorEdge) -> (f64, f64) {
        let d = self.dim as f64;
        (e.measure * e.dist_k / d, e.measure * e.dist_l / d)
    }

    /// Measure of the whole diamond around `σ`, equal to `m̃(σ) d_σ / d`.
    pub fn diamond_measure(&self, e: &InteriorEdge) -> f64 {
        e.measure * e.dist / self.dim as f64
    }

    /// Measure of the boundary triangle `T_{K,σ}`.
    pub fn exterior_dual_measure(&self, e: &ExteriorEdge) -> f64 {
        e.measure * e.dist / self.dim as f64
    }

    /// Cell containing a point (closed on the left/bottom), if any.
    pub fn locate(&self, x: [f64; 2]) -> Option<usize> {
        match &self.family {
            MeshFamily::Interval { edges } => {
                if x[0] < edges[0] || x[0] > edges[edges.len() - 1] {
                    return None;
                }
                let idx = edges.partition_point(|&e| e <= x[0]);
                Some(idx.saturating_sub(1).min(edges.len() - 2))
            }
            MeshFamily::Rect { nx, ny, lx, ly } => {
                if x[0] < 0.0 || x[0] > *lx || x[1] < 0.0 || x[1] > *ly {
                    return None;
                }
                let i = ((x[0] / lx * *nx as f64) as usize).min(nx - 1);
                let j = ((x[1] / ly * *ny as f64) as usize).min(ny - 1);
                Some(j * nx + i)
            }
        }
    }

    /// Axis-aligned bounds `(lo, hi)` of a cell.
    pub fn cell_bounds(&self, k: usize) -> ([f64; 2], [f64; 2]) {
        match &self.family {
            MeshFamily::Interval { edges } => ([edges[k], 0.0], [edges[k + 1], 0.0]),
            MeshFamily::Rect { nx, ny, lx, ly } => {
                let hx = lx / *nx as f64;
                let hy = ly / *ny as f64;
                let (i, j) = (k % nx, k / nx);
                (
                    [i as f64 * hx, j as f64 * hy],
                    [(i + 1) as f64 * hx, (j + 1) as f64 * hy],
                )
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mesh serializes")
    }
}

/// Builds a 1D mesh from the sorted cell boundaries `a = x_0 < ... < x_N = b`.
pub fn build_mesh_1d(cell_edges: &[f64]) -> Result<Mesh, MeshError> {
    if cell_edges.len() < 3 {
        return Err(MeshError::TooFewCells {
            min: 2,
            got: cell_edges.len().saturating_sub(1),
        });
    }
    for (idx, w) in cell_edges.windows(2).enumerate() {
        if !(w[1] > w[0]) || !w[0].is_finite() || !w[1].is_finite() {
            return Err(MeshError::NonMonotoneEdges { index: idx + 1 });
        }
    }
    let cells: Vec<Cell> = cell_edges
        .windows(2)
        .map(|w| Cell {
            center: [0.5 * (w[0] + w[1]), 0.0],
            measure: w[1] - w[0],
        })
        .collect();
    let nc = cells.len();
    let mut interior = Vec::with_capacity(nc - 1);
    for k in 0..nc - 1 {
        let x = cell_edges[k + 1];
        let dist_k = x - cells[k].center[0];
        let dist_l = cells[k + 1].center[0] - x;
        let dist = cells[k + 1].center[0] - cells[k].center[0];
        interior.push(InteriorEdge {
            k,
            l: k + 1,
            measure: 1.0,
            dist,
            dist_k,
            dist_l,
            normal: [1.0, 0.0],
            transmissibility: 1.0 / dist,
        });
    }
    let exterior = vec![
        ExteriorEdge {
            k: 0,
            measure: 1.0,
            dist: 0.5 * cells[0].measure,
        },
        ExteriorEdge {
            k: nc - 1,
            measure: 1.0,
            dist: 0.5 * cells[nc - 1].measure,
        },
    ];
    let zeta = interior
        .iter()
        .map(|e| e.dist_k.min(e.dist_l) / e.dist)
        .fold(1.0f64, f64::min);
    let size = cells.iter().map(|c| c.measure).fold(0.0, f64::max);
    Ok(Mesh {
        dim: 1,
        family: MeshFamily::Interval {
            edges: cell_edges.to_vec(),
        },
        domain_measure: cell_edges[nc] - cell_edges[0],
        cells,
        interior,
        exterior,
        zeta,
        size,
    })
}

/// Uniform partition of `[a, b]` into `cells` intervals.
pub fn build_uniform_1d(a: f64, b: f64, cells: usize) -> Result<Mesh, MeshError> {
    if !(b > a) {
        return Err(MeshError::NonMonotoneEdges { index: 1 });
    }
    if cells < 2 {
        return Err(MeshError::TooFewCells { min: 2, got: cells });
    }
    let h = (b - a) / cells as f64;
    let mut edges: Vec<f64> = (0..=cells).map(|i| a + i as f64 * h).collect();
    edges[cells] = b;
    build_mesh_1d(&edges)
}

/// Uniform `nx x ny` rectangles on `[0, lx] x [0, ly]`; cell `(i, j)` has
/// index `j * nx + i`.
pub fn build_mesh_rect2d(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Mesh, MeshError> {
    if nx < 2 || ny < 2 {
        return Err(MeshError::InvalidDimensions(format!(
            "need nx, ny >= 2, got {nx} x {ny}"
        )));
    }
    if !(lx > 0.0 && ly > 0.0) || !lx.is_finite() || !ly.is_finite() {
        return Err(MeshError::InvalidDimensions(format!(
            "need positive lengths, got {lx} x {ly}"
        )));
    }
    let hx = lx / nx as f64;
    let hy = ly / ny as f64;
    let mut cells = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            cells.push(Cell {
                center: [(i as f64 + 0.5) * hx, (j as f64 + 0.5) * hy],
                measure: hx * hy,
            });
        }
    }
    let mut interior = Vec::new();
    let mut exterior = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            if i + 1 < nx {
                interior.push(InteriorEdge {
                    k,
                    l: k + 1,
                    measure: hy,
                    dist: hx,
                    dist_k: 0.5 * hx,
                    dist_l: 0.5 * hx,
                    normal: [1.0, 0.0],
                    transmissibility: hy / hx,
                });
            }
            if j + 1 < ny {
                interior.push(InteriorEdge {
                    k,
                    l: k + nx,
                    measure: hx,
                    dist: hy,
                    dist_k: 0.5 * hy,
                    dist_l: 0.5 * hy,
                    normal: [0.0, 1.0],
                    transmissibility: hx / hy,
                });
            }
            if i == 0 || i + 1 == nx {
                for _ in 0..(if nx == 1 { 2 } else { 1 }) {
                    exterior.push(ExteriorEdge {
                        k,
                        measure: hy,
                        dist: 0.5 * hx,
                    });
                }
            }
            if j == 0 || j + 1 == ny {
                exterior.push(ExteriorEdge {
                    k,
                    measure: hx,
                    dist: 0.5 * hy,
                });
            }
        }
    }
    Ok(Mesh {
        dim: 2,
        family: MeshFamily::Rect { nx, ny, lx, ly },
        cells,
        interior,
        exterior,
        zeta: 0.5,
        size: (hx * hx + hy * hy).sqrt(),
        domain_measure: lx * ly,
    })
}

/// Piecewise-constant vector field: `n` species per cell, stored cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    n: usize,
    values: Vec<f64>,
    pub time: f64,
}

impl CellField {
    pub fn zeros(n_cells: usize, n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n_cells * n],
            time: 0.0,
        }
    }

    pub fn from_values(n: usize, values: Vec<f64>) -> Self {
        assert!(n > 0 && values.len() % n == 0);
        Self {
            n,
            values,
            time: 0.0,
        }
    }

    pub fn constant(n_cells: usize, state: &[f64]) -> Self {
        let n = state.len();
        let mut values = Vec::with_capacity(n_cells * n);
        for _ in 0..n_cells {
            values.extend_from_slice(state);
        }
        Self {
            n,
            values,
            time: 0.0,
        }
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.time = t;
        self
    }

    pub fn n_species(&self) -> usize {
        self.n
    }

    pub fn n_cells(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The `n`-vector of cell `k`.
    #[inline]
    pub fn cell(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    #[inline]
    pub fn cell_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n..(k + 1) * self.n]
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.n + i]
    }

    /// One species as a scalar per-cell vector.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(i)
            .step_by(self.n)
            .copied()
            .collect()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Applies a per-cell linear map `z ↦ A z`.
    pub fn map_cells(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> CellField {
        let mut values = Vec::with_capacity(self.values.len());
        let mut n = self.n;
        for chunk in self.values.chunks(self.n) {
            let out = f(chunk);
            n = out.len();
            values.extend(out);
        }
        CellField {
            n,
            values,
            time: self.time,
        }
    }

    /// `∫ u_i dx` per species.
    pub fn mass(&self, mesh: &Mesh) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        for (k, c) in mesh.cells().iter().enumerate() {
            for (i, mi) in m.iter_mut().enumerate() {
                *mi += c.measure * self.get(k, i);
            }
        }
        m
    }
}

/// Per-interior-edge vector values (mobilities, fluxes).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    n: usize,
    values: Vec<f64>,
}

impl EdgeField {
    pub fn zeros(n_edges: usize, n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n_edges * n],
        }
    }

    pub fn n_species(&self) -> usize {
        self.n
    }

    pub fn n_edges(&self) -> usize {
        self.values.len() / self.n
    }

    #[inline]
    pub fn get(&self, e: usize, i: usize) -> f64 {
        self.values[e * self.n + i]
    }

    #[inline]
    pub fn set(&mut self, e: usize, i: usize, v: f64) {
        self.values[e * self.n + i] = v;
    }

    pub fn edge(&self, e: usize) -> &[f64] {
        &self.values[e * self.n..(e + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_len(mesh: &Mesh, v: &[f64]) -> Result<(), MeshError> {
    if v.len() != mesh.n_cells() {
        return Err(MeshError::LengthMismatch {
            expected: mesh.n_cells(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Discrete gradient of a scalar cell function on each diamond `T_σ`:
/// `(m̃(σ)/m(T_σ)) D_{K,σ} v ν_{K,σ} = d (v_L − v_K)/d_σ ν_{K→L}`.
/// Boundary triangles carry a zero gradient and are not listed.
pub fn discrete_gradient(mesh: &Mesh, v: &[f64]) -> Result<Vec<[f64; 2]>, MeshError> {
    check_len(mesh, v)?;
    let d = mesh.dim() as f64;
    Ok(mesh
        .interior_edges()
        .iter()
        .map(|e| {
            let g = d * (v[e.l] - v[e.k]) / e.dist;
            [g * e.normal[0], g * e.normal[1]]
        })
        .collect())
}

/// `||v||_{0,q}`.
pub fn norm_0q(mesh: &Mesh, v: &[f64], q: f64) -> Result<f64, MeshError> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(MeshError::InvalidExponent(q));
    }
    check_len(mesh, v)?;
    let s: f64 = mesh
        .cells()
        .iter()
        .zip(v)
        .map(|(c, x)| c.measure * x.abs().powf(q))
        .sum();
    Ok(s.powf(1.0 / q))
}

/// `|v|_{1,q}^q = Σ_σ m̃(σ) d_σ |D_σ v / d_σ|^q`; boundary edges contribute
/// nothing because `v_{K,σ} = v_K` there.
pub fn seminorm_1q_pow(mesh: &Mesh, v: &[f64], q: f64) -> Result<f64, MeshError> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(MeshError::InvalidExponent(q));
    }
    check_len(mesh, v)?;
    Ok(mesh
        .interior_edges()
        .iter()
        .map(|e| e.measure * e.dist * ((v[e.l] - v[e.k]).abs() / e.dist).powf(q))
        .sum())
}

pub fn seminorm_1q(mesh: &Mesh, v: &[f64], q: f64) -> Result<f64, MeshError> {
    Ok(seminorm_1q_pow(mesh, v, q)?.powf(1.0 / q))
}

pub fn norm_1q(mesh: &Mesh, v: &[f64], q: f64) -> Result<f64, MeshError> {
    let n0 = norm_0q(mesh, v, q)?.powf(q);
    let n1 = seminorm_1q_pow(mesh, v, q)?;
    Ok((n0 + n1).powf(1.0 / q))
}

/// `|v|_{1,2}^2 = Σ_σ τ_σ (D_σ v)^2`, the workhorse of the entropy budgets.
pub fn seminorm_12_sq(mesh: &Mesh, v: &[f64]) -> f64 {
    mesh.interior_edges()
        .iter()
        .map(|e| {
            let d = v[e.l] - v[e.k];
            e.transmissibility * d * d
        })
        .sum()
}

/// `M + L`: the Gram matrix of the discrete `H^1` inner product
/// `(w, z)_{1,2} = Σ_K m(K) w_K z_K + Σ_σ τ_σ D w D z`.
pub fn h1_gram(mesh: &Mesh) -> BandMatrix {
    let nc = mesh.n_cells();
    let bw = mesh.bandwidth(1);
    let mut a = BandMatrix::zeros(nc, bw, bw);
    for (k, c) in mesh.cells().iter().enumerate() {
        a.add(k, k, c.measure);
    }
    for e in mesh.interior_edges() {
        let t = e.transmissibility;
        a.add(e.k, e.k, t);
        a.add(e.l, e.l, t);
        a.add(e.k, e.l, -t);
        a.add(e.l, e.k, -t);
    }
    a
}

/// Dual norm `||v||_{-1,q} = sup { ∫ v w : ||w||_{1,q} = 1 }`.
///
/// For `q = 2` the supremum is `sqrt(g^T A^{-1} g)` with `g = M v` and `A`
/// the `H^1` Gram matrix. For `q = 4` the concave problem
/// `max_w g·w − ¼ ||w||_{1,4}^4` is solved by damped Newton; the returned
/// value `g·w / ||w||_{1,4}` at the final iterate is a lower bound which is
/// exact at stationarity. Diagnostic quality only.
pub fn dual_norm(mesh: &Mesh, v: &[f64], q: f64, tol: f64) -> Result<f64, MeshError> {
    check_len(mesh, v)?;
    let g: Vec<f64> = mesh
        .cells()
        .iter()
        .zip(v)
        .map(|(c, x)| c.measure * x)
        .collect();
    if g.iter().all(|x| *x == 0.0) {
        return Ok(0.0);
    }
    let gram = h1_gram(mesh);
    let z = gram
        .solve(&g)
        .map_err(|_| MeshError::NoConvergence { iterations: 0 })?;
    let q2: f64 = g
        .iter()
        .zip(&z)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        .max(0.0)
        .sqrt();
    if q == 2.0 {
        return Ok(q2);
    }
    if q != 4.0 {
        return Err(MeshError::UnsupportedDualExponent(q));
    }
    dual_norm_4(mesh, &g, z, tol)
}

fn dual_norm_4(mesh: &Mesh, g: &[f64], start: Vec<f64>, tol: f64) -> Result<f64, MeshError> {
    let nc = mesh.n_cells();
    let cells = mesh.cells();
    let edges = mesh.interior_edges();
    // Φ(w) = ¼ (Σ m w^4 + Σ m̃ d^{-3} (Dw)^4) and objective f = Φ − g·w
    let phi = |w: &[f64]| -> f64 {
        let a: f64 = cells
            .iter()
            .zip(w)
            .map(|(c, x)| c.measure * x.powi(4))
            .sum();
        let b: f64 = edges
            .iter()
            .map(|e| e.measure * (w[e.l] - w[e.k]).powi(4) / e.dist.powi(3))
            .sum();
        0.25 * (a + b)
    };
    let norm14 = |w: &[f64]| (4.0 * phi(w)).powf(0.25);
    let dot = |w: &[f64]| -> f64 { g.iter().zip(w).map(|(a, b)| a * b).sum() };
    let ratio = |w: &[f64]| {
        let n = norm14(w);
        if n > 0.0 {
            dot(w) / n
        } else {
            0.0
        }
    };

    // scale the H^1 maximizer to the stationary scaling of the quartic problem
    let mut w = start;
    let s = (dot(&w) / (4.0 * phi(&w))).cbrt();
    w.iter_mut().for_each(|x| *x *= s);
    let mut prev = ratio(&w);
    let bw = mesh.bandwidth(1);
    let max_iter = 200;
    for it in 0..max_iter {
        let mut grad: Vec<f64> = cells
            .iter()
            .zip(&w)
            .zip(g)
            .map(|((c, x), gi)| c.measure * x.powi(3) - gi)
            .collect();
        let mut hess = BandMatrix::zeros(nc, bw, bw);
        let mut diag_scale = 0.0f64;
        for (k, (c, x)) in cells.iter().zip(&w).enumerate() {
            let h = 3.0 * c.measure * x * x;
            hess.add(k, k, h);
            diag_scale = diag_scale.max(h);
        }
        for e in edges {
            let dw = w[e.l] - w[e.k];
            let c = e.measure / e.dist.powi(3);
            let f1 = c * dw.powi(3);
            grad[e.l] += f1;
            grad[e.k] -= f1;
            let h = 3.0 * c * dw * dw;
            hess.add(e.k, e.k, h);
            hess.add(e.l, e.l, h);
            hess.add(e.k, e.l, -h);
            hess.add(e.l, e.k, -h);
            diag_scale = diag_scale.max(h);
        }
        let reg = 1e-12 * diag_scale.max(1e-300);
        for k in 0..nc {
            hess.add(k, k, reg);
        }
        let rhs: Vec<f64> = grad.iter().map(|x| -x).collect();
        let step = hess
            .solve(&rhs)
            .map_err(|_| MeshError::NoConvergence { iterations: it })?;
        let f0 = phi(&w) - dot(&w);
        let slope: f64 = grad.iter().zip(&step).map(|(a, b)| a * b).sum();
        let mut theta = 1.0;
        let mut trial: Vec<f64>;
        loop {
            trial = w.iter().zip(&step).map(|(a, b)| a + theta * b).collect();
            let f1 = phi(&trial) - dot(&trial);
            if f1 <= f0 + 1e-4 * theta * slope || theta < 1e-10 {
                break;
            }
            theta *= 0.5;
        }
        w = trial;
        let r = ratio(&w);
        if (r - prev).abs() <= tol * r.abs().max(f64::MIN_POSITIVE) && it > 0 {
            return Ok(r.max(prev));
        }
        prev = r;
    }
    Err(MeshError::NoConvergence {
        iterations: max_iter,
    })
}

/// For each fine cell, the coarse cell containing it.
pub fn nesting_map(coarse: &Mesh, fine: &Mesh) -> Result<Vec<usize>, MeshError> {
    if coarse.dim() != fine.dim()
        || (coarse.domain_measure() - fine.domain_measure()).abs() > 1e-12 * coarse.domain_measure()
    {
        return Err(MeshError::NonNestedMeshes);
    }
    let mut map = Vec::with_capacity(fine.n_cells());
    let mut covered = vec![0.0; coarse.n_cells()];
    for (f, c) in fine.cells().iter().enumerate() {
        let k = coarse.locate(c.center).ok_or(MeshError::NonNestedMeshes)?;
        let (clo, chi) = coarse.cell_bounds(k);
        let (flo, fhi) = fine.cell_bounds(f);
        let tol = 1e-12 * coarse.size();
        for a in 0..coarse.dim() {
            if flo[a] < clo[a] - tol || fhi[a] > chi[a] + tol {
                return Err(MeshError::NonNestedMeshes);
            }
        }
        covered[k] += c.measure;
        map.push(k);
    }
    for (k, c) in coarse.cells().iter().enumerate() {
        if (covered[k] - c.measure).abs() > 1e-10 * c.measure {
            return Err(MeshError::NonNestedMeshes);
        }
    }
    Ok(map)
}

/// Average of a fine field on the coarse cells, given a [`nesting_map`].
pub fn restrict(fine: &Mesh, coarse: &Mesh, map: &[usize], u: &CellField) -> CellField {
    let n = u.n_species();
    let mut out = CellField::zeros(coarse.n_cells(), n);
    for (f, c) in fine.cells().iter().enumerate() {
        let k = map[f];
        for i in 0..n {
            out.values_mut()[k * n + i] += c.measure * u.get(f, i);
        }
    }
    for (k, c) in coarse.cells().iter().enumerate() {
        out.cell_mut(k).iter_mut().for_each(|v| *v /= c.measure);
    }
    out.with_time(u.time)
}

/// Piecewise-constant injection of a coarse field onto a nested fine mesh.
pub fn prolong(map: &[usize], u: &CellField) -> CellField {
    let n = u.n_species();
    let mut values = Vec::with_capacity(map.len() * n);
    for &k in map {
        values.extend_from_slice(u.cell(k));
    }
    CellField::from_values(n, values).with_time(u.time)
}

/// Two-sided flux values `F_{K,σ}` and `F_{L,σ}` per interior edge.
#[derive(Debug, Clone)]
pub struct HalfEdgeFlux {
    pub from_k: Vec<f64>,
    pub from_l: Vec<f64>,
}

/// Residual of the discrete integration-by-parts identity
/// `Σ_K Σ_{σ∈E_K} F_{K,σ} v_K = −Σ_{σ∈E_int} F_{K,σ} D_{K,σ} v`
/// (boundary fluxes vanish). Returns `(residual, scale)` where `scale` is the
/// sum of absolute values of all terms.
pub fn check_ibp(mesh: &Mesh, flux: &HalfEdgeFlux, v: &[f64]) -> Result<(f64, f64), MeshError> {
    check_len(mesh, v)?;
    let ne = mesh.interior_edges().len();
    if flux.from_k.len() != ne || flux.from_l.len() != ne {
        return Err(MeshError::LengthMismatch {
            expected: ne,
            got: flux.from_k.len().min(flux.from_l.len()),
        });
    }
    for (idx, (a, b)) in flux.from_k.iter().zip(&flux.from_l).enumerate() {
        let defect = a + b;
        if defect.abs() > 1e-12 * a.abs().max(b.abs()).max(1e-300) && defect != 0.0 {
            return Err(MeshError::NonConservativeFlux { edge: idx, defect });
        }
    }
    let mut lhs = vec![0.0; mesh.n_cells()];
    let mut rhs = 0.0;
    let mut scale = 0.0;
    for (idx, e) in mesh.interior_edges().iter().enumerate() {
        lhs[e.k] += flux.from_k[idx];
        lhs[e.l] += flux.from_l[idx];
        let dv = v[e.l] - v[e.k];
        rhs -= flux.from_k[idx] * dv;
        scale += flux.from_k[idx].abs() * (v[e.k].abs() + v[e.l].abs());
    }
    let lhs_total: f64 = lhs.iter().zip(v).map(|(f, x)| f * x).sum();
    Ok(((lhs_total - rhs).abs(), scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_four_cells() {
        let m = build_uniform_1d(0.0, 1.0, 4).unwrap();
        assert_eq!(m.n_cells(), 4);
        assert_eq!(m.interior_edges().len(), 3);
        for e in m.interior_edges() {
            assert_relative_eq!(e.transmissibility, 4.0, epsilon = 1e-12);
        }
        assert_relative_eq!(m.zeta(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(m.size(), 0.25);
    }

    #[test]
    fn two_cells_single_edge() {
        let m = build_mesh_1d(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(m.interior_edges().len(), 1);
        let e = m.interior_edges()[0];
        assert_relative_eq!(e.dist, 0.5);
        assert_relative_eq!(e.transmissibility, 2.0);
    }

    #[test]
    fn graded_mesh_regularity() {
        // centers 0.05, 0.2, 0.65; edge at 0.1: 0.05/0.15, edge at 0.3: 0.1/0.45
        let m = build_mesh_1d(&[0.0, 0.1, 0.3, 1.0]).unwrap();
        assert_relative_eq!(m.zeta(), 0.1 / 0.45, epsilon = 1e-14);
        for e in m.interior_edges() {
            assert!(e.dist_k >= m.zeta() * e.dist - 1e-15);
            assert!(e.dist_l >= m.zeta() * e.dist - 1e-15);
        }
    }

    #[test]
    fn mesh_errors() {
        assert!(matches!(
            build_mesh_1d(&[0.0, 0.5, 0.5, 1.0]),
            Err(MeshError::NonMonotoneEdges { index: 2 })
        ));
        assert!(matches!(
            build_mesh_1d(&[0.0, 1.0]),
            Err(MeshError::TooFewCells { .. })
        ));
        assert!(matches!(
            build_mesh_rect2d(1, 3, 1.0, 1.0),
            Err(MeshError::InvalidDimensions(_))
        ));
        assert!(matches!(
            build_mesh_rect2d(2, 2, 0.0, 1.0),
            Err(MeshError::InvalidDimensions(_))
        ));
    }

    #[test]
    fn rect_two_by_two() {
        let m = build_mesh_rect2d(2, 2, 1.0, 1.0).unwrap();
        assert_eq!(m.n_cells(), 4);
        assert!(m.cells().iter().all(|c| (c.measure - 0.25).abs() < 1e-15));
        assert_eq!(m.interior_edges().len(), 4);
        for e in m.interior_edges() {
            assert_relative_eq!(e.measure, 0.5);
            assert_relative_eq!(e.dist, 0.5);
            assert_relative_eq!(e.transmissibility, 1.0);
        }
        assert_eq!(m.exterior_edges().len(), 8);
        assert_eq!(m.zeta(), 0.5);
    }

    #[test]
    fn rect_four_by_two_and_three_by_three() {
        let m = build_mesh_rect2d(4, 2, 2.0, 1.0).unwrap();
        for e in m.interior_edges() {
            assert_relative_eq!(e.transmissibility, 1.0);
        }
        let m = build_mesh_rect2d(3, 3, 1.0, 1.0).unwrap();
        assert_eq!(m.interior_edges().len(), 12);
        let total: f64 = m.cells().iter().map(|c| c.measure).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-14);
    }

    fn dual_cover(m: &Mesh) -> f64 {
        let a: f64 = m
            .interior_edges()
            .iter()
            .map(|e| m.diamond_measure(e))
            .sum();
        let b: f64 = m
            .exterior_edges()
            .iter()
            .map(|e| m.exterior_dual_measure(e))
            .sum();
        a + b
    }

    #[test]
    fn geometric_identities() {
        let meshes = vec![
            build_mesh_1d(&[0.0, 0.1, 0.3, 0.35, 1.0]).unwrap(),
            build_uniform_1d(-1.0, 2.0, 17).unwrap(),
            build_mesh_rect2d(5, 3, 2.0, 0.7).unwrap(),
        ];
        for m in &meshes {
            assert_relative_eq!(dual_cover(m), m.domain_measure(), max_relative = 1e-12);
            let d = m.dim() as f64;
            let mut acc = vec![0.0; m.n_cells()];
            for e in m.interior_edges() {
                acc[e.k] += e.measure * e.dist_k;
                acc[e.l] += e.measure * e.dist_l;
                let (hk, hl) = m.dual_halves(e);
                assert_relative_eq!(hk + hl, e.measure * e.dist / d, max_relative = 1e-14);
            }
            for (k, c) in m.cells().iter().enumerate() {
                assert!(acc[k] <= d * c.measure * (1.0 + 1e-12));
            }
            // regularity with equality attained on some edge
            let mut attained = false;
            for e in m.interior_edges() {
                let r = e.dist_k.min(e.dist_l) / e.dist;
                assert!(r >= m.zeta() - 1e-14);
                attained |= (r - m.zeta()).abs() < 1e-14;
            }
            assert!(attained);
        }
    }

    #[test]
    fn gradient_examples() {
        let h = 0.5;
        let m = build_mesh_1d(&[0.0, 0.5, 1.0]).unwrap();
        let g = discrete_gradient(&m, &[0.0, h]).unwrap();
        assert_relative_eq!(g[0][0], 1.0);
        let g = discrete_gradient(&m, &[3.0, 3.0]).unwrap();
        assert_eq!(g[0], [0.0, 0.0]);

        // linear data on a rectangle: exact on every diamond (d = 2 and the
        // diamond measure is m̃ d_σ / 2)
        let m = build_mesh_rect2d(4, 3, 2.0, 1.5).unwrap();
        let v: Vec<f64> = m.cells().iter().map(|c| 0.7 * c.center[0] - 1.3).collect();
        let g = discrete_gradient(&m, &v).unwrap();
        for (e, gv) in m.interior_edges().iter().zip(&g) {
            if e.normal[0] == 1.0 {
                assert_relative_eq!(gv[0], 2.0 * 0.7, max_relative = 1e-12);
            } else {
                assert!(gv[0].abs() < 1e-14 && gv[1].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn norm_examples() {
        let m = build_uniform_1d(0.0, 1.0, 8).unwrap();
        let c = vec![-2.5; 8];
        for q in [1.0, 2.0, 3.5] {
            assert_relative_eq!(norm_0q(&m, &c, q).unwrap(), 2.5, max_relative = 1e-14);
            assert_eq!(seminorm_1q(&m, &c, q).unwrap(), 0.0);
        }
        let m2 = build_mesh_1d(&[0.0, 0.5, 1.0]).unwrap();
        assert_relative_eq!(seminorm_1q_pow(&m2, &[0.0, 1.0], 2.0).unwrap(), 2.0);
        assert_relative_eq!(seminorm_12_sq(&m2, &[0.0, 1.0]), 2.0);
        assert!(matches!(
            norm_0q(&m, &c, 0.5),
            Err(MeshError::InvalidExponent(_))
        ));
        let v: Vec<f64> = (0..8).map(|k| ((k * 7 % 5) as f64) - 2.0).collect();
        assert!(norm_0q(&m, &v, 1.0).unwrap() <= norm_0q(&m, &v, 2.0).unwrap() + 1e-14);
        let n12 = norm_1q(&m, &v, 2.0).unwrap();
        let n0 = norm_0q(&m, &v, 2.0).unwrap();
        let n1 = seminorm_1q(&m, &v, 2.0).unwrap();
        assert_relative_eq!(n12 * n12, n0 * n0 + n1 * n1, max_relative = 1e-13);
    }

    #[test]
    fn dual_norm_two_cells_by_enumeration() {
        let m = build_mesh_1d(&[0.0, 0.4, 1.0]).unwrap();
        let v = [1.3, -0.2];
        let exact = dual_norm(&m, &v, 2.0, 1e-10).unwrap();
        // brute force: maximize (∫ v w) / ||w||_{1,2} over directions w = (cos t, sin t)
        let mut best = 0.0f64;
        let steps = 200_000;
        for s in 0..steps {
            let t = std::f64::consts::PI * 2.0 * s as f64 / steps as f64;
            let w = [t.cos(), t.sin()];
            let num = 0.4 * v[0] * w[0] + 0.6 * v[1] * w[1];
            let den = norm_1q(&m, &w, 2.0).unwrap();
            best = best.max(num / den);
        }
        assert_relative_eq!(exact, best, max_relative = 1e-8);
        assert_eq!(dual_norm(&m, &[0.0, 0.0], 4.0, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn dual_norm_bounds_pairings() {
        let m = build_uniform_1d(0.0, 1.0, 20).unwrap();
        let v: Vec<f64> = (0..20).map(|k| (k as f64 * 0.37).sin()).collect();
        let mut seed = 3u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        for q in [2.0, 4.0] {
            let dn = dual_norm(&m, &v, q, 1e-8).unwrap();
            for _ in 0..100 {
                let w: Vec<f64> = (0..20).map(|_| rnd()).collect();
                let pairing: f64 = m
                    .cells()
                    .iter()
                    .zip(v.iter().zip(&w))
                    .map(|(c, (a, b))| c.measure * a * b)
                    .sum();
                assert!(pairing.abs() <= dn * norm_1q(&m, &w, q).unwrap() * (1.0 + 1e-6) + 1e-10);
            }
        }
    }

    #[test]
    fn ibp_identity() {
        let m = build_mesh_rect2d(10, 10, 1.0, 1.0).unwrap();
        let ne = m.interior_edges().len();
        let zero = HalfEdgeFlux {
            from_k: vec![0.0; ne],
            from_l: vec![0.0; ne],
        };
        let v: Vec<f64> = (0..100).map(|k| (k as f64).cos()).collect();
        assert_eq!(check_ibp(&m, &zero, &v).unwrap().0, 0.0);
        let f: Vec<f64> = (0..ne).map(|e| (e as f64 * 1.7).sin() * 3.0).collect();
        let flux = HalfEdgeFlux {
            from_l: f.iter().map(|x| -x).collect(),
            from_k: f,
        };
        let (r, scale) = check_ibp(&m, &flux, &v).unwrap();
        assert!(r <= 1e-12 * scale);
        let (r, _) = check_ibp(&m, &flux, &[2.0; 100]).unwrap();
        assert!(r <= 1e-12);
        let mut bad = flux.clone();
        bad.from_l[3] += 1.0;
        assert!(matches!(
            check_ibp(&m, &bad, &v),
            Err(MeshError::NonConservativeFlux { edge: 3, .. })
        ));
    }
}
