//! Implicit Euler two-point finite-volume scheme.
//!
//! On every interior edge `σ = K|L` and species `i` the numerical flux leaving
//! `K` is
//!
//! ```text
//! F_{i,K,σ} = −τ_σ ( u_{i,σ} D_σ p_i + η^α D_σ u_i ),   p = B u,
//! ```
//!
//! with `D_σ v = v_L − v_K` and an upwind or logarithmic-mean edge mobility.
//! Exterior edges carry no flux. One time step solves
//! `R_{i,K}(u) = m(K)(u_{i,K} − u^{k−1}_{i,K})/Δt + Σ_σ F_{i,K,σ}(u) = 0`.
//!
//! Unknowns are ordered cell-major: index `K * n + i`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::SchemeError;
use crate::linalg::BandMatrix;
use crate::mesh::{CellField, EdgeField, HalfEdgeFlux, Mesh};
use crate::solver::SolverConfig;
use crate::specmat::DiffusionSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mobility {
    #[default]
    Upwind,
    #[serde(alias = "log_mean", alias = "log-mean")]
    LogMean,
}

/// Unknowns used for the Jacobian: densities `u` or entropic variables `w = log u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variables {
    Density,
    Entropic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Overrides the default `η = max{Δx, Δt}`.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub mobility: Mobility,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_alpha() -> f64 {
    1.0
}

impl SchemeConfig {
    pub fn new(dt: f64, t_final: f64) -> Self {
        Self {
            dt,
            t_final,
            alpha: default_alpha(),
            eta: None,
            mobility: Mobility::Upwind,
            solver: SolverConfig::default(),
        }
    }

    pub fn with_mobility(mut self, mobility: Mobility) -> Self {
        self.mobility = mobility;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = Some(eta);
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(SchemeError::InvalidParameter(format!("dt = {}", self.dt)));
        }
        if !(self.t_final >= 0.0) || !self.t_final.is_finite() {
            return Err(SchemeError::InvalidParameter(format!(
                "t_final = {}",
                self.t_final
            )));
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0) || !eta.is_finite() {
                return Err(SchemeError::InvalidParameter(format!("eta = {eta}")));
            }
        }
        if self.viscosity_enabled() && !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(SchemeError::InvalidParameter(format!(
                "alpha = {} outside (0, 2)",
                self.alpha
            )));
        }
        self.solver.validate()
    }

    fn viscosity_enabled(&self) -> bool {
        self.eta != Some(0.0)
    }

    pub fn eta(&self, mesh: &Mesh) -> f64 {
        self.eta.unwrap_or_else(|| mesh.size().max(self.dt))
    }

    /// Artificial diffusion coefficient `η^α` (zero when `η = 0`).
    pub fn viscosity(&self, mesh: &Mesh) -> f64 {
        let eta = self.eta(mesh);
        if eta == 0.0 {
            0.0
        } else {
            eta.powf(self.alpha)
        }
    }

    /// Positivity of the discrete solution is only guaranteed for `η > 0`.
    pub fn positivity_guaranteed(&self, mesh: &Mesh) -> bool {
        self.viscosity(mesh) > 0.0
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt - 1e-9).ceil().max(0.0) as usize
    }
}

/// Axis-aligned block `[lo, hi]` carrying a constant vector value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub value: Vec<f64>,
}

/// Description of `u^in`.
#[derive(Clone)]
pub enum InitialDatum {
    Constant(Vec<f64>),
    /// `background + Σ_b value_b 1_{block_b}`; averaged exactly.
    Blocks {
        background: Vec<f64>,
        blocks: Vec<Block>,
    },
    /// Piecewise-linear table in the first coordinate, constant outside the
    /// nodes. `values[i][j]` is species `i` at node `x[j]`.
    Table {
        x: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// `u_i(x) = mean_i + amplitude_i cos(π k_i x_1)`.
    Cosine {
        mean: Vec<f64>,
        amplitude: Vec<f64>,
        modes: Vec<f64>,
    },
    Function {
        n: usize,
        f: Arc<dyn Fn([f64; 2]) -> Vec<f64> + Send + Sync>,
    },
}

impl fmt::Debug for InitialDatum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Self::Blocks { background, blocks } => f
                .debug_struct("Blocks")
                .field("background", background)
                .field("blocks", blocks)
                .finish(),
            Self::Table { x, values } => f
                .debug_struct("Table")
                .field("x", x)
                .field("values", values)
                .finish(),
            Self::Cosine {
                mean,
                amplitude,
                modes,
            } => f
                .debug_struct("Cosine")
                .field("mean", mean)
                .field("amplitude", amplitude)
                .field("modes", modes)
                .finish(),
            Self::Function { n, .. } => f.debug_struct("Function").field("n", n).finish(),
        }
    }
}

impl InitialDatum {
    pub fn n_species(&self) -> usize {
        match self {
            Self::Constant(c) => c.len(),
            Self::Blocks { background, .. } => background.len(),
            Self::Table { values, .. } => values.len(),
            Self::Cosine { mean, .. } => mean.len(),
            Self::Function { n, .. } => *n,
        }
    }

    fn eval(&self, x: [f64; 2]) -> Vec<f64> {
        match self {
            Self::Constant(c) => c.clone(),
            Self::Blocks { background, blocks } => {
                let mut v = background.clone();
                for b in blocks {
                    let inside = (0..b.lo.len().min(2)).all(|a| x[a] >= b.lo[a] && x[a] <= b.hi[a]);
                    if inside {
                        v.iter_mut().zip(&b.value).for_each(|(a, c)| *a += c);
                    }
                }
                v
            }
            Self::Table { x: nodes, values } => {
                let s = x[0];
                let j = nodes.partition_point(|&t| t <= s);
                values
                    .iter()
                    .map(|col| {
                        if j == 0 {
                            col[0]
                        } else if j == nodes.len() {
                            col[nodes.len() - 1]
                        } else {
                            let t = (s - nodes[j - 1]) / (nodes[j] - nodes[j - 1]);
                            (1.0 - t) * col[j - 1] + t * col[j]
                        }
                    })
                    .collect()
            }
            Self::Cosine {
                mean,
                amplitude,
                modes,
            } => mean
                .iter()
                .zip(amplitude)
                .zip(modes)
                .map(|((m, a), k)| m + a * (std::f64::consts::PI * k * x[0]).cos())
                .collect(),
            Self::Function { f, .. } => f(x),
        }
    }
}

const GL5: [(f64, f64); 5] = [
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.0, 0.568_888_888_888_888_9),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

fn overlap(lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    (hi.min(b) - lo.max(a)).max(0.0)
}

/// Cell averages `u^0_{i,K} = m(K)^{-1} ∫_K u^in_i`.
///
/// Block data are averaged exactly; everything else with a 5-point
/// Gauss–Legendre rule per axis on each cell.
pub fn init_cell_averages(
    mesh: &Mesh,
    datum: &InitialDatum,
    n: usize,
) -> Result<CellField, SchemeError> {
    if datum.n_species() != n {
        return Err(SchemeError::SpeciesMismatch {
            expected: n,
            got: datum.n_species(),
        });
    }
    match datum {
        InitialDatum::Blocks { blocks, .. } => {
            if let Some(b) = blocks
                .iter()
                .find(|b| b.value.len() != n || b.lo.len() < mesh.dim() || b.hi.len() < mesh.dim())
            {
                return Err(SchemeError::InvalidParameter(format!(
                    "block {:?} does not match {n} species in {} dimensions",
                    b,
                    mesh.dim()
                )));
            }
        }
        InitialDatum::Table { x, values } => {
            if x.is_empty() || values.iter().any(|c| c.len() != x.len()) {
                return Err(SchemeError::InvalidParameter(
                    "table columns must match the node count".into(),
                ));
            }
            if x.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(SchemeError::InvalidParameter(
                    "table nodes must be strictly increasing".into(),
                ));
            }
        }
        InitialDatum::Cosine {
            amplitude, modes, ..
        } => {
            if amplitude.len() != n || modes.len() != n {
                return Err(SchemeError::InvalidParameter(
                    "cosine amplitude/modes length must equal the species count".into(),
                ));
            }
        }
        _ => {}
    }

    let nc = mesh.n_cells();
    let mut u = CellField::zeros(nc, n);
    for k in 0..nc {
        let (lo, hi) = mesh.cell_bounds(k);
        let avg = match datum {
            InitialDatum::Constant(c) => c.clone(),
            InitialDatum::Blocks { background, blocks } => {
                let mut v = background.clone();
                for b in blocks {
                    let mut frac = 1.0;
                    for a in 0..mesh.dim() {
                        frac *= overlap(lo[a], hi[a], b.lo[a], b.hi[a]) / (hi[a] - lo[a]);
                    }
                    if frac > 0.0 {
                        v.iter_mut().zip(&b.value).for_each(|(x, c)| *x += frac * c);
                    }
                }
                v
            }
            _ => quadrature_average(datum, mesh.dim(), lo, hi, n),
        };
        u.cell_mut(k).copy_from_slice(&avg);
    }
    for (idx, &v) in u.values().iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(SchemeError::NegativeInitialData {
                species: idx % n,
                value: v,
            });
        }
    }
    let total: f64 = u.mass(mesh).iter().sum();
    if !(total > 0.0) {
        return Err(SchemeError::ZeroMass);
    }
    Ok(u)
}

fn quadrature_average(
    datum: &InitialDatum,
    dim: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    n: usize,
) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let half = [0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1])];
    if dim == 1 {
        for &(x, w) in &GL5 {
            let v = datum.eval([mid[0] + half[0] * x, 0.0]);
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += 0.5 * w * b);
        }
    } else {
        for &(x, wx) in &GL5 {
            for &(y, wy) in &GL5 {
                let v = datum.eval([mid[0] + half[0] * x, mid[1] + half[1] * y]);
                acc.iter_mut()
                    .zip(v)
                    .for_each(|(a, b)| *a += 0.25 * wx * wy * b);
            }
        }
    }
    acc
}

/// `p(u) = B u`.
pub fn pressure(spec: &DiffusionSpec, u: &[f64]) -> Vec<f64> {
    spec.apply(u)
}

/// Upwind edge mobility: `u_L` if `D p >= 0`, else `u_K`.
#[inline]
pub fn mobility_upwind(u_k: f64, u_l: f64, dp: f64) -> f64 {
    if dp >= 0.0 {
        u_l
    } else {
        u_k
    }
}

/// `x ↦ (e^x − 1)/x` and its derivative.
fn phi_and_derivative(x: f64) -> (f64, f64) {
    if x.abs() < 0.5 {
        // Σ x^k/(k+1)! and Σ k x^{k−1}/(k+1)!
        let mut phi = 0.0;
        let mut dphi = 0.0;
        let mut xk = 1.0;
        let mut fact = 1.0; // (k+1)!
        for k in 0..24 {
            fact *= (k + 1) as f64;
            phi += xk / fact;
            if k + 1 < 24 {
                dphi += (k + 1) as f64 * xk / (fact * (k + 2) as f64);
            }
            xk *= x;
        }
        (phi, dphi)
    } else {
        let em1 = x.exp_m1();
        let phi = em1 / x;
        let dphi = (x * x.exp() - em1) / (x * x);
        (phi, dphi)
    }
}

/// `log(u_l / u_k)` evaluated without cancellation for nearby arguments.
#[inline]
pub fn log_ratio(u_l: f64, u_k: f64) -> f64 {
    let d = u_l - u_k;
    if d.abs() < 0.5 * u_k {
        (d / u_k).ln_1p()
    } else {
        (u_l / u_k).ln()
    }
}

/// Logarithmic mean `(u_L − u_K)/(log u_L − log u_K)`; `u_K` on the diagonal
/// and zero when either argument vanishes.
pub fn mobility_logmean(u_k: f64, u_l: f64) -> f64 {
    if u_k <= 0.0 || u_l <= 0.0 {
        return 0.0;
    }
    if u_k == u_l {
        return u_k;
    }
    let x = log_ratio(u_l, u_k);
    if x.abs() < 0.5 {
        u_k * phi_and_derivative(x).0
    } else {
        (u_l - u_k) / x
    }
}

/// Partial derivatives `(∂/∂u_K, ∂/∂u_L)` of the logarithmic mean.
pub fn mobility_logmean_partials(u_k: f64, u_l: f64) -> (f64, f64) {
    if u_k <= 0.0 || u_l <= 0.0 {
        return (0.0, 0.0);
    }
    let x = log_ratio(u_l, u_k);
    let (phi, dphi) = phi_and_derivative(x);
    (phi - dphi, dphi * (-x).exp())
}

/// Edge mobilities and fluxes `F_{i,K,σ}` (leaving `K`) on interior edges.
#[derive(Debug, Clone)]
pub struct EdgeFluxes {
    pub mobilities: EdgeField,
    pub fluxes: EdgeField,
    /// `D_σ p_i` per edge and species.
    pub pressure_jumps: EdgeField,
}

impl EdgeFluxes {
    /// Two-sided representation of species `i`, for the summation-by-parts check.
    pub fn half_edge(&self, i: usize) -> HalfEdgeFlux {
        let from_k: Vec<f64> = (0..self.fluxes.n_edges())
            .map(|e| self.fluxes.get(e, i))
            .collect();
        HalfEdgeFlux {
            from_l: from_k.iter().map(|f| -f).collect(),
            from_k,
        }
    }
}

fn check_species(spec: &DiffusionSpec, u: &CellField, mesh: &Mesh) -> Result<(), SchemeError> {
    if u.n_species() != spec.n() {
        return Err(SchemeError::SpeciesMismatch {
            expected: spec.n(),
            got: u.n_species(),
        });
    }
    if u.n_cells() != mesh.n_cells() {
        return Err(SchemeError::InvalidParameter(format!(
            "field has {} cells, mesh has {}",
            u.n_cells(),
            mesh.n_cells()
        )));
    }
    Ok(())
}

fn cell_pressures(spec: &DiffusionSpec, u: &CellField) -> Vec<f64> {
    let n = spec.n();
    let mut p = vec![0.0; u.values().len()];
    for (k, out) in p.chunks_mut(n).enumerate() {
        spec.apply_into(u.cell(k), out);
    }
    p
}

#[inline]
fn edge_mobility(mobility: Mobility, uk: f64, ul: f64, dp: f64) -> f64 {
    match mobility {
        Mobility::Upwind => mobility_upwind(uk, ul, dp),
        Mobility::LogMean => mobility_logmean(uk, ul),
    }
}

/// Edge mobilities for `u`, as used by the fluxes and the Rao dissipation.
pub fn edge_mobilities(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    mobility: Mobility,
    u: &CellField,
) -> EdgeField {
    let n = spec.n();
    let p = cell_pressures(spec, u);
    let mut mob = EdgeField::zeros(mesh.interior_edges().len(), n);
    for (idx, e) in mesh.interior_edges().iter().enumerate() {
        for i in 0..n {
            let dp = p[e.l * n + i] - p[e.k * n + i];
            mob.set(
                idx,
                i,
                edge_mobility(mobility, u.get(e.k, i), u.get(e.l, i), dp),
            );
        }
    }
    mob
}

fn fluxes_with(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    mobility: Mobility,
    nu: f64,
    u: &CellField,
) -> EdgeFluxes {
    let n = spec.n();
    let ne = mesh.interior_edges().len();
    let p = cell_pressures(spec, u);
    let mut mob = EdgeField::zeros(ne, n);
    let mut flux = EdgeField::zeros(ne, n);
    let mut jumps = EdgeField::zeros(ne, n);
    for (idx, e) in mesh.interior_edges().iter().enumerate() {
        for i in 0..n {
            let (uk, ul) = (u.get(e.k, i), u.get(e.l, i));
            let dp = p[e.l * n + i] - p[e.k * n + i];
            let m = edge_mobility(mobility, uk, ul, dp);
            mob.set(idx, i, m);
            jumps.set(idx, i, dp);
            flux.set(idx, i, -e.transmissibility * (m * dp + nu * (ul - uk)));
        }
    }
    EdgeFluxes {
        mobilities: mob,
        fluxes: flux,
        pressure_jumps: jumps,
    }
}

pub fn assemble_flux(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    u: &CellField,
) -> Result<EdgeFluxes, SchemeError> {
    check_species(spec, u, mesh)?;
    Ok(fluxes_with(
        spec,
        mesh,
        cfg.mobility,
        cfg.viscosity(mesh),
        u,
    ))
}

/// One implicit Euler step as a nonlinear operator in the unknown `u`.
///
/// `nu` is the artificial diffusion `η^α`, kept fixed when the solver
/// subdivides the step.
#[derive(Debug, Clone, Copy)]
pub struct StepOperator<'a> {
    pub spec: &'a DiffusionSpec,
    pub mesh: &'a Mesh,
    pub mobility: Mobility,
    pub nu: f64,
    pub dt: f64,
    pub u_prev: &'a CellField,
}

impl<'a> StepOperator<'a> {
    pub fn new(
        spec: &'a DiffusionSpec,
        mesh: &'a Mesh,
        cfg: &SchemeConfig,
        u_prev: &'a CellField,
    ) -> Result<Self, SchemeError> {
        check_species(spec, u_prev, mesh)?;
        Ok(Self {
            spec,
            mesh,
            mobility: cfg.mobility,
            nu: cfg.viscosity(mesh),
            dt: cfg.dt,
            u_prev,
        })
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_prev(mut self, u_prev: &'a CellField) -> Self {
        self.u_prev = u_prev;
        self
    }

    pub fn dim(&self) -> usize {
        self.mesh.n_cells() * self.spec.n()
    }

    pub fn fluxes(&self, u: &CellField) -> EdgeFluxes {
        fluxes_with(self.spec, self.mesh, self.mobility, self.nu, u)
    }

    pub fn residual(&self, u: &CellField) -> Vec<f64> {
        self.residual_with_scale(u).0
    }

    /// Residual together with the sum of absolute values of its terms, which
    /// bounds the floating-point error of the evaluation.
    pub fn residual_with_scale(&self, u: &CellField) -> (Vec<f64>, Vec<f64>) {
        let n = self.spec.n();
        let mut r = vec![0.0; u.values().len()];
        let mut s = vec![0.0; u.values().len()];
        for (k, c) in self.mesh.cells().iter().enumerate() {
            let f = c.measure / self.dt;
            for i in 0..n {
                let idx = k * n + i;
                r[idx] = f * (u.values()[idx] - self.u_prev.values()[idx]);
                s[idx] = f * (u.values()[idx].abs() + self.u_prev.values()[idx].abs());
            }
        }
        let fl = self.fluxes(u);
        for (idx, e) in self.mesh.interior_edges().iter().enumerate() {
            for i in 0..n {
                let f = fl.fluxes.get(idx, i);
                r[e.k * n + i] += f;
                r[e.l * n + i] -= f;
                let mag = e.transmissibility
                    * (fl.mobilities.get(idx, i) * fl.pressure_jumps.get(idx, i).abs()
                        + self.nu * (u.get(e.k, i).abs() + u.get(e.l, i).abs()));
                s[e.k * n + i] += mag;
                s[e.l * n + i] += mag;
            }
        }
        (r, s)
    }

    /// Exact Jacobian `∂R/∂u` with the upwind branch frozen at `u`.
    pub fn jacobian_density(&self, u: &CellField) -> BandMatrix {
        let n = self.spec.n();
        let bw = self.mesh.bandwidth(n);
        let mut jac = BandMatrix::zeros(self.dim(), bw, bw);
        for (k, c) in self.mesh.cells().iter().enumerate() {
            for i in 0..n {
                jac.add(k * n + i, k * n + i, c.measure / self.dt);
            }
        }
        let p = cell_pressures(self.spec, u);
        for e in self.mesh.interior_edges() {
            let tau = e.transmissibility;
            for i in 0..n {
                let (uk, ul) = (u.get(e.k, i), u.get(e.l, i));
                let dp = p[e.l * n + i] - p[e.k * n + i];
                let (mob, dmk, dml) = match self.mobility {
                    Mobility::Upwind => {
                        if dp >= 0.0 {
                            (ul, 0.0, 1.0)
                        } else {
                            (uk, 1.0, 0.0)
                        }
                    }
                    Mobility::LogMean => {
                        let (a, b) = mobility_logmean_partials(uk, ul);
                        (mobility_logmean(uk, ul), a, b)
                    }
                };
                let row_k = e.k * n + i;
                let row_l = e.l * n + i;
                for j in 0..n {
                    let bij = self.spec.b(i, j);
                    let diag = if i == j { self.nu } else { 0.0 };
                    // ∂F/∂u_{j,L} and ∂F/∂u_{j,K}
                    let mut d_l = -tau * (mob * bij + diag);
                    let mut d_k = tau * (mob * bij + diag);
                    if i == j {
                        d_l -= tau * dml * dp;
                        d_k -= tau * dmk * dp;
                    }
                    let col_k = e.k * n + j;
                    let col_l = e.l * n + j;
                    jac.add(row_k, col_k, d_k);
                    jac.add(row_k, col_l, d_l);
                    jac.add(row_l, col_k, -d_k);
                    jac.add(row_l, col_l, -d_l);
                }
            }
        }
        jac
    }

    pub fn jacobian(&self, u: &CellField, vars: Variables) -> Result<BandMatrix, SchemeError> {
        let mut jac = self.jacobian_density(u);
        if vars == Variables::Entropic {
            let n = self.spec.n();
            if let Some((idx, &v)) = u.values().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(SchemeError::NonpositiveDensityInEntropicMode {
                    cell: idx / n,
                    species: idx % n,
                    value: v,
                });
            }
            jac.scale_columns(u.values());
        }
        Ok(jac)
    }

    /// `‖R‖_scaled = (Σ_{i,K} (R_{i,K}/m(K))² m(K))^{1/2} / (1 + ‖u_prev‖_{0,2})`.
    pub fn scaled_norm(&self, r: &[f64]) -> f64 {
        let n = self.spec.n();
        let mut s = 0.0;
        let mut up = 0.0;
        for (k, c) in self.mesh.cells().iter().enumerate() {
            for i in 0..n {
                let v = r[k * n + i] / c.measure;
                s += v * v * c.measure;
                let w = self.u_prev.values()[k * n + i];
                up += w * w * c.measure;
            }
        }
        s.sqrt() / (1.0 + up.sqrt())
    }
}

pub fn step_residual(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    u_prev: &CellField,
    u: &CellField,
) -> Result<CellField, SchemeError> {
    check_species(spec, u, mesh)?;
    let op = StepOperator::new(spec, mesh, cfg, u_prev)?;
    Ok(CellField::from_values(spec.n(), op.residual(u)).with_time(u.time))
}

/// Jacobian of [`step_residual`] in density or entropic variables
/// (in the latter, `∂R/∂w = ∂R/∂u · diag(u)`).
pub fn step_jacobian(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    u_prev: &CellField,
    u: &CellField,
    vars: Variables,
) -> Result<BandMatrix, SchemeError> {
    check_species(spec, u, mesh)?;
    StepOperator::new(spec, mesh, cfg, u_prev)?.jacobian(u, vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh_1d, build_mesh_rect2d, build_uniform_1d};
    use crate::specmat::validate_rows;
    use approx::assert_relative_eq;

    fn spec(rows: &[&[f64]]) -> DiffusionSpec {
        validate_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 1e-12).unwrap()
    }

    #[test]
    fn init_examples() {
        let m = build_uniform_1d(0.0, 1.0, 10).unwrap();
        let u = init_cell_averages(&m, &InitialDatum::Constant(vec![0.3, 2.0]), 2).unwrap();
        assert!(u.values().chunks(2).all(|c| c == [0.3, 2.0]));

        let lin = InitialDatum::Function {
            n: 1,
            f: Arc::new(|x| vec![x[0]]),
        };
        let u = init_cell_averages(&m, &lin, 1).unwrap();
        for (k, c) in m.cells().iter().enumerate() {
            assert_relative_eq!(u.get(k, 0), c.center[0], epsilon = 1e-15);
        }

        let half = InitialDatum::Blocks {
            background: vec![0.0],
            blocks: vec![Block {
                lo: vec![0.0],
                hi: vec![0.5],
                value: vec![1.0],
            }],
        };
        let u = init_cell_averages(&m, &half, 1).unwrap();
        for k in 0..10 {
            assert_eq!(u.get(k, 0), if k < 5 { 1.0 } else { 0.0 });
        }

        assert!(matches!(
            init_cell_averages(&m, &InitialDatum::Constant(vec![-1.0]), 1),
            Err(SchemeError::NegativeInitialData { .. })
        ));
        assert!(matches!(
            init_cell_averages(&m, &InitialDatum::Constant(vec![0.0, 0.0]), 2),
            Err(SchemeError::ZeroMass)
        ));
        assert!(matches!(
            init_cell_averages(&m, &InitialDatum::Constant(vec![1.0]), 2),
            Err(SchemeError::SpeciesMismatch { .. })
        ));
    }

    #[test]
    fn init_blocks_in_2d_and_tables() {
        let m = build_mesh_rect2d(4, 4, 1.0, 1.0).unwrap();
        let d = InitialDatum::Blocks {
            background: vec![1.0],
            blocks: vec![Block {
                lo: vec![0.0, 0.0],
                hi: vec![0.375, 0.5],
                value: vec![2.0],
            }],
        };
        let u = init_cell_averages(&m, &d, 1).unwrap();
        assert_relative_eq!(u.mass(&m)[0], 1.0 + 2.0 * 0.375 * 0.5, epsilon = 1e-14);
        assert_relative_eq!(u.get(1, 0), 1.0 + 2.0 * 0.5, epsilon = 1e-15);

        let m = build_uniform_1d(0.0, 1.0, 4).unwrap();
        let t = InitialDatum::Table {
            x: vec![0.0, 1.0],
            values: vec![vec![1.0, 3.0]],
        };
        let u = init_cell_averages(&m, &t, 1).unwrap();
        assert_relative_eq!(u.get(2, 0), 1.0 + 2.0 * 0.625, epsilon = 1e-14);
    }

    #[test]
    fn pressure_examples() {
        assert_eq!(
            pressure(&spec(&[&[1.0, 0.0], &[0.0, 1.0]]), &[2.0, 3.0]),
            vec![2.0, 3.0]
        );
        let ones = spec(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(pressure(&ones, &[1.0, 2.0]), vec![3.0, 3.0]);
        assert_eq!(pressure(&ones, &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn mobility_examples() {
        assert_eq!(mobility_upwind(1.0, 2.0, 0.5), 2.0);
        assert_eq!(mobility_upwind(1.0, 2.0, -0.5), 1.0);
        assert_eq!(mobility_upwind(1.0, 2.0, 0.0), 2.0);
        assert_relative_eq!(
            mobility_logmean(1.0, std::f64::consts::E),
            std::f64::consts::E - 1.0,
            max_relative = 1e-15
        );
        assert_eq!(mobility_logmean(3.5, 3.5), 3.5);
        assert_eq!(mobility_logmean(0.0, 5.0), 0.0);
        assert_eq!(mobility_logmean(5.0, 0.0), 0.0);
        // continuity across the series/closed-form switch
        let a = mobility_logmean(1.0, 0.5f64.exp() * (1.0 - 1e-12));
        let b = mobility_logmean(1.0, 0.5f64.exp() * (1.0 + 1e-12));
        assert!((a - b).abs() < 1e-11);
    }

    #[test]
    fn logmean_bounds_and_partials() {
        let pairs = [
            (1.0, 2.0),
            (0.3, 0.3000001),
            (1e-8, 4.0),
            (7.0, 0.2),
            (2.0, 2.0 + 1e-14),
        ];
        for &(a, b) in &pairs {
            let l = mobility_logmean(a, b);
            assert!(l >= a.min(b) * (1.0 - 1e-15) && l <= a.max(b) * (1.0 + 1e-15));
            assert!((l - a).abs() <= (a - b).abs() * (1.0 + 1e-12) + 1e-300);
            let (dk, dl) = mobility_logmean_partials(a, b);
            let h = 1e-6;
            let fdk = (mobility_logmean(a * (1.0 + h), b) - mobility_logmean(a * (1.0 - h), b))
                / (2.0 * h * a);
            let fdl = (mobility_logmean(a, b * (1.0 + h)) - mobility_logmean(a, b * (1.0 - h)))
                / (2.0 * h * b);
            assert_relative_eq!(dk, fdk, max_relative = 1e-6);
            assert_relative_eq!(dl, fdl, max_relative = 1e-6);
            // chain rule identity Λ log(b/a) = b − a
            assert_relative_eq!(
                l * log_ratio(b, a),
                b - a,
                max_relative = 1e-13,
                epsilon = 1e-300
            );
        }
    }

    #[test]
    fn flux_examples() {
        let m = build_mesh_1d(&[0.0, 0.5, 1.0]).unwrap();
        let s = spec(&[&[1.0]]);
        let u = CellField::from_values(1, vec![1.0, 2.0]);
        let cfg = SchemeConfig::new(1e-3, 1.0).with_eta(0.0);
        let f = assemble_flux(&s, &m, &cfg, &u).unwrap();
        assert_relative_eq!(f.fluxes.get(0, 0), -4.0);
        let cfg = SchemeConfig::new(1e-3, 1.0).with_eta(0.1).with_alpha(1.0);
        let f = assemble_flux(&s, &m, &cfg, &u).unwrap();
        assert_relative_eq!(f.fluxes.get(0, 0), -4.2, epsilon = 1e-14);

        let mc = build_mesh_rect2d(3, 3, 1.0, 1.0).unwrap();
        let s2 = spec(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let uc = CellField::constant(9, &[0.4, 1.1]);
        let f = assemble_flux(&s2, &mc, &SchemeConfig::new(0.1, 1.0), &uc).unwrap();
        assert!(f.fluxes.values().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn residual_properties() {
        let m = build_mesh_1d(&[0.0, 0.2, 0.45, 0.7, 1.0]).unwrap();
        let s = spec(&[&[0.5, 1.0], &[1.0, 2.0]]);
        let cfg = SchemeConfig::new(0.01, 1.0);
        let c = CellField::constant(4, &[0.7, 0.2]);
        let r = step_residual(&s, &m, &cfg, &c, &c).unwrap();
        assert!(r.values().iter().all(|x| *x == 0.0));

        let prev = CellField::from_values(2, vec![1.0, 0.1, 0.5, 0.3, 0.2, 0.9, 1.4, 0.6]);
        let u = CellField::from_values(2, vec![0.9, 0.2, 0.6, 0.35, 0.25, 0.8, 1.3, 0.7]);
        let r = step_residual(&s, &m, &cfg, &prev, &u).unwrap();
        for i in 0..2 {
            let lhs: f64 = (0..4).map(|k| r.get(k, i)).sum();
            let rhs: f64 = m
                .cells()
                .iter()
                .enumerate()
                .map(|(k, c)| c.measure * (u.get(k, i) - prev.get(k, i)) / cfg.dt)
                .sum();
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_cell_scalar_residual_by_hand() {
        // n = 1, b = 1, cells [0, 1/2], [1/2, 1], τ = 2, ν = η^α
        let m = build_mesh_1d(&[0.0, 0.5, 1.0]).unwrap();
        let s = spec(&[&[1.0]]);
        let cfg = SchemeConfig::new(0.1, 1.0).with_eta(0.25).with_alpha(1.0);
        let prev = CellField::from_values(1, vec![1.0, 1.0]);
        let (a, b) = (0.8, 1.3);
        let u = CellField::from_values(1, vec![a, b]);
        let r = step_residual(&s, &m, &cfg, &prev, &u).unwrap();
        // upwind picks b since b − a > 0: F_K = −2 (b (b − a) + 0.25 (b − a))
        let f = -2.0 * (b * (b - a) + 0.25 * (b - a));
        assert_relative_eq!(r.get(0, 0), 0.5 * (a - 1.0) / 0.1 + f, epsilon = 1e-14);
        assert_relative_eq!(r.get(1, 0), 0.5 * (b - 1.0) / 0.1 - f, epsilon = 1e-14);
    }

    #[test]
    fn density_jacobian_linear_part() {
        // with u constant and n = 1 the advective part contributes τ u b D(δu)
        let m = build_uniform_1d(0.0, 1.0, 5).unwrap();
        let s = spec(&[&[1.0]]);
        let cfg = SchemeConfig::new(0.01, 1.0).with_eta(0.3);
        let c = CellField::constant(5, &[2.0]);
        let j = step_jacobian(&s, &m, &cfg, &c, &c, Variables::Density).unwrap();
        let nu = 0.3;
        for k in 0..5 {
            let deg = if k == 0 || k == 4 { 1.0 } else { 2.0 };
            assert_relative_eq!(
                j.get(k, k),
                0.2 / 0.01 + deg * 5.0 * (2.0 + nu),
                epsilon = 1e-12
            );
            if k + 1 < 5 {
                assert_relative_eq!(j.get(k, k + 1), -5.0 * (2.0 + nu), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn entropic_mode_rejects_zero() {
        let m = build_uniform_1d(0.0, 1.0, 3).unwrap();
        let s = spec(&[&[1.0]]);
        let cfg = SchemeConfig::new(0.01, 1.0);
        let u = CellField::from_values(1, vec![1.0, 0.0, 1.0]);
        assert!(matches!(
            step_jacobian(&s, &m, &cfg, &u, &u, Variables::Entropic),
            Err(SchemeError::NonpositiveDensityInEntropicMode { cell: 1, .. })
        ));
    }

    #[test]
    fn config_checks() {
        assert!(SchemeConfig::new(0.0, 1.0).validate().is_err());
        assert!(SchemeConfig::new(0.1, 1.0)
            .with_alpha(2.0)
            .validate()
            .is_err());
        assert!(SchemeConfig::new(0.1, 1.0)
            .with_alpha(2.0)
            .with_eta(0.0)
            .validate()
            .is_ok());
        let m = build_uniform_1d(0.0, 1.0, 10).unwrap();
        let cfg = SchemeConfig::new(0.01, 0.5);
        assert_relative_eq!(cfg.eta(&m), 0.1);
        assert_eq!(cfg.n_steps(), 50);
        assert!(!SchemeConfig::new(0.01, 0.5)
            .with_eta(0.0)
            .positivity_guaranteed(&m));
    }
}
