//! Nonlinear solve of one implicit step.
//!
//! The default path is damped Newton in entropic variables `w = log u`, which
//! keeps every iterate positive, followed by one Newton correction in density
//! variables. That last correction restores exact mass conservation: the
//! flux part of `∂R/∂u` has zero column sums, so a linear step moves the mass
//! exactly by `−Δt Σ_K R_{i,K}`.
//!
//! If Newton fails, the regularized problem `ε A w + R(e^w) = 0` with
//! `A = M'` (cell measures plus the `τ`-weighted graph Laplacian) is followed
//! along a decreasing `ε` path before a final Newton solve. If that fails too
//! the step is split into halves, recursively.

use serde::{Deserialize, Serialize};

use crate::entropy::{shannon_dissipation, shannon_entropy};
use crate::error::SolverError;
use crate::linalg::BandMatrix;
use crate::mesh::{seminorm_12_sq, CellField, EdgeField, Mesh};
use crate::scheme::{SchemeConfig, StepOperator, Variables};
use crate::specmat::DiffusionSpec;

// e^w must stay a normal double; log-mean steps without artificial diffusion
// can legitimately drive a density far below 1e-14
const W_MIN: f64 = -700.0;
const W_MAX: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol_residual: f64,
    pub max_newton: usize,
    pub damping: f64,
    pub min_step: f64,
    pub eps_path: Vec<f64>,
    pub dt_halving_max: usize,
    /// Skip plain Newton and go straight to the regularized path.
    pub force_regularized: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_residual: 1e-10,
            max_newton: 50,
            damping: 0.5,
            min_step: 2f64.powi(-20),
            eps_path: geometric_path(1e-2, 1e-12, 0.1),
            dt_halving_max: 10,
            force_regularized: false,
        }
    }
}

/// `start, start·ratio, ...` down to `end` inclusive.
pub fn geometric_path(start: f64, end: f64, ratio: f64) -> Vec<f64> {
    let steps = ((end / start).ln() / ratio.ln()).round() as i32;
    (0..=steps).map(|k| start * ratio.powi(k)).collect()
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), crate::error::SchemeError> {
        let bad = |s: String| Err(crate::error::SchemeError::InvalidParameter(s));
        if !(self.tol_residual > 0.0) {
            return bad(format!("tol_residual = {}", self.tol_residual));
        }
        if self.max_newton == 0 {
            return bad("max_newton = 0".into());
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return bad(format!("damping = {}", self.damping));
        }
        if !(self.min_step > 0.0 && self.min_step <= 1.0) {
            return bad(format!("min_step = {}", self.min_step));
        }
        if self.eps_path.iter().any(|e| !(*e > 0.0))
            || self.eps_path.windows(2).any(|w| !(w[1] < w[0]))
        {
            return bad("eps_path must be positive and decreasing".into());
        }
        Ok(())
    }
}

/// Outcome of the discrete Shannon inequality check at one `ε` stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyBoundCheck {
    pub eps: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub residual: f64,
    /// Tolerance actually enforced: `tol_residual`, or the round-off floor of
    /// the residual evaluation if that is larger.
    pub tolerance: f64,
    pub used_regularized: bool,
    pub eps_path: Vec<f64>,
    pub entropy_checks: Vec<EntropyBoundCheck>,
    pub polished: bool,
}

#[derive(Debug, Clone)]
pub struct SubStep {
    pub dt: f64,
    pub u: CellField,
    pub stats: SolverStats,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub u_new: CellField,
    pub mobilities: EdgeField,
    /// Flux leaving `K` across each interior edge, per species.
    pub fluxes: EdgeField,
    pub stats: SolverStats,
    /// Accepted sub-steps; a single entry unless `Δt` was halved.
    pub substeps: Vec<SubStep>,
    pub halvings: usize,
}

fn field_like(u: &CellField, values: Vec<f64>) -> CellField {
    CellField::from_values(u.n_species(), values)
}

fn exp_field(u: &CellField, w: &[f64]) -> CellField {
    field_like(u, w.iter().map(|x| x.exp()).collect())
}

/// `A ⊗ I_n` with `A_KK = m(K) + Σ τ`, `A_KL = −τ`.
pub fn regularization_matrix(mesh: &Mesh, n: usize) -> BandMatrix {
    let bw = mesh.bandwidth(n);
    let mut a = BandMatrix::zeros(mesh.n_cells() * n, bw, bw);
    for (k, c) in mesh.cells().iter().enumerate() {
        for i in 0..n {
            a.add(k * n + i, k * n + i, c.measure);
        }
    }
    for e in mesh.interior_edges() {
        for i in 0..n {
            let (rk, rl) = (e.k * n + i, e.l * n + i);
            a.add(rk, rk, e.transmissibility);
            a.add(rl, rl, e.transmissibility);
            a.add(rk, rl, -e.transmissibility);
            a.add(rl, rk, -e.transmissibility);
        }
    }
    a
}

/// `G(w) = ε A w + R(e^w)` and an upper bound of its evaluation error.
struct System<'a> {
    op: StepOperator<'a>,
    reg: Option<(f64, &'a BandMatrix)>,
}

impl System<'_> {
    fn eval(&self, w: &[f64], like: &CellField) -> (Vec<f64>, f64) {
        let u = exp_field(like, w);
        let (mut r, mut s) = self.op.residual_with_scale(&u);
        if let Some((eps, a)) = self.reg {
            let aw = a.mul_vec(w);
            let aabs = a.mul_vec(&w.iter().map(|x| x.abs()).collect::<Vec<_>>());
            for idx in 0..r.len() {
                r[idx] += eps * aw[idx];
                s[idx] += eps * aabs[idx].abs();
            }
        }
        let floor = 16.0 * f64::EPSILON * self.op.scaled_norm(&s);
        (r, floor)
    }

    fn jacobian(&self, w: &[f64], like: &CellField) -> BandMatrix {
        let u = exp_field(like, w);
        let mut j = self
            .op
            .jacobian(&u, Variables::Entropic)
            .expect("exp(w) is positive");
        if let Some((eps, a)) = self.reg {
            let n = a.dim();
            for r in 0..n {
                let lo = r.saturating_sub(a.lower_bandwidth());
                let hi = (r + a.upper_bandwidth()).min(n - 1);
                for c in lo..=hi {
                    let v = a.get(r, c);
                    if v != 0.0 {
                        j.add(r, c, eps * v);
                    }
                }
            }
        }
        j
    }
}

struct NewtonOutcome {
    w: Vec<f64>,
    iterations: usize,
    residual: f64,
    tolerance: f64,
}

/// Damped Newton on `G(w) = 0` in entropic variables.
fn newton_entropic(
    sys: &System,
    like: &CellField,
    mut w: Vec<f64>,
    cfg: &SolverConfig,
) -> Result<NewtonOutcome, SolverError> {
    let (mut g, mut floor) = sys.eval(&w, like);
    let mut norm = sys.op.scaled_norm(&g);
    for it in 0..=cfg.max_newton {
        let tol = cfg.tol_residual.max(floor);
        if norm <= tol {
            return Ok(NewtonOutcome {
                w,
                iterations: it,
                residual: norm,
                tolerance: tol,
            });
        }
        if it == cfg.max_newton {
            break;
        }
        let jac = sys.jacobian(&w, like);
        let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let delta = match jac.factor() {
            Ok(lu) => lu.solve(&rhs),
            Err(_) => break,
        };
        if delta.iter().any(|d| !d.is_finite()) {
            break;
        }
        let mut theta = 1.0;
        let mut accepted = false;
        while theta >= cfg.min_step {
            let trial: Vec<f64> = w
                .iter()
                .zip(&delta)
                .map(|(a, d)| (a + theta * d).clamp(W_MIN, W_MAX))
                .collect();
            let (gt, ft) = sys.eval(&trial, like);
            let nt = sys.op.scaled_norm(&gt);
            if nt.is_finite()
                && (nt <= (1.0 - 1e-4 * theta) * norm || nt <= cfg.tol_residual.max(ft))
            {
                w = trial;
                g = gt;
                floor = ft;
                norm = nt;
                accepted = true;
                break;
            }
            theta *= cfg.damping;
        }
        if !accepted {
            break;
        }
    }
    Err(SolverError::NewtonFailed {
        iterations: cfg.max_newton,
        residual: norm,
    })
}

/// One Newton correction in density variables; kept only if it stays
/// positive (or nonnegative without artificial diffusion) and does not
/// increase the residual beyond the enforced tolerance.
fn density_polish(
    op: &StepOperator,
    u: CellField,
    residual: f64,
    tol: f64,
) -> (CellField, f64, bool) {
    let r = op.residual(&u);
    let jac = op.jacobian_density(&u);
    let Ok(lu) = jac.factor() else {
        return (u, residual, false);
    };
    let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
    let delta = lu.solve(&rhs);
    let cand: Vec<f64> = u.values().iter().zip(&delta).map(|(a, d)| a + d).collect();
    let ok_sign = if op.nu > 0.0 {
        cand.iter().all(|x| *x > 0.0)
    } else {
        cand.iter().all(|x| *x >= 0.0)
    };
    if !ok_sign || cand.iter().any(|x| !x.is_finite()) {
        return (u, residual, false);
    }
    let cand = field_like(&u, cand);
    let nr = op.scaled_norm(&op.residual(&cand));
    if nr <= tol.max(residual) {
        (cand, nr, true)
    } else {
        (u, residual, false)
    }
}

fn initial_guess(u_prev: &CellField) -> Vec<f64> {
    let floor = (1e-10 * u_prev.max()).max(1e-14);
    u_prev.values().iter().map(|x| x.max(floor).ln()).collect()
}

/// Discrete Shannon inequality along the regularized problem:
/// `H_S(u) + εΔt Σ_i ‖w_i‖²_{1,2} + Δt D_S(u) <= H_S(u_prev)`.
pub fn entropy_bound_check(op: &StepOperator, eps: f64, w: &[f64]) -> EntropyBoundCheck {
    let like = op.u_prev;
    let u = exp_field(like, w);
    let n = op.spec.n();
    let hs = shannon_entropy(op.mesh, &u).unwrap_or(f64::NAN);
    let hs0 = shannon_entropy(op.mesh, op.u_prev).unwrap_or(f64::NAN);
    let mut wnorm = 0.0;
    for i in 0..n {
        let wi: Vec<f64> = w.iter().skip(i).step_by(n).copied().collect();
        let l2: f64 = op
            .mesh
            .cells()
            .iter()
            .zip(&wi)
            .map(|(c, x)| c.measure * x * x)
            .sum();
        wnorm += l2 + seminorm_12_sq(op.mesh, &wi);
    }
    let lhs = hs + eps * op.dt * wnorm + op.dt * shannon_dissipation(op.spec, op.mesh, op.nu, &u);
    let slack = 1e-8 * (1.0 + hs0.abs());
    EntropyBoundCheck {
        eps,
        lhs,
        rhs: hs0,
        slack,
        holds: lhs <= hs0 + slack,
    }
}

/// One application of the fixed-point map `w ↦ w^ε` solving
/// `ε A w^ε = −R(e^w)`. Its fixed points solve the regularized problem.
pub fn picard_map(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    u_prev: &CellField,
    w: &[f64],
    eps: f64,
) -> Result<Vec<f64>, SolverError> {
    let op = StepOperator::new(spec, mesh, cfg, u_prev)?;
    let u = exp_field(u_prev, w);
    let r = op.residual(&u);
    let mut a = regularization_matrix(mesh, spec.n());
    a.scale_columns(&vec![eps; a.dim()]);
    a.solve(&r.iter().map(|x| -x).collect::<Vec<_>>())
}

/// Solution of the regularized step at a single `ε`.
#[derive(Debug, Clone)]
pub struct RegularizedSolution {
    pub u: CellField,
    pub w: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub entropy_check: EntropyBoundCheck,
}

fn regularized_stage(
    op: &StepOperator,
    a: &BandMatrix,
    eps: f64,
    w0: Vec<f64>,
    cfg: &SolverConfig,
) -> Result<RegularizedSolution, SolverError> {
    let sys = System {
        op: *op,
        reg: Some((eps, a)),
    };
    // the fixed-point iteration is not contractive in general; its fixed
    // points are found as zeros of w − F(w), i.e. of εAw + R(e^w)
    let out = newton_entropic(&sys, op.u_prev, w0, cfg).map_err(|e| match e {
        SolverError::NewtonFailed { residual, .. } => SolverError::PicardStalled { eps, residual },
        other => other,
    })?;
    let entropy_check = entropy_bound_check(op, eps, &out.w);
    Ok(RegularizedSolution {
        u: exp_field(op.u_prev, &out.w),
        w: out.w,
        iterations: out.iterations,
        residual: out.residual,
        entropy_check,
    })
}

/// Regularized step at a fixed `ε`, started from `log u_prev`.
pub fn solve_step_regularized(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    u_prev: &CellField,
    eps: f64,
) -> Result<RegularizedSolution, SolverError> {
    if !(eps > 0.0) {
        return Err(SolverError::Scheme(
            crate::error::SchemeError::InvalidParameter(format!("eps = {eps}")),
        ));
    }
    let op = StepOperator::new(spec, mesh, cfg, u_prev)?;
    let a = regularization_matrix(mesh, spec.n());
    regularized_stage(&op, &a, eps, initial_guess(u_prev), &cfg.solver)
}

fn finish(
    op: &StepOperator,
    out: NewtonOutcome,
    mut stats: SolverStats,
) -> (CellField, SolverStats) {
    let u = exp_field(op.u_prev, &out.w);
    let (u, res, polished) = density_polish(op, u, out.residual, out.tolerance);
    stats.iterations += out.iterations;
    stats.residual = res;
    stats.tolerance = out.tolerance;
    stats.polished = polished;
    (u, stats)
}

fn attempt(op: &StepOperator, cfg: &SolverConfig) -> Result<(CellField, SolverStats), SolverError> {
    let plain = System { op: *op, reg: None };
    let start = initial_guess(op.u_prev);
    if !cfg.force_regularized {
        if let Ok(out) = newton_entropic(&plain, op.u_prev, start.clone(), cfg) {
            return Ok(finish(op, out, SolverStats::default()));
        }
    }
    let a = regularization_matrix(op.mesh, op.spec.n());
    let mut stats = SolverStats {
        used_regularized: true,
        ..Default::default()
    };
    let mut w = start;
    for &eps in &cfg.eps_path {
        let stage = regularized_stage(op, &a, eps, w, cfg)?;
        stats.iterations += stage.iterations;
        stats.eps_path.push(eps);
        stats.entropy_checks.push(stage.entropy_check);
        w = stage.w;
    }
    let out = newton_entropic(&plain, op.u_prev, w, cfg)?;
    Ok(finish(op, out, stats))
}

fn advance(
    op: &StepOperator,
    u_prev: &CellField,
    dt: f64,
    depth: usize,
    cfg: &SolverConfig,
    out: &mut Vec<SubStep>,
    deepest: &mut usize,
) -> Result<CellField, SolverError> {
    let sub = op.with_dt(dt).with_prev(u_prev);
    match attempt(&sub, cfg) {
        Ok((u, stats)) => {
            *deepest = (*deepest).max(depth);
            out.push(SubStep {
                dt,
                u: u.clone(),
                stats,
            });
            Ok(u)
        }
        Err(e) => {
            if depth >= cfg.dt_halving_max {
                let residual = match e {
                    SolverError::NewtonFailed { residual, .. } => residual,
                    SolverError::PicardStalled { residual, .. } => residual,
                    _ => f64::NAN,
                };
                return Err(SolverError::StepFailed {
                    halvings: depth,
                    residual,
                });
            }
            let mid = advance(op, u_prev, 0.5 * dt, depth + 1, cfg, out, deepest)?;
            advance(op, &mid, 0.5 * dt, depth + 1, cfg, out, deepest)
        }
    }
}

/// Advances `u_prev` by `cfg.dt`.
pub fn solve_step_newton(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    u_prev: &CellField,
) -> Result<StepResult, SolverError> {
    let op = StepOperator::new(spec, mesh, cfg, u_prev)?;
    let mut substeps = Vec::new();
    let mut deepest = 0;
    let u = advance(
        &op,
        u_prev,
        cfg.dt,
        0,
        &cfg.solver,
        &mut substeps,
        &mut deepest,
    )?;
    let u = u.with_time(u_prev.time + cfg.dt);
    let fl = op.fluxes(&u);
    let mut stats = substeps.last().map(|s| s.stats.clone()).unwrap_or_default();
    stats.iterations = substeps.iter().map(|s| s.stats.iterations).sum();
    stats.residual = substeps
        .iter()
        .map(|s| s.stats.residual)
        .fold(0.0, f64::max);
    Ok(StepResult {
        u_new: u,
        mobilities: fl.mobilities,
        fluxes: fl.fluxes,
        stats,
        substeps,
        halvings: deepest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_uniform_1d;
    use crate::scheme::{init_cell_averages, InitialDatum, Mobility};
    use crate::specmat::validate_rows;
    use std::sync::Arc;

    fn spec(rows: &[&[f64]]) -> DiffusionSpec {
        validate_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 1e-12).unwrap()
    }

    #[test]
    fn geometric_default_path() {
        let p = SolverConfig::default().eps_path;
        assert_eq!(p.len(), 11);
        assert!((p[0] - 1e-2).abs() < 1e-18 && (p[10] - 1e-12).abs() < 1e-24);
    }

    #[test]
    fn constant_state_is_fixed_point() {
        let m = build_uniform_1d(0.0, 1.0, 10).unwrap();
        let s = spec(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let cfg = SchemeConfig::new(1e-2, 1.0);
        let u = CellField::constant(10, &[0.5, 1.5]);
        let r = solve_step_newton(&s, &m, &cfg, &u).unwrap();
        assert!(r.stats.iterations <= 1);
        assert!(r.stats.residual < 1e-14);
        for (a, b) in r.u_new.values().iter().zip(u.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn bump(n_cells: usize) -> (crate::mesh::Mesh, CellField) {
        let m = build_uniform_1d(-1.0, 1.0, n_cells).unwrap();
        let d = InitialDatum::Function {
            n: 1,
            f: Arc::new(|x| vec![(1.0 - 4.0 * x[0] * x[0]).max(0.0) + 1e-3]),
        };
        let u = init_cell_averages(&m, &d, 1).unwrap();
        (m, u)
    }

    #[test]
    fn porous_medium_bump_conserves_mass() {
        let (m, u0) = bump(50);
        let s = spec(&[&[1.0]]);
        let cfg = SchemeConfig::new(1e-3, 1.0);
        let mass0 = u0.mass(&m)[0];
        let mut u = u0;
        for _ in 0..20 {
            let r = solve_step_newton(&s, &m, &cfg, &u).unwrap();
            assert!(r.stats.residual <= r.stats.tolerance);
            u = r.u_new;
            assert!(u.min() > 0.0);
            assert!(((u.mass(&m)[0] - mass0) / mass0).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_step_is_handled() {
        let (m, u0) = bump(30);
        let s = spec(&[&[1.0]]);
        let mut cfg = SchemeConfig::new(1e4, 1e4);
        cfg.solver.max_newton = 8;
        match solve_step_newton(&s, &m, &cfg, &u0) {
            Ok(r) => {
                assert!(r.u_new.min() > 0.0);
                let total: f64 = r.substeps.iter().map(|s| s.dt).sum();
                assert!((total - 1e4).abs() < 1e-6);
            }
            Err(e) => assert!(matches!(e, SolverError::StepFailed { .. })),
        }
    }

    #[test]
    fn picard_map_on_constant_state() {
        let m = build_uniform_1d(0.0, 1.0, 6).unwrap();
        let s = spec(&[&[1.0]]);
        let cfg = SchemeConfig::new(1e-2, 1.0);
        let u = CellField::constant(6, &[2.0]);
        let w = vec![2f64.ln(); 6];
        let next = picard_map(&s, &m, &cfg, &u, &w, 1e-3).unwrap();
        assert!(next.iter().all(|x| x.abs() < 1e-12));
        // diagonal dominance margin of M' is ε m(K)
        let a = regularization_matrix(&m, 1);
        for r in 0..6 {
            let off: f64 = (0..6).filter(|c| *c != r).map(|c| a.get(r, c).abs()).sum();
            assert!((a.get(r, r) - off - m.cells()[r].measure).abs() < 1e-12);
        }
    }

    #[test]
    fn regularized_path_agrees_with_newton() {
        let m = build_uniform_1d(0.0, 1.0, 20).unwrap();
        let s = spec(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let d = InitialDatum::Cosine {
            mean: vec![1.0, 0.8],
            amplitude: vec![0.5, -0.3],
            modes: vec![1.0, 2.0],
        };
        let u0 = init_cell_averages(&m, &d, 2).unwrap();
        for mob in [Mobility::Upwind, Mobility::LogMean] {
            let cfg = SchemeConfig::new(5e-3, 1.0).with_mobility(mob);
            let direct = solve_step_newton(&s, &m, &cfg, &u0).unwrap();
            let mut cfg_r = cfg.clone();
            cfg_r.solver.force_regularized = true;
            let reg = solve_step_newton(&s, &m, &cfg_r, &u0).unwrap();
            assert!(reg.stats.used_regularized);
            assert_eq!(reg.stats.eps_path.len(), 11);
            assert!(reg.stats.entropy_checks.iter().all(|c| c.holds));
            for (a, b) in direct.u_new.values().iter().zip(reg.u_new.values()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}
