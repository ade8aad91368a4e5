//! Long-time behaviour: the steady-state targets fixed by the initial mass,
//! decay of `H_R(u|u*)`, and the reduced scalar problem for the sum variable
//! when all entries of `B` coincide.

use serde::Serialize;

use crate::entropy::EntropyLedger;
use crate::error::AsymptoticsError;
use crate::mesh::{CellField, Mesh};
use crate::run::{integrate, integrate_until, IntegrateOptions, RunOutput};
use crate::scheme::SchemeConfig;
use crate::specmat::{project_range, validate_rows, DiffusionSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateInfo {
    pub mass: Vec<f64>,
    /// `B m / |Ω|`, the constant pressure of every steady state.
    pub bu_star: Vec<f64>,
    /// The unique element of `ran B` with `B û* = B m / |Ω|`.
    pub u_hat_star: Vec<f64>,
    /// `(B m)_i / (b_ii |Ω|)`.
    pub linf_bounds: Vec<f64>,
    pub domain_measure: f64,
}

impl SteadyStateInfo {
    pub fn representative(&self, mesh: &Mesh) -> CellField {
        CellField::constant(mesh.n_cells(), &self.u_hat_star)
    }
}

pub fn steady_state_targets(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    u0: &CellField,
) -> Result<SteadyStateInfo, AsymptoticsError> {
    let mass = u0.mass(mesh);
    if let Some(i) = mass.iter().position(|m| !(*m > 0.0)) {
        return Err(AsymptoticsError::ZeroMass(i));
    }
    let omega = mesh.domain_measure();
    let bm = spec.apply(&mass);
    let avg: Vec<f64> = mass.iter().map(|m| m / omega).collect();
    Ok(SteadyStateInfo {
        bu_star: bm.iter().map(|x| x / omega).collect(),
        u_hat_star: project_range(spec, &avg),
        linf_bounds: bm
            .iter()
            .enumerate()
            .map(|(i, x)| x / (spec.b(i, i) * omega))
            .collect(),
        mass,
        domain_measure: omega,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LongTimeConfig {
    pub t_max: f64,
    /// Stop once `‖û^k − û^{k−1}‖_{0,2}/Δt < tol_steady`; `0` disables.
    pub tol_steady: f64,
    pub tol_final: f64,
    /// Extra times at which full states are kept.
    pub sample_times: Vec<f64>,
    /// Keep every `stride`-th state in the trajectory.
    pub stride: usize,
}

impl Default for LongTimeConfig {
    fn default() -> Self {
        Self {
            t_max: 50.0,
            tol_steady: 1e-8,
            tol_final: 1e-4,
            sample_times: Vec::new(),
            stride: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayRow {
    pub t: f64,
    /// `‖û − û*‖_{0,2}`
    pub dist_hat: f64,
    /// `H_R(u | û*)`
    pub h_r_rel: f64,
    pub mass: Vec<f64>,
    pub min_density: f64,
    /// `‖û−û*‖ <= λ⁻¹‖B^{1/2}(û−û*)‖ <= λ⁻¹(2 H_R(u|û*))^{1/2}` held.
    pub chain_ok: bool,
}

#[derive(Debug, Clone)]
pub struct LongTimeOutput {
    pub info: SteadyStateInfo,
    pub rows: Vec<DecayRow>,
    pub run: RunOutput,
    pub samples: Vec<CellField>,
    pub slack: f64,
    pub stopped_at_steady_state: bool,
    pub tol_final: f64,
}

impl LongTimeOutput {
    /// Largest increase of `H_R(u|û*)` between consecutive steps.
    pub fn max_increase(&self) -> (usize, f64) {
        self.rows
            .windows(2)
            .enumerate()
            .map(|(k, w)| (k + 1, w[1].h_r_rel - w[0].h_r_rel))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }

    pub fn terminal_distance(&self) -> f64 {
        self.rows.last().map(|r| r.dist_hat).unwrap_or(f64::NAN)
    }

    pub fn chain_holds(&self) -> bool {
        self.rows.iter().all(|r| r.chain_ok)
    }

    /// Monotone decay within slack and the terminal tolerance.
    pub fn verify(&self) -> Result<(), AsymptoticsError> {
        let (step, inc) = self.max_increase();
        if inc > self.slack {
            return Err(AsymptoticsError::NoDecay {
                step,
                increase: inc,
                slack: self.slack,
            });
        }
        Ok(())
    }

    pub fn terminal_ok(&self) -> bool {
        self.terminal_distance() <= self.tol_final
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.info.mass.len();
        let mut header = vec!["t".to_string(), "dist_hat".into(), "H_R_rel".into()];
        header.extend((0..n).map(|i| format!("mass_{i}")));
        header.push("min_density".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                crate::entropy::fmt(r.t),
                crate::entropy::fmt(r.dist_hat),
                crate::entropy::fmt(r.h_r_rel),
            ];
            rec.extend(r.mass.iter().map(|m| crate::entropy::fmt(*m)));
            rec.push(crate::entropy::fmt(r.min_density));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn decay_row(spec: &DiffusionSpec, mesh: &Mesh, info: &SteadyStateInfo, u: &CellField) -> DecayRow {
    let n = spec.n();
    let mut dist2 = 0.0;
    let mut bdist2 = 0.0;
    let mut d = vec![0.0; n];
    for (k, c) in mesh.cells().iter().enumerate() {
        let hat = project_range(spec, u.cell(k));
        for i in 0..n {
            d[i] = hat[i] - info.u_hat_star[i];
        }
        dist2 += c.measure * d.iter().map(|x| x * x).sum::<f64>();
        // B^{1/2} û = B^{1/2} u, so this is also 2 H_R(u|û*) per cell
        bdist2 += c.measure * spec.quadratic_form(&d);
    }
    let h_r_rel = 0.5 * bdist2;
    let lam = spec.lambda();
    let lhs = dist2.sqrt();
    let mid = bdist2.max(0.0).sqrt() / lam;
    let rhs = (2.0 * h_r_rel).max(0.0).sqrt() / lam;
    let tol = 1e-12 * (1.0 + rhs);
    DecayRow {
        t: u.time,
        dist_hat: lhs,
        h_r_rel,
        mass: u.mass(mesh),
        min_density: u.min(),
        chain_ok: lhs <= mid + tol && mid <= rhs + tol,
    }
}

fn projected_change(spec: &DiffusionSpec, mesh: &Mesh, a: &CellField, b: &CellField) -> f64 {
    let mut s = 0.0;
    for (k, c) in mesh.cells().iter().enumerate() {
        let d: Vec<f64> = a
            .cell(k)
            .iter()
            .zip(b.cell(k))
            .map(|(x, y)| x - y)
            .collect();
        s += c.measure * project_range(spec, &d).iter().map(|x| x * x).sum::<f64>();
    }
    s.sqrt()
}

/// Runs to `t_max` (or the steady-state criterion) recording the decay of
/// `H_R(u|û*)` and `‖û − û*‖_{0,2}` after every step.
pub fn longtime_run(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    u0: &CellField,
    lt: &LongTimeConfig,
) -> Result<LongTimeOutput, AsymptoticsError> {
    let info = steady_state_targets(spec, mesh, u0)?;
    let mut cfg = cfg.clone();
    cfg.t_final = lt.t_max;
    let mut rows = vec![decay_row(spec, mesh, &info, u0)];
    let mut samples = Vec::new();
    let mut steady = false;
    let tol_t = 1e-9 * lt.t_max.max(1.0);
    if lt.sample_times.iter().any(|t| (t - u0.time).abs() <= tol_t) {
        samples.push(u0.clone());
    }
    let run = integrate_until(
        spec,
        mesh,
        &cfg,
        u0,
        IntegrateOptions {
            stride: lt.stride,
            edge_checks: false,
        },
        |prev, next| {
            rows.push(decay_row(spec, mesh, &info, next));
            if lt
                .sample_times
                .iter()
                .any(|t| (t - next.time).abs() <= tol_t)
            {
                samples.push(next.clone());
            }
            let dt = next.time - prev.time;
            let hit = lt.tol_steady > 0.0
                && projected_change(spec, mesh, prev, next) / dt < lt.tol_steady;
            steady |= hit;
            hit
        },
    )?;
    if let Some(e) = run.failure.clone() {
        return Err(AsymptoticsError::Solver(e));
    }
    let slack = 1e-8 * (1.0 + rows[0].h_r_rel);
    Ok(LongTimeOutput {
        info,
        rows,
        run,
        samples,
        slack,
        stopped_at_steady_state: steady,
        tol_final: lt.tol_final,
    })
}

/// `w = Σ_i u_i` per cell.
pub fn sum_field(u: &CellField) -> CellField {
    u.map_cells(|z| vec![z.iter().sum()])
}

/// When every entry of `B` equals `c`, all pressures equal `c w` with
/// `w = Σ_i u_i`, the upwind choice is shared by all species, and summing the
/// scheme over `i` gives the scalar scheme for `w` with `B = [c]` and the same
/// artificial diffusion. Returns that scalar trajectory (every step).
pub fn reduced_sum_oracle(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    u0: &CellField,
) -> Result<(RunOutput, EntropyLedger), AsymptoticsError> {
    let c = spec.b(0, 0);
    let n = spec.n();
    let uniform = (0..n).all(|i| (0..n).all(|j| spec.b(i, j) == c));
    if !uniform || cfg.mobility != crate::scheme::Mobility::Upwind {
        return Err(AsymptoticsError::NotUniformRankOne);
    }
    let scalar =
        validate_rows(&[vec![c]], 1e-12).map_err(|_| AsymptoticsError::NotUniformRankOne)?;
    let w0 = sum_field(u0);
    // keep the artificial diffusion of the full system
    let mut cfg1 = cfg.clone();
    cfg1.eta = Some(cfg.eta(mesh));
    let run = integrate(&scalar, mesh, &cfg1, &w0, IntegrateOptions::default())?;
    if let Some(e) = run.failure.clone() {
        return Err(AsymptoticsError::Solver(e));
    }
    let ledger = run.ledger.clone();
    Ok((run, ledger))
}

/// `‖a − b‖_{0,2}` for fields with the same layout.
pub fn l2_difference(mesh: &Mesh, a: &CellField, b: &CellField) -> f64 {
    let mut s = 0.0;
    for (k, c) in mesh.cells().iter().enumerate() {
        s += c.measure
            * a.cell(k)
                .iter()
                .zip(b.cell(k))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_uniform_1d;
    use approx::assert_relative_eq;

    fn spec(rows: &[&[f64]]) -> DiffusionSpec {
        validate_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 1e-12).unwrap()
    }

    #[test]
    fn targets_examples() {
        let m = build_uniform_1d(0.0, 1.0, 10).unwrap();
        let id = spec(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let u = CellField::constant(10, &[1.0, 2.0]);
        let t = steady_state_targets(&id, &m, &u).unwrap();
        assert_relative_eq!(t.u_hat_star[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(t.u_hat_star[1], 2.0, epsilon = 1e-14);

        let ones = spec(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let u = CellField::constant(10, &[1.0, 1.0]);
        let t = steady_state_targets(&ones, &m, &u).unwrap();
        assert_relative_eq!(t.bu_star[0], 2.0, epsilon = 1e-14);
        for i in 0..2 {
            assert_relative_eq!(t.u_hat_star[i], 1.0, epsilon = 1e-14);
            assert_relative_eq!(t.linf_bounds[i], 2.0, epsilon = 1e-14);
            assert!(t.u_hat_star[i] <= t.linf_bounds[i] + 1e-12);
        }
        let u2 = CellField::constant(10, &[2.0, 2.0]);
        let t2 = steady_state_targets(&ones, &m, &u2).unwrap();
        assert_relative_eq!(t2.bu_star[0], 4.0, epsilon = 1e-14);
        assert_relative_eq!(t2.linf_bounds[1], 4.0, epsilon = 1e-14);

        let z = CellField::constant(10, &[1.0, 0.0]);
        assert!(matches!(
            steady_state_targets(&ones, &m, &z),
            Err(AsymptoticsError::ZeroMass(1))
        ));
    }

    #[test]
    fn steady_constant_stays() {
        let m = build_uniform_1d(0.0, 1.0, 8).unwrap();
        let id = spec(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let u = CellField::constant(8, &[0.5, 1.5]);
        let cfg = SchemeConfig::new(0.1, 1.0);
        let lt = LongTimeConfig {
            t_max: 1.0,
            tol_steady: 0.0,
            ..Default::default()
        };
        let out = longtime_run(&id, &m, &cfg, &u, &lt).unwrap();
        assert!(out.rows.iter().all(|r| r.dist_hat < 1e-13));
        assert!(out.verify().is_ok() && out.terminal_ok());
    }
}
