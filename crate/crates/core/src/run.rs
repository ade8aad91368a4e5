//! Time loop: repeated implicit steps with the entropy ledger kept alongside.

use serde::Serialize;

use crate::entropy::{gradient_flow_defect, EntropyLedger};
use crate::error::{EntropyError, SolverError};
use crate::mesh::{CellField, Mesh};
use crate::scheme::SchemeConfig;
use crate::solver::{solve_step_newton, SolverStats};
use crate::specmat::DiffusionSpec;

#[derive(Debug, Clone, Copy)]
pub struct IntegrateOptions {
    /// Keep every `stride`-th state (the initial and final states are always
    /// kept). `1` keeps the whole trajectory.
    pub stride: usize,
    /// Evaluate the gradient-flow edge relation after every step.
    pub edge_checks: bool,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            edge_checks: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StepSummary {
    pub step: usize,
    pub t: f64,
    pub iterations: usize,
    pub residual: f64,
    pub tolerance: f64,
    pub halvings: usize,
    pub used_regularized: bool,
    pub entropy_checks_ok: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub states: Vec<CellField>,
    pub ledger: EntropyLedger,
    pub steps: Vec<StepSummary>,
    /// Largest per-step gradient-flow defect (see [`gradient_flow_defect`]).
    pub max_edge_defect: f64,
    /// Set when a step could not be solved; the ledger stops before it.
    pub failure: Option<SolverError>,
}

impl RunOutput {
    pub fn final_state(&self) -> &CellField {
        self.states.last().expect("initial state is always kept")
    }

    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

fn summarize(step: usize, t: f64, stats: &SolverStats, halvings: usize) -> StepSummary {
    StepSummary {
        step,
        t,
        iterations: stats.iterations,
        residual: stats.residual,
        tolerance: stats.tolerance,
        halvings,
        used_regularized: stats.used_regularized,
        entropy_checks_ok: stats.entropy_checks.iter().all(|c| c.holds),
    }
}

/// Runs `cfg.n_steps()` steps from `u0`.
pub fn integrate(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    u0: &CellField,
    opts: IntegrateOptions,
) -> Result<RunOutput, EntropyError> {
    integrate_until(spec, mesh, cfg, u0, opts, |_, _| false)
}

/// Like [`integrate`] but stops early once `stop(previous, current)` holds.
pub fn integrate_until(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    u0: &CellField,
    opts: IntegrateOptions,
    mut stop: impl FnMut(&CellField, &CellField) -> bool,
) -> Result<RunOutput, EntropyError> {
    let nu = cfg.viscosity(mesh);
    let mut ledger = EntropyLedger::new(spec, mesh, cfg.mobility, nu, u0)?;
    let mut states = vec![u0.clone()];
    let mut steps = Vec::new();
    let mut max_edge_defect = 0.0f64;
    let mut failure = None;
    let mut u = u0.clone();
    let n_steps = cfg.n_steps();
    let stride = opts.stride.max(1);
    for k in 1..=n_steps {
        let res = match solve_step_newton(spec, mesh, cfg, &u) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let mut t = u.time;
        for sub in &res.substeps {
            t += sub.dt;
            let us = sub.u.clone().with_time(t);
            ledger.record(
                spec,
                mesh,
                &us,
                sub.dt,
                sub.stats.iterations,
                sub.stats.residual,
            )?;
            if opts.edge_checks {
                max_edge_defect =
                    max_edge_defect.max(gradient_flow_defect(spec, mesh, cfg.mobility, &us));
            }
        }
        // the nominal grid time, free of accumulated rounding
        let next = res.u_new.with_time(u0.time + k as f64 * cfg.dt);
        steps.push(summarize(k, next.time, &res.stats, res.halvings));
        let done = stop(&u, &next);
        if k % stride == 0 || k == n_steps || done {
            states.push(next.clone());
        }
        u = next;
        if done {
            break;
        }
    }
    if failure.is_some() && states.last().map(|s| s.time) != Some(u.time) {
        states.push(u);
    }
    Ok(RunOutput {
        states,
        ledger,
        steps,
        max_edge_defect,
        failure,
    })
}
