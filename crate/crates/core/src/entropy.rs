//! Shannon and Rao entropies, their discrete dissipations, the per-step
//! ledger, relative entropies and the weak–strong stability monitor.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::EntropyError;
use crate::mesh::{nesting_map, restrict, seminorm_12_sq, CellField, Mesh};
use crate::scheme::{edge_mobilities, log_ratio, Mobility};
use crate::specmat::{coercivity_constant, DiffusionSpec};

/// `h_S(z) = z (log z − 1) + 1` with `h_S(0) = 1`.
#[inline]
pub fn shannon_density(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z * (z.ln() - 1.0) + 1.0
    }
}

fn check_nonnegative(u: &CellField) -> Result<(), EntropyError> {
    let n = u.n_species();
    match u.values().iter().position(|v| !(*v >= 0.0)) {
        Some(idx) => Err(EntropyError::NegativeDensity {
            cell: idx / n,
            species: idx % n,
            value: u.values()[idx],
        }),
        None => Ok(()),
    }
}

pub fn shannon_entropy(mesh: &Mesh, u: &CellField) -> Result<f64, EntropyError> {
    check_nonnegative(u)?;
    Ok(mesh
        .cells()
        .iter()
        .enumerate()
        .map(|(k, c)| c.measure * u.cell(k).iter().map(|z| shannon_density(*z)).sum::<f64>())
        .sum())
}

pub fn rao_entropy(spec: &DiffusionSpec, mesh: &Mesh, u: &CellField) -> Result<f64, EntropyError> {
    check_nonnegative(u)?;
    Ok(0.5
        * mesh
            .cells()
            .iter()
            .enumerate()
            .map(|(k, c)| c.measure * spec.quadratic_form(u.cell(k)))
            .sum::<f64>())
}

/// `Σ_σ τ_σ (D u)ᵀ B (D u) + 4 η^α Σ_i |u_i^{1/2}|²_{1,2}`.
pub fn shannon_dissipation(spec: &DiffusionSpec, mesh: &Mesh, nu: f64, u: &CellField) -> f64 {
    let n = spec.n();
    let mut du = vec![0.0; n];
    let mut total = 0.0;
    for e in mesh.interior_edges() {
        for (i, d) in du.iter_mut().enumerate() {
            *d = u.get(e.l, i) - u.get(e.k, i);
        }
        total += e.transmissibility * spec.quadratic_form(&du);
        if nu > 0.0 {
            for i in 0..n {
                let d = u.get(e.l, i).max(0.0).sqrt() - u.get(e.k, i).max(0.0).sqrt();
                total += 4.0 * nu * e.transmissibility * d * d;
            }
        }
    }
    total
}

/// `Σ_i Σ_σ τ_σ u_{i,σ} (D_σ (B u)_i)²`.
pub fn rao_dissipation(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    mobility: Mobility,
    u: &CellField,
) -> f64 {
    let n = spec.n();
    let mob = edge_mobilities(spec, mesh, mobility, u);
    let mut total = 0.0;
    for (idx, e) in mesh.interior_edges().iter().enumerate() {
        let pk = spec.apply(u.cell(e.k));
        let pl = spec.apply(u.cell(e.l));
        for i in 0..n {
            let dp = pl[i] - pk[i];
            total += e.transmissibility * mob.get(idx, i) * dp * dp;
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub h_s: f64,
    pub h_r: f64,
    pub d_s: f64,
    pub d_r: f64,
    pub r_s: f64,
    pub r_r: f64,
    pub mass: Vec<f64>,
    /// `max_i |mass_i − mass_i(0)| / |mass_i(0)|`.
    pub mass_defect: f64,
    pub min_density: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Per-step entropy budget of a run. Row 0 is the initial state.
#[derive(Debug, Clone, Serialize)]
pub struct EntropyLedger {
    n: usize,
    nu: f64,
    mobility: Mobility,
    h_s0: f64,
    h_r0: f64,
    mass0: Vec<f64>,
    sum_ds: f64,
    sum_dr: f64,
    rows: Vec<LedgerRow>,
}

impl EntropyLedger {
    pub fn new(
        spec: &DiffusionSpec,
        mesh: &Mesh,
        mobility: Mobility,
        nu: f64,
        u0: &CellField,
    ) -> Result<Self, EntropyError> {
        let h_s0 = shannon_entropy(mesh, u0)?;
        let h_r0 = rao_entropy(spec, mesh, u0)?;
        let mass0 = u0.mass(mesh);
        let row = LedgerRow {
            step: 0,
            t: u0.time,
            dt: 0.0,
            h_s: h_s0,
            h_r: h_r0,
            d_s: 0.0,
            d_r: 0.0,
            r_s: 0.0,
            r_r: 0.0,
            mass: mass0.clone(),
            mass_defect: 0.0,
            min_density: u0.min(),
            iterations: 0,
            residual: 0.0,
        };
        Ok(Self {
            n: spec.n(),
            nu,
            mobility,
            h_s0,
            h_r0,
            mass0,
            sum_ds: 0.0,
            sum_dr: 0.0,
            rows: vec![row],
        })
    }

    /// Appends the state `u` reached after a step of length `dt`.
    pub fn record(
        &mut self,
        spec: &DiffusionSpec,
        mesh: &Mesh,
        u: &CellField,
        dt: f64,
        iterations: usize,
        residual: f64,
    ) -> Result<&LedgerRow, EntropyError> {
        let h_s = shannon_entropy(mesh, u)?;
        let h_r = rao_entropy(spec, mesh, u)?;
        let d_s = shannon_dissipation(spec, mesh, self.nu, u);
        let d_r = rao_dissipation(spec, mesh, self.mobility, u);
        self.sum_ds += dt * d_s;
        self.sum_dr += dt * d_r;
        let mass = u.mass(mesh);
        let mass_defect = mass
            .iter()
            .zip(&self.mass0)
            .map(|(a, b)| {
                if *b != 0.0 {
                    ((a - b) / b).abs()
                } else {
                    a.abs()
                }
            })
            .fold(0.0, f64::max);
        let row = LedgerRow {
            step: self.rows.len(),
            t: u.time,
            dt,
            h_s,
            h_r,
            d_s,
            d_r,
            r_s: h_s + self.sum_ds - self.h_s0,
            r_r: h_r + self.sum_dr - self.h_r0,
            mass,
            mass_defect,
            min_density: u.min(),
            iterations,
            residual,
        };
        self.rows.push(row);
        Ok(self.rows.last().expect("just pushed"))
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn initial_shannon(&self) -> f64 {
        self.h_s0
    }

    pub fn initial_rao(&self) -> f64 {
        self.h_r0
    }

    pub fn slack_shannon(&self) -> f64 {
        1e-8 * (1.0 + self.h_s0.abs())
    }

    pub fn slack_rao(&self) -> f64 {
        1e-8 * (1.0 + self.h_r0.abs())
    }

    pub fn max_mass_defect(&self) -> f64 {
        self.rows.iter().map(|r| r.mass_defect).fold(0.0, f64::max)
    }

    pub fn min_density(&self) -> f64 {
        self.rows
            .iter()
            .skip(1)
            .map(|r| r.min_density)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_residuals(&self) -> (f64, f64) {
        self.rows
            .iter()
            .fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |(a, b), r| {
                (a.max(r.r_s), b.max(r.r_r))
            })
    }

    /// Largest increase `H_R(u^k) − H_R(u^{k−1})` over the run.
    pub fn max_rao_increase(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| w[1].h_r - w[0].h_r)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["t", "H_S", "H_R", "D_S", "D_R", "r_S", "r_R"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..self.n).map(|i| format!("mass_{i}")));
        h.extend(
            [
                "min_density",
                "step",
                "dt",
                "mass_defect",
                "newton_iterations",
                "residual",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header())?;
        for r in &self.rows {
            let mut rec = vec![
                fmt(r.t),
                fmt(r.h_s),
                fmt(r.h_r),
                fmt(r.d_s),
                fmt(r.d_r),
                fmt(r.r_s),
                fmt(r.r_r),
            ];
            rec.extend(r.mass.iter().map(|m| fmt(*m)));
            rec.push(fmt(r.min_density));
            rec.push(r.step.to_string());
            rec.push(fmt(r.dt));
            rec.push(fmt(r.mass_defect));
            rec.push(r.iterations.to_string());
            rec.push(fmt(r.residual));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), csv::Error> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Shortest round-trip representation, so CSV values reparse bit-exactly.
pub(crate) fn fmt(x: f64) -> String {
    format!("{x:e}")
}

/// Residuals `(r_S, r_R)` at step `k`, or an error if either exceeds the slack.
pub fn check_discrete_entropy_inequalities(
    ledger: &EntropyLedger,
    k: usize,
) -> Result<(f64, f64), EntropyError> {
    let row = ledger.rows().get(k).ok_or(EntropyError::UnknownStep(k))?;
    if row.r_s > ledger.slack_shannon() {
        return Err(EntropyError::InequalityViolated {
            which: "Shannon",
            step: k,
            residual: row.r_s,
            slack: ledger.slack_shannon(),
        });
    }
    if row.r_r > ledger.slack_rao() {
        return Err(EntropyError::InequalityViolated {
            which: "Rao",
            step: k,
            residual: row.r_r,
            slack: ledger.slack_rao(),
        });
    }
    Ok((row.r_s, row.r_r))
}

/// Gradient-flow edge relation on one edge: returns
/// `(u_σ D p D log u, D p D u)`. For the logarithmic mean the two agree up to
/// a factor `D p`; for upwind the first dominates.
pub fn gradient_flow_terms(u_sigma: f64, u_k: f64, u_l: f64, dp: f64) -> (f64, f64) {
    let dlog = log_ratio(u_l, u_k);
    (u_sigma * dp * dlog, dp * (u_l - u_k))
}

/// Largest relative defect of the gradient-flow edge relation over all
/// edges and species. For the logarithmic mean this measures
/// `|u_σ D log u − D u| / (|D u| + |u_σ D log u|)`; for upwind only
/// violations of `u_σ D p D log u >= D p D u` count. Edges touching a zero
/// density are skipped.
pub fn gradient_flow_defect(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    mobility: Mobility,
    u: &CellField,
) -> f64 {
    let n = spec.n();
    let mob = edge_mobilities(spec, mesh, mobility, u);
    let mut worst = 0.0f64;
    for (idx, e) in mesh.interior_edges().iter().enumerate() {
        let pk = spec.apply(u.cell(e.k));
        let pl = spec.apply(u.cell(e.l));
        for i in 0..n {
            let (uk, ul) = (u.get(e.k, i), u.get(e.l, i));
            if uk <= 0.0 || ul <= 0.0 {
                continue;
            }
            let us = mob.get(idx, i);
            let d = match mobility {
                Mobility::LogMean => {
                    let a = us * log_ratio(ul, uk);
                    let b = ul - uk;
                    let scale = a.abs() + b.abs();
                    if scale > 0.0 {
                        (a - b).abs() / scale
                    } else {
                        0.0
                    }
                }
                Mobility::Upwind => {
                    let (a, b) = gradient_flow_terms(us, uk, ul, pl[i] - pk[i]);
                    let scale = a.abs() + b.abs();
                    if scale > 0.0 {
                        ((b - a) / scale).max(0.0)
                    } else {
                        0.0
                    }
                }
            };
            worst = worst.max(d);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelativeEntropies {
    pub shannon: f64,
    pub rao: f64,
    pub c_star: f64,
    pub l2_distance_sq: f64,
    pub coercive: bool,
}

/// `h_S(u|v)` per scalar pair, with `0 log 0 = 0`.
#[inline]
pub fn relative_shannon_density(u: f64, v: f64) -> f64 {
    if u == 0.0 {
        v
    } else {
        u * (u / v).ln() - (u - v)
    }
}

/// `H_S(u|v)`, `H_R(u|v)` and the coercivity check against `c_*(M)`.
pub fn relative_entropies(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    u: &CellField,
    v: &CellField,
    m_bound: f64,
) -> Result<RelativeEntropies, EntropyError> {
    check_nonnegative(u)?;
    let n = spec.n();
    if let Some(idx) = v.values().iter().position(|x| !(*x > 0.0)) {
        return Err(EntropyError::NonpositiveReference {
            cell: idx / n,
            species: idx % n,
            value: v.values()[idx],
        });
    }
    let mut hs = 0.0;
    let mut hr = 0.0;
    let mut l2 = 0.0;
    let mut d = vec![0.0; n];
    for (k, c) in mesh.cells().iter().enumerate() {
        for i in 0..n {
            let (a, b) = (u.get(k, i), v.get(k, i));
            hs += c.measure * relative_shannon_density(a, b);
            d[i] = a - b;
            l2 += c.measure * d[i] * d[i];
        }
        hr += 0.5 * c.measure * spec.quadratic_form(&d);
    }
    let c_star = coercivity_constant(spec, m_bound)?;
    Ok(RelativeEntropies {
        shannon: hs,
        rao: hr,
        c_star,
        l2_distance_sq: l2,
        coercive: hs + hr >= c_star * l2 - 1e-10,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GronwallReport {
    pub times: Vec<f64>,
    pub h_rel: Vec<f64>,
    /// `H_rel(0) exp(C t)`.
    pub envelope: Vec<f64>,
    pub c: f64,
    pub c_star: f64,
    pub c_young: f64,
    pub m_bound: f64,
    pub grad_log_sup: f64,
    pub grad_pressure_sup: f64,
    /// `max_t H_rel(t)/envelope(t)`; `None` when `H_rel(0)` vanishes.
    pub max_ratio: Option<f64>,
    /// `max_t H_rel(t)`, the resolution-limited floor when `H_rel(0) = 0`.
    pub floor: f64,
    pub within_tolerance: Option<bool>,
}

/// Weak–strong stability monitor.
///
/// `coarse` and `reference` are snapshot sequences on nested meshes with
/// matching times. The reference is averaged onto the coarse mesh. The rate
/// `C = 2 C_young / c_*` uses `C_young = a1 (G_log² + G_p²)` where `G_log` and
/// `G_p` are the largest discrete gradients of `log v` and `B v` measured on
/// the reference.
pub fn gronwall_monitor(
    spec: &DiffusionSpec,
    coarse_mesh: &Mesh,
    coarse: &[CellField],
    fine_mesh: &Mesh,
    reference: &[CellField],
    tol_monitor: f64,
) -> Result<GronwallReport, crate::error::DiagnosticsError> {
    use crate::error::DiagnosticsError;
    if coarse.is_empty() || reference.is_empty() {
        return Err(DiagnosticsError::EmptyTrajectory);
    }
    let map = nesting_map(coarse_mesh, fine_mesh)?;
    let n = spec.n();

    let mut g_log = 0.0f64;
    let mut g_p = 0.0f64;
    let mut m_bound = 0.0f64;
    for v in reference {
        if v.min() <= 0.0 {
            return Err(DiagnosticsError::ReferenceNotPositive);
        }
        m_bound = m_bound.max(v.max());
        for e in fine_mesh.interior_edges() {
            let pk = spec.apply(v.cell(e.k));
            let pl = spec.apply(v.cell(e.l));
            for i in 0..n {
                g_log = g_log.max(log_ratio(v.get(e.l, i), v.get(e.k, i)).abs() / e.dist);
                g_p = g_p.max((pl[i] - pk[i]).abs() / e.dist);
            }
        }
    }
    let c_star = coercivity_constant(spec, m_bound)?;
    let c_young = spec.a1() * (g_log * g_log + g_p * g_p);
    let c = 2.0 * c_young / c_star;

    let mut times = Vec::new();
    let mut h_rel = Vec::new();
    let mut j = 0;
    for u in coarse {
        let t = u.time;
        while j < reference.len() && reference[j].time < t - 1e-9 * t.abs().max(1.0) {
            j += 1;
        }
        if j == reference.len() || (reference[j].time - t).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(DiagnosticsError::NonNestedTimes(t));
        }
        let v = restrict(fine_mesh, coarse_mesh, &map, &reference[j]);
        let rel = relative_entropies(spec, coarse_mesh, u, &v, m_bound)?;
        times.push(t);
        h_rel.push(rel.shannon + rel.rao);
    }
    let h0 = h_rel[0];
    let t0 = times[0];
    let envelope: Vec<f64> = times.iter().map(|t| h0 * (c * (t - t0)).exp()).collect();
    let floor = h_rel.iter().copied().fold(0.0, f64::max);
    let max_ratio = if h0 > 1e-14 * (1.0 + floor) {
        // compare in log space: exp(C t) overflows quickly
        let lr = h_rel
            .iter()
            .zip(&times)
            .map(|(h, t)| {
                if *h <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    h.ln() - h0.ln() - c * (t - t0)
                }
            })
            .fold(f64::NEG_INFINITY, f64::max);
        Some(lr.exp())
    } else {
        None
    };
    Ok(GronwallReport {
        within_tolerance: max_ratio.map(|r| r <= 1.0 + tol_monitor),
        times,
        h_rel,
        envelope,
        c,
        c_star,
        c_young,
        m_bound,
        grad_log_sup: g_log,
        grad_pressure_sup: g_p,
        max_ratio,
        floor,
    })
}

/// `|B^{1/2} u|²_{1,2}` summed over edges; used by the bounds report.
pub fn sqrt_b_seminorm_sq(spec: &DiffusionSpec, mesh: &Mesh, u: &CellField) -> f64 {
    let n = spec.n();
    let su = u.map_cells(|z| spec.apply_sqrt(z));
    (0..n).map(|i| seminorm_12_sq(mesh, &su.component(i))).sum()
}
