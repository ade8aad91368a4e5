//! Runtime versions of the uniform a priori estimates, space-time comparison
//! of nested runs and oscillation defects.
//!
//! Vector-valued quantities use `‖v‖ = Σ_i ‖v_i‖` for `q ≠ 2` and the
//! Euclidean combination `‖v‖² = Σ_i ‖v_i‖²` for squared `L²`-type norms.

use serde::Serialize;

use crate::entropy::rao_dissipation;
use crate::error::DiagnosticsError;
use crate::mesh::{dual_norm, nesting_map, seminorm_12_sq, seminorm_1q, CellField, Mesh};
use crate::scheme::{edge_mobilities, SchemeConfig};
use crate::specmat::{project_range, DiffusionSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub s1: f64,
    pub s2: f64,
    pub g43: f64,
    pub g1: f64,
    pub flux_l2l43: f64,
    pub time_dual: f64,
    pub drift: f64,
    pub eta: f64,
    pub eta_alpha: f64,
    pub dx: f64,
    pub steps: usize,
}

impl BoundsReport {
    pub fn entries(&self) -> [(&'static str, f64); 7] {
        [
            ("S1", self.s1),
            ("S2", self.s2),
            ("G_4/3", self.g43),
            ("G_1", self.g1),
            ("FluxL2L43", self.flux_l2l43),
            ("TimeDual", self.time_dual),
            ("Drift", self.drift),
        ]
    }

    pub fn all_finite_nonnegative(&self) -> bool {
        self.entries()
            .iter()
            .all(|(_, v)| v.is_finite() && *v >= 0.0)
    }
}

fn h1_sq(mesh: &Mesh, v: &[f64]) -> f64 {
    let l2: f64 = mesh
        .cells()
        .iter()
        .zip(v)
        .map(|(c, x)| c.measure * x * x)
        .sum();
    l2 + seminorm_12_sq(mesh, v)
}

/// Sums over a stored trajectory (consecutive states, `Δt_k = t_k − t_{k−1}`).
pub fn compute_bounds_report(
    spec: &DiffusionSpec,
    mesh: &Mesh,
    cfg: &SchemeConfig,
    states: &[CellField],
) -> Result<BoundsReport, DiagnosticsError> {
    if states.is_empty() {
        return Err(DiagnosticsError::EmptyTrajectory);
    }
    let n = spec.n();
    let nu = cfg.viscosity(mesh);
    let d = mesh.dim() as f64;
    let mut r = BoundsReport {
        s1: 0.0,
        s2: 0.0,
        g43: 0.0,
        g1: 0.0,
        flux_l2l43: 0.0,
        time_dual: 0.0,
        drift: 0.0,
        eta: cfg.eta(mesh),
        eta_alpha: nu,
        dx: mesh.size(),
        steps: states.len() - 1,
    };
    let mut max_l2 = 0.0f64;
    let mut rao_sum = 0.0;
    for (k, u) in states.iter().enumerate() {
        let mut e2 = 0.0;
        for (kk, c) in mesh.cells().iter().enumerate() {
            e2 += c.measure * u.cell(kk).iter().map(|x| x * x).sum::<f64>();
        }
        max_l2 = max_l2.max(e2.sqrt());
        if k == 0 {
            continue;
        }
        let dt = u.time - states[k - 1].time;
        let hat = u.map_cells(|z| project_range(spec, z));
        let sq = u.map_cells(|z| spec.apply_sqrt(z));
        let mut s1 = 0.0;
        let mut root = 0.0;
        let mut g43 = 0.0;
        let mut g1 = 0.0;
        for i in 0..n {
            let ui = u.component(i);
            s1 += h1_sq(mesh, &hat.component(i)) + h1_sq(mesh, &sq.component(i));
            let si: Vec<f64> = ui.iter().map(|x| x.max(0.0).sqrt()).collect();
            root += seminorm_12_sq(mesh, &si);
            g43 += seminorm_1q(mesh, &ui, 4.0 / 3.0)?;
            g1 += seminorm_1q(mesh, &ui, 1.0)?;
        }
        r.s1 += dt * (s1 + nu * root);
        r.g43 += dt * g43 * g43;
        r.g1 += dt * g1 * g1;
        rao_sum += dt * rao_dissipation(spec, mesh, cfg.mobility, u);

        let mob = edge_mobilities(spec, mesh, cfg.mobility, u);
        let mut flux = 0.0;
        let mut drift = 0.0;
        for i in 0..n {
            let mut acc = 0.0;
            let mut dr = 0.0;
            for (idx, e) in mesh.interior_edges().iter().enumerate() {
                let pk = spec.apply(u.cell(e.k));
                let pl = spec.apply(u.cell(e.l));
                let us = mob.get(idx, i);
                let g = us * d * (pl[i] - pk[i]) / e.dist;
                acc += mesh.diamond_measure(e) * g.abs().powf(4.0 / 3.0);
                let (hk, hl) = mesh.dual_halves(e);
                dr += hk * (us - u.get(e.k, i)).abs() + hl * (us - u.get(e.l, i)).abs();
            }
            flux += acc.powf(0.75);
            drift += dr;
        }
        r.flux_l2l43 += dt * flux * flux;
        r.drift += dt * drift * drift;

        let prev = &states[k - 1];
        let mut td = 0.0;
        for i in 0..n {
            let dv: Vec<f64> = u
                .component(i)
                .iter()
                .zip(prev.component(i))
                .map(|(a, b)| (a - b) / dt)
                .collect();
            td += dual_norm(mesh, &dv, 4.0, 1e-6)?;
        }
        r.time_dual += dt * td * td;
    }
    r.s2 = max_l2 + rao_sum;
    Ok(r)
}

/// A state on a mesh at the times of a trajectory: `u(t) = u^k` on
/// `(t_{k−1}, t_k]`.
pub struct Level<'a> {
    pub mesh: &'a Mesh,
    pub states: &'a [CellField],
}

fn state_at<'a>(states: &'a [CellField], t: f64) -> &'a CellField {
    let tol = 1e-9 * t.abs().max(1.0);
    let idx = states.partition_point(|s| s.time < t - tol);
    &states[idx.min(states.len() - 1)]
}

/// `Σ_j Δt_j Σ_F m(F) g(u_c(K(F), t_j), u_f(F, t_j))` over the fine time
/// intervals whose midpoint lies in `window`.
pub fn space_time_integral(
    coarse: &Level,
    fine: &Level,
    window: (f64, f64),
    mut g: impl FnMut(&[f64], &[f64]) -> f64,
) -> Result<f64, DiagnosticsError> {
    if coarse.states.is_empty() || fine.states.is_empty() {
        return Err(DiagnosticsError::EmptyTrajectory);
    }
    let map = nesting_map(coarse.mesh, fine.mesh)?;
    let c_end = coarse.states.last().expect("nonempty").time;
    let mut total = 0.0;
    for j in 1..fine.states.len() {
        let (t0, t1) = (fine.states[j - 1].time, fine.states[j].time);
        let mid = 0.5 * (t0 + t1);
        if mid < window.0 || mid > window.1 {
            continue;
        }
        if t1 > c_end + 1e-9 * c_end.abs().max(1.0) {
            return Err(DiagnosticsError::NonNestedTimes(t1));
        }
        let uc = state_at(coarse.states, t1);
        let uf = &fine.states[j];
        let mut s = 0.0;
        for (f, cell) in fine.mesh.cells().iter().enumerate() {
            s += cell.measure * g(uc.cell(map[f]), uf.cell(f));
        }
        total += (t1 - t0) * s;
    }
    Ok(total)
}

/// Test functions for the oscillation defect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TestFunction {
    /// `|P_{L⊥} s|²`
    ProjectedSquare,
    /// `|s|²`
    Square,
    /// `|P_L s|²`, the transported component.
    KernelSquare,
}

impl TestFunction {
    pub fn eval(&self, spec: &DiffusionSpec, s: &[f64]) -> f64 {
        let v = match self {
            Self::ProjectedSquare => project_range(spec, s),
            Self::Square => s.to_vec(),
            Self::KernelSquare => crate::specmat::project_kernel(spec, s),
        };
        v.iter().map(|x| x * x).sum()
    }
}

/// `defect_m = ∫∫_window |f(u_m) − f(u_finest)|` for every level but the
/// last, which is the reference.
pub fn oscillation_defect(
    spec: &DiffusionSpec,
    levels: &[Level],
    f: TestFunction,
    window: (f64, f64),
) -> Result<Vec<f64>, DiagnosticsError> {
    if levels.len() < 3 {
        return Err(DiagnosticsError::InsufficientLevels {
            min: 3,
            got: levels.len(),
        });
    }
    let finest = levels.last().expect("nonempty");
    levels[..levels.len() - 1]
        .iter()
        .map(|lv| {
            space_time_integral(lv, finest, window, |a, b| {
                (f.eval(spec, a) - f.eval(spec, b)).abs()
            })
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let m = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// `max / min` of a positive sequence; infinite if some entry is not positive.
pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_uniform_1d;
    use crate::specmat::validate_rows;

    #[test]
    fn constant_trajectory_has_zero_bounds() {
        let m = build_uniform_1d(0.0, 1.0, 8).unwrap();
        let s = validate_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]], 1e-12).unwrap();
        let cfg = SchemeConfig::new(0.1, 0.3);
        let states: Vec<CellField> = (0..4)
            .map(|k| CellField::constant(8, &[0.5, 0.7]).with_time(0.1 * k as f64))
            .collect();
        let r = compute_bounds_report(&s, &m, &cfg, &states).unwrap();
        assert!(r.all_finite_nonnegative());
        // constant states still carry their L² norm in S1
        assert!(r.s1 > 0.0);
        assert_eq!(
            (r.g43, r.g1, r.drift, r.time_dual, r.flux_l2l43),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn identical_levels_have_zero_defect() {
        let s = validate_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]], 1e-12).unwrap();
        let meshes: Vec<Mesh> = [4, 8, 16]
            .iter()
            .map(|&c| build_uniform_1d(0.0, 1.0, c).unwrap())
            .collect();
        let trajs: Vec<Vec<CellField>> = meshes
            .iter()
            .map(|m| {
                (0..=4)
                    .map(|k| {
                        CellField::constant(m.n_cells(), &[1.0, 0.2]).with_time(0.25 * k as f64)
                    })
                    .collect()
            })
            .collect();
        let levels: Vec<Level> = meshes
            .iter()
            .zip(&trajs)
            .map(|(mesh, states)| Level { mesh, states })
            .collect();
        let d = oscillation_defect(&s, &levels, TestFunction::ProjectedSquare, (0.1, 1.0)).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        assert!(matches!(
            oscillation_defect(&s, &levels[..2], TestFunction::Square, (0.0, 1.0)),
            Err(DiagnosticsError::InsufficientLevels { .. })
        ));
    }

    #[test]
    fn slope_fit() {
        let x = [1.0, 0.5, 0.25, 0.125];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((fit_log_slope(&x, &y) - 1.5).abs() < 1e-12);
        assert_eq!(spread(&[1.0, 2.0, 4.0]), 4.0);
    }
}
