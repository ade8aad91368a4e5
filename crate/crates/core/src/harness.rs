//! Scenario configuration, orchestration and artifact output.
//!
//! A run directory holds `config.toml` (the resolved configuration),
//! `manifest.json`, and whichever reports the scenario produces: `ledger.csv`,
//! `bounds.json`, `snapshots.csv` / `snapshots.bin`, `decay.csv`,
//! `levels.csv`, `defect.csv`, `gronwall.csv`, `oracle.csv`.
//!
//! Binary snapshots are little-endian: the 8-byte magic `XDSNAP01`, then
//! `u64` snapshot count, cell count and species count, then per snapshot an
//! `f64` time, a `u64` step index and the values in cell-major order
//! (`u[K * n + i]`).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asymptotics::{
    l2_difference, longtime_run, reduced_sum_oracle, sum_field, LongTimeConfig,
};
use crate::bounds::{
    compute_bounds_report, fit_log_slope, oscillation_defect, space_time_integral, spread,
    BoundsReport, Level, TestFunction,
};
use crate::entropy::{gronwall_monitor, EntropyLedger, GronwallReport};
use crate::error::{ConfigError, HarnessError, MeshError};
use crate::mesh::{build_mesh_1d, build_mesh_rect2d, build_uniform_1d, CellField, Mesh};
use crate::run::{integrate, IntegrateOptions, RunOutput};
use crate::scheme::{init_cell_averages, Block, InitialDatum, Mobility, SchemeConfig};
use crate::specmat::{project_range, symmetrize_detailed_balance, validate_rows, DiffusionSpec};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const SNAPSHOT_MAGIC: &[u8; 8] = b"XDSNAP01";

const MASS_TOL: f64 = 1e-12;
const EDGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemConfig,
    pub mesh: MeshConfig,
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
}

fn default_tol_psd() -> f64 {
    1e-12
}

/// Either `b` (already symmetric) or `a` with its invariant measure `pi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    #[serde(default = "default_tol_psd")]
    pub tol_psd: f64,
    /// The initial datum is given for the unsymmetrized system and is
    /// multiplied by `pi` species-wise.
    #[serde(default)]
    pub initial_in_original_variables: bool,
    pub initial: InitialConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Constant {
        value: Vec<f64>,
    },
    Blocks {
        background: Vec<f64>,
        #[serde(default)]
        blocks: Vec<Block>,
    },
    /// `values[i][j]` is species `i` at `x[j]`, interpolated linearly.
    Table {
        x: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// CSV with a header and columns `x, u_1, ..., u_n`.
    TableFile {
        path: PathBuf,
    },
    Cosine {
        mean: Vec<f64>,
        amplitude: Vec<f64>,
        modes: Vec<f64>,
    },
}

fn default_a() -> f64 {
    0.0
}
fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshConfig {
    Interval {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_one")]
        b: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cells: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        edges: Option<Vec<f64>>,
    },
    Rect {
        nx: usize,
        ny: usize,
        #[serde(default = "default_one")]
        lx: f64,
        #[serde(default = "default_one")]
        ly: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotFormat {
    #[default]
    Csv,
    Binary,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Report {
    Ledger,
    Bounds,
    Snapshots,
    Decay,
    Defect,
    Gronwall,
}

fn all_reports() -> Vec<Report> {
    vec![
        Report::Ledger,
        Report::Bounds,
        Report::Snapshots,
        Report::Decay,
        Report::Defect,
        Report::Gronwall,
    ]
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_stride() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
    #[serde(default)]
    pub snapshot_format: SnapshotFormat,
    #[serde(default = "all_reports")]
    pub reports: Vec<Report>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            snapshot_stride: default_stride(),
            snapshot_format: SnapshotFormat::default(),
            reports: all_reports(),
        }
    }
}

fn d_levels() -> usize {
    4
}
fn d_window() -> f64 {
    0.1
}
fn d_spread() -> f64 {
    4.0
}
fn d_margin() -> f64 {
    0.5
}
fn d_tmax() -> f64 {
    50.0
}
fn d_tol_steady() -> f64 {
    1e-8
}
fn d_tol_final() -> f64 {
    1e-4
}
fn d_oracle_tol() -> f64 {
    1e-6
}
fn d_monitor() -> f64 {
    0.1
}
fn d_identical() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    #[default]
    Single,
    /// `levels` runs, each halving `Δx` and `Δt` of the previous one.
    Refinement {
        #[serde(default = "d_levels")]
        levels: usize,
        /// Defects are integrated over `(window_start·T, T)`.
        #[serde(default = "d_window")]
        window_start: f64,
        #[serde(default = "d_spread")]
        max_spread: f64,
        /// Drift slope must reach `(2 − α) − drift_margin`.
        #[serde(default = "d_margin")]
        drift_margin: f64,
    },
    Longtime {
        #[serde(default = "d_tmax")]
        t_max: f64,
        #[serde(default = "d_tol_steady")]
        tol_steady: f64,
        #[serde(default = "d_tol_final")]
        tol_final: f64,
        #[serde(default)]
        sample_times: Vec<f64>,
        /// Compare `Σ_i u_i` with the scalar run (needs `B` with equal entries).
        #[serde(default)]
        oracle: bool,
        #[serde(default = "d_oracle_tol")]
        oracle_tol: f64,
    },
    WeakStrong {
        /// Cells (or `nx` for rectangles) of the reference run; a multiple of
        /// the coarse resolution.
        reference_cells: usize,
        /// Initial datum of a second coarse run, compared against the same
        /// reference.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        perturbed_initial: Option<InitialConfig>,
        #[serde(default = "d_monitor")]
        tol_monitor: f64,
        #[serde(default = "d_identical")]
        identical_tol: f64,
    },
}

impl ScenarioConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Single => "single",
            Self::Refinement { .. } => "refinement",
            Self::Longtime { .. } => "longtime",
            Self::WeakStrong { .. } => "weak_strong",
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map(|p| p + 1).unwrap_or(0) + 1;
    (line, col)
}

fn parse_error(text: &str, e: toml::de::Error) -> ConfigError {
    let (line, column) = match e.span() {
        Some(s) => {
            let (l, c) = line_col(text, s.start);
            (Some(l), Some(c))
        }
        None => (None, None),
    };
    ConfigError::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

/// Parses `value` as a TOML literal, falling back to a plain string.
fn override_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(key, "empty path segment in override"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), override_value(value));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text. `overrides` are `dotted.key = value` pairs applied
    /// before validation; relative file paths resolve against `base_dir`.
    pub fn parse(
        text: &str,
        overrides: &[(String, String)],
        base_dir: &Path,
    ) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| parse_error(text, e))?
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, e))?;
            for (k, v) in overrides {
                apply_override(&mut table, k, v)?;
            }
            let merged =
                toml::to_string(&table).map_err(|e| invalid("<overrides>", e.to_string()))?;
            toml::from_str(&merged).map_err(|e| parse_error(&merged, e))?
        };
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, overrides, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |init: &mut InitialConfig| {
            if let InitialConfig::TableFile { path } = init {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.problem.initial);
        if let ScenarioConfig::WeakStrong {
            perturbed_initial: Some(p),
            ..
        } = &mut self.scenario
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.config_schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                found: self.config_schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        let spec = self.spec()?;
        self.scheme
            .validate()
            .map_err(|e| invalid("scheme", e.to_string()))?;
        self.mesh(0)?;
        check_initial("problem.initial", &self.problem.initial, spec.n())?;
        if self.outputs.snapshot_stride == 0 {
            return Err(invalid("outputs.snapshot_stride", "must be at least 1"));
        }
        match &self.scenario {
            ScenarioConfig::Single => {}
            ScenarioConfig::Refinement {
                levels,
                window_start,
                ..
            } => {
                if *levels < 3 {
                    return Err(invalid("scenario.levels", "need at least 3 levels"));
                }
                if !(0.0..1.0).contains(window_start) {
                    return Err(invalid("scenario.window_start", "must lie in [0, 1)"));
                }
            }
            ScenarioConfig::Longtime {
                t_max,
                sample_times,
                ..
            } => {
                if !(*t_max > 0.0) {
                    return Err(invalid("scenario.t_max", "must be positive"));
                }
                if sample_times.iter().any(|t| *t < 0.0 || *t > *t_max) {
                    return Err(invalid("scenario.sample_times", "must lie in [0, t_max]"));
                }
            }
            ScenarioConfig::WeakStrong {
                reference_cells,
                perturbed_initial,
                ..
            } => {
                let coarse = self.mesh_resolution();
                if *reference_cells == 0
                    || reference_cells % coarse != 0
                    || *reference_cells == coarse
                {
                    return Err(invalid(
                        "scenario.reference_cells",
                        format!("must be a proper multiple of the coarse resolution {coarse}"),
                    ));
                }
                if let Some(p) = perturbed_initial {
                    check_initial("scenario.perturbed_initial", p, spec.n())?;
                }
                if !matches!(
                    self.mesh,
                    MeshConfig::Interval { edges: None, .. } | MeshConfig::Rect { .. }
                ) {
                    return Err(invalid("mesh", "weak-strong runs need a uniform mesh"));
                }
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<DiffusionSpec, ConfigError> {
        let p = &self.problem;
        let to_matrix = |field: &str, rows: &[Vec<f64>]| {
            let n = rows.len();
            if n == 0 || rows.iter().any(|r| r.len() != n) {
                return Err(invalid(field, "must be a non-empty square matrix"));
            }
            Ok(nalgebra::DMatrix::from_fn(n, n, |i, j| rows[i][j]))
        };
        match (&p.b, &p.a, &p.pi) {
            (Some(b), None, None) => {
                to_matrix("problem.b", b)?;
                validate_rows(b, p.tol_psd).map_err(|e| invalid("problem.b", e.to_string()))
            }
            (None, Some(a), Some(pi)) => {
                let m = to_matrix("problem.a", a)?;
                symmetrize_detailed_balance(&m, pi, p.tol_psd)
                    .map_err(|e| invalid("problem.a", e.to_string()))
            }
            _ => Err(invalid("problem", "give either `b`, or both `a` and `pi`")),
        }
    }

    fn mesh_resolution(&self) -> usize {
        match &self.mesh {
            MeshConfig::Interval { cells, edges, .. } => cells.unwrap_or_else(|| {
                edges
                    .as_ref()
                    .map(|e| e.len().saturating_sub(1))
                    .unwrap_or(0)
            }),
            MeshConfig::Rect { nx, .. } => *nx,
        }
    }

    /// The mesh refined `2^level` times (cells bisected in every direction).
    pub fn mesh(&self, level: u32) -> Result<Mesh, ConfigError> {
        self.mesh_scaled(1 << level)
    }

    fn mesh_scaled(&self, factor: usize) -> Result<Mesh, ConfigError> {
        let err = |e: MeshError| invalid("mesh", e.to_string());
        match &self.mesh {
            MeshConfig::Interval { a, b, cells, edges } => match (cells, edges) {
                (Some(c), None) => build_uniform_1d(*a, *b, c * factor).map_err(err),
                (None, Some(e)) => {
                    let mut fine = vec![];
                    for w in e.windows(2) {
                        for s in 0..factor {
                            fine.push(w[0] + (w[1] - w[0]) * s as f64 / factor as f64);
                        }
                    }
                    if let Some(last) = e.last() {
                        fine.push(*last);
                    }
                    build_mesh_1d(&fine).map_err(err)
                }
                _ => Err(invalid("mesh", "give exactly one of `cells` and `edges`")),
            },
            MeshConfig::Rect { nx, ny, lx, ly } => {
                build_mesh_rect2d(nx * factor, ny * factor, *lx, *ly).map_err(err)
            }
        }
    }

    /// Cell averages of the initial datum, in symmetrized variables.
    pub fn initial_state(
        &self,
        spec: &DiffusionSpec,
        mesh: &Mesh,
    ) -> Result<CellField, HarnessError> {
        let u = cell_averages(&self.problem.initial, "problem.initial", mesh, spec.n())?;
        Ok(if self.problem.initial_in_original_variables {
            u.map_cells(|z| spec.to_symmetrized(z))
        } else {
            u
        })
    }

    /// Stable text form used for hashing and stored as `config.toml`. The
    /// output directory is left out so that reruns elsewhere compare equal.
    pub fn to_toml(&self) -> String {
        let mut c = self.clone();
        c.outputs.dir = PathBuf::from(".");
        toml::to_string(&c).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_initial(field: &str, init: &InitialConfig, n: usize) -> Result<(), ConfigError> {
    let len_ok = |v: &[f64]| v.len() == n;
    let ok = match init {
        InitialConfig::Constant { value } => len_ok(value),
        InitialConfig::Blocks { background, blocks } => {
            len_ok(background) && blocks.iter().all(|b| len_ok(&b.value))
        }
        InitialConfig::Table { x, values } => {
            values.len() == n && values.iter().all(|r| r.len() == x.len())
        }
        InitialConfig::TableFile { path } => {
            if !path.exists() {
                return Err(ConfigError::MissingFile {
                    field: format!("{field}.path"),
                    path: path.display().to_string(),
                });
            }
            let (_, values) = read_table(path)?;
            values.len() == n
        }
        InitialConfig::Cosine {
            mean,
            amplitude,
            modes,
        } => len_ok(mean) && len_ok(amplitude) && len_ok(modes),
    };
    if ok {
        Ok(())
    } else {
        Err(invalid(
            field,
            format!("species count does not match the {n}x{n} matrix"),
        ))
    }
}

fn read_table(path: &Path) -> Result<(Vec<f64>, Vec<Vec<f64>>), ConfigError> {
    let io = |m: String| ConfigError::Io {
        path: path.display().to_string(),
        message: m,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io(e.to_string()))?;
    let mut x = vec![];
    let mut cols: Vec<Vec<f64>> = vec![];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| io(e.to_string()))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| io(format!("row {}: {e}", r + 2)))?;
        if vals.len() < 2 {
            return Err(io(format!(
                "row {}: need x and at least one species",
                r + 2
            )));
        }
        if cols.is_empty() {
            cols = vec![vec![]; vals.len() - 1];
        }
        if vals.len() != cols.len() + 1 {
            return Err(io(format!("row {}: ragged row", r + 2)));
        }
        x.push(vals[0]);
        for (c, v) in cols.iter_mut().zip(&vals[1..]) {
            c.push(*v);
        }
    }
    if x.is_empty() {
        return Err(io("empty table".into()));
    }
    Ok((x, cols))
}

fn datum(init: &InitialConfig) -> Result<InitialDatum, ConfigError> {
    Ok(match init {
        InitialConfig::Constant { value } => InitialDatum::Constant(value.clone()),
        InitialConfig::Blocks { background, blocks } => InitialDatum::Blocks {
            background: background.clone(),
            blocks: blocks.clone(),
        },
        InitialConfig::Table { x, values } => InitialDatum::Table {
            x: x.clone(),
            values: values.clone(),
        },
        InitialConfig::TableFile { path } => {
            let (x, values) = read_table(path)?;
            InitialDatum::Table { x, values }
        }
        InitialConfig::Cosine {
            mean,
            amplitude,
            modes,
        } => InitialDatum::Cosine {
            mean: mean.clone(),
            amplitude: amplitude.clone(),
            modes: modes.clone(),
        },
    })
}

fn cell_averages(
    init: &InitialConfig,
    field: &str,
    mesh: &Mesh,
    n: usize,
) -> Result<CellField, HarnessError> {
    let d = datum(init)?;
    init_cell_averages(mesh, &d, n).map_err(|e| invalid(field, e.to_string()).into())
}

/// One named pass/fail check recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

impl Assertion {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
        }
    }

    fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value > threshold,
            value,
            threshold,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
        }
    }

    fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            passed: ok,
            value: if ok { 1.0 } else { 0.0 },
            threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshStats {
    pub cells: usize,
    pub dim: usize,
    pub dx: f64,
    pub zeta: f64,
    pub dt: f64,
    pub eta: f64,
    pub nu: f64,
}

impl MeshStats {
    fn new(mesh: &Mesh, cfg: &SchemeConfig) -> Self {
        Self {
            cells: mesh.n_cells(),
            dim: mesh.dim(),
            dx: mesh.size(),
            zeta: mesh.zeta(),
            dt: cfg.dt,
            eta: cfg.eta(mesh),
            nu: cfg.viscosity(mesh),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub scenario: String,
    pub spectral: serde_json::Value,
    pub meshes: Vec<MeshStats>,
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub artifacts: Vec<String>,
    /// Values reported without a pass/fail decision.
    pub reported: Vec<(String, f64)>,
    pub assertions: Vec<Assertion>,
    pub all_passed: bool,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| artifact_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| artifact_err(&path, e))
    }
}

fn artifact_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// What a finished scenario left behind.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl ScenarioOutcome {
    pub fn all_passed(&self) -> bool {
        self.manifest.all_passed
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.manifest.assertions.iter().find(|a| a.name == name)
    }

    pub fn reported(&self, name: &str) -> Option<f64> {
        self.manifest
            .reported
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
    }
}

struct Writer<'a> {
    dir: PathBuf,
    reports: &'a [Report],
    artifacts: Vec<String>,
}

impl<'a> Writer<'a> {
    fn new(dir: PathBuf, reports: &'a [Report]) -> Result<Self, HarnessError> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            reports,
            artifacts: vec![],
        })
    }

    fn wants(&self, r: Report) -> bool {
        self.reports.contains(&r)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<fs::File>, HarnessError> {
        self.artifacts.push(name.to_string());
        Ok(BufWriter::new(fs::File::create(self.dir.join(name))?))
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), HarnessError> {
        let mut f = self.create(name)?;
        f.write_all(body.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), HarnessError> {
        let mut body = serde_json::to_string_pretty(value)
            .map_err(|e| artifact_err(&self.dir.join(name), e))?;
        body.push('\n');
        self.text(name, &body)
    }

    fn rows(
        &mut self,
        name: &str,
        header: &[String],
        rows: &[Vec<String>],
    ) -> Result<(), HarnessError> {
        let f = self.create(name)?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn ledger(&mut self, ledger: &EntropyLedger) -> Result<(), HarnessError> {
        if self.wants(Report::Ledger) {
            let f = self.create("ledger.csv")?;
            ledger.write_csv(f)?;
        }
        Ok(())
    }

    fn snapshots(
        &mut self,
        states: &[CellField],
        t0: f64,
        dt: f64,
        stride: usize,
        format: SnapshotFormat,
    ) -> Result<(), HarnessError> {
        if !self.wants(Report::Snapshots) || states.is_empty() {
            return Ok(());
        }
        let picked: Vec<(usize, &CellField)> = pick_snapshots(states, t0, dt, stride);
        if matches!(format, SnapshotFormat::Csv | SnapshotFormat::Both) {
            let n = states[0].n_species();
            let mut header: Vec<String> = vec!["step".into(), "t".into(), "cell".into()];
            header.extend((0..n).map(|i| format!("u_{i}")));
            let mut rows = vec![];
            for (step, s) in &picked {
                for k in 0..s.n_cells() {
                    let mut r = vec![step.to_string(), fmt(s.time), k.to_string()];
                    r.extend(s.cell(k).iter().map(|v| fmt(*v)));
                    rows.push(r);
                }
            }
            self.rows("snapshots.csv", &header, &rows)?;
        }
        if matches!(format, SnapshotFormat::Binary | SnapshotFormat::Both) {
            let mut f = self.create("snapshots.bin")?;
            write_binary_snapshots(&mut f, &picked)?;
            f.flush()?;
        }
        Ok(())
    }
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

fn step_index(t: f64, t0: f64, dt: f64) -> usize {
    ((t - t0) / dt).round().max(0.0) as usize
}

fn pick_snapshots(
    states: &[CellField],
    t0: f64,
    dt: f64,
    stride: usize,
) -> Vec<(usize, &CellField)> {
    let last = states.len() - 1;
    states
        .iter()
        .enumerate()
        .map(|(j, s)| (step_index(s.time, t0, dt), s, j))
        .filter(|(step, _, j)| step % stride == 0 || *j == last)
        .map(|(step, s, _)| (step, s))
        .collect()
}

pub fn write_binary_snapshots<W: Write>(
    out: &mut W,
    snaps: &[(usize, &CellField)],
) -> std::io::Result<()> {
    let (cells, n) = snaps
        .first()
        .map(|(_, s)| (s.n_cells(), s.n_species()))
        .unwrap_or((0, 0));
    out.write_all(SNAPSHOT_MAGIC)?;
    for c in [snaps.len(), cells, n] {
        out.write_all(&(c as u64).to_le_bytes())?;
    }
    for (step, s) in snaps {
        out.write_all(&s.time.to_le_bytes())?;
        out.write_all(&(*step as u64).to_le_bytes())?;
        for v in s.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Inverse of [`write_binary_snapshots`]: `(step, state)` pairs.
pub fn read_binary_snapshots<R: Read>(mut input: R) -> std::io::Result<Vec<(usize, CellField)>> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(bad("not a snapshot file"));
    }
    let mut u64s = |k: usize| -> std::io::Result<Vec<u64>> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            out.push(u64::from_le_bytes(b));
        }
        Ok(out)
    };
    let head = u64s(3)?;
    let (count, cells, n) = (head[0] as usize, head[1] as usize, head[2] as usize);
    let mut snaps = Vec::with_capacity(count);
    for _ in 0..count {
        let tv = u64s(2 + cells * n)?;
        let t = f64::from_bits(tv[0]);
        let values: Vec<f64> = tv[2..].iter().map(|b| f64::from_bits(*b)).collect();
        snaps.push((
            tv[1] as usize,
            CellField::from_values(n, values).with_time(t),
        ));
    }
    Ok(snaps)
}

/// Snapshot states of a run directory (binary preferred).
pub fn load_snapshots(dir: &Path) -> Result<Vec<CellField>, HarnessError> {
    let bin = dir.join("snapshots.bin");
    if bin.exists() {
        let f = fs::File::open(&bin)?;
        let snaps =
            read_binary_snapshots(std::io::BufReader::new(f)).map_err(|e| artifact_err(&bin, e))?;
        return Ok(snaps.into_iter().map(|(_, s)| s).collect());
    }
    let path = dir.join("snapshots.csv");
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| artifact_err(&path, e))?;
    let mut out: Vec<(usize, f64, Vec<f64>)> = vec![];
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, HarnessError> {
            rec.get(i)
                .ok_or_else(|| artifact_err(&path, "short row"))?
                .parse::<f64>()
                .map_err(|e| artifact_err(&path, e))
        };
        let step = num(0)? as usize;
        let t = num(1)?;
        n = rec.len() - 3;
        if out.last().map(|s| s.0) != Some(step) {
            out.push((step, t, vec![]));
        }
        let cur = out.last_mut().expect("pushed");
        for i in 0..n {
            cur.2.push(num(3 + i)?);
        }
    }
    Ok(out
        .into_iter()
        .map(|(_, t, v)| CellField::from_values(n, v).with_time(t))
        .collect())
}

fn structure_assertions(
    prefix: &str,
    run: &RunOutput,
    positivity: bool,
    edges: Option<Mobility>,
) -> Vec<Assertion> {
    let l = &run.ledger;
    let (rs, rr) = l.max_residuals();
    let mut a = vec![
        Assertion::holds(format!("{prefix}completed"), run.completed()),
        Assertion::at_most(
            format!("{prefix}mass_conservation"),
            l.max_mass_defect(),
            MASS_TOL,
        ),
        Assertion::at_most(format!("{prefix}shannon_inequality"), rs, l.slack_shannon()),
        Assertion::at_most(format!("{prefix}rao_inequality"), rr, l.slack_rao()),
        Assertion::at_most(
            format!("{prefix}rao_nonincreasing"),
            l.max_rao_increase().max(0.0),
            l.slack_rao(),
        ),
    ];
    if positivity {
        a.push(Assertion::above(
            format!("{prefix}positivity"),
            l.min_density(),
            0.0,
        ));
    }
    if let Some(m) = edges {
        let name = match m {
            Mobility::LogMean => "edge_identity",
            Mobility::Upwind => "edge_inequality",
        };
        a.push(Assertion::at_most(
            format!("{prefix}{name}"),
            run.max_edge_defect,
            EDGE_TOL,
        ));
    }
    a
}

struct Collected {
    meshes: Vec<MeshStats>,
    reported: Vec<(String, f64)>,
    assertions: Vec<Assertion>,
    failure: Option<String>,
}

fn finish(
    config: &RunConfig,
    spec: &DiffusionSpec,
    mut w: Writer,
    c: Collected,
) -> Result<ScenarioOutcome, HarnessError> {
    w.text("config.toml", &config.to_toml())?;
    let all_passed = c.failure.is_none() && c.assertions.iter().all(|a| a.passed);
    let mut artifacts = w.artifacts.clone();
    artifacts.push("manifest.json".into());
    artifacts.sort();
    let manifest = Manifest {
        name: config.name.clone(),
        config_schema_version: config.config_schema_version,
        config_sha256: config.sha256(),
        seed: config.seed,
        scenario: config.scenario.kind().to_string(),
        spectral: serde_json::to_value(spec.summary()).expect("summary serializes"),
        meshes: c.meshes,
        completed: c.failure.is_none(),
        failure: c.failure,
        artifacts,
        reported: c.reported,
        assertions: c.assertions,
        all_passed,
    };
    w.json("manifest.json", &manifest)?;
    Ok(ScenarioOutcome {
        dir: w.dir,
        manifest,
    })
}

fn failure_error(run: &RunOutput, dir: &Path) -> Option<HarnessError> {
    run.failure.clone().map(|source| HarnessError::StepFailed {
        source,
        t: run.final_state().time,
        dir: dir.display().to_string(),
    })
}

/// Runs the configured scenario, writing artifacts under `outputs.dir`.
///
/// A step failure still writes the ledger and manifest up to the failing step
/// before returning [`HarnessError::StepFailed`].
pub fn run_scenario(config: &RunConfig) -> Result<ScenarioOutcome, HarnessError> {
    config.validate()?;
    let dir = config.outputs.dir.clone();
    match &config.scenario {
        ScenarioConfig::Single => single(config, &dir),
        ScenarioConfig::Refinement { .. } => refinement(config, &dir),
        ScenarioConfig::Longtime { .. } => longtime(config, &dir),
        ScenarioConfig::WeakStrong { .. } => weak_strong(config, &dir),
    }
}

struct LevelRun {
    mesh: Mesh,
    cfg: SchemeConfig,
    run: RunOutput,
    bounds: BoundsReport,
}

fn single_level(
    config: &RunConfig,
    spec: &DiffusionSpec,
    level: u32,
    dir: &Path,
) -> Result<(LevelRun, ScenarioOutcome), HarnessError> {
    let mesh = config.mesh(level)?;
    let mut cfg = config.scheme.clone();
    cfg.dt /= (1u64 << level) as f64;
    let u0 = config.initial_state(spec, &mesh)?;
    let run = integrate(spec, &mesh, &cfg, &u0, IntegrateOptions::default())?;
    let mut w = Writer::new(dir.to_path_buf(), &config.outputs.reports)?;
    w.ledger(&run.ledger)?;
    w.snapshots(
        &run.states,
        u0.time,
        cfg.dt,
        config.outputs.snapshot_stride,
        config.outputs.snapshot_format,
    )?;
    let bounds = compute_bounds_report(spec, &mesh, &cfg, &run.states)?;
    if w.wants(Report::Bounds) {
        w.json("bounds.json", &bounds)?;
    }
    let assertions = structure_assertions(
        "",
        &run,
        cfg.positivity_guaranteed(&mesh),
        Some(cfg.mobility),
    );
    let collected = Collected {
        meshes: vec![MeshStats::new(&mesh, &cfg)],
        reported: bounds
            .entries()
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        assertions,
        failure: run.failure.as_ref().map(|e| e.to_string()),
    };
    let mut lvl_config = config.clone();
    lvl_config.scheme = cfg.clone();
    lvl_config.scenario = ScenarioConfig::Single;
    lvl_config.mesh = scaled_mesh_config(&config.mesh, 1 << level);
    let outcome = finish(&lvl_config, spec, w, collected)?;
    if let Some(e) = failure_error(&run, dir) {
        return Err(e);
    }
    Ok((
        LevelRun {
            mesh,
            cfg,
            run,
            bounds,
        },
        outcome,
    ))
}

fn scaled_mesh_config(m: &MeshConfig, factor: usize) -> MeshConfig {
    match m {
        MeshConfig::Interval { a, b, cells, edges } => MeshConfig::Interval {
            a: *a,
            b: *b,
            cells: cells.map(|c| c * factor),
            edges: edges.as_ref().map(|e| {
                let mut fine = vec![];
                for w in e.windows(2) {
                    for s in 0..factor {
                        fine.push(w[0] + (w[1] - w[0]) * s as f64 / factor as f64);
                    }
                }
                fine.extend(e.last());
                fine
            }),
        },
        MeshConfig::Rect { nx, ny, lx, ly } => MeshConfig::Rect {
            nx: nx * factor,
            ny: ny * factor,
            lx: *lx,
            ly: *ly,
        },
    }
}

fn single(config: &RunConfig, dir: &Path) -> Result<ScenarioOutcome, HarnessError> {
    let spec = config.spec()?;
    single_level(config, &spec, 0, dir).map(|(_, o)| o)
}

fn refinement(config: &RunConfig, dir: &Path) -> Result<ScenarioOutcome, HarnessError> {
    let ScenarioConfig::Refinement {
        levels,
        window_start,
        max_spread,
        drift_margin,
    } = config.scenario
    else {
        unreachable!("dispatched on kind")
    };
    let spec = config.spec()?;
    let mut runs = vec![];
    let mut assertions = vec![];
    for m in 0..levels {
        let (lr, out) = single_level(config, &spec, m as u32, &dir.join(format!("level_{m}")))?;
        for a in out.manifest.assertions {
            assertions.push(Assertion {
                name: format!("level_{m}.{}", a.name),
                ..a
            });
        }
        runs.push(lr);
    }
    let t_end = runs[0].run.final_state().time;
    let window = (window_start * t_end, t_end);
    let lv: Vec<Level> = runs
        .iter()
        .map(|r| Level {
            mesh: &r.mesh,
            states: &r.run.states,
        })
        .collect();
    let finest = lv.last().expect("levels >= 3");
    let mut hat_err = vec![];
    let mut u_err = vec![];
    for l in &lv[..lv.len() - 1] {
        let h = space_time_integral(l, finest, (0.0, t_end), |a, b| {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            project_range(&spec, &d).iter().map(|x| x * x).sum()
        })?;
        let u = space_time_integral(l, finest, (0.0, t_end), |a, b| {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        })?;
        hat_err.push(h.sqrt());
        u_err.push(u.sqrt());
    }
    let defect = oscillation_defect(&spec, &lv, TestFunction::ProjectedSquare, window)?;
    let defect_full = oscillation_defect(&spec, &lv, TestFunction::Square, window)?;

    let b: Vec<&BoundsReport> = runs.iter().map(|r| &r.bounds).collect();
    let col = |f: fn(&BoundsReport) -> f64| b.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let eta_g43 = col(|r| r.eta_alpha * r.g43);
    let etas = col(|r| r.eta);
    let drift_slope = fit_log_slope(&etas, &col(|r| r.drift));
    let alpha = config.scheme.alpha;
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    assertions.extend([
        Assertion::at_most("spread_S1", spread(&col(|r| r.s1)), max_spread),
        Assertion::at_most("spread_S2", spread(&col(|r| r.s2)), max_spread),
        Assertion::at_most(
            "spread_FluxL2L43",
            spread(&col(|r| r.flux_l2l43)),
            max_spread,
        ),
        Assertion::at_most("spread_eta_alpha_G43", spread(&eta_g43), max_spread),
        Assertion::at_least("drift_slope", drift_slope, (2.0 - alpha) - drift_margin),
        Assertion::holds("hat_error_decreasing", decreasing(&hat_err)),
        Assertion::holds("defect_decreasing", decreasing(&defect)),
    ]);

    let mut w = Writer::new(dir.to_path_buf(), &config.outputs.reports)?;
    let mut header: Vec<String> = ["level", "cells", "dx", "dt", "eta"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(b[0].entries().iter().map(|(k, _)| k.to_string()));
    header.push("eta_alpha_G_4/3".into());
    let rows: Vec<Vec<String>> = runs
        .iter()
        .enumerate()
        .map(|(m, r)| {
            let mut row = vec![
                m.to_string(),
                r.mesh.n_cells().to_string(),
                fmt(r.mesh.size()),
                fmt(r.cfg.dt),
                fmt(r.bounds.eta),
            ];
            row.extend(r.bounds.entries().iter().map(|(_, v)| fmt(*v)));
            row.push(fmt(eta_g43[m]));
            row
        })
        .collect();
    if w.wants(Report::Bounds) {
        w.rows("levels.csv", &header, &rows)?;
    }
    if w.wants(Report::Defect) {
        let header: Vec<String> = [
            "level",
            "cells",
            "hat_l2_error",
            "u_l2_error",
            "defect_hat_square",
            "defect_square",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let rows: Vec<Vec<String>> = (0..levels - 1)
            .map(|m| {
                vec![
                    m.to_string(),
                    runs[m].mesh.n_cells().to_string(),
                    fmt(hat_err[m]),
                    fmt(u_err[m]),
                    fmt(defect[m]),
                    fmt(defect_full[m]),
                ]
            })
            .collect();
        w.rows("defect.csv", &header, &rows)?;
    }
    let mut reported = vec![("drift_slope".to_string(), drift_slope)];
    for (m, v) in hat_err.iter().enumerate() {
        reported.push((format!("hat_error_{m}"), *v));
    }
    for (m, v) in defect.iter().enumerate() {
        reported.push((format!("defect_{m}"), *v));
    }
    for (m, v) in u_err.iter().enumerate() {
        reported.push((format!("u_error_{m}"), *v));
    }
    let collected = Collected {
        meshes: runs
            .iter()
            .map(|r| MeshStats::new(&r.mesh, &r.cfg))
            .collect(),
        reported,
        assertions,
        failure: None,
    };
    finish(config, &spec, w, collected)
}

fn longtime(config: &RunConfig, dir: &Path) -> Result<ScenarioOutcome, HarnessError> {
    let ScenarioConfig::Longtime {
        t_max,
        tol_steady,
        tol_final,
        ref sample_times,
        oracle,
        oracle_tol,
    } = config.scenario
    else {
        unreachable!("dispatched on kind")
    };
    let spec = config.spec()?;
    let mesh = config.mesh(0)?;
    let cfg = config.scheme.clone();
    let u0 = config.initial_state(&spec, &mesh)?;
    let lt = LongTimeConfig {
        t_max,
        tol_steady,
        tol_final,
        sample_times: sample_times.clone(),
        stride: config.outputs.snapshot_stride,
    };
    let out = longtime_run(&spec, &mesh, &cfg, &u0, &lt)?;
    let mut w = Writer::new(dir.to_path_buf(), &config.outputs.reports)?;
    w.ledger(&out.run.ledger)?;
    w.snapshots(
        &out.run.states,
        u0.time,
        cfg.dt,
        1,
        config.outputs.snapshot_format,
    )?;
    if w.wants(Report::Decay) {
        let f = w.create("decay.csv")?;
        out.write_csv(f)?;
    }
    let mut assertions = structure_assertions("", &out.run, cfg.positivity_guaranteed(&mesh), None);
    let (step, incr) = out.max_increase();
    assertions.push(Assertion::at_most(
        "relative_rao_nonincreasing",
        incr.max(0.0),
        out.slack,
    ));
    assertions.push(Assertion::holds("chain_inequality", out.chain_holds()));
    assertions.push(Assertion::at_most(
        "terminal_distance",
        out.terminal_distance(),
        tol_final,
    ));
    let mut reported = vec![
        ("largest_increase_step".to_string(), step as f64),
        ("final_time".to_string(), out.run.final_state().time),
    ];
    reported.extend(
        out.info
            .u_hat_star
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("u_hat_star_{i}"), *v)),
    );
    if oracle {
        let (ro, _) = reduced_sum_oracle(&spec, &mesh, &cfg, &u0)?;
        let mut rows = vec![];
        let mut worst = 0.0f64;
        for s in &out.samples {
            let tol = 1e-9 * s.time.abs().max(1.0);
            let Some(r) = ro.states.iter().find(|r| (r.time - s.time).abs() <= tol) else {
                continue;
            };
            let d = l2_difference(&mesh, &sum_field(s), r);
            worst = worst.max(d);
            rows.push(vec![fmt(s.time), fmt(d)]);
        }
        assertions.push(Assertion::at_least(
            "oracle_samples",
            rows.len() as f64,
            sample_times.len() as f64,
        ));
        assertions.push(Assertion::at_most("oracle_agreement", worst, oracle_tol));
        if w.wants(Report::Decay) {
            w.rows(
                "oracle.csv",
                &["t".into(), "l2_sum_difference".into()],
                &rows,
            )?;
        }
    }
    let collected = Collected {
        meshes: vec![MeshStats::new(&mesh, &cfg)],
        reported,
        assertions,
        failure: None,
    };
    finish(config, &spec, w, collected)
}

fn gronwall_rows(label: &str, g: &GronwallReport, rows: &mut Vec<Vec<String>>) {
    for ((t, h), e) in g.times.iter().zip(&g.h_rel).zip(&g.envelope) {
        rows.push(vec![label.to_string(), fmt(*t), fmt(*h), fmt(*e)]);
    }
}

fn weak_strong(config: &RunConfig, dir: &Path) -> Result<ScenarioOutcome, HarnessError> {
    let ScenarioConfig::WeakStrong {
        reference_cells,
        ref perturbed_initial,
        tol_monitor,
        identical_tol,
    } = config.scenario
    else {
        unreachable!("dispatched on kind")
    };
    let spec = config.spec()?;
    let cfg = config.scheme.clone();
    let coarse_mesh = config.mesh(0)?;
    let factor = reference_cells / config.mesh_resolution();
    let fine_mesh = config.mesh_scaled(factor)?;
    let opts = IntegrateOptions {
        stride: 1,
        edge_checks: false,
    };
    let reference = integrate(
        &spec,
        &fine_mesh,
        &cfg,
        &config.initial_state(&spec, &fine_mesh)?,
        opts,
    )?;
    let u0 = config.initial_state(&spec, &coarse_mesh)?;
    let coarse = integrate(&spec, &coarse_mesh, &cfg, &u0, opts)?;
    let mut w = Writer::new(dir.to_path_buf(), &config.outputs.reports)?;
    w.ledger(&coarse.ledger)?;
    w.snapshots(
        &coarse.states,
        u0.time,
        cfg.dt,
        config.outputs.snapshot_stride,
        config.outputs.snapshot_format,
    )?;
    let mut assertions = structure_assertions("coarse.", &coarse, false, None);
    assertions.extend(structure_assertions("reference.", &reference, false, None));
    for r in [&reference, &coarse] {
        if let Some(e) = failure_error(r, dir) {
            return Err(e);
        }
    }
    let g = gronwall_monitor(
        &spec,
        &coarse_mesh,
        &coarse.states,
        &fine_mesh,
        &reference.states,
        tol_monitor,
    )?;
    assertions.push(Assertion::at_most(
        "identical_initial_relative_entropy",
        g.h_rel[0],
        identical_tol,
    ));
    let mut reported = vec![
        ("gronwall_c".to_string(), g.c),
        ("resolution_floor".to_string(), g.floor),
        ("grad_log_sup".to_string(), g.grad_log_sup),
        ("grad_pressure_sup".to_string(), g.grad_pressure_sup),
        ("c_star".to_string(), g.c_star),
    ];
    let mut rows = vec![];
    gronwall_rows("identical", &g, &mut rows);
    if let Some(p) = perturbed_initial {
        let mut up = cell_averages(p, "scenario.perturbed_initial", &coarse_mesh, spec.n())?;
        if config.problem.initial_in_original_variables {
            up = up.map_cells(|z| spec.to_symmetrized(z));
        }
        let pert = integrate(&spec, &coarse_mesh, &cfg, &up, opts)?;
        assertions.extend(structure_assertions("perturbed.", &pert, false, None));
        if let Some(e) = failure_error(&pert, dir) {
            return Err(e);
        }
        let gp = gronwall_monitor(
            &spec,
            &coarse_mesh,
            &pert.states,
            &fine_mesh,
            &reference.states,
            tol_monitor,
        )?;
        assertions.push(Assertion::at_most(
            "gronwall_ratio",
            gp.max_ratio.unwrap_or(f64::INFINITY),
            1.0 + tol_monitor,
        ));
        reported.push(("perturbed_initial_relative_entropy".into(), gp.h_rel[0]));
        gronwall_rows("perturbed", &gp, &mut rows);
    }
    if w.wants(Report::Gronwall) {
        let header: Vec<String> = ["run", "t", "H_rel", "envelope"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        w.rows("gronwall.csv", &header, &rows)?;
    }
    let collected = Collected {
        meshes: vec![
            MeshStats::new(&coarse_mesh, &cfg),
            MeshStats::new(&fine_mesh, &cfg),
        ],
        reported,
        assertions,
        failure: None,
    };
    finish(config, &spec, w, collected)
}

/// `L¹(Ω_T)` and `L²(Ω_T)` errors of one species, for `u` and `û`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeciesErrors {
    pub species: usize,
    pub l1_u: f64,
    pub l2_u: f64,
    pub l1_hat: f64,
    pub l2_hat: f64,
}

/// Compares the snapshots of two run directories on nested meshes. The
/// coarse run is injected piecewise constantly in space and time.
pub fn compare_trajectories(
    coarse_dir: &Path,
    reference_dir: &Path,
) -> Result<Vec<SpeciesErrors>, HarnessError> {
    let cc = RunConfig::load(&coarse_dir.join("config.toml"), &[])?;
    let rc = RunConfig::load(&reference_dir.join("config.toml"), &[])?;
    let spec = cc.spec()?;
    let cm = cc.mesh(0)?;
    let fm = rc.mesh(0)?;
    let cs = load_snapshots(coarse_dir)?;
    let fs_ = load_snapshots(reference_dir)?;
    let coarse = Level {
        mesh: &cm,
        states: &cs,
    };
    let fine = Level {
        mesh: &fm,
        states: &fs_,
    };
    let t_end = cs
        .last()
        .map(|s| s.time)
        .unwrap_or(0.0)
        .min(fs_.last().map(|s| s.time).unwrap_or(0.0));
    let window = (0.0, t_end);
    let n = spec.n();
    let mut out = vec![];
    for i in 0..n {
        let diff = |a: &[f64], b: &[f64]| -> (f64, f64) {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            (d[i], project_range(&spec, &d)[i])
        };
        let l1_u = space_time_integral(&coarse, &fine, window, |a, b| diff(a, b).0.abs())?;
        let l2_u = space_time_integral(&coarse, &fine, window, |a, b| diff(a, b).0.powi(2))?.sqrt();
        let l1_hat = space_time_integral(&coarse, &fine, window, |a, b| diff(a, b).1.abs())?;
        let l2_hat =
            space_time_integral(&coarse, &fine, window, |a, b| diff(a, b).1.powi(2))?.sqrt();
        out.push(SpeciesErrors {
            species: i,
            l1_u,
            l2_u,
            l1_hat,
            l2_hat,
        });
    }
    Ok(out)
}

/// Human-readable summary of a run directory's manifest.
pub fn report(dir: &Path) -> Result<(String, bool), HarnessError> {
    let m = Manifest::load(dir)?;
    let mut s = String::new();
    s.push_str(&format!(
        "{} [{}] sha256 {}\n",
        m.name, m.scenario, m.config_sha256
    ));
    for ms in &m.meshes {
        s.push_str(&format!(
            "  mesh: {} cells, dx {:e}, zeta {:e}, dt {:e}, eta {:e}\n",
            ms.cells, ms.dx, ms.zeta, ms.dt, ms.eta
        ));
    }
    if let Some(f) = &m.failure {
        s.push_str(&format!("  failure: {f}\n"));
    }
    for (k, v) in &m.reported {
        s.push_str(&format!("  {k} = {v:e}\n"));
    }
    for a in &m.assertions {
        s.push_str(&format!(
            "  {} {} (value {:e}, threshold {:e})\n",
            if a.passed { "PASS" } else { "FAIL" },
            a.name,
            a.value,
            a.threshold
        ));
    }
    Ok((s, m.all_passed))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
config_schema_version = 1
name = "t"

[problem]
b = [[1.0, 0.5], [0.5, 1.0]]

[problem.initial]
kind = "constant"
value = [1.0, 2.0]

[mesh]
family = "interval"
cells = 8

[scheme]
dt = 0.01
t_final = 0.02
"#;

    #[test]
    fn parses_and_defaults() {
        let c = RunConfig::parse(BASIC, &[], Path::new(".")).unwrap();
        assert_eq!(c.scenario, ScenarioConfig::Single);
        assert_eq!(c.scheme.mobility, Mobility::Upwind);
        assert_eq!(c.outputs.snapshot_stride, 10);
        let mut again = RunConfig::parse(&c.to_toml(), &[], Path::new(".")).unwrap();
        assert_eq!(again.sha256(), c.sha256());
        again.outputs.dir = c.outputs.dir.clone();
        assert_eq!(again, c);
    }

    #[test]
    fn overrides_apply() {
        let ov = vec![
            ("scheme.mobility".to_string(), "logmean".to_string()),
            ("mesh.cells".to_string(), "16".to_string()),
        ];
        let c = RunConfig::parse(BASIC, &ov, Path::new(".")).unwrap();
        assert_eq!(c.scheme.mobility, Mobility::LogMean);
        assert_eq!(c.mesh(1).unwrap().n_cells(), 32);
    }

    #[test]
    fn malformed_configs_report_location() {
        let bad = BASIC.replace("cells = 8", "cells = \"eight\"");
        match RunConfig::parse(&bad, &[], Path::new(".")) {
            Err(ConfigError::Parse {
                line: Some(l),
                message,
                ..
            }) => {
                assert_eq!(l, 12, "{message}");
                assert!(message.contains("invalid type"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let bad = BASIC.replace("dt = 0.01", "dt = -1.0");
        assert!(matches!(
            RunConfig::parse(&bad, &[], Path::new(".")),
            Err(ConfigError::Invalid { .. })
        ));
        let bad = BASIC.replace("config_schema_version = 1", "config_schema_version = 7");
        assert!(matches!(
            RunConfig::parse(&bad, &[], Path::new(".")),
            Err(ConfigError::SchemaVersion { found: 7, .. })
        ));
        let bad = BASIC.replace(
            "kind = \"constant\"\nvalue = [1.0, 2.0]",
            "kind = \"table_file\"\npath = \"nope.csv\"",
        );
        assert!(matches!(
            RunConfig::parse(&bad, &[], Path::new(".")),
            Err(ConfigError::MissingFile { .. })
        ));
    }

    #[test]
    fn binary_snapshots_round_trip() {
        let a = CellField::from_values(2, vec![1.0, 2.0, 3.0, 4.0]).with_time(0.5);
        let b = CellField::from_values(2, vec![5.0, 6.0, 7.0, 8.0]).with_time(1.0);
        let mut buf = vec![];
        write_binary_snapshots(&mut buf, &[(5, &a), (10, &b)]).unwrap();
        assert_eq!(&buf[..8], SNAPSHOT_MAGIC);
        assert_eq!(buf.len(), 8 + 24 + 2 * (16 + 32));
        let back = read_binary_snapshots(&buf[..]).unwrap();
        assert_eq!(back[1].0, 10);
        assert_eq!(back[1].1.values(), b.values());
        assert_eq!(back[0].1.time, 0.5);
    }
}
