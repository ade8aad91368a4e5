use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("diffusion matrix has a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("diffusion matrix is not square ({rows} x {cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("diffusion matrix is not symmetric: b[{i}][{j}] = {bij} but b[{j}][{i}] = {bji}")]
    NotSymmetric {
        i: usize,
        j: usize,
        bij: f64,
        bji: f64,
    },
    #[error("diffusion matrix is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NotPsd { eigenvalue: f64 },
    #[error("negative coefficient b[{i}][{j}] = {value}")]
    NonnegativityViolation { i: usize, j: usize, value: f64 },
    #[error("b[{i}][{i}] = {value} <= 0: species {i} does not move and should be removed")]
    DegenerateDiagonal { i: usize, value: f64 },
    #[error("diffusion matrix has rank zero")]
    ZeroRank,
    #[error("detailed balance fails for ({i}, {j}): pi_i a_ij = {lhs}, pi_j a_ji = {rhs}")]
    DetailedBalanceViolated {
        i: usize,
        j: usize,
        lhs: f64,
        rhs: f64,
    },
    #[error("invariant measure must be positive and finite (pi[{i}] = {value})")]
    InvalidInvariantMeasure { i: usize, value: f64 },
    #[error("bound M must be positive, got {0}")]
    InvalidBound(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("cell edges must be strictly increasing (index {index})")]
    NonMonotoneEdges { index: usize },
    #[error("need at least {min} cells, got {got}")]
    TooFewCells { min: usize, got: usize },
    #[error("invalid mesh dimensions: {0}")]
    InvalidDimensions(String),
    #[error("exponent q = {0} is outside [1, inf)")]
    InvalidExponent(f64),
    #[error("unsupported dual-norm exponent q = {0} (only 2 and 4)")]
    UnsupportedDualExponent(f64),
    #[error("dual norm iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("flux is not conservative on edge {edge}: F_K + F_L = {defect:e}")]
    NonConservativeFlux { edge: usize, defect: f64 },
    #[error("field length {got} does not match mesh ({expected})")]
    LengthMismatch { expected: usize, got: usize },
    #[error("meshes are not nested")]
    NonNestedMeshes,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("negative initial datum {value} for species {species}")]
    NegativeInitialData { species: usize, value: f64 },
    #[error("initial datum has zero total mass")]
    ZeroMass,
    #[error("initial datum has {got} species, expected {expected}")]
    SpeciesMismatch { expected: usize, got: usize },
    #[error("entropic variables need positive densities (found {value} at cell {cell}, species {species})")]
    NonpositiveDensityInEntropicMode {
        cell: usize,
        species: usize,
        value: f64,
    },
    #[error("invalid scheme parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("singular matrix (zero pivot at column {pivot})")]
    SingularMatrix { pivot: usize },
    #[error("Newton did not converge (residual {residual:e} after {iterations} iterations)")]
    NewtonFailed { iterations: usize, residual: f64 },
    #[error("regularized fixed-point iteration stalled at eps = {eps:e} (residual {residual:e})")]
    PicardStalled { eps: f64, residual: f64 },
    #[error("time step failed after {halvings} halvings of dt (last residual {residual:e})")]
    StepFailed { halvings: usize, residual: f64 },
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("negative density {value} at cell {cell}, species {species}")]
    NegativeDensity {
        cell: usize,
        species: usize,
        value: f64,
    },
    #[error("reference state must be positive (found {value} at cell {cell}, species {species})")]
    NonpositiveReference {
        cell: usize,
        species: usize,
        value: f64,
    },
    #[error("{which} entropy inequality violated at step {step}: residual {residual:e} > slack {slack:e}")]
    InequalityViolated {
        which: &'static str,
        step: usize,
        residual: f64,
        slack: f64,
    },
    #[error("step {0} is not in the ledger")]
    UnknownStep(usize),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("need at least {min} refinement levels, got {got}")]
    InsufficientLevels { min: usize, got: usize },
    #[error("reference trajectory is not positive")]
    ReferenceNotPositive,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("time grids are not nested (t = {0})")]
    NonNestedTimes(f64),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsymptoticsError {
    #[error("species {0} has zero mass")]
    ZeroMass(usize),
    #[error("H_R(u|u*) increased at step {step} by {increase:e} (slack {slack:e})")]
    NoDecay {
        step: usize,
        increase: f64,
        slack: f64,
    },
    #[error("the reduced sum-variable oracle needs a matrix with all entries equal")]
    NotUniformRankOne,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{}", match (line, column) {
        (Some(l), Some(c)) => format!("config parse error at line {l}, column {c}: {message}"),
        _ => format!("config parse error: {message}"),
    })]
    Parse {
        line: Option<usize>,
        column: Option<usize>,
        message: String,
    },
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("unsupported config_schema_version {found} (this build reads {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("`{field}` refers to {path}, which does not exist")]
    MissingFile { field: String, path: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run stopped at t = {t}: {source} (artifacts up to the failure are in {dir})")]
    StepFailed {
        source: SolverError,
        t: f64,
        dir: String,
    },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Asymptotics(#[from] AsymptoticsError),
    #[error("{path}: {message}")]
    Artifact { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
