//! Error types, one enum per subsystem.

use thiserror::Error;

/// Problem-definition and rewrite errors.
#[derive(Debug, Error)]
pub enum OcpError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("inverted bounds on {what}: lower {lower} > upper {upper}")]
    InvertedBounds {
        what: String,
        lower: f64,
        upper: f64,
    },
    #[error("problem declares neither a Lagrange nor a Mayer cost")]
    MissingObjective,
    #[error("no input carries a rate bound")]
    NoInputRateBounds,
    #[error("no state carries a rate bound")]
    NoStateRateBounds,
    #[error("operation requires a problem in add-state form")]
    NotAddStateForm,
    #[error("callback failed during {what}: produced a non-finite value")]
    CallbackFailure { what: String },
}

/// Mesh and stencil construction errors.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("step sizes must be positive (got dtau = {dtau}, dt = {dt})")]
    NonpositiveStep { dtau: f64, dt: f64 },
    #[error("collocation order {order} too small; at least {min} points required")]
    OrderTooSmall { order: usize, min: usize },
    #[error("mesh has no intervals")]
    EmptyMesh,
    #[error("interval fractions must be positive and sum to 1 (fraction {index} = {value})")]
    BadFraction { index: usize, value: f64 },
}

/// Transcription and evaluation errors.
#[derive(Debug, Error)]
pub enum TranscribeError {
    #[error("rate mode {mode} is incompatible with the declared rate bounds: {reason}")]
    IncompatibleMode { mode: String, reason: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("primal vector has length {got}, layout expects {expected}")]
    BadPointLength { expected: usize, got: usize },
    #[error("callback failure while evaluating {what}")]
    CallbackFailure { what: String },
    #[error("non-finite value encountered in {what}")]
    NonFiniteValue { what: String },
}

/// On-mesh rate-block errors.
#[derive(Debug, Error)]
pub enum RateError {
    #[error("no rate targets supplied")]
    EmptyTargets,
    #[error("block was built for a free-time problem; the constant Jacobian is unavailable")]
    FreeTimeBlock,
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Snapshot of the iterate attached to solver failures.
#[derive(Debug, Clone)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub mu: f64,
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl std::fmt::Display for SolveDiagnostics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "iter {}, mu {:.3e}, stat {:.3e}, feas {:.3e}, comp {:.3e}",
            self.iterations, self.mu, self.stationarity, self.feasibility, self.complementarity
        )
    }
}

/// Interior-point solver errors.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error("iteration limit reached ({0})")]
    MaxIterations(SolveDiagnostics),
    #[error("line search failed ({0})")]
    LineSearchFailure(SolveDiagnostics),
    #[error("KKT system is singular even after regularization ({0})")]
    SingularKkt(SolveDiagnostics),
    #[error(transparent)]
    Eval(#[from] TranscribeError),
    #[error("initial guess has length {got}, layout expects {expected}")]
    BadGuessLength { expected: usize, got: usize },
    #[error("invalid solver options: {0}")]
    BadOptions(String),
}

/// Interpolation and mesh-refinement errors.
#[derive(Debug, Error)]
pub enum RefineError {
    #[error("solution did not converge; refusing to interpolate")]
    UnconvergedSolution,
    #[error("error integrator failed on interval {interval}: {reason}")]
    IntegrationFailure { interval: usize, reason: String },
    #[error("mesh budget exceeded after {rounds} rounds ({collocation_points} collocation points)")]
    MeshBudgetExceeded {
        rounds: usize,
        collocation_points: usize,
    },
    #[error("solver failed in refinement round {round}: {source}")]
    Solver {
        round: usize,
        #[source]
        source: SolveError,
    },
    #[error(transparent)]
    Transcribe(#[from] TranscribeError),
    #[error("invalid tolerances: {0}")]
    BadTolerances(String),
}

/// Diagnostics and benchmarking errors.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("solution carries no defect multipliers")]
    MissingMultipliers,
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("operation requires an add-state-mode solution")]
    NotAddStateMode,
    #[error("window contains no samples")]
    EmptyWindow,
    #[error("reference solve failed: {0}")]
    ReferenceFailed(String),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Transcribe(#[from] TranscribeError),
}
