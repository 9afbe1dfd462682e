//! Direct-collocation optimal control with on-mesh linear rate constraints.
//!
//! The crate covers the full pipeline: problem definition and the
//! conventional rate-constraint rewrites ([`ocp`]), collocation meshes and
//! differentiation stencils ([`collocation`]), transcription to a sparse NLP
//! ([`transcription`]) with on-mesh rate rows ([`rate`]), a primal-dual
//! interior-point solver with a linear-row fast path ([`solver`]),
//! trajectory reconstruction and mesh refinement ([`interp`], [`refine`]),
//! and singular-arc diagnostics plus benchmarking ([`analysis`]). Built-in
//! problems live in [`registry`].

pub mod analysis;
pub mod collocation;
pub mod error;
pub mod interp;
pub mod ocp;
pub mod rate;
pub mod refine;
pub mod registry;
pub mod solver;
pub mod sparse;
pub mod transcription;

pub use collocation::{Mesh, Scheme};
pub use ocp::{validate, OcpSpec, RateMode, ValidatedSpec};
pub use solver::{solve, SolverOptions};
pub use transcription::{count_constraints, default_guess, transcribe, NlpProblem, NlpSolution};
