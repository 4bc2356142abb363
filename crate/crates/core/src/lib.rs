//! Recovery boundaries and safety margins for parameterized switched
//! differential-algebraic models.
//!
//! For a disturbance scenario applied to a hybrid model, this crate evaluates
//! the inverse-sensitivity functions `H(p, t)` and `G(p)` together with the
//! gradient `DG(p)` from simulated trajectories, and drives three solvers on
//! top of them: a 1-D Newton boundary search with backtracking, a 2-D
//! predictor-corrector boundary trace, and an N-D sequential quadratic program
//! for the closest boundary point (the safety margin).

pub mod boundary_solvers;
pub mod error;
pub mod hybrid_model;
pub mod integrator;
pub mod models;
pub mod recovery_metrics;
pub mod sensitivities;
pub mod text;

pub use boundary_solvers::{
    find_boundary_1d, safety_margin_nd, trace_boundary_2d, BoundaryProblem, BoundarySample,
    BoundaryTrace, Iterate, MarginResult, SimulationProblem, Solver1DResult, SolverConfig,
    SyntheticProblem, TraceDirection, TracePoint,
};
pub use error::{Error, Result};
pub use hybrid_model::{
    solve_algebraic, validate, AlgebraicConfig, BranchSign, HybridSystemDefinition, InitialState,
    Jacobians, ParameterSpace, Phase, PhaseDuration, PhaseSchedule, PhaseTag, Severity,
    SwitchedConstraint, ValidationReport, PHASE_DISTURBANCE, PHASE_POST, PHASE_PRE,
};
pub use models::{build as build_model, ModelBundle, ModelMetadata, ParamInfo};
pub use integrator::{
    find_equilibrium, integrate, trajectory_to_json, EventKind, EventRecord, IntegrationConfig,
    JumpAudit, Method, StateTrajectory, Termination,
};
pub use recovery_metrics::{
    classify_recovery, evaluate_g, evaluate_g_detailed, evaluate_h, GDiagnostics, GEvaluation,
    RecoveryConfig, StateMask,
};
pub use sensitivities::{
    propagate_first_order, propagate_second_order, SecondOrderBackend, SecondOrderGrid,
    SensitivityTrajectory,
};
