use thiserror::Error;

use crate::integrator::StateTrajectory;

/// Errors produced across the model, integration, metric, and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("algebraic solve failed after {iterations} iterations, residual {residual:.3e}")]
    AlgebraicSolveFailure { iterations: usize, residual: f64 },

    /// The state norm exceeded the divergence threshold. Carries the partial
    /// trajectory so callers can use divergence as a non-recovery witness.
    #[error("integration diverged at t = {time:.6}, |x|_inf = {norm:.3e}")]
    IntegrationDiverged {
        time: f64,
        norm: f64,
        trajectory: Box<StateTrajectory>,
    },

    #[error("event chattering: more than {max_events} switchings (last at t = {time:.6})")]
    EventChattering { max_events: usize, time: f64 },

    #[error("no equilibrium found: residual {residual:.3e} after {iterations} iterations")]
    NoEquilibrium { iterations: usize, residual: f64 },

    #[error("equilibrium is unstable: max eigenvalue real part {max_real_part:.3e}")]
    EquilibriumUnstable { max_real_part: f64 },

    #[error(
        "sensitivity jump singular at t = {time:.6} (indicator {indicator}): \
         transversality denominator {denominator:.3e}"
    )]
    SensitivityJumpSingular {
        time: f64,
        indicator: usize,
        denominator: f64,
    },

    #[error("second-order backend unsupported: {0}")]
    BackendUnsupported(String),

    #[error(
        "recovery classification inconclusive: terminal oscillation amplitude {oscillation:.3e} \
         exceeds ball radius {ball_radius:.3e}; horizon may be too short"
    )]
    Inconclusive { oscillation: f64, ball_radius: f64 },

    #[error("starting point is not in the recovery region")]
    StartNotRecovered,

    #[error("gradient magnitude {magnitude:.3e} below zero-gradient threshold")]
    ZeroGradient { magnitude: f64 },

    #[error("solver did not converge within {iterations} iterations")]
    MaxIterations { iterations: usize },

    #[error("tangent undefined: |DG| = {magnitude:.3e}")]
    TangentUndefined { magnitude: f64 },

    #[error("corrector failed: step size reduced below {kappa:.3e}")]
    CorrectorFailed { kappa: f64 },

    #[error("line search along the predictor hyperplane found no recovered point")]
    LineSearchExhausted,

    #[error("KKT linear system is singular")]
    LinearSystemSingular,

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("bad model override: {0}")]
    BadOverride(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for failures that a solver should treat as "this parameter value
    /// is outside the usable region" rather than aborting: the trial point is
    /// skipped exactly like a non-recovered iterate.
    pub fn is_trial_failure(&self) -> bool {
        matches!(
            self,
            Error::IntegrationDiverged { .. }
                | Error::AlgebraicSolveFailure { .. }
                | Error::NoEquilibrium { .. }
                | Error::EventChattering { .. }
                | Error::Inconclusive { .. }
                | Error::SensitivityJumpSingular { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
