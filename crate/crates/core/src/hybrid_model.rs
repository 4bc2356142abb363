//! Declarative representation of a parameterized switched differential-algebraic
//! system together with the disturbance scenario applied to it.
//!
//! The model is restricted to semi-explicit index-1 form: along every simulated
//! trajectory the Jacobian of the active algebraic branches with respect to the
//! algebraic states is nonsingular, so `y` is an implicit function of `(x, p)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies which phase of the disturbance scenario is active. Model
/// functions receive the tag and may change behavior per phase (e.g. zeroed
/// electrical torque, fault shunt inserted).
pub type PhaseTag = u32;

/// Canonical tags used by the built-in models and schedules.
pub const PHASE_PRE: PhaseTag = 0;
pub const PHASE_DISTURBANCE: PhaseTag = 1;
pub const PHASE_POST: PhaseTag = 2;

pub type VectorFn = Arc<dyn Fn(PhaseTag, &[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(PhaseTag, &[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(PhaseTag, &[f64], &[f64], &[f64]) -> DMatrix<f64> + Send + Sync>;
pub type BranchMatrixFn =
    Arc<dyn Fn(PhaseTag, &[BranchSign], &[f64], &[f64], &[f64]) -> DMatrix<f64> + Send + Sync>;
pub type IndicatorGradFn =
    Arc<dyn Fn(PhaseTag, usize, &[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type InitialMapFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type InitialJacFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Which branch of a switched constraint is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchSign {
    Plus,
    Minus,
}

impl BranchSign {
    /// Sign convention: an indicator exactly at zero selects the `+` branch.
    pub fn from_indicator(s: f64) -> Self {
        if s >= 0.0 {
            BranchSign::Plus
        } else {
            BranchSign::Minus
        }
    }
}

/// One switched block of algebraic equations: the indicator `s_i` selects
/// `g_i+` while positive and `g_i-` while negative.
#[derive(Clone)]
pub struct SwitchedConstraint {
    dim: usize,
    indicator: ScalarFn,
    branch_plus: VectorFn,
    branch_minus: VectorFn,
    hysteresis_band: f64,
}

impl SwitchedConstraint {
    pub fn new(
        dim: usize,
        indicator: ScalarFn,
        branch_plus: VectorFn,
        branch_minus: VectorFn,
    ) -> Self {
        Self {
            dim,
            indicator,
            branch_plus,
            branch_minus,
            hysteresis_band: 0.0,
        }
    }

    pub fn with_hysteresis(mut self, band: f64) -> Self {
        assert!(band >= 0.0, "hysteresis band must be >= 0");
        self.hysteresis_band = band;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hysteresis_band(&self) -> f64 {
        self.hysteresis_band
    }

    pub fn indicator(&self, tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]) -> f64 {
        (self.indicator)(tag, x, y, p)
    }

    pub fn branch(
        &self,
        sign: BranchSign,
        tag: PhaseTag,
        x: &[f64],
        y: &[f64],
        p: &[f64],
    ) -> Vec<f64> {
        match sign {
            BranchSign::Plus => (self.branch_plus)(tag, x, y, p),
            BranchSign::Minus => (self.branch_minus)(tag, x, y, p),
        }
    }
}

/// Optional analytic Jacobians. Any missing entry falls back to central
/// finite differences with step `1e-7 * max(1, |value|)`.
#[derive(Clone, Default)]
pub struct Jacobians {
    pub f_x: Option<MatrixFn>,
    pub f_y: Option<MatrixFn>,
    pub f_p: Option<MatrixFn>,
    pub g_x: Option<BranchMatrixFn>,
    pub g_y: Option<BranchMatrixFn>,
    pub g_p: Option<BranchMatrixFn>,
    pub s_x: Option<IndicatorGradFn>,
    pub s_y: Option<IndicatorGradFn>,
    pub s_p: Option<IndicatorGradFn>,
}

/// How the state at disturbance onset is produced.
#[derive(Clone)]
pub enum InitialState {
    /// Solve the pre-disturbance equilibrium of the first (equilibrium) phase,
    /// starting the Newton iteration from the given guess.
    PreEquilibrium {
        x_guess: Vec<f64>,
        y_guess: Vec<f64>,
    },
    /// Explicit onset state `x0(p)`; used by test systems that are not driven
    /// through a pre-disturbance equilibrium.
    Given {
        x0: InitialMapFn,
        /// Analytic `d x0 / d p` over the full parameter catalog; finite
        /// differences otherwise.
        dx0_dp: Option<InitialJacFn>,
    },
}

/// The switched DAE itself: dynamics `f`, switched algebraic blocks, the
/// onset-state rule, and optional analytic Jacobians.
#[derive(Clone)]
pub struct HybridSystemDefinition {
    n: usize,
    m: usize,
    state_names: Vec<String>,
    algebraic_names: Vec<String>,
    f: VectorFn,
    constraints: Vec<SwitchedConstraint>,
    initial_state: InitialState,
    jacobians: Jacobians,
}

impl HybridSystemDefinition {
    pub fn builder(n: usize, m: usize) -> HybridSystemBuilder {
        HybridSystemBuilder {
            n,
            m,
            state_names: (1..=n).map(|i| format!("x_{i}")).collect(),
            algebraic_names: (1..=m).map(|i| format!("y_{i}")).collect(),
            f: None,
            constraints: Vec::new(),
            initial_state: None,
            jacobians: Jacobians::default(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn algebraic_names(&self) -> &[String] {
        &self.algebraic_names
    }

    pub fn constraints(&self) -> &[SwitchedConstraint] {
        &self.constraints
    }

    pub fn initial_state(&self) -> &InitialState {
        &self.initial_state
    }

    pub fn jacobians(&self) -> &Jacobians {
        &self.jacobians
    }

    pub fn eval_f(&self, tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]) -> Vec<f64> {
        (self.f)(tag, x, y, p)
    }

    /// Stacks the active branches of every constraint into the full residual
    /// `g(x, y, p)` of length `m`.
    pub fn eval_g(
        &self,
        tag: PhaseTag,
        branches: &[BranchSign],
        x: &[f64],
        y: &[f64],
        p: &[f64],
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.m);
        for (c, sign) in self.constraints.iter().zip(branches) {
            out.extend(c.branch(*sign, tag, x, y, p));
        }
        out
    }

    pub fn eval_indicator(&self, tag: PhaseTag, i: usize, x: &[f64], y: &[f64], p: &[f64]) -> f64 {
        self.constraints[i].indicator(tag, x, y, p)
    }

    /// Deterministic branch selection from indicator signs (`s >= 0` selects `+`).
    pub fn select_branches(&self, tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]) -> Vec<BranchSign> {
        self.constraints
            .iter()
            .map(|c| BranchSign::from_indicator(c.indicator(tag, x, y, p)))
            .collect()
    }

    pub(crate) fn jac(&self) -> JacEngine<'_> {
        JacEngine { def: self }
    }
}

pub struct HybridSystemBuilder {
    n: usize,
    m: usize,
    state_names: Vec<String>,
    algebraic_names: Vec<String>,
    f: Option<VectorFn>,
    constraints: Vec<SwitchedConstraint>,
    initial_state: Option<InitialState>,
    jacobians: Jacobians,
}

impl HybridSystemBuilder {
    pub fn state_names(mut self, names: &[&str]) -> Self {
        assert_eq!(names.len(), self.n);
        self.state_names = names.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn algebraic_names(mut self, names: &[&str]) -> Self {
        assert_eq!(names.len(), self.m);
        self.algebraic_names = names.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn dynamics(mut self, f: VectorFn) -> Self {
        self.f = Some(f);
        self
    }

    pub fn constraint(mut self, c: SwitchedConstraint) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn initial_state(mut self, init: InitialState) -> Self {
        self.initial_state = Some(init);
        self
    }

    pub fn jacobians(mut self, jac: Jacobians) -> Self {
        self.jacobians = jac;
        self
    }

    pub fn build(self) -> Result<HybridSystemDefinition> {
        let f = self
            .f
            .ok_or_else(|| Error::InvalidConfig("dynamics f not set".into()))?;
        let initial_state = self
            .initial_state
            .ok_or_else(|| Error::InvalidConfig("initial state rule not set".into()))?;
        let total: usize = self.constraints.iter().map(|c| c.dim()).sum();
        if total != self.m {
            return Err(Error::InvalidConfig(format!(
                "algebraic segment dimensions sum to {total}, expected m = {}",
                self.m
            )));
        }
        Ok(HybridSystemDefinition {
            n: self.n,
            m: self.m,
            state_names: self.state_names,
            algebraic_names: self.algebraic_names,
            f,
            constraints: self.constraints,
            initial_state,
            jacobians: self.jacobians,
        })
    }
}

// ---------------------------------------------------------------------------
// Phase schedule
// ---------------------------------------------------------------------------

/// Duration of one phase of the disturbance scenario.
#[derive(Clone, Debug, PartialEq)]
pub enum PhaseDuration {
    /// Pre-disturbance phase: the system sits at its equilibrium; no time
    /// elapses on the simulation clock (t = 0 is disturbance onset).
    Equilibrium,
    Fixed(f64),
    /// Duration given by a parameter of the full model catalog (e.g. the
    /// fault clearing time).
    FromParameter(usize),
    /// Runs to the integration horizon; exactly one phase, the last, has it.
    ToHorizon,
}

#[derive(Clone, Debug)]
pub struct Phase {
    pub tag: PhaseTag,
    pub label: String,
    pub duration: PhaseDuration,
}

impl Phase {
    pub fn new(tag: PhaseTag, label: &str, duration: PhaseDuration) -> Self {
        Self {
            tag,
            label: label.to_string(),
            duration,
        }
    }
}

/// Ordered disturbance scenario. Canonical form: pre-disturbance equilibrium,
/// disturbance-on interval `[0, t_clear]`, post-disturbance interval to the
/// horizon.
#[derive(Clone, Debug)]
pub struct PhaseSchedule {
    phases: Vec<Phase>,
}

impl PhaseSchedule {
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::InvalidConfig("empty phase schedule".into()));
        }
        for (i, ph) in phases.iter().enumerate() {
            match ph.duration {
                PhaseDuration::Equilibrium if i != 0 => {
                    return Err(Error::InvalidConfig(
                        "equilibrium phase must be first".into(),
                    ));
                }
                PhaseDuration::Fixed(d) if d <= 0.0 => {
                    return Err(Error::InvalidConfig(format!(
                        "phase `{}` has non-positive duration {d}",
                        ph.label
                    )));
                }
                PhaseDuration::ToHorizon if i + 1 != phases.len() => {
                    return Err(Error::InvalidConfig(
                        "to-horizon phase must be last".into(),
                    ));
                }
                _ => {}
            }
        }
        match phases.last().map(|p| &p.duration) {
            Some(PhaseDuration::ToHorizon) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "last phase must run to the horizon (exactly one post-disturbance phase)"
                        .into(),
                ));
            }
        }
        Ok(Self { phases })
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn pre_phase(&self) -> Option<&Phase> {
        self.phases
            .first()
            .filter(|p| p.duration == PhaseDuration::Equilibrium)
    }

    /// Phases that occupy simulation time, in order.
    pub fn timed_phases(&self) -> &[Phase] {
        match self.pre_phase() {
            Some(_) => &self.phases[1..],
            None => &self.phases[..],
        }
    }

    pub fn last_tag(&self) -> PhaseTag {
        self.phases.last().expect("non-empty").tag
    }
}

// ---------------------------------------------------------------------------
// Parameter space
// ---------------------------------------------------------------------------

/// Named parameter values `p` with nominal values, optional box bounds
/// (advisory metadata for sweeps; solvers do not project onto them), and an
/// optional symmetric positive definite weight matrix for margin distances.
#[derive(Clone, Debug)]
pub struct ParameterSpace {
    names: Vec<String>,
    nominal: Vec<f64>,
    model_index: Vec<usize>,
    baseline: Vec<f64>,
    bounds: Vec<Option<(f64, f64)>>,
    weight: Option<DMatrix<f64>>,
}

impl ParameterSpace {
    /// Space over the full catalog: every named parameter is active.
    pub fn full(names: Vec<String>, nominal: Vec<f64>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidConfig("parameter space must have P >= 1".into()));
        }
        if names.len() != nominal.len() {
            return Err(Error::InvalidConfig(
                "parameter names/nominals length mismatch".into(),
            ));
        }
        for (i, a) in names.iter().enumerate() {
            if names[i + 1..].contains(a) {
                return Err(Error::InvalidConfig(format!("duplicate parameter `{a}`")));
            }
        }
        let p = names.len();
        Ok(Self {
            names,
            nominal: nominal.clone(),
            model_index: (0..p).collect(),
            baseline: nominal,
            bounds: vec![None; p],
            weight: None,
        })
    }

    /// Restricts to a subset of active parameters; the rest stay frozen at
    /// their current baseline values.
    pub fn restrict(&self, names: &[&str]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidConfig("parameter space must have P >= 1".into()));
        }
        let mut model_index = Vec::with_capacity(names.len());
        let mut nominal = Vec::with_capacity(names.len());
        let mut bounds = Vec::with_capacity(names.len());
        for want in names {
            let j = self
                .names
                .iter()
                .position(|n| n == want)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter `{want}`")))?;
            let full = self.model_index[j];
            if model_index.contains(&full) {
                return Err(Error::InvalidConfig(format!("duplicate parameter `{want}`")));
            }
            model_index.push(full);
            nominal.push(self.nominal[j]);
            bounds.push(self.bounds[j]);
        }
        Ok(Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            nominal,
            model_index,
            baseline: self.baseline.clone(),
            bounds,
            weight: None,
        })
    }

    pub fn with_bounds(mut self, name: &str, lower: f64, upper: f64) -> Result<Self> {
        let j = self
            .index_of(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter `{name}`")))?;
        if lower >= upper {
            return Err(Error::InvalidConfig(format!(
                "bounds for `{name}` must satisfy lower < upper"
            )));
        }
        self.bounds[j] = Some((lower, upper));
        Ok(self)
    }

    /// Installs the margin-distance weight matrix; must be symmetric positive
    /// definite (checked by attempted Cholesky factorization).
    pub fn with_weight(mut self, weight: DMatrix<f64>) -> Result<Self> {
        let p = self.dim();
        if weight.nrows() != p || weight.ncols() != p {
            return Err(Error::InvalidConfig(format!(
                "weight matrix must be {p}x{p}"
            )));
        }
        let asym = (&weight - weight.transpose()).abs().max();
        let scale = weight.abs().max().max(1.0);
        if asym > 1e-12 * scale {
            return Err(Error::InvalidConfig("weight matrix not symmetric".into()));
        }
        if nalgebra::Cholesky::new(weight.clone()).is_none() {
            return Err(Error::InvalidConfig(
                "weight matrix not positive definite".into(),
            ));
        }
        self.weight = Some(weight);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn nominal(&self) -> &[f64] {
        &self.nominal
    }

    pub fn bounds(&self) -> &[Option<(f64, f64)>] {
        &self.bounds
    }

    pub fn weight(&self) -> Option<&DMatrix<f64>> {
        self.weight.as_ref()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Index of active parameter `j` in the full model catalog.
    pub fn full_index(&self, j: usize) -> usize {
        self.model_index[j]
    }

    /// Expands active values into the full model parameter vector.
    pub fn full_vector(&self, p_active: &[f64]) -> Vec<f64> {
        assert_eq!(p_active.len(), self.dim());
        let mut full = self.baseline.clone();
        for (j, &v) in p_active.iter().enumerate() {
            full[self.model_index[j]] = v;
        }
        full
    }

    /// Selects the active columns of a Jacobian taken with respect to the
    /// full catalog.
    pub fn active_columns(&self, full: &DMatrix<f64>) -> DMatrix<f64> {
        let rows = full.nrows();
        let mut out = DMatrix::zeros(rows, self.dim());
        for (j, &fj) in self.model_index.iter().enumerate() {
            out.set_column(j, &full.column(fj));
        }
        out
    }

    pub fn inside_bounds(&self, p_active: &[f64]) -> bool {
        p_active.iter().zip(&self.bounds).all(|(v, b)| match b {
            Some((lo, hi)) => *v >= *lo && *v <= *hi,
            None => true,
        })
    }
}

// ---------------------------------------------------------------------------
// Jacobian engine: analytic closures when registered, central differences
// otherwise.
// ---------------------------------------------------------------------------

const FD_STEP_SCALE: f64 = 1e-7;

fn fd_step(v: f64) -> f64 {
    FD_STEP_SCALE * v.abs().max(1.0)
}

pub(crate) struct JacEngine<'a> {
    def: &'a HybridSystemDefinition,
}

macro_rules! fd_matrix {
    ($rows:expr, $wrt:ident, $eval:expr) => {{
        let cols = $wrt.len();
        let mut out = DMatrix::zeros($rows, cols);
        let mut pert = $wrt.to_vec();
        for j in 0..cols {
            let h = fd_step($wrt[j]);
            pert[j] = $wrt[j] + h;
            let hi = $eval(&pert);
            pert[j] = $wrt[j] - h;
            let lo = $eval(&pert);
            pert[j] = $wrt[j];
            for i in 0..$rows {
                out[(i, j)] = (hi[i] - lo[i]) / (2.0 * h);
            }
        }
        out
    }};
}

impl JacEngine<'_> {
    pub fn f_x(&self, tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]) -> DMatrix<f64> {
        if let Some(j) = &self.def.jacobians.f_x {
            return j(tag, x, y, p);
        }
        fd_matrix!(self.def.n, x, |xx: &[f64]| self.def.eval_f(tag, xx, y, p))
    }

    pub fn f_y(&self, tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]) -> DMatrix<f64> {
        if let Some(j) = &self.def.jacobians.f_y {
            return j(tag, x, y, p);
        }
        fd_matrix!(self.def.n, y, |yy: &[f64]| self.def.eval_f(tag, x, yy, p))
    }

    pub fn f_p(&self, tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]) -> DMatrix<f64> {
        if let Some(j) = &self.def.jacobians.f_p {
            return j(tag, x, y, p);
        }
        fd_matrix!(self.def.n, p, |pp: &[f64]| self.def.eval_f(tag, x, y, pp))
    }

    pub fn g_x(
        &self,
        tag: PhaseTag,
        branches: &[BranchSign],
        x: &[f64],
        y: &[f64],
        p: &[f64],
    ) -> DMatrix<f64> {
        if let Some(j) = &self.def.jacobians.g_x {
            return j(tag, branches, x, y, p);
        }
        fd_matrix!(self.def.m, x, |xx: &[f64]| self
            .def
            .eval_g(tag, branches, xx, y, p))
    }

    pub fn g_y(
        &self,
        tag: PhaseTag,
        branches: &[BranchSign],
        x: &[f64],
        y: &[f64],
        p: &[f64],
    ) -> DMatrix<f64> {
        if let Some(j) = &self.def.jacobians.g_y {
            return j(tag, branches, x, y, p);
        }
        fd_matrix!(self.def.m, y, |yy: &[f64]| self
            .def
            .eval_g(tag, branches, x, yy, p))
    }

    pub fn g_p(
        &self,
        tag: PhaseTag,
        branches: &[BranchSign],
        x: &[f64],
        y: &[f64],
        p: &[f64],
    ) -> DMatrix<f64> {
        if let Some(j) = &self.def.jacobians.g_p {
            return j(tag, branches, x, y, p);
        }
        fd_matrix!(self.def.m, p, |pp: &[f64]| self
            .def
            .eval_g(tag, branches, x, y, pp))
    }

    pub fn s_x(&self, tag: PhaseTag, i: usize, x: &[f64], y: &[f64], p: &[f64]) -> Vec<f64> {
        if let Some(j) = &self.def.jacobians.s_x {
            return j(tag, i, x, y, p);
        }
        let m = fd_matrix!(1, x, |xx: &[f64]| [self.def.eval_indicator(tag, i, xx, y, p)]);
        m.row(0).iter().copied().collect()
    }

    pub fn s_y(&self, tag: PhaseTag, i: usize, x: &[f64], y: &[f64], p: &[f64]) -> Vec<f64> {
        if let Some(j) = &self.def.jacobians.s_y {
            return j(tag, i, x, y, p);
        }
        let m = fd_matrix!(1, y, |yy: &[f64]| [self.def.eval_indicator(tag, i, x, yy, p)]);
        m.row(0).iter().copied().collect()
    }

    pub fn s_p(&self, tag: PhaseTag, i: usize, x: &[f64], y: &[f64], p: &[f64]) -> Vec<f64> {
        if let Some(j) = &self.def.jacobians.s_p {
            return j(tag, i, x, y, p);
        }
        let m = fd_matrix!(1, p, |pp: &[f64]| [self.def.eval_indicator(tag, i, x, y, pp)]);
        m.row(0).iter().copied().collect()
    }
}

// ---------------------------------------------------------------------------
// Algebraic solve
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlgebraicConfig {
    /// Infinity-norm tolerance on the constraint residual.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for AlgebraicConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 50,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    let mut m = 0.0_f64;
    for x in v {
        if !x.is_finite() {
            return f64::INFINITY;
        }
        m = m.max(x.abs());
    }
    m
}

/// Damped Newton on the stacked active branches with the branch set held
/// fixed. Used by the integrator within smooth segments.
pub(crate) fn newton_algebraic(
    def: &HybridSystemDefinition,
    tag: PhaseTag,
    branches: &[BranchSign],
    x: &[f64],
    p: &[f64],
    y0: &[f64],
    cfg: &AlgebraicConfig,
) -> Result<Vec<f64>> {
    let m = def.m();
    if m == 0 {
        return Ok(Vec::new());
    }
    let jac = def.jac();
    let mut y = y0.to_vec();
    let mut r = def.eval_g(tag, branches, x, &y, p);
    let mut rn = inf_norm(&r);
    let dbg = std::env::var("RECOBOUND_DEBUG").is_ok();
    if dbg {
        eprintln!("DBG solve enter: tag={tag} rn0={rn:.3e} y0={y0:?}");
    }
    for it in 0..cfg.max_iterations {
        if rn <= cfg.tolerance && rn.is_finite() {
            return Ok(y);
        }
        if !rn.is_finite() {
            return Err(Error::AlgebraicSolveFailure {
                iterations: it,
                residual: rn,
            });
        }
        let gy = jac.g_y(tag, branches, x, &y, p);
        let rhs = nalgebra::DVector::from_column_slice(&r);
        let lu = gy.lu();
        let delta = lu.solve(&rhs).ok_or(Error::AlgebraicSolveFailure {
            iterations: it,
            residual: rn,
        })?;
        // Backtracking on the residual norm.
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = y
                .iter()
                .enumerate()
                .map(|(i, v)| v - lambda * delta[i])
                .collect();
            let rt = def.eval_g(tag, branches, x, &trial, p);
            let rtn = inf_norm(&rt);
            if rtn.is_finite() && (rtn < rn || rtn <= cfg.tolerance) {
                y = trial;
                r = rt;
                rn = rtn;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            if std::env::var("RECOBOUND_DEBUG").is_ok() {
                eprintln!(
                    "DBG newton_algebraic stuck: tag={tag} branches={branches:?} rn={rn:.3e} x={x:?} y={y:?}"
                );
            }
            return Err(Error::AlgebraicSolveFailure {
                iterations: it,
                residual: rn,
            });
        }
    }
    if rn <= cfg.tolerance {
        Ok(y)
    } else {
        Err(Error::AlgebraicSolveFailure {
            iterations: cfg.max_iterations,
            residual: rn,
        })
    }
}

/// Solves the active algebraic constraints for `y` given `x`. The active
/// branches are determined from the indicator signs at `y_guess`, re-checked
/// once at the solution.
pub fn solve_algebraic(
    def: &HybridSystemDefinition,
    tag: PhaseTag,
    x: &[f64],
    p: &[f64],
    y_guess: &[f64],
    cfg: &AlgebraicConfig,
) -> Result<(Vec<f64>, Vec<BranchSign>)> {
    if def.m() == 0 {
        return Ok((Vec::new(), def.select_branches(tag, x, y_guess, p)));
    }
    let mut branches = def.select_branches(tag, x, y_guess, p);
    let mut y = newton_algebraic(def, tag, &branches, x, p, y_guess, cfg)?;
    let reselected = def.select_branches(tag, x, &y, p);
    if reselected != branches {
        branches = reselected;
        y = newton_algebraic(def, tag, &branches, x, p, &y, cfg)?;
    }
    Ok((y, branches))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Error,
    Warning,
    Info,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub severity: Severity,
    pub message: String,
}

/// Structured validation outcome; never aborts.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    fn push(&mut self, severity: Severity, message: impl Into<String>) {
        self.entries.push(ValidationEntry {
            severity,
            message: message.into(),
        });
    }

    pub fn ok(&self) -> bool {
        self.entries.iter().all(|e| e.severity != Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &ValidationEntry> {
        self.entries
            .iter()
            .filter(|e| e.severity == Severity::Error)
    }
}

/// Checks dimensions, finiteness at nominal parameters, Jacobian coverage,
/// and parameter-space invariants. Never aborts: all findings are reported.
pub fn validate(def: &HybridSystemDefinition, space: &ParameterSpace) -> ValidationReport {
    let mut report = ValidationReport::default();
    let p_full = space.full_vector(space.nominal());

    if def.n() == 0 {
        report.push(Severity::Error, "dynamic state dimension n must be >= 1");
    }

    let seg_total: usize = def.constraints().iter().map(|c| c.dim()).sum();
    if seg_total != def.m() {
        report.push(
            Severity::Error,
            format!(
                "algebraic segment dimensions sum to {seg_total}, expected m = {}",
                def.m()
            ),
        );
    }

    // Probe point for evaluation checks.
    let (x_probe, y_probe): (Vec<f64>, Vec<f64>) = match def.initial_state() {
        InitialState::PreEquilibrium { x_guess, y_guess } => (x_guess.clone(), y_guess.clone()),
        InitialState::Given { x0, .. } => (x0(&p_full), vec![0.0; def.m()]),
    };
    if x_probe.len() != def.n() {
        report.push(
            Severity::Error,
            format!(
                "initial state has dimension {}, expected n = {}",
                x_probe.len(),
                def.n()
            ),
        );
    } else {
        let fx = def.eval_f(PHASE_PRE, &x_probe, &y_probe, &p_full);
        if fx.len() != def.n() {
            report.push(
                Severity::Error,
                format!("f output dimension mismatch: got {}, expected {}", fx.len(), def.n()),
            );
        } else if fx.iter().any(|v| !v.is_finite()) {
            report.push(Severity::Error, "f is non-finite at nominal parameters");
        }
        for (i, c) in def.constraints().iter().enumerate() {
            for sign in [BranchSign::Plus, BranchSign::Minus] {
                let g = c.branch(sign, PHASE_PRE, &x_probe, &y_probe, &p_full);
                if g.len() != c.dim() {
                    report.push(
                        Severity::Error,
                        format!(
                            "constraint {i} {sign:?} branch returns dimension {}, declared {}",
                            g.len(),
                            c.dim()
                        ),
                    );
                } else if g.iter().any(|v| !v.is_finite()) {
                    report.push(
                        Severity::Error,
                        format!("constraint {i} {sign:?} branch non-finite at nominal parameters"),
                    );
                }
            }
            let s = c.indicator(PHASE_PRE, &x_probe, &y_probe, &p_full);
            if !s.is_finite() {
                report.push(
                    Severity::Error,
                    format!("indicator {i} non-finite at nominal parameters"),
                );
            }
        }
    }

    let jac = def.jacobians();
    let missing: Vec<&str> = [
        ("f_x", jac.f_x.is_none()),
        ("f_y", jac.f_y.is_none() && def.m() > 0),
        ("f_p", jac.f_p.is_none()),
        ("g_x", jac.g_x.is_none() && def.m() > 0),
        ("g_y", jac.g_y.is_none() && def.m() > 0),
        ("g_p", jac.g_p.is_none() && def.m() > 0),
    ]
    .iter()
    .filter(|(_, miss)| *miss)
    .map(|(name, _)| *name)
    .collect();
    if missing.is_empty() {
        report.push(Severity::Info, "OK, Jacobians analytic");
    } else {
        report.push(
            Severity::Warning,
            format!(
                "Jacobians {} not registered; falling back to finite differences",
                missing.join(", ")
            ),
        );
    }

    if space.dim() == 0 {
        report.push(Severity::Error, "parameter space must have P >= 1");
    }
    if let Some(w) = space.weight() {
        // `with_weight` already rejects non-SPD matrices, so reaching here
        // with a bad matrix is impossible through the public API; re-check
        // anyway for externally constructed spaces.
        if nalgebra::Cholesky::new(w.clone()).is_none() {
            report.push(Severity::Error, "weight matrix not positive definite");
        }
    }

    report
}
