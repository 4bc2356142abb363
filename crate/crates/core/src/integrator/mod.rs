//! Time integration of the switched DAE with event localization.
//!
//! One driver handles plain state integration and sensitivity-augmented
//! integration: the integrated vector is `[x, vec(chi), vec(chi2)]` depending
//! on the requested mode, so event handling and phase logic exist once.

mod stepper;

pub(crate) use stepper::Interpolant;
use stepper::OdeSystem;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid_model::{
    newton_algebraic, solve_algebraic, AlgebraicConfig, BranchSign, HybridSystemDefinition,
    InitialState, ParameterSpace, PhaseDuration, PhaseSchedule, PhaseTag,
};
use crate::text::push_float_row;

/// Transversality guard: indicator events whose denominator falls below this
/// are grazing contacts.
const GRAZING_DENOMINATOR: f64 = 1e-12;
/// Interior sample count used to bracket indicator crossings on the dense
/// output of each accepted step.
const EVENT_SCAN_POINTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk45,
    Trapezoidal,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub method: Method,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub event_time_tolerance: f64,
    /// Step-size cap; also the fixed step of the trapezoidal method.
    pub max_step: Option<f64>,
    /// Simulation horizon T, measured from disturbance onset.
    pub horizon: f64,
    /// Output grid spacing.
    pub output_dt: f64,
    pub max_events: usize,
    /// `|x|_inf` above this terminates the run as diverged (doubles as an
    /// early non-recovery witness).
    pub divergence_threshold: f64,
    pub algebraic: AlgebraicConfig,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk45,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            event_time_tolerance: 1e-10,
            max_step: None,
            horizon: 20.0,
            output_dt: 0.05,
            max_events: 10_000,
            divergence_threshold: 1e6,
            algebraic: AlgebraicConfig::default(),
        }
    }
}

impl IntegrationConfig {
    pub fn with_horizon(horizon: f64) -> Self {
        Self {
            horizon,
            output_dt: horizon / 400.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rel_tol <= 0.0
            || self.abs_tol <= 0.0
            || self.event_time_tolerance <= 0.0
            || self.output_dt <= 0.0
        {
            return Err(Error::InvalidConfig(
                "integration tolerances and grid spacing must be strictly positive".into(),
            ));
        }
        if self.horizon <= 0.0 {
            return Err(Error::InvalidConfig("horizon must be strictly positive".into()));
        }
        if let Some(h) = self.max_step {
            if h <= 0.0 {
                return Err(Error::InvalidConfig("max_step must be strictly positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    Completed,
    Diverged { time: f64, norm: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub enum EventKind {
    Indicator {
        index: usize,
        from: BranchSign,
        to: BranchSign,
    },
    PhaseBoundary {
        from: String,
        to: String,
    },
}

/// Gradient data of the switching indicator at a localized event, used by the
/// sensitivity jump rule.
#[derive(Clone, Debug, Serialize)]
pub struct IndicatorGradient {
    pub wrt_state: Vec<f64>,
    pub wrt_algebraic: Vec<f64>,
    /// With respect to the active parameters.
    pub wrt_parameters: Vec<f64>,
    /// `grad_x s . f- + grad_y s . ydot-`.
    pub denominator: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub x_pre: Vec<f64>,
    pub y_pre: Vec<f64>,
    pub x_post: Vec<f64>,
    pub y_post: Vec<f64>,
    pub f_pre: Vec<f64>,
    pub f_post: Vec<f64>,
    /// Indicator value at the localized time (indicator events only).
    pub indicator_value: Option<f64>,
    pub indicator_gradient: Option<IndicatorGradient>,
    pub grazing: bool,
}

/// Sensitivity jump applied at one event; kept for auditing.
#[derive(Clone, Debug, Serialize)]
pub struct JumpAudit {
    pub time: f64,
    pub description: String,
    /// d tau / dp over the active parameters.
    pub event_time_sensitivity: Vec<f64>,
    /// f- minus f+ at the event.
    pub vector_field_jump: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Dense solution storage
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub(crate) struct Segment {
    pub t0: f64,
    pub t1: f64,
    /// Step length the interpolant was built on (>= t1 - t0 when truncated).
    pub h: f64,
    pub interp: Interpolant,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct DenseSolution {
    pub segments: Vec<Segment>,
}

impl DenseSolution {
    pub fn t_end(&self) -> f64 {
        self.segments.last().map(|s| s.t1).unwrap_or(0.0)
    }

    pub fn segment_for(&self, t: f64) -> Option<&Segment> {
        if self.segments.is_empty() {
            return None;
        }
        let idx = self
            .segments
            .partition_point(|s| s.t1 < t)
            .min(self.segments.len() - 1);
        Some(&self.segments[idx])
    }

    /// Evaluates the augmented state at `t`, clamped to the covered range.
    pub fn eval_aug(&self, t: f64) -> Option<DVector<f64>> {
        let seg = self.segment_for(t)?;
        let theta = if seg.h > 0.0 {
            ((t - seg.t0) / seg.h).clamp(0.0, 1.0)
        } else {
            0.0
        };
        Some(seg.interp.eval(theta))
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Time-sampled states with event records and the continuous solution kept
/// internally for refinement queries.
#[derive(Clone, Debug, Serialize)]
pub struct StateTrajectory {
    pub n: usize,
    pub m: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub algebraic: Vec<Vec<f64>>,
    pub events: Vec<EventRecord>,
    pub termination: Termination,
    /// Target equilibrium of the final (post-disturbance) phase, when one
    /// exists near the onset state.
    pub x_sep: Option<Vec<f64>>,
    #[serde(skip)]
    pub(crate) dense: DenseSolution,
}

impl StateTrajectory {
    /// Dynamic state at an arbitrary time inside the simulated range.
    pub fn state_at(&self, t: f64) -> Option<Vec<f64>> {
        self.dense
            .eval_aug(t)
            .map(|v| v.as_slice()[..self.n].to_vec())
    }

    pub fn t_end(&self) -> f64 {
        self.dense.t_end()
    }

    /// CSV with columns `t, x_1..x_n, y_1..y_m`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push('t');
        for i in 1..=self.n {
            out.push_str(&format!(",x_{i}"));
        }
        for j in 1..=self.m {
            out.push_str(&format!(",y_{j}"));
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            let mut row = Vec::with_capacity(1 + self.n + self.m);
            row.push(*t);
            row.extend_from_slice(&self.states[k]);
            row.extend_from_slice(&self.algebraic[k]);
            push_float_row(&mut out, &[], &row);
        }
        out
    }
}

/// Raw simulation output shared by the plain and sensitivity-aware paths.
#[derive(Debug)]
pub(crate) struct RawSim {
    pub n: usize,
    pub m: usize,
    pub p_dim: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub algebraic: Vec<Vec<f64>>,
    /// First-order sensitivities on the grid (empty in plain mode).
    pub chi: Vec<DMatrix<f64>>,
    /// Flattened second-order sensitivities per sample, layout
    /// `[state * P * P]` with `(state, i, j)` row-major (variational mode).
    pub chi2: Vec<Vec<f64>>,
    pub events: Vec<EventRecord>,
    pub jumps: Vec<JumpAudit>,
    pub termination: Termination,
    pub x_sep: Option<Vec<f64>>,
    pub dense: DenseSolution,
    /// Smallest |s_i| seen on the output grid; +inf when no indicators.
    pub min_indicator_margin: f64,
}

impl RawSim {
    pub fn into_trajectory(self) -> StateTrajectory {
        StateTrajectory {
            n: self.n,
            m: self.m,
            times: self.times,
            states: self.states,
            algebraic: self.algebraic,
            events: self.events,
            termination: self.termination,
            x_sep: self.x_sep,
            dense: self.dense,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum SensMode {
    None,
    First,
    SecondVariational,
}

// ---------------------------------------------------------------------------
// Equilibrium solves
// ---------------------------------------------------------------------------

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

pub(crate) fn equilibrium_newton(
    def: &HybridSystemDefinition,
    tag: PhaseTag,
    p_full: &[f64],
    x_guess: &[f64],
    y_guess: &[f64],
    alg: &AlgebraicConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = def.n();
    let m = def.m();
    let jac = def.jac();
    let mut x = x_guess.to_vec();
    let mut y = y_guess.to_vec();
    let tol = alg.tolerance;

    let residual = |x: &[f64], y: &[f64]| -> (Vec<f64>, Vec<BranchSign>) {
        let branches = def.select_branches(tag, x, y, p_full);
        let mut r = def.eval_f(tag, x, y, p_full);
        r.extend(def.eval_g(tag, &branches, x, y, p_full));
        (r, branches)
    };

    let (mut r, mut branches) = residual(&x, &y);
    let mut rn = inf_norm(&r);
    for it in 0..50 {
        if rn <= tol && rn.is_finite() {
            return Ok((x, y));
        }
        if !rn.is_finite() {
            return Err(Error::NoEquilibrium {
                iterations: it,
                residual: rn,
            });
        }
        let fx = jac.f_x(tag, &x, &y, p_full);
        let mut j = DMatrix::zeros(n + m, n + m);
        j.view_mut((0, 0), (n, n)).copy_from(&fx);
        if m > 0 {
            let fy = jac.f_y(tag, &x, &y, p_full);
            let gx = jac.g_x(tag, &branches, &x, &y, p_full);
            let gy = jac.g_y(tag, &branches, &x, &y, p_full);
            j.view_mut((0, n), (n, m)).copy_from(&fy);
            j.view_mut((n, 0), (m, n)).copy_from(&gx);
            j.view_mut((n, n), (m, m)).copy_from(&gy);
        }
        let rhs = DVector::from_column_slice(&r);
        let delta = j.lu().solve(&rhs).ok_or(Error::NoEquilibrium {
            iterations: it,
            residual: rn,
        })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let xt: Vec<f64> = x
                .iter()
                .enumerate()
                .map(|(i, v)| v - lambda * delta[i])
                .collect();
            let yt: Vec<f64> = y
                .iter()
                .enumerate()
                .map(|(i, v)| v - lambda * delta[n + i])
                .collect();
            let (rt, bt) = residual(&xt, &yt);
            let rtn = inf_norm(&rt);
            if rtn.is_finite() && (rtn < rn || rtn <= tol) {
                x = xt;
                y = yt;
                r = rt;
                branches = bt;
                rn = rtn;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NoEquilibrium {
                iterations: it,
                residual: rn,
            });
        }
    }
    if rn <= tol {
        Ok((x, y))
    } else {
        Err(Error::NoEquilibrium {
            iterations: 50,
            residual: rn,
        })
    }
}

/// Reduced state Jacobian `A = f_x - f_y g_y^{-1} g_x` at a point.
pub(crate) fn reduced_state_jacobian(
    def: &HybridSystemDefinition,
    tag: PhaseTag,
    branches: &[BranchSign],
    x: &[f64],
    y: &[f64],
    p_full: &[f64],
) -> Result<DMatrix<f64>> {
    let jac = def.jac();
    let fx = jac.f_x(tag, x, y, p_full);
    if def.m() == 0 {
        return Ok(fx);
    }
    let fy = jac.f_y(tag, x, y, p_full);
    let gx = jac.g_x(tag, branches, x, y, p_full);
    let gy = jac.g_y(tag, branches, x, y, p_full);
    let z = gy
        .lu()
        .solve(&gx)
        .ok_or_else(|| Error::Numerical("g_y singular in reduced Jacobian".into()))?;
    Ok(fx - fy * z)
}

/// Finds the stable equilibrium point of the phase identified by `tag`.
/// Errors with `EquilibriumUnstable` when any linearization eigenvalue has a
/// non-negative real part.
pub fn find_equilibrium(
    def: &HybridSystemDefinition,
    tag: PhaseTag,
    p_full: &[f64],
    x_guess: &[f64],
    y_guess: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let alg = AlgebraicConfig::default();
    let (x, y) = equilibrium_newton(def, tag, p_full, x_guess, y_guess, &alg)?;
    let branches = def.select_branches(tag, &x, &y, p_full);
    let a = reduced_state_jacobian(def, tag, &branches, &x, &y, p_full)?;
    let eigs = a.complex_eigenvalues();
    let max_re = eigs.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
    if max_re >= 0.0 {
        return Err(Error::EquilibriumUnstable {
            max_real_part: max_re,
        });
    }
    Ok((x, y))
}

/// `d x_eq / d p` over the active parameters, by implicit differentiation of
/// the equilibrium conditions.
pub(crate) fn equilibrium_sensitivity(
    def: &HybridSystemDefinition,
    tag: PhaseTag,
    p_full: &[f64],
    x: &[f64],
    y: &[f64],
    space: &ParameterSpace,
) -> Result<DMatrix<f64>> {
    let n = def.n();
    let m = def.m();
    let jac = def.jac();
    let branches = def.select_branches(tag, x, y, p_full);
    let mut j = DMatrix::zeros(n + m, n + m);
    j.view_mut((0, 0), (n, n))
        .copy_from(&jac.f_x(tag, x, y, p_full));
    let fp = space.active_columns(&jac.f_p(tag, x, y, p_full));
    let mut rhs = DMatrix::zeros(n + m, space.dim());
    rhs.view_mut((0, 0), (n, space.dim())).copy_from(&fp);
    if m > 0 {
        j.view_mut((0, n), (n, m))
            .copy_from(&jac.f_y(tag, x, y, p_full));
        j.view_mut((n, 0), (m, n))
            .copy_from(&jac.g_x(tag, &branches, x, y, p_full));
        j.view_mut((n, n), (m, m))
            .copy_from(&jac.g_y(tag, &branches, x, y, p_full));
        let gp = space.active_columns(&jac.g_p(tag, &branches, x, y, p_full));
        rhs.view_mut((n, 0), (m, space.dim())).copy_from(&gp);
    }
    let sol = j
        .lu()
        .solve(&(-rhs))
        .ok_or_else(|| Error::Numerical("equilibrium Jacobian singular".into()))?;
    Ok(sol.rows(0, n).into_owned())
}

// ---------------------------------------------------------------------------
// Augmented system
// ---------------------------------------------------------------------------

struct AugSystem<'a> {
    def: &'a HybridSystemDefinition,
    space: &'a ParameterSpace,
    p_full: Vec<f64>,
    p_active: Vec<f64>,
    tag: PhaseTag,
    branches: Vec<BranchSign>,
    y: Vec<f64>,
    /// Onset algebraic solution, used as a fallback Newton start when the
    /// warm start fails across a large model change (e.g. fault clearing).
    fallback_y: Vec<f64>,
    mode: SensMode,
    n: usize,
    m: usize,
    p_dim: usize,
    /// `(i, j)` with `j <= i` for second-order columns.
    pairs: Vec<(usize, usize)>,
    alg: AlgebraicConfig,
    /// Directional-difference step scale for the second-order term: small
    /// with analytic Jacobians, larger when the inner Jacobians are finite
    /// differences themselves (their noise is amplified by 1/sigma).
    second_order_sigma: f64,
}

impl<'a> AugSystem<'a> {
    fn new(
        def: &'a HybridSystemDefinition,
        space: &'a ParameterSpace,
        p_active: &[f64],
        mode: SensMode,
        alg: AlgebraicConfig,
    ) -> Self {
        let p_dim = space.dim();
        let pairs = if mode == SensMode::SecondVariational {
            let mut v = Vec::new();
            for i in 0..p_dim {
                for j in 0..=i {
                    v.push((i, j));
                }
            }
            v
        } else {
            Vec::new()
        };
        let j = def.jacobians();
        let analytic = j.f_x.is_some()
            && j.f_p.is_some()
            && (def.m() == 0 || (j.f_y.is_some() && j.g_x.is_some() && j.g_y.is_some() && j.g_p.is_some()));
        Self {
            def,
            space,
            p_full: space.full_vector(p_active),
            p_active: p_active.to_vec(),
            tag: 0,
            branches: Vec::new(),
            y: vec![0.0; def.m()],
            fallback_y: vec![0.0; def.m()],
            mode,
            n: def.n(),
            m: def.m(),
            p_dim,
            pairs,
            alg,
            second_order_sigma: if analytic { 1e-6 } else { 3e-4 },
        }
    }

    fn aug_dim(&self) -> usize {
        match self.mode {
            SensMode::None => self.n,
            SensMode::First => self.n * (1 + self.p_dim),
            SensMode::SecondVariational => self.n * (1 + self.p_dim + self.pairs.len()),
        }
    }

    fn solve_y(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let y = newton_algebraic(
            self.def,
            self.tag,
            &self.branches,
            x,
            &self.p_full,
            &self.y,
            &self.alg,
        )?;
        self.y = y.clone();
        Ok(y)
    }

    /// Reduced Jacobians `A = f_x - f_y g_y^{-1} g_x` (n x n) and
    /// `B = f_p - f_y g_y^{-1} g_p` (n x P, active parameters).
    fn reduced_ab(
        &self,
        x: &[f64],
        y: &[f64],
        p_full: &[f64],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let jac = self.def.jac();
        let fx = jac.f_x(self.tag, x, y, p_full);
        let fp = self
            .space
            .active_columns(&jac.f_p(self.tag, x, y, p_full));
        if self.m == 0 {
            return Ok((fx, fp));
        }
        let fy = jac.f_y(self.tag, x, y, p_full);
        let gx = jac.g_x(self.tag, &self.branches, x, y, p_full);
        let gy = jac.g_y(self.tag, &self.branches, x, y, p_full);
        let gp = self
            .space
            .active_columns(&jac.g_p(self.tag, &self.branches, x, y, p_full));
        let lu = gy.lu();
        let z = lu
            .solve(&gx)
            .ok_or_else(|| Error::Numerical("g_y singular in variational reduction".into()))?;
        let w = lu
            .solve(&gp)
            .ok_or_else(|| Error::Numerical("g_y singular in variational reduction".into()))?;
        Ok((fx - &fy * z, fp - &fy * w))
    }

    /// `d y / d p` over the active parameters at a point with sensitivities
    /// `chi`, eliminated through the active constraint.
    fn dy_dp(&self, x: &[f64], y: &[f64], chi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if self.m == 0 {
            return Ok(DMatrix::zeros(0, self.p_dim));
        }
        let jac = self.def.jac();
        let gx = jac.g_x(self.tag, &self.branches, x, y, &self.p_full);
        let gy = jac.g_y(self.tag, &self.branches, x, y, &self.p_full);
        let gp = self
            .space
            .active_columns(&jac.g_p(self.tag, &self.branches, x, y, &self.p_full));
        let rhs = gx * chi + gp;
        gy.lu()
            .solve(&(-rhs))
            .ok_or_else(|| Error::Numerical("g_y singular in dy/dp".into()))
    }

    fn chi_from_aug(&self, xa: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        let mut chi = DMatrix::zeros(n, self.p_dim);
        for j in 0..self.p_dim {
            for i in 0..n {
                chi[(i, j)] = xa[n + j * n + i];
            }
        }
        chi
    }

    /// Directional second derivative of the reduced dynamics: the inhomogeneous
    /// term of the second-order variational equation for the pair `(i, j)`,
    /// computed by central differencing of `Phi_i(x, p) = A(x,p) v_i + B(x,p) e_i`
    /// along the direction `(v_j, e_j)`.
    fn second_order_term(
        &mut self,
        x: &[f64],
        y: &[f64],
        chi: &DMatrix<f64>,
        _b: &DMatrix<f64>,
        pi: usize,
        pj: usize,
    ) -> Result<DVector<f64>> {
        let v_i = chi.column(pi).into_owned();
        let v_j = chi.column(pj).into_owned();
        let x_scale = inf_norm(x).max(1.0);
        let dir_scale = v_j.amax().max(1.0);
        let sigma = self.second_order_sigma * x_scale / dir_scale;

        let phi = |s: f64, sys: &mut Self| -> Result<DVector<f64>> {
            let xp: Vec<f64> = x.iter().zip(v_j.iter()).map(|(a, v)| a + s * v).collect();
            let mut pa = sys.p_active.clone();
            pa[pj] += s;
            let pf = sys.space.full_vector(&pa);
            let yp = newton_algebraic(sys.def, sys.tag, &sys.branches, &xp, &pf, y, &sys.alg)?;
            let (a, b) = sys.reduced_ab(&xp, &yp, &pf)?;
            Ok(&a * &v_i + b.column(pi).into_owned())
        };
        let hi = phi(sigma, self)?;
        let lo = phi(-sigma, self)?;
        Ok((hi - lo) / (2.0 * sigma))
    }
}

impl OdeSystem for AugSystem<'_> {
    /// Full augmented right-hand side: the reduced dynamics plus the first-
    /// (and optionally second-) order variational equations.
    fn rhs(&mut self, _t: f64, xa: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        let n = self.n;
        let x: Vec<f64> = xa.as_slice()[..n].to_vec();
        let y = self.solve_y(&x)?;
        let f = self.def.eval_f(self.tag, &x, &y, &self.p_full);
        for i in 0..n {
            out[i] = f[i];
        }
        if self.mode == SensMode::None {
            return Ok(());
        }
        let p_full = self.p_full.clone();
        let (a, b) = self.reduced_ab(&x, &y, &p_full)?;
        let chi = self.chi_from_aug(xa);
        let chi_dot = &a * &chi + &b;
        for j in 0..self.p_dim {
            for i in 0..n {
                out[n + j * n + i] = chi_dot[(i, j)];
            }
        }
        if self.mode == SensMode::SecondVariational {
            let base = n * (1 + self.p_dim);
            let pairs = self.pairs.clone();
            for (idx, (pi, pj)) in pairs.iter().enumerate() {
                let w = self.second_order_term(&x, &y, &chi, &b, *pi, *pj)?;
                let col = xa.rows(base + idx * n, n);
                let d = &a * col + w;
                for i in 0..n {
                    out[base + idx * n + i] = d[i];
                }
            }
        }
        Ok(())
    }

    fn block_jacobian(&mut self, _t: f64, xa: &DVector<f64>) -> Result<DMatrix<f64>> {
        let x: Vec<f64> = xa.as_slice()[..self.n].to_vec();
        let y = self.solve_y(&x)?;
        let p_full = self.p_full.clone();
        let (a, _) = self.reduced_ab(&x, &y, &p_full)?;
        Ok(a)
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

struct PhaseSpan {
    tag: PhaseTag,
    label: String,
    t_end: f64,
    /// d(t_end)/dp over the active parameters.
    tau_p: Vec<f64>,
}

fn phase_spans(
    schedule: &PhaseSchedule,
    space: &ParameterSpace,
    p_full: &[f64],
    horizon: f64,
) -> Result<Vec<PhaseSpan>> {
    let mut spans = Vec::new();
    let mut t = 0.0;
    let mut tau = vec![0.0; space.dim()];
    for ph in schedule.timed_phases() {
        match &ph.duration {
            PhaseDuration::Equilibrium => unreachable!("equilibrium phase is not timed"),
            PhaseDuration::Fixed(d) => t += d,
            PhaseDuration::FromParameter(fi) => {
                let d = p_full[*fi];
                if d <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "phase `{}` duration parameter is non-positive ({d:.3e})",
                        ph.label
                    )));
                }
                t += d;
                if let Some(j) = (0..space.dim()).find(|&j| space.full_index(j) == *fi) {
                    tau[j] += 1.0;
                }
            }
            PhaseDuration::ToHorizon => t = horizon,
        }
        let clamped = t.min(horizon);
        spans.push(PhaseSpan {
            tag: ph.tag,
            label: ph.label.clone(),
            t_end: clamped,
            tau_p: tau.clone(),
        });
        if clamped >= horizon {
            break;
        }
    }
    if spans.is_empty() {
        return Err(Error::InvalidConfig("schedule has no timed phases".into()));
    }
    Ok(spans)
}

/// Shared driver: integrates the (possibly sensitivity-augmented) system
/// through all phases with event localization and produces grid samples plus
/// the dense solution.
pub(crate) fn run_simulation(
    def: &HybridSystemDefinition,
    schedule: &PhaseSchedule,
    space: &ParameterSpace,
    p_active: &[f64],
    cfg: &IntegrationConfig,
    mode: SensMode,
) -> Result<RawSim> {
    cfg.validate()?;
    if p_active.len() != space.dim() {
        return Err(Error::InvalidConfig(format!(
            "parameter vector has dimension {}, space expects {}",
            p_active.len(),
            space.dim()
        )));
    }
    let n = def.n();
    let m = def.m();
    let p_dim = space.dim();
    let p_full = space.full_vector(p_active);
    let spans = phase_spans(schedule, space, &p_full, cfg.horizon)?;
    let alg = cfg.algebraic.clone();

    // Onset state and initial sensitivity.
    let sens = mode != SensMode::None;
    let (x_onset, y_onset_guess, chi0): (Vec<f64>, Vec<f64>, DMatrix<f64>) =
        match def.initial_state() {
            InitialState::PreEquilibrium { x_guess, y_guess } => {
                let pre = schedule.pre_phase().ok_or_else(|| {
                    Error::InvalidConfig(
                        "pre-equilibrium initial state requires an equilibrium phase".into(),
                    )
                })?;
                let (xe, ye) = equilibrium_newton(def, pre.tag, &p_full, x_guess, y_guess, &alg)?;
                let chi0 = if sens {
                    equilibrium_sensitivity(def, pre.tag, &p_full, &xe, &ye, space)?
                } else {
                    DMatrix::zeros(n, p_dim)
                };
                (xe, ye, chi0)
            }
            InitialState::Given { x0, dx0_dp } => {
                let x = x0(&p_full);
                if x.len() != n {
                    return Err(Error::InvalidConfig(format!(
                        "initial map returned dimension {}, expected {n}",
                        x.len()
                    )));
                }
                let chi0 = if sens {
                    match dx0_dp {
                        Some(j) => space.active_columns(&j(&p_full)),
                        None => {
                            let mut c = DMatrix::zeros(n, p_dim);
                            for j in 0..p_dim {
                                let h = 1e-7 * p_active[j].abs().max(1.0);
                                let mut pa = p_active.to_vec();
                                pa[j] += h;
                                let hi = x0(&space.full_vector(&pa));
                                pa[j] = p_active[j] - h;
                                let lo = x0(&space.full_vector(&pa));
                                for i in 0..n {
                                    c[(i, j)] = (hi[i] - lo[i]) / (2.0 * h);
                                }
                            }
                            c
                        }
                    }
                } else {
                    DMatrix::zeros(n, p_dim)
                };
                (x, vec![0.0; m], chi0)
            }
        };

    // Recovery target: equilibrium of the final phase, warm-started from the
    // onset state. Models without one still integrate; recovery metrics
    // require it and report the failure themselves. Stability is not
    // re-checked here; classification against an unstable point simply never
    // succeeds.
    let last_tag = schedule.last_tag();
    let x_sep = equilibrium_newton(def, last_tag, &p_full, &x_onset, &y_onset_guess, &alg)
        .ok()
        .map(|(x, _y)| x);

    let mut sys = AugSystem::new(def, space, p_active, mode, alg.clone());
    sys.tag = spans[0].tag;
    let (y0, branches0) = solve_algebraic(def, sys.tag, &x_onset, &p_full, &y_onset_guess, &alg)?;
    sys.branches = branches0;
    sys.y = y0.clone();
    // The pre-disturbance solution (not the disturbed onset solve) anchors
    // re-solves at phase boundaries to the healthy operating branch.
    sys.fallback_y = y_onset_guess.clone();

    let aug_dim = sys.aug_dim();
    let mut xa = DVector::zeros(aug_dim);
    for i in 0..n {
        xa[i] = x_onset[i];
    }
    if sens {
        for j in 0..p_dim {
            for i in 0..n {
                xa[n + j * n + i] = chi0[(i, j)];
            }
        }
    }
    if mode == SensMode::SecondVariational {
        // chi2(0) = d^2 x_onset / dp^2, by central differences of the onset
        // sensitivity map (equilibrium solves only, no simulation).
        let chi2_0 = initial_second_order(def, schedule, space, p_active, &alg)?;
        let base = n * (1 + p_dim);
        for (idx, (i, j)) in sys.pairs.iter().enumerate() {
            for k in 0..n {
                xa[base + idx * n + k] = chi2_0[(k * p_dim + i) * p_dim + j];
            }
        }
    }

    // Output grid.
    let n_out = ((cfg.horizon / cfg.output_dt).round() as usize).max(1);
    let grid: Vec<f64> = (0..=n_out)
        .map(|k| cfg.horizon * k as f64 / n_out as f64)
        .collect();

    let mut out = RawSim {
        n,
        m,
        p_dim,
        times: Vec::with_capacity(grid.len()),
        states: Vec::with_capacity(grid.len()),
        algebraic: Vec::with_capacity(grid.len()),
        chi: Vec::new(),
        chi2: Vec::new(),
        events: Vec::new(),
        jumps: Vec::new(),
        termination: Termination::Completed,
        x_sep,
        dense: DenseSolution::default(),
        min_indicator_margin: f64::INFINITY,
    };

    // Sample t = 0.
    push_sample(&mut out, def, &mut sys, grid[0], &xa, mode)?;
    let mut next_grid = 1usize;

    let mut t = 0.0;
    let mut armed = vec![true; def.constraints().len()];
    let max_step_cap = cfg.max_step.unwrap_or(f64::INFINITY);
    let fixed_h = cfg.max_step.unwrap_or(1e-2);
    let mut h = match cfg.method {
        Method::Rk45 => (cfg.horizon / 1000.0).min(max_step_cap).clamp(1e-9, 1e-3),
        Method::Trapezoidal => fixed_h,
    };
    let mut k1 = DVector::zeros(aug_dim);
    sys.rhs(t, &xa, &mut k1)?;

    'phases: for (si, span) in spans.iter().enumerate() {
        if si > 0 {
            // Phase boundary at the current t: model change at a known time.
            phase_boundary_transition(
                def,
                &mut sys,
                &spans[si - 1],
                span,
                t,
                &mut xa,
                mode,
                &mut out,
            )?;
            armed.iter_mut().for_each(|a| *a = true);
            sys.rhs(t, &xa, &mut k1)?;
            if cfg.method == Method::Rk45 {
                h = h.clamp(1e-9, 1e-3);
            }
        }

        while t < span.t_end - 1e-14 * (1.0 + span.t_end.abs()) {
            let h_try = match cfg.method {
                Method::Rk45 => h.min(span.t_end - t).min(max_step_cap),
                Method::Trapezoidal => fixed_h.min(span.t_end - t),
            };
            if h_try < 1e-14 * (1.0 + t.abs()) {
                return Err(Error::Numerical(format!(
                    "step size underflow at t = {t:.9}"
                )));
            }

            let step = match cfg.method {
                Method::Rk45 => {
                    stepper::dopri5_step(&mut sys, t, &xa, &k1, h_try, cfg.abs_tol, cfg.rel_tol)
                }
                Method::Trapezoidal => stepper::trapezoidal_step(
                    &mut sys,
                    n,
                    t,
                    &xa,
                    &k1,
                    h_try,
                    (cfg.abs_tol * 1e-2).max(1e-14),
                ),
            };

            let step = match step {
                Ok(s) => s,
                Err(e) => {
                    if std::env::var("RECOBOUND_DEBUG").is_ok() {
                        eprintln!("DBG step err at t={t:.6} h={h_try:.3e}: {e}");
                    }
                    if cfg.method == Method::Rk45 && matches!(e, Error::AlgebraicSolveFailure { .. })
                    {
                        // A trial stage left the algebraic solution's basin;
                        // retreat the step.
                        h *= 0.25;
                        if h < 1e-14 * (1.0 + t.abs()) {
                            return Err(e);
                        }
                        continue;
                    }
                    return Err(e);
                }
            };

            if cfg.method == Method::Rk45 && step.err > 1.0 {
                if std::env::var("RECOBOUND_DEBUG").is_ok() {
                    eprintln!("DBG reject at t={t:.6} h={h_try:.3e} err={:.3e}", step.err);
                    eprintln!("DBG   xa = {:?}", xa.as_slice());
                    eprintln!("DBG   k1 = {:?}", k1.as_slice());
                    eprintln!("DBG   y  = {:?} branches = {:?}", sys.y, sys.branches);
                    eprintln!("DBG   x1 = {:?}", step.x1.as_slice());
                }
                let fac = (0.9 * step.err.powf(-0.2)).max(0.2);
                h = (h_try * fac).max(1e-15);
                continue;
            }

            // Accepted; scan for indicator events on the dense output.
            let t1 = t + h_try;
            let scan = scan_for_event(
                def, &mut sys, &step.interpolant, t, h_try, t1, &armed, cfg,
            )?;

            match scan {
                Some((tau, ci)) => {
                    let theta = ((tau - t) / h_try).clamp(0.0, 1.0);
                    let xa_tau = step.interpolant.eval(theta);
                    commit_segment(
                        &mut out,
                        def,
                        &mut sys,
                        &grid,
                        &mut next_grid,
                        t,
                        tau,
                        h_try,
                        step.interpolant.clone(),
                        mode,
                    )?;
                    t = tau;
                    xa = xa_tau;
                    handle_indicator_event(def, &mut sys, ci, t, &mut xa, mode, &mut out)?;
                    armed[ci] = false;
                    if out.events.len() > cfg.max_events {
                        return Err(Error::EventChattering {
                            max_events: cfg.max_events,
                            time: t,
                        });
                    }
                    sys.rhs(t, &xa, &mut k1)?;
                    continue;
                }
                None => {
                    commit_segment(
                        &mut out,
                        def,
                        &mut sys,
                        &grid,
                        &mut next_grid,
                        t,
                        t1,
                        h_try,
                        step.interpolant.clone(),
                        mode,
                    )?;
                    // Re-arm indicators once they move away from their surface.
                    rearm(def, &sys, &step.x1, &mut armed);
                    t = t1;
                    xa = step.x1;
                    k1 = step.f1;
                    if cfg.method == Method::Rk45 {
                        let fac = if step.err <= f64::EPSILON {
                            5.0
                        } else {
                            (0.9 * step.err.powf(-0.2)).clamp(0.2, 5.0)
                        };
                        h = h_try * fac;
                    }
                    let xn = inf_norm(&xa.as_slice()[..n]);
                    if !xn.is_finite() || xn > cfg.divergence_threshold {
                        out.termination = Termination::Diverged { time: t, norm: xn };
                        break 'phases;
                    }
                }
            }
        }
        t = span.t_end;
    }

    Ok(out)
}

/// Shifted event function for constraint `ci`: crosses zero when the
/// indicator leaves the active branch's half-space plus hysteresis band.
fn event_fn(
    def: &HybridSystemDefinition,
    sys: &mut AugSystem,
    ci: usize,
    x: &[f64],
) -> Result<f64> {
    let y = sys.solve_y(x)?;
    let s = def.eval_indicator(sys.tag, ci, x, &y, &sys.p_full);
    let band = def.constraints()[ci].hysteresis_band();
    Ok(match sys.branches[ci] {
        BranchSign::Plus => s + band,
        BranchSign::Minus => s - band,
    })
}

fn crossed(side: BranchSign, value: f64) -> bool {
    match side {
        BranchSign::Plus => value < 0.0,
        BranchSign::Minus => value > 0.0,
    }
}

/// Returns the earliest indicator crossing inside `(t0, t1]`, if any.
#[allow(clippy::too_many_arguments)]
fn scan_for_event(
    def: &HybridSystemDefinition,
    sys: &mut AugSystem,
    interp: &Interpolant,
    t0: f64,
    h: f64,
    t1: f64,
    armed: &[bool],
    cfg: &IntegrationConfig,
) -> Result<Option<(f64, usize)>> {
    if def.constraints().is_empty() {
        return Ok(None);
    }
    let n = def.n();
    let mut best: Option<(f64, usize)> = None;
    for ci in 0..def.constraints().len() {
        if !armed[ci] {
            continue;
        }
        let side = sys.branches[ci];
        // Bracket on endpoint + interior dense samples.
        let mut prev_theta = 0.0;
        let xa0 = interp.eval(0.0);
        let mut prev_val = event_fn(def, sys, ci, &xa0.as_slice()[..n])?;
        let mut bracket = None;
        for k in 1..=EVENT_SCAN_POINTS {
            let theta = k as f64 / EVENT_SCAN_POINTS as f64;
            let xs = interp.eval(theta);
            let val = event_fn(def, sys, ci, &xs.as_slice()[..n])?;
            if crossed(side, val) && !crossed(side, prev_val) {
                bracket = Some((prev_theta, theta));
                break;
            }
            prev_theta = theta;
            prev_val = val;
        }
        if let Some((mut lo, mut hi)) = bracket {
            // Bisection to the event time tolerance.
            while (hi - lo) * h > cfg.event_time_tolerance {
                let mid = 0.5 * (lo + hi);
                let xs = interp.eval(mid);
                let val = event_fn(def, sys, ci, &xs.as_slice()[..n])?;
                if crossed(side, val) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let tau = (t0 + hi * h).min(t1);
            match best {
                Some((tb, cb)) if tau > tb || (tau == tb && ci > cb) => {}
                _ => best = Some((tau, ci)),
            }
        }
    }
    Ok(best)
}

fn rearm(def: &HybridSystemDefinition, sys: &AugSystem, xa: &DVector<f64>, armed: &mut [bool]) {
    let n = def.n();
    let x = &xa.as_slice()[..n];
    for (ci, arm) in armed.iter_mut().enumerate() {
        if *arm {
            continue;
        }
        let s = def.eval_indicator(sys.tag, ci, x, &sys.y, &sys.p_full);
        let band = def.constraints()[ci].hysteresis_band();
        let shifted = match sys.branches[ci] {
            BranchSign::Plus => s + band,
            BranchSign::Minus => s - band,
        };
        // The indicator has moved to the active branch's side by a margin.
        if !crossed(sys.branches[ci], shifted) && shifted.abs() > 1e-9 * (1.0 + s.abs()) {
            *arm = true;
        }
    }
}

/// Applies the first-order jump rule `chi+ = chi- + (f- - f+) tau_p` with
/// `tau_p = -(grad_x s . chi + grad_y s . dy/dp + ds/dp) / (grad_x s . f- + grad_y s . ydot-)`.
fn handle_indicator_event(
    def: &HybridSystemDefinition,
    sys: &mut AugSystem,
    ci: usize,
    tau: f64,
    xa: &mut DVector<f64>,
    mode: SensMode,
    out: &mut RawSim,
) -> Result<()> {
    let n = def.n();
    let p_dim = sys.p_dim;
    let x: Vec<f64> = xa.as_slice()[..n].to_vec();
    let y_pre = sys.solve_y(&x)?;
    let f_pre = def.eval_f(sys.tag, &x, &y_pre, &sys.p_full);
    let s_val = def.eval_indicator(sys.tag, ci, &x, &y_pre, &sys.p_full);

    let jac = def.jac();
    let sx = jac.s_x(sys.tag, ci, &x, &y_pre, &sys.p_full);
    let sy = jac.s_y(sys.tag, ci, &x, &y_pre, &sys.p_full);
    let sp_full = jac.s_p(sys.tag, ci, &x, &y_pre, &sys.p_full);
    let sp: Vec<f64> = (0..p_dim).map(|j| sp_full[sys.space.full_index(j)]).collect();

    // ydot- = -g_y^{-1} g_x f-.
    let ydot: Vec<f64> = if sys.m > 0 {
        let gx = jac.g_x(sys.tag, &sys.branches, &x, &y_pre, &sys.p_full);
        let gy = jac.g_y(sys.tag, &sys.branches, &x, &y_pre, &sys.p_full);
        let fv = DVector::from_column_slice(&f_pre);
        let rhs = gx * fv;
        let sol = gy
            .lu()
            .solve(&(-rhs))
            .ok_or_else(|| Error::Numerical("g_y singular at event".into()))?;
        sol.as_slice().to_vec()
    } else {
        Vec::new()
    };

    let mut denom: f64 = sx.iter().zip(&f_pre).map(|(a, b)| a * b).sum();
    denom += sy.iter().zip(&ydot).map(|(a, b)| a * b).sum::<f64>();
    let grazing = denom.abs() < GRAZING_DENOMINATOR;
    if grazing && mode != SensMode::None {
        return Err(Error::SensitivityJumpSingular {
            time: tau,
            indicator: ci,
            denominator: denom,
        });
    }

    // Event-time sensitivity over the active parameters.
    let tau_p: Vec<f64> = if mode != SensMode::None {
        let chi = sys.chi_from_aug(xa);
        let dydp = sys.dy_dp(&x, &y_pre, &chi)?;
        (0..p_dim)
            .map(|j| {
                let mut num = 0.0;
                for i in 0..n {
                    num += sx[i] * chi[(i, j)];
                }
                for (r, syr) in sy.iter().enumerate() {
                    num += syr * dydp[(r, j)];
                }
                num += sp[j];
                -num / denom
            })
            .collect()
    } else {
        vec![0.0; p_dim]
    };

    // Flip the branch, re-solve y, evaluate the post-event vector field.
    let from = sys.branches[ci];
    let to = match from {
        BranchSign::Plus => BranchSign::Minus,
        BranchSign::Minus => BranchSign::Plus,
    };
    sys.branches[ci] = to;
    let y_post = sys.solve_y(&x)?;
    let f_post = def.eval_f(sys.tag, &x, &y_post, &sys.p_full);

    if mode != SensMode::None && !grazing {
        for j in 0..p_dim {
            for i in 0..n {
                xa[n + j * n + i] += (f_pre[i] - f_post[i]) * tau_p[j];
            }
        }
        // Second-order columns keep their values: the variational backend
        // refuses trajectories with events, so no second-order jump is applied.
        out.jumps.push(JumpAudit {
            time: tau,
            description: format!("indicator {ci} {from:?} -> {to:?}"),
            event_time_sensitivity: tau_p.clone(),
            vector_field_jump: f_pre.iter().zip(&f_post).map(|(a, b)| a - b).collect(),
        });
    }

    out.events.push(EventRecord {
        time: tau,
        kind: EventKind::Indicator {
            index: ci,
            from,
            to,
        },
        x_pre: x.clone(),
        y_pre,
        x_post: x,
        y_post,
        f_pre,
        f_post,
        indicator_value: Some(s_val),
        indicator_gradient: Some(IndicatorGradient {
            wrt_state: sx,
            wrt_algebraic: sy,
            wrt_parameters: sp,
            denominator: denom,
        }),
        grazing,
    });
    Ok(())
}

/// Model change at a known boundary time: re-solves the algebraic states under
/// the new phase and applies the jump rule with the schedule's `d tau / dp`.
#[allow(clippy::too_many_arguments)]
fn phase_boundary_transition(
    def: &HybridSystemDefinition,
    sys: &mut AugSystem,
    prev: &PhaseSpan,
    next: &PhaseSpan,
    tau: f64,
    xa: &mut DVector<f64>,
    mode: SensMode,
    out: &mut RawSim,
) -> Result<()> {
    let n = def.n();
    let x: Vec<f64> = xa.as_slice()[..n].to_vec();
    let y_pre = sys.solve_y(&x)?;
    let f_pre = def.eval_f(sys.tag, &x, &y_pre, &sys.p_full);

    sys.tag = next.tag;
    // A phase boundary can move the algebraic solution far from the previous
    // phase's branch (fault clearing restores collapsed voltages), and a warm
    // start from the old solution can land on a spurious root. The onset
    // solution lies on the operating branch of the undisturbed network, so it
    // is the reliable Newton start here; the warm start is the fallback.
    sys.y = sys.fallback_y.clone();
    sys.branches = def.select_branches(sys.tag, &x, &sys.fallback_y.clone(), &sys.p_full);
    let y_post = match sys.solve_y(&x) {
        Ok(y) => y,
        Err(Error::AlgebraicSolveFailure { .. }) => {
            sys.y = y_pre.clone();
            sys.branches = def.select_branches(sys.tag, &x, &y_pre, &sys.p_full);
            sys.solve_y(&x)?
        }
        Err(e) => return Err(e),
    };
    let f_post = def.eval_f(sys.tag, &x, &y_post, &sys.p_full);

    if mode != SensMode::None {
        let tau_p = &prev.tau_p;
        if tau_p.iter().any(|v| *v != 0.0) {
            for j in 0..sys.p_dim {
                for i in 0..n {
                    xa[n + j * n + i] += (f_pre[i] - f_post[i]) * tau_p[j];
                }
            }
            out.jumps.push(JumpAudit {
                time: tau,
                description: format!("phase boundary {} -> {}", prev.label, next.label),
                event_time_sensitivity: tau_p.clone(),
                vector_field_jump: f_pre.iter().zip(&f_post).map(|(a, b)| a - b).collect(),
            });
        }
    }

    out.events.push(EventRecord {
        time: tau,
        kind: EventKind::PhaseBoundary {
            from: prev.label.clone(),
            to: next.label.clone(),
        },
        x_pre: x.clone(),
        y_pre,
        x_post: x,
        y_post,
        f_pre,
        f_post,
        indicator_value: None,
        indicator_gradient: None,
        grazing: false,
    });
    Ok(())
}

/// Stores the dense segment and emits any output-grid samples it covers.
#[allow(clippy::too_many_arguments)]
fn commit_segment(
    out: &mut RawSim,
    def: &HybridSystemDefinition,
    sys: &mut AugSystem,
    grid: &[f64],
    next_grid: &mut usize,
    t0: f64,
    t1: f64,
    h: f64,
    interp: Interpolant,
    mode: SensMode,
) -> Result<()> {
    out.dense.segments.push(Segment { t0, t1, h, interp });
    while *next_grid < grid.len() && grid[*next_grid] <= t1 + 1e-12 {
        let tg = grid[*next_grid];
        let seg = out.dense.segments.last().unwrap();
        let theta = if seg.h > 0.0 {
            ((tg - seg.t0) / seg.h).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let xa_g = seg.interp.eval(theta);
        push_sample(out, def, sys, tg, &xa_g, mode)?;
        *next_grid += 1;
    }
    Ok(())
}

fn push_sample(
    out: &mut RawSim,
    def: &HybridSystemDefinition,
    sys: &mut AugSystem,
    t: f64,
    xa: &DVector<f64>,
    mode: SensMode,
) -> Result<()> {
    let n = def.n();
    let x: Vec<f64> = xa.as_slice()[..n].to_vec();
    let y = sys.solve_y(&x)?;
    for ci in 0..def.constraints().len() {
        let s = def.eval_indicator(sys.tag, ci, &x, &y, &sys.p_full);
        out.min_indicator_margin = out.min_indicator_margin.min(s.abs());
    }
    out.times.push(t);
    out.states.push(x);
    out.algebraic.push(y);
    if mode != SensMode::None {
        out.chi.push(sys.chi_from_aug(xa));
    }
    if mode == SensMode::SecondVariational {
        let p = sys.p_dim;
        let base = n * (1 + p);
        let mut flat = vec![0.0; n * p * p];
        for (idx, (i, j)) in sys.pairs.iter().enumerate() {
            for k in 0..n {
                let v = xa[base + idx * n + k];
                flat[(k * p + i) * p + j] = v;
                flat[(k * p + j) * p + i] = v;
            }
        }
        out.chi2.push(flat);
    }
    Ok(())
}

/// Onset-state sensitivity `d x_onset / d p` for one active parameter vector,
/// shared by the second-order initialization below.
fn onset_sensitivity(
    def: &HybridSystemDefinition,
    schedule: &PhaseSchedule,
    space: &ParameterSpace,
    p_active: &[f64],
    alg: &AlgebraicConfig,
) -> Result<DMatrix<f64>> {
    let n = def.n();
    let p_full = space.full_vector(p_active);
    match def.initial_state() {
        InitialState::PreEquilibrium { x_guess, y_guess } => {
            let pre = schedule.pre_phase().ok_or_else(|| {
                Error::InvalidConfig(
                    "pre-equilibrium initial state requires an equilibrium phase".into(),
                )
            })?;
            let (xe, ye) = equilibrium_newton(def, pre.tag, &p_full, x_guess, y_guess, alg)?;
            equilibrium_sensitivity(def, pre.tag, &p_full, &xe, &ye, space)
        }
        InitialState::Given { x0, dx0_dp } => match dx0_dp {
            Some(j) => Ok(space.active_columns(&j(&p_full))),
            None => {
                let mut c = DMatrix::zeros(n, space.dim());
                for j in 0..space.dim() {
                    let h = 1e-7 * p_active[j].abs().max(1.0);
                    let mut pa = p_active.to_vec();
                    pa[j] += h;
                    let hi = x0(&space.full_vector(&pa));
                    pa[j] = p_active[j] - h;
                    let lo = x0(&space.full_vector(&pa));
                    for i in 0..n {
                        c[(i, j)] = (hi[i] - lo[i]) / (2.0 * h);
                    }
                }
                Ok(c)
            }
        },
    }
}

/// `d^2 x_onset / dp^2`, flattened `(state, i, j)` row-major, by central
/// differences of the onset sensitivity.
fn initial_second_order(
    def: &HybridSystemDefinition,
    schedule: &PhaseSchedule,
    space: &ParameterSpace,
    p_active: &[f64],
    alg: &AlgebraicConfig,
) -> Result<Vec<f64>> {
    let n = def.n();
    let p_dim = space.dim();
    let mut out = vec![0.0; n * p_dim * p_dim];
    for j in 0..p_dim {
        let h = 1e-5 * p_active[j].abs().max(1.0);
        let mut pa = p_active.to_vec();
        pa[j] += h;
        let hi = onset_sensitivity(def, schedule, space, &pa, alg)?;
        pa[j] = p_active[j] - h;
        let lo = onset_sensitivity(def, schedule, space, &pa, alg)?;
        for k in 0..n {
            for i in 0..p_dim {
                out[(k * p_dim + i) * p_dim + j] = (hi[(k, i)] - lo[(k, i)]) / (2.0 * h);
            }
        }
    }
    // Symmetrize: the two difference orders agree to truncation error.
    for k in 0..n {
        for i in 0..p_dim {
            for j in 0..i {
                let a = out[(k * p_dim + i) * p_dim + j];
                let b = out[(k * p_dim + j) * p_dim + i];
                let avg = 0.5 * (a + b);
                out[(k * p_dim + i) * p_dim + j] = avg;
                out[(k * p_dim + j) * p_dim + i] = avg;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Public integration entry point
// ---------------------------------------------------------------------------

/// Integrates the switched DAE through the disturbance schedule. A diverged
/// run is reported as `Error::IntegrationDiverged` carrying the partial
/// trajectory (the standard non-recovery witness).
pub fn integrate(
    def: &HybridSystemDefinition,
    schedule: &PhaseSchedule,
    space: &ParameterSpace,
    p_active: &[f64],
    cfg: &IntegrationConfig,
) -> Result<StateTrajectory> {
    let raw = run_simulation(def, schedule, space, p_active, cfg, SensMode::None)?;
    match raw.termination.clone() {
        Termination::Completed => Ok(raw.into_trajectory()),
        Termination::Diverged { time, norm } => Err(Error::IntegrationDiverged {
            time,
            norm,
            trajectory: Box::new(raw.into_trajectory()),
        }),
    }
}

/// Serializes a trajectory (grid plus events) to a JSON value.
pub fn trajectory_to_json(traj: &StateTrajectory) -> serde_json::Value {
    serde_json::json!({
        "n": traj.n,
        "m": traj.m,
        "termination": traj.termination,
        "x_sep": traj.x_sep,
        "times": traj.times,
        "states": traj.states,
        "algebraic": traj.algebraic,
        "events": traj.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid_model::{InitialState, Phase, PhaseDuration, PhaseSchedule, PHASE_POST};
    use std::sync::Arc;

    fn decay_model() -> (HybridSystemDefinition, PhaseSchedule, ParameterSpace) {
        let def = HybridSystemDefinition::builder(1, 0)
            .dynamics(Arc::new(|_tag, x: &[f64], _y: &[f64], _p: &[f64]| {
                vec![-x[0]]
            }))
            .initial_state(InitialState::Given {
                x0: Arc::new(|_p: &[f64]| vec![1.0]),
                dx0_dp: None,
            })
            .build()
            .unwrap();
        let schedule = PhaseSchedule::new(vec![Phase::new(
            PHASE_POST,
            "post",
            PhaseDuration::ToHorizon,
        )])
        .unwrap();
        let space = ParameterSpace::full(vec!["lambda".into()], vec![1.0]).unwrap();
        (def, schedule, space)
    }

    #[test]
    fn exponential_decay_endpoint() {
        let (def, schedule, space) = decay_model();
        let mut cfg = IntegrationConfig::with_horizon(1.0);
        cfg.rel_tol = 1e-10;
        cfg.abs_tol = 1e-12;
        let traj = integrate(&def, &schedule, &space, &[1.0], &cfg).unwrap();
        let x_end = traj.states.last().unwrap()[0];
        assert!(
            (x_end - (-1.0_f64).exp()).abs() < 1e-8,
            "x(1) = {x_end}, expected e^-1"
        );
        assert_eq!(traj.termination, Termination::Completed);
    }

    #[test]
    fn trapezoidal_decay_endpoint() {
        let (def, schedule, space) = decay_model();
        let mut cfg = IntegrationConfig::with_horizon(1.0);
        cfg.method = Method::Trapezoidal;
        cfg.max_step = Some(1e-3);
        let traj = integrate(&def, &schedule, &space, &[1.0], &cfg).unwrap();
        let x_end = traj.states.last().unwrap()[0];
        assert!(
            (x_end - (-1.0_f64).exp()).abs() < 1e-6,
            "x(1) = {x_end}, expected e^-1"
        );
    }

    /// Piecewise-constant growth with a switched algebraic brake: x' = 1 - y,
    /// where y = 0 below x = 0.5 and y = 0.8 above.
    fn braking_model() -> (HybridSystemDefinition, PhaseSchedule, ParameterSpace) {
        let constraint = SwitchedConstraint::new(
            1,
            Arc::new(|_tag, x: &[f64], _y: &[f64], _p: &[f64]| x[0] - 0.5),
            Arc::new(|_tag, _x: &[f64], y: &[f64], _p: &[f64]| vec![y[0] - 0.8]),
            Arc::new(|_tag, _x: &[f64], y: &[f64], _p: &[f64]| vec![y[0]]),
        );
        let def = HybridSystemDefinition::builder(1, 1)
            .dynamics(Arc::new(|_tag, _x: &[f64], y: &[f64], _p: &[f64]| {
                vec![1.0 - y[0]]
            }))
            .constraint(constraint)
            .initial_state(InitialState::Given {
                x0: Arc::new(|_p: &[f64]| vec![0.0]),
                dx0_dp: None,
            })
            .build()
            .unwrap();
        let schedule = PhaseSchedule::new(vec![Phase::new(
            PHASE_POST,
            "post",
            PhaseDuration::ToHorizon,
        )])
        .unwrap();
        let space = ParameterSpace::full(vec!["unused".into()], vec![1.0]).unwrap();
        (def, schedule, space)
    }

    #[test]
    fn switching_event_localized_and_recorded() {
        let (def, schedule, space) = braking_model();
        let cfg = IntegrationConfig::with_horizon(1.0);
        let traj = integrate(&def, &schedule, &space, &[1.0], &cfg).unwrap();
        // No equilibrium exists for this model; the recovery target is absent.
        assert!(traj.x_sep.is_none());
        let ev: Vec<_> = traj
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Indicator { .. }))
            .collect();
        assert_eq!(ev.len(), 1);
        assert!((ev[0].time - 0.5).abs() < 1e-8, "event at {}", ev[0].time);
        // Rate 1 until x = 0.5, rate 0.2 afterwards.
        let x_end = traj.states.last().unwrap()[0];
        assert!((x_end - 0.6).abs() < 1e-7, "x_end = {x_end}");
    }

    use crate::hybrid_model::SwitchedConstraint;

    /// Same brake but with dynamics that admit an equilibrium: x' = -x + 1 - y.
    #[test]
    fn switching_event_with_equilibrium_target() {
        let constraint = SwitchedConstraint::new(
            1,
            Arc::new(|_tag, x: &[f64], _y: &[f64], _p: &[f64]| x[0] - 0.5),
            Arc::new(|_tag, _x: &[f64], y: &[f64], _p: &[f64]| vec![y[0] - 0.8]),
            Arc::new(|_tag, _x: &[f64], y: &[f64], _p: &[f64]| vec![y[0]]),
        );
        let def = HybridSystemDefinition::builder(1, 1)
            .dynamics(Arc::new(|_tag, x: &[f64], y: &[f64], _p: &[f64]| {
                vec![1.0 - y[0] - 0.4 * x[0]]
            }))
            .constraint(constraint)
            .initial_state(InitialState::Given {
                x0: Arc::new(|_p: &[f64]| vec![0.0]),
                dx0_dp: None,
            })
            .build()
            .unwrap();
        let schedule = PhaseSchedule::new(vec![Phase::new(
            PHASE_POST,
            "post",
            PhaseDuration::ToHorizon,
        )])
        .unwrap();
        let space = ParameterSpace::full(vec!["unused".into()], vec![1.0]).unwrap();
        let cfg = IntegrationConfig::with_horizon(4.0);
        let traj = integrate(&def, &schedule, &space, &[1.0], &cfg).unwrap();

        // Below 0.5 the dynamics are x' = 1 - 0.4 x; crossing time solves
        // x(t) = 2.5 (1 - exp(-0.4 t)) = 0.5.
        let t_cross = -(1.0_f64 - 0.2).ln() / 0.4;
        let ev: Vec<_> = traj
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Indicator { .. }))
            .collect();
        assert_eq!(ev.len(), 1, "expected exactly one switching event");
        assert!(
            (ev[0].time - t_cross).abs() < 1e-7,
            "event at {}, expected {t_cross}",
            ev[0].time
        );
        // Indicator is on its surface at the localized time.
        assert!(ev[0].indicator_value.unwrap().abs() < 1e-8);
        // Post-event the brake engages: equilibrium of x' = 0.2 - 0.4 x is 0.5,
        // exactly on the switching surface; x settles near it.
        let x_end = traj.states.last().unwrap()[0];
        assert!((x_end - 0.5).abs() < 0.05, "x_end = {x_end}");
    }
}
