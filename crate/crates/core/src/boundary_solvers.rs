//! Boundary solvers on top of `G(p)` and `DG(p)`: a 1-D Newton boundary
//! search with backtracking, a 2-D predictor-corrector boundary trace, and an
//! N-D sequential quadratic program for the closest boundary point.
//!
//! All three operate through [`BoundaryProblem`], so a synthetic G-oracle can
//! replace simulation when testing solver logic in isolation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hybrid_model::{HybridSystemDefinition, ParameterSpace, PhaseSchedule};
use crate::integrator::IntegrationConfig;
use crate::recovery_metrics::{evaluate_g, GEvaluation, RecoveryConfig, StateMask};
use crate::text::push_float_row;

/// One probe of the boundary function at a parameter value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundarySample {
    pub g: f64,
    pub dg: Option<Vec<f64>>,
    pub recovered: bool,
}

impl From<GEvaluation> for BoundarySample {
    fn from(e: GEvaluation) -> Self {
        Self {
            g: e.g_value,
            dg: e.dg,
            recovered: e.recovered,
        }
    }
}

/// The abstract problem the solvers iterate on.
pub trait BoundaryProblem: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, p: &[f64], want_gradient: bool) -> Result<BoundarySample>;
    /// Advisory box bounds (used by the trace as a stop criterion).
    fn inside_bounds(&self, _p: &[f64]) -> bool {
        true
    }
}

/// Simulation-backed problem: every evaluation is a full time-domain
/// simulation with recovery classification.
pub struct SimulationProblem<'a> {
    pub def: &'a HybridSystemDefinition,
    pub schedule: &'a PhaseSchedule,
    pub space: &'a ParameterSpace,
    pub mask: StateMask,
    pub integration: IntegrationConfig,
    pub recovery: RecoveryConfig,
}

impl<'a> SimulationProblem<'a> {
    pub fn new(
        def: &'a HybridSystemDefinition,
        schedule: &'a PhaseSchedule,
        space: &'a ParameterSpace,
        integration: IntegrationConfig,
        recovery: RecoveryConfig,
    ) -> Self {
        let mask = StateMask::all(def.n());
        Self {
            def,
            schedule,
            space,
            mask,
            integration,
            recovery,
        }
    }

    pub fn with_mask(mut self, mask: StateMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn evaluate_full(&self, p: &[f64], want_gradient: bool) -> Result<GEvaluation> {
        evaluate_g(
            self.def,
            self.schedule,
            self.space,
            p,
            &self.mask,
            &self.integration,
            &self.recovery,
            want_gradient,
        )
    }
}

impl BoundaryProblem for SimulationProblem<'_> {
    fn dim(&self) -> usize {
        self.space.dim()
    }

    fn evaluate(&self, p: &[f64], want_gradient: bool) -> Result<BoundarySample> {
        self.evaluate_full(p, want_gradient).map(Into::into)
    }

    fn inside_bounds(&self, p: &[f64]) -> bool {
        self.space.inside_bounds(p)
    }
}

type GFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type DgFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type RecoveredFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Closed-form G-oracle injected in place of simulation.
pub struct SyntheticProblem {
    dim: usize,
    g: GFn,
    dg: DgFn,
    recovered: RecoveredFn,
}

impl SyntheticProblem {
    pub fn new(dim: usize, g: GFn, dg: DgFn, recovered: RecoveredFn) -> Self {
        Self {
            dim,
            g,
            dg,
            recovered,
        }
    }
}

impl BoundaryProblem for SyntheticProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, p: &[f64], want_gradient: bool) -> Result<BoundarySample> {
        Ok(BoundarySample {
            g: (self.g)(p),
            dg: want_gradient.then(|| (self.dg)(p)),
            recovered: (self.recovered)(p),
        })
    }
}

// ---------------------------------------------------------------------------
// Configuration and result types
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Boundary tolerance on |G|.
    pub epsilon: f64,
    pub max_iterations: usize,
    pub zero_gradient_tolerance: f64,
    /// Hyperplane residual tolerance of the 2-D corrector.
    pub hyperplane_tolerance: f64,
    pub corrector_max_iterations: usize,
    /// KKT residual tolerance of the margin solver.
    pub kkt_tolerance: f64,
    /// Relative step tolerance of the margin solver.
    pub step_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_iterations: 50,
            zero_gradient_tolerance: 1e-14,
            hyperplane_tolerance: 1e-10,
            corrector_max_iterations: 25,
            kkt_tolerance: 1e-6,
            step_tolerance: 1e-8,
        }
    }
}

/// One evaluated iterate in a solver history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Iterate {
    pub p: Vec<f64>,
    pub g: f64,
    pub dg: Option<Vec<f64>>,
    pub recovered: bool,
    /// Backtracking factor used to produce this iterate.
    pub mu: f64,
    /// Set when the evaluation failed (divergence of an unusable trial point);
    /// such iterates are treated exactly like non-recovered ones.
    pub failed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Solver1DResult {
    pub p_star: f64,
    pub g_star: f64,
    pub converged: bool,
    pub iterates: Vec<Iterate>,
    pub newton_steps: usize,
    pub simulations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TracePoint {
    pub p: Vec<f64>,
    pub g: f64,
    pub tangent: Vec<f64>,
    /// Predictor step length used to reach this point.
    pub kappa: f64,
    pub corrector_iterations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryTrace {
    pub points: Vec<TracePoint>,
    pub simulations: usize,
    /// Why the trace stopped: requested length, loop closure, or bounds exit.
    pub stop_reason: String,
}

impl BoundaryTrace {
    /// CSV polyline: index, parameters, G, kappa, corrector iterations.
    pub fn to_csv(&self) -> String {
        let dim = self.points.first().map(|p| p.p.len()).unwrap_or(0);
        let mut out = String::from("index");
        for j in 1..=dim {
            out.push_str(&format!(",p_{j}"));
        }
        out.push_str(",g,kappa,corrector_iterations\n");
        for (k, pt) in self.points.iter().enumerate() {
            let mut row = Vec::with_capacity(dim + 3);
            row.extend_from_slice(&pt.p);
            row.push(pt.g);
            row.push(pt.kappa);
            row.push(pt.corrector_iterations as f64);
            push_float_row(&mut out, &[&k.to_string()], &row);
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginResult {
    pub p0: Vec<f64>,
    pub p_star: Vec<f64>,
    /// The optimization objective `1/2 (p*-p0)^T A (p*-p0)`.
    pub margin: f64,
    /// The corresponding weighted distance `|p*-p0|_A`.
    pub distance: f64,
    pub lambda: f64,
    /// The gradient the solver carried at convergence (evaluated at the last
    /// iterate where differencing was well conditioned).
    pub dg_star: Vec<f64>,
    pub g_star: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub iterates: Vec<Iterate>,
    pub simulations: usize,
}

impl MarginResult {
    /// One-row CSV summary.
    pub fn to_csv(&self) -> String {
        let dim = self.p0.len();
        let mut out = String::new();
        for j in 1..=dim {
            out.push_str(&format!("p0_{j},"));
        }
        for j in 1..=dim {
            out.push_str(&format!("p_star_{j},"));
        }
        out.push_str("margin,distance,lambda,g_star,kkt_residual,iterations\n");
        let mut row = Vec::with_capacity(2 * dim + 6);
        row.extend_from_slice(&self.p0);
        row.extend_from_slice(&self.p_star);
        row.push(self.margin);
        row.push(self.distance);
        row.push(self.lambda);
        row.push(self.g_star);
        row.push(self.kkt_residual);
        row.push(self.iterations as f64);
        push_float_row(&mut out, &[], &row);
        out
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Evaluates a trial point, mapping recoverable numerical failures (divergence
/// at a useless parameter value, vanished equilibrium) onto a non-recovered
/// sample so backtracking can step over them.
fn evaluate_trial(
    problem: &dyn BoundaryProblem,
    p: &[f64],
    want_gradient: bool,
) -> Result<(BoundarySample, bool)> {
    match problem.evaluate(p, want_gradient) {
        Ok(s) => Ok((s, false)),
        Err(e) if e.is_trial_failure() => Ok((
            BoundarySample {
                g: f64::NAN,
                dg: None,
                recovered: false,
            },
            true,
        )),
        Err(e) => Err(e),
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

// ---------------------------------------------------------------------------
// 1-D: Newton-Raphson with backtracking
// ---------------------------------------------------------------------------

/// Finds the recovery boundary point of a one-parameter problem by
/// Newton-Raphson with a backtracking line search: from the latest recovered
/// iterate `p^k`, trial steps `p^k - mu G/DG` with `mu = (1/2)^(i-k-1)` are
/// simulated until one lands inside the recovery region again.
pub fn find_boundary_1d(
    problem: &dyn BoundaryProblem,
    p0: f64,
    cfg: &SolverConfig,
) -> Result<Solver1DResult> {
    if problem.dim() != 1 {
        return Err(Error::InvalidConfig(format!(
            "find_boundary_1d requires a one-parameter problem, got P = {}",
            problem.dim()
        )));
    }
    let mut iterates = Vec::new();
    let mut simulations = 0usize;

    let start = problem.evaluate(&[p0], true)?;
    simulations += 1;
    iterates.push(Iterate {
        p: vec![p0],
        g: start.g,
        dg: start.dg.clone(),
        recovered: start.recovered,
        mu: 1.0,
        failed: false,
    });
    if !start.recovered {
        return Err(Error::StartNotRecovered);
    }

    // Latest recovered iterate (the paper's index k).
    let mut p_k = p0;
    let mut g_k = start.g;
    let mut dg_k = start.dg.clone().and_then(|d| d.first().copied().ok_or(()).ok());
    let mut newton_steps = 0usize;

    loop {
        if g_k.abs() <= cfg.epsilon {
            return Ok(Solver1DResult {
                p_star: p_k,
                g_star: g_k,
                converged: true,
                iterates,
                newton_steps,
                simulations,
            });
        }
        let dg = dg_k.ok_or(Error::ZeroGradient { magnitude: 0.0 })?;
        if dg.abs() < cfg.zero_gradient_tolerance {
            return Err(Error::ZeroGradient {
                magnitude: dg.abs(),
            });
        }

        // Full step first, then halve while iterates leave the recovery region.
        let mut mu = 1.0_f64;
        newton_steps += 1;
        loop {
            if simulations >= cfg.max_iterations {
                return Err(Error::MaxIterations {
                    iterations: simulations,
                });
            }
            let p_i = p_k - mu * g_k / dg;
            let (sample, failed) = evaluate_trial(problem, &[p_i], true)?;
            simulations += 1;
            iterates.push(Iterate {
                p: vec![p_i],
                g: sample.g,
                dg: sample.dg.clone(),
                recovered: sample.recovered,
                mu,
                failed,
            });
            if sample.recovered {
                p_k = p_i;
                g_k = sample.g;
                dg_k = sample.dg.and_then(|d| d.first().copied().ok_or(()).ok());
                break;
            }
            mu *= 0.5;
            if mu < 1e-14 {
                return Err(Error::MaxIterations {
                    iterations: simulations,
                });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 2-D: predictor-corrector continuation
// ---------------------------------------------------------------------------

/// Direction of the first predictor step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceDirection {
    Positive,
    Negative,
}

/// Corrector outcome for one predicted point.
struct CorrectorOutcome {
    p: Vec<f64>,
    g: f64,
    dg: Vec<f64>,
    iterations: usize,
}

/// Traces the recovery boundary curve `G = 0` in a two-parameter space by
/// predictor-corrector continuation with an adaptive step length.
pub fn trace_boundary_2d(
    problem: &dyn BoundaryProblem,
    p_start: &[f64],
    kappa: f64,
    n_points: usize,
    direction: TraceDirection,
    cfg: &SolverConfig,
) -> Result<BoundaryTrace> {
    if problem.dim() != 2 {
        return Err(Error::InvalidConfig(format!(
            "trace_boundary_2d requires a two-parameter problem, got P = {}",
            problem.dim()
        )));
    }
    if kappa <= 0.0 {
        return Err(Error::InvalidConfig("kappa must be strictly positive".into()));
    }
    let mut simulations = 0usize;

    let start = problem.evaluate(p_start, true)?;
    simulations += 1;
    if start.g.abs() > cfg.epsilon {
        return Err(Error::InvalidConfig(format!(
            "trace start must lie on the boundary: |G| = {:.3e} > epsilon",
            start.g.abs()
        )));
    }
    let mut dg = start
        .dg
        .clone()
        .ok_or(Error::TangentUndefined { magnitude: 0.0 })?;

    let mut points = vec![TracePoint {
        p: p_start.to_vec(),
        g: start.g,
        tangent: vec![0.0; 2],
        kappa: 0.0,
        corrector_iterations: 0,
    }];

    let mut prev_tangent: Option<[f64; 2]> = None;
    let mut kappa_cur = kappa;
    let mut success_streak = 0usize;
    let mut stop_reason = format!("reached requested {n_points} points");

    while points.len() <= n_points {
        let p_s = points.last().unwrap().p.clone();
        let g_s = points.last().unwrap().g;
        let _ = g_s;

        // Tangent eta = normalized [b, -a] from DG = [a, b], oriented to
        // continue the direction of travel.
        let norm = (dg[0] * dg[0] + dg[1] * dg[1]).sqrt();
        if norm < cfg.zero_gradient_tolerance {
            return Err(Error::TangentUndefined { magnitude: norm });
        }
        let mut eta = [dg[1] / norm, -dg[0] / norm];
        match prev_tangent {
            Some(prev) => {
                if eta[0] * prev[0] + eta[1] * prev[1] < 0.0 {
                    eta = [-eta[0], -eta[1]];
                }
            }
            None => {
                if direction == TraceDirection::Negative {
                    eta = [-eta[0], -eta[1]];
                }
            }
        }

        // Predictor-corrector with step-halving on failure.
        let outcome = loop {
            match correct_onto_boundary(problem, &p_s, &eta, kappa_cur, &dg, cfg, &mut simulations)
            {
                Ok(o) => break o,
                Err(e) => match e {
                    Error::LineSearchExhausted
                    | Error::MaxIterations { .. }
                    | Error::TangentUndefined { .. } => {
                        kappa_cur *= 0.5;
                        success_streak = 0;
                        if kappa_cur < 1e-4 * kappa {
                            return Err(Error::CorrectorFailed { kappa: kappa_cur });
                        }
                    }
                    other => return Err(other),
                },
            }
        };

        prev_tangent = Some(eta);
        // Guard against a collapsed gradient evaluation at a point sitting
        // numerically on the boundary: the curve's normal direction cannot
        // vanish, so keep the previous gradient for the next tangent.
        let new_norm = (outcome.dg[0].powi(2) + outcome.dg[1].powi(2)).sqrt();
        let old_norm = (dg[0].powi(2) + dg[1].powi(2)).sqrt();
        if new_norm >= 1e-3 * old_norm {
            dg = outcome.dg.clone();
        }
        points.push(TracePoint {
            p: outcome.p.clone(),
            g: outcome.g,
            tangent: eta.to_vec(),
            kappa: kappa_cur,
            corrector_iterations: outcome.iterations,
        });

        // Adaptive step: grow after two consecutive quick correctors, capped
        // at the caller's kappa.
        if outcome.iterations <= 3 {
            success_streak += 1;
            if success_streak >= 2 {
                kappa_cur = (kappa_cur * 1.5).min(kappa);
            }
        } else {
            success_streak = 0;
        }

        if !problem.inside_bounds(&outcome.p) {
            stop_reason = "left the parameter-space box bounds".into();
            break;
        }
        if points.len() > 3 {
            let d = [
                outcome.p[0] - p_start[0],
                outcome.p[1] - p_start[1],
            ];
            if (d[0] * d[0] + d[1] * d[1]).sqrt() < 0.5 * kappa {
                stop_reason = "closed a loop around the boundary".into();
                break;
            }
        }
    }

    Ok(BoundaryTrace {
        points,
        simulations,
        stop_reason,
    })
}

/// One predictor step plus Newton correction onto `F = [G; hyperplane] = 0`,
/// with the paper's recovered-iterate bookkeeping.
fn correct_onto_boundary(
    problem: &dyn BoundaryProblem,
    p_s: &[f64],
    eta: &[f64; 2],
    kappa: f64,
    dg_s: &[f64],
    cfg: &SolverConfig,
    simulations: &mut usize,
) -> Result<CorrectorOutcome> {
    let p_pred = [p_s[0] + kappa * eta[0], p_s[1] + kappa * eta[1]];
    let (pred_sample, _failed) = evaluate_trial(problem, &p_pred, true)?;
    *simulations += 1;

    // Starting point: the predicted point if recovered, otherwise a golden
    // section search along the hyperplane (16) toward the recovery region.
    let (mut p_k, mut g_k, mut dg_k) = if pred_sample.recovered {
        let dg = pred_sample
            .dg
            .clone()
            .ok_or(Error::TangentUndefined { magnitude: 0.0 })?;
        (p_pred.to_vec(), pred_sample.g, dg)
    } else {
        // Line search along the hyperplane (16) for a recovered starting
        // point. DG(p^s) is orthogonal to eta, so it spans the hyperplane;
        // the recovery region lies on one side of the boundary, probed in
        // both signed directions (a synthetic oracle may flip the sign
        // convention of G relative to the simulated metric).
        let norm = (dg_s[0] * dg_s[0] + dg_s[1] * dg_s[1]).sqrt();
        let d = [dg_s[0] / norm, dg_s[1] / norm];
        let eval_u = |u: f64,
                      grad: bool,
                      sims: &mut usize|
         -> Result<(Vec<f64>, BoundarySample)> {
            let p = vec![p_pred[0] + u * d[0], p_pred[1] + u * d[1]];
            let (s, _) = evaluate_trial(problem, &p, grad)?;
            *sims += 1;
            Ok((p, s))
        };
        let mut found = None;
        'search: for scale in [0.25, 0.5, 1.0, 2.0, 4.0] {
            for sign in [1.0, -1.0] {
                let u = sign * scale * kappa;
                let (p, s) = eval_u(u, false, simulations)?;
                if s.recovered {
                    found = Some(u);
                    let _ = (p, s);
                    break 'search;
                }
            }
        }
        let mut u_rec = found.ok_or(Error::LineSearchExhausted)?;
        // Golden-section contraction of [0, u_rec] toward the boundary keeps
        // the corrector start close to the predicted point.
        let golden = 0.5 * (5.0_f64.sqrt() - 1.0);
        let mut lo = 0.0_f64;
        for _ in 0..4 {
            let mid = u_rec + golden * (lo - u_rec);
            let (_p, s) = eval_u(mid, false, simulations)?;
            if s.recovered {
                u_rec = mid;
            } else {
                lo = mid;
            }
        }
        let (p1, s1) = eval_u(u_rec, true, simulations)?;
        if !s1.recovered {
            return Err(Error::LineSearchExhausted);
        }
        let dg = s1
            .dg
            .clone()
            .ok_or(Error::TangentUndefined { magnitude: 0.0 })?;
        (p1, s1.g, dg)
    };

    // Newton-Raphson with backtracking on F(p) = [G(p); (p - p^s).eta - kappa].
    // The G-row targets the eps/2 level set rather than exactly zero:
    // gradients are not recoverable by differencing at points numerically on
    // the boundary, and the converged point's DG seeds the next tangent.
    let hyper = |p: &[f64]| (p[0] - p_s[0]) * eta[0] + (p[1] - p_s[1]) * eta[1] - kappa;
    let mut iterations = 0usize;
    loop {
        let h_k = hyper(&p_k);
        if g_k.abs() <= cfg.epsilon && h_k.abs() <= cfg.hyperplane_tolerance {
            return Ok(CorrectorOutcome {
                p: p_k,
                g: g_k,
                dg: dg_k,
                iterations,
            });
        }
        iterations += 1;
        if iterations > cfg.corrector_max_iterations {
            return Err(Error::MaxIterations {
                iterations: iterations - 1,
            });
        }
        // DF = [DG; eta^T], F = [G - G_target; hyper].
        let g_res = g_k - g_k.signum() * 0.5 * cfg.epsilon;
        let det = dg_k[0] * eta[1] - dg_k[1] * eta[0];
        if det.abs() < cfg.zero_gradient_tolerance {
            return Err(Error::TangentUndefined {
                magnitude: det.abs(),
            });
        }
        let step = [
            (eta[1] * g_res - dg_k[1] * h_k) / det,
            (-eta[0] * g_res + dg_k[0] * h_k) / det,
        ];

        // Full step first, halving while iterates leave the recovery region.
        let mut mu = 1.0_f64;
        loop {
            let p_i = vec![p_k[0] - mu * step[0], p_k[1] - mu * step[1]];
            let (sample, _failed) = evaluate_trial(problem, &p_i, true)?;
            *simulations += 1;
            if sample.recovered {
                p_k = p_i;
                g_k = sample.g;
                dg_k = sample
                    .dg
                    .ok_or(Error::TangentUndefined { magnitude: 0.0 })?;
                break;
            }
            mu *= 0.5;
            if mu < 1e-12 {
                return Err(Error::MaxIterations { iterations });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// N-D: sequential quadratic programming
// ---------------------------------------------------------------------------

/// Closest boundary point to `p0` by SQP on
/// `min 1/2 (p-p0)^T A (p-p0)  s.t.  G(p) = 0`,
/// solving the KKT saddle system with the constraint linearized at each
/// iterate, plus a backtracking line search that keeps iterates recovered.
pub fn safety_margin_nd(
    problem: &dyn BoundaryProblem,
    p0: &[f64],
    weight: Option<&DMatrix<f64>>,
    cfg: &SolverConfig,
) -> Result<MarginResult> {
    let dim = problem.dim();
    if p0.len() != dim {
        return Err(Error::InvalidConfig(format!(
            "p0 has dimension {}, problem expects {dim}",
            p0.len()
        )));
    }
    let a = match weight {
        Some(w) => {
            if w.nrows() != dim || w.ncols() != dim {
                return Err(Error::InvalidConfig("weight matrix dimension mismatch".into()));
            }
            w.clone()
        }
        None => DMatrix::identity(dim, dim),
    };
    let p0_v = DVector::from_column_slice(p0);

    let mut iterates = Vec::new();
    let mut simulations = 0usize;
    let start = problem.evaluate(p0, true)?;
    simulations += 1;
    iterates.push(Iterate {
        p: p0.to_vec(),
        g: start.g,
        dg: start.dg.clone(),
        recovered: start.recovered,
        mu: 1.0,
        failed: false,
    });
    if !start.recovered {
        return Err(Error::StartNotRecovered);
    }

    let mut p_k = DVector::from_column_slice(p0);
    let mut g_k = start.g;
    let mut dg_k = DVector::from_column_slice(
        &start.dg.ok_or(Error::LinearSystemSingular)?,
    );
    #[allow(unused_assignments)]
    let mut lambda = 0.0;

    for iteration in 1..=cfg.max_iterations {
        if inf_norm(dg_k.as_slice()) < cfg.zero_gradient_tolerance {
            return Err(Error::LinearSystemSingular);
        }

        // KKT saddle system [[A, DG^T], [DG, 0]]. The linearized constraint
        // targets the eps/2 level set instead of exactly zero: gradients are
        // not recoverable by differencing at points sitting numerically on
        // the boundary, so iterates settle a hair inside it. The bias is
        // bounded by eps/2, within the |G| <= eps solution tolerance.
        let g_target = g_k.signum() * 0.5 * cfg.epsilon;
        let mut kkt = DMatrix::zeros(dim + 1, dim + 1);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(&a);
        for j in 0..dim {
            kkt[(j, dim)] = dg_k[j];
            kkt[(dim, j)] = dg_k[j];
        }
        let mut rhs = DVector::zeros(dim + 1);
        let ap0 = &a * &p0_v;
        for j in 0..dim {
            rhs[j] = ap0[j];
        }
        rhs[dim] = dg_k.dot(&p_k) - (g_k - g_target);

        let sol = kkt.lu().solve(&rhs).ok_or(Error::LinearSystemSingular)?;
        let p_next = sol.rows(0, dim).into_owned();
        let lambda_next = sol[dim];

        // Backtrack toward p_k until the trial point is recovered. Trials are
        // classified without the gradient (a full gradient at a rejected
        // point would be wasted simulations); the accepted point is then
        // re-evaluated with the gradient.
        let mut mu = 1.0_f64;
        let (p_acc, sample_acc) = loop {
            let p_trial = &p_k + (&p_next - &p_k) * mu;
            let (sample, failed) = evaluate_trial(problem, p_trial.as_slice(), false)?;
            simulations += 1;
            if sample.recovered {
                let (full, _) = evaluate_trial(problem, p_trial.as_slice(), true)?;
                simulations += 1;
                if full.recovered {
                    iterates.push(Iterate {
                        p: p_trial.as_slice().to_vec(),
                        g: full.g,
                        dg: full.dg.clone(),
                        recovered: true,
                        mu,
                        failed: false,
                    });
                    break (p_trial, full);
                }
            }
            iterates.push(Iterate {
                p: p_trial.as_slice().to_vec(),
                g: sample.g,
                dg: None,
                recovered: false,
                mu,
                failed,
            });
            mu *= 0.5;
            if mu < 1e-14 {
                return Err(Error::MaxIterations {
                    iterations: iteration,
                });
            }
        };

        let step_norm = inf_norm((&p_acc - &p_k).as_slice());
        let scale = 1.0 + inf_norm(p_k.as_slice());
        p_k = p_acc;
        g_k = sample_acc.g;
        let dg_new = DVector::from_column_slice(
            &sample_acc.dg.ok_or(Error::LinearSystemSingular)?,
        );
        // Differencing the sensitivity field at an iterate sitting numerically
        // on the boundary can collapse the gradient to noise; the gradient of
        // the locally affine G cannot shrink by orders of magnitude between
        // nearby iterates, so the previous one is kept in that case.
        if dg_new.norm() >= 1e-3 * dg_k.norm() {
            dg_k = dg_new;
        }
        lambda = lambda_next;

        // KKT stationarity residual |A(p-p0) + DG^T lambda|_inf at the new
        // point, with the multiplier chosen as its least-squares minimizer
        // (the saddle-system multiplier lags one iterate behind).
        let stat_dir = &a * (&p_k - &p0_v);
        let dg_sq = dg_k.dot(&dg_k);
        let lambda_ls = if dg_sq > 0.0 {
            -stat_dir.dot(&dg_k) / dg_sq
        } else {
            lambda
        };
        let stat = &stat_dir + &dg_k * lambda_ls;
        let kkt_residual = inf_norm(stat.as_slice());

        if g_k.abs() <= cfg.epsilon
            && step_norm <= cfg.step_tolerance * scale
            && kkt_residual <= cfg.kkt_tolerance
        {
            let diff = &p_k - &p0_v;
            let margin = 0.5 * (&a * &diff).dot(&diff);
            return Ok(MarginResult {
                p0: p0.to_vec(),
                p_star: p_k.as_slice().to_vec(),
                margin,
                distance: (2.0 * margin).sqrt(),
                lambda: lambda_ls,
                dg_star: dg_k.as_slice().to_vec(),
                g_star: g_k,
                kkt_residual,
                converged: true,
                iterations: iteration,
                iterates,
                simulations,
            });
        }
    }

    Err(Error::MaxIterations {
        iterations: cfg.max_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle_problem(scale: f64) -> SyntheticProblem {
        SyntheticProblem::new(
            2,
            Arc::new(move |p: &[f64]| scale * (p[0] * p[0] + p[1] * p[1] - 1.0)),
            Arc::new(move |p: &[f64]| vec![2.0 * scale * p[0], 2.0 * scale * p[1]]),
            Arc::new(|p: &[f64]| p[0] * p[0] + p[1] * p[1] < 1.0),
        )
    }

    fn parabola_1d() -> SyntheticProblem {
        // G = p^2 - 1, recovered inside the unit interval.
        SyntheticProblem::new(
            1,
            Arc::new(|p: &[f64]| p[0] * p[0] - 1.0),
            Arc::new(|p: &[f64]| vec![2.0 * p[0]]),
            Arc::new(|p: &[f64]| p[0].abs() < 1.0),
        )
    }

    #[test]
    fn boundary_1d_converges_to_unit_root() {
        let problem = parabola_1d();
        let cfg = SolverConfig::default();
        let r = find_boundary_1d(&problem, 0.5, &cfg).unwrap();
        assert!(r.converged);
        assert!(
            (r.p_star - 1.0).abs() < 1e-4,
            "p* = {}, expected 1",
            r.p_star
        );
        assert!(r.g_star.abs() <= cfg.epsilon);
        // Every accepted iterate is recovered; |G| decreases along them.
        let accepted: Vec<&Iterate> = r.iterates.iter().filter(|it| it.recovered).collect();
        for w in accepted.windows(2) {
            assert!(w[1].g.abs() < w[0].g.abs());
        }
    }

    #[test]
    fn boundary_1d_start_on_boundary_returns_immediately() {
        let problem = SyntheticProblem::new(
            1,
            Arc::new(|p: &[f64]| p[0] - 1.0),
            Arc::new(|_p: &[f64]| vec![1.0]),
            Arc::new(|p: &[f64]| p[0] < 1.0 + 1e-9),
        );
        let cfg = SolverConfig::default();
        let r = find_boundary_1d(&problem, 1.0 - 1e-7, &cfg).unwrap();
        assert!(r.converged);
        assert_eq!(r.newton_steps, 0);
        assert_eq!(r.simulations, 1);
    }

    #[test]
    fn boundary_1d_rejects_unrecovered_start() {
        let problem = parabola_1d();
        let cfg = SolverConfig::default();
        let r = find_boundary_1d(&problem, 2.0, &cfg);
        assert!(matches!(r, Err(Error::StartNotRecovered)));
    }

    #[test]
    fn trace_reconstructs_unit_circle() {
        let problem = circle_problem(1.0);
        let mut cfg = SolverConfig::default();
        cfg.epsilon = 1e-8;
        let start = [0.0, 1.0];
        let trace =
            trace_boundary_2d(&problem, &start, 0.05, 150, TraceDirection::Positive, &cfg)
                .unwrap();
        assert!(trace.points.len() >= 100, "only {} points", trace.points.len());
        for pt in &trace.points {
            let r = (pt.p[0] * pt.p[0] + pt.p[1] * pt.p[1]).sqrt();
            assert!(
                (r - 1.0).abs() <= 1e-6,
                "radial error {:.2e} at {:?}",
                (r - 1.0).abs(),
                pt.p
            );
        }
    }

    #[test]
    fn trace_newton_scale_invariance() {
        // Scaling G leaves the Newton steps invariant; with epsilon scaled
        // accordingly the traced polylines coincide.
        let mut reference: Option<Vec<Vec<f64>>> = None;
        for c in [1e-3, 1.0, 1e3] {
            let problem = circle_problem(c);
            let mut cfg = SolverConfig::default();
            cfg.epsilon = 1e-8 * c;
            let trace = trace_boundary_2d(
                &problem,
                &[0.0, 1.0],
                0.1,
                30,
                TraceDirection::Positive,
                &cfg,
            )
            .unwrap();
            let pts: Vec<Vec<f64>> = trace.points.iter().map(|p| p.p.clone()).collect();
            match &reference {
                None => reference = Some(pts),
                Some(r) => {
                    assert_eq!(r.len(), pts.len());
                    for (a, b) in r.iter().zip(&pts) {
                        // Exact-arithmetic invariance; floating point breaks
                        // the symmetry at rounding level per corrector stop.
                        let d = ((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
                        assert!(d < 1e-7, "max deviation {d:.3e} at {a:?} vs {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn margin_closest_point_on_sphere() {
        for dim in [2usize, 5, 20, 86] {
            let problem = SyntheticProblem::new(
                dim,
                Arc::new(|p: &[f64]| p.iter().map(|v| v * v).sum::<f64>() - 1.0),
                Arc::new(|p: &[f64]| p.iter().map(|v| 2.0 * v).collect()),
                Arc::new(|p: &[f64]| p.iter().map(|v| v * v).sum::<f64>() < 1.0),
            );
            let p0: Vec<f64> = (0..dim)
                .map(|_| 0.5 / (dim as f64).sqrt())
                .collect();
            let mut cfg = SolverConfig::default();
            cfg.epsilon = 1e-9;
            cfg.max_iterations = 100;
            let r = safety_margin_nd(&problem, &p0, None, &cfg).unwrap();
            assert!(r.converged);
            assert!(
                (r.margin - 0.125).abs() < 1e-8,
                "P = {dim}: margin = {}, expected 0.125",
                r.margin
            );
            // p* = unit vector along p0.
            for (ps, p0i) in r.p_star.iter().zip(&p0) {
                assert!((ps - 2.0 * p0i).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn margin_1d_collapses_to_boundary_point() {
        let problem = parabola_1d();
        let mut cfg = SolverConfig::default();
        cfg.epsilon = 1e-9;
        cfg.max_iterations = 100;
        let m = safety_margin_nd(&problem, &[0.25], None, &cfg).unwrap();
        let b = find_boundary_1d(&problem, 0.25, &{
            let mut c = SolverConfig::default();
            c.epsilon = 1e-9;
            c.max_iterations = 100;
            c
        })
        .unwrap();
        assert!((m.p_star[0] - b.p_star).abs() < 1e-6);
        assert!((m.margin - 0.5 * (b.p_star - 0.25) * (b.p_star - 0.25)).abs() < 1e-8);
    }

    #[test]
    fn margin_weighted_norm() {
        // Ellipse metric: closest point under A = diag(4, 1) on the line
        // boundary G = p1 - 1 = 0 is reached by moving only p1.
        let problem = SyntheticProblem::new(
            2,
            Arc::new(|p: &[f64]| p[0] - 1.0),
            Arc::new(|_p: &[f64]| vec![1.0, 0.0]),
            Arc::new(|p: &[f64]| p[0] < 1.0),
        );
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let mut cfg = SolverConfig::default();
        cfg.epsilon = 1e-10;
        let r = safety_margin_nd(&problem, &[0.0, 0.3], Some(&a), &cfg).unwrap();
        assert!((r.p_star[0] - 1.0).abs() < 1e-8);
        assert!((r.p_star[1] - 0.3).abs() < 1e-8);
        assert!((r.margin - 2.0).abs() < 1e-7, "margin = {}", r.margin);
    }
}
