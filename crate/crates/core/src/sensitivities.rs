//! First-order trajectory sensitivities propagated alongside integration
//! (including jumps at switching events) and second-order sensitivities by a
//! selectable backend.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hybrid_model::{
    HybridSystemDefinition, ParameterSpace, PhaseDuration, PhaseSchedule,
};
use crate::integrator::{
    run_simulation, EventKind, IntegrationConfig, JumpAudit, RawSim, SensMode, StateTrajectory,
    Termination,
};
use crate::text::push_float_row;

/// Perturbation scale for the finite-difference second-order backend.
pub const SECOND_ORDER_FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SecondOrderBackend {
    /// Central differences of re-simulated first-order sensitivities,
    /// `chi_[ij](t) = [chi_[i](p + h e_j, t) - chi_[i](p - h e_j, t)] / 2h`.
    /// Correct across switching events; costs 2P extra propagations.
    FiniteDifference,
    /// Second-order variational equations integrated within smooth segments.
    /// Valid only when no switching event occurs after disturbance onset and
    /// no phase duration depends on an active parameter.
    Variational,
}

/// Second-order sensitivities on the output grid, stored for every ordered
/// pair `(i, j)`; layout per sample is `[state * P * P]` row-major in
/// `(state, i, j)`.
#[derive(Clone, Debug, Serialize)]
pub struct SecondOrderGrid {
    pub n: usize,
    pub p_dim: usize,
    pub data: Vec<Vec<f64>>,
}

impl SecondOrderGrid {
    pub fn at(&self, sample: usize, state: usize, i: usize, j: usize) -> f64 {
        self.data[sample][(state * self.p_dim + i) * self.p_dim + j]
    }

    /// The n-vector `chi_[ij]` at one sample.
    pub fn pair(&self, sample: usize, i: usize, j: usize) -> Vec<f64> {
        (0..self.n).map(|k| self.at(sample, k, i, j)).collect()
    }
}

/// A state trajectory together with its sensitivity data.
#[derive(Clone, Debug, Serialize)]
pub struct SensitivityTrajectory {
    pub trajectory: StateTrajectory,
    /// `chi(t)` on the output grid: `n x P` per sample.
    pub chi: Vec<DMatrix<f64>>,
    pub second_order: Option<SecondOrderGrid>,
    /// Event-jump audit records (one per applied jump).
    pub jumps: Vec<JumpAudit>,
}

impl SensitivityTrajectory {
    pub(crate) fn from_raw(mut raw: RawSim) -> Self {
        let chi = std::mem::take(&mut raw.chi);
        let chi2 = std::mem::take(&mut raw.chi2);
        let jumps = std::mem::take(&mut raw.jumps);
        let n = raw.n;
        let p_dim = raw.p_dim;
        Self {
            chi,
            second_order: (!chi2.is_empty()).then_some(SecondOrderGrid {
                n,
                p_dim,
                data: chi2,
            }),
            jumps,
            trajectory: raw.into_trajectory(),
        }
    }

    pub fn p_dim(&self) -> usize {
        self.chi.first().map(|c| c.ncols()).unwrap_or(0)
    }

    /// `chi` at an arbitrary time via the dense solution.
    pub fn chi_at(&self, t: f64) -> Option<DMatrix<f64>> {
        let n = self.trajectory.n;
        let p = self.p_dim();
        let aug = self.trajectory.dense.eval_aug(t)?;
        if aug.len() < n * (1 + p) {
            return None;
        }
        let mut chi = DMatrix::zeros(n, p);
        for j in 0..p {
            for i in 0..n {
                chi[(i, j)] = aug[n + j * n + i];
            }
        }
        Some(chi)
    }

    /// CSV with columns `t` then the chi entries in row-major
    /// `(state, parameter)` order.
    pub fn to_csv(&self) -> String {
        let n = self.trajectory.n;
        let p = self.p_dim();
        let mut out = String::from("t");
        for i in 1..=n {
            for j in 1..=p {
                out.push_str(&format!(",chi_{i}_{j}"));
            }
        }
        out.push('\n');
        for (k, t) in self.trajectory.times.iter().enumerate() {
            let mut row = Vec::with_capacity(1 + n * p);
            row.push(*t);
            for i in 0..n {
                for j in 0..p {
                    row.push(self.chi[k][(i, j)]);
                }
            }
            push_float_row(&mut out, &[], &row);
        }
        out
    }
}

/// Propagates `chi = dx/dp` alongside the trajectory. Diverged runs are
/// reported through `Error::IntegrationDiverged` carrying the partial state
/// trajectory.
pub fn propagate_first_order(
    def: &HybridSystemDefinition,
    schedule: &PhaseSchedule,
    space: &ParameterSpace,
    p_active: &[f64],
    cfg: &IntegrationConfig,
) -> Result<SensitivityTrajectory> {
    let raw = run_simulation(def, schedule, space, p_active, cfg, SensMode::First)?;
    match raw.termination.clone() {
        Termination::Completed => Ok(SensitivityTrajectory::from_raw(raw)),
        Termination::Diverged { time, norm } => Err(Error::IntegrationDiverged {
            time,
            norm,
            trajectory: Box::new(SensitivityTrajectory::from_raw(raw).trajectory),
        }),
    }
}

/// True when some timed phase duration is controlled by an active parameter,
/// which makes phase-boundary times parameter dependent.
pub(crate) fn schedule_depends_on_space(schedule: &PhaseSchedule, space: &ParameterSpace) -> bool {
    schedule.timed_phases().iter().any(|ph| match ph.duration {
        PhaseDuration::FromParameter(fi) => {
            (0..space.dim()).any(|j| space.full_index(j) == fi)
        }
        _ => false,
    })
}

/// Produces `chi_[ij]` on the output grid by the selected backend.
pub fn propagate_second_order(
    def: &HybridSystemDefinition,
    schedule: &PhaseSchedule,
    space: &ParameterSpace,
    p_active: &[f64],
    cfg: &IntegrationConfig,
    backend: SecondOrderBackend,
) -> Result<SensitivityTrajectory> {
    match backend {
        SecondOrderBackend::FiniteDifference => {
            second_order_fd(def, schedule, space, p_active, cfg)
        }
        SecondOrderBackend::Variational => {
            if schedule_depends_on_space(schedule, space) {
                return Err(Error::BackendUnsupported(
                    "variational backend cannot differentiate parameter-dependent phase \
                     boundary times; use the finite-difference backend"
                        .into(),
                ));
            }
            let raw = run_simulation(
                def,
                schedule,
                space,
                p_active,
                cfg,
                SensMode::SecondVariational,
            )?;
            if let Termination::Diverged { time, norm } = raw.termination.clone() {
                return Err(Error::IntegrationDiverged {
                    time,
                    norm,
                    trajectory: Box::new(SensitivityTrajectory::from_raw(raw).trajectory),
                });
            }
            if raw
                .events
                .iter()
                .any(|e| matches!(e.kind, EventKind::Indicator { .. }))
            {
                return Err(Error::BackendUnsupported(
                    "variational backend is invalid across switching events; use the \
                     finite-difference backend"
                        .into(),
                ));
            }
            Ok(SensitivityTrajectory::from_raw(raw))
        }
    }
}

fn second_order_fd(
    def: &HybridSystemDefinition,
    schedule: &PhaseSchedule,
    space: &ParameterSpace,
    p_active: &[f64],
    cfg: &IntegrationConfig,
) -> Result<SensitivityTrajectory> {
    let base = propagate_first_order(def, schedule, space, p_active, cfg)?;
    let n = base.trajectory.n;
    let p_dim = space.dim();
    let samples = base.trajectory.times.len();

    // 2P re-simulations, run concurrently and merged by parameter index.
    let columns: Vec<Result<(Vec<DMatrix<f64>>, f64)>> = (0..p_dim)
        .into_par_iter()
        .map(|j| {
            let h = SECOND_ORDER_FD_STEP * p_active[j].abs().max(1.0);
            let mut pp = p_active.to_vec();
            pp[j] += h;
            let plus = propagate_first_order(def, schedule, space, &pp, cfg)?;
            pp[j] = p_active[j] - h;
            let minus = propagate_first_order(def, schedule, space, &pp, cfg)?;
            if plus.chi.len() != samples || minus.chi.len() != samples {
                return Err(Error::Numerical(format!(
                    "perturbed trajectory for parameter {j} ended early; cannot \
                     difference sensitivities"
                )));
            }
            let diff: Vec<DMatrix<f64>> = (0..samples)
                .map(|k| (&plus.chi[k] - &minus.chi[k]) / (2.0 * h))
                .collect();
            Ok((diff, h))
        })
        .collect();

    let mut data = vec![vec![0.0; n * p_dim * p_dim]; samples];
    for (j, col) in columns.into_iter().enumerate() {
        let (diff, _h) = col?;
        for k in 0..samples {
            for state in 0..n {
                for i in 0..p_dim {
                    data[k][(state * p_dim + i) * p_dim + j] = diff[k][(state, i)];
                }
            }
        }
    }

    Ok(SensitivityTrajectory {
        second_order: Some(SecondOrderGrid { n, p_dim, data }),
        ..base
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid_model::{
        HybridSystemDefinition, InitialState, ParameterSpace, Phase, PhaseDuration, PhaseSchedule,
        SwitchedConstraint, PHASE_POST,
    };
    use std::sync::Arc;

    /// x' = p x with x(0) = 1: chi(t) = t e^{pt}, chi_[11](t) = t^2 e^{pt}.
    fn scalar_growth() -> (HybridSystemDefinition, PhaseSchedule, ParameterSpace) {
        let def = HybridSystemDefinition::builder(1, 0)
            .dynamics(Arc::new(|_tag, x: &[f64], _y: &[f64], p: &[f64]| {
                vec![p[0] * x[0]]
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
        let space = ParameterSpace::full(vec!["p".into()], vec![-0.5]).unwrap();
        (def, schedule, space)
    }

    #[test]
    fn first_order_matches_closed_form() {
        let (def, schedule, space) = scalar_growth();
        let mut cfg = IntegrationConfig::with_horizon(2.0);
        cfg.rel_tol = 1e-10;
        cfg.abs_tol = 1e-12;
        let p = -0.5;
        let sens = propagate_first_order(&def, &schedule, &space, &[p], &cfg).unwrap();
        for (k, t) in sens.trajectory.times.iter().enumerate() {
            let expected = t * (p * t).exp();
            let got = sens.chi[k][(0, 0)];
            assert!(
                (got - expected).abs() < 1e-6,
                "chi({t}) = {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn second_order_backends_match_closed_form() {
        let (def, schedule, space) = scalar_growth();
        let mut cfg = IntegrationConfig::with_horizon(2.0);
        cfg.rel_tol = 1e-10;
        cfg.abs_tol = 1e-12;
        let p = -0.5;
        for backend in [
            SecondOrderBackend::FiniteDifference,
            SecondOrderBackend::Variational,
        ] {
            let sens =
                propagate_second_order(&def, &schedule, &space, &[p], &cfg, backend).unwrap();
            let grid = sens.second_order.as_ref().unwrap();
            for (k, t) in sens.trajectory.times.iter().enumerate() {
                let expected = t * t * (p * t).exp();
                let got = grid.at(k, 0, 0, 0);
                assert!(
                    (got - expected).abs() < 1e-4,
                    "{backend:?}: chi2({t}) = {got}, expected {expected}"
                );
            }
        }
    }

    /// Hybrid closed form: x' = 1 until x crosses the threshold parameter p,
    /// then x' = a. For t beyond the crossing, dx/dp = 1 - a.
    #[test]
    fn event_jump_matches_closed_form() {
        let a = 0.25;
        let constraint = SwitchedConstraint::new(
            1,
            Arc::new(|_tag, x: &[f64], _y: &[f64], p: &[f64]| x[0] - p[0]),
            Arc::new(move |_tag, _x: &[f64], y: &[f64], _p: &[f64]| vec![y[0] - (1.0 - a)]),
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
        let space = ParameterSpace::full(vec!["threshold".into()], vec![0.6]).unwrap();
        let cfg = IntegrationConfig::with_horizon(1.5);
        let raw = run_simulation(&def, &schedule, &space, &[0.6], &cfg, SensMode::First).unwrap();
        let sens = SensitivityTrajectory::from_raw(raw);

        assert_eq!(sens.jumps.len(), 1);
        let jump = &sens.jumps[0];
        assert!((jump.time - 0.6).abs() < 1e-8);
        assert!((jump.event_time_sensitivity[0] - 1.0).abs() < 1e-8);

        for (k, t) in sens.trajectory.times.iter().enumerate() {
            let expected = if *t < 0.6 { 0.0 } else { 1.0 - a };
            if (*t - 0.6).abs() < 0.02 {
                continue;
            }
            let got = sens.chi[k][(0, 0)];
            assert!(
                (got - expected).abs() < 1e-7,
                "chi({t}) = {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn zero_dependence_gives_zero_sensitivity() {
        let (def, schedule, _space) = scalar_growth();
        // Two parameters; the second never enters the model.
        let space =
            ParameterSpace::full(vec!["p".into(), "unused".into()], vec![-0.5, 3.0]).unwrap();
        let def = HybridSystemDefinition::builder(1, 0)
            .dynamics(Arc::new(|_tag, x: &[f64], _y: &[f64], p: &[f64]| {
                vec![p[0] * x[0]]
            }))
            .initial_state(def.initial_state().clone())
            .build()
            .unwrap();
        let cfg = IntegrationConfig::with_horizon(2.0);
        let sens = propagate_first_order(&def, &schedule, &space, &[-0.5, 3.0], &cfg).unwrap();
        for c in &sens.chi {
            assert!(c.column(1).amax() < 1e-9);
        }
    }
}
