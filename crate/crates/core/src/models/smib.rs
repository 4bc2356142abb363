//! Single machine infinite bus with classical machine dynamics. The fault is
//! modeled by setting the electrical torque to zero until it is cleared.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::hybrid_model::{
    HybridSystemDefinition, InitialState, Jacobians, ParameterSpace, Phase, PhaseDuration,
    PhaseSchedule, PhaseTag, SwitchedConstraint, PHASE_DISTURBANCE, PHASE_POST, PHASE_PRE,
};
use crate::integrator::IntegrationConfig;
use crate::recovery_metrics::RecoveryConfig;

use super::{ModelBundle, ModelMetadata, ParamInfo};

pub const OMEGA_S: f64 = 2.0 * std::f64::consts::PI * 60.0;

// Full parameter catalog, in order.
pub const PARAMS: [(&str, f64, &str); 7] = [
    ("p_m", 0.6, "p.u."),
    ("h", 3.0, "s"),
    ("d", 5.0, "p.u."),
    ("e_mag", 1.05, "p.u."),
    ("v_inf", 1.0, "p.u."),
    ("x_line", 0.5, "p.u."),
    ("t_clear", 0.2, "s"),
];

const IDX_PM: usize = 0;
const IDX_H: usize = 1;
const IDX_D: usize = 2;
const IDX_E: usize = 3;
const IDX_V: usize = 4;
const IDX_X: usize = 5;
pub const IDX_T_CLEAR: usize = 6;

fn electrical_power(tag: PhaseTag, delta: f64, p: &[f64]) -> f64 {
    if tag == PHASE_DISTURBANCE {
        0.0
    } else {
        p[IDX_E] * p[IDX_V] / p[IDX_X] * delta.sin()
    }
}

pub fn build(p_nominal: Vec<f64>) -> Result<ModelBundle> {
    let dynamics = Arc::new(|tag: PhaseTag, x: &[f64], _y: &[f64], p: &[f64]| {
        let (delta, omega) = (x[0], x[1]);
        let pe = electrical_power(tag, delta, p);
        let two_h = 2.0 * p[IDX_H];
        vec![
            omega,
            OMEGA_S / two_h * (p[IDX_PM] - pe) - p[IDX_D] / two_h * omega,
        ]
    });

    let f_x = Arc::new(|tag: PhaseTag, x: &[f64], _y: &[f64], p: &[f64]| {
        let two_h = 2.0 * p[IDX_H];
        let dpe_ddelta = if tag == PHASE_DISTURBANCE {
            0.0
        } else {
            p[IDX_E] * p[IDX_V] / p[IDX_X] * x[0].cos()
        };
        DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 1.0, -OMEGA_S / two_h * dpe_ddelta, -p[IDX_D] / two_h],
        )
    });

    let f_p = Arc::new(|tag: PhaseTag, x: &[f64], _y: &[f64], p: &[f64]| {
        let (delta, omega) = (x[0], x[1]);
        let two_h = 2.0 * p[IDX_H];
        let pe = electrical_power(tag, delta, p);
        let mut m = DMatrix::zeros(2, 7);
        m[(1, IDX_PM)] = OMEGA_S / two_h;
        m[(1, IDX_H)] =
            -OMEGA_S / (two_h * p[IDX_H]) * (p[IDX_PM] - pe) + p[IDX_D] / (two_h * p[IDX_H]) * omega;
        m[(1, IDX_D)] = -omega / two_h;
        if tag != PHASE_DISTURBANCE {
            let s = delta.sin();
            m[(1, IDX_E)] = -OMEGA_S / two_h * p[IDX_V] * s / p[IDX_X];
            m[(1, IDX_V)] = -OMEGA_S / two_h * p[IDX_E] * s / p[IDX_X];
            m[(1, IDX_X)] = OMEGA_S / two_h * p[IDX_E] * p[IDX_V] * s / (p[IDX_X] * p[IDX_X]);
        }
        m
    });

    // Pole-slip marker: crossing delta = pi flags loss of synchronism. Both
    // branches are empty (the indicator carries no algebraic equations).
    let pole_slip = SwitchedConstraint::new(
        0,
        Arc::new(|_tag, x: &[f64], _y: &[f64], _p: &[f64]| x[0] - std::f64::consts::PI),
        Arc::new(|_tag, _x: &[f64], _y: &[f64], _p: &[f64]| Vec::new()),
        Arc::new(|_tag, _x: &[f64], _y: &[f64], _p: &[f64]| Vec::new()),
    );

    let s_x = Arc::new(|_tag: PhaseTag, _i: usize, _x: &[f64], _y: &[f64], _p: &[f64]| {
        vec![1.0, 0.0]
    });
    let s_y =
        Arc::new(|_tag: PhaseTag, _i: usize, _x: &[f64], _y: &[f64], _p: &[f64]| Vec::new());
    let s_p = Arc::new(|_tag: PhaseTag, _i: usize, _x: &[f64], _y: &[f64], _p: &[f64]| {
        vec![0.0; 7]
    });

    // Equilibrium guess from the closed form sin(delta) = P_m / P_max;
    // clamped so infeasible loadings still start the Newton iteration (which
    // then correctly reports NoEquilibrium).
    let ratio = p_nominal[IDX_PM] * p_nominal[IDX_X] / (p_nominal[IDX_E] * p_nominal[IDX_V]);
    let delta_guess = ratio.clamp(-0.999, 0.999).asin();

    let def = HybridSystemDefinition::builder(2, 0)
        .state_names(&["delta", "omega"])
        .dynamics(dynamics)
        .constraint(pole_slip)
        .initial_state(InitialState::PreEquilibrium {
            x_guess: vec![delta_guess, 0.0],
            y_guess: Vec::new(),
        })
        .jacobians(Jacobians {
            f_x: Some(f_x),
            f_p: Some(f_p),
            s_x: Some(s_x),
            s_y: Some(s_y),
            s_p: Some(s_p),
            ..Jacobians::default()
        })
        .build()?;

    let mut phases = vec![Phase::new(PHASE_PRE, "pre", PhaseDuration::Equilibrium)];
    if p_nominal[IDX_T_CLEAR] > 0.0 {
        phases.push(Phase::new(
            PHASE_DISTURBANCE,
            "fault",
            PhaseDuration::FromParameter(IDX_T_CLEAR),
        ));
    }
    phases.push(Phase::new(PHASE_POST, "post", PhaseDuration::ToHorizon));
    let schedule = PhaseSchedule::new(phases)?;

    let names: Vec<String> = PARAMS.iter().map(|(n, _, _)| n.to_string()).collect();
    let space = ParameterSpace::full(names.clone(), p_nominal.clone())?;

    let mut integration = IntegrationConfig::with_horizon(30.0);
    // A handful of pole slips decisively witnesses non-recovery long before
    // the generic threshold would.
    integration.divergence_threshold = 50.0;

    let recovery = RecoveryConfig::with_horizon(30.0);

    Ok(ModelBundle {
        metadata: ModelMetadata {
            name: "smib".into(),
            state_names: def.state_names().to_vec(),
            algebraic_names: Vec::new(),
            parameters: names
                .iter()
                .zip(&p_nominal)
                .zip(PARAMS.iter())
                .map(|((n, v), (_, _, unit))| ParamInfo {
                    name: n.clone(),
                    nominal: *v,
                    unit: unit.to_string(),
                })
                .collect(),
        },
        definition: def,
        schedule,
        space,
        integration,
        recovery,
    })
}
