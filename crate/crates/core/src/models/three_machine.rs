//! Three classical machines on a four-bus network (bus 4 is an infinite bus),
//! exponential voltage-dependent loads, and one first-order exciter with an
//! output limiter realized as a switched algebraic constraint. The fault is a
//! switched shunt reactance at a chosen bus.
//!
//! Dynamic states: rotor angle and speed deviation per machine plus the
//! exciter state (n = 7). Algebraic states: bus voltage angle and magnitude at
//! the three machine buses plus the applied field voltage (m = 7).

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hybrid_model::{
    BranchSign, HybridSystemDefinition, InitialState, Jacobians, ParameterSpace, Phase,
    PhaseDuration, PhaseSchedule, PhaseTag, SwitchedConstraint, PHASE_DISTURBANCE, PHASE_POST,
    PHASE_PRE,
};
use crate::integrator::IntegrationConfig;
use crate::recovery_metrics::RecoveryConfig;

use super::{ModelBundle, ModelMetadata, ParamInfo};

pub const OMEGA_S: f64 = 2.0 * std::f64::consts::PI * 60.0;

pub const PARAMS: [(&str, f64, &str); 8] = [
    ("sigma", 1.0, "p.u."),
    ("sigma_1", 1.0, "p.u."),
    ("sigma_2", 1.0, "p.u."),
    ("sigma_3", 1.0, "p.u."),
    ("alpha_p", 1.2, "-"),
    ("alpha_q", 2.0, "-"),
    ("gamma", 1.0, "-"),
    ("t_clear", 0.2, "s"),
];

const IDX_SIGMA: usize = 0;
const IDX_SIGMA_B: usize = 1; // sigma_1..sigma_3 occupy 1..=3
const IDX_ALPHA_P: usize = 4;
const IDX_ALPHA_Q: usize = 5;
const IDX_GAMMA: usize = 6;
pub const IDX_T_CLEAR: usize = 7;

const N_BUS: usize = 4;
const INF_BUS: usize = 3;

/// All structural constants of the network and machines.
struct Data {
    g: [[f64; 4]; 4],
    b: [[f64; 4]; 4],
    fault_bus: usize,
    /// Susceptance of the fault shunt (negative, large magnitude).
    b_fault: f64,
    xd: [f64; 3],
    h: [f64; 3],
    d: [f64; 3],
    /// Base mechanical powers; dispatch follows the scaled system load, so
    /// the effective P_m is `p_m0 * sigma_gen(p)`.
    p_m0: [f64; 3],
    /// Fixed EMF magnitudes for machines 2 and 3 (machine 1 uses the exciter
    /// output).
    e_fixed: [f64; 3],
    p0: [f64; 3],
    q0: [f64; 3],
    k_e: f64,
    t_e: f64,
    e_ref: f64,
    v_ref: f64,
    e_max: f64,
}

const IDX_XE: usize = 6; // exciter state within x
const IDX_EAPP: usize = 6; // applied field voltage within y

impl Data {
    fn new(fault_bus: usize, x_fault: f64) -> Self {
        // Lines: (from, to, r, x).
        let lines = [
            (0usize, 1usize, 0.02, 0.25),
            (1, 2, 0.025, 0.30),
            (0, 2, 0.015, 0.20),
            (0, 3, 0.02, 0.20),
        ];
        let mut g = [[0.0; 4]; 4];
        let mut b = [[0.0; 4]; 4];
        for (i, j, r, x) in lines {
            let den = r * r + x * x;
            let gl = r / den;
            let bl = -x / den;
            g[i][i] += gl;
            g[j][j] += gl;
            b[i][i] += bl;
            b[j][j] += bl;
            g[i][j] -= gl;
            g[j][i] -= gl;
            b[i][j] -= bl;
            b[j][i] -= bl;
        }
        Self {
            g,
            b,
            fault_bus,
            b_fault: -1.0 / x_fault,
            xd: [0.30, 0.50, 0.30],
            h: [3.0, 2.4, 2.8],
            d: [6.0, 4.5, 5.5],
            p_m0: [0.55, 0.7, 0.5],
            e_fixed: [0.0, 1.25, 1.10],
            p0: [0.5, 0.7, 0.45],
            q0: [0.15, 0.2, 0.12],
            k_e: 8.0,
            t_e: 0.8,
            e_ref: 1.10,
            v_ref: 1.0,
            e_max: 1.35,
        }
    }

    fn b_at(&self, tag: PhaseTag, i: usize, j: usize) -> f64 {
        let mut v = self.b[i][j];
        if tag == PHASE_DISTURBANCE && i == j && i == self.fault_bus {
            v += self.b_fault;
        }
        v
    }

    fn bus_v(&self, y: &[f64], j: usize) -> f64 {
        if j == INF_BUS {
            1.0
        } else {
            y[2 * j + 1]
        }
    }

    fn bus_theta(&self, y: &[f64], j: usize) -> f64 {
        if j == INF_BUS {
            0.0
        } else {
            y[2 * j]
        }
    }

    fn emf(&self, b: usize, y: &[f64]) -> f64 {
        if b == 0 {
            y[IDX_EAPP]
        } else {
            self.e_fixed[b]
        }
    }

    fn p_inj(&self, tag: PhaseTag, y: &[f64], i: usize) -> f64 {
        let vi = self.bus_v(y, i);
        let ti = self.bus_theta(y, i);
        (0..N_BUS)
            .map(|j| {
                let tij = ti - self.bus_theta(y, j);
                vi * self.bus_v(y, j)
                    * (self.g[i][j] * tij.cos() + self.b_at(tag, i, j) * tij.sin())
            })
            .sum()
    }

    fn q_inj(&self, tag: PhaseTag, y: &[f64], i: usize) -> f64 {
        let vi = self.bus_v(y, i);
        let ti = self.bus_theta(y, i);
        (0..N_BUS)
            .map(|j| {
                let tij = ti - self.bus_theta(y, j);
                vi * self.bus_v(y, j)
                    * (self.g[i][j] * tij.sin() - self.b_at(tag, i, j) * tij.cos())
            })
            .sum()
    }

    fn p_gen(&self, x: &[f64], y: &[f64], b: usize) -> f64 {
        let e = self.emf(b, y);
        e * self.bus_v(y, b) * (x[2 * b] - self.bus_theta(y, b)).sin() / self.xd[b]
    }

    fn q_gen(&self, x: &[f64], y: &[f64], b: usize) -> f64 {
        let e = self.emf(b, y);
        let v = self.bus_v(y, b);
        (e * v * (x[2 * b] - self.bus_theta(y, b)).cos() - v * v) / self.xd[b]
    }

    // Even extension |V|^alpha keeps transient Newton excursions below zero
    // finite; the solution branch itself always has V > 0.
    /// Generation scaling: dispatch tracks the total scaled active load, so
    /// load growth stresses the machines rather than only the slack tie.
    fn sigma_gen(&self, p: &[f64]) -> f64 {
        let total: f64 = (0..3).map(|b| p[IDX_SIGMA_B + b] * self.p0[b]).sum();
        let base: f64 = self.p0.iter().sum();
        p[IDX_SIGMA] * total / base
    }

    fn p_load(&self, y: &[f64], p: &[f64], b: usize) -> f64 {
        p[IDX_SIGMA] * p[IDX_SIGMA_B + b] * self.p0[b] * self.bus_v(y, b).abs().powf(p[IDX_ALPHA_P])
    }

    fn q_load(&self, y: &[f64], p: &[f64], b: usize) -> f64 {
        p[IDX_SIGMA] * p[IDX_SIGMA_B + b] * self.q0[b] * self.bus_v(y, b).abs().powf(p[IDX_ALPHA_Q])
    }

    fn dynamics(&self, tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]) -> Vec<f64> {
        let _ = tag;
        let mut f = vec![0.0; 7];
        let sg = self.sigma_gen(p);
        for b in 0..3 {
            let two_h = 2.0 * self.h[b];
            f[2 * b] = x[2 * b + 1];
            f[2 * b + 1] = OMEGA_S / two_h * (sg * self.p_m0[b] - self.p_gen(x, y, b))
                - self.d[b] / two_h * x[2 * b + 1];
        }
        f[IDX_XE] = (self.e_ref + self.k_e * p[IDX_GAMMA] * (self.v_ref - self.bus_v(y, 0))
            - x[IDX_XE])
            / self.t_e;
        f
    }

    fn constraints(&self, tag: PhaseTag, sign: BranchSign, x: &[f64], y: &[f64], p: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; 7];
        for b in 0..3 {
            g[2 * b] = self.p_gen(x, y, b) - self.p_load(y, p, b) - self.p_inj(tag, y, b);
            g[2 * b + 1] = self.q_gen(x, y, b) - self.q_load(y, p, b) - self.q_inj(tag, y, b);
        }
        g[6] = match sign {
            BranchSign::Plus => y[IDX_EAPP] - self.e_max,
            BranchSign::Minus => y[IDX_EAPP] - x[IDX_XE],
        };
        g
    }

    // -- Analytic partials --------------------------------------------------

    /// d p_inj_i / d theta_j and friends over the algebraic unknowns, written
    /// into the balance rows of `out` with coefficient `-1` (injections enter
    /// the residual negatively).
    fn add_injection_partials(&self, tag: PhaseTag, y: &[f64], out: &mut DMatrix<f64>) {
        for i in 0..3 {
            let vi = self.bus_v(y, i);
            let ti = self.bus_theta(y, i);
            let (rp, rq) = (2 * i, 2 * i + 1);
            let mut dp_dti = 0.0;
            let mut dq_dti = 0.0;
            let mut dp_dvi = 2.0 * vi * self.g[i][i];
            let mut dq_dvi = -2.0 * vi * self.b_at(tag, i, i);
            for j in 0..N_BUS {
                if j == i {
                    continue;
                }
                let vj = self.bus_v(y, j);
                let tij = ti - self.bus_theta(y, j);
                let (gc, bs) = (self.g[i][j] * tij.cos(), self.b_at(tag, i, j) * tij.sin());
                let (gs, bc) = (self.g[i][j] * tij.sin(), self.b_at(tag, i, j) * tij.cos());
                dp_dti += vi * vj * (-gs + bc);
                dq_dti += vi * vj * (gc + bs);
                dp_dvi += vj * (gc + bs);
                dq_dvi += vj * (gs - bc);
                if j != INF_BUS {
                    out[(rp, 2 * j)] -= vi * vj * (gs - bc);
                    out[(rq, 2 * j)] -= -vi * vj * (gc + bs);
                    out[(rp, 2 * j + 1)] -= vi * (gc + bs);
                    out[(rq, 2 * j + 1)] -= vi * (gs - bc);
                }
            }
            out[(rp, 2 * i)] -= dp_dti;
            out[(rq, 2 * i)] -= dq_dti;
            out[(rp, 2 * i + 1)] -= dp_dvi;
            out[(rq, 2 * i + 1)] -= dq_dvi;
        }
    }

    fn f_x(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(7, 7);
        for b in 0..3 {
            let two_h = 2.0 * self.h[b];
            let e = self.emf(b, y);
            let v = self.bus_v(y, b);
            let c = (x[2 * b] - self.bus_theta(y, b)).cos();
            m[(2 * b, 2 * b + 1)] = 1.0;
            m[(2 * b + 1, 2 * b)] = -OMEGA_S / two_h * e * v * c / self.xd[b];
            m[(2 * b + 1, 2 * b + 1)] = -self.d[b] / two_h;
        }
        m[(IDX_XE, IDX_XE)] = -1.0 / self.t_e;
        m
    }

    fn f_y(&self, x: &[f64], y: &[f64], p: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(7, 7);
        for b in 0..3 {
            let two_h = 2.0 * self.h[b];
            let e = self.emf(b, y);
            let v = self.bus_v(y, b);
            let ang = x[2 * b] - self.bus_theta(y, b);
            let (s, c) = (ang.sin(), ang.cos());
            // d p_gen / d theta_b, d p_gen / d V_b.
            m[(2 * b + 1, 2 * b)] = -OMEGA_S / two_h * (-e * v * c / self.xd[b]);
            m[(2 * b + 1, 2 * b + 1)] = -OMEGA_S / two_h * (e * s / self.xd[b]);
            if b == 0 {
                m[(2 * b + 1, IDX_EAPP)] = -OMEGA_S / two_h * (v * s / self.xd[b]);
            }
        }
        m[(IDX_XE, 1)] = -self.k_e * p[IDX_GAMMA] / self.t_e;
        m
    }

    fn f_p(&self, y: &[f64], p: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(7, 8);
        let base: f64 = self.p0.iter().sum();
        let weighted: f64 = (0..3).map(|b| p[IDX_SIGMA_B + b] * self.p0[b]).sum();
        for b in 0..3 {
            let two_h = 2.0 * self.h[b];
            let coeff = OMEGA_S / two_h * self.p_m0[b];
            m[(2 * b + 1, IDX_SIGMA)] = coeff * weighted / base;
            for c in 0..3 {
                m[(2 * b + 1, IDX_SIGMA_B + c)] = coeff * p[IDX_SIGMA] * self.p0[c] / base;
            }
        }
        m[(IDX_XE, IDX_GAMMA)] = self.k_e * (self.v_ref - self.bus_v(y, 0)) / self.t_e;
        m
    }

    fn g_x(&self, sign: BranchSign, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(7, 7);
        for b in 0..3 {
            let e = self.emf(b, y);
            let v = self.bus_v(y, b);
            let ang = x[2 * b] - self.bus_theta(y, b);
            m[(2 * b, 2 * b)] = e * v * ang.cos() / self.xd[b];
            m[(2 * b + 1, 2 * b)] = -e * v * ang.sin() / self.xd[b];
        }
        if sign == BranchSign::Minus {
            m[(6, IDX_XE)] = -1.0;
        }
        m
    }

    fn g_y(&self, tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(7, 7);
        for b in 0..3 {
            let e = self.emf(b, y);
            let v = self.bus_v(y, b);
            let ang = x[2 * b] - self.bus_theta(y, b);
            let (s, c) = (ang.sin(), ang.cos());
            // Generator terms.
            m[(2 * b, 2 * b)] += -e * v * c / self.xd[b];
            m[(2 * b, 2 * b + 1)] += e * s / self.xd[b];
            m[(2 * b + 1, 2 * b)] += e * v * s / self.xd[b];
            m[(2 * b + 1, 2 * b + 1)] += (e * c - 2.0 * v) / self.xd[b];
            if b == 0 {
                m[(0, IDX_EAPP)] += v * s / self.xd[b];
                m[(1, IDX_EAPP)] += v * c / self.xd[b];
            }
            // Load terms (negative in the residual).
            let sg = p[IDX_SIGMA] * p[IDX_SIGMA_B + b];
            m[(2 * b, 2 * b + 1)] -=
                sg * self.p0[b] * p[IDX_ALPHA_P] * v.abs().powf(p[IDX_ALPHA_P] - 1.0) * v.signum();
            m[(2 * b + 1, 2 * b + 1)] -=
                sg * self.q0[b] * p[IDX_ALPHA_Q] * v.abs().powf(p[IDX_ALPHA_Q] - 1.0) * v.signum();
        }
        self.add_injection_partials(tag, y, &mut m);
        m[(6, IDX_EAPP)] = 1.0;
        m
    }

    fn g_p(&self, y: &[f64], p: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(7, 8);
        for b in 0..3 {
            let v = self.bus_v(y, b).abs();
            let vp = v.powf(p[IDX_ALPHA_P]);
            let vq = v.powf(p[IDX_ALPHA_Q]);
            let ln_v = v.ln();
            m[(2 * b, IDX_SIGMA)] = -p[IDX_SIGMA_B + b] * self.p0[b] * vp;
            m[(2 * b, IDX_SIGMA_B + b)] = -p[IDX_SIGMA] * self.p0[b] * vp;
            m[(2 * b, IDX_ALPHA_P)] = -p[IDX_SIGMA] * p[IDX_SIGMA_B + b] * self.p0[b] * vp * ln_v;
            m[(2 * b + 1, IDX_SIGMA)] = -p[IDX_SIGMA_B + b] * self.q0[b] * vq;
            m[(2 * b + 1, IDX_SIGMA_B + b)] = -p[IDX_SIGMA] * self.q0[b] * vq;
            m[(2 * b + 1, IDX_ALPHA_Q)] =
                -p[IDX_SIGMA] * p[IDX_SIGMA_B + b] * self.q0[b] * vq * ln_v;
        }
        m
    }
}

pub fn build(p_nominal: Vec<f64>, fault_bus: usize, x_fault: f64) -> Result<ModelBundle> {
    if !(1..=3).contains(&fault_bus) {
        return Err(Error::BadOverride(format!(
            "fault_bus must be 1..=3, got {fault_bus}"
        )));
    }
    if x_fault <= 0.0 {
        return Err(Error::BadOverride("x_fault must be strictly positive".into()));
    }
    let data = Arc::new(Data::new(fault_bus - 1, x_fault));

    let d = data.clone();
    let dynamics = Arc::new(move |tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]| {
        d.dynamics(tag, x, y, p)
    });

    // The bus balances are one constraint block (never switching: its
    // indicator stays positive); the limiter is a second, scalar-switching
    // block.
    let d = data.clone();
    let balances = SwitchedConstraint::new(
        6,
        Arc::new(|_tag, _x: &[f64], _y: &[f64], _p: &[f64]| 1.0),
        Arc::new(move |tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]| {
            d.constraints(tag, BranchSign::Plus, x, y, p)[..6].to_vec()
        }),
        Arc::new(|_tag, _x: &[f64], _y: &[f64], _p: &[f64]| vec![0.0; 6]),
    );
    let d = data.clone();
    let limiter = SwitchedConstraint::new(
        1,
        Arc::new(move |_tag, x: &[f64], _y: &[f64], _p: &[f64]| x[IDX_XE] - d.e_max),
        {
            let d = data.clone();
            Arc::new(move |_tag, _x: &[f64], y: &[f64], _p: &[f64]| {
                vec![y[IDX_EAPP] - d.e_max]
            })
        },
        Arc::new(move |_tag, x: &[f64], y: &[f64], _p: &[f64]| {
            vec![y[IDX_EAPP] - x[IDX_XE]]
        }),
    );

    let d = data.clone();
    let f_x = Arc::new(move |_tag: PhaseTag, x: &[f64], y: &[f64], _p: &[f64]| d.f_x(x, y));
    let d = data.clone();
    let f_y = Arc::new(move |_tag: PhaseTag, x: &[f64], y: &[f64], p: &[f64]| d.f_y(x, y, p));
    let d = data.clone();
    let f_p = Arc::new(move |_tag: PhaseTag, _x: &[f64], y: &[f64], p: &[f64]| d.f_p(y, p));
    let d = data.clone();
    let g_x = Arc::new(
        move |_tag: PhaseTag, branches: &[BranchSign], x: &[f64], y: &[f64], _p: &[f64]| {
            d.g_x(branches[1], x, y)
        },
    );
    let d = data.clone();
    let g_y = Arc::new(
        move |tag: PhaseTag, _branches: &[BranchSign], x: &[f64], y: &[f64], p: &[f64]| {
            d.g_y(tag, x, y, p)
        },
    );
    let d = data.clone();
    let g_p = Arc::new(
        move |_tag: PhaseTag, _branches: &[BranchSign], _x: &[f64], y: &[f64], p: &[f64]| {
            d.g_p(y, p)
        },
    );
    let s_x = Arc::new(|_tag: PhaseTag, i: usize, _x: &[f64], _y: &[f64], _p: &[f64]| {
        let mut v = vec![0.0; 7];
        if i == 1 {
            v[IDX_XE] = 1.0;
        }
        v
    });
    let s_y =
        Arc::new(|_tag: PhaseTag, _i: usize, _x: &[f64], _y: &[f64], _p: &[f64]| vec![0.0; 7]);
    let s_p =
        Arc::new(|_tag: PhaseTag, _i: usize, _x: &[f64], _y: &[f64], _p: &[f64]| vec![0.0; 8]);

    let def = HybridSystemDefinition::builder(7, 7)
        .state_names(&[
            "delta_1", "omega_1", "delta_2", "omega_2", "delta_3", "omega_3", "x_exc",
        ])
        .algebraic_names(&[
            "theta_1", "v_1", "theta_2", "v_2", "theta_3", "v_3", "e_app",
        ])
        .dynamics(dynamics)
        .constraint(balances)
        .constraint(limiter)
        .initial_state(InitialState::PreEquilibrium {
            x_guess: vec![0.15, 0.0, 0.15, 0.0, 0.15, 0.0, 1.15],
            y_guess: vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.15],
        })
        .jacobians(Jacobians {
            f_x: Some(f_x),
            f_y: Some(f_y),
            f_p: Some(f_p),
            g_x: Some(g_x),
            g_y: Some(g_y),
            g_p: Some(g_p),
            s_x: Some(s_x),
            s_y: Some(s_y),
            s_p: Some(s_p),
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

    let mut integration = IntegrationConfig::with_horizon(40.0);
    integration.divergence_threshold = 60.0;

    let recovery = RecoveryConfig::with_horizon(40.0);

    Ok(ModelBundle {
        metadata: ModelMetadata {
            name: "three_machine".into(),
            state_names: def.state_names().to_vec(),
            algebraic_names: def.algebraic_names().to_vec(),
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
