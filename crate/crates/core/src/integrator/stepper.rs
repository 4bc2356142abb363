//! Embedded Dormand-Prince 4(5) and implicit trapezoidal steps, each with a
//! continuous interpolant used for event localization and output sampling.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// The system being stepped. Implicit stepping additionally needs a reduced
/// block Jacobian (see [`trapezoidal_step`]).
pub(crate) trait OdeSystem {
    fn rhs(&mut self, t: f64, x: &DVector<f64>, out: &mut DVector<f64>) -> Result<()>;

    /// `nb x nb` Jacobian of the leading block's dynamics, reused for every
    /// block of the state vector by the implicit iteration.
    fn block_jacobian(&mut self, t: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let _ = (t, x);
        Err(Error::Numerical(
            "implicit stepping is not supported by this system".into(),
        ))
    }
}

/// Continuous extension of one accepted step, parameterized by
/// `theta = (t - t0) / h` over the step the interpolant was built on.
#[derive(Clone, Debug)]
pub(crate) enum Interpolant {
    Dopri {
        rcont: [DVector<f64>; 5],
    },
    Hermite {
        x0: DVector<f64>,
        f0: DVector<f64>,
        x1: DVector<f64>,
        f1: DVector<f64>,
        h: f64,
    },
}

impl Interpolant {
    pub fn eval(&self, theta: f64) -> DVector<f64> {
        match self {
            Interpolant::Dopri { rcont } => {
                let th1 = 1.0 - theta;
                // rcont1 + θ(rcont2 + (1-θ)(rcont3 + θ(rcont4 + (1-θ)rcont5)))
                let mut acc = &rcont[3] + &rcont[4] * th1;
                acc = &rcont[2] + acc * theta;
                acc = &rcont[1] + acc * th1;
                &rcont[0] + acc * theta
            }
            Interpolant::Hermite { x0, f0, x1, f1, h } => {
                let t2 = theta * theta;
                let t3 = t2 * theta;
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + theta;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                x0 * h00 + f0 * (h10 * h) + x1 * h01 + f1 * (h11 * h)
            }
        }
    }
}

pub(crate) struct StepResult {
    pub x1: DVector<f64>,
    /// Derivative at the right endpoint (FSAL stage for Dopri, trailing
    /// trapezoidal slope otherwise); becomes `k1` of the next step.
    pub f1: DVector<f64>,
    pub interpolant: Interpolant,
    /// Scaled error-norm estimate; accept when <= 1. Trapezoidal steps are
    /// fixed-size and always report 0.
    pub err: f64,
}

// Dormand-Prince 5(4) coefficients.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One trial Dormand-Prince step from `(t, x)` with slope `k1 = f(t, x)`.
pub(crate) fn dopri5_step<S: OdeSystem>(
    sys: &mut S,
    t: f64,
    x: &DVector<f64>,
    k1: &DVector<f64>,
    h: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<StepResult> {
    let dim = x.len();
    let mut k2 = DVector::zeros(dim);
    let mut k3 = DVector::zeros(dim);
    let mut k4 = DVector::zeros(dim);
    let mut k5 = DVector::zeros(dim);
    let mut k6 = DVector::zeros(dim);
    let mut k7 = DVector::zeros(dim);

    let xs = x + k1 * (A21 * h);
    sys.rhs(t + C2 * h, &xs, &mut k2)?;
    let xs = x + k1 * (A31 * h) + &k2 * (A32 * h);
    sys.rhs(t + C3 * h, &xs, &mut k3)?;
    let xs = x + k1 * (A41 * h) + &k2 * (A42 * h) + &k3 * (A43 * h);
    sys.rhs(t + C4 * h, &xs, &mut k4)?;
    let xs = x + k1 * (A51 * h) + &k2 * (A52 * h) + &k3 * (A53 * h) + &k4 * (A54 * h);
    sys.rhs(t + C5 * h, &xs, &mut k5)?;
    let xs =
        x + k1 * (A61 * h) + &k2 * (A62 * h) + &k3 * (A63 * h) + &k4 * (A64 * h) + &k5 * (A65 * h);
    sys.rhs(t + h, &xs, &mut k6)?;
    let x1 = x + k1 * (B1 * h) + &k3 * (B3 * h) + &k4 * (B4 * h) + &k5 * (B5 * h) + &k6 * (B6 * h);
    sys.rhs(t + h, &x1, &mut k7)?;

    let mut err_sq = 0.0;
    for i in 0..dim {
        let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let scale = abs_tol + rel_tol * x[i].abs().max(x1[i].abs());
        let r = e / scale;
        err_sq += r * r;
    }
    let mut err = (err_sq / dim as f64).sqrt();
    // Reject steps that left the computable domain: NaN must not satisfy
    // acceptance comparisons.
    if !err.is_finite() || x1.iter().any(|v| !v.is_finite()) {
        err = f64::INFINITY;
    }

    let delta = &x1 - x;
    let rcont0 = x.clone();
    let rcont2 = k1 * h - &delta;
    let rcont3 = &delta - &k7 * h - &rcont2;
    let rcont4 = (k1 * D1 + &k3 * D3 + &k4 * D4 + &k5 * D5 + &k6 * D6 + &k7 * D7) * h;
    let interpolant = Interpolant::Dopri {
        rcont: [rcont0, delta, rcont2, rcont3, rcont4],
    };

    Ok(StepResult {
        x1,
        f1: k7,
        interpolant,
        err,
    })
}

/// One implicit trapezoidal step, solved by a block quasi-Newton iteration:
/// the iteration matrix `I - h/2 * A` uses the system's reduced Jacobian `A`
/// applied to each size-`nb` block of the (possibly sensitivity-augmented)
/// state. Exact for blocks whose dynamics are linear in the block.
pub(crate) fn trapezoidal_step<S: OdeSystem>(
    sys: &mut S,
    nb: usize,
    t: f64,
    x: &DVector<f64>,
    f0: &DVector<f64>,
    h: f64,
    newton_tol: f64,
) -> Result<StepResult> {
    let dim = x.len();
    debug_assert_eq!(dim % nb, 0);
    let blocks = dim / nb;
    let t1 = t + h;

    let mut x1 = x + f0 * h;
    let a = sys.block_jacobian(t1, &x1)?;
    let m = DMatrix::identity(nb, nb) - a * (0.5 * h);
    let lu = m.lu();

    let mut f1 = DVector::zeros(dim);
    let mut converged = false;
    for _ in 0..25 {
        sys.rhs(t1, &x1, &mut f1)?;
        let resid = &x1 - x - (f0 + &f1) * (0.5 * h);
        let rn = resid
            .iter()
            .fold(0.0_f64, |a, b| if b.is_finite() { a.max(b.abs()) } else { f64::INFINITY });
        if rn <= newton_tol && rn.is_finite() {
            converged = true;
            break;
        }
        if !rn.is_finite() {
            return Err(Error::Numerical(format!(
                "trapezoidal iteration produced non-finite residual at t = {t1:.6}"
            )));
        }
        for b in 0..blocks {
            let rb = DVector::from_column_slice(&resid.as_slice()[b * nb..(b + 1) * nb]);
            let db = lu.solve(&rb).ok_or_else(|| {
                Error::Numerical(format!(
                    "trapezoidal iteration matrix singular at t = {t1:.6}"
                ))
            })?;
            for i in 0..nb {
                x1[b * nb + i] -= db[i];
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "trapezoidal iteration failed to converge at t = {t1:.6}; reduce the step size"
        )));
    }
    sys.rhs(t1, &x1, &mut f1)?;

    let interpolant = Interpolant::Hermite {
        x0: x.clone(),
        f0: f0.clone(),
        x1: x1.clone(),
        f1: f1.clone(),
        h,
    };
    Ok(StepResult {
        x1,
        f1,
        interpolant,
        err: 0.0,
    })
}
