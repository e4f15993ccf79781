//! Built-in systems: the knife-edge sleigh, a continuously variable
//! transmission gearbox, the sleigh's navigation-potential variant for
//! obstacle avoidance, and the sleigh's closed-form extremal family on the
//! zero-multiplier branch (used as a whole-pipeline oracle).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{ControlMode, MechanicalModel};
use crate::ocp::CostModel;

/// Knife-edge sleigh parameters: mass `m`, rotational inertia `j`, and
/// center-of-mass offset `a` from the contact point.
#[derive(Clone, Copy, Debug)]
pub struct SleighParams {
    pub m: f64,
    pub j: f64,
    pub a: f64,
}

impl SleighParams {
    /// The derived offset inertia ratio `b = a^2 m / J`.
    pub fn b(&self) -> f64 {
        self.a * self.a * self.m / self.j
    }

    fn validate(&self) -> Result<()> {
        if self.m > 0.0 && self.j > 0.0 && self.a > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "sleigh needs m, J, a > 0 (got m = {}, J = {}, a = {})",
                self.m, self.j, self.a
            )))
        }
    }
}

/// Gearbox parameters: belt-slider mass `m` and pulley inertias `j1`, `j2`.
#[derive(Clone, Copy, Debug)]
pub struct CvtParams {
    pub m: f64,
    pub j1: f64,
    pub j2: f64,
}

impl CvtParams {
    fn validate(&self) -> Result<()> {
        if self.m > 0.0 && self.j1 > 0.0 && self.j2 > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "gearbox needs m, J1, J2 > 0 (got m = {}, J1 = {}, J2 = {})",
                self.m, self.j1, self.j2
            )))
        }
    }

    pub fn a_of(&self, x: f64) -> f64 {
        self.j1 * (1.0 - x) - self.j2 * x
    }

    pub fn b_of(&self, x: f64) -> f64 {
        self.j1 * (1.0 - x) * (1.0 - x) + self.j2 * x * x
    }
}

/// Inverse-square navigation potential `V = kappa / r^2` centered at a
/// planar obstacle.
#[derive(Clone, Copy, Debug)]
pub struct ObstacleParams {
    pub kappa: f64,
    pub center: [f64; 2],
}

impl ObstacleParams {
    fn validate(&self) -> Result<()> {
        if self.kappa >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("kappa must be >= 0, got {}", self.kappa)))
        }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.center[0]).powi(2) + (y - self.center[1]).powi(2);
        if r2 == 0.0 {
            f64::INFINITY
        } else {
            self.kappa / r2
        }
    }
}

/// The k = 2 input permutation used by both worked systems: the first
/// input drives the second momentum-form equation and vice versa.
fn swap_input_map() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
}

/// The knife-edge sleigh on coordinates `q = (x, y, theta)` with the
/// adapted frame
///
/// ```text
/// X1 = (1/J) d/dtheta,   X2 = (cos(theta)/m) d/dx + (sin(theta)/m) d/dy
/// ```
///
/// and force-minimizing cost `C = (u1^2 + u2^2)/2`. The kinetic metric is
/// `diag(m, m, m a^2)`, which reproduces both the restricted Lagrangian
/// `l = y2^2/(2m) + b y1^2/(2J)` and the planar projector
/// `P = [[cos^2, cos sin, 0], [cos sin, sin^2, 0], [0, 0, 1]]`.
/// Controls enter in Euler-Lagrange form: `b ydot1 / J = u2`,
/// `ydot2 / m = u1`.
pub fn chaplygin_sleigh(params: &SleighParams) -> Result<(MechanicalModel, CostModel)> {
    params.validate()?;
    let &SleighParams { m, j, a } = params;
    let model = MechanicalModel::builder(3, 2)
        .metric_constant(DMatrix::from_diagonal(&DVector::from_vec(vec![m, m, m * a * a])))
        .rho(move |q: &DVector<f64>| {
            let theta = q[2];
            DMatrix::from_row_slice(3, 2, &[
                0.0, theta.cos() / m,
                0.0, theta.sin() / m,
                1.0 / j, 0.0,
            ])
        })
        .rho_gradient(move |q: &DVector<f64>| {
            let theta = q[2];
            let mut d_theta = DMatrix::zeros(3, 2);
            d_theta[(0, 1)] = -theta.sin() / m;
            d_theta[(1, 1)] = theta.cos() / m;
            vec![DMatrix::zeros(3, 2), DMatrix::zeros(3, 2), d_theta]
        })
        .control_mode(ControlMode::EulerLagrange)
        .input_map(swap_input_map())
        .frame_depends_on(&[2])
        .build()?;
    Ok((model, CostModel::quadratic(2)))
}

/// Continuously variable transmission on `q = (theta1, theta2, x)` with the
/// no-slip frame
///
/// ```text
/// X1 = (1/m) d/dx,   X2 = (1-x) d/dtheta1 + x d/dtheta2,
/// ```
///
/// metric `diag(J1, J2, m)`, chart `0 < x < 1` (finite gear ratio) and
/// quadratic cost. Controls in Euler-Lagrange form:
/// `u1 = ydot2 B(x) - y1 y2 A(x)/m`, `u2 = ydot1 / m`.
pub fn cvt(params: &CvtParams) -> Result<(MechanicalModel, CostModel)> {
    params.validate()?;
    let &CvtParams { m, j1, j2 } = params;
    let model = MechanicalModel::builder(3, 2)
        .metric_constant(DMatrix::from_diagonal(&DVector::from_vec(vec![j1, j2, m])))
        .rho(move |q: &DVector<f64>| {
            let x = q[2];
            DMatrix::from_row_slice(3, 2, &[
                0.0, 1.0 - x,
                0.0, x,
                1.0 / m, 0.0,
            ])
        })
        .rho_gradient(move |_q: &DVector<f64>| {
            let mut d_x = DMatrix::zeros(3, 2);
            d_x[(0, 1)] = -1.0;
            d_x[(1, 1)] = 1.0;
            vec![DMatrix::zeros(3, 2), DMatrix::zeros(3, 2), d_x]
        })
        .control_mode(ControlMode::EulerLagrange)
        .input_map(swap_input_map())
        .frame_depends_on(&[2])
        .chart_guard(|q: &DVector<f64>| q[2] > 0.0 && q[2] < 1.0)
        .build()?;
    Ok((model, CostModel::quadratic(2)))
}

/// Sleigh model with the navigation potential appended to the running
/// cost: `C = (u1^2 + u2^2)/2 + kappa / (2 r^2)`, so the accumulated
/// functional is `1/2 int (u1^2 + u2^2 + V) dt`.
///
/// A trajectory through the exact obstacle center makes the potential
/// singular; integration then aborts with a non-finite-state diagnostic.
pub fn sleigh_with_obstacle(
    params: &SleighParams,
    obstacle: &ObstacleParams,
) -> Result<(MechanicalModel, CostModel)> {
    obstacle.validate()?;
    let (model, cost) = chaplygin_sleigh(params)?;
    Ok((model, attach_obstacle(cost, obstacle)))
}

/// Appends the half-weighted navigation potential of `obstacle` to an
/// existing running cost.
pub fn attach_obstacle(cost: CostModel, obstacle: &ObstacleParams) -> CostModel {
    let term = *obstacle;
    let grad = *obstacle;
    cost.with_state_term(
        move |q: &DVector<f64>| 0.5 * term.value(q[0], q[1]),
        move |q: &DVector<f64>| {
            let dx = q[0] - grad.center[0];
            let dy = q[1] - grad.center[1];
            let r2 = dx * dx + dy * dy;
            let mut out = DVector::zeros(q.len());
            if r2 == 0.0 {
                out[0] = f64::INFINITY;
                out[1] = f64::INFINITY;
            } else {
                let f = -grad.kappa / (r2 * r2);
                out[0] = f * dx;
                out[1] = f * dy;
            }
            out
        },
    )
}

/// One sample of the sleigh's closed-form extremal family on the
/// zero-multiplier branch.
#[derive(Clone, Copy, Debug)]
pub struct SleighExtremalSample {
    pub theta: f64,
    pub x: f64,
    pub y: f64,
    pub y1: f64,
    pub y2: f64,
    pub u1: f64,
    pub u2: f64,
}

/// Closed-form sleigh extremal with integration constants `c = (c3..c8)`,
/// valid on the branch where both planar multipliers vanish:
///
/// ```text
/// theta(t) = (c3 t^3/6 + c4 t^2/2 + c5 t + c6) / J
/// y1(t)    = c3 t^2/2 + c4 t + c5          (third derivative zero)
/// y2(t)    = c7 t + c8                     (second derivative zero)
/// u1(t)    = c7 / m,   u2(t) = b (c3 t + c4) / J
/// ```
///
/// `x(t)` and `y(t)` are the quadratures of `cos(theta) y2 / m` and
/// `sin(theta) y2 / m`, evaluated by adaptive Simpson to 1e-12.
pub fn sleigh_analytic_extremal(c: &[f64; 6], params: &SleighParams, t: f64) -> SleighExtremalSample {
    let [c3, c4, c5, c6, c7, c8] = *c;
    let &SleighParams { m, j, .. } = params;
    let b = params.b();
    let theta_of = move |s: f64| (c3 * s * s * s / 6.0 + c4 * s * s / 2.0 + c5 * s + c6) / j;
    let x = adaptive_simpson(&|s| theta_of(s).cos() * (c7 * s + c8) / m, 0.0, t, 1e-12);
    let y = adaptive_simpson(&|s| theta_of(s).sin() * (c7 * s + c8) / m, 0.0, t, 1e-12);
    SleighExtremalSample {
        theta: theta_of(t),
        x,
        y,
        y1: c3 * t * t / 2.0 + c4 * t + c5,
        y2: c7 * t + c8,
        u1: c7 / m,
        u2: b * (c3 * t + c4) / j,
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    if lo == hi {
        return 0.0;
    }
    fn simpson_rule(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson_rule(a, m, fa, flm, fm);
        let right = simpson_rule(m, b, fm, frm, fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb) = (f(lo), f(hi));
    let fm = f(0.5 * (lo + hi));
    let whole = simpson_rule(lo, hi, fa, fm, fb);
    recurse(f, lo, hi, fa, fm, fb, whole, tol, 40)
}
