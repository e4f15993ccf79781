//! The optimal-control layer.
//!
//! A running cost `C(q, y, u)` composed with inverse dynamics yields the
//! constrained Lagrangian on the second-order constraint manifold,
//!
//! ```text
//! L(q, y, ydot) = C(q, y, u(q, y, ydot)),
//! ```
//!
//! whose extremals are equivalently characterized three ways, all
//! implemented here: the multiplier equations on the path level
//! ([`lagrangian_extremal_residual`]), the generated Lagrangian-submanifold
//! equations on T*TD ([`sigma_residual`]), and — when the velocity Hessian
//! of `L` is nonsingular — Hamilton's equations on T*D for
//!
//! ```text
//! H(q, y, p) = p_A ydot^A(q, y, p) + p_i rho_A^i y^A - L(q, y, ydot(q, y, p))
//! ```
//!
//! ([`hamiltonian`], [`hamilton_rhs`]). The multiplier/momentum
//! identification `p_i = lambda_i = gamma_i` is baked into the data model;
//! no separate multiplier state exists on the Hamiltonian side.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::inverse_dynamics_with;
use crate::error::{Error, Result};
use crate::fd;
use crate::geometry::{AdaptedState, ControlMode, Frame, MechanicalModel};

type CostFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
type CostGradFn =
    Box<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type CostHessFn =
    Box<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Running cost `C(q, y, u)` with the derivative data the extremal
/// equations need. State-dependent terms (navigation potentials) carry
/// their own analytic gradients.
pub struct CostModel {
    k: usize,
    running: CostFn,
    du: CostGradFn,
    duu: CostHessFn,
    dq: Option<CostGradFn>,
    dy: Option<CostGradFn>,
    quadratic_in_u: bool,
}

impl CostModel {
    pub fn new(
        k: usize,
        running: impl Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync + 'static,
        du: impl Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        duu: impl Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            k,
            running: Box::new(running),
            du: Box::new(du),
            duu: Box::new(duu),
            dq: None,
            dy: None,
            quadratic_in_u: false,
        }
    }

    /// The force-minimizing cost `C = 1/2 |u|^2`.
    pub fn quadratic(k: usize) -> Self {
        let mut cost = Self::new(
            k,
            |_, _, u| 0.5 * u.dot(u),
            |_, _, u| u.clone(),
            move |_, _, _| DMatrix::identity(k, k),
        );
        cost.quadratic_in_u = true;
        cost
    }

    /// Adds a state cost `term(q)` (e.g. a navigation potential) together
    /// with its gradient.
    pub fn with_state_term(
        mut self,
        term: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        let base = self.running;
        self.running = Box::new(move |q, y, u| base(q, y, u) + term(q));
        self.dq = match self.dq {
            Some(prev) => Some(Box::new(move |q, y, u| prev(q, y, u) + grad(q))),
            None => Some(Box::new(move |q, _, _| grad(q))),
        };
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_quadratic_in_u(&self) -> bool {
        self.quadratic_in_u
    }

    pub fn evaluate(&self, q: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.running)(q, y, u)
    }

    pub fn du(&self, q: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.du)(q, y, u)
    }

    pub fn duu(&self, q: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        (self.duu)(q, y, u)
    }

    pub fn dq(&self, q: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.dq {
            Some(f) => f(q, y, u),
            None => DVector::zeros(q.len()),
        }
    }

    pub fn dy(&self, q: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.dy {
            Some(f) => f(q, y, u),
            None => DVector::zeros(y.len()),
        }
    }
}

/// Coordinates `(q, y, ydot)` on the second-order constraint manifold.
/// The base constraint `qdot = rho(q) y` is implicit, never stored.
#[derive(Clone, Debug)]
pub struct SecondOrderPoint {
    pub q: DVector<f64>,
    pub y: DVector<f64>,
    pub ydot: DVector<f64>,
}

impl SecondOrderPoint {
    pub fn new(q: DVector<f64>, y: DVector<f64>, ydot: DVector<f64>) -> Self {
        Self { q, y, ydot }
    }
}

/// A point of T*D carried by the extremal flow: `(q, y, p_i, p_A)`.
/// The base momenta `p_i` are the Lagrange multipliers of the path
/// formulation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtremalState {
    pub q: DVector<f64>,
    pub y: DVector<f64>,
    pub p_base: DVector<f64>,
    pub p_fiber: DVector<f64>,
}

impl ExtremalState {
    pub fn new(q: DVector<f64>, y: DVector<f64>, p_base: DVector<f64>, p_fiber: DVector<f64>) -> Self {
        Self { q, y, p_base, p_fiber }
    }
}

/// A point of T*TD in the coordinates
/// `(q, y, qdot, ydot, mu_i, mu_A, gamma_i, gamma_A)`; membership of the
/// generated Lagrangian submanifold is measured by [`sigma_residual`].
#[derive(Clone, Debug)]
pub struct SigmaPoint {
    pub q: DVector<f64>,
    pub y: DVector<f64>,
    pub qdot: DVector<f64>,
    pub ydot: DVector<f64>,
    pub mu_base: DVector<f64>,
    pub mu_fiber: DVector<f64>,
    pub gamma_base: DVector<f64>,
    pub gamma_fiber: DVector<f64>,
}

/// Residual blocks of the path-level extremal equations, one entry per
/// grid node.
pub struct ExtremalResidual {
    /// `lambdadot_i - dL/dq^i + lambda_j (drho_A^j/dq^i) y^A`
    pub base: Vec<DVector<f64>>,
    /// `d/dt(dL/dydot^A) - dL/dy^A + rho_A^i lambda_i`
    pub fiber: Vec<DVector<f64>>,
    /// `qdot^i - rho_A^i y^A`
    pub admissibility: Vec<DVector<f64>>,
}

impl ExtremalResidual {
    pub fn max_norm(&self) -> f64 {
        self.block_norms().into_iter().fold(0.0, f64::max)
    }

    pub fn block_norms(&self) -> [f64; 3] {
        let sup = |vs: &Vec<DVector<f64>>| vs.iter().map(|v| v.amax()).fold(0.0, f64::max);
        [sup(&self.base), sup(&self.fiber), sup(&self.admissibility)]
    }
}

/// Residual blocks of the Lagrangian-submanifold equations at one point.
pub struct SigmaResidual {
    pub base: DVector<f64>,
    pub fiber: DVector<f64>,
    pub legendre: DVector<f64>,
    pub admissibility: DVector<f64>,
}

impl SigmaResidual {
    pub fn max_norm(&self) -> f64 {
        [&self.base, &self.fiber, &self.legendre, &self.admissibility]
            .iter()
            .map(|v| v.amax())
            .fold(0.0, f64::max)
    }

    /// Euclidean norm over all four blocks.
    pub fn norm(&self) -> f64 {
        [&self.base, &self.fiber, &self.legendre, &self.admissibility]
            .iter()
            .map(|v| v.norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}

/// Determinants reported by the regularity test.
#[derive(Clone, Copy, Debug)]
pub struct Regularity {
    /// `det(d^2 L / d ydot d ydot)`
    pub det_velocity_hessian: f64,
    /// `det(d^2 C / du du)` at the corresponding input
    pub det_control_hessian: f64,
}

/// The linear map `W = du/dydot`, constant in `ydot`:
/// `S^-1` in normalized mode, `S^-1 G^D` in Euler-Lagrange mode.
fn velocity_weight(frame: &Frame<'_>) -> DMatrix<f64> {
    let model = frame.model();
    match model.control_mode() {
        ControlMode::Normalized => model.input_map_inv().clone(),
        ControlMode::EulerLagrange => model.input_map_inv() * &frame.gd_matrix,
    }
}

/// The constrained Lagrangian `L = C(q, y, u(q, y, ydot))`.
pub fn ocp_lagrangian(model: &MechanicalModel, cost: &CostModel, pt: &SecondOrderPoint) -> Result<f64> {
    let frame = model.frame(&pt.q)?;
    let u = inverse_dynamics_with(&frame, &pt.y, &pt.ydot);
    Ok(cost.evaluate(&pt.q, &pt.y, &u))
}

/// `dL/dydot`, i.e. the fiber momentum of the Legendre transform.
pub fn dl_dydot(model: &MechanicalModel, cost: &CostModel, pt: &SecondOrderPoint) -> Result<DVector<f64>> {
    let frame = model.frame(&pt.q)?;
    Ok(dl_dydot_with(&frame, cost, pt))
}

fn dl_dydot_with(frame: &Frame<'_>, cost: &CostModel, pt: &SecondOrderPoint) -> DVector<f64> {
    let u = inverse_dynamics_with(frame, &pt.y, &pt.ydot);
    velocity_weight(frame).transpose() * cost.du(&pt.q, &pt.y, &u)
}

/// `dL/dy` via the chain rule through the control reconstruction.
pub fn dl_dy(model: &MechanicalModel, cost: &CostModel, pt: &SecondOrderPoint) -> Result<DVector<f64>> {
    let frame = model.frame(&pt.q)?;
    Ok(dl_dy_with(&frame, cost, pt))
}

fn dl_dy_with(frame: &Frame<'_>, cost: &CostModel, pt: &SecondOrderPoint) -> DVector<f64> {
    let model = frame.model();
    let u = inverse_dynamics_with(frame, &pt.y, &pt.ydot);
    // d(force)/dy is the Koszul-quadratic Jacobian in momentum form; in
    // normalized mode it is solved back through G^D.
    let du_dy = match model.control_mode() {
        ControlMode::Normalized => {
            let jac = frame.half_koszul_jacobian(&pt.y);
            let mut solved = DMatrix::zeros(model.k(), model.k());
            for c in 0..model.k() {
                solved.set_column(c, &frame.gd_solve(&jac.column(c).into_owned()));
            }
            model.input_map_inv() * solved
        }
        ControlMode::EulerLagrange => model.input_map_inv() * frame.half_koszul_jacobian(&pt.y),
    };
    cost.dy(&pt.q, &pt.y, &u) + du_dy.transpose() * cost.du(&pt.q, &pt.y, &u)
}

/// `dL/dq`. The control reconstruction's q-derivative is evaluated by
/// fourth-order central differences along the coordinates the frame data
/// depends on; state-cost gradients stay analytic.
pub fn dl_dq(model: &MechanicalModel, cost: &CostModel, pt: &SecondOrderPoint) -> Result<DVector<f64>> {
    let frame = model.frame(&pt.q)?;
    dl_dq_with(&frame, cost, pt)
}

fn dl_dq_with(frame: &Frame<'_>, cost: &CostModel, pt: &SecondOrderPoint) -> Result<DVector<f64>> {
    let model = frame.model();
    let u = inverse_dynamics_with(frame, &pt.y, &pt.ydot);
    let du_cost = cost.du(&pt.q, &pt.y, &u);
    let mut out = cost.dq(&pt.q, &pt.y, &u);
    for i in model.frame_dependent_dims() {
        let h = fd::step_quintic(pt.q[i]);
        let eval = |x: f64| -> Result<DVector<f64>> {
            let mut qi = pt.q.clone();
            qi[i] = x;
            let f = model.frame(&qi)?;
            Ok(inverse_dynamics_with(&f, &pt.y, &pt.ydot))
        };
        let col = (-eval(pt.q[i] + 2.0 * h)? + eval(pt.q[i] + h)? * 8.0
            - eval(pt.q[i] - h)? * 8.0
            + eval(pt.q[i] - 2.0 * h)?)
            / (12.0 * h);
        out[i] += du_cost.dot(&col);
    }
    Ok(out)
}

/// Path-level extremal residual of the multiplier equations on a uniform
/// grid. `lambdas` are the base multipliers `lambda_i(t)`, identified with
/// the base momenta on the Hamiltonian side.
pub fn lagrangian_extremal_residual(
    model: &MechanicalModel,
    cost: &CostModel,
    times: &[f64],
    states: &[AdaptedState],
    lambdas: &[DVector<f64>],
) -> Result<ExtremalResidual> {
    let m = times.len();
    if m < 5 {
        return Err(Error::GridTooCoarse { nodes: m });
    }
    if states.len() != m || lambdas.len() != m {
        return Err(Error::ShapeMismatch("times/states/lambdas lengths differ".into()));
    }
    let h = times[1] - times[0];
    let qs: Vec<DVector<f64>> = states.iter().map(|s| s.q.clone()).collect();
    let ys: Vec<DVector<f64>> = states.iter().map(|s| s.y.clone()).collect();
    let qdots = fd::diff_series(h, &qs);
    let ydots = fd::diff_series(h, &ys);
    let lamdots = fd::diff_series(h, lambdas);

    let mut gammas = Vec::with_capacity(m);
    let mut dlqs = Vec::with_capacity(m);
    let mut dlys = Vec::with_capacity(m);
    for i in 0..m {
        let pt = SecondOrderPoint::new(qs[i].clone(), ys[i].clone(), ydots[i].clone());
        gammas.push(dl_dydot(model, cost, &pt)?);
        dlqs.push(dl_dq(model, cost, &pt)?);
        dlys.push(dl_dy(model, cost, &pt)?);
    }
    let gammadots = fd::diff_series(h, &gammas);

    let mut base = Vec::with_capacity(m);
    let mut fiber = Vec::with_capacity(m);
    let mut admissibility = Vec::with_capacity(m);
    for i in 0..m {
        let rho = model.rho_at(&qs[i]);
        let drho = model.drho_at(&qs[i]);
        let frame_term = DVector::from_fn(model.n(), |idx, _| {
            lambdas[i].dot(&(&drho[idx] * &ys[i]))
        });
        base.push(&lamdots[i] - &dlqs[i] + frame_term);
        fiber.push(&gammadots[i] - &dlys[i] + rho.transpose() * &lambdas[i]);
        admissibility.push(&qdots[i] - rho * &ys[i]);
    }
    Ok(ExtremalResidual { base, fiber, admissibility })
}

/// Pointwise residual of the Lagrangian-submanifold equations on T*TD.
pub fn sigma_residual(model: &MechanicalModel, cost: &CostModel, pt: &SigmaPoint) -> Result<SigmaResidual> {
    let so = SecondOrderPoint::new(pt.q.clone(), pt.y.clone(), pt.ydot.clone());
    let rho = model.rho_at(&pt.q);
    let drho = model.drho_at(&pt.q);
    let frame_term = DVector::from_fn(model.n(), |idx, _| {
        pt.gamma_base.dot(&(&drho[idx] * &pt.y))
    });
    Ok(SigmaResidual {
        base: &pt.mu_base + frame_term - dl_dq(model, cost, &so)?,
        fiber: &pt.mu_fiber + rho.transpose() * &pt.gamma_base - dl_dy(model, cost, &so)?,
        legendre: &pt.gamma_fiber - dl_dydot(model, cost, &so)?,
        admissibility: &pt.qdot - rho * &pt.y,
    })
}

/// Legendre transform of the second-order system:
/// `(q, y, ydot, gamma_i) -> (q, y, p_i = gamma_i, p_A = dL/dydot^A)`.
pub fn legendre_transform(
    model: &MechanicalModel,
    cost: &CostModel,
    pt: &SecondOrderPoint,
    gamma_base: &DVector<f64>,
) -> Result<ExtremalState> {
    let p_fiber = dl_dydot(model, cost, pt)?;
    Ok(ExtremalState::new(pt.q.clone(), pt.y.clone(), gamma_base.clone(), p_fiber))
}

/// Regularity test: the system is regular at `pt` exactly when the
/// velocity Hessian of `L` is nonsingular, equivalently when the control
/// Hessian of `C` is. A zero determinant is a valid (flagged) return.
pub fn regularity_check(model: &MechanicalModel, cost: &CostModel, pt: &SecondOrderPoint) -> Result<Regularity> {
    let frame = model.frame(&pt.q)?;
    let u = inverse_dynamics_with(&frame, &pt.y, &pt.ydot);
    let duu = cost.duu(&pt.q, &pt.y, &u);
    let w = velocity_weight(&frame);
    let hess = w.transpose() * &duu * &w;
    Ok(Regularity {
        det_velocity_hessian: hess.determinant(),
        det_control_hessian: duu.determinant(),
    })
}

/// Inverts the fiber Legendre relation `p_A = dL/dydot^A` for `ydot`.
///
/// Quadratic costs invert in closed form (the relation is affine); general
/// costs use a damped Newton iteration warm-started at the free
/// acceleration (tolerance 1e-12, at most 50 iterations).
pub fn invert_legendre(
    model: &MechanicalModel,
    cost: &CostModel,
    q: &DVector<f64>,
    y: &DVector<f64>,
    p_fiber: &DVector<f64>,
) -> Result<DVector<f64>> {
    let frame = model.frame(q)?;
    invert_legendre_with(&frame, cost, q, y, p_fiber)
}

fn invert_legendre_with(
    frame: &Frame<'_>,
    cost: &CostModel,
    q: &DVector<f64>,
    y: &DVector<f64>,
    p_fiber: &DVector<f64>,
) -> Result<DVector<f64>> {
    let model = frame.model();
    let w = velocity_weight(frame);
    let k = model.k();
    let u0 = inverse_dynamics_with(frame, y, &DVector::zeros(k));

    if cost.is_quadratic_in_u() {
        let duu = cost.duu(q, y, &u0);
        let hess = w.transpose() * duu * &w;
        let det = hess.determinant();
        let rhs = p_fiber - w.transpose() * cost.du(q, y, &u0);
        return hess
            .lu()
            .solve(&rhs)
            .ok_or(Error::SingularHessian { det });
    }

    let mut ydot = frame.free_acceleration(y);
    let mut residual = f64::INFINITY;
    for _ in 0..50 {
        let u = inverse_dynamics_with(frame, y, &ydot);
        let g = w.transpose() * cost.du(q, y, &u) - p_fiber;
        residual = g.amax();
        if residual <= 1e-12 {
            return Ok(ydot);
        }
        let hess = w.transpose() * cost.duu(q, y, &u) * &w;
        let det = hess.determinant();
        let step = hess.lu().solve(&g).ok_or(Error::SingularHessian { det })?;
        // Backtracking on the residual norm.
        let mut alpha = 1.0;
        loop {
            let trial = &ydot - &step * alpha;
            let u_t = inverse_dynamics_with(frame, y, &trial);
            let g_t = w.transpose() * cost.du(q, y, &u_t) - p_fiber;
            if g_t.amax() < residual || alpha < 1e-6 {
                ydot = trial;
                break;
            }
            alpha *= 0.5;
        }
    }
    Err(Error::LegendreInversion { residual, iterations: 50 })
}

/// The Hamiltonian on T*D.
pub fn hamiltonian(model: &MechanicalModel, cost: &CostModel, ex: &ExtremalState) -> Result<f64> {
    let frame = model.frame(&ex.q)?;
    let ydot = invert_legendre_with(&frame, cost, &ex.q, &ex.y, &ex.p_fiber)?;
    let u = inverse_dynamics_with(&frame, &ex.y, &ydot);
    let lag = cost.evaluate(&ex.q, &ex.y, &u);
    Ok(ex.p_fiber.dot(&ydot) + ex.p_base.dot(&(&frame.rho * &ex.y)) - lag)
}

/// Hamilton's equations on T*D:
///
/// ```text
/// qdot^i = rho_A^i y^A
/// ydot^A = ydot^A(q, y, p)
/// pdot_i = dL/dq^i - p_j (drho_A^j/dq^i) y^A
/// pdot_A = dL/dy^A - p_j rho_A^j
/// ```
pub fn hamilton_rhs(
    model: &MechanicalModel,
    cost: &CostModel,
    ex: &ExtremalState,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
    let frame = model.frame(&ex.q)?;
    let ydot = invert_legendre_with(&frame, cost, &ex.q, &ex.y, &ex.p_fiber)?;
    let pt = SecondOrderPoint::new(ex.q.clone(), ex.y.clone(), ydot);
    let qdot = &frame.rho * &ex.y;
    let frame_term =
        DVector::from_fn(model.n(), |idx, _| ex.p_base.dot(&(&frame.drho[idx] * &ex.y)));
    let pdot_base = dl_dq_with(&frame, cost, &pt)? - frame_term;
    let pdot_fiber = dl_dy_with(&frame, cost, &pt) - frame.rho.transpose() * &ex.p_base;
    Ok((qdot, pt.ydot, pdot_base, pdot_fiber))
}
