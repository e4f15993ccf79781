//! Fixed-step integration of the free, controlled and extremal flows, and
//! an indirect (shooting) solver for the two-point boundary value problem
//! posed by boundary data on the distribution.
//!
//! The BVP unknowns are exactly the `n + k` initial costates of the
//! extremal flow; `shoot` runs a damped Newton iteration on them with a
//! forward finite-difference Jacobian (columns evaluated in parallel).
//! Multiple shooting (`segments > 1`) adds the interior knot states as
//! unknowns and continuity residuals as equations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AdaptedState, MechanicalModel};
use crate::ocp::{self, CostModel, ExtremalState};

/// Explicit fixed-step methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Heun,
    Euler,
}

/// Describes how flat solver states map onto `(q, y[, p_base, p_fiber])`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateLayout {
    pub n: usize,
    pub k: usize,
    pub extremal: bool,
}

impl StateLayout {
    pub fn adapted(n: usize, k: usize) -> Self {
        Self { n, k, extremal: false }
    }

    pub fn extremal(n: usize, k: usize) -> Self {
        Self { n, k, extremal: true }
    }

    pub fn dim(&self) -> usize {
        if self.extremal {
            2 * (self.n + self.k)
        } else {
            self.n + self.k
        }
    }

    pub fn pack_parts(&self, parts: &[DVector<f64>]) -> DVector<f64> {
        let len: usize = parts.iter().map(|p| p.len()).sum();
        let mut out = DVector::zeros(len);
        let mut at = 0;
        for p in parts {
            out.rows_mut(at, p.len()).copy_from(p);
            at += p.len();
        }
        out
    }

    pub fn q_of(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.n).into_owned()
    }

    pub fn y_of(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(self.n, self.k).into_owned()
    }

    pub fn pack_adapted(&self, s: &AdaptedState) -> DVector<f64> {
        self.pack_parts(&[s.q.clone(), s.y.clone()])
    }

    pub fn unpack_adapted(&self, x: &DVector<f64>) -> AdaptedState {
        AdaptedState::new(self.q_of(x), self.y_of(x))
    }

    pub fn pack_extremal(&self, s: &ExtremalState) -> DVector<f64> {
        self.pack_parts(&[s.q.clone(), s.y.clone(), s.p_base.clone(), s.p_fiber.clone()])
    }

    pub fn unpack_extremal(&self, x: &DVector<f64>) -> ExtremalState {
        let nk = self.n + self.k;
        ExtremalState::new(
            self.q_of(x),
            self.y_of(x),
            x.rows(nk, self.n).into_owned(),
            x.rows(nk + self.n, self.k).into_owned(),
        )
    }
}

/// A sampled flow on a uniform grid, with optional reconstructed controls
/// and an accumulated cost value.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Option<Vec<DVector<f64>>>,
    pub cost: Option<f64>,
    pub layout: StateLayout,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn step(&self) -> f64 {
        if self.times.len() >= 2 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    pub fn last_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }
}

fn rk_step(
    rhs: &dyn Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
    t: f64,
    x: &DVector<f64>,
    h: f64,
    method: Method,
) -> Result<DVector<f64>> {
    match method {
        Method::Euler => Ok(x + rhs(t, x)? * h),
        Method::Heun => {
            let k1 = rhs(t, x)?;
            let k2 = rhs(t + h, &(x + &k1 * h))?;
            Ok(x + (k1 + k2) * (h / 2.0))
        }
        Method::Rk4 => {
            let k1 = rhs(t, x)?;
            let k2 = rhs(t + 0.5 * h, &(x + &k1 * (0.5 * h)))?;
            let k3 = rhs(t + 0.5 * h, &(x + &k2 * (0.5 * h)))?;
            let k4 = rhs(t + h, &(x + &k3 * h))?;
            Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
        }
    }
}

/// Integrates `xdot = rhs(t, x)` over `[0, T]` with a fixed step.
///
/// The requested step is rounded so the grid divides `T` uniformly. Chart
/// violations and non-finite states abort with the offending time.
pub fn integrate(
    rhs: &dyn Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
    x0: &DVector<f64>,
    t_final: f64,
    h: f64,
    method: Method,
    layout: StateLayout,
) -> Result<Trajectory> {
    if t_final <= 0.0 || h <= 0.0 {
        return Err(Error::InvalidParameter("need T > 0 and h > 0".into()));
    }
    let steps = ((t_final / h).round() as usize).max(1);
    let h_eff = t_final / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    let mut times = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    times.push(0.0);
    let mut x = x0.clone();
    for i in 0..steps {
        let t = i as f64 * h_eff;
        x = rk_step(rhs, t, &x, h_eff, method).map_err(|e| match e {
            Error::ChartViolation => Error::ChartExit { time: t },
            other => other,
        })?;
        let t_next = (i + 1) as f64 * h_eff;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { time: t_next });
        }
        states.push(x.clone());
        times.push(t_next);
    }
    Ok(Trajectory { times, states, controls: None, cost: None, layout })
}

/// Composite Simpson rule on a uniform grid; an odd interval count is
/// finished with the 3/8 rule.
pub fn simpson(values: &[f64], h: f64) -> f64 {
    let m = values.len().saturating_sub(1);
    match m {
        0 => 0.0,
        1 => 0.5 * h * (values[0] + values[1]),
        _ => {
            let even_end = if m % 2 == 0 { m } else { m - 3 };
            let mut total = 0.0;
            let mut i = 0;
            while i + 2 <= even_end {
                total += h / 3.0 * (values[i] + 4.0 * values[i + 1] + values[i + 2]);
                i += 2;
            }
            if m % 2 != 0 {
                if m >= 3 {
                    let j = m - 3;
                    total += 3.0 * h / 8.0
                        * (values[j] + 3.0 * values[j + 1] + 3.0 * values[j + 2] + values[j + 3]);
                } else {
                    total += 0.5 * h * (values[m - 1] + values[m]);
                }
            }
            total
        }
    }
}

pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    h * (0.5 * values[0] + inner + 0.5 * values[values.len() - 1])
}

/// Two-point boundary data on the distribution.
#[derive(Clone, Debug)]
pub struct BoundaryConditions {
    pub state0: AdaptedState,
    pub state_t: AdaptedState,
    pub t_final: f64,
}

impl BoundaryConditions {
    pub fn validate(&self, model: &MechanicalModel) -> Result<()> {
        if self.t_final <= 0.0 {
            return Err(Error::InvalidParameter("horizon T must be positive".into()));
        }
        self.state0.validate(model)?;
        self.state_t.validate(model)
    }
}

/// Shooting solver settings.
#[derive(Clone, Debug)]
pub struct ShootingConfig {
    pub h: f64,
    pub method: Method,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub fd_step: f64,
    /// Line-search contraction factor.
    pub damping: f64,
    /// Smallest accepted line-search fraction before declaring stagnation.
    pub min_step: f64,
    pub segments: usize,
    pub initial_costate_guess: Option<DVector<f64>>,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            method: Method::Rk4,
            newton_tol: 1e-8,
            newton_max_iter: 60,
            fd_step: 1e-6,
            damping: 0.5,
            min_step: 1e-6,
            segments: 1,
            initial_costate_guess: None,
        }
    }
}

/// Convergence record of a shooting run.
#[derive(Clone, Debug)]
pub struct ShootDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    pub residual_history: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub cost_simpson: f64,
    pub cost_trapezoid: f64,
    pub restarts: usize,
}

/// Result of a shooting run: the extremal trajectory (with reconstructed
/// controls and accumulated cost), the converged initial costates and the
/// Newton diagnostics.
#[derive(Debug)]
pub struct ShootResult {
    pub trajectory: Trajectory,
    pub costates0: DVector<f64>,
    pub diagnostics: ShootDiagnostics,
}

/// Integrates the extremal flow of `(model, cost)` from an initial
/// extremal state.
pub fn integrate_extremal(
    model: &MechanicalModel,
    cost: &CostModel,
    ex0: &ExtremalState,
    t_final: f64,
    h: f64,
    method: Method,
) -> Result<Trajectory> {
    let layout = StateLayout::extremal(model.n(), model.k());
    let rhs = extremal_rhs(model, cost, layout);
    integrate(&rhs, &layout.pack_extremal(ex0), t_final, h, method, layout)
}

fn extremal_rhs<'a>(
    model: &'a MechanicalModel,
    cost: &'a CostModel,
    layout: StateLayout,
) -> impl Fn(f64, &DVector<f64>) -> Result<DVector<f64>> + 'a {
    move |_t, x| {
        let ex = layout.unpack_extremal(x);
        let (qdot, ydot, pb, pf) = ocp::hamilton_rhs(model, cost, &ex)?;
        Ok(layout.pack_parts(&[qdot, ydot, pb, pf]))
    }
}

/// Builds a boundary-value problem whose solution is known: integrate the
/// extremal flow from `(state0, costates0)` and read off the final state.
pub fn plant_instance(
    model: &MechanicalModel,
    cost: &CostModel,
    state0: &AdaptedState,
    costates0: &DVector<f64>,
    t_final: f64,
    h: f64,
) -> Result<BoundaryConditions> {
    let ex0 = ExtremalState::new(
        state0.q.clone(),
        state0.y.clone(),
        costates0.rows(0, model.n()).into_owned(),
        costates0.rows(model.n(), model.k()).into_owned(),
    );
    let traj = integrate_extremal(model, cost, &ex0, t_final, h, Method::Rk4)?;
    let last = traj.layout.unpack_extremal(traj.last_state());
    Ok(BoundaryConditions {
        state0: state0.clone(),
        state_t: AdaptedState::new(last.q, last.y),
        t_final,
    })
}

struct ShootProblem<'a> {
    model: &'a MechanicalModel,
    cost: &'a CostModel,
    bc: &'a BoundaryConditions,
    cfg: &'a ShootingConfig,
    layout: StateLayout,
    nk: usize,
}

impl<'a> ShootProblem<'a> {
    fn unknown_dim(&self) -> usize {
        self.nk + (self.cfg.segments - 1) * 2 * self.nk
    }

    fn segment_span(&self) -> f64 {
        self.bc.t_final / self.cfg.segments as f64
    }

    fn initial_extremal(&self, costates: &DVector<f64>) -> DVector<f64> {
        self.layout.pack_parts(&[
            self.bc.state0.q.clone(),
            self.bc.state0.y.clone(),
            costates.rows(0, self.model.n()).into_owned(),
            costates.rows(self.model.n(), self.model.k()).into_owned(),
        ])
    }

    fn fly_segment(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        let rhs = extremal_rhs(self.model, self.cost, self.layout);
        let traj = integrate(&rhs, x0, self.segment_span(), self.cfg.h, self.cfg.method, self.layout)?;
        Ok(traj.last_state().clone())
    }

    /// Shooting residual: continuity defects at interior knots followed by
    /// the terminal `(q, y)` mismatch.
    fn residual(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let segs = self.cfg.segments;
        let mut out = DVector::zeros(self.unknown_dim());
        let mut x = self.initial_extremal(&z.rows(0, self.nk).into_owned());
        for s in 0..segs {
            let end = self.fly_segment(&x)?;
            if s + 1 < segs {
                let knot = z.rows(self.nk + s * 2 * self.nk, 2 * self.nk).into_owned();
                out.rows_mut(s * 2 * self.nk, 2 * self.nk).copy_from(&(&end - &knot));
                x = knot;
            } else {
                let target = self
                    .layout
                    .pack_parts(&[self.bc.state_t.q.clone(), self.bc.state_t.y.clone()]);
                let reached = end.rows(0, self.nk).into_owned();
                out.rows_mut((segs - 1) * 2 * self.nk, self.nk)
                    .copy_from(&(reached - target));
            }
        }
        Ok(out)
    }

    /// Forward-difference Jacobian; a failing forward perturbation falls
    /// back to a backward one.
    fn jacobian(&self, z: &DVector<f64>, f0: &DVector<f64>) -> Result<DMatrix<f64>> {
        let dim = self.unknown_dim();
        let cols: Vec<Result<DVector<f64>>> = (0..dim)
            .into_par_iter()
            .map(|j| {
                let delta = self.cfg.fd_step * z[j].abs().max(1.0);
                let mut zp = z.clone();
                zp[j] += delta;
                match self.residual(&zp) {
                    Ok(fp) => Ok((fp - f0) / delta),
                    Err(_) => {
                        let mut zm = z.clone();
                        zm[j] -= delta;
                        let fm = self.residual(&zm)?;
                        Ok((f0 - fm) / delta)
                    }
                }
            })
            .collect();
        let mut jac = DMatrix::zeros(dim, dim);
        for (j, col) in cols.into_iter().enumerate() {
            jac.set_column(j, &col?);
        }
        Ok(jac)
    }

    /// Default unknown vector: requested costate guess (or zeros) plus
    /// knot states read from the guess trajectory.
    fn initial_unknowns(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.unknown_dim());
        if let Some(guess) = &self.cfg.initial_costate_guess {
            z.rows_mut(0, self.nk).copy_from(guess);
        }
        if self.cfg.segments > 1 {
            let mut x = self.initial_extremal(&z.rows(0, self.nk).into_owned());
            for s in 0..self.cfg.segments - 1 {
                x = match self.fly_segment(&x) {
                    Ok(end) => end,
                    Err(_) => x,
                };
                z.rows_mut(self.nk + s * 2 * self.nk, 2 * self.nk).copy_from(&x);
            }
        }
        z
    }
}

/// Solves the two-point BVP by damped Newton shooting on the initial
/// costates.
///
/// Non-convergence is not an error: the best iterate and its residual
/// history are returned with `converged = false`. A singular Jacobian or a
/// stalled line search triggers a bounded number of deterministic restarts
/// around the current best iterate (the endpoint map of a system starting
/// at rest is singular at exactly zero costates, so the all-zero default
/// guess needs this).
pub fn shoot(
    model: &MechanicalModel,
    cost: &CostModel,
    bc: &BoundaryConditions,
    cfg: &ShootingConfig,
) -> Result<ShootResult> {
    bc.validate(model)?;
    if cfg.segments == 0 {
        return Err(Error::InvalidParameter("segments must be >= 1".into()));
    }
    let nk = model.n() + model.k();
    if let Some(g) = &cfg.initial_costate_guess {
        if g.len() != nk {
            return Err(Error::ShapeMismatch(format!(
                "initial costate guess has length {}, expected {}",
                g.len(),
                nk
            )));
        }
    }
    let layout = StateLayout::extremal(model.n(), model.k());
    let problem = ShootProblem { model, cost, bc, cfg, layout, nk };

    let mut z = problem.initial_unknowns();
    let mut best_z = z.clone();
    let mut best_norm = f64::INFINITY;
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut iterations = 0;
    let mut restarts = 0;
    let max_restarts = 6;
    let mut converged = false;

    let restart_from = |base: &DVector<f64>, attempt: usize| -> DVector<f64> {
        // Deterministic spread around the best iterate so a singular
        // linearization cannot pin the iteration at a degenerate point.
        let scale = 0.15 * (attempt as f64 + 1.0);
        let mut out = base.clone();
        for i in 0..out.len() {
            let phase = (attempt * 31 + i * 7 + 1) as f64;
            out[i] += scale * phase.sin();
        }
        out
    };

    let mut f = problem.residual(&z);
    while f.is_err() && restarts < max_restarts {
        restarts += 1;
        z = restart_from(&best_z, restarts);
        f = problem.residual(&z);
    }

    'newton: while iterations < cfg.newton_max_iter {
        let f0 = match &f {
            Ok(v) => v.clone(),
            Err(_) => break 'newton,
        };
        let norm = f0.amax();
        history.push(norm);
        if norm < best_norm {
            best_norm = norm;
            best_z = z.clone();
        }
        if norm <= cfg.newton_tol {
            converged = true;
            break 'newton;
        }
        iterations += 1;

        let step = problem
            .jacobian(&z, &f0)
            .ok()
            .and_then(|jac| jac.lu().solve(&(-&f0)));
        let step = match step {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                if restarts < max_restarts {
                    restarts += 1;
                    z = restart_from(&best_z, restarts);
                    f = problem.residual(&z);
                    continue 'newton;
                }
                break 'newton;
            }
        };

        let mut alpha = 1.0;
        loop {
            let trial = &z + &step * alpha;
            match problem.residual(&trial) {
                Ok(ft) if ft.amax() < norm => {
                    steps.push(alpha);
                    z = trial;
                    f = Ok(ft);
                    break;
                }
                _ => {
                    alpha *= cfg.damping;
                    if alpha < cfg.min_step {
                        // Stalled; restart if budget remains.
                        if restarts < max_restarts {
                            restarts += 1;
                            z = restart_from(&best_z, restarts);
                            f = problem.residual(&z);
                            continue 'newton;
                        }
                        break 'newton;
                    }
                }
            }
        }
    }

    if !converged {
        z = best_z.clone();
    }
    let costates0 = z.rows(0, nk).into_owned();

    // Final pass: a single fine trajectory with controls and cost.
    let rhs = extremal_rhs(model, cost, layout);
    let mut trajectory = integrate(
        &rhs,
        &problem.initial_extremal(&costates0),
        bc.t_final,
        cfg.h,
        cfg.method,
        layout,
    )?;
    let mut controls = Vec::with_capacity(trajectory.len());
    let mut running = Vec::with_capacity(trajectory.len());
    for x in &trajectory.states {
        let ex = layout.unpack_extremal(x);
        let ydot = ocp::invert_legendre(model, cost, &ex.q, &ex.y, &ex.p_fiber)?;
        let u = crate::dynamics::inverse_dynamics(model, &ex.q, &ex.y, &ydot)?;
        running.push(cost.evaluate(&ex.q, &ex.y, &u));
        controls.push(u);
    }
    let h_eff = trajectory.step();
    let cost_simpson = simpson(&running, h_eff);
    let cost_trapezoid = trapezoid(&running, h_eff);
    trajectory.controls = Some(controls);
    trajectory.cost = Some(cost_simpson);

    let residual_norm = match problem.residual(&z) {
        Ok(fz) => fz.amax(),
        Err(_) => best_norm,
    };
    Ok(ShootResult {
        trajectory,
        costates0,
        diagnostics: ShootDiagnostics {
            converged,
            iterations,
            residual_norm,
            residual_history: history,
            step_sizes: steps,
            cost_simpson,
            cost_trapezoid,
            restarts,
        },
    })
}

/// One row of a parameter sweep.
#[derive(Debug)]
pub struct SweepEntry {
    pub parameter: f64,
    pub converged: bool,
    pub cost: Option<f64>,
    pub min_distance: Option<f64>,
    pub iterations: usize,
    pub result: Option<ShootResult>,
}

/// Minimum planar distance of the trajectory's first two configuration
/// coordinates to a center point.
pub fn min_planar_distance(traj: &Trajectory, center: [f64; 2]) -> f64 {
    traj.states
        .iter()
        .map(|x| {
            let dx = x[0] - center[0];
            let dy = x[1] - center[1];
            (dx * dx + dy * dy).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Sweeps a one-parameter cost family over `params`, warm-starting each
/// solve from the previous converged costates. If a warm-started solve
/// fails, the gap is bridged by bisecting the parameter interval a bounded
/// number of times. Failures are recorded and the sweep continues.
pub fn sweep(
    model: &MechanicalModel,
    make_cost: &(dyn Fn(f64) -> CostModel + Sync),
    bc: &BoundaryConditions,
    cfg: &ShootingConfig,
    params: &[f64],
    distance_center: Option<[f64; 2]>,
) -> Vec<SweepEntry> {
    let mut entries = Vec::with_capacity(params.len());
    let mut warm: Option<(f64, DVector<f64>)> = None;

    for &p in params {
        let outcome = solve_with_continuation(model, make_cost, bc, cfg, p, &mut warm, 0);
        let entry = match outcome {
            Ok(result) => {
                let converged = result.diagnostics.converged;
                if converged {
                    warm = Some((p, result.costates0.clone()));
                }
                SweepEntry {
                    parameter: p,
                    converged,
                    cost: result.trajectory.cost,
                    min_distance: distance_center.map(|c| min_planar_distance(&result.trajectory, c)),
                    iterations: result.diagnostics.iterations,
                    result: Some(result),
                }
            }
            Err(_) => SweepEntry {
                parameter: p,
                converged: false,
                cost: None,
                min_distance: None,
                iterations: 0,
                result: None,
            },
        };
        entries.push(entry);
    }
    entries
}

fn solve_with_continuation(
    model: &MechanicalModel,
    make_cost: &(dyn Fn(f64) -> CostModel + Sync),
    bc: &BoundaryConditions,
    cfg: &ShootingConfig,
    target: f64,
    warm: &mut Option<(f64, DVector<f64>)>,
    depth: usize,
) -> Result<ShootResult> {
    let mut local = cfg.clone();
    if let Some((_, costates)) = warm {
        local.initial_costate_guess = Some(costates.clone());
    }
    let cost = make_cost(target);
    let result = shoot(model, &cost, bc, &local, )?;
    if result.diagnostics.converged || depth >= 5 {
        return Ok(result);
    }
    // Bridge from the last converged parameter through the midpoint.
    let from = warm.as_ref().map(|(p, _)| *p).unwrap_or(0.0);
    let mid = 0.5 * (from + target);
    if (mid - target).abs() < 1e-12 || (mid - from).abs() < 1e-12 {
        return Ok(result);
    }
    let mid_result = solve_with_continuation(model, make_cost, bc, cfg, mid, warm, depth + 1)?;
    if mid_result.diagnostics.converged {
        *warm = Some((mid, mid_result.costates0.clone()));
    }
    solve_with_continuation(model, make_cost, bc, cfg, target, warm, depth + 1)
}
