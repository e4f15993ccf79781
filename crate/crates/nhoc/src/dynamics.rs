//! Forward and inverse dynamics on the constraint distribution.
//!
//! The free motion of the system is governed by
//!
//! ```text
//! qdot^i = rho_A^i(q) y^A
//! ydot^C = -Gamma^C_{AB} y^A y^B - (G^D)^{CB} rho_B^i dV/dq^i
//! ```
//!
//! Controls enter according to the model's [`ControlMode`] and its input
//! map `S` (`force = S u`):
//!
//! * `Normalized`: `ydot = ydot_free + S u` — inputs are adapted
//!   accelerations.
//! * `EulerLagrange`: `G^D (ydot - ydot_free) = S u` — inputs are
//!   generalized forces on the momentum-form equations, the convention the
//!   worked systems in [`crate::models`] use.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::geometry::{AdaptedState, ControlMode, MechanicalModel};
use crate::solver::{self, Method, StateLayout, Trajectory};

/// Control inputs `u^A`; their interpretation is fixed by the model's
/// control mode and input map.
pub type ControlVector = DVector<f64>;

/// Residual of the admissibility condition, `qdot - rho(q) y`.
///
/// Zero exactly when the base velocity lies in the distribution with
/// adapted components `y`.
pub fn admissibility_residual(
    model: &MechanicalModel,
    q: &DVector<f64>,
    y: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<DVector<f64>> {
    if q.len() != model.n() || qdot.len() != model.n() || y.len() != model.k() {
        return Err(Error::ShapeMismatch("admissibility_residual input sizes".into()));
    }
    Ok(qdot - model.rho_at(q) * y)
}

/// Right-hand side of the free (uncontrolled) equations of motion.
pub fn free_rhs(model: &MechanicalModel, state: &AdaptedState) -> Result<(DVector<f64>, DVector<f64>)> {
    state.validate(model)?;
    let frame = model.frame(&state.q)?;
    Ok((&frame.rho * &state.y, frame.free_acceleration(&state.y)))
}

/// Right-hand side of the fully actuated equations of motion.
///
/// With `u = 0` this returns exactly the free right-hand side.
pub fn controlled_rhs(
    model: &MechanicalModel,
    state: &AdaptedState,
    u: &ControlVector,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if u.len() != model.k() {
        return Err(Error::ShapeMismatch("control vector length".into()));
    }
    state.validate(model)?;
    let frame = model.frame(&state.q)?;
    let qdot = &frame.rho * &state.y;
    let ydot_free = frame.free_acceleration(&state.y);
    if u.iter().all(|&v| v == 0.0) {
        return Ok((qdot, ydot_free));
    }
    let force = model.input_map() * u;
    let ydot = match model.control_mode() {
        ControlMode::Normalized => ydot_free + force,
        ControlMode::EulerLagrange => ydot_free + frame.gd_solve(&force),
    };
    Ok((qdot, ydot))
}

/// Control reconstruction: the input producing a prescribed adapted
/// acceleration `ydot` at `(q, y)`.
///
/// Inverse of [`controlled_rhs`] in the `ydot` slot; the round trip holds to
/// machine precision in both control modes.
pub fn inverse_dynamics(
    model: &MechanicalModel,
    q: &DVector<f64>,
    y: &DVector<f64>,
    ydot: &DVector<f64>,
) -> Result<ControlVector> {
    if ydot.len() != model.k() {
        return Err(Error::ShapeMismatch("ydot length".into()));
    }
    let frame = model.frame(q)?;
    Ok(inverse_dynamics_with(&frame, y, ydot))
}

/// [`inverse_dynamics`] against an already-computed frame.
///
/// In Euler-Lagrange mode the momentum-form force is assembled directly
/// from the Koszul tensor, `G^D ydot + T(y,y)/2 + rho^T dV/dq`, with no
/// solve against the induced metric.
pub fn inverse_dynamics_with(
    frame: &crate::geometry::Frame<'_>,
    y: &DVector<f64>,
    ydot: &DVector<f64>,
) -> ControlVector {
    let model = frame.model();
    let force = match model.control_mode() {
        ControlMode::Normalized => {
            ydot - frame.free_acceleration(y)
        }
        ControlMode::EulerLagrange => {
            &frame.gd_matrix * ydot + frame.half_koszul_quadratic(y) + &frame.frame_dv
        }
    };
    model.input_map_inv() * force
}

/// Restricted mechanical energy `1/2 G^D(y, y) + V(q)`, conserved along
/// free trajectories.
pub fn restricted_energy(model: &MechanicalModel, state: &AdaptedState) -> Result<f64> {
    let gd = model.induced_metric(&state.q)?;
    Ok(0.5 * (state.y.transpose() * &gd.matrix * &state.y)[(0, 0)] + model.potential_at(&state.q))
}

/// Integrates the free flow from `state0` over `[0, T]` with fixed step
/// `h` (RK4). States are stored as `(q, y)` concatenated, `q` first.
pub fn integrate_free(
    model: &MechanicalModel,
    state0: &AdaptedState,
    t_final: f64,
    h: f64,
) -> Result<Trajectory> {
    state0.validate(model)?;
    if t_final <= 0.0 || h <= 0.0 || h > t_final {
        return Err(Error::InvalidParameter(format!(
            "need 0 < h <= T, got h = {h}, T = {t_final}"
        )));
    }
    let layout = StateLayout::adapted(model.n(), model.k());
    let x0 = layout.pack_adapted(state0);
    let rhs = |_t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        let state = layout.unpack_adapted(x);
        let (qdot, ydot) = free_rhs(model, &state)?;
        Ok(layout.pack_parts(&[qdot, ydot]))
    };
    solver::integrate(&rhs, &x0, t_final, h, Method::Rk4, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{chaplygin_sleigh, cvt, CvtParams, SleighParams};
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sleigh() -> (MechanicalModel, crate::ocp::CostModel) {
        chaplygin_sleigh(&SleighParams { m: 1.0, j: 1.0, a: 0.5 }).unwrap()
    }

    #[test]
    fn admissibility_zero_for_admissible_velocity() {
        let (model, _) = sleigh();
        let q = DVector::from_vec(vec![0.4, -0.2, 0.9]);
        let y = DVector::from_vec(vec![0.3, 0.7]);
        // qdot = (cos(theta) y2 / m, sin(theta) y2 / m, y1 / J)
        let qdot = DVector::from_vec(vec![0.9f64.cos() * 0.7, 0.9f64.sin() * 0.7, 0.3]);
        let r = admissibility_residual(&model, &q, &y, &qdot).unwrap();
        assert!(r.amax() < 1e-15);

        let rest = admissibility_residual(
            &model,
            &q,
            &DVector::zeros(2),
            &DVector::zeros(3),
        )
        .unwrap();
        assert!(rest.amax() == 0.0);
    }

    #[test]
    fn admissibility_matches_direct_substitution() {
        let (model, _) = sleigh();
        let theta = std::f64::consts::FRAC_PI_2;
        let q = DVector::from_vec(vec![0.0, 0.0, theta]);
        let y = DVector::from_vec(vec![0.4, -0.8]);
        let qdot = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let r = admissibility_residual(&model, &q, &y, &qdot).unwrap();
        assert_abs_diff_eq!(r[0], 1.0 - theta.cos() * (-0.8), epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], -theta.sin() * (-0.8), epsilon = 1e-15);
        assert_abs_diff_eq!(r[2], -0.4, epsilon = 1e-15);
    }

    #[test]
    fn sleigh_free_accelerations_vanish() {
        let (model, _) = sleigh();
        let state = AdaptedState::from_slices(&[0.3, -0.1, 0.7], &[0.5, -0.9]);
        let (_, ydot) = free_rhs(&model, &state).unwrap();
        assert!(ydot.amax() < 1e-13);
    }

    #[test]
    fn equilibrium_at_rest() {
        let (model, _) = cvt(&CvtParams { m: 1.0, j1: 1.0, j2: 1.0 }).unwrap();
        let state = AdaptedState::from_slices(&[0.0, 0.0, 0.5], &[0.0, 0.0]);
        let (qdot, ydot) = free_rhs(&model, &state).unwrap();
        assert!(qdot.amax() == 0.0);
        assert!(ydot.amax() < 1e-15);
    }

    #[test]
    fn cvt_free_equation_value() {
        // At (x, y1, y2) = (0.3, 0.7, -0.2) with unit parameters:
        // A(0.3) = 0.4, B(0.3) = 0.58, ydot2 = 0.4*0.7*(-0.2)/0.58.
        let (model, _) = cvt(&CvtParams { m: 1.0, j1: 1.0, j2: 1.0 }).unwrap();
        let state = AdaptedState::from_slices(&[0.1, 0.2, 0.3], &[0.7, -0.2]);
        let (_, ydot) = free_rhs(&model, &state).unwrap();
        assert_abs_diff_eq!(ydot[0], 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(ydot[1], 0.4 * 0.7 * (-0.2) / 0.58, epsilon = 1e-13);
    }

    #[test]
    fn controlled_with_zero_input_is_free_bitwise() {
        let (model, _) = cvt(&CvtParams { m: 1.3, j1: 0.8, j2: 1.7 }).unwrap();
        let state = AdaptedState::from_slices(&[0.4, -0.6, 0.45], &[0.2, 0.9]);
        let free = free_rhs(&model, &state).unwrap();
        let ctl = controlled_rhs(&model, &state, &DVector::zeros(2)).unwrap();
        assert_eq!(free.0, ctl.0);
        assert_eq!(free.1, ctl.1);
    }

    #[test]
    fn sleigh_controlled_equations() {
        // b ydot1 / J = u2, ydot2 / m = u1.
        let params = SleighParams { m: 1.4, j: 0.9, a: 0.6 };
        let b = params.b();
        let (model, _) = chaplygin_sleigh(&params).unwrap();
        let state = AdaptedState::from_slices(&[0.1, 0.2, -0.4], &[0.3, 0.8]);
        let u = DVector::from_vec(vec![0.25, -0.5]);
        let (_, ydot) = controlled_rhs(&model, &state, &u).unwrap();
        assert_abs_diff_eq!(ydot[0], params.j * u[1] / b, epsilon = 1e-13);
        assert_abs_diff_eq!(ydot[1], params.m * u[0], epsilon = 1e-13);
    }

    #[test]
    fn cvt_controlled_equations() {
        // u1 = ydot2 B(x) - y1 y2 A(x)/m, u2 = ydot1 / m.
        let params = CvtParams { m: 1.2, j1: 0.7, j2: 1.5 };
        let (model, _) = cvt(&params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = rng.random_range(0.15..0.85);
            let state = AdaptedState::from_slices(
                &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), x],
                &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            );
            let u = DVector::from_vec(vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            let (_, ydot) = controlled_rhs(&model, &state, &u).unwrap();
            let a = params.j1 * (1.0 - x) - params.j2 * x;
            let b = params.j1 * (1.0 - x).powi(2) + params.j2 * x * x;
            let y = &state.y;
            assert_abs_diff_eq!(ydot[1] * b - y[0] * y[1] * a / params.m, u[0], epsilon = 1e-12);
            assert_abs_diff_eq!(ydot[0] / params.m, u[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_dynamics_of_free_motion_is_zero() {
        let (model, _) = cvt(&CvtParams { m: 1.0, j1: 2.0, j2: 0.5 }).unwrap();
        let state = AdaptedState::from_slices(&[0.3, 0.1, 0.6], &[0.4, -0.7]);
        let (_, ydot) = free_rhs(&model, &state).unwrap();
        let u = inverse_dynamics(&model, &state.q, &state.y, &ydot).unwrap();
        assert!(u.amax() < 1e-13);
    }

    #[test]
    fn sleigh_inverse_dynamics_value() {
        // b = 0.5, J = 1, ydot1 = 2 -> u2 = b ydot1 / J = 1.
        let m = 2.0_f64;
        let params = SleighParams { m, j: 1.0, a: (0.5 / m).sqrt() };
        assert_abs_diff_eq!(params.b(), 0.5, epsilon = 1e-15);
        let (model, _) = chaplygin_sleigh(&params).unwrap();
        let q = DVector::from_vec(vec![0.0, 0.0, 0.3]);
        let y = DVector::from_vec(vec![0.1, 0.2]);
        let ydot = DVector::from_vec(vec![2.0, 0.0]);
        let u = inverse_dynamics(&model, &q, &y, &ydot).unwrap();
        assert_abs_diff_eq!(u[1], 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(u[0], 0.0, epsilon = 1e-13);
    }

    #[test]
    fn inverse_dynamics_round_trip_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [ControlMode::EulerLagrange, ControlMode::Normalized] {
            let model = MechanicalModel::builder(3, 2)
                .metric(|q: &DVector<f64>| {
                    nalgebra::DMatrix::from_row_slice(3, 3, &[
                        1.5, 0.0, 0.2 * q[1].sin(),
                        0.0, 2.0, 0.0,
                        0.2 * q[1].sin(), 0.0, 1.0,
                    ])
                })
                .rho(|q: &DVector<f64>| {
                    nalgebra::DMatrix::from_row_slice(3, 2, &[
                        1.0, 0.3 * q[2],
                        0.0, 1.0,
                        0.2 * q[0].cos(), 0.1,
                    ])
                })
                .potential(|q: &DVector<f64>| 0.3 * q[0] * q[0] + 0.1 * q[2])
                .control_mode(mode)
                .build()
                .unwrap();
            for _ in 0..10 {
                let q = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                let y = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let ydot = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let u = inverse_dynamics(&model, &q, &y, &ydot).unwrap();
                let state = AdaptedState::new(q, y);
                let (_, ydot_back) = controlled_rhs(&model, &state, &u).unwrap();
                assert!((ydot_back - ydot).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn sleigh_pure_translation_and_rotation() {
        let params = SleighParams { m: 1.0, j: 1.0, a: 0.5 };
        let (model, _) = chaplygin_sleigh(&params).unwrap();
        // y2 = m: straight line x(t) = t.
        let s0 = AdaptedState::from_slices(&[0.0, 0.0, 0.0], &[0.0, params.m]);
        let traj = integrate_free(&model, &s0, 1.0, 1e-3).unwrap();
        let last = traj.states.last().unwrap();
        assert_abs_diff_eq!(last[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(last[1], 0.0, epsilon = 1e-12);
        // y1 = J: pure rotation theta(t) = t.
        let s0 = AdaptedState::from_slices(&[0.0, 0.0, 0.0], &[params.j, 0.0]);
        let traj = integrate_free(&model, &s0, 1.0, 1e-3).unwrap();
        let last = traj.states.last().unwrap();
        assert_abs_diff_eq!(last[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(last[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn free_flow_conserves_energy() {
        let (model, _) = sleigh();
        let s0 = AdaptedState::from_slices(&[0.0, 0.0, 0.2], &[0.8, 1.1]);
        let e0 = restricted_energy(&model, &s0).unwrap();
        let traj = integrate_free(&model, &s0, 10.0, 1e-3).unwrap();
        let mut drift: f64 = 0.0;
        for x in traj.states.iter().step_by(100) {
            let s = traj.layout.unpack_adapted(x);
            let e = restricted_energy(&model, &s).unwrap();
            drift = drift.max(((e - e0) / e0.abs().max(1.0)).abs());
        }
        assert!(drift <= 1e-9, "energy drift {drift}");
    }

    #[test]
    fn admissibility_preserved_at_second_order() {
        let (model, _) = sleigh();
        let s0 = AdaptedState::from_slices(&[0.0, 0.0, 0.1], &[0.9, 0.7]);
        let residual_at = |h: f64| -> f64 {
            let traj = integrate_free(&model, &s0, 1.0, h).unwrap();
            let qdots = crate::fd::diff_series(
                traj.times[1] - traj.times[0],
                &traj.states.iter().map(|x| x.rows(0, 3).into_owned()).collect::<Vec<_>>(),
            );
            let mut worst: f64 = 0.0;
            for (i, x) in traj.states.iter().enumerate() {
                let s = traj.layout.unpack_adapted(x);
                let r = admissibility_residual(&model, &s.q, &s.y, &qdots[i]).unwrap();
                worst = worst.max(r.amax());
            }
            worst
        };
        let r1 = residual_at(1e-2);
        let r2 = residual_at(5e-3);
        let c = r1 / 1e-4;
        println!("admissibility residual constant fit: C = {c:.3}");
        // Halving h should shrink the residual by about 4.
        assert!(r2 <= c * (5e-3f64).powi(2) * 1.5, "r1 = {r1}, r2 = {r2}");
    }
}
