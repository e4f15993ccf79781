use nalgebra::DVector;
use nhoc::models::{chaplygin_sleigh, sleigh_with_obstacle, cvt, CvtParams, ObstacleParams, SleighParams};
use nhoc::geometry::AdaptedState;
use nhoc::solver::{plant_instance, shoot, sweep, min_planar_distance, BoundaryConditions, ShootingConfig};
use std::time::Instant;

fn main() {
    let sp = SleighParams { m: 1.0, j: 1.0, a: 0.5 };
    let (model, cost) = chaplygin_sleigh(&sp).unwrap();

    // 1. Planted instance recovery.
    let t0 = Instant::now();
    let state0 = AdaptedState::from_slices(&[0.1, -0.2, 0.3], &[0.4, 0.6]);
    let p_true = DVector::from_vec(vec![0.2, -0.1, 0.15, 0.1, -0.2]);
    let bc = plant_instance(&model, &cost, &state0, &p_true, 1.0, 1e-3).unwrap();
    let cfg = ShootingConfig::default();
    let res = shoot(&model, &cost, &bc, &cfg).unwrap();
    println!("planted sleigh: converged={} iters={} restarts={} err={:.2e} time={:?}",
        res.diagnostics.converged, res.diagnostics.iterations, res.diagnostics.restarts,
        (&res.costates0 - &p_true).amax(), t0.elapsed());

    // 2. Paper-style rest-to-rest BVP (kappa = 0).
    let t0 = Instant::now();
    let bc = BoundaryConditions {
        state0: AdaptedState::from_slices(&[0.0, 0.0, 0.0], &[0.0, 0.0]),
        state_t: AdaptedState::from_slices(&[1.0, 1.0, 0.0], &[0.0, 0.0]),
        t_final: 1.0,
    };
    let res = shoot(&model, &cost, &bc, &cfg).unwrap();
    println!("rest-to-rest kappa=0: converged={} iters={} restarts={} resid={:.2e} J={:.6} time={:?}",
        res.diagnostics.converged, res.diagnostics.iterations, res.diagnostics.restarts,
        res.diagnostics.residual_norm, res.trajectory.cost.unwrap(), t0.elapsed());
    let dist0 = min_planar_distance(&res.trajectory, [0.5, 0.5]);
    println!("  min distance to (0.5,0.5): {:.4}", dist0);

    // 3. kappa sweep.
    let t0 = Instant::now();
    let make_cost = |kappa: f64| {
        sleigh_with_obstacle(&sp, &ObstacleParams { kappa, center: [0.5, 0.5] }).unwrap().1
    };
    let entries = sweep(&model, &make_cost, &bc, &cfg, &[0.0, 0.01, 0.1, 0.25, 0.5], Some([0.5, 0.5]));
    for e in &entries {
        println!("  kappa={:<5} converged={} J={:?} min_dist={:?} iters={}",
            e.parameter, e.converged, e.cost, e.min_distance, e.iterations);
    }
    println!("sweep time: {:?}", t0.elapsed());

    // 4. CVT planted.
    let t0 = Instant::now();
    let (model, cost) = cvt(&CvtParams { m: 1.0, j1: 1.0, j2: 1.0 }).unwrap();
    let state0 = AdaptedState::from_slices(&[0.2, -0.1, 0.5], &[0.3, 0.4]);
    let p_true = DVector::from_vec(vec![0.1, -0.15, 0.2, 0.1, -0.1]);
    let bc = plant_instance(&model, &cost, &state0, &p_true, 1.0, 1e-3).unwrap();
    let res = shoot(&model, &cost, &bc, &cfg).unwrap();
    println!("planted cvt: converged={} iters={} restarts={} err={:.2e} time={:?}",
        res.diagnostics.converged, res.diagnostics.iterations, res.diagnostics.restarts,
        (&res.costates0 - &p_true).amax(), t0.elapsed());
}
