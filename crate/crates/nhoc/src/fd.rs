//! Finite-difference helpers shared by the geometry and OCP layers.
//!
//! Everything here is a fourth-order central stencil; what varies is the
//! step scaling. Derivative fallbacks for model data (`rho`, metric,
//! potential) use `h = eps^(1/3) * max(1, |x|)`, which keeps the metricity
//! identity below 1e-8. Derivatives of composed quantities that feed the
//! Hamiltonian flow use the quintic step `eps^(1/5) * max(1, |x|)`, whose
//! roundoff floor (~1e-13) is what the printed-equation comparisons need.

use nalgebra::DVector;

const EPS: f64 = f64::EPSILON;

/// Step for derivative fallbacks of model-supplied maps.
pub fn step_cubic(x: f64) -> f64 {
    EPS.cbrt() * x.abs().max(1.0)
}

/// Step for fourth-order stencils on smooth composed quantities.
pub fn step_quintic(x: f64) -> f64 {
    EPS.powf(0.2) * x.abs().max(1.0)
}

/// Fourth-order central difference of a scalar function.
pub fn central4<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

/// Fourth-order central difference of a vector-valued function.
pub fn central4_vec<F: Fn(f64) -> DVector<f64>>(f: F, x: f64, h: f64) -> DVector<f64> {
    (-f(x + 2.0 * h) + f(x + h) * 8.0 - f(x - h) * 8.0 + f(x - 2.0 * h)) / (12.0 * h)
}

/// Differentiates a uniformly sampled series in time.
///
/// Interior nodes use the second-order central stencil; the two endpoints
/// use one-sided second-order stencils. Needs at least three nodes.
pub fn diff_series(h: f64, values: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let m = values.len();
    assert!(m >= 3, "diff_series needs at least 3 nodes");
    let mut out = Vec::with_capacity(m);
    out.push((&values[0] * (-3.0) + &values[1] * 4.0 - &values[2]) / (2.0 * h));
    for i in 1..m - 1 {
        out.push((&values[i + 1] - &values[i - 1]) / (2.0 * h));
    }
    out.push((&values[m - 1] * 3.0 - &values[m - 2] * 4.0 + &values[m - 3]) / (2.0 * h));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn central4_differentiates_trig() {
        let d = central4(|x: f64| x.sin(), 0.7, step_quintic(0.7));
        assert_abs_diff_eq!(d, 0.7f64.cos(), epsilon = 1e-11);
    }

    #[test]
    fn diff_series_is_second_order_on_cubics() {
        let h = 1e-3;
        let values: Vec<DVector<f64>> = (0..200)
            .map(|i| {
                let t = i as f64 * h;
                DVector::from_vec(vec![t * t, t * t * t])
            })
            .collect();
        let dots = diff_series(h, &values);
        for (i, d) in dots.iter().enumerate() {
            let t = i as f64 * h;
            assert_abs_diff_eq!(d[0], 2.0 * t, epsilon = 1e-9);
            assert_abs_diff_eq!(d[1], 3.0 * t * t, epsilon = 1e-5);
        }
    }
}
