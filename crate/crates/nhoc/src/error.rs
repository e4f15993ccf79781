use thiserror::Error;

/// Errors produced by the geometry, dynamics, OCP and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration point violates the model's chart guard.
    #[error("configuration outside the model's chart domain")]
    ChartViolation,

    /// An integrated trajectory left the chart domain.
    #[error("trajectory left the chart domain at t = {time}")]
    ChartExit { time: f64 },

    /// A trajectory produced a non-finite state (blow-up).
    #[error("state became non-finite at t = {time}")]
    NonFiniteState { time: f64 },

    /// The induced metric on the distribution failed its SPD factorization.
    #[error("induced metric is singular or not positive definite")]
    SingularInducedMetric,

    /// The velocity Hessian of the cost composition is (numerically) singular.
    #[error("singular velocity Hessian (det = {det:e}); system not regular here")]
    SingularHessian { det: f64 },

    /// The Newton iteration inside the Legendre inversion stalled.
    #[error("Legendre inversion did not converge (residual {residual:e} after {iterations} iterations)")]
    LegendreInversion { residual: f64, iterations: usize },

    /// Sampled-path residual evaluation needs at least five grid nodes.
    #[error("grid too coarse for second-order time stencils ({nodes} nodes)")]
    GridTooCoarse { nodes: usize },

    #[error("dimension mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
