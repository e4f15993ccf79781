//! Distribution-adapted differential geometry.
//!
//! A mechanical system lives on an n-dimensional configuration manifold Q
//! with a kinetic-energy metric G (matrix `M(q)`), a potential `V(q)`, and a
//! rank-k velocity-constraint distribution D spanned by the adapted frame
//! `e_A = rho_A^i(q) d/dq^i` (the columns of the n-by-k matrix `rho(q)`).
//! This module computes the objects that the dynamics and optimal-control
//! layers consume: the induced metric `G^D = rho^T M rho`, the G-orthogonal
//! projector `P = rho (G^D)^-1 rho^T M`, the nonholonomic bracket
//! `[[e_A, e_B]] = P [e_A, e_B]`, the Christoffel symbols of the constrained
//! Levi-Civita connection, and the adapted gradient of the potential.
//!
//! All operations are pure functions of `(model, q)`; models are immutable
//! once built and safe to share across threads.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::fd;

type ScalarMap = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type VectorMap = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatrixMap = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type MatrixGradMap = Box<dyn Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;
type GuardMap = Box<dyn Fn(&DVector<f64>) -> bool + Send + Sync>;

/// How control inputs enter the adapted velocity equations.
///
/// `Normalized` adds the inputs directly to the adapted accelerations;
/// `EulerLagrange` treats them as generalized forces on the G^D-weighted
/// (momentum-form) equations, which is the convention of the worked
/// sleigh/gearbox systems. See [`crate::dynamics::controlled_rhs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlMode {
    Normalized,
    EulerLagrange,
}

/// A point of the constraint distribution D in induced coordinates:
/// configuration `q` (length n) and adapted velocity `y` (length k).
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedState {
    pub q: DVector<f64>,
    pub y: DVector<f64>,
}

impl AdaptedState {
    pub fn new(q: DVector<f64>, y: DVector<f64>) -> Self {
        Self { q, y }
    }

    pub fn from_slices(q: &[f64], y: &[f64]) -> Self {
        Self::new(DVector::from_row_slice(q), DVector::from_row_slice(y))
    }

    /// Checks shapes, finiteness and the chart guard against a model.
    pub fn validate(&self, model: &MechanicalModel) -> Result<()> {
        if self.q.len() != model.n || self.y.len() != model.k {
            return Err(Error::ShapeMismatch(format!(
                "state has (n, k) = ({}, {}), model expects ({}, {})",
                self.q.len(),
                self.y.len(),
                model.n,
                model.k
            )));
        }
        if !self.q.iter().chain(self.y.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite state entry".into()));
        }
        model.ensure_chart(&self.q)
    }
}

/// The induced metric `G^D(q) = rho^T M rho` together with its inverse.
///
/// The inverse is obtained from the Cholesky factorization, which is also
/// kept so consumers can solve against `G^D` without forming products with
/// the explicit inverse.
pub struct InducedMetric {
    pub matrix: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl InducedMetric {
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// Dense rank-3 array over the adapted frame, indexed `(a, b, c)` with
/// `a, b, c < k`. Used for the Christoffel symbols `Gamma^A_{BC}` and for
/// the raw Koszul tensor.
#[derive(Clone, Debug)]
pub struct Rank3 {
    k: usize,
    data: Vec<f64>,
}

/// Christoffel symbols `Gamma^A_{BC}(q)` of the constrained connection.
pub type Christoffel = Rank3;

impl Rank3 {
    pub fn zeros(k: usize) -> Self {
        Self { k, data: vec![0.0; k * k * k] }
    }

    pub fn rank(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.k + b) * self.k + c]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, value: f64) {
        self.data[(a * self.k + b) * self.k + c] = value;
    }

    /// Quadratic contraction `out^A = Gamma^A_{BC} y^B y^C`.
    pub fn quadratic(&self, y: &DVector<f64>) -> DVector<f64> {
        let k = self.k;
        DVector::from_fn(k, |a, _| {
            let mut s = 0.0;
            for b in 0..k {
                for c in 0..k {
                    s += self.get(a, b, c) * y[b] * y[c];
                }
            }
            s
        })
    }

    /// Derivative of the quadratic contraction with respect to `y`:
    /// `out_{AE} = Gamma^A_{EC} y^C + Gamma^A_{BE} y^B`.
    pub fn quadratic_jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let k = self.k;
        DMatrix::from_fn(k, k, |a, e| {
            let mut s = 0.0;
            for c in 0..k {
                s += self.get(a, e, c) * y[c];
            }
            for b in 0..k {
                s += self.get(a, b, e) * y[b];
            }
            s
        })
    }
}

/// Immutable description of a nonholonomic mechanical system in a single
/// chart: metric, potential, adapted frame and control conventions.
pub struct MechanicalModel {
    n: usize,
    k: usize,
    metric: MatrixMap,
    dmetric: Option<MatrixGradMap>,
    potential: ScalarMap,
    dpotential: Option<VectorMap>,
    rho: MatrixMap,
    drho: Option<MatrixGradMap>,
    control_mode: ControlMode,
    input_map: DMatrix<f64>,
    input_map_inv: DMatrix<f64>,
    chart_guard: Option<GuardMap>,
    has_potential: bool,
    frame_deps: Option<Vec<usize>>,
}

impl MechanicalModel {
    pub fn builder(n: usize, k: usize) -> MechanicalModelBuilder {
        MechanicalModelBuilder {
            n,
            k,
            metric: None,
            dmetric: None,
            potential: None,
            dpotential: None,
            rho: None,
            drho: None,
            control_mode: ControlMode::Normalized,
            input_map: None,
            chart_guard: None,
            frame_deps: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn control_mode(&self) -> ControlMode {
        self.control_mode
    }

    /// The constant matrix `S` assigning inputs to generalized forces.
    pub fn input_map(&self) -> &DMatrix<f64> {
        &self.input_map
    }

    pub fn input_map_inv(&self) -> &DMatrix<f64> {
        &self.input_map_inv
    }

    pub fn ensure_chart(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "q has length {}, model has n = {}",
                q.len(),
                self.n
            )));
        }
        match &self.chart_guard {
            Some(guard) if !guard(q) => Err(Error::ChartViolation),
            _ => Ok(()),
        }
    }

    pub fn in_chart(&self, q: &DVector<f64>) -> bool {
        self.chart_guard.as_ref().map_or(true, |g| g(q))
    }

    /// Whether a (possibly nonzero) potential was supplied at build time.
    pub fn has_potential(&self) -> bool {
        self.has_potential
    }

    /// Configuration coordinates the frame data may depend on; derivatives
    /// of composed quantities are only stenciled along these.
    pub fn frame_dependent_dims(&self) -> Vec<usize> {
        match &self.frame_deps {
            Some(d) => d.clone(),
            None => (0..self.n).collect(),
        }
    }

    pub fn metric_at(&self, q: &DVector<f64>) -> DMatrix<f64> {
        (self.metric)(q)
    }

    pub fn potential_at(&self, q: &DVector<f64>) -> f64 {
        (self.potential)(q)
    }

    pub fn rho_at(&self, q: &DVector<f64>) -> DMatrix<f64> {
        (self.rho)(q)
    }

    /// `d rho / d q^j` for every j, analytic when supplied, otherwise a
    /// fourth-order central difference with the cubic step.
    pub fn drho_at(&self, q: &DVector<f64>) -> Vec<DMatrix<f64>> {
        match &self.drho {
            Some(f) => f(q),
            None => self.fd_matrix_grad(q, &self.rho),
        }
    }

    pub fn dmetric_at(&self, q: &DVector<f64>) -> Vec<DMatrix<f64>> {
        match &self.dmetric {
            Some(f) => f(q),
            None => self.fd_matrix_grad(q, &self.metric),
        }
    }

    pub fn dpotential_at(&self, q: &DVector<f64>) -> DVector<f64> {
        match &self.dpotential {
            Some(f) => f(q),
            None => DVector::from_fn(self.n, |j, _| {
                fd::central4(
                    |x| {
                        let mut qj = q.clone();
                        qj[j] = x;
                        (self.potential)(&qj)
                    },
                    q[j],
                    fd::step_cubic(q[j]),
                )
            }),
        }
    }

    fn fd_matrix_grad(&self, q: &DVector<f64>, f: &MatrixMap) -> Vec<DMatrix<f64>> {
        (0..self.n)
            .map(|j| {
                let h = fd::step_cubic(q[j]);
                let eval = |x: f64| {
                    let mut qj = q.clone();
                    qj[j] = x;
                    f(&qj)
                };
                (-eval(q[j] + 2.0 * h) + eval(q[j] + h) * 8.0 - eval(q[j] - h) * 8.0
                    + eval(q[j] - 2.0 * h))
                    / (12.0 * h)
            })
            .collect()
    }

    /// Induced metric `(G^D)_{AB} = rho^T M rho` and its inverse.
    pub fn induced_metric(&self, q: &DVector<f64>) -> Result<InducedMetric> {
        self.ensure_chart(q)?;
        let rho = self.rho_at(q);
        let gd = rho.transpose() * self.metric_at(q) * &rho;
        let sym = (&gd + gd.transpose()) * 0.5;
        let chol = Cholesky::new(sym).ok_or(Error::SingularInducedMetric)?;
        let inverse = chol.inverse();
        Ok(InducedMetric { matrix: gd, inverse, chol })
    }

    /// Evaluates and caches every geometric object the dynamics and
    /// optimal-control layers need at a single configuration. The hot
    /// integration paths build one `Frame` per evaluation point instead of
    /// re-deriving the frame data piecemeal.
    pub fn frame(&self, q: &DVector<f64>) -> Result<Frame<'_>> {
        self.ensure_chart(q)?;
        Frame::new(self, q)
    }

    /// Gradient of the induced metric, `d G^D / d q^j` for every j.
    pub fn d_induced_metric(&self, q: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let rho = self.rho_at(q);
        let m = self.metric_at(q);
        let drho = self.drho_at(q);
        let dm = self.dmetric_at(q);
        (0..self.n)
            .map(|j| {
                drho[j].transpose() * &m * &rho
                    + rho.transpose() * &dm[j] * &rho
                    + rho.transpose() * &m * &drho[j]
            })
            .collect()
    }

    /// The G-orthogonal projector `P(q) = rho (G^D)^-1 rho^T M` onto D.
    pub fn orthogonal_projector(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        let gd = self.induced_metric(q)?;
        let rho = self.rho_at(q);
        let rhs = rho.transpose() * self.metric_at(q);
        Ok(rho * gd.solve_matrix(&rhs))
    }

    /// Coordinate components of the plain Lie bracket `[e_a, e_b]` on Q.
    pub fn lie_bracket(&self, a: usize, b: usize, q: &DVector<f64>) -> DVector<f64> {
        let rho = self.rho_at(q);
        let drho = self.drho_at(q);
        lie_bracket_of(self.n, &rho, &drho, a, b)
    }

    /// Adapted components `c^C` of the nonholonomic bracket
    /// `[[e_a, e_b]] = P [e_a, e_b] = c^C e_C`.
    pub fn nonholonomic_bracket(
        &self,
        a: usize,
        b: usize,
        q: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if a >= self.k || b >= self.k {
            return Err(Error::ShapeMismatch(format!(
                "bracket indices ({a}, {b}) out of range for k = {}",
                self.k
            )));
        }
        let gd = self.induced_metric(q)?;
        let lie = self.lie_bracket(a, b, q);
        let rho = self.rho_at(q);
        Ok(gd.solve(&(rho.transpose() * self.metric_at(q) * lie)))
    }

    /// Christoffel symbols of the constrained Levi-Civita connection via the
    /// Koszul formula over the adapted frame, with the nonholonomic bracket
    /// in place of the Lie bracket:
    ///
    /// ```text
    /// 2 G^D(nabla_B e_C, e_D) = e_B(G^D_CD) + e_C(G^D_BD) - e_D(G^D_BC)
    ///     + G^D([[e_B,e_C]], e_D) - G^D([[e_B,e_D]], e_C) - G^D([[e_C,e_D]], e_B)
    /// ```
    ///
    /// This is the unique solution of the connection's symmetry and
    /// metricity properties.
    pub fn christoffel(&self, q: &DVector<f64>) -> Result<Christoffel> {
        Ok(self.frame(q)?.christoffel())
    }

    /// Adapted components of the potential gradient,
    /// `(grad V)^C = (G^D)^{CB} rho_B^i dV/dq^i`, characterized by
    /// `G^D(grad V, X) = X(V)` for every section X of D.
    pub fn grad_potential(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        let gd = self.induced_metric(q)?;
        let rho = self.rho_at(q);
        Ok(gd.solve(&(rho.transpose() * self.dpotential_at(q))))
    }
}

fn lie_bracket_of(
    n: usize,
    rho: &DMatrix<f64>,
    drho: &[DMatrix<f64>],
    a: usize,
    b: usize,
) -> DVector<f64> {
    DVector::from_fn(n, |i, _| {
        let mut s = 0.0;
        for j in 0..n {
            s += rho[(j, a)] * drho[j][(i, b)] - rho[(j, b)] * drho[j][(i, a)];
        }
        s
    })
}

/// All frame data at one configuration point, shared by the hot paths.
///
/// Besides the raw maps this caches the Koszul tensor
///
/// ```text
/// T_{D,BC} = e_B(G^D)_{CD} + e_C(G^D)_{BD} - e_D(G^D)_{BC}
///          + w(B,C)_D - w(B,D)_C - w(C,D)_B,
/// ```
///
/// with `w(A,B) = rho^T M [e_A, e_B]`. The pairing
/// `G^D([[e_A,e_B]], e_D)` equals `w(A,B)_D` directly, so `T` needs no
/// metric inversion, and the momentum-form quadratic term of the dynamics
/// is `G^D_{CA} Gamma^A_{BD} y^B y^D = T(y, y)_C / 2`.
pub struct Frame<'m> {
    model: &'m MechanicalModel,
    pub rho: DMatrix<f64>,
    pub drho: Vec<DMatrix<f64>>,
    pub metric: DMatrix<f64>,
    pub gd_matrix: DMatrix<f64>,
    gd_chol: Cholesky<f64, Dyn>,
    pub koszul: Rank3,
    /// `rho^T dV/dq`, the frame components of the potential differential.
    pub frame_dv: DVector<f64>,
}

impl<'m> Frame<'m> {
    fn new(model: &'m MechanicalModel, q: &DVector<f64>) -> Result<Self> {
        let (n, k) = (model.n, model.k);
        let rho = model.rho_at(q);
        let drho = model.drho_at(q);
        let metric = model.metric_at(q);
        let dmetric = model.dmetric_at(q);

        let rho_t_m = rho.transpose() * &metric;
        let gd = &rho_t_m * &rho;
        let gd_sym = (&gd + gd.transpose()) * 0.5;
        let gd_chol = Cholesky::new(gd_sym).ok_or(Error::SingularInducedMetric)?;

        // dG^D/dq^j, skipping exactly-zero derivative blocks.
        let zero = |m: &DMatrix<f64>| m.iter().all(|v| *v == 0.0);
        let dgd: Vec<DMatrix<f64>> = (0..n)
            .map(|j| {
                let mut s = DMatrix::zeros(k, k);
                if !zero(&drho[j]) {
                    let t = drho[j].transpose() * &metric * &rho;
                    s += &t + t.transpose();
                }
                if !zero(&dmetric[j]) {
                    s += rho.transpose() * &dmetric[j] * &rho;
                }
                s
            })
            .collect();

        // e_A(G^D) and the bracket pairings w(a, b) = rho^T M [e_a, e_b].
        let frame_der: Vec<DMatrix<f64>> = (0..k)
            .map(|a| {
                let mut s = DMatrix::zeros(k, k);
                for j in 0..n {
                    if rho[(j, a)] != 0.0 {
                        s += &dgd[j] * rho[(j, a)];
                    }
                }
                s
            })
            .collect();
        let mut pairings = vec![DVector::zeros(k); k * k];
        for a in 0..k {
            for b in (a + 1)..k {
                let w = &rho_t_m * lie_bracket_of(n, &rho, &drho, a, b);
                pairings[b * k + a] = -&w;
                pairings[a * k + b] = w;
            }
        }

        let mut koszul = Rank3::zeros(k);
        for b in 0..k {
            for c in 0..k {
                for d in 0..k {
                    koszul.set(
                        d,
                        b,
                        c,
                        frame_der[b][(c, d)] + frame_der[c][(b, d)] - frame_der[d][(b, c)]
                            + pairings[b * k + c][d]
                            - pairings[b * k + d][c]
                            - pairings[c * k + d][b],
                    );
                }
            }
        }

        let frame_dv = if model.has_potential() {
            rho.transpose() * model.dpotential_at(q)
        } else {
            DVector::zeros(k)
        };

        Ok(Frame { model, rho, drho, metric, gd_matrix: gd, gd_chol, koszul, frame_dv })
    }

    pub fn model(&self) -> &MechanicalModel {
        self.model
    }

    pub fn gd_solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.gd_chol.solve(rhs)
    }

    /// `T(y, y)_D / 2`, the momentum-form quadratic term.
    pub fn half_koszul_quadratic(&self, y: &DVector<f64>) -> DVector<f64> {
        let k = y.len();
        DVector::from_fn(k, |d, _| {
            let mut s = 0.0;
            for b in 0..k {
                for c in 0..k {
                    s += self.koszul.get(d, b, c) * y[b] * y[c];
                }
            }
            0.5 * s
        })
    }

    /// `d/dy` of [`Frame::half_koszul_quadratic`].
    pub fn half_koszul_jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let k = y.len();
        DMatrix::from_fn(k, k, |d, e| {
            let mut s = 0.0;
            for c in 0..k {
                s += self.koszul.get(d, e, c) * y[c];
            }
            for b in 0..k {
                s += self.koszul.get(d, b, e) * y[b];
            }
            0.5 * s
        })
    }

    /// Christoffel symbols, solving `2 G^D Gamma = T` column by column.
    pub fn christoffel(&self) -> Christoffel {
        let k = self.koszul.rank();
        let mut gamma = Rank3::zeros(k);
        for b in 0..k {
            for c in 0..k {
                let rhs = DVector::from_fn(k, |d, _| self.koszul.get(d, b, c));
                let col = self.gd_chol.solve(&rhs) * 0.5;
                for a in 0..k {
                    gamma.set(a, b, c, col[a]);
                }
            }
        }
        gamma
    }

    /// Free adapted acceleration
    /// `ydot = -Gamma(y, y) - (G^D)^{-1} rho^T dV/dq`, evaluated with a
    /// single solve against `G^D`.
    pub fn free_acceleration(&self, y: &DVector<f64>) -> DVector<f64> {
        -self.gd_solve(&(self.half_koszul_quadratic(y) + &self.frame_dv))
    }
}

pub struct MechanicalModelBuilder {
    n: usize,
    k: usize,
    metric: Option<MatrixMap>,
    dmetric: Option<MatrixGradMap>,
    potential: Option<ScalarMap>,
    dpotential: Option<VectorMap>,
    rho: Option<MatrixMap>,
    drho: Option<MatrixGradMap>,
    control_mode: ControlMode,
    input_map: Option<DMatrix<f64>>,
    chart_guard: Option<GuardMap>,
    frame_deps: Option<Vec<usize>>,
}

impl MechanicalModelBuilder {
    pub fn metric(mut self, f: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.metric = Some(Box::new(f));
        self
    }

    /// Constant metric; also installs its (zero) gradient.
    pub fn metric_constant(mut self, m: DMatrix<f64>) -> Self {
        let n = self.n;
        self.dmetric = Some(Box::new(move |_| vec![DMatrix::zeros(n, n); n]));
        self.metric = Some(Box::new(move |_| m.clone()));
        self
    }

    pub fn metric_gradient(
        mut self,
        f: impl Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        self.dmetric = Some(Box::new(f));
        self
    }

    pub fn potential(mut self, f: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        self.potential = Some(Box::new(f));
        self
    }

    pub fn potential_gradient(
        mut self,
        f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.dpotential = Some(Box::new(f));
        self
    }

    pub fn rho(mut self, f: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.rho = Some(Box::new(f));
        self
    }

    pub fn rho_gradient(
        mut self,
        f: impl Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        self.drho = Some(Box::new(f));
        self
    }

    pub fn control_mode(mut self, mode: ControlMode) -> Self {
        self.control_mode = mode;
        self
    }

    /// Constant invertible matrix assigning control inputs to generalized
    /// forces (`force = S u`). Defaults to the identity.
    pub fn input_map(mut self, s: DMatrix<f64>) -> Self {
        self.input_map = Some(s);
        self
    }

    pub fn chart_guard(mut self, f: impl Fn(&DVector<f64>) -> bool + Send + Sync + 'static) -> Self {
        self.chart_guard = Some(Box::new(f));
        self
    }

    /// Declares that the metric, frame and potential depend only on the
    /// listed configuration coordinates. Purely an evaluation hint for
    /// q-derivatives of composed quantities.
    pub fn frame_depends_on(mut self, dims: &[usize]) -> Self {
        self.frame_deps = Some(dims.to_vec());
        self
    }

    pub fn build(self) -> Result<MechanicalModel> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        if self.k == 0 || self.k > self.n {
            return Err(Error::InvalidParameter(format!(
                "k must satisfy 1 <= k <= n, got k = {}, n = {}",
                self.k, self.n
            )));
        }
        let metric = self.metric.ok_or_else(|| Error::InvalidParameter("metric is required".into()))?;
        let rho = self.rho.ok_or_else(|| Error::InvalidParameter("rho is required".into()))?;
        let input_map = self.input_map.unwrap_or_else(|| DMatrix::identity(self.k, self.k));
        if input_map.nrows() != self.k || input_map.ncols() != self.k {
            return Err(Error::InvalidParameter("input map must be k x k".into()));
        }
        let input_map_inv = input_map
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("input map must be invertible".into()))?;
        let n = self.n;
        // A defaulted (zero) potential gets an exact zero gradient; a
        // user-supplied potential without one falls back to differences.
        let dpotential = match (self.dpotential, self.potential.is_some()) {
            (Some(g), _) => Some(g),
            (None, true) => None,
            (None, false) => Some(Box::new(move |_: &DVector<f64>| DVector::zeros(n)) as VectorMap),
        };
        let has_potential = self.potential.is_some();
        Ok(MechanicalModel {
            n: self.n,
            k: self.k,
            metric,
            dmetric: self.dmetric,
            potential: self.potential.unwrap_or_else(|| Box::new(|_| 0.0)),
            dpotential,
            rho,
            drho: self.drho,
            control_mode: self.control_mode,
            input_map,
            input_map_inv,
            chart_guard: self.chart_guard,
            has_potential,
            frame_deps: self.frame_deps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unconstrained_identity(n: usize) -> MechanicalModel {
        MechanicalModel::builder(n, n)
            .metric_constant(DMatrix::identity(n, n))
            .rho(move |_| DMatrix::identity(n, n))
            .rho_gradient(move |_| vec![DMatrix::zeros(n, n); n])
            .build()
            .unwrap()
    }

    /// n = 3, k = 2 model with a q-dependent frame and metric; analytic
    /// derivatives omitted on purpose to exercise the fallback path.
    fn twisted_model() -> MechanicalModel {
        MechanicalModel::builder(3, 2)
            .metric(|q: &DVector<f64>| {
                DMatrix::from_row_slice(3, 3, &[
                    2.0 + 0.3 * q[2].sin(), 0.2, 0.0,
                    0.2, 1.5, 0.1 * q[0].cos(),
                    0.0, 0.1 * q[0].cos(), 1.0 + 0.1 * q[1] * q[1],
                ])
            })
            .rho(|q: &DVector<f64>| {
                DMatrix::from_row_slice(3, 2, &[
                    1.0, 0.2 * q[2].sin(),
                    0.1 * q[0], 1.0,
                    0.3 * q[1].cos(), 0.4,
                ])
            })
            .build()
            .unwrap()
    }

    fn rand_q(rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn induced_metric_identity_case() {
        let model = unconstrained_identity(3);
        let gd = model.induced_metric(&DVector::zeros(3)).unwrap();
        assert!((gd.matrix - DMatrix::identity(3, 3)).amax() < 1e-15);
        assert!((gd.inverse - DMatrix::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn induced_metric_matches_brute_force_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Fixed full-rank rho and SPD metric M = A^T A + I.
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let m = a.transpose() * &a + DMatrix::identity(3, 3);
        let rho = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let model = {
            let (m, rho) = (m.clone(), rho.clone());
            MechanicalModel::builder(3, 2)
                .metric_constant(m)
                .rho(move |_| rho.clone())
                .build()
                .unwrap()
        };
        let gd = model.induced_metric(&DVector::zeros(3)).unwrap();
        // Independent triple-loop contraction.
        for a_idx in 0..2 {
            for b_idx in 0..2 {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += rho[(i, a_idx)] * m[(i, j)] * rho[(j, b_idx)];
                    }
                }
                assert_abs_diff_eq!(gd.matrix[(a_idx, b_idx)], s, epsilon = 1e-13);
            }
        }
        let prod = &gd.matrix * &gd.inverse;
        assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn projector_is_idempotent_and_self_adjoint() {
        let model = twisted_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = rand_q(&mut rng);
            let p = model.orthogonal_projector(&q).unwrap();
            let m = model.metric_at(&q);
            assert!((&p * &p - &p).amax() < 1e-12, "P^2 != P");
            // Self-adjointness w.r.t. G: P^T M = M P.
            assert!((p.transpose() * &m - &m * &p).amax() < 1e-12);
            // G(Pv, Qw) = 0 for random v, w.
            let v = rand_q(&mut rng);
            let w = rand_q(&mut rng);
            let qproj = DMatrix::identity(3, 3) - &p;
            let g = (&p * v).transpose() * &m * (qproj * w);
            assert_abs_diff_eq!(g[(0, 0)], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn projector_identity_for_full_distribution() {
        let model = unconstrained_identity(4);
        let p = model.orthogonal_projector(&DVector::zeros(4)).unwrap();
        assert!((p - DMatrix::identity(4, 4)).amax() < 1e-13);
    }

    #[test]
    fn bracket_is_skew_and_vanishes_on_diagonal() {
        let model = twisted_model();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let q = rand_q(&mut rng);
            let c01 = model.nonholonomic_bracket(0, 1, &q).unwrap();
            let c10 = model.nonholonomic_bracket(1, 0, &q).unwrap();
            assert!((c01 + c10).amax() < 1e-12);
            let c00 = model.nonholonomic_bracket(0, 0, &q).unwrap();
            assert!(c00.amax() < 1e-12);
        }
    }

    #[test]
    fn christoffel_vanishes_for_constant_frame_and_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rho = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let m = a.transpose() * &a + DMatrix::identity(3, 3);
        let model = MechanicalModel::builder(3, 2)
            .metric_constant(m)
            .rho(move |_| rho.clone())
            .rho_gradient(|_| vec![DMatrix::zeros(3, 2); 3])
            .build()
            .unwrap();
        let gamma = model.christoffel(&DVector::zeros(3)).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    assert_abs_diff_eq!(gamma.get(a, b, c), 0.0, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn connection_symmetry_matches_bracket() {
        let model = twisted_model();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let q = rand_q(&mut rng);
            let gamma = model.christoffel(&q).unwrap();
            let c01 = model.nonholonomic_bracket(0, 1, &q).unwrap();
            for a in 0..2 {
                let skew = gamma.get(a, 0, 1) - gamma.get(a, 1, 0);
                assert_abs_diff_eq!(skew, c01[a], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn connection_is_metric() {
        // e_A(G^D(e_B, e_C)) = G^D(nabla_A e_B, e_C) + G^D(e_B, nabla_A e_C),
        // with the left side evaluated by central differences along q.
        let model = twisted_model();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let q = rand_q(&mut rng);
            let gd = model.induced_metric(&q).unwrap();
            let gamma = model.christoffel(&q).unwrap();
            let rho = model.rho_at(&q);
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        let mut dir = DVector::zeros(3);
                        for j in 0..3 {
                            dir[j] = rho[(j, a)];
                        }
                        let h = 1e-5;
                        let f = |s: f64| {
                            let qq = &q + &dir * s;
                            model.induced_metric(&qq).unwrap().matrix[(b, c)]
                        };
                        let lhs = (f(h) - f(-h)) / (2.0 * h);
                        let mut rhs = 0.0;
                        for e in 0..2 {
                            rhs += gamma.get(e, a, b) * gd.matrix[(e, c)]
                                + gamma.get(e, a, c) * gd.matrix[(b, e)];
                        }
                        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn grad_potential_zero_for_zero_potential() {
        let model = twisted_model();
        let g = model.grad_potential(&DVector::from_vec(vec![0.3, -0.2, 0.5])).unwrap();
        assert!(g.amax() < 1e-12);
    }

    #[test]
    fn grad_potential_duality_identity() {
        // G^D(grad V, e_A) = e_A(V) = rho_A^i dV/dq^i.
        let model = MechanicalModel::builder(3, 2)
            .metric(|q: &DVector<f64>| {
                DMatrix::from_row_slice(3, 3, &[
                    2.0, 0.1, 0.0,
                    0.1, 1.0 + 0.2 * q[0] * q[0], 0.0,
                    0.0, 0.0, 1.5,
                ])
            })
            .rho(|q: &DVector<f64>| {
                DMatrix::from_row_slice(3, 2, &[
                    1.0, 0.0,
                    0.0, 1.0 + 0.1 * q[2],
                    0.5 * q[0].sin(), 0.2,
                ])
            })
            .potential(|q: &DVector<f64>| 0.5 * q[0] * q[0] + q[1] * q[2].cos())
            .build()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let q = rand_q(&mut rng);
            let grad = model.grad_potential(&q).unwrap();
            let gd = model.induced_metric(&q).unwrap();
            let rho = model.rho_at(&q);
            let dv = model.dpotential_at(&q);
            for a in 0..2 {
                let lhs = (gd.matrix.row(a) * &grad)[(0, 0)];
                let rhs = (rho.column(a).transpose() * &dv)[(0, 0)];
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn chart_guard_rejects_outside_points() {
        let model = MechanicalModel::builder(2, 1)
            .metric_constant(DMatrix::identity(2, 2))
            .rho(|_| DMatrix::from_column_slice(2, 1, &[1.0, 0.0]))
            .chart_guard(|q: &DVector<f64>| q[0] > 0.0)
            .build()
            .unwrap();
        let bad = DVector::from_vec(vec![-1.0, 0.0]);
        assert!(matches!(model.induced_metric(&bad), Err(Error::ChartViolation)));
        assert!(model.induced_metric(&DVector::from_vec(vec![0.5, 0.0])).is_ok());
    }

    #[test]
    fn builder_rejects_bad_rank() {
        let builder = MechanicalModel::builder(2, 3)
            .metric_constant(DMatrix::identity(2, 2))
            .rho(|_| DMatrix::zeros(2, 3));
        assert!(builder.build().is_err());
    }
}
