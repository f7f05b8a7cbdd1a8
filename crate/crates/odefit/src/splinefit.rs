//! Cubic B-spline representation of the latent curve x(t).
//!
//! One shared clamped basis serves all state coordinates (separate coefficient
//! columns). Fitting comes in two flavours: plain least squares, and least
//! squares plus an integrated ODE-fidelity penalty
//!
//! ```text
//! sum_i ||y_i - x(t_i)||^2 + lambda * int ||x'(t) - f(x(t), t; theta)||^2 dt
//! ```
//!
//! solved by Gauss-Newton with a backtracking line search. The integral is a
//! composite Simpson rule, by default on a grid five times denser than the
//! observations. [`gcv_score`] scores a smoothing level by generalized
//! cross-validation with the trace of the linearized smoother as the
//! effective degrees of freedom.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{OdeSystem, TimeGrid, Trajectory};
use crate::simulate::Dataset;

/// Spline order (cubic).
const ORDER: usize = 4;

/// Gauss-Newton iteration cap for the penalized fit.
const GN_MAX_ITERS: usize = 100;

/// Gauss-Newton gradient tolerance.
const GN_GRAD_TOL: f64 = 1e-8;

/// Density factor of the default Simpson grid relative to the observations.
const DEFAULT_QUAD_FACTOR: usize = 5;

/// Clamped cubic B-spline basis on `[t0, t1]` with strictly increasing
/// interior knots; `k = interior + 4` basis functions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineBasis {
    knots: Vec<f64>,
    interior: Vec<f64>,
    t0: f64,
    t1: f64,
    k: usize,
}

impl SplineBasis {
    pub fn cubic(t0: f64, t1: f64, interior: Vec<f64>) -> Result<Self> {
        if !t0.is_finite() || !t1.is_finite() || t0 >= t1 {
            return Err(Error::InvalidInput(format!(
                "basis domain requires t0 < t1, got [{t0}, {t1}]"
            )));
        }
        if interior.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("interior knots must be strictly increasing".into()));
        }
        if interior.iter().any(|&t| t <= t0 || t >= t1 || !t.is_finite()) {
            return Err(Error::InvalidInput(
                "interior knots must lie strictly inside the domain".into(),
            ));
        }
        let k = interior.len() + ORDER;
        let mut knots = Vec::with_capacity(k + ORDER);
        knots.extend(std::iter::repeat(t0).take(ORDER));
        knots.extend(interior.iter().copied());
        knots.extend(std::iter::repeat(t1).take(ORDER));
        Ok(Self { knots, interior, t0, t1, k })
    }

    /// Equally spaced interior knots.
    pub fn cubic_uniform(t0: f64, t1: f64, n_interior: usize) -> Result<Self> {
        let h = (t1 - t0) / (n_interior + 1) as f64;
        let interior = (1..=n_interior).map(|i| t0 + h * i as f64).collect();
        Self::cubic(t0, t1, interior)
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < self.t0 || t > self.t1 {
            return Err(Error::InvalidInput(format!(
                "t = {t} outside basis domain [{}, {}]",
                self.t0, self.t1
            )));
        }
        Ok(())
    }

    /// Cox-de Boor recursion at `t`: returns the order-4 values and the
    /// order-3 values they were built from (the latter drive the derivative).
    fn raw_values(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let m = self.knots.len();
        // Indicator functions of the knot intervals; the last nonempty
        // interval is treated as closed so t = t1 is covered.
        let mut b = vec![0.0; m - 1];
        let last = m - ORDER - 1;
        for j in 0..(m - 1) {
            let inside = if j == last {
                t >= self.knots[j] && t <= self.knots[j + 1]
            } else {
                t >= self.knots[j] && t < self.knots[j + 1]
            };
            if inside {
                b[j] = 1.0;
                break;
            }
        }

        let mut order3 = Vec::new();
        for ord in 2..=ORDER {
            let mut next = vec![0.0; m - ord];
            for j in 0..(m - ord) {
                let d1 = self.knots[j + ord - 1] - self.knots[j];
                let d2 = self.knots[j + ord] - self.knots[j + 1];
                let mut v = 0.0;
                if d1 > 0.0 {
                    v += (t - self.knots[j]) / d1 * b[j];
                }
                if d2 > 0.0 {
                    v += (self.knots[j + ord] - t) / d2 * b[j + 1];
                }
                next[j] = v;
            }
            if ord == ORDER {
                order3 = b;
            }
            b = next;
        }
        (b, order3)
    }

    /// Values `b_1(t), ..., b_k(t)`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        self.check_domain(t)?;
        Ok(self.raw_values(t).0)
    }

    /// Exact first derivatives `b_j'(t)`.
    pub fn eval_deriv(&self, t: f64) -> Result<Vec<f64>> {
        self.check_domain(t)?;
        let (_, b3) = self.raw_values(t);
        let deg = (ORDER - 1) as f64;
        let mut out = vec![0.0; self.k];
        for j in 0..self.k {
            let d1 = self.knots[j + ORDER - 1] - self.knots[j];
            let d2 = self.knots[j + ORDER] - self.knots[j + 1];
            let mut v = 0.0;
            if d1 > 0.0 {
                v += b3[j] / d1;
            }
            if d2 > 0.0 {
                v -= b3[j + 1] / d2;
            }
            out[j] = deg * v;
        }
        Ok(out)
    }

    /// Design matrix with one row of basis values per time.
    pub fn design(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(times.len(), self.k);
        for (i, &t) in times.iter().enumerate() {
            let row = self.eval(t)?;
            for (j, v) in row.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    /// Design matrix of basis derivatives.
    pub fn design_deriv(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(times.len(), self.k);
        for (i, &t) in times.iter().enumerate() {
            let row = self.eval_deriv(t)?;
            for (j, v) in row.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }
}

/// Free functions mirroring the basis methods.
pub fn eval_basis(basis: &SplineBasis, t: f64) -> Result<Vec<f64>> {
    basis.eval(t)
}

pub fn eval_basis_deriv(basis: &SplineBasis, t: f64) -> Result<Vec<f64>> {
    basis.eval_deriv(t)
}

/// Quadrature nodes and weights for the integral penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadRule {
    /// Composite Simpson rule on `[a, b]` with `intervals` subintervals
    /// (rounded up to an even count).
    pub fn simpson(a: f64, b: f64, intervals: usize) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidInput(format!("quadrature needs a < b, got [{a}, {b}]")));
        }
        let m = intervals.max(2);
        let m = if m % 2 == 0 { m } else { m + 1 };
        let h = (b - a) / m as f64;
        let mut nodes = Vec::with_capacity(m + 1);
        let mut weights = Vec::with_capacity(m + 1);
        for i in 0..=m {
            nodes.push(a + h * i as f64);
            let w = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            weights.push(w * h / 3.0);
        }
        nodes[m] = b;
        Ok(Self { nodes, weights })
    }

    /// Default rule for a dataset grid: Simpson at
    /// [`DEFAULT_QUAD_FACTOR`]-times the observation density.
    pub fn default_for(grid: &TimeGrid) -> Self {
        Self::simpson(grid.start(), grid.end(), DEFAULT_QUAD_FACTOR * (grid.len() - 1))
            .expect("valid grid yields valid rule")
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check_covers(&self, basis: &SplineBasis) -> Result<()> {
        let (t0, t1) = basis.domain();
        let span = t1 - t0;
        let first = *self.nodes.first().unwrap();
        let last = *self.nodes.last().unwrap();
        if first < t0
            || last > t1
            || (first - t0).abs() > 1e-9 * span
            || (last - t1).abs() > 1e-9 * span
        {
            return Err(Error::InvalidInput(
                "quadrature grid must cover the full basis domain".into(),
            ));
        }
        Ok(())
    }
}

/// A fitted spline curve: shared basis plus a `k x p` coefficient matrix
/// (one column per state coordinate).
#[derive(Clone, Debug, PartialEq)]
pub struct SplineFit {
    basis: SplineBasis,
    beta: DMatrix<f64>,
}

impl SplineFit {
    pub fn new(basis: SplineBasis, beta: DMatrix<f64>) -> Result<Self> {
        if beta.nrows() != basis.len() {
            return Err(Error::DimensionMismatch {
                what: "spline coefficients",
                expected: basis.len(),
                got: beta.nrows(),
            });
        }
        Ok(Self { basis, beta })
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn state_dim(&self) -> usize {
        self.beta.ncols()
    }

    /// Curve value `x(t) = beta' b(t)`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let b = self.basis.eval(t)?;
        Ok(self.combine(&b))
    }

    /// Curve derivative `x'(t) = beta' b'(t)`.
    pub fn eval_deriv(&self, t: f64) -> Result<Vec<f64>> {
        let b = self.basis.eval_deriv(t)?;
        Ok(self.combine(&b))
    }

    fn combine(&self, b: &[f64]) -> Vec<f64> {
        let p = self.beta.ncols();
        let mut out = vec![0.0; p];
        for c in 0..p {
            let mut acc = 0.0;
            for (j, &bj) in b.iter().enumerate() {
                acc += self.beta[(j, c)] * bj;
            }
            out[c] = acc;
        }
        out
    }

    /// Evaluates the curve on a grid as a [`Trajectory`].
    pub fn curve(&self, grid: &TimeGrid) -> Result<Trajectory> {
        let states = grid
            .points()
            .iter()
            .map(|&t| self.eval(t))
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(grid.clone(), states)
    }
}

fn check_design_rank(
    svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    k: usize,
    n: usize,
) -> Result<()> {
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(max_sv > 0.0) || min_sv < 1e-10 * max_sv {
        return Err(Error::Conditioning { k, n });
    }
    Ok(())
}

/// Coordinate-wise least-squares spline fit of the observations.
pub fn fit_ls(ds: &Dataset, basis: &SplineBasis) -> Result<SplineFit> {
    let n = ds.len();
    let k = basis.len();
    if n < k {
        return Err(Error::Conditioning { k, n });
    }
    let design = basis.design(ds.grid().points())?;
    let svd = design.svd(true, true);
    check_design_rank(&svd, k, n)?;
    let p = ds.state_dim();
    let mut y = DMatrix::zeros(n, p);
    for (i, obs) in ds.observations().iter().enumerate() {
        for (c, &v) in obs.iter().enumerate() {
            y[(i, c)] = v;
        }
    }
    let beta = svd.solve(&y, 1e-12).map_err(|_| Error::Conditioning { k, n })?;
    SplineFit::new(basis.clone(), beta)
}

/// Sum of squared data residuals of a fitted curve at the observation times.
pub fn data_misfit(fit: &SplineFit, ds: &Dataset) -> Result<f64> {
    let mut acc = 0.0;
    for (&t, obs) in ds.grid().points().iter().zip(ds.observations()) {
        let x = fit.eval(t)?;
        for (xc, yc) in x.iter().zip(obs) {
            acc += (xc - yc).powi(2);
        }
    }
    Ok(acc)
}

/// Quadrature value of `int ||x'(t) - f(x(t), t; theta)||^2 dt` for a curve.
pub fn ode_penalty(fit: &SplineFit, sys: &OdeSystem, theta: &[f64], quad: &QuadRule) -> Result<f64> {
    sys.check_params(theta)?;
    let mut acc = 0.0;
    let mut field = vec![0.0; sys.state_dim()];
    for (&t, &w) in quad.nodes.iter().zip(&quad.weights) {
        let x = fit.eval(t)?;
        let dx = fit.eval_deriv(t)?;
        sys.eval_into(&x, t, theta, &mut field);
        for (d, f) in dx.iter().zip(&field) {
            acc += w * (d - f).powi(2);
        }
    }
    Ok(acc)
}

/// Basis design matrices on the observation and quadrature grids, computed
/// once per fit.
struct PenalizedWorkspace {
    b_obs: DMatrix<f64>,
    b_quad: DMatrix<f64>,
    bd_quad: DMatrix<f64>,
}

impl PenalizedWorkspace {
    fn new(ds: &Dataset, basis: &SplineBasis, quad: &QuadRule) -> Result<Self> {
        Ok(Self {
            b_obs: basis.design(ds.grid().points())?,
            b_quad: basis.design(quad.nodes())?,
            bd_quad: basis.design_deriv(quad.nodes())?,
        })
    }
}

/// Objective and Gauss-Newton normal equations of the penalized problem at
/// coefficients `beta` (flattened coordinate-major).
struct GnModel<'a> {
    ws: &'a PenalizedWorkspace,
    ds: &'a Dataset,
    sys: &'a OdeSystem,
    theta: &'a [f64],
    lambda: f64,
    quad: &'a QuadRule,
    k: usize,
    p: usize,
}

impl GnModel<'_> {
    fn objective(&self, beta: &DMatrix<f64>) -> f64 {
        let x_obs = &self.ws.b_obs * beta;
        let mut obj = 0.0;
        for (i, obs) in self.ds.observations().iter().enumerate() {
            for (c, &y) in obs.iter().enumerate() {
                obj += (x_obs[(i, c)] - y).powi(2);
            }
        }
        if self.lambda > 0.0 {
            obj += self.lambda * self.penalty(beta);
        }
        obj
    }

    fn penalty(&self, beta: &DMatrix<f64>) -> f64 {
        let x = &self.ws.b_quad * beta;
        let dx = &self.ws.bd_quad * beta;
        let mut field = vec![0.0; self.p];
        let mut state = vec![0.0; self.p];
        let mut acc = 0.0;
        for (m, (&t, &w)) in self.quad.nodes.iter().zip(self.quad.weights()).enumerate() {
            for c in 0..self.p {
                state[c] = x[(m, c)];
            }
            self.sys.eval_into(&state, t, self.theta, &mut field);
            for c in 0..self.p {
                acc += w * (dx[(m, c)] - field[c]).powi(2);
            }
        }
        acc
    }

    /// Builds `A = J'J` and `g = J'r`; `a_data`, when given, receives only
    /// the data block (needed for the GCV trace).
    fn normal_equations(
        &self,
        beta: &DMatrix<f64>,
        mut a_data: Option<&mut DMatrix<f64>>,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let dim = self.k * self.p;
        let mut a = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);

        // Data block is block-diagonal per coordinate.
        let btb = self.ws.b_obs.transpose() * &self.ws.b_obs;
        let x_obs = &self.ws.b_obs * beta;
        for c in 0..self.p {
            let off = c * self.k;
            for j in 0..self.k {
                for j2 in 0..self.k {
                    a[(off + j, off + j2)] += btb[(j, j2)];
                }
            }
            for (i, obs) in self.ds.observations().iter().enumerate() {
                let r = x_obs[(i, c)] - obs[c];
                for j in 0..self.k {
                    g[off + j] += self.ws.b_obs[(i, j)] * r;
                }
            }
        }
        if let Some(ad) = a_data.as_deref_mut() {
            ad.copy_from(&a);
        }

        if self.lambda > 0.0 {
            let x = &self.ws.b_quad * beta;
            let dx = &self.ws.bd_quad * beta;
            let mut state = vec![0.0; self.p];
            let mut field = vec![0.0; self.p];
            let mut jac = DMatrix::zeros(self.p, self.p);
            let mut rows = DMatrix::zeros(self.p, dim);
            for (m, (&t, &w)) in self.quad.nodes.iter().zip(self.quad.weights()).enumerate() {
                for c in 0..self.p {
                    state[c] = x[(m, c)];
                }
                self.sys.eval_into(&state, t, self.theta, &mut field);
                field_jacobian(self.sys, &mut state, t, self.theta, &mut jac);
                // Residual rows dx_c - f_c; derivative w.r.t. beta_{j,c'} is
                // bd_mj delta_{c,c'} - (df_c/dx_{c'}) b_mj.
                for c in 0..self.p {
                    for cp in 0..self.p {
                        let off = cp * self.k;
                        for j in 0..self.k {
                            let mut v = -jac[(c, cp)] * self.ws.b_quad[(m, j)];
                            if c == cp {
                                v += self.ws.bd_quad[(m, j)];
                            }
                            rows[(c, off + j)] = v;
                        }
                    }
                }
                let lw = self.lambda * w;
                for c in 0..self.p {
                    let resid = dx[(m, c)] - field[c];
                    for u in 0..dim {
                        let rcu = rows[(c, u)];
                        if rcu == 0.0 {
                            continue;
                        }
                        g[u] += lw * rcu * resid;
                        for v in u..dim {
                            a[(u, v)] += lw * rcu * rows[(c, v)];
                        }
                    }
                }
            }
            for u in 0..dim {
                for v in (u + 1)..dim {
                    a[(v, u)] = a[(u, v)];
                }
            }
        }
        (a, g)
    }
}

/// Central finite-difference Jacobian of the field w.r.t. the state.
fn field_jacobian(
    sys: &OdeSystem,
    state: &mut [f64],
    t: f64,
    theta: &[f64],
    out: &mut DMatrix<f64>,
) {
    let p = state.len();
    let mut fp = vec![0.0; p];
    let mut fm = vec![0.0; p];
    for cp in 0..p {
        let orig = state[cp];
        let h = 1e-6 * (1.0 + orig.abs());
        state[cp] = orig + h;
        sys.eval_into(state, t, theta, &mut fp);
        state[cp] = orig - h;
        sys.eval_into(state, t, theta, &mut fm);
        state[cp] = orig;
        for c in 0..p {
            out[(c, cp)] = (fp[c] - fm[c]) / (2.0 * h);
        }
    }
}

/// ODE-penalized spline fit; with `lambda = 0` this reproduces [`fit_ls`].
pub fn fit_penalized(
    ds: &Dataset,
    basis: &SplineBasis,
    sys: &OdeSystem,
    theta: &[f64],
    lambda: f64,
    quad: &QuadRule,
) -> Result<SplineFit> {
    fit_penalized_from(ds, basis, sys, theta, lambda, quad, None).map(|(fit, _)| fit)
}

/// As [`fit_penalized`] but exposes the objective history and accepts a warm
/// start (used by the profiling middle loop).
pub(crate) fn fit_penalized_from(
    ds: &Dataset,
    basis: &SplineBasis,
    sys: &OdeSystem,
    theta: &[f64],
    lambda: f64,
    quad: &QuadRule,
    warm: Option<&DMatrix<f64>>,
) -> Result<(SplineFit, Vec<f64>)> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    sys.check_params(theta)?;
    quad.check_covers(basis)?;
    if ds.state_dim() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "dataset state dimension",
            expected: sys.state_dim(),
            got: ds.state_dim(),
        });
    }

    let init = match warm {
        Some(beta) => SplineFit::new(basis.clone(), beta.clone())?,
        None => fit_ls(ds, basis)?,
    };
    let ws = PenalizedWorkspace::new(ds, basis, quad)?;
    let model = GnModel {
        ws: &ws,
        ds,
        sys,
        theta,
        lambda,
        quad,
        k: basis.len(),
        p: ds.state_dim(),
    };

    let mut beta = init.beta;
    let mut obj = model.objective(&beta);
    let mut history = vec![obj];

    for iter in 0..GN_MAX_ITERS {
        let (mut a, g) = model.normal_equations(&beta, None);
        let grad_norm = 2.0 * g.amax();
        if grad_norm < GN_GRAD_TOL {
            return Ok((SplineFit::new(basis.clone(), beta)?, history));
        }
        let dim = a.nrows();
        let mut chol = a.clone().cholesky();
        if chol.is_none() {
            // Ridge fallback keeps the direction defined when A is singular.
            let ridge = 1e-10 * a.diagonal().amax().max(1e-300);
            for i in 0..dim {
                a[(i, i)] += ridge;
            }
            chol = a.cholesky();
        }
        let chol = chol.ok_or(Error::Conditioning { k: basis.len(), n: ds.len() })?;
        let delta = chol.solve(&(-&g));

        // Backtracking Armijo line search on the true objective.
        let slope = 2.0 * g.dot(&delta);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-14 {
            let mut trial = beta.clone();
            for (idx, d) in delta.iter().enumerate() {
                trial[idx] += t * d;
            }
            let trial_obj = model.objective(&trial);
            if trial_obj.is_finite() && trial_obj <= obj + 1e-4 * t * slope {
                let step_size = t * delta.amax();
                beta = trial;
                obj = trial_obj;
                history.push(obj);
                accepted = true;
                if step_size < 1e-13 * (1.0 + beta.amax()) {
                    return Ok((SplineFit::new(basis.clone(), beta)?, history));
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No descent step exists; treat a numerically stationary point
            // as converged, otherwise report the failure.
            if grad_norm < 1e-6 * (1.0 + obj) {
                return Ok((SplineFit::new(basis.clone(), beta)?, history));
            }
            return Err(Error::Convergence {
                iterations: iter,
                grad_norm,
                last_iterate: beta.as_slice().to_vec(),
            });
        }
    }

    let (_, g) = model.normal_equations(&beta, None);
    let grad_norm = 2.0 * g.amax();
    if grad_norm < 1e-6 * (1.0 + obj) {
        return Ok((SplineFit::new(basis.clone(), beta)?, history));
    }
    Err(Error::Convergence {
        iterations: GN_MAX_ITERS,
        grad_norm,
        last_iterate: beta.as_slice().to_vec(),
    })
}

/// Generalized cross-validation score `n * RSS / (n - df)^2` of the penalized
/// fit, with `df` the per-coordinate trace of the linearized smoother.
pub fn gcv_score(
    ds: &Dataset,
    basis: &SplineBasis,
    sys: &OdeSystem,
    theta: &[f64],
    lambda: f64,
    quad: &QuadRule,
) -> Result<f64> {
    let (fit, df) = gcv_parts(ds, basis, sys, theta, lambda, quad)?;
    let n = ds.len() as f64;
    let rss = data_misfit(&fit, ds)?;
    Ok(n * rss / (n - df).powi(2))
}

/// Fitted curve and effective degrees of freedom behind [`gcv_score`].
pub fn gcv_parts(
    ds: &Dataset,
    basis: &SplineBasis,
    sys: &OdeSystem,
    theta: &[f64],
    lambda: f64,
    quad: &QuadRule,
) -> Result<(SplineFit, f64)> {
    let (fit, _) = fit_penalized_from(ds, basis, sys, theta, lambda, quad, None)?;
    let ws = PenalizedWorkspace::new(ds, basis, quad)?;
    let p = ds.state_dim();
    let model = GnModel { ws: &ws, ds, sys, theta, lambda, quad, k: basis.len(), p };
    let dim = basis.len() * p;
    let mut a_data = DMatrix::zeros(dim, dim);
    let (a, _) = model.normal_equations(fit.coefficients(), Some(&mut a_data));
    let chol = a.cholesky().ok_or(Error::Conditioning { k: basis.len(), n: ds.len() })?;
    let solved = chol.solve(&a_data);
    let df = solved.trace() / p as f64;
    if df >= ds.len() as f64 {
        return Err(Error::DegenerateSmoother { df, n: ds.len() });
    }
    Ok((fit, df))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{integrate, OdeSystem};
    use crate::simulate::{self, fhn_benchmark, NoiseSpec};
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand::SeedableRng as _;

    fn basis_0_20(interior: usize) -> SplineBasis {
        SplineBasis::cubic_uniform(0.0, 20.0, interior).unwrap()
    }

    #[test]
    fn partition_of_unity_at_random_points() {
        let basis = basis_0_20(25);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.0..=20.0);
            let b = basis.eval(t).unwrap();
            let sum: f64 = b.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "t = {t}: sum {sum}");
        }
    }

    #[test]
    fn boundary_basis_values() {
        let basis = basis_0_20(7);
        let at0 = basis.eval(0.0).unwrap();
        assert!((at0[0] - 1.0).abs() < 1e-14);
        assert_eq!(at0.iter().filter(|v| v.abs() > 1e-14).count(), 1);
        let at1 = basis.eval(20.0).unwrap();
        assert!((at1[basis.len() - 1] - 1.0).abs() < 1e-14);
        assert_eq!(at1.iter().filter(|v| v.abs() > 1e-14).count(), 1);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let basis = basis_0_20(25);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let h = 1e-5;
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.1..=19.9);
            let d = basis.eval_deriv(t).unwrap();
            let up = basis.eval(t + h).unwrap();
            let dn = basis.eval(t - h).unwrap();
            for j in 0..basis.len() {
                let fd = (up[j] - dn[j]) / (2.0 * h);
                assert!((d[j] - fd).abs() < 1e-6, "t = {t}, j = {j}: {} vs {fd}", d[j]);
            }
        }
    }

    #[test]
    fn domain_errors() {
        let basis = basis_0_20(5);
        assert!(basis.eval(-0.01).is_err());
        assert!(basis.eval(20.01).is_err());
        assert!(basis.eval_deriv(21.0).is_err());
    }

    fn dataset_from_fn(f: impl Fn(f64) -> f64, n: usize) -> Dataset {
        let grid = TimeGrid::linspace(0.0, 20.0, n).unwrap();
        let obs = grid.points().iter().map(|&t| vec![f(t)]).collect();
        Dataset::new(grid, obs, None).unwrap()
    }

    #[test]
    fn cubic_polynomial_is_reproduced() {
        let f = |t: f64| 2.0 - t + 0.5 * t * t - 0.01 * t * t * t;
        let ds = dataset_from_fn(f, 60);
        let basis = basis_0_20(6);
        let fit = fit_ls(&ds, &basis).unwrap();
        for &t in ds.grid().points() {
            assert!((fit.eval(t).unwrap()[0] - f(t)).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_data_gives_constant_curve() {
        let ds = dataset_from_fn(|_| 3.25, 50);
        let basis = basis_0_20(10);
        let fit = fit_ls(&ds, &basis).unwrap();
        for t in [0.0, 4.4, 11.3, 20.0] {
            assert!((fit.eval(t).unwrap()[0] - 3.25).abs() < 1e-9);
            assert!(fit.eval_deriv(t).unwrap()[0].abs() < 1e-9);
        }
    }

    #[test]
    fn smoothing_reduces_noise_on_benchmark() {
        let ds = fhn_benchmark(2);
        let basis = basis_0_20(25);
        let fit = fit_ls(&ds, &basis).unwrap();
        let truth = ds.truth().unwrap().clone();
        let sys = OdeSystem::fitzhugh_nagumo();
        let traj = integrate(&sys, &truth.x0, ds.grid(), &truth.theta, 10).unwrap();
        let mut rms_fit = 0.0;
        let mut rms_data = 0.0;
        for ((&t, x_true), y) in
            ds.grid().points().iter().zip(traj.states()).zip(ds.observations())
        {
            let x_hat = fit.eval(t).unwrap();
            for c in 0..2 {
                rms_fit += (x_hat[c] - x_true[c]).powi(2);
                rms_data += (y[c] - x_true[c]).powi(2);
            }
        }
        assert!(rms_fit < rms_data, "smoothing failed: {rms_fit} vs {rms_data}");
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let ds = dataset_from_fn(|t| t, 8);
        let basis = basis_0_20(25);
        match fit_ls(&ds, &basis) {
            Err(Error::Conditioning { k, n }) => {
                assert_eq!(k, 29);
                assert_eq!(n, 8);
            }
            other => panic!("expected conditioning error, got {other:?}"),
        }
    }

    #[test]
    fn refitting_fitted_values_is_projection() {
        let ds = fhn_benchmark(3);
        let basis = basis_0_20(25);
        let fit = fit_ls(&ds, &basis).unwrap();
        let refit_obs: Vec<Vec<f64>> =
            ds.grid().points().iter().map(|&t| fit.eval(t).unwrap()).collect();
        let refit_ds = Dataset::new(ds.grid().clone(), refit_obs, None).unwrap();
        let refit = fit_ls(&refit_ds, &basis).unwrap();
        let diff = (refit.coefficients() - fit.coefficients()).amax();
        assert!(diff < 1e-10, "projection violated: {diff}");
    }

    fn decay_system() -> OdeSystem {
        OdeSystem::new(
            "lin",
            1,
            1,
            vec![crate::models::Interval { lower: -5.0, upper: 5.0 }],
            |x, _t, th, out| out[0] = th[0] * x[0],
        )
        .unwrap()
    }

    #[test]
    fn penalized_with_zero_lambda_equals_ls() {
        let ds = fhn_benchmark(4);
        let basis = basis_0_20(25);
        let sys = OdeSystem::fitzhugh_nagumo();
        let quad = QuadRule::default_for(ds.grid());
        let ls = fit_ls(&ds, &basis).unwrap();
        let pen = fit_penalized(&ds, &basis, &sys, &[0.2, 0.2, 3.0], 0.0, &quad).unwrap();
        assert!((ls.coefficients() - pen.coefficients()).amax() < 1e-10);
    }

    #[test]
    fn penalty_shrinks_monotonically_in_lambda() {
        let sys = decay_system();
        let grid = TimeGrid::linspace(0.0, 2.0, 41).unwrap();
        let obs = grid.points().iter().map(|&t| vec![(0.5 * t).exp()]).collect();
        let ds = Dataset::new(grid.clone(), obs, None).unwrap();
        let basis = SplineBasis::cubic_uniform(0.0, 2.0, 8).unwrap();
        let quad = QuadRule::default_for(&grid);
        let mut prev = f64::INFINITY;
        for lambda in [0.1, 1.0, 10.0] {
            let fit = fit_penalized(&ds, &basis, &sys, &[0.5], lambda, &quad).unwrap();
            let pen = ode_penalty(&fit, &sys, &[0.5], &quad).unwrap();
            assert!(pen < prev, "lambda {lambda}: penalty {pen} vs previous {prev}");
            prev = pen;
        }
    }

    #[test]
    fn penalized_fit_improves_ode_fidelity_on_clean_data() {
        let sys = OdeSystem::fitzhugh_nagumo();
        let grid = TimeGrid::linspace(0.0, 20.0, 401).unwrap();
        let noise = NoiseSpec::isotropic(2, 0.0).unwrap();
        let ds =
            simulate::generate(&sys, &[0.2, 0.2, 3.0], &[-1.0, 1.0], &grid, &noise, 0).unwrap();
        let basis = basis_0_20(25);
        let quad = QuadRule::default_for(&grid);
        let ls = fit_ls(&ds, &basis).unwrap();
        let pen = fit_penalized(&ds, &basis, &sys, &[0.2, 0.2, 3.0], 1.0, &quad).unwrap();
        let rss = data_misfit(&pen, &ds).unwrap();
        // Below the residual level sigma^2 = 0.25 noise per point would give.
        assert!(rss < 0.25 * (2 * ds.len()) as f64, "data residual too large: {rss}");
        let pen_ls = ode_penalty(&ls, &sys, &[0.2, 0.2, 3.0], &quad).unwrap();
        let pen_pen = ode_penalty(&pen, &sys, &[0.2, 0.2, 3.0], &quad).unwrap();
        assert!(pen_pen < pen_ls, "penalty not reduced: {pen_pen} vs {pen_ls}");
    }

    #[test]
    fn penalized_converges_to_ls_as_lambda_vanishes() {
        let ds = fhn_benchmark(5);
        let basis = basis_0_20(25);
        let sys = OdeSystem::fitzhugh_nagumo();
        let quad = QuadRule::default_for(ds.grid());
        let ls = fit_ls(&ds, &basis).unwrap();
        let pen = fit_penalized(&ds, &basis, &sys, &[0.2, 0.2, 3.0], 1e-10, &quad).unwrap();
        let mut sup = 0.0_f64;
        for &t in ds.grid().points() {
            let a = ls.eval(t).unwrap();
            let b = pen.eval(t).unwrap();
            for c in 0..2 {
                sup = sup.max((a[c] - b[c]).abs());
            }
        }
        assert!(sup < 1e-6, "sup-norm difference {sup}");
    }

    #[test]
    fn gauss_newton_objective_is_monotone() {
        let ds = fhn_benchmark(6);
        let basis = basis_0_20(25);
        let sys = OdeSystem::fitzhugh_nagumo();
        let quad = QuadRule::default_for(ds.grid());
        let (_, history) =
            fit_penalized_from(&ds, &basis, &sys, &[0.1, 0.3, 2.0], 5.0, &quad, None).unwrap();
        assert!(history.len() > 1);
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn gcv_df_equals_k_without_penalty() {
        let ds = fhn_benchmark(7);
        let basis = basis_0_20(25);
        let sys = OdeSystem::fitzhugh_nagumo();
        let quad = QuadRule::default_for(ds.grid());
        let (_, df) = gcv_parts(&ds, &basis, &sys, &[0.2, 0.2, 3.0], 0.0, &quad).unwrap();
        assert!((df - basis.len() as f64).abs() < 1e-8, "df = {df}");
    }

    #[test]
    fn gcv_df_decreases_with_lambda() {
        let ds = fhn_benchmark(8);
        let basis = basis_0_20(25);
        let sys = OdeSystem::fitzhugh_nagumo();
        let quad = QuadRule::default_for(ds.grid());
        let (_, df_lo) = gcv_parts(&ds, &basis, &sys, &[0.2, 0.2, 3.0], 0.01, &quad).unwrap();
        let (_, df_hi) = gcv_parts(&ds, &basis, &sys, &[0.2, 0.2, 3.0], 10.0, &quad).unwrap();
        assert!(df_hi < df_lo, "df(10) = {df_hi} vs df(0.01) = {df_lo}");
    }

    #[test]
    fn gcv_minimum_is_interior_on_benchmark() {
        let ds = fhn_benchmark(9);
        let basis = basis_0_20(25);
        let sys = OdeSystem::fitzhugh_nagumo();
        let quad = QuadRule::default_for(ds.grid());
        let lambdas = [1e-2, 1e-1, 1.0, 1e1, 1e2];
        let scores: Vec<f64> = lambdas
            .iter()
            .map(|&l| gcv_score(&ds, &basis, &sys, &[0.2, 0.2, 3.0], l, &quad).unwrap())
            .collect();
        let best = scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(
            best != 0 && best != lambdas.len() - 1,
            "GCV minimum at the grid edge: scores {scores:?}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn partition_of_unity_property(t in 0.0f64..=20.0) {
            let basis = basis_0_20(13);
            let b = basis.eval(t).unwrap();
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(b.iter().all(|v| *v >= -1e-15));
        }

        #[test]
        fn derivative_sums_to_zero(t in 0.0f64..=20.0) {
            let basis = basis_0_20(13);
            let d = basis.eval_deriv(t).unwrap();
            prop_assert!(d.iter().sum::<f64>().abs() < 1e-9);
        }
    }
}
