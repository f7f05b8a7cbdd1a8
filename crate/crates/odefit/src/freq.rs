//! Frequentist estimators: explicit-integration nonlinear least squares,
//! the two-step gradient-matching method, iterated principal differential
//! analysis, and the three-level generalized profiling method.
//!
//! Every estimator maps a dataset plus a system to an [`EstimateReport`].
//! Optimization is derivative-free simplex by default (Gauss-Newton is
//! available for the least-squares criterion), with multistart because the
//! integrated-trajectory objective can have several basins. Multistart
//! winners are chosen by lowest objective, ties (relative 1e-9) broken by
//! lowest start index so flat criteria resolve deterministically.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{self, format_f64, OdeSystem, TimeGrid};
use crate::optim::{
    self, gauss_newton, nelder_mead_polished, GaussNewtonOptions, OptimOutcome, SimplexOptions,
};
use crate::simulate::Dataset;
use crate::splinefit::{
    self, data_misfit, fit_ls, fit_penalized_from, gcv_parts, ode_penalty, QuadRule, SplineBasis,
    SplineFit,
};

/// Optimizer backend for the least-squares criteria.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    /// Derivative-free Nelder-Mead simplex (default; robust to the mild
    /// nonsmoothness a fixed-step integrator induces).
    Simplex,
    /// Gauss-Newton with finite-difference Jacobians.
    GaussNewton,
}

/// Shared optimizer settings.
#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub max_iters: usize,
    pub tolerance: f64,
    pub multistart_count: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Simplex,
            max_iters: 2000,
            tolerance: 1e-10,
            multistart_count: 5,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidInput("optimizer tolerance must be > 0".into()));
        }
        if self.multistart_count < 1 {
            return Err(Error::InvalidInput("multistart_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Point estimate plus run metadata, serializable as `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateReport {
    pub method: String,
    pub theta_hat: Vec<f64>,
    pub x0_hat: Option<Vec<f64>>,
    pub objective: f64,
    /// Wall-clock seconds; the only field that is not a pure function of the
    /// inputs and seed.
    pub runtime: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lambda: Option<f64>,
    /// Penultimate iterate, kept when an alternating scheme stopped without
    /// converging.
    pub prev_theta: Option<Vec<f64>>,
}

impl EstimateReport {
    /// `key=value` record consumed by the CLI benchmark tables.
    pub fn to_record(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format_f64(*x)).collect::<Vec<_>>().join(",");
        let mut out = format!("method={}\n", self.method);
        out.push_str(&format!("theta_hat={}\n", join(&self.theta_hat)));
        if let Some(x0) = &self.x0_hat {
            out.push_str(&format!("x0_hat={}\n", join(x0)));
        }
        out.push_str(&format!("objective={}\n", format_f64(self.objective)));
        out.push_str(&format!("runtime_s={}\n", format_f64(self.runtime)));
        out.push_str(&format!("iterations={}\n", self.iterations));
        out.push_str(&format!("converged={}\n", self.converged));
        if let Some(l) = self.lambda {
            out.push_str(&format!("lambda={}\n", format_f64(l)));
        }
        if let Some(prev) = &self.prev_theta {
            out.push_str(&format!("prev_theta={}\n", join(prev)));
        }
        out
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut method = None;
        let mut theta_hat = None;
        let mut x0_hat = None;
        let mut objective = None;
        let mut runtime = None;
        let mut iterations = None;
        let mut converged = None;
        let mut lambda = None;
        let mut prev_theta = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: idx + 1,
                message: format!("expected key=value, got '{line}'"),
            })?;
            let parse_vec = |v: &str| -> Result<Vec<f64>> {
                v.split(',')
                    .map(|tok| {
                        tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                            line: idx + 1,
                            message: format!("bad number '{tok}'"),
                        })
                    })
                    .collect()
            };
            match key.trim() {
                "method" => method = Some(value.trim().to_string()),
                "theta_hat" => theta_hat = Some(parse_vec(value)?),
                "x0_hat" => x0_hat = Some(parse_vec(value)?),
                "objective" => objective = Some(parse_vec(value)?[0]),
                "runtime_s" => runtime = Some(parse_vec(value)?[0]),
                "iterations" => {
                    iterations = Some(value.trim().parse::<usize>().map_err(|_| Error::Parse {
                        line: idx + 1,
                        message: "bad iteration count".into(),
                    })?)
                }
                "converged" => converged = Some(value.trim() == "true"),
                "lambda" => lambda = Some(parse_vec(value)?[0]),
                "prev_theta" => prev_theta = Some(parse_vec(value)?),
                _ => {}
            }
        }
        Ok(Self {
            method: method.ok_or(Error::Parse { line: 1, message: "missing method".into() })?,
            theta_hat: theta_hat
                .ok_or(Error::Parse { line: 1, message: "missing theta_hat".into() })?,
            x0_hat,
            objective: objective
                .ok_or(Error::Parse { line: 1, message: "missing objective".into() })?,
            runtime: runtime.unwrap_or(0.0),
            iterations: iterations.unwrap_or(0),
            converged: converged.unwrap_or(false),
            lambda,
            prev_theta,
        })
    }
}

/// Draws a start uniformly inside the admissible box (finite sides), or
/// around the midpoint for unbounded parameters.
fn uniform_start(sys: &OdeSystem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    sys.bounds()
        .iter()
        .map(|b| {
            if b.is_finite() {
                let margin = 1e-9 * b.width();
                rng.random_range((b.lower + margin)..(b.upper - margin))
            } else {
                let z: f64 = rng.random_range(-1.0..1.0);
                b.midpoint() + z
            }
        })
        .collect()
}

/// Start points for a theta-only criterion: the zero vector projected into
/// the box, the box midpoint, then uniform draws up to `count`.
fn theta_starts(sys: &OdeSystem, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut starts = Vec::with_capacity(count);
    let projected_zero: Vec<f64> =
        sys.bounds().iter().map(|b| b.project(0.0, 0.05)).collect();
    starts.push(projected_zero);
    if count > 1 {
        starts.push(sys.bounds().iter().map(|b| b.midpoint()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while starts.len() < count {
        starts.push(uniform_start(sys, &mut rng));
    }
    starts.truncate(count);
    starts
}

fn simplex_steps(sys: &OdeSystem) -> Vec<f64> {
    sys.bounds()
        .iter()
        .map(|b| if b.is_finite() { 0.05 * b.width() } else { 0.5 })
        .collect()
}

/// Runs one simplex per start and keeps the winner (lowest objective, ties
/// broken by start index). Errors with per-start diagnostics when no start
/// produced a finite objective.
fn multistart_simplex<F>(
    mut objective: F,
    starts: &[Vec<f64>],
    opts: &SimplexOptions,
    what: &str,
) -> Result<(OptimOutcome, usize)>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut best: Option<(OptimOutcome, usize)> = None;
    let mut diagnostics = Vec::new();
    let mut total_iters = 0;
    for (idx, start) in starts.iter().enumerate() {
        let out = nelder_mead_polished(&mut objective, start, opts);
        total_iters += out.iterations;
        if !out.f.is_finite() {
            diagnostics.push(format!(
                "start {idx}: diverged (objective not finite after {} iterations)",
                out.iterations
            ));
            continue;
        }
        diagnostics.push(format!("start {idx}: objective {:.6e}", out.f));
        let replace = match &best {
            None => true,
            Some((cur, _)) => out.f < cur.f - optim::TIE_TOL * (1.0 + cur.f.abs()),
        };
        if replace {
            best = Some((out, idx));
        }
    }
    match best {
        Some((mut out, idx)) => {
            out.iterations = total_iters;
            Ok((out, idx))
        }
        None => Err(Error::EstimationFailure {
            message: format!("{what}: every start diverged"),
            diagnostics,
        }),
    }
}

/// Nonlinear least squares with explicit integration: minimizes
/// `sum_i ||y_i - x(t_i; theta, x0)||^2` jointly over `(theta, x0)`,
/// integrating with `refine` RK4 substeps per observation gap.
pub fn nls_explicit(
    ds: &Dataset,
    sys: &OdeSystem,
    cfg: &OptimizerConfig,
    refine: usize,
) -> Result<EstimateReport> {
    let started = Instant::now();
    cfg.validate()?;
    if ds.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "nls_explicit needs at least 2 observations, got {}",
            ds.len()
        )));
    }
    if ds.state_dim() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "dataset state dimension",
            expected: sys.state_dim(),
            got: ds.state_dim(),
        });
    }
    let q = sys.param_dim();
    let p = sys.state_dim();
    let y0 = ds.observations()[0].clone();

    let sse = |theta: &[f64], x0: &[f64]| -> Option<f64> {
        if !sys.params_in_bounds(theta) {
            return None;
        }
        let traj = models::integrate(sys, x0, ds.grid(), theta, refine).ok()?;
        let mut acc = 0.0;
        for (x, y) in traj.states().iter().zip(ds.observations()) {
            for (xc, yc) in x.iter().zip(y) {
                acc += (xc - yc).powi(2);
            }
        }
        Some(acc)
    };

    // Starts: box midpoint first, then uniform draws; x0 always starts at the
    // first observation.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts = Vec::with_capacity(cfg.multistart_count);
    for s in 0..cfg.multistart_count {
        let theta: Vec<f64> = if s == 0 {
            sys.bounds().iter().map(|b| b.midpoint()).collect()
        } else {
            uniform_start(sys, &mut rng)
        };
        let mut v = theta;
        v.extend_from_slice(&y0);
        starts.push(v);
    }

    let mut steps = simplex_steps(sys);
    steps.extend(y0.iter().map(|v| 0.1 * (1.0 + v.abs())));

    let (outcome, _idx) = match cfg.algorithm {
        Algorithm::Simplex => {
            let opts = SimplexOptions {
                max_iters: cfg.max_iters,
                tol_f: cfg.tolerance,
                tol_x: 1e-9,
                initial_step: steps,
            };
            multistart_simplex(
                |v| sse(&v[..q], &v[q..]).unwrap_or(f64::INFINITY),
                &starts,
                &opts,
                "nls_explicit",
            )?
        }
        Algorithm::GaussNewton => {
            let gn_opts = GaussNewtonOptions {
                max_iters: cfg.max_iters.min(200),
                grad_tol: cfg.tolerance.max(1e-12),
                fd_step: 1e-7,
            };
            let residuals = |v: &[f64]| -> Option<DVector<f64>> {
                let (theta, x0) = v.split_at(q);
                if !sys.params_in_bounds(theta) {
                    return None;
                }
                let traj = models::integrate(sys, x0, ds.grid(), theta, refine).ok()?;
                let mut r = DVector::zeros(ds.len() * p);
                for (i, (x, y)) in traj.states().iter().zip(ds.observations()).enumerate() {
                    for c in 0..p {
                        r[i * p + c] = x[c] - y[c];
                    }
                }
                Some(r)
            };
            let bounds = sys.bounds().to_vec();
            let project = move |v: &mut [f64]| {
                for (val, b) in v.iter_mut().zip(&bounds) {
                    *val = b.project(*val, 1e-6);
                }
            };
            let mut best: Option<(OptimOutcome, usize)> = None;
            let mut diagnostics = Vec::new();
            let mut total_iters = 0;
            for (idx, start) in starts.iter().enumerate() {
                let out = gauss_newton(residuals, &project, start, &gn_opts);
                total_iters += out.iterations;
                if !out.f.is_finite() {
                    diagnostics.push(format!("start {idx}: diverged"));
                    continue;
                }
                diagnostics.push(format!("start {idx}: objective {:.6e}", out.f));
                let replace = match &best {
                    None => true,
                    Some((cur, _)) => out.f < cur.f - optim::TIE_TOL * (1.0 + cur.f.abs()),
                };
                if replace {
                    best = Some((out, idx));
                }
            }
            let (mut out, idx) = best.ok_or(Error::EstimationFailure {
                message: "nls_explicit: every start diverged".into(),
                diagnostics,
            })?;
            out.iterations = total_iters;
            (out, idx)
        }
    };

    let theta_hat = outcome.x[..q].to_vec();
    let x0_hat = outcome.x[q..].to_vec();
    let converged = outcome.converged && sys.params_in_bounds(&theta_hat);
    Ok(EstimateReport {
        method: "nls_explicit".into(),
        theta_hat,
        x0_hat: Some(x0_hat),
        objective: outcome.f,
        runtime: started.elapsed().as_secs_f64(),
        iterations: outcome.iterations,
        converged,
        lambda: None,
        prev_theta: None,
    })
}

/// Curve and derivative values tabulated at the observation times.
struct CurvePoints {
    times: Vec<f64>,
    x: Vec<Vec<f64>>,
    dx: Vec<Vec<f64>>,
}

impl CurvePoints {
    fn from_fit(fit: &SplineFit, grid: &TimeGrid) -> Result<Self> {
        let times = grid.points().to_vec();
        let mut x = Vec::with_capacity(times.len());
        let mut dx = Vec::with_capacity(times.len());
        for &t in &times {
            x.push(fit.eval(t)?);
            dx.push(fit.eval_deriv(t)?);
        }
        Ok(Self { times, x, dx })
    }

    /// `sum_i ||dx(t_i) - f(x(t_i), t_i; theta)||^2`, infinite out of bounds.
    fn criterion(&self, sys: &OdeSystem, theta: &[f64]) -> f64 {
        if !sys.params_in_bounds(theta) {
            return f64::INFINITY;
        }
        let mut field = vec![0.0; sys.state_dim()];
        let mut acc = 0.0;
        for ((t, x), dx) in self.times.iter().zip(&self.x).zip(&self.dx) {
            sys.eval_into(x, *t, theta, &mut field);
            for (d, f) in dx.iter().zip(&field) {
                acc += (d - f).powi(2);
            }
        }
        acc
    }
}

/// The gradient-matching criterion of the two-step method, evaluated at the
/// observation times for a given fitted curve.
pub fn gradient_match_criterion(
    fit: &SplineFit,
    sys: &OdeSystem,
    theta: &[f64],
    ds: &Dataset,
) -> Result<f64> {
    sys.check_params(theta)?;
    let points = CurvePoints::from_fit(fit, ds.grid())?;
    Ok(points.criterion(sys, theta))
}

fn minimize_gradient_match(
    points: &CurvePoints,
    sys: &OdeSystem,
    cfg: &OptimizerConfig,
    extra_start: Option<&[f64]>,
    what: &str,
) -> Result<(OptimOutcome, usize)> {
    let mut starts = Vec::new();
    if let Some(s) = extra_start {
        starts.push(s.to_vec());
    }
    starts.extend(theta_starts(sys, cfg.multistart_count, cfg.seed));
    let opts = SimplexOptions {
        max_iters: cfg.max_iters,
        tol_f: cfg.tolerance,
        tol_x: 1e-9,
        initial_step: simplex_steps(sys),
    };
    multistart_simplex(|theta| points.criterion(sys, theta), &starts, &opts, what)
}

/// Two-step method: least-squares spline fit, then gradient matching of the
/// spline derivative against the field over `theta` only. The initial state
/// is not estimated; it is reported as the fitted curve at the first time.
pub fn two_step(ds: &Dataset, sys: &OdeSystem, basis: &SplineBasis) -> Result<EstimateReport> {
    let started = Instant::now();
    let fit = fit_ls(ds, basis)?;
    let points = CurvePoints::from_fit(&fit, ds.grid())?;
    let cfg = OptimizerConfig::default();
    let (outcome, _) = minimize_gradient_match(&points, sys, &cfg, None, "two_step")?;
    let x0_hat = fit.eval(ds.grid().start())?;
    Ok(EstimateReport {
        method: "two_step".into(),
        theta_hat: outcome.x.clone(),
        x0_hat: Some(x0_hat),
        objective: outcome.f,
        runtime: started.elapsed().as_secs_f64(),
        iterations: outcome.iterations,
        converged: outcome.converged && sys.params_in_bounds(&outcome.x),
        lambda: None,
        prev_theta: None,
    })
}

/// Iterated principal differential analysis: alternate an ODE-penalized
/// spline fit at the current `theta` with the gradient-matching minimization
/// on the refreshed curve, until `theta` stabilizes or `max_rounds` is hit.
pub fn iterated_pda(
    ds: &Dataset,
    sys: &OdeSystem,
    basis: &SplineBasis,
    lambda: f64,
    max_rounds: usize,
    theta0: &[f64],
) -> Result<EstimateReport> {
    let started = Instant::now();
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be > 0, got {lambda}")));
    }
    if max_rounds < 1 {
        return Err(Error::InvalidInput("max_rounds must be >= 1".into()));
    }
    sys.check_params(theta0)?;
    let quad = QuadRule::default_for(ds.grid());
    let cfg = OptimizerConfig::default();
    let tol = 1e-6;

    let mut theta = theta0.to_vec();
    let mut prev_theta: Option<Vec<f64>> = None;
    let mut warm = None;
    let mut fit = None;
    let mut rounds = 0;
    let mut converged = false;
    let mut total_iters = 0;

    for _ in 0..max_rounds {
        rounds += 1;
        let (round_fit, _) =
            fit_penalized_from(ds, basis, sys, &theta, lambda, &quad, warm.as_ref())?;
        warm = Some(round_fit.coefficients().clone());
        let points = CurvePoints::from_fit(&round_fit, ds.grid())?;
        let (outcome, _) =
            minimize_gradient_match(&points, sys, &cfg, Some(&theta), "iterated_pda")?;
        total_iters += outcome.iterations;
        let delta = outcome
            .x
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        prev_theta = Some(theta.clone());
        theta = outcome.x;
        fit = Some(round_fit);
        if delta < tol {
            converged = true;
            break;
        }
    }

    let fit = match fit {
        Some(f) => f,
        None => fit_ls(ds, basis)?,
    };
    let objective = data_misfit(&fit, ds)? + lambda * ode_penalty(&fit, sys, &theta, &quad)?;
    let x0_hat = fit.eval(ds.grid().start())?;
    Ok(EstimateReport {
        method: "iterated_pda".into(),
        theta_hat: theta,
        x0_hat: Some(x0_hat),
        objective,
        runtime: started.elapsed().as_secs_f64(),
        iterations: rounds.max(total_iters.min(rounds)),
        converged,
        lambda: Some(lambda),
        prev_theta: if converged { None } else { prev_theta },
    })
}

/// Generalized profiling: for each candidate `lambda`, profile out the spline
/// coefficients (inner penalized fit) and the parameters (middle simplex on
/// the pure data misfit), then pick the `lambda` with the lowest GCV score.
pub fn generalized_profiling(
    ds: &Dataset,
    sys: &OdeSystem,
    basis: &SplineBasis,
    lambda_grid: &[f64],
    cfg: &OptimizerConfig,
) -> Result<EstimateReport> {
    let started = Instant::now();
    cfg.validate()?;
    if lambda_grid.is_empty() {
        return Err(Error::InvalidInput("lambda grid must be non-empty".into()));
    }
    if lambda_grid.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidInput("lambda grid entries must be > 0".into()));
    }
    let quad = QuadRule::default_for(ds.grid());

    // The cheap two-step estimate seeds the middle-level searches.
    let smart_start = two_step(ds, sys, basis).ok().map(|r| r.theta_hat);

    struct Candidate {
        lambda: f64,
        theta: Vec<f64>,
        gcv: f64,
        misfit: f64,
        fit: SplineFit,
        iterations: usize,
        converged: bool,
    }

    let mut candidates: Vec<Candidate> = Vec::new();
    let mut diagnostics = Vec::new();

    for &lambda in lambda_grid {
        // Warm-started inner fit shared across the middle-level search.
        let mut warm: Option<nalgebra::DMatrix<f64>> = None;
        let mut inner_errors = 0usize;
        let mut profile_misfit = |theta: &[f64], warm: &mut Option<nalgebra::DMatrix<f64>>| -> f64 {
            if !sys.params_in_bounds(theta) {
                return f64::INFINITY;
            }
            let attempt = fit_penalized_from(ds, basis, sys, theta, lambda, &quad, warm.as_ref())
                .or_else(|_| fit_penalized_from(ds, basis, sys, theta, lambda, &quad, None));
            match attempt {
                Ok((fit, _)) => {
                    *warm = Some(fit.coefficients().clone());
                    data_misfit(&fit, ds).unwrap_or(f64::INFINITY)
                }
                Err(_) => {
                    inner_errors += 1;
                    f64::INFINITY
                }
            }
        };

        let mut starts = Vec::new();
        if let Some(s) = &smart_start {
            starts.push(s.clone());
        }
        starts.extend(theta_starts(sys, cfg.multistart_count, cfg.seed));
        starts.truncate(cfg.multistart_count.max(1) + 1);
        let opts = SimplexOptions {
            max_iters: cfg.max_iters,
            tol_f: cfg.tolerance.max(1e-9),
            tol_x: 1e-7,
            initial_step: simplex_steps(sys),
        };
        let middle = multistart_simplex(
            |theta| profile_misfit(theta, &mut warm),
            &starts,
            &opts,
            "generalized_profiling",
        );
        let (outcome, _) = match middle {
            Ok(v) => v,
            Err(e) => {
                diagnostics.push(format!("lambda {lambda:.3e}: {e}"));
                continue;
            }
        };
        match gcv_parts(ds, basis, sys, &outcome.x, lambda, &quad) {
            Ok((fit, df)) => {
                let misfit = data_misfit(&fit, ds)?;
                let n = ds.len() as f64;
                let gcv = n * misfit / (n - df).powi(2);
                diagnostics.push(format!(
                    "lambda {lambda:.3e}: misfit {misfit:.6e}, df {df:.2}, gcv {gcv:.6e}"
                ));
                candidates.push(Candidate {
                    lambda,
                    theta: outcome.x,
                    gcv,
                    misfit,
                    fit,
                    iterations: outcome.iterations,
                    converged: outcome.converged,
                });
            }
            Err(e) => diagnostics.push(format!("lambda {lambda:.3e}: gcv failed: {e}")),
        }
    }

    let best = candidates
        .into_iter()
        .min_by(|a, b| a.gcv.partial_cmp(&b.gcv).unwrap_or(std::cmp::Ordering::Equal))
        .ok_or(Error::EstimationFailure {
            message: "generalized_profiling: every lambda failed".into(),
            diagnostics,
        })?;

    let x0_hat = best.fit.eval(ds.grid().start())?;
    Ok(EstimateReport {
        method: "generalized_profiling".into(),
        theta_hat: best.theta.clone(),
        x0_hat: Some(x0_hat),
        objective: best.misfit,
        runtime: started.elapsed().as_secs_f64(),
        iterations: best.iterations,
        converged: best.converged && sys.params_in_bounds(&best.theta),
        lambda: Some(best.lambda),
        prev_theta: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Interval, OdeSystem};
    use crate::simulate::{self, fhn_benchmark, NoiseSpec};
    use crate::splinefit::SplineBasis;

    fn zero_noise_fhn() -> Dataset {
        let sys = OdeSystem::fitzhugh_nagumo();
        let grid = TimeGrid::linspace(0.0, 20.0, 401).unwrap();
        let noise = NoiseSpec::isotropic(2, 0.0).unwrap();
        simulate::generate(&sys, &[0.2, 0.2, 3.0], &[-1.0, 1.0], &grid, &noise, 0).unwrap()
    }

    fn basis_0_20(interior: usize) -> SplineBasis {
        SplineBasis::cubic_uniform(0.0, 20.0, interior).unwrap()
    }

    #[test]
    fn nls_recovers_zero_noise_truth() {
        let ds = zero_noise_fhn();
        let sys = OdeSystem::fitzhugh_nagumo();
        let report = nls_explicit(&ds, &sys, &OptimizerConfig::default(), 10).unwrap();
        for (est, truth) in report.theta_hat.iter().zip(&[0.2, 0.2, 3.0]) {
            assert!((est - truth).abs() < 1e-3, "theta {:?}", report.theta_hat);
        }
        assert!(report.objective < 1e-6, "objective {}", report.objective);
        assert!(report.converged);
    }

    #[test]
    fn nls_rejects_tiny_datasets() {
        let sys = OdeSystem::fitzhugh_nagumo();
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let ds = Dataset::without_observations(grid);
        assert!(matches!(
            nls_explicit(&ds, &sys, &OptimizerConfig::default(), 10),
            Err(Error::InvalidInput(_))
        ));
        // A one-point dataset cannot even be constructed.
        assert!(TimeGrid::new(vec![0.0]).is_err());
    }

    #[test]
    fn nls_objective_no_worse_than_truth() {
        let sys = OdeSystem::fitzhugh_nagumo();
        for seed in [1, 2, 3] {
            let ds = fhn_benchmark(seed);
            let report = nls_explicit(&ds, &sys, &OptimizerConfig::default(), 10).unwrap();
            let truth = ds.truth().unwrap();
            let traj = models::integrate(&sys, &truth.x0, ds.grid(), &truth.theta, 10).unwrap();
            let mut truth_obj = 0.0;
            for (x, y) in traj.states().iter().zip(ds.observations()) {
                for (xc, yc) in x.iter().zip(y) {
                    truth_obj += (xc - yc).powi(2);
                }
            }
            assert!(
                report.objective <= truth_obj + 1e-9,
                "seed {seed}: {} vs {truth_obj}",
                report.objective
            );
        }
    }

    #[test]
    fn nls_is_deterministic_given_seed() {
        let ds = fhn_benchmark(1);
        let sys = OdeSystem::fitzhugh_nagumo();
        let cfg = OptimizerConfig { multistart_count: 2, max_iters: 300, ..Default::default() };
        let a = nls_explicit(&ds, &sys, &cfg, 10).unwrap();
        let b = nls_explicit(&ds, &sys, &cfg, 10).unwrap();
        assert_eq!(a.theta_hat, b.theta_hat);
        assert_eq!(a.x0_hat, b.x0_hat);
        assert_eq!(a.objective, b.objective);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn gauss_newton_backend_agrees_on_zero_noise() {
        let ds = zero_noise_fhn();
        let sys = OdeSystem::fitzhugh_nagumo();
        let cfg = OptimizerConfig {
            algorithm: Algorithm::GaussNewton,
            multistart_count: 3,
            ..Default::default()
        };
        let report = nls_explicit(&ds, &sys, &cfg, 10).unwrap();
        for (est, truth) in report.theta_hat.iter().zip(&[0.2, 0.2, 3.0]) {
            assert!((est - truth).abs() < 1e-3, "theta {:?}", report.theta_hat);
        }
    }

    fn decay_system() -> OdeSystem {
        OdeSystem::new(
            "lin",
            1,
            1,
            vec![Interval { lower: -5.0, upper: 5.0 }],
            |x, _t, th, out| out[0] = th[0] * x[0],
        )
        .unwrap()
    }

    #[test]
    fn two_step_recovers_exponential_rate() {
        let sys = decay_system();
        let grid = TimeGrid::linspace(0.0, 2.0, 201).unwrap();
        let obs = grid.points().iter().map(|&t| vec![(0.5 * t).exp()]).collect();
        let ds = Dataset::new(grid, obs, None).unwrap();
        let basis = SplineBasis::cubic_uniform(0.0, 2.0, 12).unwrap();
        let report = two_step(&ds, &sys, &basis).unwrap();
        assert!(
            (report.theta_hat[0] - 0.5).abs() < 1e-2,
            "theta {:?}",
            report.theta_hat
        );
    }

    #[test]
    fn two_step_objective_matches_recomputation() {
        let ds = fhn_benchmark(2);
        let sys = OdeSystem::fitzhugh_nagumo();
        let basis = basis_0_20(25);
        let report = two_step(&ds, &sys, &basis).unwrap();
        let fit = fit_ls(&ds, &basis).unwrap();
        let recomputed =
            gradient_match_criterion(&fit, &sys, &report.theta_hat, &ds).unwrap();
        assert!(
            (recomputed - report.objective).abs() < 1e-12 * (1.0 + report.objective),
            "{recomputed} vs {}",
            report.objective
        );
    }

    #[test]
    fn two_step_constant_sir_data_returns_zero_dynamics() {
        let sys = OdeSystem::sir(1000.0).unwrap();
        let grid = TimeGrid::linspace(0.0, 20.0, 101).unwrap();
        let obs = grid.points().iter().map(|_| vec![990.0, 0.0, 10.0]).collect();
        let ds = Dataset::new(grid, obs, None).unwrap();
        let basis = basis_0_20(10);
        let report = two_step(&ds, &sys, &basis).unwrap();
        assert_eq!(report.theta_hat, vec![0.0, 0.0], "theta {:?}", report.theta_hat);
        assert!(report.objective < 1e-10, "criterion {}", report.objective);
    }

    #[test]
    fn two_step_is_faster_than_nls() {
        let ds = fhn_benchmark(3);
        let sys = OdeSystem::fitzhugh_nagumo();
        let basis = basis_0_20(25);
        let two = two_step(&ds, &sys, &basis).unwrap();
        let nls = nls_explicit(&ds, &sys, &OptimizerConfig::default(), 10).unwrap();
        assert!(
            two.runtime < nls.runtime,
            "two_step {} vs nls {}",
            two.runtime,
            nls.runtime
        );
    }

    #[test]
    fn pda_first_round_matches_two_step_for_tiny_lambda() {
        let ds = fhn_benchmark(4);
        let sys = OdeSystem::fitzhugh_nagumo();
        let basis = basis_0_20(25);
        let two = two_step(&ds, &sys, &basis).unwrap();
        let pda = iterated_pda(&ds, &sys, &basis, 1e-12, 1, &two.theta_hat).unwrap();
        for (a, b) in pda.theta_hat.iter().zip(&two.theta_hat) {
            assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", pda.theta_hat, two.theta_hat);
        }
    }

    #[test]
    fn pda_objective_improves_over_first_round() {
        let ds = fhn_benchmark(5);
        let sys = OdeSystem::fitzhugh_nagumo();
        let basis = basis_0_20(25);
        let start = [0.0, 0.0, 2.0];
        let one_round = iterated_pda(&ds, &sys, &basis, 1.0, 1, &start).unwrap();
        let multi_round = iterated_pda(&ds, &sys, &basis, 1.0, 8, &start).unwrap();
        assert!(
            multi_round.objective <= one_round.objective + 1e-9,
            "{} vs {}",
            multi_round.objective,
            one_round.objective
        );
    }

    #[test]
    fn pda_truth_is_near_fixed_point_on_clean_data() {
        let ds = zero_noise_fhn();
        let sys = OdeSystem::fitzhugh_nagumo();
        let basis = basis_0_20(25);
        let report = iterated_pda(&ds, &sys, &basis, 1.0, 5, &[0.2, 0.2, 3.0]).unwrap();
        for (est, truth) in report.theta_hat.iter().zip(&[0.2, 0.2, 3.0]) {
            assert!((est - truth).abs() < 1e-3, "theta {:?}", report.theta_hat);
        }
    }

    #[test]
    fn profiling_single_lambda_degenerates() {
        let ds = fhn_benchmark(6);
        let sys = OdeSystem::fitzhugh_nagumo();
        let basis = basis_0_20(25);
        let cfg = OptimizerConfig { multistart_count: 2, max_iters: 400, ..Default::default() };
        let report = generalized_profiling(&ds, &sys, &basis, &[1.0], &cfg).unwrap();
        assert_eq!(report.lambda, Some(1.0));
        assert!(report.theta_hat.iter().all(|v| v.is_finite()));
        assert!(sys.params_in_bounds(&report.theta_hat));
    }

    #[test]
    fn profiling_zero_noise_disjunction() {
        let ds = zero_noise_fhn();
        let sys = OdeSystem::fitzhugh_nagumo();
        let basis = basis_0_20(25);
        let grid = [0.1, 1.0, 10.0, 100.0];
        let cfg = OptimizerConfig { multistart_count: 2, max_iters: 400, ..Default::default() };
        let report = generalized_profiling(&ds, &sys, &basis, &grid, &cfg).unwrap();
        let max_lambda_selected = report.lambda == Some(100.0);
        let theta_close = report
            .theta_hat
            .iter()
            .zip(&[0.2, 0.2, 3.0])
            .all(|(a, b)| (a - b).abs() < 1e-2);
        assert!(
            max_lambda_selected || theta_close,
            "lambda {:?}, theta {:?}",
            report.lambda,
            report.theta_hat
        );
    }

    #[test]
    fn report_record_round_trip() {
        let report = EstimateReport {
            method: "two_step".into(),
            theta_hat: vec![0.19, 0.21, 2.98],
            x0_hat: Some(vec![-1.0, 1.02]),
            objective: 12.5,
            runtime: 0.42,
            iterations: 113,
            converged: true,
            lambda: Some(1.0),
            prev_theta: None,
        };
        let back = EstimateReport::from_record(&report.to_record()).unwrap();
        assert_eq!(report, back);
    }
}
