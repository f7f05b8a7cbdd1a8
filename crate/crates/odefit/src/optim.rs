//! Internal optimizers: a bounded Nelder-Mead simplex and a Gauss-Newton
//! solver for residual problems with finite-difference Jacobians.
//!
//! Box constraints are enforced by the objective returning `+inf` outside the
//! feasible region (simplex) or by projecting trial points into the box
//! (Gauss-Newton). Both methods are fully deterministic given their inputs.

use nalgebra::{DMatrix, DVector};

/// Relative objective tie tolerance: values this close count as equal when
/// picking a winner, so flat regions resolve to the canonical candidate.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct SimplexOptions {
    pub max_iters: usize,
    /// Spread tolerance on the vertex objective values.
    pub tol_f: f64,
    /// Size tolerance on the simplex diameter.
    pub tol_x: f64,
    /// Per-dimension initial vertex offsets.
    pub initial_step: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evals: usize,
    pub converged: bool,
}

/// Nelder-Mead with standard coefficients (reflect 1, expand 2, contract 0.5,
/// shrink 0.5). If the initial simplex is already flat to within `tol_f` the
/// seed point is returned unchanged.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &SimplexOptions) -> OptimOutcome
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let f0 = eval(x0, &mut evals);
    if dim == 0 {
        return OptimOutcome { x: x0.to_vec(), f: f0, iterations: 0, evals, converged: true };
    }

    let mut vertices: Vec<Vec<f64>> = vec![x0.to_vec()];
    let mut values = vec![f0];
    for i in 0..dim {
        let mut v = x0.to_vec();
        let step = if opts.initial_step[i] != 0.0 { opts.initial_step[i] } else { 1e-3 };
        v[i] += step;
        let fv = eval(&v, &mut evals);
        vertices.push(v);
        values.push(fv);
    }

    let spread = |values: &[f64]| -> f64 {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };

    // Flat start: nothing to gain, keep the seed exactly.
    if f0.is_finite() && spread(&values) <= opts.tol_f * (1.0 + f0.abs()) {
        return OptimOutcome { x: x0.to_vec(), f: f0, iterations: 0, evals, converged: true };
    }

    let mut order: Vec<usize> = (0..=dim).collect();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        iterations += 1;
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        let best = order[0];
        let worst = order[dim];
        let second_worst = order[dim - 1];

        if values[best].is_finite() {
            let fspread = values[worst] - values[best];
            let xsize = vertices
                .iter()
                .map(|v| {
                    v.iter()
                        .zip(&vertices[best])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0_f64, f64::max)
                })
                .fold(0.0_f64, f64::max);
            let xb_norm = vertices[best].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if fspread <= opts.tol_f * (1.0 + values[best].abs())
                && xsize <= opts.tol_x * (1.0 + xb_norm)
            {
                converged = true;
                break;
            }
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; dim];
        for (i, v) in vertices.iter().enumerate() {
            if i == worst {
                continue;
            }
            for (c, vi) in centroid.iter_mut().zip(v) {
                *c += vi / dim as f64;
            }
        }

        let blend = |a: &[f64], b: &[f64], w: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(ai, bi)| ai + w * (ai - bi)).collect()
        };

        let reflected = blend(&centroid, &vertices[worst], 1.0);
        let f_ref = eval(&reflected, &mut evals);

        if f_ref < values[best] {
            let expanded = blend(&centroid, &vertices[worst], 2.0);
            let f_exp = eval(&expanded, &mut evals);
            if f_exp < f_ref {
                vertices[worst] = expanded;
                values[worst] = f_exp;
            } else {
                vertices[worst] = reflected;
                values[worst] = f_ref;
            }
        } else if f_ref < values[second_worst] {
            vertices[worst] = reflected;
            values[worst] = f_ref;
        } else {
            let contracted = if f_ref < values[worst] {
                blend(&centroid, &vertices[worst], 0.5)
            } else {
                blend(&centroid, &vertices[worst], -0.5)
            };
            let f_con = eval(&contracted, &mut evals);
            if f_con < values[worst].min(f_ref) {
                vertices[worst] = contracted;
                values[worst] = f_con;
            } else {
                // Shrink toward the best vertex.
                let best_vertex = vertices[best].clone();
                for (i, v) in vertices.iter_mut().enumerate() {
                    if i == best {
                        continue;
                    }
                    for (vi, bi) in v.iter_mut().zip(&best_vertex) {
                        *vi = bi + 0.5 * (*vi - bi);
                    }
                    values[i] = eval(v, &mut evals);
                }
            }
        }
    }

    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let best = order[0];
    OptimOutcome {
        x: vertices[best].clone(),
        f: values[best],
        iterations,
        evals,
        converged: converged && values[best].is_finite(),
    }
}

/// Runs Nelder-Mead, then restarts once from the found point with a smaller
/// simplex to polish the optimum.
pub fn nelder_mead_polished<F>(mut f: F, x0: &[f64], opts: &SimplexOptions) -> OptimOutcome
where
    F: FnMut(&[f64]) -> f64,
{
    let first = nelder_mead(&mut f, x0, opts);
    if !first.f.is_finite() {
        return first;
    }
    let polish_opts = SimplexOptions {
        initial_step: opts.initial_step.iter().map(|s| s * 0.1).collect(),
        ..opts.clone()
    };
    let second = nelder_mead(&mut f, &first.x, &polish_opts);
    let improved = second.f < first.f - TIE_TOL * (1.0 + first.f.abs());
    if improved {
        OptimOutcome {
            iterations: first.iterations + second.iterations,
            evals: first.evals + second.evals,
            converged: first.converged || second.converged,
            ..second
        }
    } else {
        OptimOutcome {
            iterations: first.iterations + second.iterations,
            evals: first.evals + second.evals,
            ..first
        }
    }
}

#[derive(Clone, Debug)]
pub struct GaussNewtonOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Projects a trial point back into the feasible box.
    pub fd_step: f64,
}

/// Gauss-Newton on `min ||r(x)||^2` with a forward-difference Jacobian.
/// `residuals` returns `None` when the point is infeasible or the model blew
/// up; such trial points are rejected during the line search.
pub fn gauss_newton<R, P>(
    mut residuals: R,
    project: P,
    x0: &[f64],
    opts: &GaussNewtonOptions,
) -> OptimOutcome
where
    R: FnMut(&[f64]) -> Option<DVector<f64>>,
    P: Fn(&mut [f64]),
{
    let dim = x0.len();
    let mut x = x0.to_vec();
    project(&mut x);
    let mut evals = 0usize;

    let mut r = match {
        evals += 1;
        residuals(&x)
    } {
        Some(r) => r,
        None => {
            return OptimOutcome {
                x,
                f: f64::INFINITY,
                iterations: 0,
                evals,
                converged: false,
            }
        }
    };
    let mut obj = r.norm_squared();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        iterations += 1;
        let m = r.len();
        let mut jac = DMatrix::zeros(m, dim);
        let mut ok = true;
        for j in 0..dim {
            let mut xp = x.clone();
            let h = opts.fd_step * (1.0 + xp[j].abs());
            xp[j] += h;
            project(&mut xp);
            let hj = xp[j] - x[j];
            if hj == 0.0 {
                continue;
            }
            evals += 1;
            match residuals(&xp) {
                Some(rp) => {
                    for i in 0..m {
                        jac[(i, j)] = (rp[i] - r[i]) / hj;
                    }
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }

        let grad = jac.transpose() * &r;
        if 2.0 * grad.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        let mut a = jac.transpose() * &jac;
        let mut chol = a.clone().cholesky();
        if chol.is_none() {
            let ridge = 1e-10 * a.diagonal().amax().max(1e-300);
            for i in 0..dim {
                a[(i, i)] += ridge;
            }
            chol = a.cholesky();
        }
        let Some(chol) = chol else { break };
        let delta = chol.solve(&(-&grad));

        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let mut trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(xi, d)| xi + t * d).collect();
            project(&mut trial);
            evals += 1;
            if let Some(rt) = residuals(&trial) {
                let trial_obj = rt.norm_squared();
                if trial_obj < obj {
                    let step = trial
                        .iter()
                        .zip(&x)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0_f64, f64::max);
                    x = trial;
                    r = rt;
                    obj = trial_obj;
                    accepted = true;
                    if step < 1e-12 * (1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))) {
                        converged = true;
                    }
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            // No descent direction left at line-search resolution.
            converged = 2.0 * grad.amax() < 1e-4 * (1.0 + obj);
            break;
        }
        if converged {
            break;
        }
    }

    OptimOutcome { x, f: obj, iterations, evals, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_opts(dim: usize) -> SimplexOptions {
        SimplexOptions {
            max_iters: 2000,
            tol_f: 1e-12,
            tol_x: 1e-10,
            initial_step: vec![0.1; dim],
        }
    }

    #[test]
    fn simplex_minimizes_quadratic() {
        let out = nelder_mead_polished(
            |x| (x[0] - 1.5).powi(2) + 2.0 * (x[1] + 0.5).powi(2),
            &[0.0, 0.0],
            &default_opts(2),
        );
        assert!(out.converged);
        assert!((out.x[0] - 1.5).abs() < 1e-6);
        assert!((out.x[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn simplex_minimizes_rosenbrock() {
        let out = nelder_mead_polished(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &default_opts(2),
        );
        assert!((out.x[0] - 1.0).abs() < 1e-4, "{:?}", out.x);
        assert!((out.x[1] - 1.0).abs() < 1e-4, "{:?}", out.x);
    }

    #[test]
    fn simplex_returns_seed_on_flat_objective() {
        let out = nelder_mead(|_| 0.0, &[0.25, -0.75], &default_opts(2));
        assert!(out.converged);
        assert_eq!(out.x, vec![0.25, -0.75]);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn simplex_respects_infeasible_barrier() {
        let out = nelder_mead_polished(
            |x| {
                if x[0] < 0.0 {
                    f64::INFINITY
                } else {
                    (x[0] - 0.0).powi(2) + 1.0
                }
            },
            &[0.5],
            &default_opts(1),
        );
        assert!(out.x[0] >= 0.0);
        assert!(out.f <= 1.0 + 1e-8);
    }

    #[test]
    fn gauss_newton_solves_exponential_fit() {
        // Fit a + b*exp(-t) to exact data.
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.2).collect();
        let data: Vec<f64> = times.iter().map(|t| 0.7 + 1.3 * (-t).exp()).collect();
        let out = gauss_newton(
            |x| {
                Some(DVector::from_iterator(
                    times.len(),
                    times.iter().zip(&data).map(|(t, d)| x[0] + x[1] * (-t).exp() - d),
                ))
            },
            |_| {},
            &[0.0, 1.0],
            &GaussNewtonOptions { max_iters: 50, grad_tol: 1e-10, fd_step: 1e-7 },
        );
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 0.7).abs() < 1e-5);
        assert!((out.x[1] - 1.3).abs() < 1e-5);
    }
}
