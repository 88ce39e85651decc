//! In-repo nonlinear least squares: a Levenberg-Marquardt loop over
//! residual vectors with a Nelder-Mead fallback for objectives whose
//! curvature information fails.
//!
//! The cost is the sum of squared residuals. Box bounds are handled by
//! projection; a bound that stays active at the optimum is reported.

use nalgebra::{DMatrix, DVector};

use super::EstimationError;

/// Box constraints; entries may be ±∞.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    fn clamp(&self, p: &mut [f64]) {
        for (x, (lo, hi)) in p.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *x = x.clamp(*lo, *hi);
        }
    }

    fn active(&self, p: &[f64]) -> Vec<usize> {
        p.iter()
            .enumerate()
            .filter(|(i, &x)| x <= self.lower[*i] || x >= self.upper[*i])
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    /// Scaled-gradient convergence threshold.
    pub gradient_tol: f64,
    /// Relative step-size convergence threshold.
    pub step_tol: f64,
    pub max_iterations: usize,
    /// Initial Levenberg damping.
    pub lambda_init: f64,
    /// Characteristic parameter magnitudes; used for finite-difference
    /// steps and convergence scaling. Length 1 broadcasts.
    pub typical_scale: Vec<f64>,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-12,
            step_tol: 1e-12,
            max_iterations: 200,
            lambda_init: 1e-3,
            typical_scale: vec![1.0],
        }
    }
}

impl MinimizeOptions {
    fn scale(&self, i: usize) -> f64 {
        if self.typical_scale.len() == 1 {
            self.typical_scale[0]
        } else {
            self.typical_scale[i]
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimum {
    pub point: Vec<f64>,
    /// Sum of squared residuals at the optimum.
    pub cost: f64,
    pub iterations: usize,
    /// Parameter indices pinned at a bound.
    pub active_bounds: Vec<usize>,
    /// True when the simplex fallback produced the result.
    pub used_fallback: bool,
    /// Jacobian at the optimum (weighted, row-major), when available.
    pub jacobian: Option<DMatrix<f64>>,
}

/// Least-squares minimization of `Σ residuals(p)²` starting from `initial`.
///
/// `jacobian`, when provided, returns the m×n matrix ∂r_i/∂p_j; otherwise
/// forward differences are used. Runs Levenberg-Marquardt first and falls
/// back to Nelder-Mead if the curvature path stalls; exceeding the
/// iteration budget in both yields a non-convergence error carrying the best
/// point seen.
pub fn minimize(
    residuals: &dyn Fn(&[f64]) -> Option<Vec<f64>>,
    jacobian: Option<&dyn Fn(&[f64]) -> Option<DMatrix<f64>>>,
    initial: &[f64],
    bounds: Option<&Bounds>,
    opts: &MinimizeOptions,
) -> Result<Optimum, EstimationError> {
    let n = initial.len();
    let default_bounds = Bounds::unbounded(n);
    let bounds = bounds.unwrap_or(&default_bounds);
    let mut start = initial.to_vec();
    bounds.clamp(&mut start);

    let initial_res = residuals(&start).ok_or_else(|| {
        EstimationError::NumericalFailure("objective not finite at the initial point".into())
    })?;
    if initial_res.iter().any(|r| !r.is_finite()) {
        return Err(EstimationError::NumericalFailure(
            "objective not finite at the initial point".into(),
        ));
    }

    match levenberg_marquardt(residuals, jacobian, &start, bounds, opts) {
        Ok(opt) => Ok(opt),
        Err(EstimationError::NonConvergence { best, cost }) => {
            // curvature path stalled: polish with the simplex
            match nelder_mead(residuals, &best, bounds, opts) {
                Ok(mut opt) => {
                    opt.used_fallback = true;
                    Ok(opt)
                }
                Err(_) => Err(EstimationError::NonConvergence { best, cost }),
            }
        }
        Err(e) => Err(e),
    }
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

fn numeric_jacobian(
    residuals: &dyn Fn(&[f64]) -> Option<Vec<f64>>,
    p: &[f64],
    r0: &[f64],
    opts: &MinimizeOptions,
) -> Option<DMatrix<f64>> {
    let m = r0.len();
    let n = p.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut probe = p.to_vec();
    for j in 0..n {
        let h = 1.49e-8 * p[j].abs().max(opts.scale(j)).max(1e-300);
        probe[j] = p[j] + h;
        let r = residuals(&probe)?;
        probe[j] = p[j];
        if r.len() != m {
            return None;
        }
        for i in 0..m {
            jac[(i, j)] = (r[i] - r0[i]) / h;
        }
    }
    Some(jac)
}

fn levenberg_marquardt(
    residuals: &dyn Fn(&[f64]) -> Option<Vec<f64>>,
    jacobian: Option<&dyn Fn(&[f64]) -> Option<DMatrix<f64>>>,
    start: &[f64],
    bounds: &Bounds,
    opts: &MinimizeOptions,
) -> Result<Optimum, EstimationError> {
    let n = start.len();
    let mut p = start.to_vec();
    let mut r = residuals(&p).ok_or_else(|| {
        EstimationError::NumericalFailure("residuals not finite".into())
    })?;
    let mut cost = cost_of(&r);
    let mut lambda = opts.lambda_init;
    let mut last_jac: Option<DMatrix<f64>> = None;

    for iteration in 0..opts.max_iterations {
        let jac = match jacobian {
            Some(j) => j(&p),
            None => numeric_jacobian(residuals, &p, &r, opts),
        }
        .ok_or_else(|| EstimationError::NumericalFailure("jacobian evaluation failed".into()))?;

        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);

        // projected-gradient convergence test
        let mut gnorm: f64 = 0.0;
        for j in 0..n {
            let mut gj = g[j];
            if (p[j] <= bounds.lower[j] && gj > 0.0) || (p[j] >= bounds.upper[j] && gj < 0.0) {
                gj = 0.0;
            }
            gnorm = gnorm.max((gj * p[j].abs().max(opts.scale(j))).abs());
        }
        if gnorm <= opts.gradient_tol * cost.max(1.0) || gnorm == 0.0 {
            let active_bounds = active_set(&p, bounds, &g);
            return Ok(Optimum {
                point: p,
                cost,
                iterations: iteration,
                active_bounds,
                used_fallback: false,
                jacobian: Some(jac),
            });
        }

        // damped normal equations, retrying with stronger damping on failure
        let diag_max = (0..n).map(|j| a[(j, j)]).fold(0.0f64, f64::max);
        let mut improved = false;
        for _ in 0..25 {
            let mut damped = a.clone();
            for j in 0..n {
                let d = a[(j, j)].max(1e-14 * diag_max.max(1e-300));
                damped[(j, j)] = d * (1.0 + lambda);
            }
            let step = match damped.cholesky() {
                Some(chol) => chol.solve(&(-&g)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut trial: Vec<f64> = p
                .iter()
                .zip(step.iter())
                .map(|(x, dx)| x + dx)
                .collect();
            bounds.clamp(&mut trial);
            let step_norm: f64 = trial
                .iter()
                .zip(&p)
                .enumerate()
                .map(|(j, (a, b))| ((a - b) / p[j].abs().max(opts.scale(j))).powi(2))
                .sum::<f64>()
                .sqrt();
            match residuals(&trial) {
                Some(r_trial) if r_trial.iter().all(|x| x.is_finite()) => {
                    let cost_trial = cost_of(&r_trial);
                    if cost_trial < cost {
                        p = trial;
                        r = r_trial;
                        let reduction = (cost - cost_trial) / cost.max(1e-300);
                        cost = cost_trial;
                        lambda = (lambda / 10.0).max(1e-14);
                        improved = true;
                        last_jac = Some(jac);
                        if step_norm < opts.step_tol || reduction < 1e-15 {
                            let jac_final = last_jac.take();
                            let active_bounds = active_set(&p, bounds, &g);
                            return Ok(Optimum {
                                point: p,
                                cost,
                                iterations: iteration + 1,
                                active_bounds,
                                used_fallback: false,
                                jacobian: jac_final,
                            });
                        }
                        break;
                    } else {
                        lambda *= 4.0;
                    }
                }
                _ => lambda *= 10.0,
            }
            if lambda > 1e14 {
                break;
            }
        }
        if !improved {
            // damping exploded without progress: either converged flat or stuck
            if gnorm <= 1e-6 * cost.max(1e-300) {
                let active_bounds = active_set(&p, bounds, &g);
                return Ok(Optimum {
                    point: p,
                    cost,
                    iterations: iteration,
                    active_bounds,
                    used_fallback: false,
                    jacobian: last_jac,
                });
            }
            return Err(EstimationError::NonConvergence { best: p, cost });
        }
    }
    Err(EstimationError::NonConvergence { best: p, cost })
}

/// Bounds met at `p` that actually constrain the optimum: the descent
/// direction −g points outside the box there.
fn active_set(p: &[f64], bounds: &Bounds, g: &DVector<f64>) -> Vec<usize> {
    p.iter()
        .enumerate()
        .filter(|(j, &x)| {
            (x <= bounds.lower[*j] && g[*j] > 0.0) || (x >= bounds.upper[*j] && g[*j] < 0.0)
        })
        .map(|(j, _)| j)
        .collect()
}

/// Adaptive Nelder-Mead on the scalar cost, bounds by projection.
pub fn nelder_mead(
    residuals: &dyn Fn(&[f64]) -> Option<Vec<f64>>,
    start: &[f64],
    bounds: &Bounds,
    opts: &MinimizeOptions,
) -> Result<Optimum, EstimationError> {
    let n = start.len();
    let f = |p: &[f64]| -> f64 {
        residuals(p)
            .map(|r| cost_of(&r))
            .filter(|c| c.is_finite())
            .unwrap_or(f64::INFINITY)
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut p0 = start.to_vec();
    bounds.clamp(&mut p0);
    simplex.push(p0.clone());
    for j in 0..n {
        let mut v = p0.clone();
        let step = 0.05 * p0[j].abs().max(opts.scale(j));
        v[j] += if v[j] + step <= bounds.upper[j] { step } else { -step };
        bounds.clamp(&mut v);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    let max_evals = 400 * (n + 1) * (n + 1);
    let mut evals = values.len();
    let mut iterations = 0usize;
    while evals < max_evals {
        iterations += 1;
        // order ascending by cost
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let reorder_s: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let reorder_v: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        simplex = reorder_s;
        values = reorder_v;

        // convergence: scaled simplex diameter and value spread
        let mut diameter: f64 = 0.0;
        for v in &simplex[1..] {
            for j in 0..n {
                diameter =
                    diameter.max((v[j] - simplex[0][j]).abs() / simplex[0][j].abs().max(opts.scale(j)));
            }
        }
        let spread = values[n] - values[0];
        if diameter < 1e-10 && spread <= 1e-12 * (1.0 + values[0].abs()) {
            return Ok(Optimum {
                point: simplex[0].clone(),
                cost: values[0],
                iterations,
                active_bounds: bounds.active(&simplex[0]),
                used_fallback: true,
                jacobian: None,
            });
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let mut reflect: Vec<f64> = (0..n)
            .map(|j| centroid[j] + (centroid[j] - simplex[n][j]))
            .collect();
        bounds.clamp(&mut reflect);
        let f_reflect = f(&reflect);
        evals += 1;

        if f_reflect < values[0] {
            let mut expand: Vec<f64> = (0..n)
                .map(|j| centroid[j] + 2.0 * (centroid[j] - simplex[n][j]))
                .collect();
            bounds.clamp(&mut expand);
            let f_expand = f(&expand);
            evals += 1;
            if f_expand < f_reflect {
                simplex[n] = expand;
                values[n] = f_expand;
            } else {
                simplex[n] = reflect;
                values[n] = f_reflect;
            }
        } else if f_reflect < values[n - 1] {
            simplex[n] = reflect;
            values[n] = f_reflect;
        } else {
            let mut contract: Vec<f64> = (0..n)
                .map(|j| centroid[j] + 0.5 * (simplex[n][j] - centroid[j]))
                .collect();
            bounds.clamp(&mut contract);
            let f_contract = f(&contract);
            evals += 1;
            if f_contract < values[n] {
                simplex[n] = contract;
                values[n] = f_contract;
            } else {
                // shrink toward the best vertex
                for k in 1..=n {
                    for j in 0..n {
                        simplex[k][j] = simplex[0][j] + 0.5 * (simplex[k][j] - simplex[0][j]);
                    }
                    values[k] = f(&simplex[k]);
                    evals += 1;
                }
            }
        }
    }
    let best = simplex
        .iter()
        .zip(&values)
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    Err(EstimationError::NonConvergence {
        best: best.0.clone(),
        cost: *best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_bowl_is_exact_and_fast() {
        // residuals (x−3, y+1): optimum (3, −1)
        let res = |p: &[f64]| Some(vec![p[0] - 3.0, p[1] + 1.0]);
        let opt = minimize(&res, None, &[10.0, 10.0], None, &MinimizeOptions::default()).unwrap();
        assert_abs_diff_eq!(opt.point[0], 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(opt.point[1], -1.0, epsilon = 1e-10);
        assert!(
            opt.iterations <= 4,
            "convex quadratic should converge in ≤ dim+2 iterations, took {}",
            opt.iterations
        );
        assert!(!opt.used_fallback);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let res = |p: &[f64]| Some(vec![10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]]);
        let opt = minimize(&res, None, &[-1.2, 1.0], None, &MinimizeOptions::default()).unwrap();
        assert_abs_diff_eq!(opt.point[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(opt.point[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn bounded_optimum_lands_on_boundary() {
        // unconstrained optimum at x = 3; box caps x ≤ 2
        let res = |p: &[f64]| Some(vec![p[0] - 3.0]);
        let bounds = Bounds {
            lower: vec![0.0],
            upper: vec![2.0],
        };
        let opt = minimize(
            &res,
            None,
            &[0.5],
            Some(&bounds),
            &MinimizeOptions::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(opt.point[0], 2.0, epsilon = 1e-12);
        assert_eq!(opt.active_bounds, vec![0]);
    }

    #[test]
    fn iteration_cap_reports_best_point() {
        let res = |p: &[f64]| Some(vec![10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]]);
        let opts = MinimizeOptions {
            max_iterations: 2,
            ..Default::default()
        };
        let err = levenberg_marquardt(
            &res,
            None,
            &[-1.2, 1.0],
            &Bounds::unbounded(2),
            &opts,
        )
        .unwrap_err();
        match err {
            EstimationError::NonConvergence { best, cost } => {
                assert_eq!(best.len(), 2);
                assert!(cost.is_finite());
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_finite_initial_point_is_an_error() {
        let res = |_: &[f64]| -> Option<Vec<f64>> { None };
        assert!(matches!(
            minimize(&res, None, &[0.0], None, &MinimizeOptions::default()),
            Err(EstimationError::NumericalFailure(_))
        ));
    }

    #[test]
    fn nelder_mead_handles_nonsmooth_objective() {
        let res = |p: &[f64]| Some(vec![p[0].abs().sqrt().max(1e-12)]);
        let opt = nelder_mead(
            &res,
            &[2.0],
            &Bounds::unbounded(1),
            &MinimizeOptions::default(),
        )
        .unwrap();
        assert!(opt.point[0].abs() < 1e-6);
    }
}
