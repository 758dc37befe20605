//! Quasi-Newton maximization with finite-difference gradients, used by the
//! penalized marginal fits. Dimensions are small (tens), so BFGS with a
//! dense inverse-Hessian approximation and backtracking line search is
//! plenty.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("no convergence after {iterations} iterations; last objective {last_objective}")]
    NonConvergence { iterations: usize, last_objective: f64 },
    #[error("objective is not finite at the starting point")]
    BadStart,
}

fn gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], fx: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = if fp.is_finite() && fm.is_finite() {
            (fp - fm) / (2.0 * h)
        } else if fp.is_finite() {
            (fp - fx) / h
        } else if fm.is_finite() {
            (fx - fm) / h
        } else {
            0.0
        };
    }
    g
}

/// Maximizes `f` from `x0`. Returns the maximizer, its objective value, and
/// the iteration count. The objective may return -inf outside its domain;
/// the line search backs away from such points.
pub fn bfgs_max<F: Fn(&[f64]) -> f64>(
    f: F,
    x0: Vec<f64>,
    max_iter: usize,
    grad_tol: f64,
) -> Result<(Vec<f64>, f64, usize), OptimError> {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(OptimError::BadStart);
    }
    let mut g = gradient(&f, &x, fx);
    // inverse Hessian approximation of the negated objective
    let mut h_inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    // finite-difference gradients bottom out near eps*|f|/h, so an absolute
    // gradient test alone can be unreachable; stop once accepted steps no
    // longer move the objective
    let mut stalled = 0usize;

    for iter in 0..max_iter {
        if g.iter().all(|gi| gi.abs() <= grad_tol * (1.0 + fx.abs())) {
            return Ok((x, fx, iter));
        }
        // ascent direction d = H_inv * g
        let mut d: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| h_inv[i][j] * g[j]).sum())
            .collect();
        let dir_deriv: f64 = d.iter().zip(&g).map(|(di, gi)| di * gi).sum();
        if dir_deriv <= 0.0 {
            // approximation lost positive definiteness; restart from steepest ascent
            for (i, row) in h_inv.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if i == j { 1.0 } else { 0.0 };
                }
            }
            d = g.clone();
        }
        let slope: f64 = d.iter().zip(&g).map(|(di, gi)| di * gi).sum();

        let mut alpha = 1.0;
        let mut x_new = x.clone();
        let mut f_new = f64::NEG_INFINITY;
        let mut ok = false;
        for _ in 0..50 {
            for i in 0..n {
                x_new[i] = x[i] + alpha * d[i];
            }
            f_new = f(&x_new);
            if f_new.is_finite() && f_new >= fx + 1e-4 * alpha * slope {
                ok = true;
                break;
            }
            alpha *= 0.5;
        }
        if !ok {
            // no ascent possible along d: treat as converged at x
            return Ok((x, fx, iter));
        }
        if f_new - fx <= 1e-11 * (1.0 + f_new.abs()) {
            stalled += 1;
            if stalled >= 2 {
                return Ok((x_new, f_new, iter + 1));
            }
        } else {
            stalled = 0;
        }
        let g_new = gradient(&f, &x_new, f_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        // y in descent convention: gradient change of -f
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            // standard BFGS update of the inverse Hessian
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| h_inv[i][j] * y[j]).sum())
                .collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h_inv[i][j] += ((sy + yhy) / (sy * sy)) * s[i] * s[j]
                        - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    Err(OptimError::NonConvergence { iterations: max_iter, last_objective: fx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn maximizes_quadratic() {
        let (x, fx, _) = bfgs_max(
            |t| -((t[0] - 1.5f64).powi(2) + 2.0 * (t[1] + 0.5f64).powi(2)),
            vec![0.0, 0.0],
            200,
            1e-10,
        )
        .unwrap();
        assert_relative_eq!(x[0], 1.5, epsilon = 1e-5);
        assert_relative_eq!(x[1], -0.5, epsilon = 1e-5);
        assert!(fx.abs() < 1e-9);
    }

    #[test]
    fn climbs_negative_rosenbrock() {
        let (x, _, _) = bfgs_max(
            |t| -(100.0 * (t[1] - t[0] * t[0]).powi(2) + (1.0 - t[0]).powi(2)),
            vec![-1.2, 1.0],
            500,
            1e-10,
        )
        .unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-3);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn respects_domain_walls() {
        // objective -inf for t[0] <= 0; optimum at 2
        let (x, _, _) = bfgs_max(
            |t: &[f64]| {
                if t[0] <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    -(t[0].ln() - 2.0f64.ln()).powi(2)
                }
            },
            vec![0.5],
            200,
            1e-10,
        )
        .unwrap();
        assert!(x[0] > 0.0);
        assert_relative_eq!(x[0], 2.0, epsilon = 1e-4);
    }

    #[test]
    fn bad_start_rejected() {
        assert!(matches!(
            bfgs_max(|_| f64::NEG_INFINITY, vec![0.0], 10, 1e-8),
            Err(OptimError::BadStart)
        ));
    }

    #[test]
    fn iteration_cap_reported() {
        // a needle the optimizer cannot finish in 2 iterations
        let r = bfgs_max(
            |t| -(100.0 * (t[1] - t[0] * t[0]).powi(2) + (1.0 - t[0]).powi(2)),
            vec![-1.2, 1.0],
            2,
            1e-12,
        );
        assert!(matches!(r, Err(OptimError::NonConvergence { iterations: 2, .. })));
    }
}
