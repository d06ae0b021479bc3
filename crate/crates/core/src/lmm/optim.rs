//! BFGS quasi-Newton minimizer with backtracking line search.

use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions<F> {
    pub max_iter: usize,
    /// Relative change in the objective between accepted iterates.
    pub f_rel_tol: F,
    /// Euclidean norm of the gradient.
    pub grad_tol: F,
    /// Largest allowed step (max-norm) in parameter space.
    pub max_step: F,
}

impl<F: Scalar> Default for BfgsOptions<F> {
    fn default() -> Self {
        Self {
            max_iter: 500,
            f_rel_tol: F::lit(1e-10),
            grad_tol: F::lit(1e-6),
            max_step: F::lit(4.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult<F> {
    pub x: Vec<F>,
    pub f: F,
    pub grad: Vec<F>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted iterate (starting point first).
    pub history: Vec<F>,
    pub message: String,
}

fn norm<F: Scalar>(v: &[F]) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Minimizes `objective`, which returns value and gradient. Evaluation
/// errors and non-finite values at trial points are treated as infeasible
/// and shrink the step.
pub fn minimize<F, O>(mut objective: O, x0: &[F], opts: &BfgsOptions<F>) -> Result<BfgsResult<F>>
where
    F: Scalar,
    O: FnMut(&[F]) -> Result<(F, Vec<F>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x)?;
    let mut h = identity::<F>(n);
    let mut history = vec![f];
    let mut iterations = 0;
    let mut fresh_hessian = true;
    let half = F::lit(0.5);
    let armijo = F::lit(1e-4);
    let noise_level = F::lit(1e-12);
    let (wolfe_hi, wolfe_lo) = (F::lit(0.9), F::lit(-0.8));

    let converged_at = |f_prev: F, f_new: F, g: &[F]| {
        let rel = (f_prev - f_new).abs() / f_new.abs().max(F::one());
        rel < opts.f_rel_tol && norm(g) < opts.grad_tol
    };

    if norm(&g) < opts.grad_tol {
        return Ok(BfgsResult {
            x,
            f,
            grad: g,
            iterations,
            converged: true,
            history,
            message: "gradient already below tolerance".into(),
        });
    }

    while iterations < opts.max_iter {
        iterations += 1;
        let mut dir: Vec<F> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < F::zero()) {
            h = identity(n);
            fresh_hessian = true;
            dir = g.iter().map(|&v| -v).collect();
            slope = dot(&dir, &g);
        }
        let biggest = dir.iter().fold(F::zero(), |m, v| m.max(v.abs()));
        let mut step = if biggest > opts.max_step { opts.max_step / biggest } else { F::one() };

        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<F> = x.iter().zip(&dir).map(|(&xi, &di)| xi + step * di).collect();
            if let Ok((ft, gt)) = objective(&trial) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) {
                    // Near the optimum the decrease falls below the rounding
                    // level of f; then fall back on the approximate Wolfe test
                    // on the directional derivative.
                    let dphi = dot(&gt, &dir) * step;
                    let noise = noise_level * f.abs().max(F::one());
                    let approx_wolfe = ft <= f + noise && dphi >= wolfe_hi * step * slope && dphi <= wolfe_lo * step * slope;
                    if ft <= f + armijo * step * slope || approx_wolfe {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
            }
            step *= half;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            if !fresh_hessian {
                h = identity(n);
                fresh_hessian = true;
                continue;
            }
            let gn = norm(&g);
            return Ok(BfgsResult {
                converged: gn < opts.grad_tol,
                x,
                f,
                grad: g,
                iterations,
                history,
                message: format!("line search stalled with gradient norm {gn:e}"),
            });
        };

        let s: Vec<F> = x_new.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<F> = g_new.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > F::epsilon() * norm(&s) * norm(&y) {
            if fresh_hessian {
                // Scale the initial inverse Hessian to the observed curvature.
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
                fresh_hessian = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }

        let f_prev = f;
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
        if converged_at(f_prev, f, &g) {
            return Ok(BfgsResult {
                x,
                f,
                grad: g,
                iterations,
                converged: true,
                history,
                message: "converged".into(),
            });
        }
    }

    Ok(BfgsResult {
        converged: false,
        message: format!("no convergence after {} iterations (gradient norm {:e})", opts.max_iter, norm(&g)),
        x,
        f,
        grad: g,
        iterations,
        history,
    })
}

fn identity<F: Scalar>(n: usize) -> Vec<F> {
    let mut h = vec![F::zero(); n * n];
    for i in 0..n {
        h[i * n + i] = F::one();
    }
    h
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`, `ρ = 1 / yᵀs`.
fn bfgs_update<F: Scalar>(h: &mut [F], s: &[F], y: &[F], sy: F) {
    let n = s.len();
    let rho = F::one() / sy;
    let hy: Vec<F> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    let coef = (F::one() + rho * yhy) * rho;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Central finite-difference gradient, used to check analytic gradients.
pub fn central_difference<F: Scalar>(mut f: impl FnMut(&[F]) -> F, x: &[F], h: F) -> Vec<F> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (F::lit(2.0) * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((f, g))
        };
        let opts = BfgsOptions {
            f_rel_tol: 1e-14,
            grad_tol: 1e-8,
            ..Default::default()
        };
        let r = minimize(obj, &[-1.2, 1.0], &opts).unwrap();
        assert!(r.converged, "{}", r.message);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_in_f32() {
        let obj = |x: &[f32]| -> Result<(f32, Vec<f32>)> {
            Ok(((x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2), vec![2.0 * (x[0] - 3.0), 4.0 * (x[1] + 1.0)]))
        };
        let opts = BfgsOptions {
            f_rel_tol: 1e-6,
            grad_tol: 1e-4,
            ..Default::default()
        };
        let r = minimize(obj, &[0.0f32, 0.0], &opts).unwrap();
        assert!((r.x[0] - 3.0).abs() < 1e-3 && (r.x[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn finite_difference_matches_polynomial() {
        let g = central_difference(|x: &[f64]| x[0].powi(3) + x[0] * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 17.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }
}
