//! BFGS minimization with a backtracking Armijo line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Relative change of the objective between accepted iterates.
    pub rel_tol: f64,
    /// Infinity norm of the gradient.
    pub grad_tol: f64,
    /// Largest coordinate change of a single step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 200, rel_tol: 1e-6, grad_tol: 1e-3, max_step: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: String,
}

/// Minimizes `f`. The closure returns the value and, when asked, the
/// gradient; `None` marks a point where the objective is undefined, which
/// the line search treats as infinitely bad.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Option<BfgsResult>
where
    F: FnMut(&[f64], bool) -> Option<(f64, Option<Vec<f64>>)>,
{
    let n = x0.len();
    let mut evals = 0;
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = f(x.as_slice(), true)?;
    evals += 1;
    let mut g = DVector::from_vec(g0?);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut message = String::from("iteration limit reached");
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if g.amax() <= opts.grad_tol {
            converged = true;
            message = "gradient tolerance met".into();
            break;
        }
        iterations += 1;
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let scale = dir.amax();
        if scale > opts.max_step {
            dir *= opts.max_step / scale;
        } else if first && scale > 0.0 {
            // unit-free start: first trial moves one unit along the steepest coordinate
            dir *= 1.0 / scale;
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &dir * step;
            evals += 1;
            if let Some((ft, _)) = f(trial.as_slice(), false) {
                if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            converged = g.amax() <= opts.grad_tol.max(1e-2);
            message = "line search failed to decrease the objective".into();
            break;
        };
        let (f_chk, g_new) = f(x_new.as_slice(), true)?;
        evals += 1;
        let g_new = DVector::from_vec(g_new?);
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if first {
                // Shanno-Phua scaling of the initial inverse Hessian
                h = DMatrix::identity(n, n) * (sy / yv.dot(&yv));
            }
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        first = false;
        let df = (fx - f_new).abs();
        x = x_new;
        fx = f_chk;
        g = g_new;
        if df <= opts.rel_tol * (1.0 + fx.abs()) && g.amax() <= opts.grad_tol {
            converged = true;
            message = "objective and gradient tolerances met".into();
            break;
        }
        if df <= 1e-15 * (1.0 + fx.abs()) {
            converged = g.amax() <= opts.grad_tol.max(1e-2);
            message = "objective stagnated".into();
            break;
        }
    }
    Some(BfgsResult {
        x: x.as_slice().to_vec(),
        f: fx,
        grad: g.as_slice().to_vec(),
        iterations,
        evaluations: evals,
        converged,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64], grad: bool| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = grad.then(|| vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            Some((v, g))
        };
        let opts = BfgsOptions { grad_tol: 1e-8, rel_tol: 0.0, ..Default::default() };
        let r = minimize(f, &[-1.2, 1.0], &opts).unwrap();
        assert!(r.converged, "{}", r.message);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn undefined_region_is_avoided() {
        // log barrier at x < 0
        let f = |x: &[f64], grad: bool| {
            if x[0] <= 0.0 {
                return Some((f64::INFINITY, grad.then(|| vec![0.0])));
            }
            Some((x[0] - 2.0 * x[0].ln(), grad.then(|| vec![1.0 - 2.0 / x[0]])))
        };
        let r = minimize(f, &[0.1], &BfgsOptions::default()).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-3);
    }
}
