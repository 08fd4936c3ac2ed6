//! Unconstrained minimisation by BFGS with a backtracking Armijo line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsSettings {
    /// Converged when the max-norm of the gradient falls to this value.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsSettings {
    fn default() -> Self {
        Self { grad_tol: 1e-6, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn max_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimises `objective`, which returns the value and gradient at a point.
/// Non-finite values are treated as `+inf` and make the line search back off.
pub fn minimize<F>(mut objective: F, x0: &[f64], settings: BfgsSettings) -> BfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut f, g) = objective(x.as_slice());
    let mut g = DVector::from_vec(g);
    let mut h = DMatrix::<f64>::identity(n, n) * (1.0 / max_norm(&g).max(1.0));
    let mut fresh_h = true;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        if max_norm(&g) <= settings.grad_tol {
            break;
        }
        iterations += 1;
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n) * (1.0 / max_norm(&g).max(1.0));
            dir = -(&h * &g);
            slope = g.dot(&dir);
            fresh_h = true;
        }

        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-20 {
            let trial = &x + &dir * step;
            let (ft, gt) = objective(trial.as_slice());
            let gt = DVector::from_vec(gt);
            // near the optimum the decrease drops below the rounding error of f;
            // a smaller gradient is accepted as progress there
            let within_noise = (ft - f).abs() <= 1e-13 * f.abs().max(1.0) && max_norm(&gt) < max_norm(&g);
            if ft.is_finite() && (ft <= f + 1e-4 * step * slope || within_noise) {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            if fresh_h {
                break;
            }
            h = DMatrix::identity(n, n) * (1.0 / max_norm(&g).max(1.0));
            fresh_h = true;
            continue;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh_h {
                // rescale the initial approximation before the first update
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s (Hy)' + (Hy) s') + (rho^2 y'Hy + rho) s s'
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh_h = false;
        }
        let stalled = (f - f_new).abs() <= f64::EPSILON * f.abs().max(1.0) && max_norm(&s) <= 1e-14;
        x = x_new;
        f = f_new;
        g = g_new;
        if stalled && max_norm(&g) > settings.grad_tol {
            break;
        }
    }

    let converged = max_norm(&g) <= settings.grad_tol;
    BfgsResult {
        x: x.as_slice().to_vec(),
        value: f,
        gradient: g.as_slice().to_vec(),
        iterations,
        converged,
    }
}
