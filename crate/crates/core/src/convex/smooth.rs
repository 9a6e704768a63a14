//! Quasi-Newton descent for smooth objectives.

use nalgebra::DVector;

use crate::error::{invalid, Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy)]
pub struct SmoothSettings {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor during backtracking.
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for SmoothSettings {
    fn default() -> Self {
        SmoothSettings {
            max_iters: 200,
            grad_tol: 1e-8,
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoothResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// True when the gradient tolerance was met; false when the budget ran out
    /// or the line search could not make progress.
    pub converged: bool,
}

/// BFGS with backtracking line search.
///
/// `f` returns the value and gradient, or `None` where the objective is
/// undefined (such points are treated as +inf by the line search).
pub fn minimize_smooth<F>(f: F, x0: &DVector<f64>, st: &SmoothSettings) -> Result<SmoothResult>
where
    F: Fn(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    if !(st.shrink > 0.0 && st.shrink < 1.0) || !(st.armijo > 0.0 && st.armijo < 0.5) {
        return invalid("line-search constants out of range");
    }
    let eval = |x: &DVector<f64>| f(x).filter(|(v, g)| v.is_finite() && g.iter().all(|c| c.is_finite()));
    let (mut fx, mut g) = eval(x0).ok_or_else(|| {
        Error::Numeric("objective undefined at the initial point; draw a new one".into())
    })?;
    let n = x0.len();
    let mut x = x0.clone();
    let mut h = Mat::identity(n, n);
    let mut iters = 0;
    let mut converged = g.norm() <= st.grad_tol;
    while !converged && iters < st.max_iters {
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h = Mat::identity(n, n);
            d = -g.clone();
            slope = -g.norm_squared();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..st.max_backtracks {
            let xn = &x + &d * step;
            if let Some((fnew, gnew)) = eval(&xn) {
                if fnew <= fx + st.armijo * step * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            step *= st.shrink;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            // H+ = (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            h = &h - (&hy * s.transpose() + &s * hy.transpose()) * rho
                + (&s * s.transpose()) * (rho * rho * y.dot(&hy) + rho);
        }
        x = xn;
        fx = fnew;
        g = gnew;
        iters += 1;
        converged = g.norm() <= st.grad_tol;
    }
    Ok(SmoothResult {
        grad_norm: g.norm(),
        x,
        value: fx,
        iterations: iters,
        converged,
    })
}

/// Central finite-difference gradient; used to check analytic gradients.
pub fn finite_difference_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> Option<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Option<f64>,
{
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp)? - f(&xm)?) / (2.0 * h);
    }
    Some(g)
}
