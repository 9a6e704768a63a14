//! Equality-constrained linear least squares.

use nalgebra::DVector;

use super::affine::{Affine, MatVar, VarSpace};
use crate::error::{dim_err, invalid, Error, Result};
use crate::linalg::{self, Mat};

/// Minimize the sum of squared Frobenius norms of affine residuals subject to
/// affine equalities `E(y) = 0`.
#[derive(Debug, Clone, Default)]
pub struct LsqProblem {
    vars: VarSpace,
    residuals: Vec<Affine>,
    equalities: Vec<Affine>,
}

#[derive(Debug, Clone)]
pub struct LsqSolution {
    pub y: DVector<f64>,
    /// Sum of squared residual norms at the minimizer.
    pub cost: f64,
    /// Relative residual of the KKT conditions (stationarity and feasibility).
    pub kkt_residual: f64,
    vars: VarSpace,
}

impl LsqSolution {
    pub fn value(&self, v: MatVar) -> Mat {
        self.vars.value(v, &self.y)
    }

    pub fn eval(&self, e: &Affine) -> Mat {
        e.eval(&self.y)
    }
}

/// KKT residual above which a solve is reported as a numerical failure.
pub const KKT_TOL: f64 = 1e-9;

impl LsqProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn full(&mut self, name: &str, rows: usize, cols: usize) -> MatVar {
        self.vars.full(name, rows, cols)
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> MatVar {
        self.vars.symmetric(name, n)
    }

    pub fn expr(&self, v: MatVar) -> Affine {
        self.vars.expr(v)
    }

    /// Add `||e||_F^2` to the cost.
    pub fn residual(&mut self, e: Affine) -> Result<()> {
        if e.nvars() > self.vars.len() {
            return invalid("residual references undeclared variables");
        }
        self.residuals.push(e);
        Ok(())
    }

    /// Require `e = rhs`.
    pub fn equal(&mut self, e: Affine, rhs: &Mat) -> Result<()> {
        if e.shape() != rhs.shape() {
            return dim_err(format!(
                "equality shape {:?} vs right-hand side {:?}",
                e.shape(),
                rhs.shape()
            ));
        }
        if e.nvars() > self.vars.len() {
            return invalid("equality references undeclared variables");
        }
        self.equalities.push(&e - rhs);
        Ok(())
    }

    pub fn solve(&self) -> Result<LsqSolution> {
        solve_eq_least_squares(self)
    }
}

fn stack(exprs: &[Affine], nv: usize) -> Result<(Mat, DVector<f64>)> {
    let jacs: Vec<Mat> = exprs.iter().map(|e| e.vec().jacobian_padded(nv)).collect();
    let consts: Vec<Mat> = exprs.iter().map(|e| e.vec().constant_part().clone()).collect();
    let j = if jacs.is_empty() {
        Mat::zeros(0, nv)
    } else {
        linalg::vstack(&jacs.iter().collect::<Vec<_>>())?
    };
    let c = if consts.is_empty() {
        DVector::zeros(0)
    } else {
        let m = linalg::vstack(&consts.iter().collect::<Vec<_>>())?;
        DVector::from_column_slice(m.as_slice())
    };
    Ok((j, c))
}

/// Null-space method: `y = y0 + Z z` parametrizes the equalities, then an
/// unconstrained minimum-norm least-squares problem is solved in `z`.
pub fn solve_eq_least_squares(p: &LsqProblem) -> Result<LsqSolution> {
    if p.residuals.is_empty() {
        return invalid("least-squares problem has no residual terms");
    }
    let nv = p.vars.len();
    let (f, g) = stack(&p.residuals, nv)?;
    let (e, h) = stack(&p.equalities, nv)?;

    let (y0, z) = if e.nrows() == 0 {
        (DVector::zeros(nv), Mat::identity(nv, nv))
    } else {
        let rhs = Mat::from_column_slice(h.len(), 1, (-&h).as_slice());
        let y0 = linalg::lstsq_tol(&e, &rhs, 1e-13)?;
        let res = (&e * &y0 - &rhs).norm();
        let scale = e.norm() * y0.norm() + rhs.norm() + f64::MIN_POSITIVE;
        if res > 1e-9 * scale {
            return Err(Error::Infeasible(format!(
                "equality constraints are inconsistent (residual {res:.2e})"
            )));
        }
        (
            DVector::from_column_slice(y0.as_slice()),
            linalg::null_space_basis(&e, 1e-12)?,
        )
    };

    let r0 = &f * &y0 + &g;
    let fz = &f * &z;
    let zsol = linalg::lstsq(&fz, &Mat::from_column_slice(r0.len(), 1, (-&r0).as_slice()))?;
    let y = &y0 + &z * DVector::from_column_slice(zsol.as_slice());

    let r = &f * &y + &g;
    let cost = r.norm_squared();

    // Stationarity: F^T r + E^T lambda = 0 for some lambda.
    let grad = f.transpose() * &r;
    let stat = if e.nrows() == 0 {
        grad.norm()
    } else {
        let lam = linalg::lstsq(
            &e.transpose(),
            &Mat::from_column_slice(grad.len(), 1, (-&grad).as_slice()),
        )?;
        (&grad + e.transpose() * DVector::from_column_slice(lam.as_slice())).norm()
    };
    let fnorm = f.norm();
    let stat_rel = stat / (fnorm * fnorm * y.norm() + fnorm * g.norm() + f64::MIN_POSITIVE);
    let feas_rel = if e.nrows() == 0 {
        0.0
    } else {
        (&e * &y + &h).norm() / (e.norm() * y.norm() + h.norm() + f64::MIN_POSITIVE)
    };
    let kkt_residual = stat_rel.max(feas_rel);
    if kkt_residual > KKT_TOL {
        return Err(Error::Numeric(format!(
            "KKT residual {kkt_residual:.2e} exceeds {KKT_TOL:.0e}"
        )));
    }
    Ok(LsqSolution {
        y,
        cost,
        kkt_residual,
        vars: p.vars.clone(),
    })
}
