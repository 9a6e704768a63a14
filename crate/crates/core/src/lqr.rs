//! Continuous-time LQR from data.
//!
//! `P*` maximizes `tr(P)` subject to
//! `L(P) = Hx'Q Hx + Hu'R Hu + Hx'P Hxd + Hxd'P Hx ⪰ 0`, and `Γ` solves
//! `[Hx; L(P*)] Γ = [I; 0]`, giving `K = -Hu Γ`.

use nalgebra::SymmetricEigen;

use crate::convex::{Affine, SdpProblem, SdpSettings};
use crate::datamat::{ensure_pe_at, HankelTriple};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Mat};
use crate::system::LtiSystem;

/// Residual tolerance for the linear system defining `Γ`.
pub const GAMMA_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct WeightPair {
    q: Mat,
    r: Mat,
}

impl WeightPair {
    pub fn new(q: Mat, r: Mat) -> Result<Self> {
        linalg::ensure_square(&q, "Q")?;
        linalg::ensure_square(&r, "R")?;
        linalg::ensure_finite(&q, "Q")?;
        linalg::ensure_finite(&r, "R")?;
        for (m, name) in [(&q, "Q"), (&r, "R")] {
            if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                return invalid(format!("{name} must be symmetric"));
            }
        }
        let (q, r) = (linalg::symmetrize(&q), linalg::symmetrize(&r));
        if linalg::min_sym_eigenvalue(&q) < -1e-12 * q.amax().max(1.0) {
            return invalid("Q must be positive semidefinite");
        }
        if !linalg::is_pos_def(&r) {
            return invalid("R must be positive definite");
        }
        Ok(WeightPair { q, r })
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }

    pub fn r(&self) -> &Mat {
        &self.r
    }
}

#[derive(Debug, Clone)]
pub struct LqrResult {
    pub k: Mat,
    pub p: Mat,
    pub gamma: Mat,
    /// Relative residual of `[Hx; L(P*)] Γ = [I; 0]`.
    pub gamma_residual: f64,
    pub grid_index: usize,
}

/// `L(P)` as an affine expression in the symmetric variable `P`.
pub(crate) fn lqr_operator(h: &HankelTriple, j: usize, w: &WeightPair, p: &Affine) -> Affine {
    let (hx, hu, hxd) = (h.hx(j), h.hu(), h.hxd(j));
    let cst = hx.transpose() * w.q() * hx + hu.transpose() * w.r() * hu;
    let cross = p.lmul(&hx.transpose()).rmul(hxd);
    &(&cross + &cross.transpose()) + &cst
}

/// Evaluated `L(P)`.
pub fn lqr_operator_value(h: &HankelTriple, j: usize, w: &WeightPair, p: &Mat) -> Mat {
    let (hx, hu, hxd) = (h.hx(j), h.hu(), h.hxd(j));
    let cross = hx.transpose() * p * hxd;
    hx.transpose() * w.q() * hx + hu.transpose() * w.r() * hu + &cross + cross.transpose()
}

/// Orthonormal basis of the row space of `[Hx; Hu; Hxd]`. Every term of
/// `L(P)` lives there, so `L(P) ⪰ 0` iff `V' L(P) V ⪰ 0`.
fn data_row_basis(h: &HankelTriple, j: usize) -> Result<Mat> {
    let s = linalg::vstack(&[h.hx(j), h.hu(), h.hxd(j)])?;
    Ok(linalg::row_space_basis(&s, 1e-10))
}

fn check_weights(h: &HankelTriple, w: &WeightPair) -> Result<()> {
    linalg::ensure_shape(w.q(), h.n(), h.n(), "Q")?;
    linalg::ensure_shape(w.r(), h.m(), h.m(), "R")
}

/// Data-based LQR gain at grid index `j`.
pub fn solve_lqr_data(h: &HankelTriple, j: usize, w: &WeightPair, settings: &SdpSettings) -> Result<LqrResult> {
    solve_lqr_data_with(h, j, w, &Mat::identity(h.n(), h.n()), settings)
}

/// Variant with `[Hx; L(P*)] Γ = [S; 0]` for a nonsingular `S`; the gain is
/// then `-Hu Γ (Hx Γ)^{-1}`.
pub fn solve_lqr_data_with(
    h: &HankelTriple,
    j: usize,
    w: &WeightPair,
    s: &Mat,
    settings: &SdpSettings,
) -> Result<LqrResult> {
    ensure_pe_at(h, j)?;
    check_weights(h, w)?;
    linalg::ensure_shape(s, h.n(), h.n(), "S")?;
    if linalg::rank(s, linalg::DEFAULT_RANK_TOL) < h.n() {
        return invalid("S must be nonsingular");
    }
    let n = h.n();
    let v = data_row_basis(h, j)?;
    let mut sdp = SdpProblem::new();
    let p = sdp.symmetric("P", n);
    let pe = sdp.expr(p);
    // Maximizing the trace already selects the stabilizing solution; a strict
    // margin would cut off tiny P* (e.g. stable plants with small Q).
    sdp.psd("P >= 0", pe.clone())?;
    let lp = lqr_operator(h, j, w, &pe).lmul(&v.transpose()).rmul(&v);
    sdp.psd("L(P) >= 0", lp.sym())?;
    sdp.maximize(pe.trace())?;
    let sol = sdp.solve(settings)?.require_optimal("LQR synthesis")?;
    let pstar = linalg::symmetrize(&sol.value(p));

    let gamma = solve_gamma(h, j, w, &pstar, &v, s)?;
    let gamma_residual = gamma_system_residual(h, j, w, &pstar, &gamma, s);
    if gamma_residual > GAMMA_TOL {
        return Err(Error::Numeric(format!(
            "residual of the Gamma system is {gamma_residual:.2e} (limit {GAMMA_TOL:.0e})"
        )));
    }
    let hxg = h.hx(j) * &gamma;
    let k = -(h.hu() * &gamma)
        * hxg
            .try_inverse()
            .ok_or_else(|| Error::Numeric("Hx Gamma is singular".into()))?;
    Ok(LqrResult {
        k,
        p: pstar,
        gamma,
        gamma_residual,
        grid_index: j,
    })
}

/// Least-squares solution of `[Hx; L] Γ = [S; 0]` restricted to the
/// numerical kernel of `L`. At `P*` the reduced `V'LV` has exactly `n`
/// eigenvalues at zero; taking their eigenvectors avoids a rank decision on
/// the full `N x N` matrix.
fn solve_gamma(h: &HankelTriple, j: usize, w: &WeightPair, p: &Mat, v: &Mat, s: &Mat) -> Result<Mat> {
    let n = h.n();
    let lr = linalg::symmetrize(&(v.transpose() * lqr_operator_value(h, j, w, p) * v));
    if lr.nrows() < n {
        return Err(Error::Rank("data row space is smaller than n".into()));
    }
    let eig = SymmetricEigen::new(lr);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let e = Mat::from_fn(eig.eigenvalues.len(), n, |r, c| eig.eigenvectors[(r, order[c])]);
    let z = v * e;
    let y = linalg::lstsq(&(h.hx(j) * &z), s)?;
    Ok(z * y)
}

fn gamma_system_residual(h: &HankelTriple, j: usize, w: &WeightPair, p: &Mat, g: &Mat, s: &Mat) -> f64 {
    let l = lqr_operator_value(h, j, w, p);
    let top = h.hx(j) * g - s;
    let bot = &l * g;
    let num = (top.norm_squared() + bot.norm_squared()).sqrt();
    let den = (h.hx(j).norm() + l.norm()) * g.norm() + s.norm();
    num / den.max(f64::MIN_POSITIVE)
}

/// Model-based check of a data-based LQR result.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LqrReport {
    /// `||Q + PA + A'P - P B R^{-1} B' P||_F`.
    pub are_residual: f64,
    /// `||K - R^{-1} B' P||_F`.
    pub gain_residual: f64,
    pub passed: bool,
}

pub fn verify_lqr(sys: &LtiSystem, k: &Mat, p: &Mat, w: &WeightPair, tol: f64) -> Result<LqrReport> {
    linalg::ensure_shape(p, sys.n(), sys.n(), "P")?;
    linalg::ensure_shape(k, sys.m(), sys.n(), "K")?;
    let rinv = w
        .r()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("R is singular".into()))?;
    let (a, b) = (sys.a(), sys.b());
    let are = w.q() + p * a + a.transpose() * p - p * b * &rinv * b.transpose() * p;
    let kopt = &rinv * b.transpose() * p;
    let are_residual = are.norm();
    let gain_residual = (k - kopt).norm();
    Ok(LqrReport {
        are_residual,
        gain_residual,
        passed: are_residual <= tol && gain_residual <= tol,
    })
}
