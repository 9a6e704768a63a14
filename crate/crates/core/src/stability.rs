//! Data-based stability analysis and stabilizing-gain synthesis.

use serde::Serialize;

use crate::convex::{Affine, MatVar, SdpProblem, SdpSettings};
use crate::datamat::{ensure_pe_at, HankelTriple};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Which procedure produced a gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LyapunovLmi,
    NoiseRobustLmi,
    Projection,
    Lqr,
    PolePlacementRobust,
    PolePlacementBaseline,
}

/// A feedback gain `u = -K x` with the certificates of the procedure that produced it.
#[derive(Debug, Clone)]
pub struct GainResult {
    pub k: Mat,
    pub p: Option<Mat>,
    pub l: Option<Mat>,
    pub beta: Option<f64>,
    pub gamma: Option<Mat>,
    /// Data-based estimate of `A - B K` at the analysis time.
    pub closed_loop_estimate: Mat,
    pub method: Method,
    /// Final objective value of the underlying optimization, if any.
    pub objective: Option<f64>,
    pub grid_index: usize,
}

fn check_gain(h: &HankelTriple, k: &Mat) -> Result<()> {
    linalg::ensure_shape(k, h.m(), h.n(), "gain K")?;
    linalg::ensure_finite(k, "gain K")
}

/// `Γ` with `(Hu + K Hx(j)) Γ = 0` and `Hx(j) Γ = I`.
pub fn gamma_for_gain(h: &HankelTriple, j: usize, k: &Mat) -> Result<Mat> {
    check_gain(h, k)?;
    ensure_pe_at(h, j)?;
    let hx = h.hx(j);
    let m = h.hu() + k * hx;
    let z = linalg::null_space_basis(&m, 1e-12)?;
    let hxz = hx * &z;
    let r = linalg::rank(&hxz, linalg::DEFAULT_RANK_TOL);
    if r < h.n() {
        return Err(Error::Rank(format!(
            "Hx restricted to null(Hu + K Hx) has rank {r} < n = {}",
            h.n()
        )));
    }
    let eye = Mat::identity(h.n(), h.n());
    let mut gamma = &z * linalg::lstsq(&hxz, &eye)?;
    // One refinement step; large gains leave Hx Z poorly conditioned.
    gamma += &z * linalg::lstsq(&hxz, &(&eye - hx * &gamma))?;
    let r1 = (&m * &gamma).norm() / (m.norm() * gamma.norm()).max(f64::MIN_POSITIVE);
    let r2 = (hx * &gamma - &eye).norm() / (hx.norm() * gamma.norm()).max(f64::MIN_POSITIVE);
    if r1 > 1e-8 || r2 > 1e-8 {
        return Err(Error::Numeric(format!(
            "Gamma residuals too large ({r1:.2e}, {r2:.2e})"
        )));
    }
    Ok(gamma)
}

/// `Hxd(j) Γ (Hx(j) Γ)^{-1}`, the data-based `A - B K`.
pub fn closed_loop_from_data(h: &HankelTriple, j: usize, k: &Mat) -> Result<Mat> {
    let gamma = gamma_for_gain(h, j, k)?;
    closed_loop_from_gamma(h, j, &gamma)
}

pub(crate) fn closed_loop_from_gamma(h: &HankelTriple, j: usize, gamma: &Mat) -> Result<Mat> {
    let x = h.hx(j) * gamma;
    let y = h.hxd(j) * gamma;
    // Solve Z X = Y through X^T Z^T = Y^T.
    let zt = x
        .transpose()
        .lu()
        .solve(&y.transpose())
        .ok_or_else(|| Error::Rank("Hx Gamma is singular".into()))?;
    Ok(zt.transpose())
}

/// Whether the data-based closed loop is Hurwitz with the given margin.
pub fn is_stabilizing(h: &HankelTriple, j: usize, k: &Mat, margin: f64) -> Result<bool> {
    linalg::is_hurwitz(&closed_loop_from_data(h, j, k)?, margin)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    h: &HankelTriple,
    j: usize,
    k: Mat,
    method: Method,
    p: Option<Mat>,
    l: Option<Mat>,
    beta: Option<f64>,
    objective: Option<f64>,
) -> Result<GainResult> {
    let gamma = gamma_for_gain(h, j, &k)?;
    let cl = closed_loop_from_gamma(h, j, &gamma)?;
    Ok(GainResult {
        k,
        p,
        l,
        beta,
        gamma: Some(gamma),
        closed_loop_estimate: cl,
        method,
        objective,
        grid_index: j,
    })
}

/// `K = -L P^{-1}`.
pub fn gain_from_lp(l: &Mat, p: &Mat) -> Result<Mat> {
    // K P = -L  <=>  P K^T = -L^T (P symmetric).
    let kt = p
        .clone()
        .lu()
        .solve(&(-l.transpose()))
        .ok_or_else(|| Error::Numeric("P is singular".into()))?;
    Ok(kt.transpose())
}

/// Lyapunov-type LMIs on `Γ`: `Hx Γ` symmetric positive definite and
/// `Hxd Γ + Γ^T Hxd^T` negative definite. The margin `t` of both is
/// maximized under the normalization `tr(Hx Γ) = n`.
pub fn stabilize_depersis(h: &HankelTriple, j: usize, settings: &SdpSettings) -> Result<GainResult> {
    ensure_pe_at(h, j)?;
    let n = h.n();
    let mut sdp = SdpProblem::new();
    let g = sdp.full("Gamma", h.segments(), n);
    let t = sdp.scalar("t");
    let ge = sdp.expr(g);
    let te = sdp.expr(t);
    let y = ge.lmul(h.hx(j));
    let yd = ge.lmul(h.hxd(j));
    let eye = Mat::identity(n, n);
    sdp.equal("Hx Gamma symmetric", &y - &y.transpose(), &Mat::zeros(n, n))?;
    sdp.equal("trace normalization", y.trace(), &Mat::from_element(1, 1, n as f64))?;
    sdp.psd("Hx Gamma > 0", &y.sym() - &te.times_matrix(&eye))?;
    sdp.psd(
        "Hxd Gamma + (.)^T < 0",
        &(-&(&yd + &yd.transpose())) - &te.times_matrix(&eye),
    )?;
    sdp.maximize(te)?;
    let sol = sdp.solve(settings)?.require_optimal("Lyapunov LMI synthesis")?;
    let tv = sol.value(t)[(0, 0)];
    if tv <= settings.strict_eps {
        return Err(Error::Infeasible(format!(
            "Lyapunov LMIs have no strictly feasible point (margin {tv:.3e})"
        )));
    }
    let gamma = sol.value(g);
    let p = linalg::symmetrize(&(h.hx(j) * &gamma));
    let l = h.hu() * &gamma;
    let k = gain_from_lp(&l, &p)?;
    finish(h, j, k, Method::LyapunovLmi, Some(p), Some(l), None, Some(tv))
}

/// Adds the noise-robust stabilization LMI in `(P, L, beta)` to `sdp`:
/// `T D D^T - [[W + beta I, P, L^T], [P, 0, 0], [L, 0, 0]] ⪰ 0` with
/// `D = [Hxd; -Hx; -Hu]`, plus `P ≻ 0` and `beta ≻ 0`.
pub(crate) fn add_noise_robust_lmi(
    sdp: &mut SdpProblem,
    h: &HankelTriple,
    j: usize,
    wbar: &Mat,
    p: MatVar,
    l: MatVar,
    beta: MatVar,
) -> Result<()> {
    let (n, m) = (h.n(), h.m());
    let d = linalg::vstack(&[h.hxd(j), &(-h.hx(j)), &(-h.hu())])?;
    let tdd = (&d * d.transpose()) * h.segment_length();
    let pe = sdp.expr(p);
    let le = sdp.expr(l);
    let be = sdp.expr(beta);
    let top_left = &be.times_matrix(&Mat::identity(n, n)) + wbar;
    let psi = Affine::blocks(&[
        vec![top_left, pe.clone(), le.transpose()],
        vec![pe.clone(), Affine::zeros(n, n), Affine::zeros(n, m)],
        vec![le, Affine::zeros(m, n), Affine::zeros(m, m)],
    ])?;
    sdp.psd("noise-robust LMI", &(-&psi) + &tdd)?;
    sdp.pd("P > 0", pe)?;
    sdp.pd("beta > 0", be)?;
    Ok(())
}

fn check_wbar(h: &HankelTriple, wbar: &Mat) -> Result<()> {
    linalg::ensure_shape(wbar, h.n(), h.n(), "Wbar")?;
    linalg::ensure_finite(wbar, "Wbar")?;
    if (wbar - wbar.transpose()).amax() > 1e-12 * wbar.amax().max(1.0) {
        return Err(Error::Validation("Wbar must be symmetric".into()));
    }
    if linalg::min_sym_eigenvalue(wbar) < -1e-12 * wbar.amax().max(1.0) {
        return Err(Error::Validation("Wbar must be positive semidefinite".into()));
    }
    Ok(())
}

/// Stabilizing gain robust to disturbances with `T Hw Hw^T ⪯ Wbar`.
pub fn stabilize_noise_robust(
    h: &HankelTriple,
    j: usize,
    wbar: &Mat,
    settings: &SdpSettings,
) -> Result<GainResult> {
    ensure_pe_at(h, j)?;
    check_wbar(h, wbar)?;
    let mut sdp = SdpProblem::new();
    let p = sdp.symmetric("P", h.n());
    let l = sdp.full("L", h.m(), h.n());
    let beta = sdp.scalar("beta");
    add_noise_robust_lmi(&mut sdp, h, j, wbar, p, l, beta)?;
    sdp.maximize(sdp.expr(beta))?;
    let sol = sdp.solve(settings)?.require_optimal("noise-robust synthesis")?;
    let (pv, lv) = (sol.value(p), sol.value(l));
    let bv = sol.value(beta)[(0, 0)];
    let k = gain_from_lp(&lv, &pv)?;
    finish(h, j, k, Method::NoiseRobustLmi, Some(pv), Some(lv), Some(bv), Some(bv))
}

/// Conservative `Wbar` for measurement noise bounded by `vbar` entrywise:
/// every entry of `Hw` is at most `vbar` (derivative plus propagated state
/// noise are folded into the same bound), so `T Hw Hw^T ⪯ T N n vbar^2 I`.
pub fn wbar_estimate(h: &HankelTriple, vbar: f64) -> Mat {
    let s = h.segment_length() * h.segments() as f64 * h.n() as f64 * vbar * vbar;
    Mat::identity(h.n(), h.n()) * s
}
