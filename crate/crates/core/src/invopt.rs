//! Inverse optimal control: weights `(Q, R)` under which a given stabilizing
//! gain is (close to) LQR-optimal, using input-state data and closed-loop
//! samples only.

use nalgebra::DVector;

use crate::convex::{SdpProblem, SdpSettings};
use crate::datamat::{compute_ha, ensure_pe_at, HankelTriple};
use crate::error::{dim_err, invalid, Error, Result};
use crate::linalg::{self, Mat};
use crate::lqr::{solve_lqr_data, WeightPair};
use crate::system::LtiSystem;

/// Closed-loop samples stacked column-wise: `xi_hat` (n x S), `xid_hat`
/// (n x S), `u_hat` (m x S), with the sample time and trajectory of each column.
#[derive(Debug, Clone)]
pub struct ReferenceBundle {
    xi_hat: Mat,
    xid_hat: Mat,
    u_hat: Mat,
    times: Vec<f64>,
    traj: Vec<usize>,
}

impl ReferenceBundle {
    pub fn new(xi_hat: Mat, xid_hat: Mat, u_hat: Mat, times: Vec<f64>, traj: Vec<usize>) -> Result<Self> {
        let (n, s) = xi_hat.shape();
        if n == 0 || s == 0 {
            return invalid("empty reference bundle");
        }
        linalg::ensure_shape(&xid_hat, n, s, "derivative samples")?;
        if u_hat.ncols() != s || u_hat.nrows() == 0 {
            return dim_err(format!("input samples are {:?}, expected m x {s}", u_hat.shape()));
        }
        if times.len() != s || traj.len() != s {
            return dim_err("sample metadata length differs from the number of columns");
        }
        for (m, what) in [(&xi_hat, "state samples"), (&xid_hat, "derivative samples"), (&u_hat, "input samples")] {
            linalg::ensure_finite(m, what)?;
        }
        Ok(ReferenceBundle {
            xi_hat,
            xid_hat,
            u_hat,
            times,
            traj,
        })
    }

    pub fn xi_hat(&self) -> &Mat {
        &self.xi_hat
    }

    pub fn xid_hat(&self) -> &Mat {
        &self.xid_hat
    }

    pub fn u_hat(&self) -> &Mat {
        &self.u_hat
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn traj_ids(&self) -> &[usize] {
        &self.traj
    }

    pub fn n(&self) -> usize {
        self.xi_hat.nrows()
    }

    pub fn m(&self) -> usize {
        self.u_hat.nrows()
    }

    pub fn samples(&self) -> usize {
        self.xi_hat.ncols()
    }

    /// Whether `xi_hat` has full row rank.
    pub fn assumption_holds(&self) -> bool {
        linalg::rank(&self.xi_hat, linalg::DEFAULT_RANK_TOL) == self.n()
    }
}

/// Samples `x' = (A - BK) x` from each initial state every `spacing` seconds,
/// adding sample times until the stacked states have full row rank.
///
/// Columns are ordered by sample time, then by trajectory.
pub fn collect_closedloop(
    sys: &LtiSystem,
    k: &Mat,
    x0s: &[DVector<f64>],
    spacing: f64,
    max_samples: usize,
) -> Result<ReferenceBundle> {
    if x0s.is_empty() {
        return invalid("at least one initial state is required");
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return invalid("sample spacing must be positive");
    }
    let n = sys.n();
    if let Some(x) = x0s.iter().find(|x| x.len() != n) {
        return dim_err(format!("initial state has length {}, expected {n}", x.len()));
    }
    let f = sys.closed_loop(k)?;
    let step = linalg::expm(&(&f * spacing))?;
    let x0 = Mat::from_fn(n, x0s.len(), |r, c| x0s[c][r]);
    let mut cur = x0;
    let mut blocks = Vec::new();
    let mut times = Vec::new();
    let mut traj = Vec::new();
    let mut rank = 0;
    for j in 0..max_samples {
        blocks.push(cur.clone());
        times.extend(std::iter::repeat_n(j as f64 * spacing, x0s.len()));
        traj.extend(0..x0s.len());
        let xi = linalg::hstack(&blocks.iter().collect::<Vec<_>>())?;
        rank = linalg::rank(&xi, linalg::DEFAULT_RANK_TOL);
        if rank == n {
            let xid = &f * &xi;
            let u = -(k * &xi);
            return ReferenceBundle::new(xi, xid, u, times, traj);
        }
        cur = &step * cur;
    }
    Err(Error::Rank(format!(
        "stacked closed-loop samples reach rank {rank} < n = {n} after {max_samples} sample times; \
         the full-row-rank assumption on the samples cannot be met from these initial states"
    )))
}

/// Lower bound on the solver tolerances used for the inverse problem. When
/// the gain is not optimal for any weights the interior-point iterates reach
/// relative gaps of a few 1e-9 and then drift, so tighter requests cannot be
/// certified.
pub const INVOPT_TOL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
pub struct InverseOcSettings {
    /// Upper bound on `tr(R) / m`; keeps the otherwise free scale bounded.
    pub r_trace_bound: f64,
    /// Upper bound on `tr(P1) / n`.
    pub p1_trace_bound: f64,
}

impl Default for InverseOcSettings {
    fn default() -> Self {
        InverseOcSettings {
            r_trace_bound: 1e3,
            p1_trace_bound: 1e3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InverseOcResult {
    pub q: Mat,
    pub r: Mat,
    pub p: Mat,
    pub p1: Mat,
    /// Minimized objective `||(Hu')^+ (Hu' R U + (Hxd - H_A)' P Xi) Xi^+||_F`,
    /// which equals `||R K - B' P||_F` on exact data.
    pub residual: f64,
    /// The same expression before whitening.
    pub raw_residual: f64,
    /// Residual of the data-based Lyapunov equality.
    pub lyapunov_residual: f64,
    pub grid_index: usize,
}

impl InverseOcResult {
    pub fn weights(&self) -> Result<WeightPair> {
        WeightPair::new(self.q.clone(), self.r.clone())
    }
}

/// Weights `(Q, R)` for which the gain behind `bundle` is closest to optimal.
///
/// The scale is fixed by `R ⪰ I`. The detectability LMI is imposed on the
/// row space of `Hx(j)`, where it can be strict.
pub fn solve_inverse_oc(
    h: &HankelTriple,
    j: usize,
    bundle: &ReferenceBundle,
    st: &InverseOcSettings,
    settings: &SdpSettings,
) -> Result<InverseOcResult> {
    ensure_pe_at(h, j)?;
    let (n, m) = (h.n(), h.m());
    if bundle.n() != n || bundle.m() != m {
        return dim_err(format!(
            "bundle is for n = {}, m = {}; data has n = {n}, m = {m}",
            bundle.n(),
            bundle.m()
        ));
    }
    if !bundle.assumption_holds() {
        return Err(Error::Rank(format!(
            "closed-loop state samples have rank {} < n = {n}; the inversion needs them to have full row rank",
            linalg::rank(bundle.xi_hat(), linalg::DEFAULT_RANK_TOL)
        )));
    }
    let ha = compute_ha(h, j)?;
    let (xi, xid, uh) = (bundle.xi_hat(), bundle.xid_hat(), bundle.u_hat());
    let xi_pinv = linalg::pinv(xi)?;
    let hu_t_pinv = linalg::pinv(&h.hu().transpose())?;
    let hx = h.hx(j);
    let dh = (h.hxd(j) - &ha).transpose();

    let mut sdp = SdpProblem::new();
    let q = sdp.symmetric("Q", n);
    let r = sdp.symmetric("R", m);
    let p = sdp.symmetric("P", n);
    let p1 = sdp.symmetric("P1", n);
    let (qe, re, pe, p1e) = (sdp.expr(q), sdp.expr(r), sdp.expr(p), sdp.expr(p1));

    sdp.psd("Q >= 0", qe.clone())?;
    sdp.psd("P >= 0", pe.clone())?;
    sdp.psd("R >= I", &re - &Mat::identity(m, m))?;
    sdp.pd("P1 > 0", p1e.clone())?;
    sdp.psd(
        "tr(R) bound",
        &(-&re.trace()) + &Mat::from_element(1, 1, st.r_trace_bound * m as f64),
    )?;
    sdp.psd(
        "tr(P1) bound",
        &(-&p1e.trace()) + &Mat::from_element(1, 1, st.p1_trace_bound * n as f64),
    )?;

    // Lyapunov equality on the joint row space of the samples.
    let vs = linalg::row_space_basis(&linalg::vstack(&[xi, xid, uh])?, 1e-10);
    let (xv, xdv, uv) = (xi * &vs, xid * &vs, uh * &vs);
    let cross = pe.lmul(&xv.transpose()).rmul(&xdv);
    let lyap = &(&qe.lmul(&xv.transpose()).rmul(&xv) + &re.lmul(&uv.transpose()).rmul(&uv))
        + &(&cross + &cross.transpose());
    let k = vs.ncols();
    sdp.equal("Lyapunov", lyap, &Mat::zeros(k, k))?;

    // Detectability on the row space of Hx(j).
    let vx = linalg::row_space_basis(hx, 1e-10);
    let (hxv, hav) = (hx * &vx, &ha * &vx);
    let det_cross = p1e.lmul(&hxv.transpose()).rmul(&hav);
    let det = &qe.lmul(&hxv.transpose()).rmul(&hxv) - &(&det_cross + &det_cross.transpose());
    sdp.pd("detectability", det.sym())?;

    let whitened = &re.rmul(&(uh * &xi_pinv)) + &pe.lmul(&(&hu_t_pinv * &dh));
    let t = sdp.norm_bound("objective", &whitened)?;
    sdp.minimize(t.clone())?;
    let relaxed = SdpSettings {
        feas_tol: settings.feas_tol.max(INVOPT_TOL_FLOOR),
        gap_tol: settings.gap_tol.max(INVOPT_TOL_FLOOR),
        ..*settings
    };
    let sol = sdp.solve(&relaxed)?.require_optimal("inverse optimal control")?;

    let (qv, rv, pv, p1v) = (
        linalg::symmetrize(&sol.value(q)),
        linalg::symmetrize(&sol.value(r)),
        linalg::symmetrize(&sol.value(p)),
        linalg::symmetrize(&sol.value(p1)),
    );
    let raw = h.hu().transpose() * &rv * uh + &dh * &pv * xi;
    let lyap_val = xi.transpose() * &qv * xi + uh.transpose() * &rv * uh + xi.transpose() * &pv * xid
        + xid.transpose() * &pv * xi;
    Ok(InverseOcResult {
        residual: sol.eval(&whitened).norm(),
        raw_residual: raw.norm(),
        lyapunov_residual: lyap_val.norm() / (xi.norm() * xi.norm()).max(f64::MIN_POSITIVE),
        q: qv,
        r: rv,
        p: pv,
        p1: p1v,
        grid_index: j,
    })
}

#[derive(Debug, Clone)]
pub struct RoundTrip {
    pub k: Mat,
    /// `||K_rt - K||_F`.
    pub frobenius: f64,
    /// Largest entrywise deviation.
    pub max_entry: f64,
}

/// LQR gain for the recovered weights, compared with `k`.
pub fn round_trip(
    h: &HankelTriple,
    j: usize,
    res: &InverseOcResult,
    k: &Mat,
    settings: &SdpSettings,
) -> Result<RoundTrip> {
    let krt = solve_lqr_data(h, j, &res.weights()?, settings)?.k;
    linalg::ensure_shape(k, krt.nrows(), krt.ncols(), "reference gain")?;
    let d = &krt - k;
    Ok(RoundTrip {
        frobenius: d.norm(),
        max_entry: d.amax(),
        k: krt,
    })
}
