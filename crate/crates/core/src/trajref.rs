//! Feedback design from desired closed-loop trajectories.
//!
//! Stage one fits a gain `K̄` whose closed loop best reproduces the reference
//! samples (an equality-constrained least-squares problem in `K̄` and one
//! `Γ` per sample). Stage two moves `K̄` to the nearest gain certified
//! stabilizing by the noise-robust LMI.

use crate::convex::{LsqProblem, SdpProblem, SdpSettings};
use crate::datamat::{ensure_pe_at, HankelTriple};
use crate::error::{dim_err, invalid, Error, Result};
use crate::linalg::{self, Mat};
use crate::stability::{self, add_noise_robust_lmi, GainResult, Method};

/// Reference samples `Ξ(t_i)`, `Ξ̇(t_i)`, one column per trajectory.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    times: Vec<f64>,
    xi: Vec<Mat>,
    xid: Vec<Mat>,
    derivative_estimated: bool,
}

impl ReferenceSet {
    /// `xid = None` estimates the derivatives by finite differences.
    pub fn new(times: Vec<f64>, xi: Vec<Mat>, xid: Option<Vec<Mat>>) -> Result<Self> {
        if times.is_empty() || times.len() != xi.len() {
            return dim_err(format!("{} times but {} state samples", times.len(), xi.len()));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("reference times must be finite and strictly increasing");
        }
        let (n, mm) = xi[0].shape();
        if n == 0 || mm == 0 {
            return invalid("empty reference samples");
        }
        for x in &xi {
            linalg::ensure_shape(x, n, mm, "reference sample")?;
            linalg::ensure_finite(x, "reference sample")?;
        }
        let derivative_estimated = xid.is_none();
        let xid = match xid {
            Some(d) => {
                if d.len() != xi.len() {
                    return dim_err("derivative samples do not match state samples");
                }
                for x in &d {
                    linalg::ensure_shape(x, n, mm, "reference derivative")?;
                    linalg::ensure_finite(x, "reference derivative")?;
                }
                d
            }
            None => finite_differences(&times, &xi)?,
        };
        Ok(ReferenceSet {
            times,
            xi,
            xid,
            derivative_estimated,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn xi(&self, i: usize) -> &Mat {
        &self.xi[i]
    }

    pub fn xid(&self, i: usize) -> &Mat {
        &self.xid[i]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n(&self) -> usize {
        self.xi[0].nrows()
    }

    /// Number of reference trajectories.
    pub fn trajectories(&self) -> usize {
        self.xi[0].ncols()
    }

    pub fn derivative_estimated(&self) -> bool {
        self.derivative_estimated
    }
}

/// Second-order differences on a possibly nonuniform grid, one-sided at the ends.
fn finite_differences(t: &[f64], x: &[Mat]) -> Result<Vec<Mat>> {
    let k = t.len();
    if k < 3 {
        return invalid("at least three samples are needed to estimate derivatives");
    }
    let three_point = |i0: usize, at: usize| -> Mat {
        // Derivative at t[at] of the quadratic through samples i0..i0+3.
        let ts = [t[i0], t[i0 + 1], t[i0 + 2]];
        let s = t[at];
        let mut d = Mat::zeros(x[0].nrows(), x[0].ncols());
        for a in 0..3 {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            let w = ((s - ts[b]) + (s - ts[c])) / ((ts[a] - ts[b]) * (ts[a] - ts[c]));
            d += &x[i0 + a] * w;
        }
        d
    };
    Ok((0..k)
        .map(|i| match i {
            0 => three_point(0, 0),
            _ if i == k - 1 => three_point(k - 3, k - 1),
            _ => three_point(i - 1, i),
        })
        .collect())
}

/// Stage-one output.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub kbar: Mat,
    /// Sum of squared residuals; zero exactly when some gain reproduces the references.
    pub cost: f64,
    pub gammas: Vec<Mat>,
    pub grid_indices: Vec<usize>,
}

/// Least-squares fit of `K̄` and `Γ(t_i)` to the reference samples.
pub fn synthesize_candidate(h: &HankelTriple, refs: &ReferenceSet) -> Result<Candidate> {
    if refs.n() != h.n() {
        return dim_err(format!("references have n = {}, data n = {}", refs.n(), h.n()));
    }
    let idx = refs
        .times()
        .iter()
        .map(|&t| h.index_of_time(t))
        .collect::<Result<Vec<_>>>()?;
    for &j in &idx {
        ensure_pe_at(h, j)?;
    }
    let (n, m, big_n, mm) = (h.n(), h.m(), h.segments(), refs.trajectories());
    let mut lsq = LsqProblem::new();
    let kbar = lsq.full("Kbar", m, n);
    let ke = lsq.expr(kbar);
    let gvars: Vec<_> = (0..refs.len())
        .map(|i| lsq.full(&format!("Gamma{i}"), big_n, mm))
        .collect();
    for (i, (&j, &gv)) in idx.iter().zip(&gvars).enumerate() {
        let g = lsq.expr(gv);
        let (xi, xid) = (refs.xi(i), refs.xid(i));
        let hu_g = g.lmul(h.hu());
        let k_xi = ke.rmul(xi);
        lsq.residual(&g.lmul(h.hxd(j)) - xid)?;
        if i == 0 {
            lsq.equal(g.lmul(h.hx(j)), xi)?;
            lsq.equal(&hu_g + &k_xi, &Mat::zeros(m, mm))?;
        } else {
            lsq.residual(&g.lmul(h.hx(j)) - xi)?;
            lsq.residual(&hu_g + &k_xi)?;
        }
    }
    let sol = lsq.solve().map_err(|e| match e {
        Error::Infeasible(msg) => Error::Infeasible(format!("hard constraints at the first sample: {msg}")),
        other => other,
    })?;
    Ok(Candidate {
        kbar: sol.value(kbar),
        cost: sol.cost,
        gammas: gvars.iter().map(|&g| sol.value(g)).collect(),
        grid_indices: idx,
    })
}

/// Strictness margin of the noise-free projection LMIs, relative to the gauge
/// `tr(P) = n`. The mismatch is smallest on the boundary of the strict
/// inequalities, so without a real margin the optimizer returns a nearly
/// singular `P`, a huge `K` and a closed loop with abscissa near zero. The
/// margin bounds `cond(P)` by `n / margin`; a stabilizing `kbar` is still a
/// fixed point unless its own Lyapunov certificate is that ill-conditioned.
pub const PROJECTION_MARGIN: f64 = 1e-3;

/// Nearest certified-stabilizing gain to `kbar`, measured through the
/// data-based closed-loop mismatch `||Hxd(G1 - G2)||_F`.
///
/// The mismatch scales with `P`, so `P` needs a gauge. With `wbar ≻ 0` the
/// noise-robust LMI in `(P, L, beta)` is not homogeneous and bounds `P`
/// itself. With `wbar = 0` that LMI would make feasibility of `tr(P) = n`
/// depend on the magnitude of the data; the Lyapunov pair `Hx G1 = P ≻ 0`,
/// `Hxd G1 + (.)^T ≺ 0` is used instead, which is homogeneous and certifies
/// the same closed loop on exact data.
pub fn project_stabilizing(
    h: &HankelTriple,
    j: usize,
    kbar: &Mat,
    wbar: &Mat,
    settings: &SdpSettings,
) -> Result<GainResult> {
    ensure_pe_at(h, j)?;
    linalg::ensure_shape(kbar, h.m(), h.n(), "Kbar")?;
    linalg::ensure_finite(kbar, "Kbar")?;
    linalg::ensure_shape(wbar, h.n(), h.n(), "Wbar")?;
    let (n, m, big_n) = (h.n(), h.m(), h.segments());
    let noise_free = wbar.amax() == 0.0;
    // G1 and G2 only enter through data products, so the data columns can be
    // equilibrated with the scaling absorbed into G.
    let d = linalg::column_scaling(&linalg::vstack(&[h.hx(j), h.hu(), h.hxd(j)])?);
    let (hx, hu, hxd) = (
        linalg::scale_columns(h.hx(j), &d),
        linalg::scale_columns(h.hu(), &d),
        linalg::scale_columns(h.hxd(j), &d),
    );
    let mut sdp = SdpProblem::new();
    let p = sdp.symmetric("P", n);
    let l = sdp.full("L", m, n);
    let g1 = sdp.full("G1", big_n, n);
    let g2 = sdp.full("G2", big_n, n);
    let (pe, le) = (sdp.expr(p), sdp.expr(l));
    let (g1e, g2e) = (sdp.expr(g1), sdp.expr(g2));
    let beta = if noise_free {
        let yd = g1e.lmul(&hxd);
        let margin = Mat::identity(n, n) * PROJECTION_MARGIN;
        sdp.psd("P > 0", &pe - &margin)?;
        sdp.psd("Hxd G1 + (.)^T < 0", &(-&(&yd + &yd.transpose())) - &margin)?;
        sdp.equal("scale", pe.trace(), &Mat::from_element(1, 1, n as f64))?;
        None
    } else {
        let beta = sdp.scalar("beta");
        add_noise_robust_lmi(&mut sdp, h, j, wbar, p, l, beta)?;
        Some(beta)
    };
    let zn = Mat::zeros(n, n);
    let zm = Mat::zeros(m, n);
    sdp.equal("Hx G1 = P", &g1e.lmul(&hx) - &pe, &zn)?;
    sdp.equal("Hu G1 = L", &g1e.lmul(&hu) - &le, &zm)?;
    sdp.equal("Hx G2 = P", &g2e.lmul(&hx) - &pe, &zn)?;
    sdp.equal("Hu G2 = -Kbar P", &g2e.lmul(&hu) + &pe.lmul(kbar), &zm)?;
    let t = sdp.norm_bound("mismatch", &(&g1e - &g2e).lmul(&hxd))?;
    sdp.minimize(t.clone())?;
    let sol = sdp.solve(settings)?.require_optimal("stabilizing projection")?;
    let (pv, lv) = (sol.value(p), sol.value(l));
    let k = stability::gain_from_lp(&lv, &pv)?;
    let gamma = stability::gamma_for_gain(h, j, &k)?;
    let cl = stability::closed_loop_from_gamma(h, j, &gamma)?;
    Ok(GainResult {
        k,
        beta: beta.map(|b| sol.value(b)[(0, 0)]),
        p: Some(pv),
        l: Some(lv),
        gamma: Some(gamma),
        closed_loop_estimate: cl,
        method: Method::Projection,
        objective: Some(sol.eval(&t)[(0, 0)]),
        grid_index: j,
    })
}

#[derive(Debug, Clone)]
pub struct TrajrefOutcome {
    pub candidate: Candidate,
    pub gain: GainResult,
}

pub fn trajref_pipeline(
    h: &HankelTriple,
    j: usize,
    refs: &ReferenceSet,
    wbar: &Mat,
    settings: &SdpSettings,
) -> Result<TrajrefOutcome> {
    let candidate = synthesize_candidate(h, refs)?;
    let gain = project_stabilizing(h, j, &candidate.kbar, wbar, settings)?;
    Ok(TrajrefOutcome { candidate, gain })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datamat::tests::experiment;
    use crate::stability::{is_stabilizing, stabilize_depersis};
    use crate::system::{builtin_aircraft, LtiSystem};
    use approx::assert_relative_eq;

    /// Samples of `x' = F x` from the columns of `x0` at `times`.
    pub(crate) fn references(f: &Mat, x0: &Mat, times: &[f64], with_derivative: bool) -> ReferenceSet {
        let xi: Vec<Mat> = times
            .iter()
            .map(|&t| linalg::expm(&(f * (t - times[0]))).unwrap() * x0)
            .collect();
        let xid = with_derivative.then(|| xi.iter().map(|x| f * x).collect());
        ReferenceSet::new(times.to_vec(), xi, xid).unwrap()
    }

    fn scalar(a: f64, b: f64) -> LtiSystem {
        LtiSystem::new(Mat::from_element(1, 1, a), Mat::from_element(1, 1, b), "scalar").unwrap()
    }

    #[test]
    fn finite_differences_are_exact_on_quadratics() {
        let t = vec![0.0, 0.1, 0.25, 0.4];
        let xi: Vec<Mat> = t.iter().map(|s| Mat::from_element(1, 1, 3.0 * s * s - s + 2.0)).collect();
        let r = ReferenceSet::new(t.clone(), xi, None).unwrap();
        assert!(r.derivative_estimated());
        for (i, s) in t.iter().enumerate() {
            assert_relative_eq!(r.xid(i)[(0, 0)], 6.0 * s - 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn reference_validation() {
        let x = Mat::zeros(2, 1);
        assert!(ReferenceSet::new(vec![0.0, 0.0], vec![x.clone(), x.clone()], None).is_err());
        assert!(ReferenceSet::new(vec![0.0], vec![x.clone(), x.clone()], None).is_err());
        assert!(ReferenceSet::new(vec![0.0, 1.0], vec![x.clone(), Mat::zeros(3, 1)], None).is_err());
    }

    #[test]
    fn feasible_references_recover_the_generating_gain() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 6, 21);
        let kd = stabilize_depersis(&h, 2, &SdpSettings::default()).unwrap().k;
        let f = s.closed_loop(&kd).unwrap();
        let x0 = Mat::from_fn(4, 4, |i, j| ((i * 4 + j) as f64 * 0.7).cos());
        let refs = references(&f, &x0, &h.grid()[..5], true);
        let c = synthesize_candidate(&h, &refs).unwrap();
        assert!(c.cost <= 1e-10, "cost {}", c.cost);
        assert!((&c.kbar - &kd).amax() <= 1e-6 * kd.amax().max(1.0));
    }

    #[test]
    fn zero_references_give_zero_gain() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 6, 22);
        let z = Mat::zeros(4, 2);
        let refs = ReferenceSet::new(h.grid()[..3].to_vec(), vec![z.clone(); 3], Some(vec![z.clone(); 3])).unwrap();
        let c = synthesize_candidate(&h, &refs).unwrap();
        assert!(c.cost <= 1e-20);
        assert!(c.kbar.amax() <= 1e-12);
    }

    #[test]
    fn infeasible_references_have_positive_cost_and_track() {
        #[rustfmt::skip]
        let abar = Mat::from_row_slice(4, 4, &[
            -0.5254, 0.0399, -1.4516, 0.1061,
            -1.8232, -2.4526, 1.8725, -0.6407,
            3.1222, -2.4746, -3.3309, -1.3357,
            0.0046, 1.3289, 0.0157, 0.0490,
        ]);
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 6, 23);
        let x0 = Mat::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 1.0]);
        let refs = references(&abar, &x0, h.grid(), true);
        let out = trajref_pipeline(&h, 2, &refs, &Mat::zeros(4, 4), &SdpSettings::default()).unwrap();
        assert!(out.candidate.cost > 1e-6);
        let k = &out.gain.k;
        let cl = s.closed_loop(k).unwrap();
        assert!(linalg::is_hurwitz(&cl, 0.0).unwrap());
        // Bounded tracking error from the reference initial state.
        let mut worst: f64 = 0.0;
        for i in 0..=20 {
            let t = 0.25 * i as f64;
            let e = linalg::expm(&(&cl * t)).unwrap() * &x0 - linalg::expm(&(&abar * t)).unwrap() * &x0;
            worst = worst.max(e.norm());
        }
        assert!(worst < 2.0 * x0.norm(), "tracking error {worst}");
    }

    #[test]
    fn projection_keeps_a_stabilizing_gain() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 6, 24);
        #[rustfmt::skip]
        let kbar = Mat::from_row_slice(2, 4, &[
            6.6951, 0.4425, 1.3996, 0.6780,
            -61.9583, -4.8843, -4.5553, -2.6773,
        ]);
        let r = project_stabilizing(&h, 2, &kbar, &Mat::zeros(4, 4), &SdpSettings::default()).unwrap();
        assert!((&r.k - &kbar).amax() <= 1e-6);
    }

    #[test]
    fn projection_stabilizes_open_loop() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 6, 25);
        let r = project_stabilizing(&h, 2, &Mat::zeros(2, 4), &Mat::zeros(4, 4), &SdpSettings::default())
            .unwrap();
        assert!(is_stabilizing(&h, 2, &r.k, 0.0).unwrap());
        assert!(linalg::is_hurwitz(&s.closed_loop(&r.k).unwrap(), 0.0).unwrap());
    }

    #[test]
    fn projection_scalar_destabilizing() {
        let h = experiment(&scalar(1.0, 1.0), 3, 0.5, 3, 26);
        let r = project_stabilizing(&h, 1, &Mat::from_element(1, 1, 0.5), &Mat::zeros(1, 1), &SdpSettings::default())
            .unwrap();
        assert!(r.k[(0, 0)] > 1.0, "k = {}", r.k[(0, 0)]);
    }
}
