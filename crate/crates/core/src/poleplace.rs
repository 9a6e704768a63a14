//! Exact pole placement from data, with a condition-number-minimizing choice
//! of the free parameters.
//!
//! For each target `λ`, data vectors `[Hx; Hu] n̄` with `(Hxd - λ Hx) n̄ = 0`
//! span the admissible closed-loop eigenvector/input pairs `(v, w)`. Stacking
//! one such pair per eigenvalue gives `V`, `W`, and `K = -W V^{-1}` places the
//! spectrum of `A - B K` under `u = -K x`.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::{minimize_smooth, SmoothSettings};
use crate::datamat::{ensure_pe_at, HankelTriple};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, CMat, Mat};
use crate::stability::{GainResult, Method};
use crate::system::LtiSystem;

/// Imaginary parts at or below this are treated as real.
const REAL_TOL: f64 = 1e-12;

/// One distinct target eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoleEntry {
    pub re: f64,
    pub im: f64,
    pub multiplicity: usize,
}

impl PoleEntry {
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

/// A self-conjugate target spectrum. Complex pairs are stored first, each
/// as (upper, lower) half-plane entries, followed by the real entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PoleSpec {
    entries: Vec<PoleEntry>,
}

impl PoleSpec {
    pub fn new(entries: Vec<PoleEntry>) -> Result<Self> {
        if entries.is_empty() {
            return invalid("pole specification is empty");
        }
        for e in &entries {
            if !e.re.is_finite() || !e.im.is_finite() {
                return invalid("pole values must be finite");
            }
            if e.multiplicity == 0 {
                return invalid("pole multiplicities must be positive");
            }
        }
        for (i, a) in entries.iter().enumerate() {
            if entries[i + 1..].iter().any(|b| (a.value() - b.value()).norm() <= REAL_TOL) {
                return invalid(format!("pole {} + {}i listed twice; use its multiplicity", a.re, a.im));
            }
        }
        let mut pairs = Vec::new();
        let mut reals = Vec::new();
        for e in &entries {
            if e.im.abs() <= REAL_TOL {
                reals.push(PoleEntry { im: 0.0, ..*e });
            } else if e.im > 0.0 {
                let partner = entries
                    .iter()
                    .find(|b| (b.value() - e.value().conj()).norm() <= REAL_TOL)
                    .ok_or_else(|| {
                        Error::Validation(format!("pole {} + {}i has no conjugate partner", e.re, e.im))
                    })?;
                if partner.multiplicity != e.multiplicity {
                    return invalid(format!(
                        "conjugate poles {} ± {}i have different multiplicities",
                        e.re, e.im
                    ));
                }
                pairs.push(*e);
                pairs.push(PoleEntry { im: -e.im, ..*e });
            } else if !entries.iter().any(|b| (b.value() - e.value().conj()).norm() <= REAL_TOL) {
                return invalid(format!("pole {} {}i has no conjugate partner", e.re, e.im));
            }
        }
        pairs.extend(reals);
        Ok(PoleSpec { entries: pairs })
    }

    /// From a list of eigenvalues with repeats.
    pub fn from_values(values: &[Complex64]) -> Result<Self> {
        let mut entries: Vec<PoleEntry> = Vec::new();
        for v in values {
            match entries.iter_mut().find(|e| (e.value() - v).norm() <= REAL_TOL) {
                Some(e) => e.multiplicity += 1,
                None => entries.push(PoleEntry {
                    re: v.re,
                    im: v.im,
                    multiplicity: 1,
                }),
            }
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[PoleEntry] {
        &self.entries
    }

    /// Sum of multiplicities.
    pub fn order(&self) -> usize {
        self.entries.iter().map(|e| e.multiplicity).sum()
    }

    /// Every eigenvalue repeated by its multiplicity.
    pub fn values(&self) -> Vec<Complex64> {
        self.entries
            .iter()
            .flat_map(|e| std::iter::repeat_n(e.value(), e.multiplicity))
            .collect()
    }

    pub fn validate_for(&self, n: usize, m: usize) -> Result<()> {
        if self.order() != n {
            return invalid(format!("pole multiplicities sum to {}, system order is {n}", self.order()));
        }
        if let Some(e) = self.entries.iter().find(|e| e.multiplicity > m) {
            return invalid(format!(
                "multiplicity {} of pole {} + {}i exceeds the input count {m}",
                e.multiplicity, e.re, e.im
            ));
        }
        Ok(())
    }
}

/// Per-eigenvalue bases of admissible `(v, w)` pairs, state rows first.
#[derive(Debug, Clone)]
pub struct NullFamily {
    n: usize,
    m: usize,
    spec: PoleSpec,
    /// Indexed like `spec.entries()`; for a conjugate pair the second basis is
    /// the conjugate of the first.
    bases: Vec<CMat>,
}

impl NullFamily {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn spec(&self) -> &PoleSpec {
        &self.spec
    }

    pub fn basis(&self, i: usize) -> &CMat {
        &self.bases[i]
    }

    /// Blocks carrying free parameters: one per pair and one per real pole.
    fn free_blocks(&self) -> impl Iterator<Item = (usize, bool)> + '_ {
        let mut i = 0;
        std::iter::from_fn(move || {
            let e = self.spec.entries.get(i)?;
            let complex = e.im != 0.0;
            let out = (i, complex);
            i += if complex { 2 } else { 1 };
            Some(out)
        })
    }

    /// Number of real parameters in a structured `G`.
    pub fn param_len(&self) -> usize {
        self.free_blocks()
            .map(|(i, c)| {
                let k = self.bases[i].ncols() * self.spec.entries[i].multiplicity;
                if c { 2 * k } else { k }
            })
            .sum()
    }

    /// `[Re(M); ...]` split into `V` (state rows) and `W` (input rows), with
    /// each complex pair contributing its real and imaginary parts.
    pub fn vw(&self, g: &DVector<f64>) -> Result<(Mat, Mat)> {
        if g.len() != self.param_len() {
            return invalid(format!("parameter vector has length {}, expected {}", g.len(), self.param_len()));
        }
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(self.n);
        let mut off = 0;
        for (i, complex) in self.free_blocks().collect::<Vec<_>>() {
            let nb = &self.bases[i];
            let (s, eta) = (nb.ncols(), self.spec.entries[i].multiplicity);
            let gi = if complex {
                let k = s * eta;
                let gi = CMat::from_fn(s, eta, |r, c| {
                    Complex64::new(g[off + r + c * s], g[off + k + r + c * s])
                });
                off += 2 * k;
                gi
            } else {
                let gi = CMat::from_fn(s, eta, |r, c| Complex64::new(g[off + r + c * s], 0.0));
                off += s * eta;
                gi
            };
            let mi = nb * gi;
            for c in 0..eta {
                let col = mi.column(c);
                cols.push(col.map(|z| z.re));
                if complex {
                    cols.push(col.map(|z| z.im));
                }
            }
        }
        let full = Mat::from_columns(&cols);
        Ok((full.rows(0, self.n).into_owned(), full.rows(self.n, self.m).into_owned()))
    }

    /// Real block-diagonal matrix `Λr` with `(A - BK) V = V Λr` on exact data.
    pub fn real_spectrum_matrix(&self) -> Mat {
        let mut l = Mat::zeros(self.n, self.n);
        let mut c = 0;
        for (i, complex) in self.free_blocks().collect::<Vec<_>>() {
            let e = self.spec.entries[i];
            for _ in 0..e.multiplicity {
                if complex {
                    // v = a + ib with A v = λ v gives A [a b] = [a b] [[re, im], [-im, re]].
                    l[(c, c)] = e.re;
                    l[(c, c + 1)] = e.im;
                    l[(c + 1, c)] = -e.im;
                    l[(c + 1, c + 1)] = e.re;
                    c += 2;
                } else {
                    l[(c, c)] = e.re;
                    c += 1;
                }
            }
        }
        l
    }
}

/// Null-space bases for every target pole at grid index `j`.
pub fn build_null_family(h: &HankelTriple, j: usize, spec: &PoleSpec) -> Result<NullFamily> {
    ensure_pe_at(h, j)?;
    let (n, m) = (h.n(), h.m());
    spec.validate_for(n, m)?;
    // Column scaling maps null vectors one-to-one and keeps growing segments
    // from swamping the rank decisions.
    let d = linalg::column_scaling(&linalg::vstack(&[h.hx(j), h.hu()])?);
    let (hx, hxd) = (linalg::scale_columns(h.hx(j), &d), linalg::scale_columns(h.hxd(j), &d));
    let stack = linalg::vstack(&[&hx, &linalg::scale_columns(h.hu(), &d)])?;
    let cstack = stack.map(|x| Complex64::new(x, 0.0));
    let mut bases: Vec<CMat> = Vec::with_capacity(spec.entries.len());
    for (i, e) in spec.entries.iter().enumerate() {
        if e.im < 0.0 {
            let prev: &CMat = &bases[i - 1];
            bases.push(prev.map(|z| z.conj()));
            continue;
        }
        let lam = e.value();
        let s = (&hxd - &hx * lam.re).map(|x| Complex64::new(x, 0.0)) - hx.map(|x| Complex64::new(0.0, x * lam.im));
        // [A - λI, B] has full row rank for controllable pairs, so S has rank n.
        let nbar = linalg::null_space_basis_complex_rank(&s, n)?;
        if nbar.ncols() == 0 {
            return Err(Error::Rank(format!("no data null space for pole {} + {}i", e.re, e.im)));
        }
        let proj = &cstack * nbar;
        // Keep the m dominant directions: on exact data the projection has rank m.
        let svd = linalg::svd(&proj, true, false);
        let u = svd.u.ok_or_else(|| Error::Numeric("complex SVD failed".into()))?;
        let sv = &svd.singular_values;
        let keep = m.min(sv.len());
        if keep < e.multiplicity || sv[keep - 1] <= 1e-10 * sv[0] {
            return Err(Error::Rank(format!(
                "pole {} + {}i: projected null space has fewer than {} independent directions",
                e.re, e.im, e.multiplicity.max(keep)
            )));
        }
        let mut b = u.columns(0, keep).into_owned();
        if e.im == 0.0 {
            b = real_basis(&b, keep)?;
        }
        bases.push(b);
    }
    Ok(NullFamily {
        n,
        m,
        spec: spec.clone(),
        bases,
    })
}

/// Real orthonormal basis for the span of `b` when that span is closed under
/// conjugation (real eigenvalues of real data).
fn real_basis(b: &CMat, k: usize) -> Result<CMat> {
    let re = b.map(|z| z.re);
    let im = b.map(|z| z.im);
    let both = linalg::hstack(&[&re, &im])?;
    let svd = linalg::svd(&both, true, false);
    let u = svd.u.ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    Ok(u.columns(0, k).map(|x| Complex64::new(x, 0.0)))
}

/// `K = -W V^{-1}` together with `V` and `W`.
#[derive(Debug, Clone)]
pub struct PlacedGain {
    pub k: Mat,
    pub v: Mat,
    pub w: Mat,
}

/// Gain for a structured parameter vector.
pub fn gain_from_g(fam: &NullFamily, g: &DVector<f64>) -> Result<PlacedGain> {
    let (v, w) = fam.vw(g)?;
    let sv = linalg::singular_values(&v);
    if sv.is_empty() || sv[sv.len() - 1] <= 1e-13 * sv[0] {
        return Err(Error::Rank("eigenvector matrix V(G) is singular; draw another G".into()));
    }
    let vinv = v
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Rank("eigenvector matrix V(G) is singular; draw another G".into()))?;
    Ok(PlacedGain {
        k: -(&w * vinv),
        v,
        w,
    })
}

/// `||V||_F + ||V^{-1}||_F` and its gradient in the parameters.
fn condition_objective(fam: &NullFamily, g: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
    let (v, _) = fam.vw(g).ok()?;
    let y = v.clone().try_inverse()?;
    let (a, b) = (v.norm(), y.norm());
    if !(a > 0.0 && b.is_finite()) {
        return None;
    }
    let grad_v = &v / a - (y.transpose() * &y * y.transpose()) / b;
    // V is linear in g; differentiate through the unit directions.
    let p = g.len();
    let mut grad = DVector::zeros(p);
    let zero = DVector::zeros(p);
    for k in 0..p {
        let mut e = zero.clone();
        e[k] = 1.0;
        let (dv, _) = fam.vw(&e).ok()?;
        grad[k] = grad_v.dot(&dv);
    }
    Some((a + b, grad))
}

fn random_g(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-1.0..=1.0))
}

/// Up to this many draws are tried before giving up on a nonsingular `V`.
const MAX_DRAWS: usize = 100;

fn draw_admissible(fam: &NullFamily, rng: &mut ChaCha8Rng) -> Result<(DVector<f64>, PlacedGain)> {
    for _ in 0..MAX_DRAWS {
        let g = random_g(fam.param_len(), rng);
        if let Ok(pg) = gain_from_g(fam, &g) {
            return Ok((g, pg));
        }
    }
    Err(Error::Rank(format!("V(G) singular for {MAX_DRAWS} random draws")))
}

fn placement_result(fam: &NullFamily, pg: PlacedGain, method: Method, objective: f64, j: usize) -> Result<GainResult> {
    let vinv = pg.v.clone().try_inverse().ok_or_else(|| Error::Rank("V(G) singular".into()))?;
    let cl = &pg.v * fam.real_spectrum_matrix() * vinv;
    Ok(GainResult {
        k: pg.k,
        p: None,
        l: None,
        beta: None,
        gamma: None,
        closed_loop_estimate: cl,
        method,
        objective: Some(objective),
        grid_index: j,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RobustSettings {
    pub restarts: usize,
    pub seed: u64,
    pub smooth: SmoothSettings,
    /// Run restarts on the rayon pool.
    pub parallel: bool,
}

impl Default for RobustSettings {
    fn default() -> Self {
        RobustSettings {
            restarts: 10,
            seed: 0,
            smooth: SmoothSettings::default(),
            parallel: true,
        }
    }
}

/// Condition-number-minimizing placement. Restart `r` draws its start from
/// seed `seed + r`; the best final objective wins, ties going to the lower
/// restart index.
pub fn place_poles_robust(h: &HankelTriple, j: usize, spec: &PoleSpec, st: &RobustSettings) -> Result<GainResult> {
    if st.restarts == 0 {
        return invalid("at least one restart is required");
    }
    let fam = build_null_family(h, j, spec)?;
    let run = |r: usize| -> Option<(f64, DVector<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(st.seed.wrapping_add(r as u64));
        let (g0, _) = draw_admissible(&fam, &mut rng).ok()?;
        let res = minimize_smooth(|g| condition_objective(&fam, g), &g0, &st.smooth).ok()?;
        Some((res.value, res.x))
    };
    let outcomes: Vec<Option<(f64, DVector<f64>)>> = if st.parallel {
        (0..st.restarts).into_par_iter().map(run).collect()
    } else {
        (0..st.restarts).map(run).collect()
    };
    let (value, g) = outcomes
        .into_iter()
        .flatten()
        .fold(None::<(f64, DVector<f64>)>, |best, cur| match best {
            Some(b) if b.0 <= cur.0 => Some(b),
            _ => Some(cur),
        })
        .ok_or_else(|| Error::Rank("V(G) singular in every restart".into()))?;
    let pg = gain_from_g(&fam, &g)?;
    placement_result(&fam, pg, Method::PolePlacementRobust, value, j)
}

/// Placement with a single random admissible `G`, for comparison.
pub fn place_poles_baseline(h: &HankelTriple, j: usize, spec: &PoleSpec, seed: u64) -> Result<GainResult> {
    let fam = build_null_family(h, j, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (g, pg) = draw_admissible(&fam, &mut rng)?;
    let value = condition_objective(&fam, &g).map(|(v, _)| v).unwrap_or(f64::INFINITY);
    placement_result(&fam, pg, Method::PolePlacementBaseline, value, j)
}

fn magnitude_order(a: &Complex64, b: &Complex64) -> std::cmp::Ordering {
    a.norm()
        .total_cmp(&b.norm())
        .then(b.im.total_cmp(&a.im))
        .then(a.re.total_cmp(&b.re))
}

/// `Σ |λ_i - λ_i*|` with both spectra sorted by magnitude (ties: larger
/// imaginary part first, then smaller real part). Targets of equal magnitude,
/// such as a conjugate pair, are matched to the achieved values in their
/// positions by the cheapest pairing, so rounding cannot interleave them.
pub fn placement_error_values(achieved: &[Complex64], target: &[Complex64]) -> Result<f64> {
    if achieved.len() != target.len() {
        return invalid(format!("{} eigenvalues vs {} targets", achieved.len(), target.len()));
    }
    let mut a = achieved.to_vec();
    let mut t = target.to_vec();
    a.sort_by(magnitude_order);
    t.sort_by(magnitude_order);
    let mut total = 0.0;
    let mut start = 0;
    while start < t.len() {
        let mag = t[start].norm();
        let end = start + t[start..].iter().take_while(|z| (z.norm() - mag).abs() <= REAL_TOL * mag.max(1.0)).count();
        total += cheapest_pairing(&a[start..end], &t[start..end]);
        start = end;
    }
    Ok(total)
}

/// Minimum of `Σ |a_i - t_p(i)|` over permutations `p`; greedy beyond eight
/// values.
fn cheapest_pairing(a: &[Complex64], t: &[Complex64]) -> f64 {
    fn search(a: &[Complex64], t: &[Complex64], used: &mut [bool], acc: f64, best: &mut f64) {
        let i = used.iter().filter(|&&u| u).count();
        if acc >= *best {
            return;
        }
        if i == a.len() {
            *best = acc;
            return;
        }
        for k in 0..t.len() {
            if !used[k] {
                used[k] = true;
                search(a, t, used, acc + (a[i] - t[k]).norm(), best);
                used[k] = false;
            }
        }
    }
    if a.len() <= 8 {
        let mut best = f64::INFINITY;
        search(a, t, &mut vec![false; t.len()], 0.0, &mut best);
        return best;
    }
    let mut used = vec![false; t.len()];
    a.iter()
        .map(|x| {
            let (k, d) = t
                .iter()
                .enumerate()
                .filter(|(k, _)| !used[*k])
                .map(|(k, y)| (k, (x - y).norm()))
                .min_by(|p, q| p.1.total_cmp(&q.1))
                .expect("groups have equal length");
            used[k] = true;
            d
        })
        .sum()
}

/// Model-based placement error of `K`.
pub fn placement_error(k: &Mat, sys: &LtiSystem, spec: &PoleSpec) -> Result<f64> {
    let eig = linalg::eigenvalues(&sys.closed_loop(k)?)?;
    placement_error_values(&eig, &spec.values())
}

/// Experiment used by one noisy placement trial.
#[derive(Debug, Clone, Copy)]
pub struct TrialSetup {
    pub segments: usize,
    pub segment_length: f64,
    pub grid_points: usize,
    /// Measurement noise bound on `x` and `ẋ`.
    pub noise: f64,
    pub restarts: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PlacementTrial {
    pub robust_error: f64,
    pub baseline_error: f64,
}

/// One trial of the noisy comparison: fresh excitation, initial state drawn
/// uniformly from `[-5, 5]^n` and noise, all derived from `seed`; both
/// placement variants on the same data, scored on the model.
pub fn placement_trial(sys: &LtiSystem, spec: &PoleSpec, setup: &TrialSetup, seed: u64) -> Result<PlacementTrial> {
    use crate::datamat::build_hankel;
    use crate::system::{generate_pcpe, simulate, uniform_grid, NoiseModel};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inp = generate_pcpe(sys.m(), sys.n(), setup.segments, setup.segment_length, rng.random())?;
    let grid = uniform_grid(setup.segment_length, setup.grid_points)?;
    let x0 = DVector::from_fn(sys.n(), |_, _| rng.random_range(-5.0..=5.0));
    let noise = (setup.noise > 0.0).then(|| NoiseModel::measurement(setup.noise, rng.random()));
    let h = build_hankel(&simulate(sys, &inp, &x0, &grid, noise.as_ref())?)?;
    let j = h.default_index();
    let st = RobustSettings {
        restarts: setup.restarts,
        seed: rng.random(),
        ..Default::default()
    };
    let robust = place_poles_robust(&h, j, spec, &st)?;
    let baseline = place_poles_baseline(&h, j, spec, rng.random())?;
    Ok(PlacementTrial {
        robust_error: placement_error(&robust.k, sys, spec)?,
        baseline_error: placement_error(&baseline.k, sys, spec)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::smooth::finite_difference_gradient;
    use crate::datamat::tests::experiment;
    use crate::system::{builtin_aircraft, random_controllable};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn real_spec(v: &[f64]) -> PoleSpec {
        PoleSpec::from_values(&v.iter().map(|&x| c(x, 0.0)).collect::<Vec<_>>()).unwrap()
    }

    fn scalar(a: f64, b: f64) -> LtiSystem {
        LtiSystem::new(Mat::from_element(1, 1, a), Mat::from_element(1, 1, b), "scalar").unwrap()
    }

    #[test]
    fn spec_validation_and_order() {
        let s = PoleSpec::from_values(&[c(-2.0, 0.0), c(-1.0, -1.0), c(-1.0, 1.0), c(-3.0, 0.0)]).unwrap();
        let e = s.entries();
        assert_eq!((e[0].im, e[1].im), (1.0, -1.0));
        assert_eq!(s.order(), 4);
        assert!(PoleSpec::from_values(&[c(-1.0, 1.0), c(-2.0, 0.0)]).is_err());
        let dup = vec![
            PoleEntry { re: -1.0, im: 0.0, multiplicity: 1 },
            PoleEntry { re: -1.0, im: 0.0, multiplicity: 1 },
        ];
        assert!(PoleSpec::new(dup).is_err());
        let s = real_spec(&[-1.0, -1.0, -1.0]);
        assert!(s.validate_for(3, 2).is_err());
        assert!(s.validate_for(4, 3).is_err());
        assert!(s.validate_for(3, 3).is_ok());
    }

    #[test]
    fn scalar_family_and_gain() {
        let h = experiment(&scalar(0.0, 1.0), 3, 0.5, 3, 51);
        let fam = build_null_family(&h, 1, &real_spec(&[-2.0])).unwrap();
        let b = fam.basis(0);
        assert_eq!(b.shape(), (2, 1));
        assert_relative_eq!(b[(1, 0)].re / b[(0, 0)].re, -2.0, epsilon = 1e-9);
        let g = DVector::from_element(1, 1.0 / b[(0, 0)].re);
        let pg = gain_from_g(&fam, &g).unwrap();
        assert_relative_eq!(pg.v[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(pg.w[(0, 0)], -2.0, epsilon = 1e-9);
        assert_relative_eq!(pg.k[(0, 0)], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn family_annihilates_model_pencil() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 5, 52);
        let spec = PoleSpec::from_values(&[c(-1.0, 1.0), c(-1.0, -1.0), c(-2.0, 0.0), c(-3.0, 0.0)]).unwrap();
        let fam = build_null_family(&h, 2, &spec).unwrap();
        for (i, e) in spec.entries().iter().enumerate() {
            let lam = e.value();
            let pencil = linalg::hstack(&[s.a(), s.b()]).unwrap().map(|x| Complex64::new(x, 0.0));
            let mut shift = CMat::zeros(4, 6);
            for d in 0..4 {
                shift[(d, d)] = lam;
            }
            let r = (pencil - shift) * fam.basis(i);
            assert!(r.iter().all(|z| z.norm() <= 1e-8), "pole {i}");
            assert_eq!(fam.basis(i).ncols(), 2);
        }
        let conj = fam.basis(0).map(|z| z.conj());
        assert!((conj - fam.basis(1)).iter().all(|z| z.norm() <= 1e-8));
    }

    #[test]
    fn aircraft_exact_placement() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 5, 53);
        let spec = real_spec(&[-1.0, -2.0, -3.0, -4.0]);
        let b = place_poles_baseline(&h, 2, &spec, 7).unwrap();
        assert!(placement_error(&b.k, &s, &spec).unwrap() <= 1e-6);
        let b2 = place_poles_baseline(&h, 2, &spec, 7).unwrap();
        assert_eq!(b.k, b2.k);
        let r = place_poles_robust(&h, 2, &spec, &RobustSettings::default()).unwrap();
        assert!(placement_error(&r.k, &s, &spec).unwrap() <= 1e-6);
        assert!((&r.closed_loop_estimate - s.closed_loop(&r.k).unwrap()).amax() <= 1e-6);

        let baselines: Vec<f64> = (0..20)
            .map(|sd| place_poles_baseline(&h, 2, &spec, 100 + sd).unwrap().objective.unwrap())
            .collect();
        let mut sorted = baselines.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(r.objective.unwrap() < sorted[10]);
    }

    #[test]
    fn complex_pair_gives_real_gain() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 5, 54);
        let spec = PoleSpec::from_values(&[c(-1.0, 1.0), c(-1.0, -1.0), c(-2.0, 0.0), c(-3.0, 0.0)]).unwrap();
        let r = place_poles_robust(&h, 2, &spec, &RobustSettings { restarts: 3, ..Default::default() }).unwrap();
        assert!(r.k.iter().all(|x| x.is_finite()));
        assert!(placement_error(&r.k, &s, &spec).unwrap() <= 1e-6);
    }

    #[test]
    fn square_input_reaches_orthogonal_bound() {
        let s = LtiSystem::new(
            Mat::from_row_slice(2, 2, &[0.0, 1.0, -2.0, 0.5]),
            Mat::identity(2, 2),
            "square",
        )
        .unwrap();
        let h = experiment(&s, 8, 0.5, 3, 55);
        let r = place_poles_robust(&h, 1, &real_spec(&[-1.0, -5.0]), &RobustSettings::default()).unwrap();
        assert_relative_eq!(r.objective.unwrap(), 2.0 * 2f64.sqrt(), epsilon = 1e-5);
    }

    #[test]
    fn repeated_pole_within_input_count() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 5, 56);
        let spec = real_spec(&[-2.0, -2.0, -3.0, -3.0]);
        let r = place_poles_robust(&h, 2, &spec, &RobustSettings { restarts: 4, ..Default::default() }).unwrap();
        assert!(placement_error(&r.k, &s, &spec).unwrap() <= 1e-6);
    }

    #[test]
    fn error_metric() {
        assert_eq!(placement_error_values(&[c(-2.0, 0.0)], &[c(-2.0, 0.0)]).unwrap(), 0.0);
        assert_relative_eq!(placement_error_values(&[c(-2.1, 0.0)], &[c(-2.0, 0.0)]).unwrap(), 0.1, epsilon = 1e-12);
        let e = placement_error_values(&[c(-1.0, 1.1), c(-1.0, -1.1)], &[c(-1.0, 1.0), c(-1.0, -1.0)]).unwrap();
        assert_relative_eq!(e, 0.2, epsilon = 1e-12);
        // A repeated pair whose magnitudes differ only by rounding.
        let t = [c(-1.0, 2.0), c(-1.0, 2.0), c(-1.0, -2.0), c(-1.0, -2.0)];
        let a = [c(-1.0, 2.0), c(-1.0, -2.0), c(-1.0 - 1e-15, 2.0), c(-1.0 - 1e-15, -2.0)];
        assert!(placement_error_values(&a, &t).unwrap() <= 1e-14);
        let s = scalar(0.0, 1.0);
        assert_relative_eq!(
            placement_error(&Mat::from_element(1, 1, 2.1), &s, &real_spec(&[-2.0])).unwrap(),
            0.1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 5, 57);
        let spec = PoleSpec::from_values(&[c(-1.0, 1.0), c(-1.0, -1.0), c(-2.0, 0.0), c(-3.0, 0.0)]).unwrap();
        let fam = build_null_family(&h, 2, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let g = random_g(fam.param_len(), &mut rng);
            let Some((_, grad)) = condition_objective(&fam, &g) else { continue };
            let fd = finite_difference_gradient(|x| condition_objective(&fam, x).map(|v| v.0), &g, 1e-6).unwrap();
            // Central differences lose a few digits where the condition number is huge.
            assert!((&grad - &fd).norm() <= 1e-4 * grad.norm().max(1.0), "{} vs {}", (&grad - &fd).norm(), grad.norm());
        }
    }

    #[test]
    fn data_family_contains_model_gain() {
        // Classical eigenvector assignment from the model, then G by least squares.
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 5, 58);
        let spec = real_spec(&[-1.0, -2.0, -3.0, -4.0]);
        let fam = build_null_family(&h, 2, &spec).unwrap();
        let mut vcols = Vec::new();
        let mut wcols = Vec::new();
        let mut g = Vec::new();
        for (i, e) in spec.entries().iter().enumerate() {
            let pencil = linalg::hstack(&[&(s.a() - Mat::identity(4, 4) * e.re), s.b()]).unwrap();
            let z = linalg::null_space_basis(&pencil, 1e-12).unwrap();
            let vw = z.column(0).into_owned() + z.column(1) * 0.3;
            vcols.push(vw.rows(0, 4).into_owned());
            wcols.push(vw.rows(4, 2).into_owned());
            let basis = fam.basis(i).map(|x| x.re);
            let gi = linalg::lstsq(&basis, &Mat::from_column_slice(6, 1, vw.as_slice())).unwrap();
            assert!((&basis * &gi - Mat::from_column_slice(6, 1, vw.as_slice())).norm() <= 1e-8);
            g.extend(gi.iter().copied());
        }
        let v = Mat::from_columns(&vcols);
        let w = Mat::from_columns(&wcols);
        let k_mb = -(w * v.try_inverse().unwrap());
        let pg = gain_from_g(&fam, &DVector::from_vec(g)).unwrap();
        assert!((pg.k - &k_mb).amax() <= 1e-6 * k_mb.amax().max(1.0));
    }

    #[test]
    fn robust_never_worse_than_its_start() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 5, 59);
        let spec = real_spec(&[-1.0, -2.0, -3.0, -4.0]);
        let st = RobustSettings { restarts: 1, seed: 11, ..Default::default() };
        let r = place_poles_robust(&h, 2, &spec, &st).unwrap();
        let b = place_poles_baseline(&h, 2, &spec, 11).unwrap();
        assert!(r.objective.unwrap() <= b.objective.unwrap());
        assert!(placement_error(&r.k, &s, &spec).unwrap() <= 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn exact_on_random_systems(seed in 0u64..100_000, n in 2usize..=4, m in 1usize..=2) {
            let s = random_controllable(n, m, seed).unwrap();
            let h = experiment(&s, (m + 1) * (n + 1) + 2, 0.4, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<Complex64> = (0..n).map(|i| c(-0.5 - i as f64 - rng.random_range(0.0..0.5), 0.0)).collect();
            let spec = PoleSpec::from_values(&vals).unwrap();
            let b = place_poles_baseline(&h, 1, &spec, seed).unwrap();
            prop_assert!(placement_error(&b.k, &s, &spec).unwrap() <= 1e-6);
        }
    }
}
