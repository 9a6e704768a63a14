//! Hankel-row data matrices of a sampled experiment, persistence of
//! excitation checks, and representation solves.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{dim_err, invalid, Error, Result};
use crate::linalg::{self, Mat, DEFAULT_RANK_TOL};
use crate::system::TrajectoryData;

/// `Hu` (m x N) and, per grid time `t_j`, `Hx(j)` and `Hxd(j)` (n x N) whose
/// column `i` is the sample at `t_j + iT`.
#[derive(Debug, Clone)]
pub struct HankelTriple {
    hu: Mat,
    hx: Vec<Mat>,
    hxd: Vec<Mat>,
    grid: Vec<f64>,
    t_seg: f64,
}

impl HankelTriple {
    pub fn new(hu: Mat, hx: Vec<Mat>, hxd: Vec<Mat>, grid: Vec<f64>, t_seg: f64) -> Result<Self> {
        if hx.is_empty() || hx.len() != hxd.len() || hx.len() != grid.len() {
            return dim_err(format!(
                "need one Hx and Hxd per grid time (grid {}, Hx {}, Hxd {})",
                grid.len(),
                hx.len(),
                hxd.len()
            ));
        }
        let (n, nn) = hx[0].shape();
        if hu.ncols() != nn {
            return dim_err(format!("Hu has {} columns, Hx has {nn}", hu.ncols()));
        }
        for (j, (x, xd)) in hx.iter().zip(&hxd).enumerate() {
            if x.shape() != (n, nn) || xd.shape() != (n, nn) {
                return dim_err(format!("Hankel blocks at grid index {j} have inconsistent shapes"));
            }
        }
        if !(t_seg > 0.0) {
            return invalid("segment length must be positive");
        }
        Ok(HankelTriple {
            hu,
            hx,
            hxd,
            grid,
            t_seg,
        })
    }

    pub fn hu(&self) -> &Mat {
        &self.hu
    }

    pub fn hx(&self, j: usize) -> &Mat {
        &self.hx[j]
    }

    pub fn hxd(&self, j: usize) -> &Mat {
        &self.hxd[j]
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn segment_length(&self) -> f64 {
        self.t_seg
    }

    pub fn n(&self) -> usize {
        self.hx[0].nrows()
    }

    pub fn m(&self) -> usize {
        self.hu.nrows()
    }

    /// Number of columns (segments) N.
    pub fn segments(&self) -> usize {
        self.hu.ncols()
    }

    pub fn q(&self) -> usize {
        self.grid.len()
    }

    /// Default analysis time: the grid midpoint.
    pub fn default_index(&self) -> usize {
        self.q() / 2
    }

    pub fn check_index(&self, j: usize) -> Result<()> {
        if j < self.q() {
            Ok(())
        } else {
            invalid(format!("grid index {j} out of range (q = {})", self.q()))
        }
    }

    /// `[Hu; Hx(j)]`.
    pub fn stacked(&self, j: usize) -> Mat {
        linalg::vstack(&[&self.hu, &self.hx[j]]).expect("shapes checked at construction")
    }

    /// Grid index whose time equals `t` (to 1e-9 relative to T).
    pub fn index_of_time(&self, t: f64) -> Result<usize> {
        self.grid
            .iter()
            .position(|g| (g - t).abs() <= 1e-9 * self.t_seg)
            .ok_or_else(|| Error::Validation(format!("time {t} is not on the data grid")))
    }
}

/// Assemble the Hankel rows. `u` must be constant within every segment.
pub fn build_hankel(data: &TrajectoryData) -> Result<HankelTriple> {
    let n_seg = data.segments();
    let q = data.grid().len();
    if n_seg == 0 {
        return invalid("data has no segments");
    }
    let mut hu = Mat::zeros(data.m(), n_seg);
    for i in 0..n_seg {
        let u0 = data.u().column(data.column(i, 0));
        for j in 1..q {
            let uj = data.u().column(data.column(i, j));
            let dev = (uj - u0).amax();
            if dev > 1e-12 * (1.0 + u0.amax()) {
                return invalid(format!(
                    "input is not constant within segment {i} (deviation {dev:.3e} at grid index {j})"
                ));
            }
        }
        hu.set_column(i, &u0);
    }
    let gather = |sig: &Mat, j: usize| Mat::from_fn(sig.nrows(), n_seg, |r, i| sig[(r, i * q + j)]);
    let hx = (0..q).map(|j| gather(data.x(), j)).collect();
    let hxd = (0..q).map(|j| gather(data.xd(), j)).collect();
    HankelTriple::new(hu, hx, hxd, data.grid().to_vec(), data.segment_length())
}

#[derive(Debug, Clone, Serialize)]
pub struct PeReport {
    pub passed: bool,
    /// Smallest singular value of the equilibrated `[Hu; Hx(j)]` per grid index.
    pub min_singular_values: Vec<f64>,
    /// Minimum over the grid.
    pub min_singular_value: f64,
    /// Grid indices where the rank test failed.
    pub failing: Vec<usize>,
    pub diagnostic: String,
}

/// Rank test of `[Hu; Hx(j)]` against `m + n` at every grid time, after
/// equilibrating rows and columns.
pub fn check_pe(h: &HankelTriple) -> PeReport {
    let (m, n, nn) = (h.m(), h.n(), h.segments());
    let mut mins = Vec::with_capacity(h.q());
    let mut failing = Vec::new();
    for j in 0..h.q() {
        let sv = linalg::singular_values(&linalg::equilibrate(&h.stacked(j)));
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let smin = if sv.len() < m + n { 0.0 } else { sv.iter().cloned().fold(f64::INFINITY, f64::min) };
        let r = if smax == 0.0 { 0 } else { sv.iter().filter(|&&s| s > DEFAULT_RANK_TOL * smax).count() };
        mins.push(smin);
        if r < m + n {
            failing.push(j);
        }
    }
    let min_sv = mins.iter().cloned().fold(f64::INFINITY, f64::min);
    let diagnostic = if nn < m + n {
        format!("N = {nn} columns cannot reach rank m + n = {}", m + n)
    } else if failing.is_empty() {
        format!("rank m + n = {} at all {} grid times; min singular value {min_sv:.3e}", m + n, h.q())
    } else {
        format!(
            "rank below m + n = {} at {} of {} grid times; min singular value {min_sv:.3e}",
            m + n,
            failing.len(),
            h.q()
        )
    };
    PeReport {
        passed: failing.is_empty() && nn >= m + n,
        min_singular_values: mins,
        min_singular_value: min_sv,
        failing,
        diagnostic,
    }
}

/// Error unless `[Hu; Hx(j)]` has full row rank.
pub fn ensure_pe_at(h: &HankelTriple, j: usize) -> Result<()> {
    h.check_index(j)?;
    let r = linalg::rank(&linalg::equilibrate(&h.stacked(j)), DEFAULT_RANK_TOL);
    if r < h.m() + h.n() {
        return Err(Error::Excitation(format!(
            "[Hu; Hx] at grid index {j} has rank {r} < m + n = {}",
            h.m() + h.n()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RepresentationCoefficients {
    pub alpha: DVector<f64>,
    /// Relative residual of `[Hu; Hx(j)] alpha = [u; x]`.
    pub residual: f64,
}

/// Minimum-norm `alpha` with `[Hu; Hx(j)] alpha = [ubar; xbar]`.
pub fn represent_state(
    h: &HankelTriple,
    j: usize,
    ubar: &DVector<f64>,
    xbar: &DVector<f64>,
) -> Result<RepresentationCoefficients> {
    if ubar.len() != h.m() || xbar.len() != h.n() {
        return dim_err(format!(
            "target pair has sizes ({}, {}), expected ({}, {})",
            ubar.len(),
            xbar.len(),
            h.m(),
            h.n()
        ));
    }
    ensure_pe_at(h, j)?;
    let s = h.stacked(j);
    let target = Mat::from_iterator(h.m() + h.n(), 1, ubar.iter().chain(xbar.iter()).copied());
    let alpha = linalg::lstsq(&s, &target)?;
    let residual = (&s * &alpha - &target).norm() / (s.norm() * alpha.norm() + target.norm()).max(f64::MIN_POSITIVE);
    if residual > 1e-8 {
        return Err(Error::Numeric(format!("representation residual {residual:.2e}")));
    }
    Ok(RepresentationCoefficients {
        alpha: DVector::from_column_slice(alpha.as_slice()),
        residual,
    })
}

/// Data-based stand-in for `A Hx(j)`: `Hxd(j) Γ̄` with `[Hu; Hx(j)] Γ̄ = [0; Hx(j)]`.
pub fn compute_ha(h: &HankelTriple, j: usize) -> Result<Mat> {
    ensure_pe_at(h, j)?;
    let s = h.stacked(j);
    let rhs = linalg::vstack(&[&Mat::zeros(h.m(), h.segments()), h.hx(j)])?;
    let gbar = linalg::lstsq(&s, &rhs)?;
    Ok(h.hxd(j) * gbar)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::system::{builtin_aircraft, generate_pcpe, simulate, uniform_grid, LtiSystem, NoiseModel};

    pub(crate) fn experiment(sys: &LtiSystem, n_seg: usize, t_seg: f64, q: usize, seed: u64) -> HankelTriple {
        let inp = generate_pcpe(sys.m(), sys.n(), n_seg, t_seg, seed).unwrap();
        let grid = uniform_grid(t_seg, q).unwrap();
        let x0 = DVector::from_fn(sys.n(), |i, _| ((i + 1) as f64 * 0.37 + seed as f64).sin());
        build_hankel(&simulate(sys, &inp, &x0, &grid, None).unwrap()).unwrap()
    }

    #[test]
    fn scalar_signal_row() {
        let d = TrajectoryData::from_parts(
            1.0,
            3,
            vec![0.0],
            Mat::from_row_slice(1, 3, &[1.0, 2.0, 3.0]),
            Mat::from_row_slice(1, 3, &[4.0, 5.0, 6.0]),
            Mat::from_row_slice(1, 3, &[0.0, 0.0, 0.0]),
            None,
        )
        .unwrap();
        let h = build_hankel(&d).unwrap();
        assert_eq!(h.hx(0), &Mat::from_row_slice(1, 3, &[4.0, 5.0, 6.0]));
        assert_eq!(h.hu(), &Mat::from_row_slice(1, 3, &[1.0, 2.0, 3.0]));
    }

    #[test]
    fn shapes_and_model_identity() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 21, 4);
        assert_eq!(h.hu().shape(), (2, 15));
        assert_eq!(h.hx(3).shape(), (4, 15));
        for j in 0..h.q() {
            let r = h.hxd(j) - s.a() * h.hx(j) - s.b() * h.hu();
            assert!(r.norm() <= 1e-10 * h.hxd(j).norm().max(1.0), "j={j}: {}", r.norm());
        }
        let pe = check_pe(&h);
        assert!(pe.passed, "{}", pe.diagnostic);
        assert_eq!(pe.min_singular_values.len(), 21);
    }

    #[test]
    fn non_constant_input_is_rejected() {
        let d = TrajectoryData::from_parts(
            1.0,
            1,
            vec![0.0, 1.0],
            Mat::from_row_slice(1, 2, &[1.0, 2.0]),
            Mat::zeros(1, 2),
            Mat::zeros(1, 2),
            None,
        )
        .unwrap();
        assert!(matches!(build_hankel(&d), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_experiment_fails_pe() {
        let n_seg = 10;
        let d = TrajectoryData::from_parts(
            1.0,
            n_seg,
            vec![0.0, 0.5],
            Mat::zeros(1, 2 * n_seg),
            Mat::zeros(2, 2 * n_seg),
            Mat::zeros(2, 2 * n_seg),
            None,
        )
        .unwrap();
        let pe = check_pe(&build_hankel(&d).unwrap());
        assert!(!pe.passed);
        assert_eq!(pe.failing.len(), 2);
    }

    #[test]
    fn too_few_columns_fail_with_diagnostic() {
        let s = builtin_aircraft();
        let inp = crate::system::PcpeInput::new(0.5, Mat::from_fn(2, 3, |i, j| (i * 3 + j) as f64 - 2.5), 1)
            .unwrap();
        let d = simulate(&s, &inp, &DVector::zeros(4), &[0.0, 0.25], None).unwrap();
        let pe = check_pe(&build_hankel(&d).unwrap());
        assert!(!pe.passed);
        assert!(pe.diagnostic.contains("cannot reach rank"));
    }

    #[test]
    fn representation_examples() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 5, 8);
        let j = 2;
        let u1 = h.hu().column(0).into_owned();
        let x1 = h.hx(j).column(0).into_owned();
        let r = represent_state(&h, j, &u1, &x1).unwrap();
        let back = h.stacked(j) * &r.alpha;
        assert!((back.rows(0, 2) - &u1).norm() < 1e-10);
        assert!((back.rows(2, 4) - &x1).norm() < 1e-10);
        let z = represent_state(&h, j, &DVector::zeros(2), &DVector::zeros(4)).unwrap();
        assert_eq!(z.alpha.norm(), 0.0);
    }

    #[test]
    fn ha_matches_model() {
        let s = builtin_aircraft();
        let h = experiment(&s, 15, 0.5, 5, 9);
        for j in 0..h.q() {
            let ha = compute_ha(&h, j).unwrap();
            assert!((ha - s.a() * h.hx(j)).norm() <= 1e-8 * h.hx(j).norm());
        }
        // B = 0: input plays no role and H_A = Hxd.
        let nb = LtiSystem::new(s.a().clone(), Mat::zeros(4, 1), "autonomous").unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let hu = Mat::from_fn(1, 8, |_, _| rng.random_range(-1.0..1.0));
        let hx = Mat::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let hxd = nb.a() * &hx;
        let h = HankelTriple::new(hu, vec![hx], vec![hxd.clone()], vec![0.0], 1.0).unwrap();
        assert!((compute_ha(&h, 0).unwrap() - &hxd).norm() <= 1e-10 * hxd.norm());
    }

    #[test]
    fn ha_scalar() {
        let s = LtiSystem::new(Mat::from_element(1, 1, 2.0), Mat::from_element(1, 1, 1.0), "s").unwrap();
        let h = experiment(&s, 3, 0.5, 3, 1);
        for j in 0..h.q() {
            let ha = compute_ha(&h, j).unwrap();
            assert!((ha - h.hx(j) * 2.0).norm() <= 1e-9 * h.hx(j).norm());
        }
    }

    #[test]
    fn noisy_data_still_builds() {
        let s = builtin_aircraft();
        let inp = generate_pcpe(2, 4, 15, 0.5, 3).unwrap();
        let grid = uniform_grid(0.5, 5).unwrap();
        let nm = NoiseModel::measurement(1e-2, 3);
        let d = simulate(&s, &inp, &DVector::zeros(4), &grid, Some(&nm)).unwrap();
        assert!(check_pe(&build_hankel(&d).unwrap()).passed);
    }
}
