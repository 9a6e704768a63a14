//! Dense linear-algebra kernels on top of `nalgebra`.
//!
//! Rank decisions everywhere use singular values with a threshold relative to
//! the largest one, so results do not depend on the scale of the data.

use nalgebra::{Cholesky, ComplexField, DMatrix, DVector, Dyn, Schur, SymmetricEigen, SVD};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};

pub type Mat = DMatrix<f64>;
pub type CMat = DMatrix<Complex64>;

/// Default relative threshold for numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Eigenvalues with column-aligned right eigenvectors.
#[derive(Debug, Clone)]
pub struct EigDecomp {
    pub values: Vec<Complex64>,
    pub vectors: CMat,
}

/// Singular values with a square, complete right singular basis.
#[derive(Debug, Clone)]
pub struct FullSvd {
    /// Descending singular values, length `min(rows, cols)`.
    pub s: DVector<f64>,
    /// `cols x cols` orthogonal matrix of right singular vectors.
    pub v: Mat,
}

pub fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} has non-finite entries")))
    }
}

pub fn ensure_square(m: &Mat, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        dim_err(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols()))
    }
}

pub fn ensure_shape(m: &Mat, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() == (rows, cols) {
        Ok(())
    } else {
        dim_err(format!(
            "{what} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        ))
    }
}

/// Eigenvalues of a real square matrix via the real Schur form.
///
/// The QR iteration occasionally cycles without deflating (some Hamiltonian
/// matrices do this reliably); it is then rerun on `Q M Q^T` for a few fixed
/// pseudo-random orthogonal `Q`, which has the same spectrum.
pub fn eigenvalues(m: &Mat) -> Result<Vec<Complex64>> {
    ensure_square(m, "eigenvalue input")?;
    ensure_finite(m, "eigenvalue input")?;
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if let Some(schur) = Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        return Ok(schur.complex_eigenvalues().iter().copied().collect());
    }
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        if let Some(schur) = Schur::try_new(&q * m * q.transpose(), f64::EPSILON, 10_000) {
            return Ok(schur.complex_eigenvalues().iter().copied().collect());
        }
    }
    Err(Error::Numeric(format!("Schur iteration did not converge on {n}x{n} matrix")))
}

/// Full eigendecomposition. Eigenvectors come from the smallest right
/// singular vector of `M - λI`, which stays well defined for clustered values.
pub fn eig(m: &Mat) -> Result<EigDecomp> {
    let values = eigenvalues(m)?;
    let n = m.nrows();
    let mc: CMat = m.map(|x| Complex64::new(x, 0.0));
    let scale = m.norm().max(f64::MIN_POSITIVE);
    let mut vectors = CMat::zeros(n, n);
    for (k, &lam) in values.iter().enumerate() {
        let mut shifted = mc.clone();
        for i in 0..n {
            shifted[(i, i)] -= lam;
        }
        let svd = shifted.svd(false, true);
        let vt = svd
            .v_t
            .ok_or_else(|| Error::Numeric("eigenvector SVD failed".into()))?;
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let v: Vec<Complex64> = vt.row(imin).iter().map(|z| z.conj()).collect();
        let v = nalgebra::DVector::from_vec(v);
        let res = (&mc * &v - &v * lam).norm();
        if res > 1e-9 * scale * v.norm().max(1.0) && res > 1e-12 {
            return Err(Error::Numeric(format!(
                "eigenvector residual {res:.3e} too large for eigenvalue {lam}"
            )));
        }
        vectors.set_column(k, &v);
    }
    Ok(EigDecomp { values, vectors })
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &Mat) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// True iff every eigenvalue has real part `< -margin`.
pub fn is_hurwitz(m: &Mat, margin: f64) -> Result<bool> {
    Ok(eigenvalues(m)?.iter().all(|z| z.re < -margin))
}

/// Matrix exponential (Padé scaling and squaring from `nalgebra`).
pub fn expm(m: &Mat) -> Result<Mat> {
    ensure_square(m, "expm input")?;
    ensure_finite(m, "expm input")?;
    if m.nrows() == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    if m.lp_norm(1) > 700.0 * (m.nrows() as f64) {
        return Err(Error::Numeric(format!(
            "expm input norm {:.3e} overflows double precision",
            m.lp_norm(1)
        )));
    }
    let e = m.exp();
    if e.iter().all(|x| x.is_finite()) {
        Ok(e)
    } else {
        Err(Error::Numeric("expm produced non-finite entries".into()))
    }
}

/// Thin SVD that always factors the tall orientation. nalgebra's
/// bidiagonalization loses accuracy on wide inputs (relative reconstruction
/// errors near 1e-3), while the adjoint factors to machine precision.
pub fn svd<T: ComplexField>(m: &DMatrix<T>, compute_u: bool, compute_v: bool) -> SVD<T, Dyn, Dyn> {
    if m.nrows() >= m.ncols() {
        return m.clone().svd(compute_u, compute_v);
    }
    let t = m.adjoint().svd(compute_v, compute_u);
    SVD {
        u: t.v_t.map(|vt| vt.adjoint()),
        v_t: t.u.map(|u| u.adjoint()),
        singular_values: t.singular_values,
    }
}

/// SVD with the complete right singular basis (wide inputs are zero-padded).
pub fn full_svd(m: &Mat) -> FullSvd {
    let (r, c) = m.shape();
    if c == 0 {
        return FullSvd {
            s: DVector::zeros(0),
            v: Mat::zeros(0, 0),
        };
    }
    if r == 0 {
        return FullSvd {
            s: DVector::zeros(0),
            v: Mat::identity(c, c),
        };
    }
    let padded = if r < c {
        let mut p = Mat::zeros(c, c);
        p.rows_mut(0, r).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let k = r.min(c);
    let v = svd.v_t.expect("v requested").transpose();
    FullSvd {
        s: svd.singular_values.rows(0, k).into_owned(),
        v,
    }
}

pub fn singular_values(m: &Mat) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    svd(m, false, false).singular_values
}

fn rank_from_sv(s: &DVector<f64>, tol: f64) -> usize {
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > tol * smax).count()
}

/// Numerical rank with relative threshold `tol * sigma_max`.
pub fn rank(m: &Mat, tol: f64) -> usize {
    rank_from_sv(&singular_values(m), tol)
}

/// Orthonormal basis of the right null space.
pub fn null_space_basis(m: &Mat, tol: f64) -> Result<Mat> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Validation(format!("rank tolerance {tol} outside (0,1)")));
    }
    ensure_finite(m, "null-space input")?;
    let svd = full_svd(m);
    let r = rank_from_sv(&svd.s, tol);
    let c = m.ncols();
    Ok(svd.v.columns(r, c - r).into_owned())
}

/// Orthonormal basis of the right null space of a complex matrix.
pub fn null_space_basis_complex(m: &CMat, tol: f64) -> Result<CMat> {
    complex_null_space(m, |s| rank_from_sv(s, tol))
}

/// Right null space of a complex matrix known to have rank `rank`: the
/// trailing `ncols - rank` right singular vectors.
pub fn null_space_basis_complex_rank(m: &CMat, rank: usize) -> Result<CMat> {
    if rank > m.nrows().min(m.ncols()) {
        return Err(Error::Dimension(format!("rank {rank} exceeds the size of a {}x{} matrix", m.nrows(), m.ncols())));
    }
    complex_null_space(m, |_| rank)
}

fn complex_null_space(m: &CMat, rank: impl Fn(&DVector<f64>) -> usize) -> Result<CMat> {
    let (r, c) = m.shape();
    if c == 0 {
        return Ok(CMat::zeros(0, 0));
    }
    if r == 0 {
        return Ok(CMat::identity(c, c));
    }
    let padded = if r < c {
        let mut p = CMat::zeros(c, c);
        p.rows_mut(0, r).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let k = r.min(c);
    let s = svd.singular_values.rows(0, k).into_owned();
    let rk = rank(&s);
    let v = svd
        .v_t
        .ok_or_else(|| Error::Numeric("complex SVD failed".into()))?
        .adjoint();
    Ok(v.columns(rk, c - rk).into_owned())
}

/// Reciprocal column norms (1 for zero columns).
pub fn column_scaling(m: &Mat) -> DVector<f64> {
    DVector::from_iterator(
        m.ncols(),
        m.column_iter().map(|c| {
            let n = c.norm();
            if n > 0.0 { 1.0 / n } else { 1.0 }
        }),
    )
}

/// `m * diag(d)`.
pub fn scale_columns(m: &Mat, d: &DVector<f64>) -> Mat {
    let mut out = m.clone();
    for (mut c, &s) in out.column_iter_mut().zip(d.iter()) {
        c *= s;
    }
    out
}

/// `m` with columns and then rows scaled to unit norm. Leaves the rank
/// unchanged and removes the spread caused by growing signals or by inputs
/// and states of different magnitude.
pub fn equilibrate(m: &Mat) -> Mat {
    let cols = scale_columns(m, &column_scaling(m));
    let rows = column_scaling(&cols.transpose());
    scale_columns(&cols.transpose(), &rows).transpose()
}

/// Orthonormal basis of the column space.
pub fn range_basis(m: &Mat, tol: f64) -> Mat {
    if m.is_empty() {
        return Mat::zeros(m.nrows(), 0);
    }
    let svd = svd(m, true, false);
    let r = rank_from_sv(&svd.singular_values, tol);
    svd.u.expect("u requested").columns(0, r).into_owned()
}

/// Orthonormal basis (as columns) of the row space.
pub fn row_space_basis(m: &Mat, tol: f64) -> Mat {
    range_basis(&m.transpose(), tol)
}

/// Minimum-norm least-squares solution with the usual `max(r,c)·eps` cutoff.
pub fn lstsq(a: &Mat, b: &Mat) -> Result<Mat> {
    let tol = (a.nrows().max(a.ncols()) as f64) * f64::EPSILON;
    lstsq_tol(a, b, tol)
}

/// Minimum-norm least squares discarding singular values below `tol * sigma_max`.
pub fn lstsq_tol(a: &Mat, b: &Mat, tol: f64) -> Result<Mat> {
    if a.nrows() != b.nrows() {
        return dim_err(format!(
            "lstsq: A has {} rows but B has {}",
            a.nrows(),
            b.nrows()
        ));
    }
    ensure_finite(a, "lstsq A")?;
    ensure_finite(b, "lstsq B")?;
    if a.is_empty() {
        return Ok(Mat::zeros(a.ncols(), b.ncols()));
    }
    let svd = svd(a, true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v requested");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let mut utb = u.transpose() * b;
    for (i, mut row) in utb.row_iter_mut().enumerate() {
        let si = s[i];
        if smax > 0.0 && si > tol * smax {
            row /= si;
        } else {
            row.fill(0.0);
        }
    }
    Ok(vt.transpose() * utb)
}

/// Moore-Penrose pseudoinverse.
pub fn pinv(a: &Mat) -> Result<Mat> {
    lstsq(a, &Mat::identity(a.nrows(), a.nrows()))
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_pos_def(m: &Mat) -> bool {
    Cholesky::new(symmetrize(m)).is_some()
}

/// `[B, AB, ..., A^{n-1}B]`.
pub fn controllability_matrix(a: &Mat, b: &Mat) -> Mat {
    let n = a.nrows();
    let m = b.ncols();
    let mut c = Mat::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        c.columns_mut(k * m, m).copy_from(&blk);
        blk = a * blk;
    }
    c
}

/// Stack matrices vertically; all must share the column count.
pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
    let cols = parts.first().map_or(0, |p| p.ncols());
    if parts.iter().any(|p| p.ncols() != cols) {
        return dim_err("vstack: column counts differ");
    }
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(*p);
        r += p.nrows();
    }
    Ok(out)
}

/// Stack matrices horizontally; all must share the row count.
pub fn hstack(parts: &[&Mat]) -> Result<Mat> {
    let rows = parts.first().map_or(0, |p| p.nrows());
    if parts.iter().any(|p| p.nrows() != rows) {
        return dim_err("hstack: row counts differ");
    }
    let cols = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for p in parts {
        out.columns_mut(c, p.ncols()).copy_from(*p);
        c += p.ncols();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn wide_svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let r = rng.random_range(1..8);
            let c = rng.random_range(r..20);
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            let m = Mat::from_fn(r, c, |_, j| {
                if rng.random_bool(0.3) {
                    0.0
                } else if j == 0 {
                    rng.random_range(-1.0..1.0) * scale
                } else {
                    rng.random_range(-1.0..1.0)
                }
            });
            let err = (svd(&m, true, true).recompose().unwrap() - &m).norm() / m.norm().max(1.0);
            assert!(err < 1e-10, "{r}x{c}: {err:e}");
        }
    }

    fn sorted_re(vals: &[Complex64]) -> Vec<f64> {
        let mut v: Vec<f64> = vals.iter().map(|z| z.re).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn eig_diagonal() {
        let m = Mat::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        let e = eig(&m).unwrap();
        assert_eq!(sorted_re(&e.values), vec![-2.0, -1.0]);
    }

    #[test]
    fn eig_rotation_generator() {
        let m = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let e = eig(&m).unwrap();
        let mut im: Vec<f64> = e.values.iter().map(|z| z.im).collect();
        im.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(im[0], -1.0, epsilon = 1e-14);
        assert_relative_eq!(im[1], 1.0, epsilon = 1e-14);
        assert!(e.values.iter().all(|z| z.re.abs() < 1e-14));
    }

    #[test]
    fn eig_companion_matches_quadratic_roots() {
        // s^2 + 3s + 2: roots from the quadratic formula.
        let (b, c) = (3.0_f64, 2.0_f64);
        let disc = (b * b - 4.0 * c).sqrt();
        let mut roots = [(-b - disc) / 2.0, (-b + disc) / 2.0];
        roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = Mat::from_row_slice(2, 2, &[0.0, 1.0, -c, -b]);
        let got = sorted_re(&eig(&m).unwrap().values);
        assert_relative_eq!(got[0], roots[0], epsilon = 1e-12);
        assert_relative_eq!(got[1], roots[1], epsilon = 1e-12);
    }

    #[test]
    fn eig_rejects_non_square() {
        assert!(matches!(eig(&Mat::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn null_space_examples() {
        let b = null_space_basis(&Mat::from_row_slice(1, 3, &[1.0, 0.0, 0.0]), 1e-9).unwrap();
        assert_eq!(b.ncols(), 2);
        assert!(b.row(0).norm() < 1e-14);
        let b = null_space_basis(&Mat::identity(3, 3), 1e-9).unwrap();
        assert_eq!(b.ncols(), 0);
        let b = null_space_basis(&Mat::from_row_slice(1, 2, &[1.0, 1.0]), 1e-9).unwrap();
        assert_eq!(b.ncols(), 1);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(b[(0, 0)].abs(), h, epsilon = 1e-14);
        assert_relative_eq!(b[(0, 0)], -b[(1, 0)], epsilon = 1e-14);
    }

    #[test]
    fn hurwitz_examples() {
        let stable = Mat::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        assert!(is_hurwitz(&stable, 0.0).unwrap());
        let unstable = Mat::from_diagonal(&DVector::from_vec(vec![-1.0, 0.5]));
        assert!(!is_hurwitz(&unstable, 0.0).unwrap());
        assert!(!is_hurwitz(&stable, 1.5).unwrap());
    }

    #[test]
    fn expm_examples() {
        assert_eq!(expm(&Mat::zeros(3, 3)).unwrap(), Mat::identity(3, 3));
        let d = Mat::from_diagonal(&DVector::from_vec(vec![0.3, -1.2]));
        let e = expm(&d).unwrap();
        assert_relative_eq!(e[(0, 0)], 0.3_f64.exp(), max_relative = 1e-14);
        assert_relative_eq!(e[(1, 1)], (-1.2_f64).exp(), max_relative = 1e-14);
        let nil = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(
            expm(&nil).unwrap(),
            Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            epsilon = 1e-15
        );
    }

    #[test]
    fn expm_overflow_is_numeric_error() {
        let big = Mat::from_diagonal(&DVector::from_vec(vec![1e6, 1.0]));
        assert!(matches!(expm(&big), Err(Error::Numeric(_))));
    }

    #[test]
    fn lstsq_examples() {
        let b = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(lstsq(&Mat::identity(2, 2), &b).unwrap(), b, epsilon = 1e-15);
        let x = lstsq(&Mat::from_row_slice(2, 1, &[1.0, 1.0]), &Mat::from_row_slice(2, 1, &[1.0, 3.0]))
            .unwrap();
        // normal equations: 2x = 4
        assert_relative_eq!(x[(0, 0)], 2.0, epsilon = 1e-14);
        let x = lstsq(&Mat::from_row_slice(1, 2, &[1.0, 1.0]), &Mat::from_row_slice(1, 1, &[2.0]))
            .unwrap();
        // pseudoinverse of [1 1] is [1/2; 1/2]
        assert_relative_eq!(x, Mat::from_row_slice(2, 1, &[1.0, 1.0]), epsilon = 1e-14);
    }

    #[test]
    fn controllability_of_double_integrator() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(rank(&controllability_matrix(&a, &b), 1e-9), 2);
    }

    fn mat_strategy(max_n: usize) -> impl Strategy<Value = Mat> {
        (1..=max_n).prop_flat_map(|n| {
            proptest::collection::vec(-5.0f64..5.0, n * n)
                .prop_map(move |v| Mat::from_row_slice(n, n, &v))
        })
    }

    fn rect_strategy(max: usize) -> impl Strategy<Value = Mat> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-5.0f64..5.0, r * c)
                .prop_map(move |v| Mat::from_row_slice(r, c, &v))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn eig_residual_and_conjugate_closure(m in mat_strategy(10)) {
            let e = eig(&m).unwrap();
            let mc = m.map(|x| Complex64::new(x, 0.0));
            for (k, lam) in e.values.iter().enumerate() {
                let v = e.vectors.column(k);
                let res = (&mc * v - v * *lam).norm();
                prop_assert!(res <= 1e-9 * m.norm() * v.norm());
                if lam.im != 0.0 {
                    let has_conj = e.values.iter().any(|z| (z - lam.conj()).norm() <= 1e-12 * (1.0 + lam.norm()));
                    prop_assert!(has_conj);
                }
            }
        }

        #[test]
        fn null_space_contract(m in rect_strategy(10)) {
            // Make rank deficiency likely by duplicating a column.
            let mut m = m;
            if m.ncols() > 1 {
                let c0 = m.column(0).into_owned();
                m.set_column(m.ncols() - 1, &c0);
            }
            let tol = 1e-9;
            let basis = null_space_basis(&m, tol).unwrap();
            let smax = singular_values(&m).max();
            prop_assert!((&m * &basis).norm() <= 10.0 * tol * smax.max(1.0));
            let gram = basis.transpose() * &basis;
            prop_assert!((gram - Mat::identity(basis.ncols(), basis.ncols())).norm() < 1e-12);
            prop_assert_eq!(basis.ncols(), m.ncols() - rank(&m, tol));
        }

        #[test]
        fn lstsq_normal_equations(a in rect_strategy(10), seed in 0u64..1000) {
            let b = Mat::from_fn(a.nrows(), 2, |i, j| ((i * 7 + j * 3) as f64 + seed as f64).sin());
            let x = lstsq(&a, &b).unwrap();
            // Optimality: gradient A^T(Ax - b) vanishes.
            let g = a.transpose() * (&a * &x - &b);
            prop_assert!(g.norm() <= 1e-9 * (a.norm().powi(2) * x.norm() + a.norm() * b.norm()).max(1.0));
            // Minimum norm: x lies in the row space of A.
            let nb = null_space_basis(&a, 1e-12).unwrap();
            prop_assert!((nb.transpose() * &x).norm() <= 1e-8 * x.norm().max(1.0));
        }

        #[test]
        fn expm_inverse(m in mat_strategy(10)) {
            let m = &m * (5.0 / m.norm().max(5.0));
            let e = expm(&m).unwrap() * expm(&(-&m)).unwrap();
            prop_assert!((e - Mat::identity(m.nrows(), m.nrows())).norm() <= 1e-8);
        }

        #[test]
        fn expm_matches_series(m in mat_strategy(10)) {
            let m = &m * (1.0 / m.norm().max(1.0));
            let n = m.nrows();
            let mut term = Mat::identity(n, n);
            let mut sum = term.clone();
            for k in 1..40 {
                term = &term * &m / k as f64;
                sum += &term;
            }
            let e = expm(&m).unwrap();
            prop_assert!((&e - &sum).norm() <= 1e-10 * sum.norm());
        }
    }
}
