//! Dense semidefinite programming.
//!
//! Problems are stated over matrix variables as `maximize c(y)` subject to
//! affine LMIs `F_k(y) ⪰ 0` and affine equalities. The solver eliminates the
//! equalities, drops directions that no constraint sees, rescales, and runs a
//! primal-dual interior-point method with Nesterov-Todd scaling and a
//! Mehrotra predictor-corrector step on the dual pair
//!
//! ```text
//!   min <C, X>  s.t.  <A_j, X> = b_j, X ⪰ 0
//!   max b'w     s.t.  S = C - sum_j w_j A_j ⪰ 0
//! ```

use nalgebra::{Cholesky, DVector, SymmetricEigen, LU};
use serde::Serialize;

use super::affine::{Affine, MatVar, VarSpace};
use crate::error::{dim_err, invalid, Error, Result};
use crate::linalg::{self, Mat};

/// Environment variable overriding the default feasibility and gap tolerance.
pub const TOL_ENV: &str = "DBCONTROL_SDP_TOL";

/// Iterations without halving the residual merit before the solver gives up.
const STALL_ITERS: usize = 25;

/// A stalled run is still accepted when its best iterate is within this factor
/// of the tolerances. Degenerate problems often stall just short of 1e-9.
const RELAXED_MERIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SdpSettings {
    pub feas_tol: f64,
    pub gap_tol: f64,
    /// Margin used to realize strict inequalities as `F - eps*I ⪰ 0`.
    pub strict_eps: f64,
    pub max_iters: usize,
}

impl Default for SdpSettings {
    fn default() -> Self {
        SdpSettings {
            feas_tol: 1e-9,
            gap_tol: 1e-9,
            strict_eps: 1e-8,
            max_iters: 150,
        }
    }
}

impl SdpSettings {
    /// Defaults, with both tolerances taken from [`TOL_ENV`] when it parses.
    pub fn from_env() -> Self {
        let mut s = Self::default();
        if let Some(t) = std::env::var(TOL_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|t| *t > 0.0 && *t < 1.0)
        {
            s.feas_tol = t;
            s.gap_tol = t;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    NumericFailure,
}

#[derive(Debug, Clone)]
struct Lmi {
    name: String,
    expr: Affine,
    strict: bool,
}

#[derive(Debug, Clone)]
struct Equality {
    name: String,
    expr: Affine,
}

/// An SDP in LMI form: maximize a linear objective over matrix variables.
#[derive(Debug, Clone, Default)]
pub struct SdpProblem {
    vars: VarSpace,
    objective: Option<Affine>,
    lmis: Vec<Lmi>,
    equalities: Vec<Equality>,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub y: DVector<f64>,
    pub objective: f64,
    /// Relative duality gap of the final iterate.
    pub gap: f64,
    /// Largest relative violation over LMIs (including strictness margins)
    /// and equalities, evaluated on the returned point.
    pub violation: f64,
    pub iterations: usize,
    pub diagnostic: String,
    vars: VarSpace,
}

impl SdpSolution {
    pub fn value(&self, v: MatVar) -> Mat {
        self.vars.value(v, &self.y)
    }

    pub fn eval(&self, e: &Affine) -> Mat {
        e.eval(&self.y)
    }

    /// Turn a non-optimal status into the matching error.
    pub fn require_optimal(self, what: &str) -> Result<Self> {
        match self.status {
            SdpStatus::Optimal => Ok(self),
            SdpStatus::Infeasible => Err(Error::Infeasible(format!("{what}: {}", self.diagnostic))),
            SdpStatus::NumericFailure => {
                Err(Error::Numeric(format!("{what}: {}", self.diagnostic)))
            }
        }
    }
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> MatVar {
        self.vars.symmetric(name, n)
    }

    pub fn full(&mut self, name: &str, rows: usize, cols: usize) -> MatVar {
        self.vars.full(name, rows, cols)
    }

    pub fn scalar(&mut self, name: &str) -> MatVar {
        self.vars.scalar(name)
    }

    pub fn expr(&self, v: MatVar) -> Affine {
        self.vars.expr(v)
    }

    pub fn vars(&self) -> &VarSpace {
        &self.vars
    }

    pub fn num_lmis(&self) -> usize {
        self.lmis.len()
    }

    pub fn maximize(&mut self, obj: Affine) -> Result<()> {
        if obj.shape() != (1, 1) {
            return dim_err(format!("objective must be scalar, got {:?}", obj.shape()));
        }
        self.objective = Some(obj);
        Ok(())
    }

    pub fn minimize(&mut self, obj: Affine) -> Result<()> {
        self.maximize(-&obj)
    }

    fn add_lmi(&mut self, name: &str, expr: Affine, strict: bool) -> Result<()> {
        let (r, c) = expr.shape();
        if r != c {
            return dim_err(format!("LMI '{name}' is {r}x{c}, must be square"));
        }
        if expr.nvars() > self.vars.len() {
            return invalid(format!("LMI '{name}' references undeclared variables"));
        }
        let asym = expr.asymmetry();
        if asym > 1e-9 * expr.magnitude().max(1.0) {
            return invalid(format!("LMI '{name}' is not symmetric (asymmetry {asym:.2e})"));
        }
        self.lmis.push(Lmi {
            name: name.to_string(),
            expr: expr.sym(),
            strict,
        });
        Ok(())
    }

    /// `expr ⪰ 0`.
    pub fn psd(&mut self, name: &str, expr: Affine) -> Result<()> {
        self.add_lmi(name, expr, false)
    }

    /// `expr ≻ 0`, realized as `expr - eps*I ⪰ 0`.
    pub fn pd(&mut self, name: &str, expr: Affine) -> Result<()> {
        self.add_lmi(name, expr, true)
    }

    /// `expr = rhs` entrywise.
    pub fn equal(&mut self, name: &str, expr: Affine, rhs: &Mat) -> Result<()> {
        if expr.shape() != rhs.shape() {
            return dim_err(format!(
                "equality '{name}': expression {:?} vs right-hand side {:?}",
                expr.shape(),
                rhs.shape()
            ));
        }
        if expr.nvars() > self.vars.len() {
            return invalid(format!("equality '{name}' references undeclared variables"));
        }
        self.equalities.push(Equality {
            name: name.to_string(),
            expr: &expr - rhs,
        });
        Ok(())
    }

    /// Introduce `t >= ||expr||_F` through an arrow LMI and return `t`.
    pub fn norm_bound(&mut self, name: &str, expr: &Affine) -> Result<Affine> {
        let t = self.scalar(&format!("{name}_t"));
        let te = self.expr(t);
        let v = expr.vec();
        let nv = self.vars.len();
        let aug = linalg::hstack(&[v.constant_part(), &v.jacobian_padded(nv)])?;
        let basis = linalg::range_basis(&aug, 1e-13);
        let k = basis.ncols();
        let vr = v.lmul(&basis.transpose());
        let lmi = Affine::blocks(&[
            vec![te.clone(), vr.transpose()],
            vec![vr, te.times_matrix(&Mat::identity(k, k))],
        ])?;
        self.psd(&format!("{name}_epigraph"), lmi)?;
        Ok(te)
    }

    pub fn solve(&self, settings: &SdpSettings) -> Result<SdpSolution> {
        solve_sdp(self, settings)
    }
}

/// Solve `p` to the tolerances in `settings`.
pub fn solve_sdp(p: &SdpProblem, settings: &SdpSettings) -> Result<SdpSolution> {
    if !(settings.feas_tol > 0.0 && settings.gap_tol > 0.0 && settings.strict_eps >= 0.0) {
        return invalid("solver tolerances must be positive");
    }
    let nv = p.vars.len();
    let obj = p.objective.clone().unwrap_or_else(|| Affine::zeros(1, 1));
    let b_y = DVector::from_iterator(nv, obj.jacobian_padded(nv).row(0).iter().copied());

    let finish = |status: SdpStatus, y: DVector<f64>, gap: f64, iters: usize, diag: String| {
        let violation = constraint_violation(p, &y, settings.strict_eps);
        let objective = obj.eval(&y)[(0, 0)];
        let (status, diagnostic) = if status == SdpStatus::Optimal && violation > settings.feas_tol {
            (
                SdpStatus::NumericFailure,
                format!("constraint violation {violation:.2e} above tolerance; {diag}"),
            )
        } else {
            (status, diag)
        };
        SdpSolution {
            status,
            y,
            objective,
            gap,
            violation,
            iterations: iters,
            diagnostic,
            vars: p.vars.clone(),
        }
    };

    // Equality elimination: y = y0 + Z z.
    let (y0, z_basis) = if p.equalities.is_empty() {
        (DVector::zeros(nv), Mat::identity(nv, nv))
    } else {
        let e = linalg::vstack(
            &p.equalities
                .iter()
                .map(|q| q.expr.vec().jacobian_padded(nv))
                .collect::<Vec<_>>()
                .iter()
                .collect::<Vec<_>>(),
        )?;
        let f_parts: Vec<Mat> = p
            .equalities
            .iter()
            .map(|q| -q.expr.vec().constant_part())
            .collect();
        let f = linalg::vstack(&f_parts.iter().collect::<Vec<_>>())?;
        let y0 = linalg::lstsq_tol(&e, &f, 1e-13)?;
        let res = (&e * &y0 - &f).norm();
        let scale = e.norm() * y0.norm() + f.norm() + f64::MIN_POSITIVE;
        if res > 1e-8 * scale {
            let names: Vec<&str> = p.equalities.iter().map(|q| q.name.as_str()).collect();
            return Ok(finish(
                SdpStatus::Infeasible,
                DVector::from_column_slice(y0.as_slice()),
                f64::NAN,
                0,
                format!("equality constraints {names:?} are inconsistent (residual {res:.2e})"),
            ));
        }
        (
            DVector::from_column_slice(y0.as_slice()),
            linalg::null_space_basis(&e, 1e-12)?,
        )
    };
    let nz = z_basis.ncols();

    // LMI data in z.
    struct Reduced {
        c: Mat,
        jac: Mat,
        n: usize,
    }
    let mut reduced = Vec::with_capacity(p.lmis.len());
    for l in &p.lmis {
        let n = l.expr.shape().0;
        let jac_y = l.expr.jacobian_padded(nv);
        let mut c = l.expr.eval(&y0);
        if l.strict {
            for i in 0..n {
                c[(i, i)] -= settings.strict_eps;
            }
        }
        reduced.push(Reduced {
            c: linalg::symmetrize(&c),
            jac: &jac_y * &z_basis,
            n,
        });
    }

    // Restrict z to directions some LMI depends on.
    let b_z = z_basis.transpose() * &b_y;
    let stacked = if reduced.is_empty() {
        Mat::zeros(0, nz)
    } else {
        linalg::vstack(&reduced.iter().map(|r| &r.jac).collect::<Vec<_>>())?
    };
    let r_basis = if nz == 0 || stacked.nrows() == 0 {
        Mat::zeros(nz, 0)
    } else {
        linalg::row_space_basis(&stacked, 1e-11)
    };
    let b_w = r_basis.transpose() * &b_z;
    let b_lost = (&b_z - &r_basis * &b_w).norm();
    if b_lost > 1e-9 * b_z.norm().max(f64::MIN_POSITIVE) && b_lost > 1e-14 {
        return Ok(finish(
            SdpStatus::NumericFailure,
            y0,
            f64::NAN,
            0,
            "objective unbounded: it increases along a direction no constraint restricts".into(),
        ));
    }
    let nw = r_basis.ncols();

    // Blocks in solver form S = C - sum w_j A_j, dropping constant ones.
    let mut blocks = Vec::new();
    for (k, r) in reduced.iter().enumerate() {
        let jac_w = &r.jac * &r_basis;
        let a: Vec<Mat> = (0..nw)
            .map(|j| -Mat::from_column_slice(r.n, r.n, jac_w.column(j).as_slice()))
            .collect();
        let amax = a.iter().map(|m| m.norm()).fold(0.0, f64::max);
        if amax <= 1e-14 * r.c.norm().max(1.0) {
            let lam = linalg::min_sym_eigenvalue(&r.c);
            if lam < -settings.feas_tol * r.c.norm().max(1.0) {
                return Ok(finish(
                    SdpStatus::Infeasible,
                    y0,
                    f64::NAN,
                    0,
                    format!(
                        "LMI '{}' is fixed by the equalities and has eigenvalue {lam:.3e}",
                        p.lmis[k].name
                    ),
                ));
            }
            continue;
        }
        let s = 1.0 / amax;
        blocks.push(IpmBlock {
            c: &r.c * s,
            a: a.into_iter().map(|m| m * s).collect(),
        });
    }

    if nw == 0 || blocks.is_empty() {
        return Ok(finish(SdpStatus::Optimal, y0, 0.0, 0, "no free variables".into()));
    }

    // Column scaling.
    let col_scale: Vec<f64> = (0..nw)
        .map(|j| {
            let s2: f64 = blocks.iter().map(|b| b.a[j].norm_squared()).sum();
            if s2 > 0.0 {
                1.0 / s2.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    for blk in &mut blocks {
        for (j, a) in blk.a.iter_mut().enumerate() {
            *a *= col_scale[j];
        }
    }
    let mut b = DVector::from_fn(nw, |j, _| b_w[j] * col_scale[j]);
    let bn = b.norm();
    if bn > 0.0 {
        b /= bn;
    }

    let out = interior_point(&blocks, &b, settings);
    let w = DVector::from_fn(nw, |j, _| out.w[j] * col_scale[j]);
    let y = &y0 + &z_basis * (&r_basis * w);
    let status = match out.status {
        IpmStatus::Converged => SdpStatus::Optimal,
        IpmStatus::Infeasible => SdpStatus::Infeasible,
        IpmStatus::Unbounded | IpmStatus::Stalled => SdpStatus::NumericFailure,
    };
    Ok(finish(status, y, out.gap, out.iterations, out.note))
}

fn constraint_violation(p: &SdpProblem, y: &DVector<f64>, eps: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for l in &p.lmis {
        let f = l.expr.eval(y);
        let lam = linalg::min_sym_eigenvalue(&f) - if l.strict { eps } else { 0.0 };
        let scale = l.expr.magnitude().max(1.0);
        worst = worst.max((-lam).max(0.0) / scale);
    }
    for q in &p.equalities {
        let r = q.expr.eval(y);
        let scale = q.expr.magnitude().max(1.0);
        worst = worst.max(r.amax() / scale);
    }
    worst
}

struct IpmBlock {
    c: Mat,
    a: Vec<Mat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum IpmStatus {
    Converged,
    Infeasible,
    Unbounded,
    Stalled,
}

struct IpmOutcome {
    status: IpmStatus,
    w: DVector<f64>,
    iterations: usize,
    gap: f64,
    note: String,
}

struct Scaling {
    g: Mat,
    ginv: Mat,
    w: Mat,
    d: DVector<f64>,
    lx: Mat,
    ls: Mat,
}

fn nt_scaling(x: &Mat, s: &Mat) -> Option<Scaling> {
    let lx = Cholesky::new(x.clone())?.l();
    let ls = Cholesky::new(s.clone())?.l();
    let svd = (ls.transpose() * &lx).svd(false, true);
    let v = svd.v_t?.transpose();
    let d = svd.singular_values;
    if d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return None;
    }
    let n = d.len();
    let dm = Mat::from_fn(n, n, |i, j| if i == j { d[i].powf(-0.5) } else { 0.0 });
    let dp = Mat::from_fn(n, n, |i, j| if i == j { d[i].sqrt() } else { 0.0 });
    let g = &lx * &v * dm;
    let lx_inv = lx.clone().solve_lower_triangular(&Mat::identity(n, n))?;
    let ginv = dp * v.transpose() * lx_inv;
    let w = &g * g.transpose();
    Some(Scaling { g, ginv, w, d, lx, ls })
}

/// Largest `a` with `L L^T + a*dx ⪰ 0`, given the Cholesky factor `L`.
fn max_step(l: &Mat, dx: &Mat) -> f64 {
    let n = l.nrows();
    let t = match l.clone().solve_lower_triangular(dx) {
        Some(t) => t,
        None => return 0.0,
    };
    let t = match l.clone().solve_lower_triangular(&t.transpose()) {
        Some(t) => t,
        None => return 0.0,
    };
    if n == 0 {
        return f64::INFINITY;
    }
    let lam = SymmetricEigen::new(linalg::symmetrize(&t))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if lam >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lam
    }
}

enum SchurFactor {
    Chol(Cholesky<f64, nalgebra::Dyn>),
    Lu(LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl SchurFactor {
    fn solve(&self, r: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            SchurFactor::Chol(c) => Some(c.solve(r)),
            SchurFactor::Lu(l) => l.solve(r),
        }
    }
}

fn interior_point(blocks: &[IpmBlock], b: &DVector<f64>, st: &SdpSettings) -> IpmOutcome {
    let p = b.len();
    let ntot: usize = blocks.iter().map(|k| k.c.nrows()).sum();
    let bnorm = b.norm();
    let cnorm = blocks.iter().map(|k| k.c.norm_squared()).sum::<f64>().sqrt();

    let mut x: Vec<Mat> = Vec::with_capacity(blocks.len());
    let mut s: Vec<Mat> = Vec::with_capacity(blocks.len());
    for blk in blocks {
        let n = blk.c.nrows();
        let sq = (n as f64).sqrt();
        let xi = blk
            .a
            .iter()
            .zip(b.iter())
            .map(|(a, bj)| sq * (1.0 + bj.abs()) / (1.0 + a.norm()))
            .fold(10.0_f64.max(sq), f64::max);
        let eta = blk
            .a
            .iter()
            .map(|a| a.norm())
            .fold(10.0_f64.max(sq).max(blk.c.norm()), f64::max);
        x.push(Mat::identity(n, n) * xi);
        s.push(Mat::identity(n, n) * eta);
    }
    let mut w = DVector::zeros(p);

    let a_of = |xs: &[Mat]| -> DVector<f64> {
        DVector::from_fn(p, |j, _| blocks.iter().zip(xs).map(|(blk, xk)| blk.a[j].dot(xk)).sum())
    };
    let at_of = |k: usize, v: &DVector<f64>| -> Mat {
        let n = blocks[k].c.nrows();
        let mut m = Mat::zeros(n, n);
        for (j, a) in blocks[k].a.iter().enumerate() {
            if v[j] != 0.0 {
                m += a * v[j];
            }
        }
        m
    };

    let mut best: Option<(f64, DVector<f64>, f64, usize)> = None;
    let mut fallback: Option<(f64, DVector<f64>, f64, usize)> = None;
    let mut last_gap = f64::NAN;
    let mut note = String::new();
    let mut it = 0;
    while it < st.max_iters {
        let ax = a_of(&x);
        let rp = b - &ax;
        let rd: Vec<Mat> = (0..blocks.len())
            .map(|k| &blocks[k].c - &s[k] - at_of(k, &w))
            .collect();
        let pobj: f64 = blocks.iter().zip(&x).map(|(blk, xk)| blk.c.dot(xk)).sum();
        let dobj = b.dot(&w);
        let xs: f64 = x.iter().zip(&s).map(|(xk, sk)| xk.dot(sk)).sum();
        let mu = xs / ntot as f64;
        let pinf = rp.norm() / (1.0 + bnorm);
        let dinf = rd.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt() / (1.0 + cnorm);
        let gap = xs.max((pobj - dobj).abs()) / (1.0 + pobj.abs() + dobj.abs());
        last_gap = gap;

        let merit = (pinf / st.feas_tol)
            .max(dinf / st.feas_tol)
            .max(gap / st.gap_tol);
        if merit <= 1.0 && best.as_ref().is_none_or(|(m, ..)| merit < *m) {
            best = Some((merit, w.clone(), gap, it));
        }
        if merit.is_finite() && fallback.as_ref().is_none_or(|(m, ..)| merit < 0.5 * *m) {
            fallback = Some((merit, w.clone(), gap, it));
        }
        // Stagnation: no halving of the merit for a while.
        if best.is_none() && fallback.as_ref().is_some_and(|(_, _, _, fi)| it >= fi + STALL_ITERS) {
            note = "no progress".into();
            break;
        }
        if let Some((m, _, _, bi)) = &best {
            if *m <= 1e-3 || it >= bi + 4 {
                break;
            }
        }

        // Farkas ray for infeasibility of the LMI side.
        if pobj < 0.0 {
            let trx: f64 = x.iter().map(|xk| xk.trace()).sum();
            if ax.norm() <= 1e-8 * (-pobj) && -pobj > 1e-10 * trx {
                return IpmOutcome {
                    status: IpmStatus::Infeasible,
                    w,
                    iterations: it,
                    gap,
                    note: format!(
                        "infeasibility certificate found (<C,X> = {pobj:.3e}, |A(X)| = {:.3e})",
                        ax.norm()
                    ),
                };
            }
        }
        if dobj > 1e12 && dinf < 1e-6 {
            return IpmOutcome {
                status: IpmStatus::Unbounded,
                w,
                iterations: it,
                gap,
                note: format!("objective appears unbounded (value {dobj:.3e})"),
            };
        }

        let scal: Option<Vec<Scaling>> = x.iter().zip(&s).map(|(xk, sk)| nt_scaling(xk, sk)).collect();
        let scal = match scal {
            Some(v) => v,
            None => {
                note = "lost positive definiteness of iterates".into();
                break;
            }
        };

        // Schur complement M_ij = sum_k <A_ki, W A_kj W>.
        let waw: Vec<Vec<Mat>> = blocks
            .iter()
            .zip(&scal)
            .map(|(blk, sc)| blk.a.iter().map(|a| &sc.w * a * &sc.w).collect())
            .collect();
        let mut m = Mat::zeros(p, p);
        for (k, blk) in blocks.iter().enumerate() {
            for i in 0..p {
                for j in i..p {
                    let v = blk.a[i].dot(&waw[k][j]);
                    m[(i, j)] += v;
                    if i != j {
                        m[(j, i)] += v;
                    }
                }
            }
        }
        let factor = match Cholesky::new(m.clone()) {
            Some(c) => SchurFactor::Chol(c),
            None => {
                let reg = 1e-14 * m.diagonal().amax().max(f64::MIN_POSITIVE);
                let mut mr = m.clone();
                for i in 0..p {
                    mr[(i, i)] += reg;
                }
                match Cholesky::new(mr.clone()) {
                    Some(c) => SchurFactor::Chol(c),
                    None => SchurFactor::Lu(LU::new(mr)),
                }
            }
        };

        let direction = |hmat: &[Mat]| -> Option<(DVector<f64>, Vec<Mat>, Vec<Mat>)> {
            let mut rhs = rp.clone();
            for (k, blk) in blocks.iter().enumerate() {
                let t = &hmat[k] - &scal[k].w * &rd[k] * &scal[k].w;
                for j in 0..p {
                    rhs[j] -= blk.a[j].dot(&t);
                }
            }
            let mut dw = factor.solve(&rhs)?;
            // Iterative refinement against the unregularized Schur matrix.
            for _ in 0..2 {
                let r = &rhs - &m * &dw;
                if r.norm() <= 1e-15 * rhs.norm() {
                    break;
                }
                dw += factor.solve(&r)?;
            }
            if dw.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let mut dxs = Vec::with_capacity(blocks.len());
            let mut dss = Vec::with_capacity(blocks.len());
            for k in 0..blocks.len() {
                let ds = &rd[k] - at_of(k, &dw);
                let dx = &hmat[k] - &scal[k].w * &ds * &scal[k].w;
                dxs.push(linalg::symmetrize(&dx));
                dss.push(linalg::symmetrize(&ds));
            }
            // Refine the full Newton system on the primal equation
            // A(dX) = rp; the W-scaled products lose accuracy near the boundary.
            for _ in 0..2 {
                let r = &rp - a_of(&dxs);
                if r.norm() <= 1e-14 * (1.0 + rp.norm()) {
                    break;
                }
                let dd = factor.solve(&r)?;
                for k in 0..blocks.len() {
                    let aty = at_of(k, &dd);
                    dxs[k] += linalg::symmetrize(&(&scal[k].w * &aty * &scal[k].w));
                    dss[k] -= aty;
                }
                dw += dd;
            }
            Some((dw, dxs, dss))
        };
        let steps = |dxs: &[Mat], dss: &[Mat]| -> (f64, f64) {
            let ap = scal
                .iter()
                .zip(dxs)
                .map(|(sc, dx)| max_step(&sc.lx, dx))
                .fold(f64::INFINITY, f64::min);
            let ad = scal
                .iter()
                .zip(dss)
                .map(|(sc, ds)| max_step(&sc.ls, ds))
                .fold(f64::INFINITY, f64::min);
            (ap, ad)
        };

        // Predictor.
        let h_aff: Vec<Mat> = x.iter().map(|xk| -xk).collect();
        let Some((_, dx_a, ds_a)) = direction(&h_aff) else {
            note = "Schur complement solve failed".into();
            break;
        };
        let (ap, ad) = steps(&dx_a, &ds_a);
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let xs_aff: f64 = (0..blocks.len())
            .map(|k| (&x[k] + &dx_a[k] * ap).dot(&(&s[k] + &ds_a[k] * ad)))
            .sum();
        let sigma = (xs_aff / xs).clamp(0.0, 1.0).powi(3);

        // Corrector with second-order term.
        let h_cor: Vec<Mat> = (0..blocks.len())
            .map(|k| {
                let sc = &scal[k];
                let n = sc.d.len();
                let dxt = &sc.ginv * &dx_a[k] * sc.ginv.transpose();
                let dst = sc.g.transpose() * &ds_a[k] * &sc.g;
                let so = &dxt * &dst + &dst * &dxt;
                let h = Mat::from_fn(n, n, |i, j| {
                    let target = if i == j { 2.0 * sigma * mu - 2.0 * sc.d[i] * sc.d[i] } else { 0.0 };
                    (target - so[(i, j)]) / (sc.d[i] + sc.d[j])
                });
                &sc.g * h * sc.g.transpose()
            })
            .collect();
        let Some((dw, dx, ds)) = direction(&h_cor) else {
            note = "Schur complement solve failed".into();
            break;
        };
        let (sp, sd) = steps(&dx, &ds);
        let gamma = 0.9 + 0.09 * ap.min(ad);
        let alpha_p = (gamma * sp).min(1.0);
        let alpha_d = (gamma * sd).min(1.0);
        if alpha_p < 1e-10 && alpha_d < 1e-10 {
            note = "step length collapsed".into();
            break;
        }
        for k in 0..blocks.len() {
            x[k] = linalg::symmetrize(&(&x[k] + &dx[k] * alpha_p));
            s[k] = linalg::symmetrize(&(&s[k] + &ds[k] * alpha_d));
        }
        w += dw * alpha_d;
        it += 1;
    }

    match best {
        Some((_, wb, gap, _)) => IpmOutcome {
            status: IpmStatus::Converged,
            w: wb,
            iterations: it,
            gap,
            note: "converged".into(),
        },
        None if fallback.as_ref().is_some_and(|(m, ..)| *m <= RELAXED_MERIT) => {
            let (merit, wb, gap, _) = fallback.expect("checked");
            IpmOutcome {
                status: IpmStatus::Converged,
                w: wb,
                iterations: it,
                gap,
                note: format!(
                    "converged to reduced accuracy ({merit:.1e} x tolerance, {})",
                    if note.is_empty() { "iteration limit" } else { note.as_str() }
                ),
            }
        }
        None => IpmOutcome {
            status: IpmStatus::Stalled,
            w,
            iterations: it,
            gap: last_gap,
            note: if note.is_empty() {
                format!("iteration limit {} reached", st.max_iters)
            } else {
                note
            },
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_box() {
        let mut p = SdpProblem::new();
        let v = p.scalar("p");
        let e = p.expr(v);
        p.psd("lower", e.clone()).unwrap();
        p.psd("upper", &Affine::constant(Mat::identity(1, 1)) - &e).unwrap();
        p.maximize(e).unwrap();
        let sol = p.solve(&SdpSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert_relative_eq!(sol.value(v)[(0, 0)], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn trace_maximization_hits_identity() {
        let mut p = SdpProblem::new();
        let v = p.symmetric("P", 2);
        let e = p.expr(v);
        p.psd("P", e.clone()).unwrap();
        p.psd("I-P", &Affine::constant(Mat::identity(2, 2)) - &e).unwrap();
        p.maximize(e.trace()).unwrap();
        let sol = p.solve(&SdpSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert_relative_eq!(sol.value(v), Mat::identity(2, 2), epsilon = 1e-8);
        assert!(sol.gap <= 1e-9);
    }

    #[test]
    fn infeasible_pair_is_detected() {
        let mut p = SdpProblem::new();
        let v = p.symmetric("P", 2);
        let e = p.expr(v);
        p.psd("P>=2I", &e - &(Mat::identity(2, 2) * 2.0)).unwrap();
        p.psd("P<=I", &Affine::constant(Mat::identity(2, 2)) - &e).unwrap();
        let sol = p.solve(&SdpSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn unbounded_objective_is_numeric_failure() {
        let mut p = SdpProblem::new();
        let v = p.scalar("p");
        let e = p.expr(v);
        p.psd("p>=0", e.clone()).unwrap();
        p.maximize(e).unwrap();
        let sol = p.solve(&SdpSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::NumericFailure);
    }

    #[test]
    fn equalities_and_norm_epigraph() {
        // minimize ||x - (3,0)|| s.t. x1 = x2: optimum (1.5, 1.5), value 1.5*sqrt(2).
        let mut p = SdpProblem::new();
        let v = p.full("x", 2, 1);
        let e = p.expr(v);
        p.equal("x1=x2", e.lmul(&Mat::from_row_slice(1, 2, &[1.0, -1.0])), &Mat::zeros(1, 1))
            .unwrap();
        let t = p
            .norm_bound("dist", &(&e - &Mat::from_column_slice(2, 1, &[3.0, 0.0])))
            .unwrap();
        p.minimize(t).unwrap();
        let sol = p.solve(&SdpSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let x = sol.value(v);
        assert_relative_eq!(x[0], 1.5, epsilon = 1e-7);
        assert_relative_eq!(x[1], 1.5, epsilon = 1e-7);
        assert_relative_eq!(-sol.objective, 1.5 * 2f64.sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let mut p = SdpProblem::new();
        let v = p.scalar("a");
        let e = p.expr(v);
        p.equal("a=1", e.clone(), &Mat::identity(1, 1)).unwrap();
        p.equal("a=2", e.clone(), &(Mat::identity(1, 1) * 2.0)).unwrap();
        p.psd("a>=0", e).unwrap();
        assert_eq!(p.solve(&SdpSettings::default()).unwrap().status, SdpStatus::Infeasible);
    }

    #[test]
    fn rejects_nonsymmetric_lmi_and_bad_shapes() {
        let mut p = SdpProblem::new();
        let v = p.full("G", 2, 2);
        let e = p.expr(v);
        assert!(matches!(p.psd("G", e.clone()), Err(Error::Validation(_))));
        assert!(matches!(p.psd("wide", Affine::zeros(1, 2)), Err(Error::Dimension(_))));
        assert!(matches!(p.maximize(e), Err(Error::Dimension(_))));
    }

    #[test]
    fn strict_inequality_keeps_margin() {
        // minimize p s.t. p > 0: optimum sits at the strictness margin.
        let mut p = SdpProblem::new();
        let v = p.scalar("p");
        let e = p.expr(v);
        p.pd("p>0", e.clone()).unwrap();
        p.minimize(e).unwrap();
        let st = SdpSettings::default();
        let sol = p.solve(&st).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let pv = sol.value(v)[(0, 0)];
        assert!(pv >= st.strict_eps * (1.0 - 1e-6));
        assert!(pv <= st.strict_eps + 1e-8);
    }

    #[test]
    fn env_override_parses() {
        // Only exercises parsing; the variable is not set in the test environment.
        let s = SdpSettings::from_env();
        assert!(s.feas_tol > 0.0);
    }
}
