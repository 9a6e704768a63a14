//! Affine matrix expressions over a flat vector of scalar decision variables.
//!
//! An [`Affine`] stores `vec(E(y)) = vec(c0) + J·y` with column-major `vec`,
//! so every linear operation is a small dense matrix product on `J`.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DVector;

use crate::error::{dim_err, invalid, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockShape {
    Symmetric(usize),
    Full(usize, usize),
}

impl BlockShape {
    pub fn rows(&self) -> usize {
        match *self {
            BlockShape::Symmetric(n) => n,
            BlockShape::Full(r, _) => r,
        }
    }

    pub fn cols(&self) -> usize {
        match *self {
            BlockShape::Symmetric(n) => n,
            BlockShape::Full(_, c) => c,
        }
    }

    /// Number of free scalars in the block.
    pub fn dof(&self) -> usize {
        match *self {
            BlockShape::Symmetric(n) => n * (n + 1) / 2,
            BlockShape::Full(r, c) => r * c,
        }
    }
}

/// Handle to a matrix-valued decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatVar {
    id: usize,
    offset: usize,
    shape: BlockShape,
}

impl MatVar {
    pub fn shape(&self) -> BlockShape {
        self.shape
    }
}

/// Registry of named variable blocks laid out contiguously in `y`.
#[derive(Debug, Clone, Default)]
pub struct VarSpace {
    names: Vec<String>,
    vars: Vec<MatVar>,
    len: usize,
}

impl VarSpace {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, shape: BlockShape) -> MatVar {
        let v = MatVar {
            id: self.vars.len(),
            offset: self.len,
            shape,
        };
        self.len += shape.dof();
        self.names.push(name.to_string());
        self.vars.push(v);
        v
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> MatVar {
        self.push(name, BlockShape::Symmetric(n))
    }

    pub fn full(&mut self, name: &str, rows: usize, cols: usize) -> MatVar {
        self.push(name, BlockShape::Full(rows, cols))
    }

    pub fn scalar(&mut self, name: &str) -> MatVar {
        self.push(name, BlockShape::Full(1, 1))
    }

    /// Total number of scalar unknowns.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn name(&self, v: MatVar) -> &str {
        &self.names[v.id]
    }

    fn check(&self, v: MatVar) {
        assert!(
            self.vars.get(v.id) == Some(&v),
            "variable handle does not belong to this space"
        );
    }

    /// The variable itself as an affine expression.
    pub fn expr(&self, v: MatVar) -> Affine {
        self.check(v);
        let (r, c) = (v.shape.rows(), v.shape.cols());
        let mut jac = Mat::zeros(r * c, self.len);
        match v.shape {
            BlockShape::Full(..) => {
                for k in 0..r * c {
                    jac[(k, v.offset + k)] = 1.0;
                }
            }
            BlockShape::Symmetric(n) => {
                let mut k = v.offset;
                for j in 0..n {
                    for i in j..n {
                        jac[(i + j * n, k)] = 1.0;
                        jac[(j + i * n, k)] = 1.0;
                        k += 1;
                    }
                }
            }
        }
        Affine {
            rows: r,
            cols: c,
            c0: Mat::zeros(r, c),
            jac,
        }
    }

    /// Extract the value of `v` from a solution vector.
    pub fn value(&self, v: MatVar, y: &DVector<f64>) -> Mat {
        self.check(v);
        let (r, c) = (v.shape.rows(), v.shape.cols());
        match v.shape {
            BlockShape::Full(..) => Mat::from_column_slice(r, c, &y.as_slice()[v.offset..v.offset + r * c]),
            BlockShape::Symmetric(n) => {
                let mut m = Mat::zeros(n, n);
                let mut k = v.offset;
                for j in 0..n {
                    for i in j..n {
                        m[(i, j)] = y[k];
                        m[(j, i)] = y[k];
                        k += 1;
                    }
                }
                m
            }
        }
    }
}

/// `E(y) = c0 + sum_k y_k * J[:, k]` reshaped to `rows x cols`.
#[derive(Debug, Clone)]
pub struct Affine {
    rows: usize,
    cols: usize,
    c0: Mat,
    jac: Mat,
}

impl Affine {
    pub fn constant(m: Mat) -> Self {
        let (rows, cols) = m.shape();
        Affine {
            rows,
            cols,
            jac: Mat::zeros(rows * cols, 0),
            c0: m,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Mat::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn constant_part(&self) -> &Mat {
        &self.c0
    }

    /// Jacobian of `vec(E)` with respect to `y`; may be narrower than the space.
    pub fn jacobian(&self) -> &Mat {
        &self.jac
    }

    pub fn nvars(&self) -> usize {
        self.jac.ncols()
    }

    /// Jacobian padded (or checked) to exactly `n` columns.
    pub fn jacobian_padded(&self, n: usize) -> Mat {
        assert!(self.jac.ncols() <= n, "expression references unknown variables");
        let mut j = Mat::zeros(self.jac.nrows(), n);
        j.columns_mut(0, self.jac.ncols()).copy_from(&self.jac);
        j
    }

    fn widened(&self, n: usize) -> Mat {
        if self.jac.ncols() == n {
            self.jac.clone()
        } else {
            self.jacobian_padded(n)
        }
    }

    pub fn eval(&self, y: &DVector<f64>) -> Mat {
        let k = self.jac.ncols();
        assert!(y.len() >= k, "solution vector shorter than expression");
        let v = &self.jac * y.rows(0, k);
        &self.c0 + Mat::from_column_slice(self.rows, self.cols, v.as_slice())
    }

    fn map_columns(&self, rows: usize, cols: usize, c0: Mat, f: impl Fn(&Mat) -> Mat) -> Affine {
        let mut jac = Mat::zeros(rows * cols, self.jac.ncols());
        for k in 0..self.jac.ncols() {
            let col = self.jac.column(k);
            if col.iter().all(|&x| x == 0.0) {
                continue;
            }
            let x = Mat::from_column_slice(self.rows, self.cols, col.as_slice());
            let y = f(&x);
            jac.column_mut(k).copy_from_slice(y.as_slice());
        }
        Affine { rows, cols, c0, jac }
    }

    /// `M * E`.
    pub fn lmul(&self, m: &Mat) -> Affine {
        assert_eq!(m.ncols(), self.rows, "lmul: inner dimensions differ");
        self.map_columns(m.nrows(), self.cols, m * &self.c0, |x| m * x)
    }

    /// `E * M`.
    pub fn rmul(&self, m: &Mat) -> Affine {
        assert_eq!(self.cols, m.nrows(), "rmul: inner dimensions differ");
        self.map_columns(self.rows, m.ncols(), &self.c0 * m, |x| x * m)
    }

    pub fn transpose(&self) -> Affine {
        self.map_columns(self.cols, self.rows, self.c0.transpose(), |x| x.transpose())
    }

    /// `(E + E^T) / 2`.
    pub fn sym(&self) -> Affine {
        (self + &self.transpose()) * 0.5
    }

    pub fn trace(&self) -> Affine {
        assert_eq!(self.rows, self.cols, "trace of non-square expression");
        let n = self.rows;
        let mut jac = Mat::zeros(1, self.jac.ncols());
        for i in 0..n {
            jac += self.jac.row(i + i * n);
        }
        Affine {
            rows: 1,
            cols: 1,
            c0: Mat::from_element(1, 1, self.c0.trace()),
            jac,
        }
    }

    /// Scalar expression times a constant matrix.
    pub fn times_matrix(&self, m: &Mat) -> Affine {
        assert_eq!(self.shape(), (1, 1), "times_matrix needs a scalar expression");
        let (r, c) = m.shape();
        let vm = DVector::from_column_slice(m.as_slice());
        let jac = &vm * &self.jac;
        Affine {
            rows: r,
            cols: c,
            c0: m * self.c0[(0, 0)],
            jac,
        }
    }

    pub fn vec(&self) -> Affine {
        Affine {
            rows: self.rows * self.cols,
            cols: 1,
            c0: Mat::from_column_slice(self.rows * self.cols, 1, self.c0.as_slice()),
            jac: self.jac.clone(),
        }
    }

    /// Assemble a block matrix; every row of blocks must share heights and
    /// every column of blocks must share widths.
    pub fn blocks(grid: &[Vec<Affine>]) -> Result<Affine> {
        if grid.is_empty() || grid[0].is_empty() {
            return invalid("empty block grid");
        }
        let ncol = grid[0].len();
        if grid.iter().any(|r| r.len() != ncol) {
            return dim_err("block grid rows have different lengths");
        }
        let heights: Vec<usize> = grid.iter().map(|r| r[0].rows).collect();
        let widths: Vec<usize> = grid[0].iter().map(|b| b.cols).collect();
        for (bi, row) in grid.iter().enumerate() {
            for (bj, b) in row.iter().enumerate() {
                if b.rows != heights[bi] || b.cols != widths[bj] {
                    return dim_err(format!(
                        "block ({bi},{bj}) is {}x{}, expected {}x{}",
                        b.rows, b.cols, heights[bi], widths[bj]
                    ));
                }
            }
        }
        let rows: usize = heights.iter().sum();
        let cols: usize = widths.iter().sum();
        let nv = grid.iter().flatten().map(|b| b.jac.ncols()).max().unwrap_or(0);
        let mut c0 = Mat::zeros(rows, cols);
        let mut jac = Mat::zeros(rows * cols, nv);
        let mut r0 = 0;
        for (bi, row) in grid.iter().enumerate() {
            let mut cc0 = 0;
            for (bj, b) in row.iter().enumerate() {
                c0.view_mut((r0, cc0), (b.rows, b.cols)).copy_from(&b.c0);
                for jj in 0..b.cols {
                    for ii in 0..b.rows {
                        let src = ii + jj * b.rows;
                        let dst = (r0 + ii) + (cc0 + jj) * rows;
                        for k in 0..b.jac.ncols() {
                            jac[(dst, k)] = b.jac[(src, k)];
                        }
                    }
                }
                cc0 += widths[bj];
            }
            r0 += heights[bi];
        }
        Ok(Affine { rows, cols, c0, jac })
    }

    /// Largest asymmetry of the constant part and Jacobian.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let t = self.transpose();
        let dc = (&self.c0 - &t.c0).amax();
        let dj = if self.jac.is_empty() { 0.0 } else { (&self.jac - &t.jac).amax() };
        dc.max(dj)
    }

    /// Scale of the coefficients, used for relative tolerances.
    pub fn magnitude(&self) -> f64 {
        self.c0.amax().max(if self.jac.is_empty() { 0.0 } else { self.jac.amax() })
    }
}

impl Add for &Affine {
    type Output = Affine;
    fn add(self, rhs: &Affine) -> Affine {
        assert_eq!(self.shape(), rhs.shape(), "add: shapes differ");
        let n = self.jac.ncols().max(rhs.jac.ncols());
        Affine {
            rows: self.rows,
            cols: self.cols,
            c0: &self.c0 + &rhs.c0,
            jac: self.widened(n) + rhs.widened(n),
        }
    }
}

impl Sub for &Affine {
    type Output = Affine;
    fn sub(self, rhs: &Affine) -> Affine {
        self + &(-rhs)
    }
}

impl Neg for &Affine {
    type Output = Affine;
    fn neg(self) -> Affine {
        self.clone() * -1.0
    }
}

impl Mul<f64> for Affine {
    type Output = Affine;
    fn mul(mut self, s: f64) -> Affine {
        self.c0 *= s;
        self.jac *= s;
        self
    }
}

impl Add<&Mat> for &Affine {
    type Output = Affine;
    fn add(self, rhs: &Mat) -> Affine {
        assert_eq!(self.shape(), rhs.shape(), "add: shapes differ");
        let mut out = self.clone();
        out.c0 += rhs;
        out
    }
}

impl Sub<&Mat> for &Affine {
    type Output = Affine;
    fn sub(self, rhs: &Mat) -> Affine {
        self + &(-rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmetric_variable_roundtrip() {
        let mut vs = VarSpace::new();
        let p = vs.symmetric("P", 3);
        assert_eq!(vs.len(), 6);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let e = vs.expr(p).eval(&y);
        assert_eq!(e, vs.value(p, &y));
        assert_eq!(e, e.transpose());
        assert_eq!(e[(1, 0)], 2.0);
        assert_eq!(e[(2, 2)], 6.0);
    }

    #[test]
    fn products_and_transpose_match_direct_evaluation() {
        let mut vs = VarSpace::new();
        let g = vs.full("G", 3, 2);
        let t = vs.scalar("t");
        let y = DVector::from_fn(vs.len(), |i, _| (i as f64 * 0.7).sin());
        let a = Mat::from_fn(2, 3, |i, j| (i + 2 * j) as f64 - 1.5);
        let b = Mat::from_fn(2, 4, |i, j| (i * j) as f64 + 0.25);
        let gv = vs.value(g, &y);
        let e = vs.expr(g).lmul(&a).rmul(&b);
        assert_relative_eq!(e.eval(&y), &a * &gv * &b, epsilon = 1e-12);
        assert_relative_eq!(e.transpose().eval(&y), (&a * &gv * &b).transpose(), epsilon = 1e-12);
        let tr = vs.expr(g).lmul(&a).trace();
        assert_relative_eq!(tr.eval(&y)[(0, 0)], (&a * &gv).trace(), epsilon = 1e-12);
        let ti = vs.expr(t).times_matrix(&Mat::identity(2, 2));
        assert_relative_eq!(ti.eval(&y), Mat::identity(2, 2) * y[6], epsilon = 1e-15);
    }

    #[test]
    fn block_assembly() {
        let mut vs = VarSpace::new();
        let p = vs.symmetric("P", 2);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let pe = vs.expr(p);
        let c = Affine::constant(Mat::from_element(2, 1, 9.0));
        let blk = Affine::blocks(&[
            vec![pe.clone(), c.clone()],
            vec![c.transpose(), Affine::zeros(1, 1)],
        ])
        .unwrap();
        let v = blk.eval(&y);
        assert_eq!(v.shape(), (3, 3));
        assert_eq!(v[(1, 1)], 3.0);
        assert_eq!(v[(2, 0)], 9.0);
        assert!(blk.asymmetry() == 0.0);
        assert!(Affine::blocks(&[vec![pe, Affine::zeros(1, 1)]]).is_err());
    }
}
