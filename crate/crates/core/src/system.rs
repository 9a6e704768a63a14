//! Continuous-time LTI plants, piecewise-constant persistently exciting
//! inputs, and exact sampled simulation.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Error, Result};
use crate::linalg::{self, Mat};

/// `x' = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: Mat,
    b: Mat,
    label: String,
}

impl LtiSystem {
    pub fn new(a: Mat, b: Mat, label: impl Into<String>) -> Result<Self> {
        linalg::ensure_square(&a, "A")?;
        linalg::ensure_finite(&a, "A")?;
        linalg::ensure_finite(&b, "B")?;
        if a.nrows() == 0 || b.ncols() == 0 {
            return invalid("system needs at least one state and one input");
        }
        if b.nrows() != a.nrows() {
            return dim_err(format!("B has {} rows, A is {}x{}", b.nrows(), a.nrows(), a.ncols()));
        }
        Ok(LtiSystem {
            a,
            b,
            label: label.into(),
        })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn controllability_rank(&self) -> usize {
        linalg::rank(
            &linalg::controllability_matrix(&self.a, &self.b),
            linalg::DEFAULT_RANK_TOL,
        )
    }

    pub fn is_controllable(&self) -> bool {
        self.controllability_rank() == self.n()
    }

    /// `A - B K`.
    pub fn closed_loop(&self, k: &Mat) -> Result<Mat> {
        linalg::ensure_shape(k, self.m(), self.n(), "gain K")?;
        Ok(&self.a - &self.b * k)
    }
}

/// Linearized lateral aircraft model (sideslip, pitch rate, yaw rate, roll angle).
pub fn builtin_aircraft() -> LtiSystem {
    #[rustfmt::skip]
    let a = Mat::from_row_slice(4, 4, &[
        -0.493,   0.015, -1.0,    0.02,
        -61.176, -7.835,  4.991,  0.0,
        31.804,  -0.235, -0.994,  0.0,
        0.0,      1.0,   -0.015,  0.0,
    ]);
    #[rustfmt::skip]
    let b = Mat::from_row_slice(4, 2, &[
        -0.002,  0.002,
        8.246,   1.849,
        0.249,  -0.436,
        0.0,     0.0,
    ]);
    LtiSystem::new(a, b, "aircraft").expect("builtin model is well formed")
}

/// Look up a builtin model by name.
pub fn builtin(name: &str) -> Result<LtiSystem> {
    match name {
        "aircraft" => Ok(builtin_aircraft()),
        other => invalid(format!("unknown builtin system '{other}' (available: aircraft)")),
    }
}

/// Random controllable pair with entries uniform on `[-1, 1]`.
pub fn random_controllable(n: usize, m: usize, seed: u64) -> Result<LtiSystem> {
    if n == 0 || m == 0 {
        return invalid("random system needs n, m >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = Mat::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let c = linalg::controllability_matrix(&a, &b);
        if linalg::rank(&c, 1e-6) == n {
            return LtiSystem::new(a, b, format!("random-{n}x{m}-{seed}"));
        }
    }
    Err(Error::Numeric("could not draw a controllable pair".into()))
}

/// Depth-`depth` block Hankel matrix of the input levels (`m*depth` rows).
pub fn mosaic_hankel(mu: &Mat, depth: usize) -> Mat {
    let (m, n_seg) = mu.shape();
    if depth == 0 || depth > n_seg {
        return Mat::zeros(m * depth, 0);
    }
    let cols = n_seg - depth + 1;
    Mat::from_fn(m * depth, cols, |r, c| mu[(r % m, c + r / m)])
}

/// Smallest segment count for which a depth-`n+1` mosaic Hankel can have full row rank.
pub fn min_segments(m: usize, n: usize) -> usize {
    (m + 1) * (n + 1) - 1
}

/// Piecewise-constant input: level `mu[:, i]` on `[iT, (i+1)T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcpeInput {
    t_seg: f64,
    mu: Mat,
    order: usize,
}

impl PcpeInput {
    /// Validates that the depth-`order` mosaic Hankel of `mu` (m x N) has rank `m*order`.
    pub fn new(t_seg: f64, mu: Mat, order: usize) -> Result<Self> {
        if !(t_seg > 0.0 && t_seg.is_finite()) {
            return invalid(format!("segment length must be positive, got {t_seg}"));
        }
        linalg::ensure_finite(&mu, "input levels")?;
        let m = mu.nrows();
        if m == 0 || order == 0 {
            return invalid("input needs m >= 1 and order >= 1");
        }
        let h = mosaic_hankel(&mu, order);
        let r = linalg::rank(&h, linalg::DEFAULT_RANK_TOL);
        if r < m * order {
            return Err(Error::Excitation(format!(
                "input levels give mosaic Hankel rank {r} < {} required for order {order}",
                m * order
            )));
        }
        Ok(PcpeInput { t_seg, mu, order })
    }

    pub fn segment_length(&self) -> f64 {
        self.t_seg
    }

    pub fn segments(&self) -> usize {
        self.mu.ncols()
    }

    pub fn levels(&self) -> &Mat {
        &self.mu
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn m(&self) -> usize {
        self.mu.nrows()
    }
}

/// Draw levels uniform on `[-5, 5]` until the order-`n+1` rank condition holds.
pub fn generate_pcpe(m: usize, n: usize, n_seg: usize, t_seg: f64, seed: u64) -> Result<PcpeInput> {
    if m == 0 || n == 0 {
        return invalid("need m >= 1 and n >= 1");
    }
    let need = min_segments(m, n);
    if n_seg < need {
        return invalid(format!(
            "N = {n_seg} segments is too few: at least {need} are needed for m = {m}, n = {n}"
        ));
    }
    if !(t_seg > 0.0 && t_seg.is_finite()) {
        return invalid(format!("segment length must be positive, got {t_seg}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let mu = Mat::from_fn(m, n_seg, |_, _| rng.random_range(-5.0..=5.0));
        match PcpeInput::new(t_seg, mu, n + 1) {
            Ok(p) => return Ok(p),
            Err(Error::Excitation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Numeric("could not draw a persistently exciting input".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Added to the stored samples after exact simulation.
    Measurement,
    /// Piecewise-constant disturbance `w` entering the dynamics.
    Process,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Entrywise bound: samples are uniform on `[-bound, bound]`.
    pub bound: f64,
    pub seed: u64,
    /// Whether measurement noise also corrupts the derivative samples.
    pub corrupt_derivative: bool,
}

impl NoiseModel {
    pub fn measurement(bound: f64, seed: u64) -> Self {
        NoiseModel {
            kind: NoiseKind::Measurement,
            bound,
            seed,
            corrupt_derivative: true,
        }
    }

    pub fn process(bound: f64, seed: u64) -> Self {
        NoiseModel {
            kind: NoiseKind::Process,
            bound,
            seed,
            corrupt_derivative: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.bound >= 0.0 && self.bound.is_finite()) {
            return invalid(format!("noise bound must be finite and >= 0, got {}", self.bound));
        }
        Ok(())
    }
}

/// `q` equally spaced times on `[0, T]`.
pub fn uniform_grid(t_seg: f64, q: usize) -> Result<Vec<f64>> {
    if !(t_seg > 0.0) {
        return invalid("segment length must be positive");
    }
    match q {
        0 => invalid("grid needs at least one point"),
        1 => Ok(vec![0.0]),
        _ => Ok((0..q).map(|j| t_seg * j as f64 / (q - 1) as f64).collect()),
    }
}

fn validate_grid(grid: &[f64], t_seg: f64) -> Result<()> {
    if grid.is_empty() {
        return invalid("empty sample grid");
    }
    if grid.iter().any(|t| !(*t >= 0.0 && *t <= t_seg * (1.0 + 1e-12))) {
        return invalid(format!("sample grid must lie in [0, {t_seg}]"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("sample grid must be strictly increasing");
    }
    Ok(())
}

/// Samples of one experiment at times `t_j + i T`. Column `i*q + j` of each
/// signal matrix holds the sample of segment `i` at grid time `t_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryData {
    t_seg: f64,
    n_seg: usize,
    grid: Vec<f64>,
    u: Mat,
    x: Mat,
    xd: Mat,
    noise: Option<NoiseModel>,
}

impl TrajectoryData {
    pub fn from_parts(
        t_seg: f64,
        n_seg: usize,
        grid: Vec<f64>,
        u: Mat,
        x: Mat,
        xd: Mat,
        noise: Option<NoiseModel>,
    ) -> Result<Self> {
        if !(t_seg > 0.0) {
            return invalid("segment length must be positive");
        }
        validate_grid(&grid, t_seg)?;
        let cols = n_seg * grid.len();
        if u.ncols() != cols || x.ncols() != cols || xd.ncols() != cols {
            return dim_err(format!(
                "signals must have N*q = {cols} samples (u {}, x {}, xd {})",
                u.ncols(),
                x.ncols(),
                xd.ncols()
            ));
        }
        if xd.nrows() != x.nrows() {
            return dim_err("x and xd must have the same dimension");
        }
        for (m, name) in [(&u, "u"), (&x, "x"), (&xd, "xd")] {
            linalg::ensure_finite(m, name)?;
        }
        Ok(TrajectoryData {
            t_seg,
            n_seg,
            grid,
            u,
            x,
            xd,
            noise,
        })
    }

    pub fn segment_length(&self) -> f64 {
        self.t_seg
    }

    pub fn segments(&self) -> usize {
        self.n_seg
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn noise(&self) -> Option<&NoiseModel> {
        self.noise.as_ref()
    }

    pub fn column(&self, segment: usize, grid_index: usize) -> usize {
        segment * self.grid.len() + grid_index
    }

    /// Absolute time of a sample.
    pub fn time(&self, segment: usize, grid_index: usize) -> f64 {
        self.grid[grid_index] + segment as f64 * self.t_seg
    }

    pub fn u(&self) -> &Mat {
        &self.u
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn xd(&self) -> &Mat {
        &self.xd
    }
}

/// Exact sampled simulation, segment by segment, through the exponential of
/// the augmented matrix `[[A, B, I], [0, 0, 0], [0, 0, 0]]`.
pub fn simulate(
    sys: &LtiSystem,
    inp: &PcpeInput,
    x0: &DVector<f64>,
    grid: &[f64],
    noise: Option<&NoiseModel>,
) -> Result<TrajectoryData> {
    let (n, m) = (sys.n(), sys.m());
    if inp.m() != m {
        return dim_err(format!("input has {} channels, system has {m}", inp.m()));
    }
    if x0.len() != n {
        return dim_err(format!("x0 has length {}, system has {n} states", x0.len()));
    }
    let t_seg = inp.segment_length();
    validate_grid(grid, t_seg)?;
    if let Some(nm) = noise {
        nm.validate()?;
    }
    let n_seg = inp.segments();
    let q = grid.len();

    // Breakpoints within one segment; sample j sits at breakpoint index sample_at[j].
    let mut bps: Vec<f64> = Vec::with_capacity(q + 2);
    bps.push(0.0);
    for &t in grid {
        if t > *bps.last().expect("non-empty") {
            bps.push(t);
        }
    }
    if t_seg > *bps.last().expect("non-empty") * (1.0 + 1e-15) {
        bps.push(t_seg);
    }
    let sample_at: Vec<usize> = grid
        .iter()
        .map(|&t| bps.iter().position(|&b| b == t).expect("grid time is a breakpoint"))
        .collect();
    let n_int = bps.len() - 1;

    let na = n + m + n;
    let mut aug = Mat::zeros(na, na);
    aug.view_mut((0, 0), (n, n)).copy_from(sys.a());
    aug.view_mut((0, n), (n, m)).copy_from(sys.b());
    aug.view_mut((0, n + m), (n, n)).fill_with_identity();
    let props: Vec<(Mat, Mat, Mat)> = bps
        .windows(2)
        .map(|w| {
            let e = linalg::expm(&(&aug * (w[1] - w[0])))?;
            Ok((
                e.view((0, 0), (n, n)).into_owned(),
                e.view((0, n), (n, m)).into_owned(),
                e.view((0, n + m), (n, n)).into_owned(),
            ))
        })
        .collect::<Result<_>>()?;

    let mut rng = noise.map(|nm| ChaCha8Rng::seed_from_u64(nm.seed));
    let process_bound = noise
        .filter(|nm| nm.kind == NoiseKind::Process)
        .map_or(0.0, |nm| nm.bound);

    let cols = n_seg * q;
    let mut u = Mat::zeros(m, cols);
    let mut x = Mat::zeros(n, cols);
    let mut xd = Mat::zeros(n, cols);
    let mut state = x0.clone();
    for i in 0..n_seg {
        let mu = inp.levels().column(i).into_owned();
        let w: Vec<DVector<f64>> = (0..n_int)
            .map(|_| match (&mut rng, process_bound > 0.0) {
                (Some(r), true) => {
                    DVector::from_fn(n, |_, _| r.random_range(-process_bound..=process_bound))
                }
                _ => DVector::zeros(n),
            })
            .collect();
        let mut states = Vec::with_capacity(bps.len());
        states.push(state.clone());
        for (k, (phi, gu, gw)) in props.iter().enumerate() {
            let next = phi * states.last().expect("non-empty") + gu * &mu + gw * &w[k];
            states.push(next);
        }
        for (j, &bi) in sample_at.iter().enumerate() {
            let c = i * q + j;
            let xs = &states[bi];
            // Derivative uses the disturbance active on the interval starting here
            // (the last one at the segment end).
            let wk = &w[bi.min(n_int - 1)];
            u.set_column(c, &mu);
            x.set_column(c, xs);
            xd.set_column(c, &(sys.a() * xs + sys.b() * &mu + wk));
        }
        state = states.last().expect("non-empty").clone();
    }

    if let (Some(nm), Some(r)) = (noise, rng.as_mut()) {
        if nm.kind == NoiseKind::Measurement && nm.bound > 0.0 {
            let v = nm.bound;
            for c in 0..cols {
                for k in 0..n {
                    x[(k, c)] += r.random_range(-v..=v);
                }
                if nm.corrupt_derivative {
                    for k in 0..n {
                        xd[(k, c)] += r.random_range(-v..=v);
                    }
                }
            }
        }
    }

    TrajectoryData::from_parts(t_seg, n_seg, grid.to_vec(), u, x, xd, noise.copied())
}

/// Whether a segment length avoids the pathological values `2πk/|Im(λi - λj)|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TAdmissibility {
    pub admissible: bool,
    /// Distance from `T` to the nearest pathological value (infinite if none).
    pub margin: f64,
}

pub fn check_t_admissible(sys: &LtiSystem, t_seg: f64) -> Result<TAdmissibility> {
    if !(t_seg > 0.0) {
        return invalid("segment length must be positive");
    }
    let eigs = linalg::eigenvalues(sys.a())?;
    let mut margin = f64::INFINITY;
    for (i, li) in eigs.iter().enumerate() {
        for lj in &eigs[i + 1..] {
            let d = (li.im - lj.im).abs();
            if d <= 1e-12 {
                continue;
            }
            let period = 2.0 * std::f64::consts::PI / d;
            let k = ((t_seg / period).round() as i64).max(1);
            // Scan neighbouring multiples as well.
            for kk in (k - 1).max(1)..=k + 1 {
                margin = margin.min((t_seg - kk as f64 * period).abs());
            }
        }
    }
    Ok(TAdmissibility {
        admissible: margin > 1e-9,
        margin,
    })
}
