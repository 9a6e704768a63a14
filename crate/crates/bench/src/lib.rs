//! Fixtures shared by the synthesis benchmarks.

use dbcontrol::datamat::{build_hankel, HankelTriple};
use dbcontrol::system::{builtin_aircraft, generate_pcpe, simulate, uniform_grid, LtiSystem, NoiseModel};
use dbcontrol::trajref::ReferenceSet;
use dbcontrol::{linalg, Mat};
use nalgebra::DVector;

/// Aircraft experiment with 15 segments of 0.5 s sampled at three grid times.
pub fn aircraft_data(seed: u64, noise: f64) -> (LtiSystem, HankelTriple) {
    let sys = builtin_aircraft();
    let inp = generate_pcpe(sys.m(), sys.n(), 15, 0.5, seed).expect("aircraft input");
    let grid = uniform_grid(0.5, 3).expect("grid");
    let x0 = DVector::from_element(sys.n(), 0.5);
    let nm = (noise > 0.0).then(|| NoiseModel::measurement(noise, seed + 1));
    let data = simulate(&sys, &inp, &x0, &grid, nm.as_ref()).expect("simulation");
    (sys, build_hankel(&data).expect("hankel"))
}

/// Closed-loop references of `A - B K` from the unit initial states, sampled at the data grid.
pub fn references(sys: &LtiSystem, k: &Mat, times: &[f64]) -> ReferenceSet {
    let f = sys.closed_loop(k).expect("gain shape");
    let x0 = Mat::identity(sys.n(), sys.n());
    let xi: Vec<Mat> = times
        .iter()
        .map(|&t| linalg::expm(&(&f * t)).expect("expm") * &x0)
        .collect();
    let xid = xi.iter().map(|x| &f * x).collect();
    ReferenceSet::new(times.to_vec(), xi, Some(xid)).expect("references")
}

#[rustfmt::skip]
pub fn k1() -> Mat {
    Mat::from_row_slice(2, 4, &[
        -0.8653, 0.2988,  0.3105, 0.7025,
        -0.1511, 0.0537, -0.1108, 0.0930,
    ])
}
