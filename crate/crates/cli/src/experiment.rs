//! Acquiring experiment data from a configuration.

use dbcontrol::datamat::{build_hankel, HankelTriple};
use dbcontrol::io;
use dbcontrol::system::{generate_pcpe, min_segments, simulate, uniform_grid, LtiSystem, PcpeInput, TrajectoryData};
use dbcontrol::{Error, Mat, Result};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;

pub struct Experiment {
    pub data: TrajectoryData,
    pub hankel: HankelTriple,
}

impl Experiment {
    pub fn grid_index(&self, cfg: &ExperimentConfig) -> Result<usize> {
        let j = cfg.experiment.grid_index.unwrap_or(self.hankel.default_index());
        self.hankel.check_index(j)?;
        Ok(j)
    }
}

/// Input levels for `cfg`. Too short an experiment still gets levels (only
/// checked for order one) so the excitation report can show what is missing.
fn input(cfg: &ExperimentConfig, sys: &LtiSystem) -> Result<PcpeInput> {
    let e = &cfg.experiment;
    if e.segments >= min_segments(sys.m(), sys.n()) {
        return generate_pcpe(sys.m(), sys.n(), e.segments, e.segment_length, e.seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
    let mu = Mat::from_fn(sys.m(), e.segments, |_, _| rng.random_range(-5.0..=5.0));
    PcpeInput::new(e.segment_length, mu, 1)
}

fn initial_state(cfg: &ExperimentConfig, n: usize) -> Result<DVector<f64>> {
    match &cfg.experiment.x0 {
        Some(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::Dimension(format!("experiment.x0 has {} entries, system has {n} states", v.len()))),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.experiment.seed.wrapping_add(0x5eed));
            Ok(DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0)))
        }
    }
}

/// Recorded data if configured, otherwise a fresh simulation of `sys`.
pub fn acquire(cfg: &ExperimentConfig, sys: &LtiSystem) -> Result<Experiment> {
    let e = &cfg.experiment;
    let data = match &e.data {
        Some(path) => io::read_trajectory_csv(path, e.segment_length)?,
        None => {
            let inp = input(cfg, sys)?;
            let grid = uniform_grid(e.segment_length, e.grid_points)?;
            simulate(sys, &inp, &initial_state(cfg, sys.n())?, &grid, cfg.noise_model().as_ref())?
        }
    };
    if data.n() != sys.n() || data.m() != sys.m() {
        return Err(Error::Dimension(format!(
            "data has n = {}, m = {}; system has n = {}, m = {}",
            data.n(),
            data.m(),
            sys.n(),
            sys.m()
        )));
    }
    let hankel = build_hankel(&data)?;
    Ok(Experiment { data, hankel })
}
