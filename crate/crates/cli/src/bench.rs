//! Monte Carlo comparison over noise levels.

use std::fs;
use std::path::Path;

use dbcontrol::datamat::{build_hankel, HankelTriple};
use dbcontrol::invopt::{collect_closedloop, round_trip, solve_inverse_oc, InverseOcSettings};
use dbcontrol::io;
use dbcontrol::poleplace::{placement_trial, PoleSpec, TrialSetup};
use dbcontrol::stability::wbar_estimate;
use dbcontrol::system::{generate_pcpe, simulate, uniform_grid, LtiSystem, NoiseModel};
use dbcontrol::trajref::{trajref_pipeline, ReferenceSet};
use dbcontrol::{convex::SdpSettings, Error, Mat, Result};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BenchParams, ExperimentConfig};
use crate::synth::tracking_error;

/// Inputs shared by every trial.
struct Bench<'a> {
    cfg: &'a ExperimentConfig,
    sys: LtiSystem,
    spec: Option<PoleSpec>,
    gain: Option<Mat>,
    refs: Option<ReferenceSet>,
    restarts: usize,
    settings: SdpSettings,
}

#[derive(Debug, Default)]
struct TrialOutcome {
    /// (metric, value or error message)
    values: Vec<(&'static str, std::result::Result<f64, String>)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub noise: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    pub failures: usize,
}

impl Bench<'_> {
    fn noisy_data(&self, noise: f64, seed: u64) -> Result<HankelTriple> {
        let e = &self.cfg.experiment;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = generate_pcpe(self.sys.m(), self.sys.n(), e.segments, e.segment_length, rng.random())?;
        let grid = uniform_grid(e.segment_length, e.grid_points)?;
        let x0 = DVector::from_fn(self.sys.n(), |_, _| rng.random_range(-5.0..=5.0));
        let nm = (noise > 0.0).then(|| NoiseModel::measurement(noise, rng.random()));
        build_hankel(&simulate(&self.sys, &inp, &x0, &grid, nm.as_ref())?)
    }

    fn trial(&self, noise: f64, seed: u64) -> TrialOutcome {
        let mut out = TrialOutcome::default();
        let e = &self.cfg.experiment;
        if let Some(spec) = &self.spec {
            let setup = TrialSetup {
                segments: e.segments,
                segment_length: e.segment_length,
                grid_points: e.grid_points,
                noise,
                restarts: self.restarts,
            };
            match placement_trial(&self.sys, spec, &setup, seed) {
                Ok(t) => {
                    out.values.push(("placement_error_robust", Ok(t.robust_error)));
                    out.values.push(("placement_error_baseline", Ok(t.baseline_error)));
                }
                Err(err) => {
                    out.values.push(("placement_error_robust", Err(err.to_string())));
                    out.values.push(("placement_error_baseline", Err(err.to_string())));
                }
            }
        }
        if self.gain.is_none() && self.refs.is_none() {
            return out;
        }
        let data = self.noisy_data(noise, seed ^ 0xda7a);
        if let Some(k) = &self.gain {
            let v = data.as_ref().map_err(|e| e.to_string()).and_then(|h| {
                self.invoc_deviation(h, k).map_err(|e| e.to_string())
            });
            out.values.push(("invoc_round_trip_max_entry", v));
        }
        if let Some(refs) = &self.refs {
            let v = data.as_ref().map_err(|e| e.to_string()).and_then(|h| {
                let wbar = if noise > 0.0 {
                    wbar_estimate(h, noise)
                } else {
                    Mat::zeros(h.n(), h.n())
                };
                trajref_pipeline(h, h.default_index(), refs, &wbar, &self.settings)
                    .map(|o| tracking_error(&self.sys, &o.gain.k, refs))
                    .map_err(|e| e.to_string())
            });
            out.values.push(("trajref_tracking_error", v));
        }
        out
    }

    fn invoc_deviation(&self, h: &HankelTriple, k: &Mat) -> Result<f64> {
        let n = self.sys.n();
        let x0s: Vec<DVector<f64>> = Mat::identity(n, n).column_iter().map(|c| c.into_owned()).collect();
        let bundle = collect_closedloop(&self.sys, k, &x0s, 0.1, 100)?;
        let j = h.default_index();
        let res = solve_inverse_oc(h, j, &bundle, &InverseOcSettings::default(), &self.settings)?;
        Ok(round_trip(h, j, &res, k, &self.settings)?.max_entry)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

/// Run all trials; rows come out ordered by noise level, then metric.
pub fn run_bench(cfg: &ExperimentConfig, bp: &BenchParams) -> Result<Vec<BenchRow>> {
    let bench = Bench {
        cfg,
        sys: cfg.load_system()?,
        spec: bp.poles.as_deref().map(io::read_pole_spec).transpose()?,
        gain: bp.gain.as_deref().map(io::read_matrix).transpose()?,
        refs: bp.references.as_deref().map(io::read_reference_csv).transpose()?,
        restarts: bp.restarts,
        settings: cfg.sdp_settings(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.experiment.seed);
    let mut rows = Vec::new();
    for &noise in &bp.noise_levels {
        let seeds: Vec<u64> = (0..bp.trials).map(|_| rng.random()).collect();
        let outcomes: Vec<TrialOutcome> = seeds.par_iter().map(|&s| bench.trial(noise, s)).collect();
        let mut metrics: Vec<&'static str> = Vec::new();
        for o in &outcomes {
            for (m, _) in &o.values {
                if !metrics.contains(m) {
                    metrics.push(m);
                }
            }
        }
        for metric in metrics {
            let (ok, failed): (Vec<_>, Vec<_>) = outcomes
                .iter()
                .flat_map(|o| o.values.iter().filter(|(m, _)| *m == metric))
                .map(|(_, v)| v)
                .partition(|v| v.is_ok());
            let vals: Vec<f64> = ok.into_iter().map(|v| *v.as_ref().expect("partitioned")).collect();
            if let Some(Err(first)) = failed.first() {
                eprintln!("{metric} at noise {noise}: {} failed trials, first: {first}", failed.len());
            }
            let (mean, std) = mean_std(&vals);
            rows.push(BenchRow {
                noise,
                metric: metric.to_string(),
                mean,
                std,
                trials: bp.trials,
                failures: failed.len(),
            });
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>10}  {:<28} {:>14} {:>14} {:>7} {:>8}\n",
        "noise", "metric", "mean", "std", "trials", "failures"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>10.1e}  {:<28} {:>14.6e} {:>14.6e} {:>7} {:>8}\n",
            r.noise, r.metric, r.mean, r.std, r.trials, r.failures
        ));
    }
    s
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let bp = cfg
        .bench
        .as_ref()
        .ok_or_else(|| Error::Validation("config has no [bench] section".into()))?;
    let rows = run_bench(cfg, bp)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("bench.csv")).map_err(|e| Error::Parse(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    print!("{}", format_table(&rows));
    Ok(0)
}
