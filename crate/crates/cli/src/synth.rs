use std::fs;
use std::path::Path;
use std::time::Instant;

use dbcontrol::invopt::{collect_closedloop, round_trip, solve_inverse_oc, InverseOcSettings};
use dbcontrol::io;
use dbcontrol::lqr::{solve_lqr_data, verify_lqr, WeightPair};
use dbcontrol::poleplace::{place_poles_baseline, place_poles_robust, PoleSpec, RobustSettings};
use dbcontrol::stability::wbar_estimate;
use dbcontrol::system::LtiSystem;
use dbcontrol::trajref::trajref_pipeline;
use dbcontrol::{Error, Mat, Result};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{ExperimentConfig, Procedure, SynthParams};
use crate::experiment::{acquire, Experiment};
use crate::verify::{evaluate, VerifyReport};
use crate::{rows, write_json};

#[derive(Debug, Serialize)]
pub struct SynthReport {
    pub procedure: Procedure,
    pub method: String,
    pub grid_index: usize,
    pub k: Vec<Vec<f64>>,
    pub objective: Option<f64>,
    pub timing_seconds: f64,
    /// Procedure-specific residuals and certificates.
    pub details: Map<String, Value>,
    pub files: Vec<String>,
    pub checks: VerifyReport,
}

/// Matrix files to write next to the report.
struct Outputs(Vec<(&'static str, Mat)>);

impl Outputs {
    fn add(&mut self, name: &'static str, m: Mat) {
        self.0.push((name, m));
    }
}

fn weights(sp: &SynthParams, n: usize, m: usize) -> Result<WeightPair> {
    let q = match &sp.q {
        Some(p) => io::read_matrix(p)?,
        None => Mat::identity(n, n) * sp.q_scale,
    };
    let r = match &sp.r {
        Some(p) => io::read_matrix(p)?,
        None => Mat::identity(m, m) * sp.r_scale,
    };
    WeightPair::new(q, r)
}

fn initial_states(sp: &SynthParams, n: usize) -> Result<Vec<DVector<f64>>> {
    let x0 = match &sp.x0s {
        Some(p) => io::read_matrix(p)?,
        None => Mat::identity(n, n),
    };
    if x0.nrows() != n {
        return Err(Error::Dimension(format!("initial states have {} rows, system has {n} states", x0.nrows())));
    }
    Ok(x0.column_iter().map(|c| c.into_owned()).collect())
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let sp = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Validation("config has no [synth] section".into()))?;
    let sys = cfg.load_system()?;
    let exp = acquire(cfg, &sys)?;
    let j = exp.grid_index(cfg)?;
    let settings = cfg.sdp_settings();
    fs::create_dir_all(out)?;
    io::write_trajectory_csv(&out.join("data.csv"), &exp.data)?;

    let start = Instant::now();
    let mut files = Outputs(Vec::new());
    let mut details = Map::new();
    let mut spec: Option<PoleSpec> = None;
    let (k, method, objective) = match sp.procedure {
        Procedure::Lqr => {
            let w = weights(sp, sys.n(), sys.m())?;
            let res = solve_lqr_data(&exp.hankel, j, &w, &settings)?;
            let rep = verify_lqr(&sys, &res.k, &res.p, &w, 1e-6)?;
            details.insert("gamma_residual".into(), json!(res.gamma_residual));
            details.insert("are_residual".into(), json!(rep.are_residual));
            details.insert("gain_residual".into(), json!(rep.gain_residual));
            files.add("P.txt", res.p.clone());
            files.add("gamma.txt", res.gamma);
            let obj = res.p.trace();
            (res.k, "lqr".to_string(), Some(obj))
        }
        Procedure::Trajref => {
            let refs = io::read_reference_csv(sp.references.as_ref().expect("validated"))?;
            let wbar = if sp.vbar > 0.0 {
                wbar_estimate(&exp.hankel, sp.vbar)
            } else {
                Mat::zeros(sys.n(), sys.n())
            };
            let outc = trajref_pipeline(&exp.hankel, j, &refs, &wbar, &settings)?;
            details.insert("candidate_cost".into(), json!(outc.candidate.cost));
            details.insert("kbar".into(), json!(rows(&outc.candidate.kbar)));
            details.insert("beta".into(), json!(outc.gain.beta));
            details.insert("derivative_estimated".into(), json!(refs.derivative_estimated()));
            details.insert("tracking_error".into(), json!(tracking_error(&sys, &outc.gain.k, &refs)));
            files.add("kbar.txt", outc.candidate.kbar.clone());
            if let Some(p) = &outc.gain.p {
                files.add("P.txt", p.clone());
            }
            if let Some(l) = &outc.gain.l {
                files.add("L.txt", l.clone());
            }
            (outc.gain.k, "projection".to_string(), outc.gain.objective)
        }
        Procedure::Invoc => {
            let given = sp.gain.as_deref().map(io::read_matrix).transpose()?;
            let bundle = match (&sp.bundle, &given) {
                (Some(p), _) => io::read_bundle_csv(p)?,
                (None, Some(k)) => collect_closedloop(&sys, k, &initial_states(sp, sys.n())?, sp.spacing, sp.max_samples)?,
                (None, None) => unreachable!("validated"),
            };
            fs::write(out.join("bundle.csv"), io::format_bundle_csv(&bundle)?)?;
            let res = solve_inverse_oc(&exp.hankel, j, &bundle, &InverseOcSettings::default(), &settings)?;
            details.insert("raw_residual".into(), json!(res.raw_residual));
            details.insert("lyapunov_residual".into(), json!(res.lyapunov_residual));
            details.insert("q".into(), json!(rows(&res.q)));
            details.insert("r".into(), json!(rows(&res.r)));
            files.add("Q.txt", res.q.clone());
            files.add("R.txt", res.r.clone());
            files.add("P.txt", res.p.clone());
            files.add("P1.txt", res.p1.clone());
            let k = match &given {
                Some(k) => {
                    let rt = round_trip(&exp.hankel, j, &res, k, &settings)?;
                    details.insert("round_trip_frobenius".into(), json!(rt.frobenius));
                    details.insert("round_trip_max_entry".into(), json!(rt.max_entry));
                    rt.k
                }
                None => solve_lqr_data(&exp.hankel, j, &res.weights()?, &settings)?.k,
            };
            (k, "inverse-oc".to_string(), Some(res.residual))
        }
        Procedure::Poles => {
            let s = io::read_pole_spec(sp.poles.as_ref().expect("validated"))?;
            let g = if sp.baseline {
                place_poles_baseline(&exp.hankel, j, &s, cfg.experiment.seed)?
            } else {
                let st = RobustSettings {
                    restarts: sp.restarts,
                    seed: cfg.experiment.seed,
                    ..Default::default()
                };
                place_poles_robust(&exp.hankel, j, &s, &st)?
            };
            spec = Some(s);
            let method = serde_json::to_value(g.method)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            (g.k, method, g.objective)
        }
    };
    let elapsed = start.elapsed().as_secs_f64();

    // Checks run on the gain exactly as written to disk.
    let k = io::parse_matrix(&io::format_matrix(&k))?;
    io::write_matrix(&out.join("K.txt"), &k)?;
    let mut names = vec!["K.txt".to_string(), "data.csv".to_string()];
    for (name, m) in &files.0 {
        io::write_matrix(&out.join(name), m)?;
        names.push(name.to_string());
    }
    let checks = evaluate(&k, Some((&exp.hankel, j)), Some(&sys), spec.as_ref())?;
    let report = SynthReport {
        procedure: sp.procedure,
        method,
        grid_index: j,
        k: rows(&k),
        objective,
        timing_seconds: elapsed,
        details,
        files: names,
        checks,
    };
    write_json(&out.join("report.json"), &report)?;
    print_summary(&report, &exp);
    Ok(0)
}

/// RMS of `(A - BK) Ξ(t_i) - Ξ̇(t_i)` over the reference samples.
pub fn tracking_error(sys: &LtiSystem, k: &Mat, refs: &dbcontrol::trajref::ReferenceSet) -> f64 {
    let Ok(cl) = sys.closed_loop(k) else { return f64::NAN };
    let sum: f64 = (0..refs.len())
        .map(|i| (&cl * refs.xi(i) - refs.xid(i)).norm_squared())
        .sum();
    (sum / (refs.len() * refs.trajectories()) as f64).sqrt()
}

fn print_summary(r: &SynthReport, exp: &Experiment) {
    println!("method: {} (grid index {} of {})", r.method, r.grid_index, exp.hankel.q());
    println!("K =");
    for row in &r.k {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>12.6}")).collect();
        println!("  {}", cells.join(" "));
    }
    if let Some(o) = r.objective {
        println!("objective: {o:.6e}");
    }
    for (key, v) in &r.details {
        if v.is_number() || v.is_boolean() {
            println!("{key}: {v}");
        }
    }
    if let Some(m) = &r.checks.model {
        println!("closed loop stable (model): {}", m.stabilizing);
    }
    if let Some(e) = r.checks.placement_error {
        println!("placement error: {e:.6e}");
    }
    println!("time: {:.3} s", r.timing_seconds);
}
