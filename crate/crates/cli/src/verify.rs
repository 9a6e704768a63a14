//! Gain checks against data, a model, and a target spectrum.

use std::path::PathBuf;

use clap::Args;
use dbcontrol::datamat::build_hankel;
use dbcontrol::io;
use dbcontrol::linalg;
use dbcontrol::poleplace::{placement_error, PoleSpec};
use dbcontrol::stability::{closed_loop_from_data, is_stabilizing};
use dbcontrol::system::{builtin, LtiSystem};
use dbcontrol::{datamat::HankelTriple, Error, Mat, Result};
use num_complex::Complex64;
use serde::Serialize;

use crate::write_json;

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Gain matrix file (u = -K x).
    #[arg(long)]
    pub gain: PathBuf,
    /// Trajectory CSV for the data-based check.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Segment length of the data.
    #[arg(long, default_value_t = 0.5)]
    pub segment_length: f64,
    #[arg(long)]
    pub grid_index: Option<usize>,
    /// Builtin model for the model-based check.
    #[arg(long, conflicts_with_all = ["a", "b"])]
    pub system: Option<String>,
    #[arg(long, requires = "b")]
    pub a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    /// Pole specification JSON; needs a model.
    #[arg(long)]
    pub poles: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumCheck {
    pub stabilizing: bool,
    pub spectral_abscissa: f64,
    /// `[re, im]` pairs.
    pub eigenvalues: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataCheck {
    pub grid_index: usize,
    #[serde(flatten)]
    pub spectrum: SpectrumCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub data: Option<DataCheck>,
    pub model: Option<SpectrumCheck>,
    /// Placement error against the target spectrum.
    pub placement_error: Option<f64>,
}

fn spectrum(m: &Mat, stabilizing: bool) -> Result<SpectrumCheck> {
    let eig: Vec<Complex64> = linalg::eigenvalues(m)?;
    Ok(SpectrumCheck {
        stabilizing,
        spectral_abscissa: eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max),
        eigenvalues: eig.iter().map(|z| [z.re, z.im]).collect(),
    })
}

/// Checks shared by `verify` and the reports written by `synth`.
pub fn evaluate(
    k: &Mat,
    data: Option<(&HankelTriple, usize)>,
    sys: Option<&LtiSystem>,
    spec: Option<&PoleSpec>,
) -> Result<VerifyReport> {
    let data = match data {
        Some((h, j)) => {
            let cl = closed_loop_from_data(h, j, k)?;
            Some(DataCheck {
                grid_index: j,
                spectrum: spectrum(&cl, is_stabilizing(h, j, k, 0.0)?)?,
            })
        }
        None => None,
    };
    let model = match sys {
        Some(s) => {
            let cl = s.closed_loop(k)?;
            Some(spectrum(&cl, linalg::is_hurwitz(&cl, 0.0)?)?)
        }
        None => None,
    };
    let placement_error = match (sys, spec) {
        (Some(s), Some(p)) => Some(placement_error(k, s, p)?),
        (None, Some(_)) => return Err(Error::Validation("pole check needs a model (--system or --a/--b)".into())),
        _ => None,
    };
    Ok(VerifyReport {
        data,
        model,
        placement_error,
    })
}

pub fn run(args: &VerifyArgs, out: Option<&std::path::Path>) -> Result<i32> {
    let k = io::read_matrix(&args.gain)?;
    let hankel = match &args.data {
        Some(p) => Some(build_hankel(&io::read_trajectory_csv(p, args.segment_length)?)?),
        None => None,
    };
    let sys = match (&args.system, &args.a, &args.b) {
        (Some(name), _, _) => Some(builtin(name)?),
        (None, Some(a), Some(b)) => Some(io::read_system(a, b, "files")?),
        _ => None,
    };
    let spec = args.poles.as_deref().map(io::read_pole_spec).transpose()?;
    if hankel.is_none() && sys.is_none() {
        return Err(Error::Validation("nothing to verify against: give --data and/or a model".into()));
    }
    let data = match &hankel {
        Some(h) => {
            let j = args.grid_index.unwrap_or(h.default_index());
            h.check_index(j)?;
            Some((h, j))
        }
        None => None,
    };
    let report = evaluate(&k, data, sys.as_ref(), spec.as_ref())?;
    if let Some(d) = &report.data {
        println!(
            "data:  stabilizing = {}, spectral abscissa {:.6e} (grid index {})",
            d.spectrum.stabilizing, d.spectrum.spectral_abscissa, d.grid_index
        );
    }
    if let Some(m) = &report.model {
        println!("model: stabilizing = {}, spectral abscissa {:.6e}", m.stabilizing, m.spectral_abscissa);
    }
    if let Some(e) = report.placement_error {
        println!("poles: placement error {e:.6e}");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("verify.json"), &report)?;
    }
    Ok(0)
}
