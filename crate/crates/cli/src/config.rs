//! TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use dbcontrol::convex::SdpSettings;
use dbcontrol::io;
use dbcontrol::system::{builtin, LtiSystem, NoiseKind, NoiseModel};
use dbcontrol::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSource,
    #[serde(default)]
    pub experiment: ExperimentParams,
    pub noise: Option<NoiseParams>,
    pub synth: Option<SynthParams>,
    #[serde(default)]
    pub solver: SolverParams,
    pub bench: Option<BenchParams>,
    /// Output directory; `--out` takes precedence.
    pub out: Option<PathBuf>,
}

/// Exactly one of `builtin`, `a`/`b` matrix files, or `manifest` + `name`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSource {
    pub builtin: Option<String>,
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    /// Directory holding `manifest.json`.
    pub manifest: Option<PathBuf>,
    pub name: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentParams {
    pub segments: usize,
    pub segment_length: f64,
    pub grid_points: usize,
    pub seed: u64,
    pub x0: Option<Vec<f64>>,
    /// Use a recorded trajectory CSV instead of simulating.
    pub data: Option<PathBuf>,
    pub grid_index: Option<usize>,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            segments: 15,
            segment_length: 0.5,
            grid_points: 3,
            seed: 0,
            x0: None,
            data: None,
            grid_index: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    #[serde(default = "default_noise_kind")]
    pub kind: NoiseKind,
    pub bound: f64,
    /// Defaults to the experiment seed plus one.
    pub seed: Option<u64>,
    pub corrupt_derivative: Option<bool>,
}

fn default_noise_kind() -> NoiseKind {
    NoiseKind::Measurement
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Procedure {
    Trajref,
    Lqr,
    Invoc,
    Poles,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub procedure: Procedure,
    /// LQR weights: matrix files, or scaled identities.
    pub q: Option<PathBuf>,
    pub r: Option<PathBuf>,
    #[serde(default = "one")]
    pub q_scale: f64,
    #[serde(default = "one")]
    pub r_scale: f64,
    /// Trajectory-reference CSV.
    pub references: Option<PathBuf>,
    /// Noise bound used for the `Wbar` estimate (0 for exact data).
    #[serde(default)]
    pub vbar: f64,
    /// Gain to invert.
    pub gain: Option<PathBuf>,
    /// Closed-loop samples; collected from the model when absent.
    pub bundle: Option<PathBuf>,
    /// Initial states for collection, one per column.
    pub x0s: Option<PathBuf>,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    #[serde(default = "default_max_samples")]
    pub max_samples: usize,
    pub poles: Option<PathBuf>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Use the single-draw placement instead of the optimized one.
    #[serde(default)]
    pub baseline: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    pub feas_tol: Option<f64>,
    pub gap_tol: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchParams {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_noise_levels")]
    pub noise_levels: Vec<f64>,
    pub poles: Option<PathBuf>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Gain for the inverse-optimal-control round trip.
    pub gain: Option<PathBuf>,
    /// Reference CSV for the tracking benchmark.
    pub references: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}
fn default_spacing() -> f64 {
    0.1
}
fn default_max_samples() -> usize {
    100
}
fn default_restarts() -> usize {
    10
}
fn default_trials() -> usize {
    100
}
fn default_noise_levels() -> Vec<f64> {
    vec![1e-3, 1e-2]
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

impl ExperimentConfig {
    /// Parse, resolve paths against the file's directory and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.system.a);
        fix(&mut self.system.b);
        fix(&mut self.system.manifest);
        fix(&mut self.experiment.data);
        fix(&mut self.out);
        if let Some(s) = self.synth.as_mut() {
            for p in [&mut s.q, &mut s.r, &mut s.references, &mut s.gain, &mut s.bundle, &mut s.x0s, &mut s.poles] {
                fix(p);
            }
        }
        if let Some(b) = self.bench.as_mut() {
            for p in [&mut b.poles, &mut b.gain, &mut b.references] {
                fix(p);
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let s = &self.system;
        let sources = [s.builtin.is_some(), s.a.is_some() || s.b.is_some(), s.manifest.is_some()];
        if sources.iter().filter(|x| **x).count() != 1 {
            return invalid("[system] needs exactly one of builtin, a/b files, or manifest");
        }
        if (s.a.is_some() || s.b.is_some()) && (s.a.is_none() || s.b.is_none()) {
            return invalid("[system] needs both a and b matrix files");
        }
        if s.manifest.is_some() && s.name.is_none() {
            return invalid("[system] manifest requires a system name");
        }
        let e = &self.experiment;
        if !(e.segment_length > 0.0 && e.segment_length.is_finite()) {
            return invalid("experiment.segment_length must be positive");
        }
        if e.segments == 0 || e.grid_points == 0 {
            return invalid("experiment.segments and experiment.grid_points must be positive");
        }
        if let Some(n) = &self.noise {
            if !(n.bound >= 0.0 && n.bound.is_finite()) {
                return invalid("noise.bound must be finite and >= 0");
            }
        }
        if let Some(sy) = &self.synth {
            let need = |p: &Option<PathBuf>, what: &str| match p {
                Some(_) => Ok(()),
                None => invalid(format!("procedure {:?} needs synth.{what}", sy.procedure).to_lowercase()),
            };
            match sy.procedure {
                Procedure::Trajref => need(&sy.references, "references")?,
                Procedure::Invoc => {
                    if sy.bundle.is_none() {
                        need(&sy.gain, "gain")?;
                    }
                }
                Procedure::Poles => need(&sy.poles, "poles")?,
                Procedure::Lqr => {}
            }
            if !(sy.q_scale > 0.0 && sy.r_scale > 0.0) {
                return invalid("synth.q_scale and synth.r_scale must be positive");
            }
            if !(sy.spacing > 0.0) || sy.max_samples == 0 || sy.restarts == 0 {
                return invalid("synth.spacing, synth.max_samples and synth.restarts must be positive");
            }
            if !(sy.vbar >= 0.0 && sy.vbar.is_finite()) {
                return invalid("synth.vbar must be finite and >= 0");
            }
        }
        if let Some(b) = &self.bench {
            if b.trials == 0 || b.restarts == 0 {
                return invalid("bench.trials and bench.restarts must be positive");
            }
            if b.noise_levels.is_empty() || b.noise_levels.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return invalid("bench.noise_levels must be a non-empty list of bounds >= 0");
            }
            if b.poles.is_none() && b.gain.is_none() && b.references.is_none() {
                return invalid("[bench] needs at least one of poles, gain, references");
            }
        }
        for p in self.input_paths() {
            if !p.exists() {
                return invalid(format!("file not found: {}", p.display()));
            }
        }
        Ok(())
    }

    fn input_paths(&self) -> Vec<&PathBuf> {
        let mut v: Vec<&Option<PathBuf>> = vec![&self.system.a, &self.system.b, &self.system.manifest, &self.experiment.data];
        if let Some(s) = &self.synth {
            v.extend([&s.q, &s.r, &s.references, &s.gain, &s.bundle, &s.x0s, &s.poles]);
        }
        if let Some(b) = &self.bench {
            v.extend([&b.poles, &b.gain, &b.references]);
        }
        v.into_iter().flatten().collect()
    }

    pub fn load_system(&self) -> Result<LtiSystem> {
        let s = &self.system;
        if let Some(name) = &s.builtin {
            return builtin(name);
        }
        if let (Some(a), Some(b)) = (&s.a, &s.b) {
            return io::read_system(a, b, "files");
        }
        let (dir, name) = (s.manifest.as_ref().expect("validated"), s.name.as_ref().expect("validated"));
        io::load_system_dir(dir)?
            .into_iter()
            .find(|sys| sys.label() == name)
            .ok_or_else(|| Error::Validation(format!("system '{name}' not in {}", dir.display())))
    }

    pub fn noise_model(&self) -> Option<NoiseModel> {
        let n = self.noise.as_ref()?;
        let seed = n.seed.unwrap_or(self.experiment.seed.wrapping_add(1));
        let mut m = match n.kind {
            NoiseKind::Measurement => NoiseModel::measurement(n.bound, seed),
            NoiseKind::Process => NoiseModel::process(n.bound, seed),
        };
        if let Some(c) = n.corrupt_derivative {
            m.corrupt_derivative = c;
        }
        Some(m)
    }

    pub fn sdp_settings(&self) -> SdpSettings {
        let mut s = SdpSettings::from_env();
        if let Some(t) = self.solver.feas_tol {
            s.feas_tol = t;
        }
        if let Some(t) = self.solver.gap_tol {
            s.gap_tol = t;
        }
        if let Some(it) = self.solver.max_iters {
            s.max_iters = it;
        }
        s
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(text, Path::new("."))
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse("[system]\nbuiltin = \"aircraft\"\n").unwrap();
        assert_eq!(c.experiment.segments, 15);
        assert_eq!(c.experiment.segment_length, 0.5);
        assert!(c.noise_model().is_none());
        assert_eq!(c.load_system().unwrap().n(), 4);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(parse("[system]\n").is_err());
        assert!(parse("[system]\nbuiltin = \"aircraft\"\na = \"A.txt\"\n").is_err());
        assert!(parse("[system]\nbuiltin = \"aircraft\"\nbogus = 1\n").is_err());
        assert!(parse("[system]\nbuiltin = \"aircraft\"\n[experiment]\nsegment_length = -1.0\n").is_err());
        assert!(parse("[system]\nbuiltin = \"aircraft\"\n[synth]\nprocedure = \"poles\"\n").is_err());
        assert!(parse("[system]\nbuiltin = \"aircraft\"\n[synth]\nprocedure = \"poles\"\npoles = \"missing.json\"\n").is_err());
        assert!(parse("[system]\nbuiltin = \"aircraft\"\n[synth]\nprocedure = \"magic\"\n").is_err());
    }

    #[test]
    fn noise_seed_follows_experiment_seed() {
        let c = parse("[system]\nbuiltin = \"aircraft\"\n[experiment]\nseed = 5\n[noise]\nbound = 0.01\n").unwrap();
        let n = c.noise_model().unwrap();
        assert_eq!((n.seed, n.kind, n.corrupt_derivative), (6, NoiseKind::Measurement, true));
    }
}
