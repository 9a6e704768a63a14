use std::fs;
use std::path::Path;

use dbcontrol::datamat::check_pe;
use dbcontrol::io;
use dbcontrol::Result;

use crate::config::ExperimentConfig;
use crate::experiment::acquire;
use crate::write_json;

/// Writes `data.csv` and `pe.json`; returns exit code 2 when the data are not
/// persistently exciting.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let sys = cfg.load_system()?;
    let exp = acquire(cfg, &sys)?;
    fs::create_dir_all(out)?;
    io::write_trajectory_csv(&out.join("data.csv"), &exp.data)?;
    let pe = check_pe(&exp.hankel);
    write_json(&out.join("pe.json"), &pe)?;
    println!("wrote {}", out.join("data.csv").display());
    if pe.passed {
        println!("persistence of excitation: ok ({})", pe.diagnostic);
        Ok(0)
    } else {
        eprintln!(
            "persistence of excitation failed: {} (min singular value {:.3e})",
            pe.diagnostic, pe.min_singular_value
        );
        Ok(2)
    }
}
