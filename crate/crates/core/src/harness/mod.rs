//! Configuration, experiment orchestration, persistence and plot data.

pub mod artifacts;
pub mod config;
pub mod plots;
pub mod run;
pub mod snapshot;
pub mod study;

use std::fmt::Write as _;
use std::path::Path;

pub use artifacts::{output_dir, run_experiment, Manifest};
pub use config::{Level, Preset, RunConfig, Strategy};
pub use plots::{emit_plot_data, PlotBundle};
pub use run::{execute, RunOutcome};
pub use study::{run_study, StudyPlan};

use crate::error::{Error, Result};

/// Human-readable summary of a snapshot file, a configuration file or a run
/// directory. A run directory whose files no longer match the manifest is an
/// error.
pub fn inspect(path: &Path) -> Result<String> {
    let mut s = String::new();
    if path.is_dir() {
        let m = Manifest::read(path)?;
        writeln!(s, "status          {}", m.status).unwrap();
        if let Some(e) = &m.error {
            writeln!(s, "error           {e}").unwrap();
        }
        writeln!(s, "seed            {}", m.seed).unwrap();
        writeln!(s, "config sha256   {}", m.config_sha256).unwrap();
        writeln!(s, "wall time       {:.3} s", m.wall_time_seconds).unwrap();
        if let Some(p) = m.peak_memory_bytes {
            writeln!(s, "peak memory     {p} bytes (estimate)").unwrap();
        }
        if let Some(d) = m.mass_drift {
            writeln!(s, "mass drift      {d:.3e}").unwrap();
        }
        for w in &m.warnings {
            writeln!(s, "warning         {w}").unwrap();
        }
        writeln!(s, "files           {}", m.files.len()).unwrap();
        let bad = m.verify(path);
        if !bad.is_empty() {
            return Err(Error::Record(format!("hash mismatch for {}", bad.join(", "))));
        }
        writeln!(s, "hashes          verified").unwrap();
        return Ok(s);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let c = RunConfig::load(Some(path), &[])?;
            s.push_str(&c.to_toml());
        }
        _ => {
            let (f, t) = snapshot::read_snapshot(path)?;
            let g = f.grid;
            let m = f.moments();
            writeln!(s, "time            {t}").unwrap();
            writeln!(s, "grid            n_x = {:?}, n_v = {:?}", g.n_x, g.n_v).unwrap();
            writeln!(s, "bounds          x ∈ ±{}, v ∈ ±{}", g.half_length, g.v_max).unwrap();
            writeln!(s, "mass            {:.15}", m.mass).unwrap();
            writeln!(s, "mean            ({:.6}, {:.6})", m.mean[0], m.mean[1]).unwrap();
            writeln!(s, "variance        {:.6}", m.variance).unwrap();
            writeln!(s, "min value       {:.3e}", f.min_value()).unwrap();
        }
    }
    Ok(s)
}
