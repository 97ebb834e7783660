//! Files written for a run and the manifest that lists them with their
//! SHA-256 hashes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::run::{execute, RunOutcome, Snapshot};
use super::snapshot::write_snapshot;
use crate::error::{Error, Result};
use crate::model::MicroState;
use crate::optimize::OptimizerReport;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    pub config_sha256: String,
    pub wall_time_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_memory_bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_budget_bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mass_drift: Option<f64>,
    pub warnings: Vec<String>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Files whose content no longer matches the recorded hash.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|f| hash_file(&dir.join(&f.path)).map(|h| h != f.sha256).unwrap_or(true))
            .map(|f| f.path.clone())
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn file_entry(dir: &Path, relative: &str) -> Result<FileEntry> {
    let data = fs::read(dir.join(relative))?;
    Ok(FileEntry {
        path: relative.to_string(),
        bytes: data.len() as u64,
        sha256: sha256_hex(&data),
    })
}

/// Full-precision scientific notation used in every CSV.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_error)
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn agent_columns(prefix: &str, m: usize) -> Vec<String> {
    (0..m).flat_map(|a| [format!("{prefix}_{a}_x"), format!("{prefix}_{a}_y")]).collect()
}

fn write_timeseries(path: &Path, out: &RunOutcome) -> Result<()> {
    let m = out.control.agents();
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["t", "J", "J1", "J2", "J3", "E_x", "E_y", "Var", "mass"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(agent_columns("u", m));
    header.extend(agent_columns("d", m));
    w.write_record(&header).map_err(csv_error)?;
    let last = out.control.slices() - 1;
    for n in &out.nodes {
        let p = n.parts;
        let mut row = vec![
            num(n.t),
            num(p.total()),
            num(p.j1),
            num(p.j2),
            num(p.j3),
            num(n.mean[0]),
            num(n.mean[1]),
            num(n.variance),
            num(n.mass),
        ];
        let k = out.control.slice_index(n.t).min(last);
        row.extend(out.control.slice(k).iter().map(|v| num(*v)));
        row.extend(n.agents.iter().map(|v| num(*v)));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn write_control(path: &Path, out: &RunOutcome) -> Result<()> {
    let c = &out.control;
    let mut w = csv_writer(path)?;
    let mut header = vec!["slice".to_string(), "t_start".into(), "t_end".into()];
    header.extend(agent_columns("u", c.agents()));
    w.write_record(&header).map_err(csv_error)?;
    for k in 0..c.slices() {
        let mut row = vec![k.to_string(), num(c.knots()[k]), num(c.knots()[k + 1])];
        row.extend(c.slice(k).iter().map(|v| num(*v)));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn write_report(dir: &Path, report: &OptimizerReport) -> Result<()> {
    let mut w = csv_writer(&dir.join("optimizer.csv"))?;
    w.write_record(["iter", "cost", "J1", "J2", "J3", "grad_norm", "omega", "rel_change"])
        .map_err(csv_error)?;
    for r in &report.iterations {
        w.write_record([
            r.iter.to_string(),
            num(r.cost),
            num(r.j1),
            num(r.j2),
            num(r.j3),
            num(r.grad_norm),
            num(r.omega),
            num(r.rel_change),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    fs::write(dir.join("optimizer.json"), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub(crate) fn write_particles(path: &Path, t: f64, s: &MicroState) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "x", "y", "v_x", "v_y"]).map_err(csv_error)?;
    for (x, v) in s.positions.chunks(2).zip(s.velocities.chunks(2)) {
        w.write_record([num(t), num(x[0]), num(x[1]), num(v[0]), num(v[1])])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `config` and writes its artifacts and manifest into `dir`. Run
/// failures are recorded in the manifest and returned as the error.
pub fn run_experiment(config: &RunConfig, dir: &Path) -> Result<(Manifest, RunOutcome)> {
    let started = Instant::now();
    fs::create_dir_all(dir)?;
    let resolved = config.to_toml();
    fs::write(dir.join("config.toml"), &resolved)?;
    let mut written: Vec<String> = vec!["config.toml".into()];
    let snap_dir = dir.join("snapshots");
    let mut snapshots: Vec<String> = Vec::new();
    let mut sink = |s: Snapshot| -> Result<()> {
        fs::create_dir_all(&snap_dir)?;
        let name = match s {
            Snapshot::Particles { t, state } => {
                let name = format!("particles_{:04}.csv", snapshots.len());
                write_particles(&snap_dir.join(&name), t, state)?;
                name
            }
            Snapshot::Density { t, field, agents } => {
                let name = format!("density_{:04}.bin", snapshots.len());
                write_snapshot(&snap_dir.join(&name), &field.grid, &field.values, t)?;
                let agents_name = format!("agents_{:04}.csv", snapshots.len());
                let mut w = csv_writer(&snap_dir.join(&agents_name))?;
                w.write_record(["t", "agent", "x", "y"]).map_err(csv_error)?;
                for (a, d) in agents.chunks(2).enumerate() {
                    w.write_record([num(t), a.to_string(), num(d[0]), num(d[1])])
                        .map_err(csv_error)?;
                }
                w.flush()?;
                snapshots.push(format!("snapshots/{agents_name}"));
                name
            }
        };
        snapshots.push(format!("snapshots/{name}"));
        Ok(())
    };
    let result = execute(config, &mut sink);
    written.extend(snapshots);
    let mut manifest = Manifest {
        status: "ok".into(),
        error: None,
        seed: config.run.seed,
        config_sha256: sha256_hex(resolved.as_bytes()),
        wall_time_seconds: 0.0,
        peak_memory_bytes: None,
        memory_budget_bytes: config.meanfield.memory_budget,
        mass_drift: None,
        warnings: Vec::new(),
        files: Vec::new(),
    };
    let outcome = match result {
        Ok(out) => {
            write_timeseries(&dir.join("timeseries.csv"), &out)?;
            write_control(&dir.join("control.csv"), &out)?;
            written.extend(["timeseries.csv".to_string(), "control.csv".into()]);
            if let Some(r) = &out.report {
                write_report(dir, r)?;
                written.extend(["optimizer.csv".to_string(), "optimizer.json".into()]);
            }
            manifest.peak_memory_bytes = Some(out.peak_bytes);
            manifest.mass_drift = Some(out.mass_drift());
            manifest.warnings = out.warnings.clone();
            Ok(out)
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
            Err(e)
        }
    };
    manifest.files = written
        .iter()
        .map(|p| file_entry(dir, p))
        .collect::<Result<Vec<_>>>()?;
    manifest.wall_time_seconds = started.elapsed().as_secs_f64();
    manifest.write(dir)?;
    outcome.map(|o| (manifest, o))
}

/// Resolves `dir` against the output root when it is relative.
pub fn output_dir(root: Option<&Path>, dir: &Path) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(level: &str, strategy: &str) -> RunConfig {
        RunConfig::load(
            None,
            &[
                format!("run.level={level}"),
                format!("run.strategy={strategy}"),
                "run.horizon=0.4".into(),
                "run.slices=4".into(),
                "micro.particles=10".into(),
                "micro.steps_per_slice=2".into(),
                "meanfield.grid=8".into(),
                "meanfield.velocity_grid=6".into(),
                "output.snapshot_every=2".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn identical_runs_write_identical_files() {
        let tmp = tempfile::tempdir().unwrap();
        for level in ["micro", "meanfield"] {
            let cfg = small(level, "ic");
            let (a, _) = run_experiment(&cfg, &tmp.path().join(format!("{level}-a"))).unwrap();
            let (b, _) = run_experiment(&cfg, &tmp.path().join(format!("{level}-b"))).unwrap();
            assert_eq!(a.files, b.files);
            assert!(a.files.iter().any(|f| f.path.starts_with("snapshots/")));
        }
    }

    #[test]
    fn every_file_is_listed_with_its_hash() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let (m, _) = run_experiment(&small("micro", "ic"), &dir).unwrap();
        assert!(m.verify(&dir).is_empty());
        let mut on_disk: Vec<String> = walk(&dir).into_iter().filter(|p| p != MANIFEST).collect();
        on_disk.sort();
        let mut listed: Vec<String> = m.files.iter().map(|f| f.path.clone()).collect();
        listed.sort();
        assert_eq!(on_disk, listed);
        fs::write(dir.join("control.csv"), "tampered").unwrap();
        assert_eq!(m.verify(&dir), vec!["control.csv".to_string()]);
    }

    fn walk(dir: &Path) -> Vec<String> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                let name = p.file_name().unwrap().to_string_lossy().to_string();
                out.extend(walk(&p).into_iter().map(|s| format!("{name}/{s}")));
            } else {
                out.push(p.file_name().unwrap().to_string_lossy().to_string());
            }
        }
        out
    }

    #[test]
    fn micro_ic_run_writes_one_control_row_per_slice() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        run_experiment(&small("micro", "ic"), &dir).unwrap();
        let text = fs::read_to_string(dir.join("control.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 4);
        assert!(text.lines().next().unwrap().starts_with("slice,t_start,t_end,u_0_x,u_0_y"));
    }

    #[test]
    fn failed_run_is_recorded() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = small("meanfield", "oc");
        cfg.meanfield.memory_budget = Some(10);
        assert!(run_experiment(&cfg, &dir).is_err());
        let m = Manifest::read(&dir).unwrap();
        assert_eq!(m.status, "failed");
        assert!(m.error.unwrap().contains("budget"));
    }

    #[test]
    fn reported_peak_fits_the_budget() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small("meanfield", "oc");
        cfg.control.max_iterations = 1;
        let field = cfg.grid().unwrap().bytes_per_field();
        cfg.meanfield.memory_budget = Some(14 * field);
        let (m, _) = run_experiment(&cfg, &tmp.path().join("run")).unwrap();
        assert!(m.peak_memory_bytes.unwrap() <= m.memory_budget_bytes.unwrap());
    }
}
