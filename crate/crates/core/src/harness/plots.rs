//! Plot-ready CSV bundle built from the artifacts of a finished run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::artifacts::{csv_error, csv_writer, file_entry, num, FileEntry};
use super::config::{Level, RunConfig, Strategy};
use super::snapshot::read_snapshot;
use crate::error::{Error, Result};
use crate::meanfield::PhaseGrid;
use crate::metrics::histogram_density;

pub const PLOT_DIR: &str = "plots";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotBundle {
    pub files: Vec<FileEntry>,
    pub warnings: Vec<String>,
    /// `(t, Σ ρ ΔA)` of every density grid written.
    pub grid_masses: Vec<(f64, f64)>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
        let header = r.headers().map_err(csv_error)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_error)?;
            let row = rec
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            rows.push(row);
        }
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("missing column {name}")))
    }
}

fn write_grid(path: &Path, grid: &PhaseGrid, t: f64, rho: &[f64]) -> Result<f64> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "x", "y", "rho"]).map_err(csv_error)?;
    for (s, r) in rho.iter().enumerate() {
        let x = grid.spatial_center(s);
        w.write_record([num(t), num(x[0]), num(x[1]), num(*r)]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(rho.iter().sum::<f64>() * grid.cell_area())
}

/// Writes the bundle into `<run_dir>/plots`. Crowd grids are written at the
/// snapshots nearest to `times`, or at every snapshot when `times` is empty.
pub fn emit_plot_data(run_dir: &Path, times: &[f64]) -> Result<PlotBundle> {
    let config = RunConfig::from_toml(&fs::read_to_string(run_dir.join("config.toml"))?)?.resolved()?;
    let out = run_dir.join(PLOT_DIR);
    fs::create_dir_all(&out)?;
    let mut names: Vec<String> = Vec::new();
    let mut warnings = Vec::new();
    let mut grid_masses = Vec::new();

    match Table::read(&run_dir.join("timeseries.csv")) {
        Ok(ts) => {
            let t = ts.col("t")?;
            let mut w = csv_writer(&out.join("agents.csv"))?;
            w.write_record(["t", "agent", "x", "y"]).map_err(csv_error)?;
            for row in &ts.rows {
                for a in 0..config.agents.count {
                    let (x, y) = (ts.col(&format!("d_{a}_x"))?, ts.col(&format!("d_{a}_y"))?);
                    w.write_record([num(row[t]), a.to_string(), num(row[x]), num(row[y])])
                        .map_err(csv_error)?;
                }
            }
            w.flush()?;
            names.push("agents.csv".into());
            if config.run.strategy != Strategy::Oc {
                let cols = [ts.col("J")?, ts.col("J1")?, ts.col("J2")?];
                let mut w = csv_writer(&out.join("cost.csv"))?;
                w.write_record(["t", "J", "J1", "J2"]).map_err(csv_error)?;
                for row in &ts.rows {
                    let mut rec = vec![num(row[t])];
                    rec.extend(cols.iter().map(|&c| num(row[c])));
                    w.write_record(&rec).map_err(csv_error)?;
                }
                w.flush()?;
                names.push("cost.csv".into());
            }
        }
        Err(e) => warnings.push(format!("timeseries.csv unavailable: {e}")),
    }

    if config.run.strategy == Strategy::Oc {
        match Table::read(&run_dir.join("optimizer.csv")) {
            Ok(op) => {
                let cols = [op.col("iter")?, op.col("cost")?, op.col("J1")?, op.col("J2")?];
                let mut w = csv_writer(&out.join("cost.csv"))?;
                w.write_record(["iter", "J", "J1", "J2"]).map_err(csv_error)?;
                for row in &op.rows {
                    w.write_record([
                        (row[cols[0]] as usize).to_string(),
                        num(row[cols[1]]),
                        num(row[cols[2]]),
                        num(row[cols[3]]),
                    ])
                    .map_err(csv_error)?;
                }
                w.flush()?;
                names.push("cost.csv".into());
            }
            Err(e) => warnings.push(format!("optimizer.csv unavailable: {e}")),
        }
    }

    // snapshots in write order, with their times
    let snap_dir = run_dir.join("snapshots");
    let prefix = match config.run.level {
        Level::Micro => "particles_",
        Level::Meanfield => "density_",
    };
    let mut snaps: Vec<String> = match fs::read_dir(&snap_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().to_string())
            .filter(|n| n.starts_with(prefix))
            .collect(),
        Err(_) => Vec::new(),
    };
    snaps.sort();
    if snaps.is_empty() {
        warnings.push("no snapshots in the run; crowd grids skipped".into());
    }
    let grid = config.grid()?;
    let mut timed = Vec::new();
    for name in &snaps {
        let path = snap_dir.join(name);
        let loaded = match config.run.level {
            Level::Micro => Table::read(&path).and_then(|tb| {
                let (t, x, y) = (tb.col("t")?, tb.col("x")?, tb.col("y")?);
                let time = tb.rows.first().map(|r| r[t]).unwrap_or(0.0);
                let pos: Vec<f64> = tb.rows.iter().flat_map(|r| [r[x], r[y]]).collect();
                Ok((time, pos, None))
            }),
            Level::Meanfield => read_snapshot(&path).map(|(f, t)| (t, Vec::new(), Some(f))),
        };
        match loaded {
            Ok(v) => timed.push((name.clone(), v)),
            Err(e) => warnings.push(format!("{name} unreadable: {e}")),
        }
    }
    let mut chosen: Vec<usize> = if times.is_empty() {
        (0..timed.len()).collect()
    } else {
        times
            .iter()
            .filter_map(|&t| {
                (0..timed.len()).min_by(|&a, &b| (timed[a].1 .0 - t).abs().total_cmp(&(timed[b].1 .0 - t).abs()))
            })
            .collect()
    };
    chosen.dedup();
    for (k, &i) in chosen.iter().enumerate() {
        let (_, (t, pos, field)) = &timed[i];
        let marginal = format!("crowd_density_{k:03}.csv");
        let mass = match field {
            Some(f) => write_grid(&out.join(&marginal), &f.grid, *t, &f.spatial_density())?,
            None => {
                let scatter = format!("crowd_particles_{k:03}.csv");
                let mut w = csv_writer(&out.join(&scatter))?;
                w.write_record(["t", "x", "y"]).map_err(csv_error)?;
                for p in pos.chunks(2) {
                    w.write_record([num(*t), num(p[0]), num(p[1])]).map_err(csv_error)?;
                }
                w.flush()?;
                names.push(scatter);
                let h = histogram_density(pos, &grid);
                if h.overflow > 0 {
                    warnings.push(format!("{} particles outside the grid at t = {t}", h.overflow));
                }
                write_grid(&out.join(&marginal), &grid, *t, &h.density)?
            }
        };
        names.push(marginal);
        grid_masses.push((*t, mass));
    }

    let files = names
        .iter()
        .map(|n| file_entry(&out, n))
        .collect::<Result<Vec<_>>>()?;
    let bundle = PlotBundle {
        files,
        warnings,
        grid_masses,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&bundle)? + "\n")?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::artifacts::run_experiment;

    fn cfg(level: &str, strategy: &str) -> RunConfig {
        RunConfig::load(
            None,
            &[
                format!("run.level={level}"),
                format!("run.strategy={strategy}"),
                "run.horizon=0.4".into(),
                "run.slices=4".into(),
                "micro.particles=20".into(),
                "micro.steps_per_slice=2".into(),
                "meanfield.grid=8".into(),
                "meanfield.velocity_grid=6".into(),
                "control.max_iterations=3".into(),
                "output.snapshot_every=2".into(),
            ],
        )
        .unwrap()
    }

    fn read(path: &Path) -> Table {
        Table::read(path).unwrap()
    }

    #[test]
    fn oc_cost_is_indexed_by_iteration_and_non_increasing() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("oc");
        run_experiment(&cfg("micro", "oc"), &dir).unwrap();
        emit_plot_data(&dir, &[]).unwrap();
        let t = read(&dir.join("plots/cost.csv"));
        assert_eq!(t.header[0], "iter");
        let j: Vec<f64> = t.rows.iter().map(|r| r[1]).collect();
        assert!(j.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn ic_cost_is_indexed_by_time() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ic");
        run_experiment(&cfg("micro", "ic"), &dir).unwrap();
        emit_plot_data(&dir, &[]).unwrap();
        let t = read(&dir.join("plots/cost.csv"));
        assert_eq!(t.header[0], "t");
        assert_eq!(t.rows.len(), 4 * 2 + 1);
    }

    #[test]
    fn density_grids_carry_the_run_mass() {
        let tmp = tempfile::tempdir().unwrap();
        for level in ["micro", "meanfield"] {
            let dir = tmp.path().join(level);
            run_experiment(&cfg(level, "none"), &dir).unwrap();
            let b = emit_plot_data(&dir, &[0.0, 0.4]).unwrap();
            assert_eq!(b.grid_masses.len(), 2);
            for (_, m) in &b.grid_masses {
                assert!((m - 1.0).abs() < 1e-6, "{level}: mass {m}");
            }
        }
    }

    #[test]
    fn missing_artifacts_give_a_partial_bundle() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut c = cfg("micro", "ic");
        c.output.snapshot_every = 0;
        run_experiment(&c, &dir).unwrap();
        fs::remove_file(dir.join("timeseries.csv")).unwrap();
        let b = emit_plot_data(&dir, &[]).unwrap();
        assert!(b.files.is_empty());
        assert_eq!(b.warnings.len(), 2);
    }
}
