//! Convergence study: mean-field runs on several grids and particle runs of
//! several sizes, all compared against one mean-field reference grid.

use std::fs;
use std::path::Path;

use super::artifacts::run_experiment;
use super::config::{Level, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{convergence_study, StudyTable};

#[derive(Debug, Clone, PartialEq)]
pub struct StudyPlan {
    pub grids: Vec<usize>,
    pub particles: Vec<usize>,
    /// Grid of the reference run; the finest grid when absent.
    pub reference_grid: Option<usize>,
}

impl StudyPlan {
    pub fn reference(&self) -> Result<usize> {
        self.reference_grid
            .or_else(|| self.grids.iter().copied().max())
            .ok_or_else(|| Error::Config("a study needs a reference grid".into()))
    }

    /// Labelled configurations: `M<grid>` columns then `N<particles>`
    /// columns. Particle runs are binned on the reference grid.
    pub fn configurations(&self, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
        let reference = self.reference()?;
        let mut out = Vec::new();
        for &g in &self.grids {
            let mut c = base.clone();
            c.run.level = Level::Meanfield;
            c.meanfield.grid = g;
            out.push((format!("M{g}"), c.resolved()?));
        }
        for &n in &self.particles {
            let mut c = base.clone();
            c.run.level = Level::Micro;
            c.micro.particles = n;
            c.meanfield.grid = reference;
            out.push((format!("N{n}"), c.resolved()?));
        }
        Ok(out)
    }
}

/// Runs the study, writing each configuration into `<dir>/<label>` and the
/// table into `study.csv` and `study.json`.
pub fn run_study(base: &RunConfig, plan: &StudyPlan, dir: &Path) -> Result<StudyTable> {
    let configs = plan.configurations(base)?;
    let reference_label = format!("M{}", plan.reference()?);
    let reference = match configs.iter().find(|(l, _)| *l == reference_label) {
        Some(r) => r.clone(),
        None => {
            let mut c = base.clone();
            c.run.level = Level::Meanfield;
            c.meanfield.grid = plan.reference()?;
            (reference_label.clone(), c.resolved()?)
        }
    };
    fs::create_dir_all(dir)?;
    let table = convergence_study(&configs, &reference, base.output.velocity_scale, |label, cfg| {
        let (_, outcome) = run_experiment(cfg, &dir.join(label))?;
        Ok(outcome.series(label))
    })?;
    fs::write(dir.join("study.csv"), table.to_csv())?;
    fs::write(dir.join("study.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_study_fills_the_table() {
        let base = RunConfig::load(
            None,
            &[
                "run.strategy=none".into(),
                "run.horizon=0.4".into(),
                "run.slices=2".into(),
                "meanfield.velocity_grid=6".into(),
                "micro.steps_per_slice=2".into(),
            ],
        )
        .unwrap();
        let plan = StudyPlan {
            grids: vec![8, 12],
            particles: vec![50],
            reference_grid: Some(8),
        };
        let tmp = tempfile::tempdir().unwrap();
        let t = run_study(&base, &plan, tmp.path()).unwrap();
        assert_eq!(t.reference, "M8");
        let own = t.column("M8").unwrap().report.unwrap();
        assert_eq!((own.norm_j, own.norm_u, own.norm_rho), (0.0, 0.0, Some(0.0)));
        let other = t.column("M12").unwrap().report.unwrap();
        assert!(other.norm_j > 0.0 && other.norm_rho.is_none());
        assert!(t.column("N50").unwrap().report.unwrap().norm_rho.unwrap() > 0.0);
        let csv = fs::read_to_string(tmp.path().join("study.csv")).unwrap();
        assert!(csv.starts_with("norm,M8,M12,N50\n"));
        assert!(tmp.path().join("N50/manifest.json").exists());
    }
}
