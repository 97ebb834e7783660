//! Scaled comparison norms between runs, particle histograms on a mean-field
//! grid, and the convergence-study table.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::PhaseGrid;
use crate::model::ControlSchedule;

/// Particle positions binned on the spatial part of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// Cell counts divided by `N·Δx1·Δx2`.
    pub density: Vec<f64>,
    /// Particles outside the spatial domain.
    pub overflow: usize,
    pub particles: usize,
}

impl Histogram {
    pub fn overflow_fraction(&self) -> f64 {
        self.overflow as f64 / self.particles as f64
    }
}

/// Spatial cell holding `x`, if any; cells are half-open `[a, b)` except the
/// last, which also takes its upper edge.
pub fn spatial_cell(grid: &PhaseGrid, x: &[f64]) -> Option<usize> {
    let mut idx = [0usize; 2];
    for axis in 0..2 {
        let u = (x[axis] + grid.half_length) / grid.dx(axis);
        let n = grid.n_x[axis];
        if !(u >= 0.0 && u <= n as f64) {
            return None;
        }
        idx[axis] = (u as usize).min(n - 1);
    }
    Some(idx[0] * grid.n_x[1] + idx[1])
}

/// Empirical spatial density of 2-D `positions` on `grid`.
pub fn histogram_density(positions: &[f64], grid: &PhaseGrid) -> Histogram {
    let n = positions.len() / 2;
    let mut counts = vec![0usize; grid.spatial_cells()];
    let mut overflow = 0;
    for p in positions.chunks(2) {
        match spatial_cell(grid, p) {
            Some(s) => counts[s] += 1,
            None => overflow += 1,
        }
    }
    let scale = 1.0 / (n as f64 * grid.cell_area());
    Histogram {
        density: counts.iter().map(|&c| c as f64 * scale).collect(),
        overflow,
        particles: n,
    }
}

/// Spatial densities sampled at a few times on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySeries {
    pub grid: PhaseGrid,
    pub times: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
}

/// What a run contributes to a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub label: String,
    /// Solver nodes and the running cost `J(t)` at each.
    pub times: Vec<f64>,
    pub cost: Vec<f64>,
    pub control: ControlSchedule,
    pub density: Option<DensitySeries>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub norm_j: f64,
    pub norm_u: f64,
    /// Absent when either run has no density or the grids differ.
    pub norm_rho: Option<f64>,
}

/// Piecewise-linear interpolant through `(times, values)` at `t`, constant
/// beyond the ends.
fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let k = times.partition_point(|&s| s <= t);
    if k == 0 {
        return values[0];
    }
    if k == times.len() {
        return values[k - 1];
    }
    let (t0, t1) = (times[k - 1], times[k]);
    let w = (t - t0) / (t1 - t0);
    (1.0 - w) * values[k - 1] + w * values[k]
}

/// Sorted union of two grids on their common span, merging nodes closer than
/// a relative 1e-12.
fn merged_nodes(a: &[f64], b: &[f64]) -> Vec<f64> {
    let lo = a[0].max(b[0]);
    let hi = a[a.len() - 1].min(b[b.len() - 1]);
    let mut all: Vec<f64> = a.iter().chain(b).copied().filter(|t| *t >= lo && *t <= hi).collect();
    all.sort_by(f64::total_cmp);
    let tol = 1e-12 * (hi - lo).abs().max(1.0);
    all.dedup_by(|x, y| (*x - *y).abs() <= tol);
    all
}

/// `∫ |d|` over one interval of length `h` for `d` linear from `d0` to `d1`.
fn abs_linear_integral(h: f64, d0: f64, d1: f64) -> f64 {
    if d0 * d1 >= 0.0 {
        0.5 * h * (d0.abs() + d1.abs())
    } else {
        0.5 * h * (d0 * d0 + d1 * d1) / (d0.abs() + d1.abs())
    }
}

/// `1/T ∫ |J − J_ref| dt` for the piecewise-linear interpolants of both
/// trajectories, integrated exactly on the merged nodes.
pub fn cost_distance(a: &RunSeries, reference: &RunSeries) -> f64 {
    let nodes = merged_nodes(&a.times, &reference.times);
    let diff: Vec<f64> = nodes
        .iter()
        .map(|&t| interpolate(&a.times, &a.cost, t) - interpolate(&reference.times, &reference.cost, t))
        .collect();
    let total: f64 = (1..nodes.len())
        .map(|k| abs_linear_integral(nodes[k] - nodes[k - 1], diff[k - 1], diff[k]))
        .sum();
    total / (nodes[nodes.len() - 1] - nodes[0])
}

/// `1/(T M V) ∫ ‖u − u_ref‖ dt`, exact for piecewise-constant controls.
pub fn control_distance(a: &ControlSchedule, reference: &ControlSchedule, velocity_scale: f64) -> Result<f64> {
    if a.agents() != reference.agents() || a.dim() != reference.dim() {
        return Err(Error::shape("controls with different agent layouts cannot be compared"));
    }
    let nodes = merged_nodes(a.knots(), reference.knots());
    let mut total = 0.0;
    for w in nodes.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let (ua, ub) = (a.slice(a.slice_index(mid)), reference.slice(reference.slice_index(mid)));
        let d: f64 = ua.iter().zip(ub).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        total += (w[1] - w[0]) * d;
    }
    let span = nodes[nodes.len() - 1] - nodes[0];
    Ok(total / (span * a.agents() as f64 * velocity_scale))
}

/// `1/T ∫∫ |ρ − ρ_ref| dx̃ dỹ dt` with both spatial measures scaled by `1/L`.
pub fn density_distance(a: &DensitySeries, reference: &DensitySeries) -> Result<f64> {
    let (ga, gr) = (&a.grid, &reference.grid);
    if ga.n_x != gr.n_x || ga.half_length != gr.half_length {
        return Err(Error::shape(format!(
            "density grids differ: {:?} on ±{} vs {:?} on ±{}",
            ga.n_x, ga.half_length, gr.n_x, gr.half_length
        )));
    }
    if a.times.len() < 2 || reference.times.len() < 2 {
        return Err(Error::shape("density comparison needs at least two frames per run"));
    }
    let nodes = merged_nodes(&a.times, &reference.times);
    let measure = ga.cell_area() / (ga.length() * ga.length());
    let frame_at = |s: &DensitySeries, t: f64| -> Vec<f64> {
        let k = s.times.partition_point(|&x| x <= t).clamp(1, s.times.len() - 1);
        let (t0, t1) = (s.times[k - 1], s.times[k]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        s.frames[k - 1].iter().zip(&s.frames[k]).map(|(x, y)| (1.0 - w) * x + w * y).collect()
    };
    let diff: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&t| frame_at(a, t).iter().zip(frame_at(reference, t)).map(|(x, y)| x - y).collect())
        .collect();
    let total: f64 = (1..nodes.len())
        .map(|k| {
            let h = nodes[k] - nodes[k - 1];
            diff[k - 1].iter().zip(&diff[k]).map(|(d0, d1)| abs_linear_integral(h, *d0, *d1)).sum::<f64>()
        })
        .sum();
    Ok(total * measure / (nodes[nodes.len() - 1] - nodes[0]))
}

pub fn compare_runs(a: &RunSeries, reference: &RunSeries, velocity_scale: f64) -> Result<ComparisonReport> {
    let norm_rho = match (&a.density, &reference.density) {
        (Some(da), Some(dr)) if da.grid.n_x == dr.grid.n_x && da.grid.half_length == dr.grid.half_length => {
            Some(density_distance(da, dr)?)
        }
        _ => None,
    };
    Ok(ComparisonReport {
        norm_j: cost_distance(a, reference),
        norm_u: control_distance(&a.control, &reference.control, velocity_scale)?,
        norm_rho,
    })
}

/// One column of a convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyColumn {
    pub label: String,
    pub report: Option<ComparisonReport>,
    /// Why the column is empty.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub reference: String,
    pub columns: Vec<StudyColumn>,
}

impl StudyTable {
    pub fn column(&self, label: &str) -> Option<&StudyColumn> {
        self.columns.iter().find(|c| c.label == label)
    }

    /// Rows `norm_J`, `norm_u`, `norm_rho`; one column per configuration,
    /// `-` where a value is missing.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("norm");
        for c in &self.columns {
            out.push(',');
            out.push_str(&c.label);
        }
        out.push('\n');
        let rows: [(&str, fn(&ComparisonReport) -> Option<f64>); 3] = [
            ("norm_J", |r| Some(r.norm_j)),
            ("norm_u", |r| Some(r.norm_u)),
            ("norm_rho", |r| r.norm_rho),
        ];
        for (name, get) in rows {
            out.push_str(name);
            for c in &self.columns {
                out.push(',');
                match c.report.as_ref().and_then(get) {
                    Some(v) => out.push_str(&format!("{v:.16e}")),
                    None => out.push('-'),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every configuration (in parallel) and compares each against the
/// reference configuration. A failed run leaves an empty column; a failed
/// reference fails the study.
pub fn convergence_study<C, F>(
    configurations: &[(String, C)],
    reference: &(String, C),
    velocity_scale: f64,
    run: F,
) -> Result<StudyTable>
where
    C: Sync,
    F: Fn(&str, &C) -> Result<RunSeries> + Sync,
{
    let reference_run = run(&reference.0, &reference.1)?;
    let columns = configurations
        .par_iter()
        .map(|(label, cfg)| {
            let outcome = if *label == reference.0 {
                Ok(reference_run.clone())
            } else {
                run(label, cfg)
            };
            let report = outcome.and_then(|r| compare_runs(&r, &reference_run, velocity_scale));
            match report {
                Ok(r) => StudyColumn {
                    label: label.clone(),
                    report: Some(r),
                    error: None,
                },
                Err(e) => StudyColumn {
                    label: label.clone(),
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(StudyTable {
        reference: reference.0.clone(),
        columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> PhaseGrid {
        PhaseGrid::new(10.0, 1.0, [10, 8], [4, 4]).unwrap()
    }

    fn control(values: Vec<f64>, agents: usize) -> ControlSchedule {
        let slices = values.len() / (2 * agents);
        let mut c = ControlSchedule::uniform(0.0, 2.0, slices, agents, 2, 10.0).unwrap();
        c.values_mut().copy_from_slice(&values);
        c
    }

    fn series(cost: Vec<f64>, control: ControlSchedule) -> RunSeries {
        let n = cost.len();
        RunSeries {
            label: "run".into(),
            times: (0..n).map(|k| 2.0 * k as f64 / (n - 1) as f64).collect(),
            cost,
            control,
            density: None,
        }
    }

    #[test]
    fn all_particles_in_one_cell() {
        let g = grid();
        let h = histogram_density(&[0.5, 0.5, 0.7, 0.1, 1.9, 1.4], &g);
        let s = spatial_cell(&g, &[0.5, 0.5]).unwrap();
        assert_eq!(h.overflow, 0);
        for (c, v) in h.density.iter().enumerate() {
            let want = if c == s { 1.0 / g.cell_area() } else { 0.0 };
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn histogram_mass_misses_exactly_the_overflow() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos: Vec<f64> = (0..2 * 997).map(|_| rng.gen_range(-13.0..13.0)).collect();
        let h = histogram_density(&pos, &g);
        let inside = pos.chunks(2).filter(|p| p[0].abs() <= 10.0 && p[1].abs() <= 10.0).count();
        assert_eq!(h.overflow, 997 - inside);
        let mass: f64 = h.density.iter().sum::<f64>() * g.cell_area();
        assert!((mass - (1.0 - h.overflow_fraction())).abs() < 1e-12);
    }

    #[test]
    fn uniform_samples_stay_within_binomial_spread() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let pos: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let h = histogram_density(&pos, &g);
        let per_cell = n as f64 / g.spatial_cells() as f64;
        let uniform = 1.0 / (g.length() * g.length());
        for v in &h.density {
            assert!((v / uniform - 1.0).abs() <= 5.0 / per_cell.sqrt());
        }
    }

    #[test]
    fn identical_runs_have_zero_norms() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = series(vec![1.0, 3.0, 2.0, 5.0], control(vec![1.0, 2.0, 0.5, -1.0], 1));
        a.density = Some(DensitySeries {
            grid: g,
            times: vec![0.0, 2.0],
            frames: (0..2).map(|_| (0..g.spatial_cells()).map(|_| rng.gen()).collect()).collect(),
        });
        let r = compare_runs(&a, &a, 5.0).unwrap();
        assert_eq!(r.norm_j, 0.0);
        assert_eq!(r.norm_u, 0.0);
        assert_eq!(r.norm_rho, Some(0.0));
    }

    #[test]
    fn constant_offset_of_one_agent() {
        let a = control(vec![1.0, 2.0, 0.5, -1.0, 3.0, 0.0], 1);
        let b = a.with_values(a.values().iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 0.7 } else { *v }).collect())
            .unwrap();
        let d = control_distance(&b, &a, 5.0).unwrap();
        assert!((d - 0.7 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn closed_form_differences() {
        // J − J_ref = t − 1 on [0, 2]: 1/2 ∫ |t − 1| dt = 1/2
        let a = series(vec![0.0, 0.5, 1.0, 1.5, 2.0], control(vec![0.0; 4], 1));
        let b = series(vec![1.0; 5], control(vec![0.0; 4], 1));
        assert!((cost_distance(&a, &b) - 0.5).abs() < 1e-15);
        // crossing inside an interval: 1/2 ∫ |t − 1| dt with nodes 0 and 2 only
        let a2 = series(vec![0.0, 2.0], control(vec![0.0; 4], 1));
        let b2 = series(vec![1.0, 1.0], control(vec![0.0; 4], 1));
        assert!((cost_distance(&a2, &b2) - 0.5).abs() < 1e-15);
        // |Δu| = 3 on the first slice, 4 on the second, two agents:
        // (3 + 4) / (2 · 2 · 5)
        let ua = control(vec![3.0, 0.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0], 2);
        let ub = control(vec![0.0; 8], 2);
        assert!((control_distance(&ua, &ub, 5.0).unwrap() - 7.0 / 20.0).abs() < 1e-15);
        // densities differing by a constant c on one cell at t = 0, zero at
        // t = 2: trapezoid gives ½ c Δx² / L²
        let g = grid();
        let mut f0 = vec![0.0; g.spatial_cells()];
        f0[3] = 0.8;
        let da = DensitySeries {
            grid: g,
            times: vec![0.0, 2.0],
            frames: vec![f0, vec![0.0; g.spatial_cells()]],
        };
        let db = DensitySeries {
            grid: g,
            times: vec![0.0, 2.0],
            frames: vec![vec![0.0; g.spatial_cells()]; 2],
        };
        let want = 0.5 * 0.8 * g.cell_area() / 400.0;
        assert!((density_distance(&da, &db).unwrap() - want).abs() < 1e-10 * want);
    }

    #[test]
    fn norms_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let a = series(rand_vec(9), control(rand_vec(8), 2));
        let b = series(rand_vec(5), control(rand_vec(12), 2));
        let ab = compare_runs(&a, &b, 5.0).unwrap();
        let ba = compare_runs(&b, &a, 5.0).unwrap();
        assert!((ab.norm_j - ba.norm_j).abs() < 1e-15);
        assert!((ab.norm_u - ba.norm_u).abs() < 1e-15);
    }

    #[test]
    fn common_refinement_leaves_norms_unchanged() {
        // refining both time grids with linearly interpolated nodes and
        // splitting every control slice
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cost_a: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
        let cost_b: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
        let ua: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
        let ub: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
        let refine = |c: &[f64]| -> Vec<f64> {
            let mut out = Vec::new();
            for w in c.windows(2) {
                out.push(w[0]);
                out.push(0.5 * (w[0] + w[1]));
            }
            out.push(*c.last().unwrap());
            out
        };
        let split = |u: &[f64]| -> Vec<f64> { u.chunks(2).flat_map(|s| [s[0], s[1], s[0], s[1]]).collect() };
        let coarse = compare_runs(
            &series(cost_a.clone(), control(ua.clone(), 1)),
            &series(cost_b.clone(), control(ub.clone(), 1)),
            5.0,
        )
        .unwrap();
        let fine = compare_runs(
            &series(refine(&cost_a), control(split(&ua), 1)),
            &series(refine(&cost_b), control(split(&ub), 1)),
            5.0,
        )
        .unwrap();
        assert!((coarse.norm_u - fine.norm_u).abs() < 1e-12);
        assert!((coarse.norm_j - fine.norm_j).abs() < 1e-12);
    }

    #[test]
    fn mismatched_density_grids_drop_the_density_norm() {
        let g = grid();
        let h = PhaseGrid::new(10.0, 1.0, [5, 4], [4, 4]).unwrap();
        let frames = |g: &PhaseGrid| vec![vec![0.0; g.spatial_cells()]; 2];
        let mut a = series(vec![0.0; 3], control(vec![0.0; 2], 1));
        let mut b = a.clone();
        a.density = Some(DensitySeries { grid: g, times: vec![0.0, 2.0], frames: frames(&g) });
        b.density = Some(DensitySeries { grid: h, times: vec![0.0, 2.0], frames: frames(&h) });
        assert_eq!(compare_runs(&a, &b, 5.0).unwrap().norm_rho, None);
        assert!(density_distance(a.density.as_ref().unwrap(), b.density.as_ref().unwrap()).is_err());
    }

    #[test]
    fn study_against_itself_is_a_zero_row() {
        let cfgs = vec![("only".to_string(), 1.0f64)];
        let run = |label: &str, scale: &f64| -> Result<RunSeries> {
            let mut s = series(vec![0.0, *scale, 2.0], control(vec![1.0, 1.0], 1));
            s.label = label.into();
            Ok(s)
        };
        let t = convergence_study(&cfgs, &cfgs[0], 5.0, run).unwrap();
        let r = t.column("only").unwrap().report.unwrap();
        assert_eq!((r.norm_j, r.norm_u), (0.0, 0.0));
        assert!(t.to_csv().starts_with("norm,only\nnorm_J,0.0"));
    }
}
