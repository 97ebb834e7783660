//! One experiment: build the initial state, drive the chosen strategy on the
//! chosen level, and collect what the reports and comparisons need.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{InitialControl, Level, RunConfig, Strategy};
use crate::error::{Error, Result};
use crate::meanfield::{
    plan_storage, sample_initial_density, DensityField, MeanFieldSystem, MfConfig, MfState, PhaseGrid,
};
use crate::metrics::{histogram_density, DensitySeries, RunSeries};
use crate::micro::ParticleSystem;
use crate::model::{
    moments, running_cost_parts, ControlSchedule, CostParts, CostQuadrature, CostWeights, MicroState, Observation,
};
use crate::optimize::{run_instantaneous_control, run_optimal_control, ControlledSystem, OptimizerReport};

/// A state handed to the snapshot sink.
pub enum Snapshot<'a> {
    Particles { t: f64, state: &'a MicroState },
    Density { t: f64, field: &'a DensityField, agents: &'a [f64] },
}

/// Moments, agents and running-cost parts at one solver node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub t: f64,
    pub mean: [f64; 2],
    pub variance: f64,
    pub mass: f64,
    pub agents: Vec<f64>,
    /// `σ1/4(V − V̄)²`, `σ2/2|E − E_des|²` and `σ3/(2M)|u|²` at `t`, without
    /// the `1/T` of the cost functional.
    pub parts: CostParts,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub control: ControlSchedule,
    pub report: Option<OptimizerReport>,
    pub nodes: Vec<NodeRecord>,
    /// Spatial densities at every control knot on the comparison grid.
    pub density: DensitySeries,
    pub weights: CostWeights,
    /// Estimated peak bytes of the state records held at once.
    pub peak_bytes: u64,
    pub warnings: Vec<String>,
}

impl RunOutcome {
    pub fn series(&self, label: &str) -> RunSeries {
        RunSeries {
            label: label.to_string(),
            times: self.nodes.iter().map(|n| n.t).collect(),
            cost: self.nodes.iter().map(|n| n.parts.total()).collect(),
            control: self.control.clone(),
            density: Some(self.density.clone()),
        }
    }

    pub fn final_node(&self) -> &NodeRecord {
        self.nodes.last().unwrap()
    }

    /// Largest deviation of the crowd mass from its initial value.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.nodes[0].mass;
        self.nodes.iter().map(|n| (n.mass - m0).abs()).fold(0.0, f64::max)
    }
}

/// Particles drawn one at a time (position, then velocity), so that the
/// first `n` particles of a larger sample with the same seed coincide.
pub fn sample_particles(config: &RunConfig) -> Result<MicroState> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.run.seed);
    let n = config.micro.particles;
    let [[x0, x1], [y0, y1]] = config.crowd.support;
    let width = config.micro.velocity_width;
    let normal = Normal::new(0.0, width.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut positions = Vec::with_capacity(2 * n);
    let mut velocities = Vec::with_capacity(2 * n);
    for _ in 0..n {
        positions.push(rng.gen_range(x0..x1));
        positions.push(rng.gen_range(y0..y1));
        for _ in 0..2 {
            let v = normal.sample(&mut rng);
            velocities.push(if width > 0.0 { v } else { 0.0 });
        }
    }
    MicroState::new(2, positions, velocities, config.agent_positions())
}

pub fn initial_density(config: &RunConfig) -> Result<MfState> {
    let grid = config.grid()?;
    let field = sample_initial_density(&grid, config.crowd.support, config.velocity_profile())?;
    MfState::new(field, config.agent_positions())
}

pub fn control_layout(config: &RunConfig) -> Result<ControlSchedule> {
    ControlSchedule::uniform(
        0.0,
        config.run.horizon,
        config.run.slices,
        config.agents.count,
        2,
        config.control.speed_cap,
    )
}

/// Starting control of the optimal-control iteration.
pub fn initial_control(config: &RunConfig, layout: &ControlSchedule) -> Result<ControlSchedule> {
    match config.control.initial {
        InitialControl::Zero => Ok(layout.zeros_like()),
        InitialControl::TowardDestination => {
            let dest = config.scenario.destination;
            let speed = 0.5 * config.control.speed_cap;
            let velocity: Vec<f64> = config
                .agent_positions()
                .chunks(2)
                .flat_map(|d| {
                    let (dx, dy) = (dest[0] - d[0], dest[1] - d[1]);
                    let r = dx.hypot(dy);
                    if r > 0.0 {
                        [speed * dx / r, speed * dy / r]
                    } else {
                        [0.0, 0.0]
                    }
                })
                .collect();
            ControlSchedule::constant(0.0, layout.horizon(), layout.slices(), &velocity, 2, layout.speed_cap())
        }
    }
}

/// Runs the strategy of `config` on `system`; `observer` sees every solver
/// node of the final trajectory, the initial one included.
fn drive<S: ControlledSystem>(
    system: &S,
    initial: &S::State,
    layout: &ControlSchedule,
    config: &RunConfig,
    observer: &mut dyn FnMut(f64, &S::State),
) -> Result<(ControlSchedule, Option<OptimizerReport>)> {
    match config.run.strategy {
        Strategy::None => {
            let zero = layout.zeros_like();
            observer(layout.start(), initial);
            system.rollout(initial, &zero, observer)?;
            Ok((zero, None))
        }
        Strategy::Ic => {
            let (c, report, _) = run_instantaneous_control(system, initial, layout, &config.ic_settings(), observer)?;
            Ok((c, Some(report)))
        }
        Strategy::Oc => {
            let c = {
                let mut problem = system.problem(initial, layout, CostQuadrature::Trapezoid)?;
                let c0 = initial_control(config, layout)?;
                run_optimal_control(&mut problem, &c0, &config.oc_settings())?
            };
            observer(layout.start(), initial);
            system.rollout(initial, &c.0, observer)?;
            Ok((c.0, Some(c.1)))
        }
    }
}

/// Index of the knot at `t`, if `t` is one.
fn knot_at(layout: &ControlSchedule, t: f64) -> Option<usize> {
    let tol = 1e-9 * layout.horizon();
    let k = layout.knots().partition_point(|&s| s < t - tol);
    (k < layout.knots().len() && (layout.knots()[k] - t).abs() <= tol).then_some(k)
}

struct Collector<'a> {
    layout: &'a ControlSchedule,
    snapshot_every: usize,
    observations: Vec<(Observation, f64)>,
    frames: Vec<Vec<f64>>,
    frame_times: Vec<f64>,
    overflow: usize,
    sink_error: Option<Error>,
}

impl<'a> Collector<'a> {
    fn new(layout: &'a ControlSchedule, snapshot_every: usize) -> Self {
        Collector {
            layout,
            snapshot_every,
            observations: Vec::new(),
            frames: Vec::new(),
            frame_times: Vec::new(),
            overflow: 0,
            sink_error: None,
        }
    }

    /// Whether a snapshot is due at knot `k`.
    fn snapshot_due(&self, k: usize) -> bool {
        self.snapshot_every > 0 && (k.is_multiple_of(self.snapshot_every) || k == self.layout.slices())
    }

    fn keep(&mut self, r: Result<()>) {
        if let Err(e) = r {
            self.sink_error.get_or_insert(e);
        }
    }
}

fn finish(
    collector: Collector,
    control: &ControlSchedule,
    weights: &CostWeights,
    grid: PhaseGrid,
    report: Option<OptimizerReport>,
    peak_bytes: u64,
    mut warnings: Vec<String>,
) -> Result<RunOutcome> {
    if let Some(e) = collector.sink_error {
        return Err(e);
    }
    if collector.overflow > 0 {
        warnings.push(format!(
            "{} particle positions fell outside the histogram grid",
            collector.overflow
        ));
    }
    let last = control.slices() - 1;
    let nodes = collector
        .observations
        .into_iter()
        .map(|(o, mass)| {
            // right-continuous control, the last slice at the end
            let k = control.slice_index(o.t).min(last);
            let parts = running_cost_parts(&o.mean, o.variance, control.slice(k), weights);
            NodeRecord {
                t: o.t,
                mean: [o.mean[0], o.mean[1]],
                variance: o.variance,
                mass,
                agents: o.agents,
                parts,
            }
        })
        .collect();
    if let Some(r) = &report {
        if !r.stagnant_slices.is_empty() {
            warnings.push(format!("Armijo stagnated on slices {:?}", r.stagnant_slices));
        }
    }
    Ok(RunOutcome {
        control: control.clone(),
        report,
        nodes,
        density: DensitySeries {
            grid,
            times: collector.frame_times,
            frames: collector.frames,
        },
        weights: weights.clone(),
        peak_bytes,
        warnings,
    })
}

/// Runs the experiment of `config`, passing snapshots to `sink`.
pub fn execute(config: &RunConfig, sink: &mut dyn FnMut(Snapshot) -> Result<()>) -> Result<RunOutcome> {
    config.validate()?;
    let layout = control_layout(config)?;
    let grid = config.grid()?;
    let model = config.model();
    match config.run.level {
        Level::Micro => {
            let initial = sample_particles(config)?;
            let (_, var0) = moments(&initial.positions, 2);
            let weights = config.weights(var0);
            let system = ParticleSystem {
                model,
                weights: weights.clone(),
                steps_per_slice: config.micro.steps_per_slice,
            };
            let state_bytes = (8 * (initial.positions.len() * 2 + initial.agents.len())) as u64;
            let nodes = match config.run.strategy {
                Strategy::Oc => layout.slices() * config.micro.steps_per_slice + 1,
                _ => config.micro.steps_per_slice + 1,
            } as u64;
            // forward record and adjoint trajectory, plus the RK4 stages
            let peak = (2 * nodes + 8) * state_bytes;
            let mut col = Collector::new(&layout, config.output.snapshot_every);
            let (control, report) = drive(&system, &initial, &layout, config, &mut |t, s: &MicroState| {
                col.observations.push((system.observe(t, s), 1.0));
                if let Some(k) = knot_at(&layout, t) {
                    let h = histogram_density(&s.positions, &grid);
                    col.overflow += h.overflow;
                    col.frames.push(h.density);
                    col.frame_times.push(t);
                    if col.snapshot_due(k) {
                        let r = sink(Snapshot::Particles { t, state: s });
                        col.keep(r);
                    }
                }
            })?;
            finish(col, &control, &weights, grid, report, peak, Vec::new())
        }
        Level::Meanfield => {
            let initial = initial_density(config)?;
            let weights = config.weights(initial.field.moments().variance);
            let mut mf = MfConfig::new(grid, model);
            mf.steps_per_slice = config.meanfield.steps_per_slice;
            mf.storage = config.storage();
            mf.transport = config.meanfield.transport;
            let sps = mf.steps_for(&layout)?;
            let peak = match config.run.strategy {
                Strategy::None => 3 * grid.bytes_per_field(),
                Strategy::Ic => plan_storage(sps, grid.bytes_per_field(), &mf.storage)?.peak_bytes,
                Strategy::Oc => plan_storage(sps * layout.slices(), grid.bytes_per_field(), &mf.storage)?.peak_bytes,
            };
            let system = MeanFieldSystem {
                config: mf,
                weights: weights.clone(),
            };
            let mut col = Collector::new(&layout, config.output.snapshot_every);
            let (control, report) = drive(&system, &initial, &layout, config, &mut |t, s: &MfState| {
                let m = s.field.moments();
                col.observations.push((system.observe(t, s), m.mass));
                if let Some(k) = knot_at(&layout, t) {
                    col.frames.push(s.field.spatial_density());
                    col.frame_times.push(t);
                    if col.snapshot_due(k) {
                        let r = sink(Snapshot::Density {
                            t,
                            field: &s.field,
                            agents: &s.agents,
                        });
                        col.keep(r);
                    }
                }
            })?;
            let mut warnings = Vec::new();
            if let Some(budget) = config.meanfield.memory_budget {
                if peak > budget {
                    warnings.push(format!("estimated peak {peak} bytes exceeds the budget of {budget}"));
                }
            }
            finish(col, &control, &weights, grid, report, peak, warnings)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(level: &str, strategy: &str) -> RunConfig {
        RunConfig::load(
            None,
            &[
                format!("run.level={level}"),
                format!("run.strategy={strategy}"),
                "run.horizon=0.4".into(),
                "run.slices=4".into(),
                "micro.particles=12".into(),
                "micro.steps_per_slice=2".into(),
                "meanfield.grid=8".into(),
                "meanfield.velocity_grid=6".into(),
                "control.max_iterations=2".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn prefix_of_a_larger_sample_is_the_smaller_sample() {
        let mut c = quick("micro", "ic");
        c.micro.velocity_width = 0.5;
        let small = sample_particles(&c).unwrap();
        c.micro.particles = 30;
        let large = sample_particles(&c).unwrap();
        assert_eq!(small.positions[..], large.positions[..24]);
        assert_eq!(small.velocities[..], large.velocities[..24]);
    }

    #[test]
    fn ic_run_has_one_control_row_per_slice_and_a_frame_per_knot() {
        for level in ["micro", "meanfield"] {
            let out = execute(&quick(level, "ic"), &mut |_| Ok(())).unwrap();
            assert_eq!(out.control.slices(), 4);
            assert_eq!(out.report.as_ref().unwrap().iterations.len(), 4);
            assert_eq!(out.density.times.len(), 5);
            assert_eq!(out.nodes[0].t, 0.0);
            assert!((out.final_node().t - 0.4).abs() < 1e-15);
            assert!(out.control.is_feasible());
        }
    }

    #[test]
    fn baseline_keeps_agents_still() {
        let out = execute(&quick("micro", "none"), &mut |_| Ok(())).unwrap();
        assert_eq!(out.nodes[0].agents, out.final_node().agents);
        assert!(out.report.is_none());
    }

    #[test]
    fn snapshots_follow_the_stride() {
        let mut c = quick("meanfield", "none");
        c.output.snapshot_every = 3;
        let mut seen = Vec::new();
        execute(&c, &mut |s| {
            if let Snapshot::Density { t, .. } = s {
                seen.push(t);
            }
            Ok(())
        })
        .unwrap();
        // knots 0 and 3, and the final one
        assert_eq!(seen.len(), 3);
        assert_eq!(seen[0], 0.0);
    }

    #[test]
    fn oc_run_reports_a_non_increasing_cost() {
        let out = execute(&quick("micro", "oc"), &mut |_| Ok(())).unwrap();
        let costs = out.report.unwrap().costs();
        assert!(costs.windows(2).all(|w| w[1] <= w[0]));
    }
}
