//! Mean-field level: Strang-split forward solves of the Vlasov equation, the
//! exact reverse of that discrete map, and the reduced gradient.
//!
//! One step of length `dt` is
//!
//! 1. half a velocity step under `F(f, d)`,
//! 2. a full free-transport step (semi-Lagrangian with clipping of the
//!    interpolation undershoot, or flux form),
//! 3. the agents advance by `dt·u`,
//! 4. half a velocity step under `F` evaluated on the shifted density and the
//!    moved agents.
//!
//! The backward sweep replays each step from its stored (or recomputed)
//! starting density and pulls the cotangent through the four stages in
//! reverse, so the gradient is that of the discrete reduced cost.

use rayon::prelude::*;

use super::checkpoint::{plan_storage, SnapshotStore, StorageConfig, StoragePlan};
use super::force::{interaction_field, interaction_field_vjp, ConvolutionTable};
use super::grid::{spatial_density, DensityField, PhaseGrid, SpatialMoments};
use super::semilagrangian::{shift, shift_transpose};
use super::transport::{transport, transport_vjp, TransportScheme};
use super::velocity::{advance_plane, advance_plane_vjp, LineWork};
use crate::error::{Error, Result};
use crate::model::{
    running_cost_parts, ControlSchedule, CostParts, CostQuadrature, CostWeights, InteractionModel,
    Observation,
};
use crate::optimize::{ControlledSystem, ReducedProblem};

/// Negative mass beyond this, produced in one step or left in the density,
/// means the discretisation has broken down.
pub const NEGATIVE_MASS_LIMIT: f64 = 1e-3;

/// Density plus agent positions (flat `M×2`).
#[derive(Debug, Clone, PartialEq)]
pub struct MfState {
    pub field: DensityField,
    pub agents: Vec<f64>,
}

impl MfState {
    pub fn new(field: DensityField, agents: Vec<f64>) -> Result<Self> {
        if agents.is_empty() || !agents.len().is_multiple_of(2) {
            return Err(Error::shape("agent positions must be a non-empty list of 2-D points"));
        }
        Ok(MfState { field, agents })
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len() / 2
    }
}

/// Grid, model and time stepping shared by every mean-field solve.
#[derive(Debug, Clone)]
pub struct MfConfig {
    pub grid: PhaseGrid,
    pub model: InteractionModel,
    /// Steps per control slice; `None` picks half the CFL limit.
    pub steps_per_slice: Option<usize>,
    pub storage: StorageConfig,
    pub transport: TransportScheme,
}

impl MfConfig {
    pub fn new(grid: PhaseGrid, model: InteractionModel) -> Self {
        MfConfig {
            grid,
            model,
            steps_per_slice: None,
            storage: StorageConfig::default(),
            transport: TransportScheme::default(),
        }
    }

    /// Steps for every slice of `control`, checked against the CFL bound.
    pub fn steps_for(&self, control: &ControlSchedule) -> Result<usize> {
        let longest = (0..control.slices())
            .map(|k| control.slice_len(k))
            .fold(0.0, f64::max);
        let sps = match self.steps_per_slice {
            Some(0) => return Err(Error::invalid("steps per slice must be positive")),
            Some(s) => s,
            None => (longest / (0.5 * self.grid.max_time_step()) - 1e-9).ceil().max(1.0) as usize,
        };
        self.grid.check_cfl(longest / sps as f64)?;
        Ok(sps)
    }
}

pub(crate) struct Stepper<'a> {
    grid: PhaseGrid,
    model: &'a InteractionModel,
    table: Option<ConvolutionTable>,
    scheme: TransportScheme,
}

impl<'a> Stepper<'a> {
    pub fn new(config: &'a MfConfig) -> Self {
        let model = &config.model;
        let grid = config.grid;
        let table = (!model.phi1.is_zero()).then(|| ConvolutionTable::new(&grid, &model.phi1));
        Stepper {
            grid,
            model,
            table,
            scheme: config.transport,
        }
    }

    /// Free transport of `input`. The flux form leaves its intermediate in
    /// `mid`; the semi-Lagrangian shift leaves the unclipped result there and
    /// returns the clipped mass.
    fn transport(&self, dt: f64, input: &[f64], mid: &mut [f64], output: &mut [f64]) -> f64 {
        match self.scheme {
            TransportScheme::FluxForm => {
                transport(&self.grid, dt, input, mid, output);
                0.0
            }
            TransportScheme::SemiLagrangian => {
                shift(&self.grid, dt, input, mid);
                let mut clipped = 0.0;
                for (o, m) in output.iter_mut().zip(mid.iter()) {
                    if *m < 0.0 {
                        clipped -= m;
                        *o = 0.0;
                    } else {
                        *o = *m;
                    }
                }
                clipped * self.grid.cell_volume()
            }
        }
    }

    /// Reverse of [`Self::transport`]; `bar` is replaced by the input
    /// cotangent, both scratch fields are overwritten.
    fn transport_vjp(
        &self,
        dt: f64,
        input: &[f64],
        mid: &[f64],
        bar: &mut Vec<f64>,
        scratch: &mut Vec<f64>,
        scratch2: &mut [f64],
    ) {
        match self.scheme {
            TransportScheme::FluxForm => {
                scratch.copy_from_slice(bar);
                transport_vjp(&self.grid, dt, input, mid, scratch, scratch2, bar);
            }
            TransportScheme::SemiLagrangian => {
                for (b, m) in bar.iter_mut().zip(mid) {
                    if *m < 0.0 {
                        *b = 0.0;
                    }
                }
                shift_transpose(&self.grid, dt, bar, scratch);
                std::mem::swap(bar, scratch);
            }
        }
    }

    fn forces(&self, values: &[f64], agents: &[f64]) -> Vec<[f64; 2]> {
        let rho = spatial_density(&self.grid, values);
        interaction_field(&self.grid, self.table.as_ref(), &rho, agents, self.model)
    }

    fn velocity(&self, forces: &[[f64; 2]], dt: f64, values: &mut [f64]) {
        let nv = self.grid.velocity_cells();
        let (grid, alpha) = (&self.grid, self.model.friction);
        values
            .par_chunks_mut(nv)
            .zip(forces.par_iter())
            .for_each_init(LineWork::default, |w, (plane, f)| {
                if plane.iter().any(|v| *v != 0.0) {
                    advance_plane(grid, alpha, *f, dt, plane, w);
                }
            });
    }

    /// Reverse of [`Self::velocity`] at input `values`; `bar` is overwritten
    /// with the input cotangent and the force cotangent is returned.
    fn velocity_vjp(&self, forces: &[[f64; 2]], dt: f64, values: &[f64], bar: &mut [f64]) -> Vec<[f64; 2]> {
        let nv = self.grid.velocity_cells();
        let (grid, alpha) = (&self.grid, self.model.friction);
        bar.par_chunks_mut(nv)
            .zip(values.par_chunks(nv))
            .zip(forces.par_iter())
            .map_init(LineWork::default, |w, ((b, plane), f)| {
                if plane.iter().any(|v| *v != 0.0) {
                    advance_plane_vjp(grid, alpha, *f, dt, plane, b, w)
                } else {
                    [0.0; 2]
                }
            })
            .collect()
    }

    /// Pulls a force cotangent back onto `bar` (density) and `d_bar`.
    fn forces_vjp(&self, agents: &[f64], fbar: &[[f64; 2]], bar: &mut [f64], d_bar: &mut [f64]) {
        let (rho_bar, db) = interaction_field_vjp(&self.grid, self.table.as_ref(), agents, self.model, fbar);
        let nv = self.grid.velocity_cells();
        let dw = self.grid.velocity_area();
        bar.par_chunks_mut(nv).zip(rho_bar.par_iter()).for_each(|(plane, r)| {
            if *r != 0.0 {
                plane.iter_mut().for_each(|b| *b += r * dw);
            }
        });
        for (o, v) in d_bar.iter_mut().zip(db) {
            *o += v;
        }
    }

    /// One Strang step in place. Returns the mass added by clipping and
    /// the negative mass left in the result.
    pub fn step(
        &self,
        values: &mut Vec<f64>,
        work: &mut StepWork,
        agents: &mut [f64],
        u: &[f64],
        dt: f64,
        t: f64,
    ) -> Result<(f64, f64)> {
        let fa = self.forces(values, agents);
        self.velocity(&fa, 0.5 * dt, values);
        work.mid.resize(values.len(), 0.0);
        work.next.resize(values.len(), 0.0);
        let clipped = self.transport(dt, values, &mut work.mid, &mut work.next);
        if clipped > NEGATIVE_MASS_LIMIT {
            return Err(Error::NegativeMass { time: t, min: -clipped });
        }
        std::mem::swap(values, &mut work.next);
        for (d, v) in agents.iter_mut().zip(u) {
            *d += dt * v;
        }
        let fb = self.forces(values, agents);
        self.velocity(&fb, 0.5 * dt, values);
        if fb.iter().chain(&fa).any(|f| !f[0].is_finite() || !f[1].is_finite()) {
            return Err(Error::NonFinite {
                time: t,
                what: "interaction field".into(),
            });
        }
        let negative: f64 = values.iter().filter(|v| **v < 0.0).sum::<f64>() * self.grid.cell_volume();
        if negative < -NEGATIVE_MASS_LIMIT {
            return Err(Error::NegativeMass { time: t, min: negative });
        }
        Ok((clipped, negative))
    }
}

/// Scratch fields of a forward step.
#[derive(Default)]
pub(crate) struct StepWork {
    mid: Vec<f64>,
    next: Vec<f64>,
}

fn check_layout(initial: &MfState, control: &ControlSchedule) -> Result<()> {
    if control.dim() != 2 || control.agents() != initial.agent_count() {
        return Err(Error::shape(format!(
            "control has {} agents in {} dimensions, state has {} agents in 2",
            control.agents(),
            control.dim(),
            initial.agent_count()
        )));
    }
    Ok(())
}

/// Forward solve: moments and agents at every node, the final density, and
/// the densities the backward sweep needs.
pub struct ForwardRecordMF {
    pub times: Vec<f64>,
    pub agents: Vec<Vec<f64>>,
    pub moments: Vec<SpatialMoments>,
    pub final_field: DensityField,
    pub steps_per_slice: usize,
    /// Total mass added by clipping interpolation undershoot.
    pub clipped_mass: f64,
    /// Most negative total of negative cell masses seen at any node.
    pub negative_mass: f64,
    store: SnapshotStore,
    control: Vec<f64>,
}

impl ForwardRecordMF {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn storage_plan(&self) -> StoragePlan {
        self.store.plan()
    }

    pub fn final_state(&self) -> MfState {
        MfState {
            field: self.final_field.clone(),
            agents: self.agents.last().unwrap().clone(),
        }
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.times
            .iter()
            .zip(&self.moments)
            .zip(&self.agents)
            .map(|((&t, m), d)| Observation {
                t,
                mean: m.mean.to_vec(),
                variance: m.variance,
                agents: d.clone(),
            })
            .collect()
    }

    /// Largest deviation of the discrete mass from its initial value.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.moments[0].mass;
        self.moments.iter().map(|m| (m.mass - m0).abs()).fold(0.0, f64::max)
    }
}

fn slice_step(control: &ControlSchedule, sps: usize, n: usize) -> (usize, f64) {
    let k = n / sps;
    (k, control.slice_len(k) / sps as f64)
}

fn node_time(control: &ControlSchedule, sps: usize, n: usize) -> f64 {
    let (k, j) = (n / sps, n % sps);
    if j == 0 {
        control.knots()[k]
    } else {
        control.knots()[k] + j as f64 * control.slice_len(k) / sps as f64
    }
}

pub fn integrate_mf_forward(initial: &MfState, control: &ControlSchedule, config: &MfConfig) -> Result<ForwardRecordMF> {
    check_layout(initial, control)?;
    let grid = config.grid;
    if initial.field.grid != grid {
        return Err(Error::shape("initial density lives on a different grid"));
    }
    let sps = config.steps_for(control)?;
    let steps = sps * control.slices();
    let plan = plan_storage(steps, grid.bytes_per_field(), &config.storage)?;
    let mut store = SnapshotStore::new(plan, grid, &config.storage)?;
    let stepper = Stepper::new(config);

    let mut values = initial.field.values.clone();
    let mut work = StepWork::default();
    let mut agents = initial.agents.clone();
    let mut times = Vec::with_capacity(steps + 1);
    let mut traj = Vec::with_capacity(steps + 1);
    let mut moments = Vec::with_capacity(steps + 1);
    let mut negative: f64 = 0.0;
    let mut clipped = 0.0;
    times.push(control.start());
    traj.push(agents.clone());
    moments.push(SpatialMoments::of(&grid, &values));
    for n in 0..steps {
        store.offer(n, &values, times[n])?;
        let (k, dt) = slice_step(control, sps, n);
        let t = if n + 1 == steps {
            control.end()
        } else {
            node_time(control, sps, n + 1)
        };
        let (c, neg) = stepper.step(&mut values, &mut work, &mut agents, control.slice(k), dt, t)?;
        clipped += c;
        negative = negative.min(neg);
        let m = SpatialMoments::of(&grid, &values);
        if !m.variance.is_finite() || !m.mass.is_finite() {
            return Err(Error::NonFinite {
                time: t,
                what: "density".into(),
            });
        }
        times.push(t);
        traj.push(agents.clone());
        moments.push(m);
    }
    Ok(ForwardRecordMF {
        times,
        agents: traj,
        moments,
        final_field: DensityField { grid, values },
        steps_per_slice: sps,
        clipped_mass: clipped,
        negative_mass: negative,
        store,
        control: control.values().to_vec(),
    })
}

pub fn evaluate_mf_cost(
    record: &ForwardRecordMF,
    control: &ControlSchedule,
    weights: &CostWeights,
    quadrature: CostQuadrature,
) -> CostParts {
    let w = quadrature.node_weights(&record.times, weights.horizon);
    let mut parts = CostParts::default();
    for (m, wn) in record.moments.iter().zip(&w) {
        if *wn == 0.0 {
            continue;
        }
        let p = running_cost_parts(&m.mean, m.variance, &[], weights);
        parts.j1 += wn * p.j1;
        parts.j2 += wn * p.j2;
    }
    parts.j3 = quadrature.control_cost(control, weights);
    parts
}

/// Adds `scale · ∂ℓ/∂f` for the unnormalised moments `m`.
fn add_cost_source(grid: &PhaseGrid, m: &SpatialMoments, weights: &CostWeights, scale: f64, bar: &mut [f64]) {
    let mu = grid.cell_volume();
    let e = m.mean;
    let a = 0.5 * weights.sigma1 * (m.variance - weights.target_variance);
    let b = [
        weights.sigma2 * (e[0] - weights.destination[0]),
        weights.sigma2 * (e[1] - weights.destination[1]),
    ];
    let nv = grid.velocity_cells();
    bar.par_chunks_mut(nv).enumerate().for_each(|(s, plane)| {
        let x = grid.spatial_center(s);
        let r2 = (x[0] - e[0]).powi(2) + (x[1] - e[1]).powi(2);
        let xe = x[0] * e[0] + x[1] * e[1];
        let dl = a * (r2 - 2.0 * xe * (1.0 - m.mass)) + b[0] * x[0] + b[1] * x[1];
        let c = scale * mu * dl;
        plane.iter_mut().for_each(|v| *v += c);
    });
}

/// Serves step-start densities to the backward sweep, recomputing the
/// segment between two checkpoints when it is first touched.
struct RecordReader<'r> {
    record: &'r ForwardRecordMF,
    control: &'r ControlSchedule,
    stepper: &'r Stepper<'r>,
    segment: Option<usize>,
    buffer: Vec<Vec<f64>>,
    work: StepWork,
    recomputed_steps: usize,
}

impl<'r> RecordReader<'r> {
    fn get(&mut self, n: usize) -> Result<&[f64]> {
        let record: &'r ForwardRecordMF = self.record;
        let every = record.store.every();
        if every == 1 {
            if let Some(v) = record.store.borrow(n) {
                return Ok(v);
            }
        }
        let c = n / every;
        if self.segment != Some(c) {
            self.fill(c)?;
        }
        Ok(&self.buffer[n - c * every])
    }

    fn fill(&mut self, c: usize) -> Result<()> {
        let every = self.record.store.every();
        let first = c * every;
        let len = every.min(self.record.steps() - first);
        self.buffer.resize_with(len, Vec::new);
        self.record.store.load(c, &mut self.buffer[0])?;
        let sps = self.record.steps_per_slice;
        for j in 1..len {
            let n = first + j - 1;
            let (prev, rest) = self.buffer.split_at_mut(j);
            rest[0].clone_from(&prev[j - 1]);
            let mut agents = self.record.agents[n].clone();
            let (k, dt) = slice_step(self.control, sps, n);
            self.stepper
                .step(&mut rest[0], &mut self.work, &mut agents, self.control.slice(k), dt, self.record.times[n + 1])?;
            self.recomputed_steps += 1;
        }
        self.segment = Some(c);
        Ok(())
    }
}

/// Adjoint in the sign convention `g = −(1/μ) ∂J/∂f`, `φ = −∂J/∂d`.
#[derive(Debug, Clone)]
pub struct AdjointMF {
    pub times: Vec<f64>,
    /// Agent adjoint at every node.
    pub phi: Vec<Vec<f64>>,
    /// Density adjoint at the initial time.
    pub g0: Vec<f64>,
    /// Density adjoint at every node, newest last, when requested.
    pub g: Option<Vec<Vec<f64>>>,
    /// `∂J/∂u_k` per slice, flat `K×M×2`.
    pub control_adjoint: Vec<f64>,
    /// Forward steps replayed to rebuild unstored densities.
    pub recomputed_steps: usize,
}

pub fn integrate_mf_adjoint(
    record: &ForwardRecordMF,
    control: &ControlSchedule,
    config: &MfConfig,
    weights: &CostWeights,
    quadrature: CostQuadrature,
    keep_density_adjoint: bool,
) -> Result<AdjointMF> {
    if record.control.as_slice() != control.values()
        || record.steps() != record.steps_per_slice * control.slices()
        || record.final_field.grid != config.grid
    {
        return Err(Error::Record("forward record does not belong to this control".into()));
    }
    let grid = config.grid;
    let steps = record.steps();
    let sps = record.steps_per_slice;
    let stepper = Stepper::new(config);
    let node_w = quadrature.node_weights(&record.times, weights.horizon);
    let mu = grid.cell_volume();
    let len = grid.len();
    let to_g = |bar: &[f64]| -> Vec<f64> { bar.iter().map(|b| -b / mu).collect() };

    let mut reader = RecordReader {
        record,
        control,
        stepper: &stepper,
        segment: None,
        buffer: Vec::new(),
        work: StepWork::default(),
        recomputed_steps: 0,
    };
    let mut bar = vec![0.0; len];
    let mut tmp = vec![0.0; len];
    let mut f1 = vec![0.0; len];
    let mut mid = vec![0.0; len];
    let mut f2 = vec![0.0; len];
    let mut d_bar = vec![0.0; control.agents() * 2];
    let mut ubar = vec![0.0; control.values().len()];
    let mut phi = vec![Vec::new(); steps + 1];
    phi[steps] = d_bar.clone();
    let mut g_all = keep_density_adjoint.then(|| vec![Vec::new(); steps + 1]);
    if let Some(g) = g_all.as_mut() {
        g[steps] = to_g(&bar);
    }

    for n in (0..steps).rev() {
        if node_w[n + 1] != 0.0 {
            add_cost_source(&grid, &record.moments[n + 1], weights, node_w[n + 1], &mut bar);
        }
        let (k, dt) = slice_step(control, sps, n);
        let d0 = &record.agents[n];
        let d1 = &record.agents[n + 1];

        // replay the step
        let f0 = reader.get(n)?;
        let fa = stepper.forces(f0, d0);
        f1.copy_from_slice(f0);
        stepper.velocity(&fa, 0.5 * dt, &mut f1);
        stepper.transport(dt, &f1, &mut mid, &mut f2);
        let fb = stepper.forces(&f2, d1);

        // second velocity half step and its force
        let fb_bar = stepper.velocity_vjp(&fb, 0.5 * dt, &f2, &mut bar);
        stepper.forces_vjp(d1, &fb_bar, &mut bar, &mut d_bar);

        // agent motion
        let ub = &mut ubar[k * d_bar.len()..(k + 1) * d_bar.len()];
        for (o, v) in ub.iter_mut().zip(&d_bar) {
            *o += dt * v;
        }

        // transport, with f2 as scratch
        stepper.transport_vjp(dt, &f1, &mid, &mut bar, &mut f2, &mut tmp);

        // first velocity half step and its force
        let f0 = reader.get(n)?;
        let fa_bar = stepper.velocity_vjp(&fa, 0.5 * dt, f0, &mut bar);
        stepper.forces_vjp(d0, &fa_bar, &mut bar, &mut d_bar);

        if bar.iter().any(|v| !v.is_finite()) || d_bar.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                time: record.times[n],
                what: "mean-field adjoint".into(),
            });
        }
        phi[n] = d_bar.iter().map(|v| -v).collect();
        if let Some(g) = g_all.as_mut() {
            g[n] = to_g(&bar);
        }
    }
    if node_w[0] != 0.0 {
        add_cost_source(&grid, &record.moments[0], weights, node_w[0], &mut bar);
    }
    Ok(AdjointMF {
        times: record.times.clone(),
        phi,
        g0: to_g(&bar),
        g: g_all,
        control_adjoint: ubar,
        recomputed_steps: reader.recomputed_steps,
    })
}

/// Riesz representative of the reduced gradient in the discrete L² product.
pub fn assemble_mf_gradient(
    adjoint: &AdjointMF,
    control: &ControlSchedule,
    weights: &CostWeights,
    quadrature: CostQuadrature,
) -> ControlSchedule {
    let mut g = control.zeros_like();
    let w = control.agents() * control.dim();
    for k in 0..control.slices() {
        let dt = control.slice_len(k);
        for (gi, ui) in g.slice_mut(k).iter_mut().zip(&adjoint.control_adjoint[k * w..(k + 1) * w]) {
            *gi = ui / dt;
        }
    }
    quadrature.add_control_gradient(control, weights, &mut g);
    g
}

pub fn reduced_gradient_mf(
    control: &ControlSchedule,
    initial: &MfState,
    config: &MfConfig,
    weights: &CostWeights,
) -> Result<ControlSchedule> {
    let record = integrate_mf_forward(initial, control, config)?;
    let adj = integrate_mf_adjoint(&record, control, config, weights, CostQuadrature::Trapezoid, false)?;
    Ok(assemble_mf_gradient(&adj, control, weights, CostQuadrature::Trapezoid))
}

/// Reduced cost `Ĵ` at the mean-field level with a one-entry forward cache.
pub struct MfProblem {
    pub initial: MfState,
    pub config: MfConfig,
    pub weights: CostWeights,
    pub quadrature: CostQuadrature,
    template: ControlSchedule,
    cache: Option<ForwardRecordMF>,
    forward_solves: usize,
}

impl MfProblem {
    pub fn new(
        initial: MfState,
        config: MfConfig,
        weights: CostWeights,
        template: ControlSchedule,
        quadrature: CostQuadrature,
    ) -> Result<Self> {
        check_layout(&initial, &template)?;
        config.model.validate()?;
        weights.validate()?;
        config.steps_for(&template)?;
        Ok(MfProblem {
            initial,
            config,
            weights,
            quadrature,
            template: template.zeros_like(),
            cache: None,
            forward_solves: 0,
        })
    }

    pub fn forward(&mut self, control: &ControlSchedule) -> Result<&ForwardRecordMF> {
        let hit = matches!(&self.cache, Some(r) if r.control.as_slice() == control.values());
        if !hit {
            self.cache = None;
            let rec = integrate_mf_forward(&self.initial, control, &self.config)?;
            self.forward_solves += 1;
            self.cache = Some(rec);
        }
        Ok(self.cache.as_ref().unwrap())
    }

    pub fn forward_solves(&self) -> usize {
        self.forward_solves
    }
}

impl ReducedProblem for MfProblem {
    fn template(&self) -> &ControlSchedule {
        &self.template
    }

    fn cost(&mut self, control: &ControlSchedule) -> Result<CostParts> {
        let (weights, quad) = (self.weights.clone(), self.quadrature);
        let rec = self.forward(control)?;
        Ok(evaluate_mf_cost(rec, control, &weights, quad))
    }

    fn gradient(&mut self, control: &ControlSchedule) -> Result<ControlSchedule> {
        let (weights, quad) = (self.weights.clone(), self.quadrature);
        self.forward(control)?;
        let rec = self.cache.as_ref().unwrap();
        let adj = integrate_mf_adjoint(rec, control, &self.config, &weights, quad, false)?;
        Ok(assemble_mf_gradient(&adj, control, &weights, quad))
    }
}

/// The mean-field level as a [`ControlledSystem`].
#[derive(Debug, Clone)]
pub struct MeanFieldSystem {
    pub config: MfConfig,
    pub weights: CostWeights,
}

impl ControlledSystem for MeanFieldSystem {
    type State = MfState;
    type Problem = MfProblem;

    fn problem(&self, initial: &MfState, template: &ControlSchedule, quadrature: CostQuadrature) -> Result<MfProblem> {
        MfProblem::new(
            initial.clone(),
            self.config.clone(),
            self.weights.clone(),
            template.clone(),
            quadrature,
        )
    }

    fn rollout(
        &self,
        initial: &MfState,
        control: &ControlSchedule,
        observer: &mut dyn FnMut(f64, &MfState),
    ) -> Result<MfState> {
        check_layout(initial, control)?;
        let sps = self.config.steps_for(control)?;
        let stepper = Stepper::new(&self.config);
        let mut state = initial.clone();
        let mut work = StepWork::default();
        let steps = sps * control.slices();
        for n in 0..steps {
            let (k, dt) = slice_step(control, sps, n);
            let t = if n + 1 == steps {
                control.end()
            } else {
                node_time(control, sps, n + 1)
            };
            stepper.step(&mut state.field.values, &mut work, &mut state.agents, control.slice(k), dt, t)?;
            observer(t, &state);
        }
        Ok(state)
    }

    fn observe(&self, t: f64, state: &MfState) -> Observation {
        let m = state.field.moments();
        Observation {
            t,
            mean: m.mean.to_vec(),
            variance: m.variance,
            agents: state.agents.clone(),
        }
    }
}
