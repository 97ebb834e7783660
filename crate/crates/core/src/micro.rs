//! Particle level: classic RK4 forward solves, the discrete adjoint of that
//! scheme, and the reduced gradient with respect to the agent velocities.
//!
//! The state is kept flat as `y = (x, v, d)`. The backward sweep is the exact
//! transpose of the forward RK4 map: stage states are recomputed from the
//! stored step-start snapshot rather than interpolated, so the assembled
//! gradient is the derivative of the discrete reduced cost up to round-off.

use crate::error::{Error, Result};
use crate::model::{
    add_state_cost_gradient, moments, ControlSchedule, CostParts, CostQuadrature, CostWeights,
    InteractionModel, MicroState, Observation,
};
use crate::optimize::{ControlledSystem, ReducedProblem};

/// Forward trajectory sampled at every RK4 step.
#[derive(Debug, Clone)]
pub struct ForwardRecordMicro {
    pub times: Vec<f64>,
    pub states: Vec<MicroState>,
    pub steps_per_slice: usize,
}

impl ForwardRecordMicro {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn final_state(&self) -> &MicroState {
        self.states.last().unwrap()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.times
            .iter()
            .zip(&self.states)
            .map(|(&t, s)| {
                let (mean, variance) = moments(&s.positions, s.dim);
                Observation {
                    t,
                    mean,
                    variance,
                    agents: s.agents.clone(),
                }
            })
            .collect()
    }
}

/// Rescaled adjoint trajectory in the sign convention of the analysis:
/// `r = N ξ_x`, `s = N ξ_v`, `phi = ξ_d` where `ξ = −∂J/∂y`.
#[derive(Debug, Clone)]
pub struct AdjointMicro {
    pub times: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    /// `∂J/∂u_k` per slice, flat `K×M×D`; the Euclidean derivative with
    /// respect to the slice values.
    pub control_adjoint: Vec<f64>,
}

/// Right-hand side and its transposed Jacobian for a fixed problem size.
pub(crate) struct MicroSystem<'a> {
    pub n: usize,
    pub m: usize,
    pub dim: usize,
    pub model: &'a InteractionModel,
}

impl<'a> MicroSystem<'a> {
    pub fn for_state(state: &MicroState, model: &'a InteractionModel) -> Self {
        MicroSystem {
            n: state.particles(),
            m: state.agent_count(),
            dim: state.dim,
            model,
        }
    }

    pub fn len(&self) -> usize {
        (2 * self.n + self.m) * self.dim
    }

    fn nd(&self) -> usize {
        self.n * self.dim
    }

    pub fn flatten(&self, s: &MicroState) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.len());
        y.extend_from_slice(&s.positions);
        y.extend_from_slice(&s.velocities);
        y.extend_from_slice(&s.agents);
        y
    }

    pub fn unflatten(&self, y: &[f64]) -> MicroState {
        let nd = self.nd();
        MicroState {
            dim: self.dim,
            positions: y[..nd].to_vec(),
            velocities: y[nd..2 * nd].to_vec(),
            agents: y[2 * nd..].to_vec(),
        }
    }

    pub fn rhs(&self, y: &[f64], u: &[f64], out: &mut [f64]) {
        let nd = self.nd();
        let (x, rest) = y.split_at(nd);
        let (v, d) = rest.split_at(nd);
        let (ox, rest) = out.split_at_mut(nd);
        let (ov, od) = rest.split_at_mut(nd);
        ox.copy_from_slice(v);
        crate::model::micro_drift_into(self.dim, x, v, d, self.model, ov);
        od.copy_from_slice(u);
    }

    /// `out = (∂F/∂y)ᵀ lam`. The control enters only through `ḋ = u`, so
    /// `(∂F/∂u)ᵀ lam` is simply the agent block of `lam`.
    pub fn vjp(&self, y: &[f64], lam: &[f64], out: &mut [f64]) {
        let dim = self.dim;
        let nd = self.nd();
        let x = &y[..nd];
        let d = &y[2 * nd..];
        let lx = &lam[..nd];
        let lv = &lam[nd..2 * nd];
        let (ox, rest) = out.split_at_mut(nd);
        let (ov, od) = rest.split_at_mut(nd);
        ox.iter_mut().for_each(|o| *o = 0.0);
        od.iter_mut().for_each(|o| *o = 0.0);
        for ((o, a), b) in ov.iter_mut().zip(lx).zip(lv) {
            *o = a - self.model.friction * b;
        }
        let inv_n = 1.0 / self.n as f64;
        let inv_m = 1.0 / self.m as f64;
        let mut z = vec![0.0; dim];
        let mut w = vec![0.0; dim];
        let mut hw = vec![0.0; dim];
        if !self.model.phi1.is_zero() {
            for i in 0..self.n {
                for j in (i + 1)..self.n {
                    for c in 0..dim {
                        z[c] = x[i * dim + c] - x[j * dim + c];
                        w[c] = lv[i * dim + c] - lv[j * dim + c];
                        hw[c] = 0.0;
                    }
                    self.model.phi1.hessian_apply_add(&z, &w, inv_n, &mut hw);
                    for c in 0..dim {
                        ox[i * dim + c] -= hw[c];
                        ox[j * dim + c] += hw[c];
                    }
                }
            }
        }
        if !self.model.phi2.is_zero() {
            for i in 0..self.n {
                for a in 0..self.m {
                    for c in 0..dim {
                        z[c] = x[i * dim + c] - d[a * dim + c];
                        hw[c] = 0.0;
                    }
                    self.model
                        .phi2
                        .hessian_apply_add(&z, &lv[i * dim..(i + 1) * dim], inv_m, &mut hw);
                    for c in 0..dim {
                        ox[i * dim + c] -= hw[c];
                        od[a * dim + c] += hw[c];
                    }
                }
            }
        }
    }
}

/// Stage states and slopes of one RK4 step.
struct Rk4Work {
    stages: [Vec<f64>; 4],
    slopes: [Vec<f64>; 4],
}

impl Rk4Work {
    fn new(len: usize) -> Self {
        Rk4Work {
            stages: std::array::from_fn(|_| vec![0.0; len]),
            slopes: std::array::from_fn(|_| vec![0.0; len]),
        }
    }

    fn compute(&mut self, sys: &MicroSystem, y: &[f64], u: &[f64], h: f64) {
        const C: [f64; 3] = [0.5, 0.5, 1.0];
        self.stages[0].copy_from_slice(y);
        sys.rhs(&self.stages[0], u, &mut self.slopes[0]);
        for s in 1..4 {
            let (prev, next) = self.slopes.split_at_mut(s);
            let k = &prev[s - 1];
            for ((ys, y0), ki) in self.stages[s].iter_mut().zip(y).zip(k) {
                *ys = y0 + C[s - 1] * h * ki;
            }
            sys.rhs(&self.stages[s], u, &mut next[0]);
        }
    }

    fn advance(&self, y: &[f64], h: f64, out: &mut [f64]) {
        let [k1, k2, k3, k4] = &self.slopes;
        for i in 0..y.len() {
            out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

fn steps_per_slice(control: &ControlSchedule, steps: usize) -> Result<usize> {
    let k = control.slices();
    if steps == 0 || !steps.is_multiple_of(k) {
        return Err(Error::invalid(format!(
            "step count {steps} is not a positive multiple of the {k} control slices"
        )));
    }
    Ok(steps / k)
}

fn check_layout(initial: &MicroState, control: &ControlSchedule) -> Result<()> {
    initial.validate()?;
    if control.agents() != initial.agent_count() || control.dim() != initial.dim {
        return Err(Error::shape(format!(
            "control has {} agents in {} dimensions, state has {} in {}",
            control.agents(),
            control.dim(),
            initial.agent_count(),
            initial.dim
        )));
    }
    Ok(())
}

/// Integrates the particle system with classic RK4 on a uniform grid of
/// `steps` steps over the control horizon.
pub fn integrate_forward(
    initial: &MicroState,
    control: &ControlSchedule,
    model: &InteractionModel,
    steps: usize,
) -> Result<ForwardRecordMicro> {
    check_layout(initial, control)?;
    let sps = steps_per_slice(control, steps)?;
    let sys = MicroSystem::for_state(initial, model);
    let mut work = Rk4Work::new(sys.len());
    let mut y = sys.flatten(initial);
    let mut next = vec![0.0; y.len()];
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(control.start());
    states.push(initial.clone());
    for k in 0..control.slices() {
        let u = control.slice(k);
        let t0 = control.knots()[k];
        let h = control.slice_len(k) / sps as f64;
        for j in 0..sps {
            work.compute(&sys, &y, u, h);
            work.advance(&y, h, &mut next);
            std::mem::swap(&mut y, &mut next);
            let t = if j + 1 == sps {
                control.knots()[k + 1]
            } else {
                t0 + (j + 1) as f64 * h
            };
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    time: t,
                    what: "particle state".into(),
                });
            }
            times.push(t);
            states.push(sys.unflatten(&y));
        }
    }
    Ok(ForwardRecordMicro {
        times,
        states,
        steps_per_slice: sps,
    })
}

/// Discrete cost of a forward record.
pub fn evaluate_cost(
    record: &ForwardRecordMicro,
    control: &ControlSchedule,
    weights: &CostWeights,
    quadrature: CostQuadrature,
) -> CostParts {
    let w = quadrature.node_weights(&record.times, weights.horizon);
    let mut parts = CostParts::default();
    for (state, wn) in record.states.iter().zip(&w) {
        if *wn == 0.0 {
            continue;
        }
        let (mean, var) = moments(&state.positions, state.dim);
        let p = crate::model::running_cost_parts(&mean, var, &[], weights);
        parts.j1 += wn * p.j1;
        parts.j2 += wn * p.j2;
    }
    parts.j3 = quadrature.control_cost(control, weights);
    parts
}

/// Backward sweep of the discrete adjoint from zero terminal data.
pub fn integrate_adjoint(
    record: &ForwardRecordMicro,
    control: &ControlSchedule,
    model: &InteractionModel,
    weights: &CostWeights,
    quadrature: CostQuadrature,
) -> Result<AdjointMicro> {
    let first = &record.states[0];
    check_layout(first, control)?;
    let steps = record.steps();
    if record.states.len() != record.times.len()
        || steps != record.steps_per_slice * control.slices()
        || (record.times[0] - control.start()).abs() > 1e-12 * control.horizon().max(1.0)
        || (record.times[steps] - control.end()).abs() > 1e-12 * control.horizon().max(1.0)
    {
        return Err(Error::Record(
            "forward record does not match the control time grid".into(),
        ));
    }
    let sys = MicroSystem::for_state(first, model);
    let n = sys.n as f64;
    let nd = sys.nd();
    let len = sys.len();
    let node_w = quadrature.node_weights(&record.times, weights.horizon);

    let mut work = Rk4Work::new(len);
    let mut ybar = vec![0.0; len];
    let mut a = vec![0.0; len];
    let mut kbar: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; len]);
    let mut sbar = vec![0.0; len];
    let mut ubar = vec![0.0; control.values().len()];
    let mut stored = vec![Vec::new(); steps + 1];
    stored[steps] = ybar.clone();

    for step in (0..steps).rev() {
        a.copy_from_slice(&ybar);
        let after = &record.states[step + 1];
        if node_w[step + 1] != 0.0 {
            add_state_cost_gradient(&after.positions, sys.dim, weights, node_w[step + 1], &mut a[..nd]);
        }
        let k = step / record.steps_per_slice;
        let u = control.slice(k);
        let h = record.times[step + 1] - record.times[step];
        let y = sys.flatten(&record.states[step]);
        work.compute(&sys, &y, u, h);

        let wts = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
        for (kb, w) in kbar.iter_mut().zip(wts) {
            for (o, ai) in kb.iter_mut().zip(&a) {
                *o = w * ai;
            }
        }
        ybar.copy_from_slice(&a);
        let ub = &mut ubar[k * u.len()..(k + 1) * u.len()];
        // Stage s was built as Y_s = y + c_s h k_{s-1}; walk the stages in
        // reverse, pushing each stage cotangent into the previous slope.
        const C: [f64; 3] = [0.5, 0.5, 1.0];
        for s in (0..4).rev() {
            sys.vjp(&work.stages[s], &kbar[s], &mut sbar);
            for (o, v) in ub.iter_mut().zip(&kbar[s][2 * nd..]) {
                *o += v;
            }
            for (o, v) in ybar.iter_mut().zip(&sbar) {
                *o += v;
            }
            if s > 0 {
                let c = C[s - 1] * h;
                for (o, v) in kbar[s - 1].iter_mut().zip(&sbar) {
                    *o += c * v;
                }
            }
        }
        if ybar.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                time: record.times[step],
                what: "particle adjoint".into(),
            });
        }
        stored[step] = ybar.clone();
    }

    let mut r = Vec::with_capacity(steps + 1);
    let mut s = Vec::with_capacity(steps + 1);
    let mut phi = Vec::with_capacity(steps + 1);
    for yb in &stored {
        r.push(yb[..nd].iter().map(|v| -n * v).collect());
        s.push(yb[nd..2 * nd].iter().map(|v| -n * v).collect());
        phi.push(yb[2 * nd..].iter().map(|v| -v).collect());
    }
    Ok(AdjointMicro {
        times: record.times.clone(),
        r,
        s,
        phi,
        control_adjoint: ubar,
    })
}

/// Riesz representative of the reduced gradient in the discrete L² product
/// of the control space.
pub fn assemble_gradient(
    adjoint: &AdjointMicro,
    control: &ControlSchedule,
    weights: &CostWeights,
    quadrature: CostQuadrature,
) -> ControlSchedule {
    let mut g = control.zeros_like();
    let w = control.agents() * control.dim();
    for k in 0..control.slices() {
        let dt = control.slice_len(k);
        for (gi, ui) in g
            .slice_mut(k)
            .iter_mut()
            .zip(&adjoint.control_adjoint[k * w..(k + 1) * w])
        {
            *gi = ui / dt;
        }
    }
    quadrature.add_control_gradient(control, weights, &mut g);
    g
}

/// Forward solve, adjoint solve and gradient assembly for the full-horizon
/// cost.
pub fn reduced_gradient_micro(
    control: &ControlSchedule,
    initial: &MicroState,
    model: &InteractionModel,
    weights: &CostWeights,
    steps_per_slice: usize,
) -> Result<ControlSchedule> {
    let steps = steps_per_slice * control.slices();
    let record = integrate_forward(initial, control, model, steps)?;
    let adj = integrate_adjoint(&record, control, model, weights, CostQuadrature::Trapezoid)?;
    Ok(assemble_gradient(&adj, control, weights, CostQuadrature::Trapezoid))
}

/// Reduced cost `Ĵ_N` over a fixed control layout, caching the last forward
/// solve so that a cost evaluation followed by a gradient at the same control
/// integrates only once.
pub struct MicroProblem {
    pub initial: MicroState,
    pub model: InteractionModel,
    pub weights: CostWeights,
    pub steps_per_slice: usize,
    pub quadrature: CostQuadrature,
    template: ControlSchedule,
    cache: Option<(Vec<f64>, ForwardRecordMicro)>,
    forward_solves: usize,
}

impl MicroProblem {
    pub fn new(
        initial: MicroState,
        model: InteractionModel,
        weights: CostWeights,
        template: ControlSchedule,
        steps_per_slice: usize,
        quadrature: CostQuadrature,
    ) -> Result<Self> {
        check_layout(&initial, &template)?;
        model.validate()?;
        weights.validate()?;
        if steps_per_slice == 0 {
            return Err(Error::invalid("steps per slice must be positive"));
        }
        Ok(MicroProblem {
            initial,
            model,
            weights,
            steps_per_slice,
            quadrature,
            template: template.zeros_like(),
            cache: None,
            forward_solves: 0,
        })
    }

    pub fn forward(&mut self, control: &ControlSchedule) -> Result<&ForwardRecordMicro> {
        let hit = matches!(&self.cache, Some((v, _)) if v.as_slice() == control.values());
        if !hit {
            let steps = self.steps_per_slice * control.slices();
            let rec = integrate_forward(&self.initial, control, &self.model, steps)?;
            self.forward_solves += 1;
            self.cache = Some((control.values().to_vec(), rec));
        }
        Ok(&self.cache.as_ref().unwrap().1)
    }

    pub fn forward_solves(&self) -> usize {
        self.forward_solves
    }
}

impl ReducedProblem for MicroProblem {
    fn template(&self) -> &ControlSchedule {
        &self.template
    }

    fn cost(&mut self, control: &ControlSchedule) -> Result<CostParts> {
        let (weights, quad) = (self.weights.clone(), self.quadrature);
        let rec = self.forward(control)?;
        Ok(evaluate_cost(rec, control, &weights, quad))
    }

    fn gradient(&mut self, control: &ControlSchedule) -> Result<ControlSchedule> {
        let (weights, quad, model) = (self.weights.clone(), self.quadrature, self.model);
        let rec = self.forward(control)?;
        let adj = integrate_adjoint(rec, control, &model, &weights, quad)?;
        Ok(assemble_gradient(&adj, control, &weights, quad))
    }
}

/// The particle level as a [`ControlledSystem`].
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    pub model: InteractionModel,
    pub weights: CostWeights,
    pub steps_per_slice: usize,
}

impl ControlledSystem for ParticleSystem {
    type State = MicroState;
    type Problem = MicroProblem;

    fn problem(
        &self,
        initial: &MicroState,
        template: &ControlSchedule,
        quadrature: CostQuadrature,
    ) -> Result<MicroProblem> {
        MicroProblem::new(
            initial.clone(),
            self.model,
            self.weights.clone(),
            template.clone(),
            self.steps_per_slice,
            quadrature,
        )
    }

    fn rollout(
        &self,
        initial: &MicroState,
        control: &ControlSchedule,
        observer: &mut dyn FnMut(f64, &MicroState),
    ) -> Result<MicroState> {
        let steps = self.steps_per_slice * control.slices();
        let mut rec = integrate_forward(initial, control, &self.model, steps)?;
        for (t, s) in rec.times.iter().zip(&rec.states).skip(1) {
            observer(*t, s);
        }
        Ok(rec.states.pop().unwrap())
    }

    fn observe(&self, t: f64, state: &MicroState) -> Observation {
        let (mean, variance) = moments(&state.positions, state.dim);
        Observation {
            t,
            mean,
            variance,
            agents: state.agents.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PotentialParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn free_model(alpha: f64) -> InteractionModel {
        InteractionModel {
            phi1: PotentialParams::zero(),
            phi2: PotentialParams::zero(),
            friction: alpha,
        }
    }

    fn random_state(n: usize, m: usize, seed: u64) -> MicroState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..2 * n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let v = (0..2 * n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let d = (0..2 * m).map(|_| rng.gen_range(-15.0..15.0)).collect();
        MicroState::new(2, x, v, d).unwrap()
    }

    fn s3(horizon: f64, target: f64) -> CostWeights {
        CostWeights {
            sigma1: 0.005,
            sigma2: 0.5,
            sigma3: 1e-6,
            target_variance: target,
            destination: vec![-20.0, -20.0],
            horizon,
        }
    }

    #[test]
    fn linear_decay_of_a_free_particle() {
        let s = MicroState::new(2, vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let c = ControlSchedule::uniform(0.0, 1.0, 1, 1, 2, 10.0).unwrap();
        let rec = integrate_forward(&s, &c, &free_model(1.0), 100).unwrap();
        let v = &rec.final_state().velocities;
        assert!((v[0] - (-1.0f64).exp()).abs() < 1e-9);
        assert_eq!(rec.times.len(), 101);
        assert_eq!(*rec.times.last().unwrap(), 1.0);
    }

    #[test]
    fn constant_control_moves_agents_exactly() {
        let s = MicroState::new(2, vec![5.0, 5.0], vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let c = ControlSchedule::constant(0.0, 4.0, 4, &[1.0, 0.0], 2, 10.0).unwrap();
        let rec = integrate_forward(&s, &c, &InteractionModel::default(), 8).unwrap();
        assert_eq!(rec.final_state().agents, vec![4.0, 0.0]);
    }

    #[test]
    fn rejects_fractional_steps_per_slice() {
        let s = random_state(2, 1, 0);
        let c = ControlSchedule::uniform(0.0, 1.0, 3, 1, 2, 10.0).unwrap();
        assert!(integrate_forward(&s, &c, &InteractionModel::default(), 10).is_err());
    }

    #[test]
    fn adjoint_vanishes_without_state_cost() {
        let s = random_state(4, 2, 1);
        let mut c = ControlSchedule::uniform(0.0, 0.5, 5, 2, 2, 10.0).unwrap();
        c.values_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin());
        let w = CostWeights {
            sigma1: 0.0,
            sigma2: 0.0,
            ..s3(0.5, 10.0)
        };
        let model = InteractionModel::default();
        let rec = integrate_forward(&s, &c, &model, 10).unwrap();
        let adj = integrate_adjoint(&rec, &c, &model, &w, CostQuadrature::Trapezoid).unwrap();
        assert!(adj.r.iter().chain(&adj.s).chain(&adj.phi).flatten().all(|v| *v == 0.0));
        let g = assemble_gradient(&adj, &c, &w, CostQuadrature::Trapezoid);
        let k = 1e-6 / (2.0 * 0.5);
        for (gi, ui) in g.values().iter().zip(c.values()) {
            assert!((gi - k * ui).abs() <= 1e-15 * (k * ui).abs().max(1e-300));
        }
    }

    #[test]
    fn terminal_adjoint_is_zero() {
        let s = random_state(5, 2, 2);
        let c = ControlSchedule::constant(0.0, 0.5, 5, &[1.0, 0.0, 0.0, -1.0], 2, 10.0).unwrap();
        let model = InteractionModel::default();
        let w = s3(0.5, 10.0);
        let rec = integrate_forward(&s, &c, &model, 10).unwrap();
        let adj = integrate_adjoint(&rec, &c, &model, &w, CostQuadrature::Trapezoid).unwrap();
        let last = adj.times.len() - 1;
        assert!(adj.r[last].iter().chain(&adj.s[last]).chain(&adj.phi[last]).all(|v| *v == 0.0));
        assert!(adj.r[0].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn vjp_matches_finite_difference_jacobian() {
        let s = random_state(4, 2, 9);
        let model = InteractionModel::default();
        let sys = MicroSystem::for_state(&s, &model);
        let y = sys.flatten(&s);
        let u = [0.3, -0.1, 0.2, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lam: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut jt = vec![0.0; y.len()];
        sys.vjp(&y, &lam, &mut jt);
        let h = 1e-6;
        let mut fp = vec![0.0; y.len()];
        let mut fm = vec![0.0; y.len()];
        for j in 0..y.len() {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[j] += h;
            ym[j] -= h;
            sys.rhs(&yp, &u, &mut fp);
            sys.rhs(&ym, &u, &mut fm);
            let col: f64 = (0..y.len()).map(|i| lam[i] * (fp[i] - fm[i]) / (2.0 * h)).sum();
            assert!((col - jt[j]).abs() < 1e-7 * (1.0 + col.abs()), "component {j}");
        }
    }

    /// Dense, unrescaled reference: builds the full Jacobian of one RK4 step by
    /// finite-difference-free matrix assembly and propagates `λ = ∂J/∂y`.
    fn dense_adjoint(
        rec: &ForwardRecordMicro,
        c: &ControlSchedule,
        model: &InteractionModel,
        w: &CostWeights,
    ) -> Vec<Vec<f64>> {
        let s0 = &rec.states[0];
        let sys = MicroSystem::for_state(s0, model);
        let len = sys.len();
        let jac = |y: &[f64]| -> Vec<Vec<f64>> {
            // row i of Jᵀ applied to unit vectors gives column i of J
            let mut cols = vec![vec![0.0; len]; len];
            let mut e = vec![0.0; len];
            let mut out = vec![0.0; len];
            for i in 0..len {
                e[i] = 1.0;
                sys.vjp(y, &e, &mut out);
                e[i] = 0.0;
                for j in 0..len {
                    cols[j][i] = out[j];
                }
            }
            cols // cols[j][i] = J[i][j]
        };
        let matvec_t = |jt: &Vec<Vec<f64>>, v: &[f64]| -> Vec<f64> {
            (0..len).map(|j| (0..len).map(|i| jt[j][i] * v[i]).sum()).collect()
        };
        let nw = CostQuadrature::Trapezoid.node_weights(&rec.times, w.horizon);
        let steps = rec.steps();
        let mut lam = vec![vec![0.0; len]; steps + 1];
        for step in (0..steps).rev() {
            let mut a = lam[step + 1].clone();
            add_state_cost_gradient(&rec.states[step + 1].positions, 2, w, nw[step + 1], &mut a);
            let h = rec.times[step + 1] - rec.times[step];
            let u = c.slice(step / rec.steps_per_slice);
            let mut work = Rk4Work::new(len);
            let y = sys.flatten(&rec.states[step]);
            work.compute(&sys, &y, u, h);
            // Ψ'ᵀ = I + h/6 (J1ᵀ K1 ...) written out through the stage chain
            let j: Vec<_> = work.stages.iter().map(|st| jac(st)).collect();
            let k4 = a.iter().map(|v| h / 6.0 * v).collect::<Vec<_>>();
            let y4 = matvec_t(&j[3], &k4);
            let k3: Vec<f64> = a.iter().zip(&y4).map(|(v, q)| h / 3.0 * v + h * q).collect();
            let y3 = matvec_t(&j[2], &k3);
            let k2: Vec<f64> = a.iter().zip(&y3).map(|(v, q)| h / 3.0 * v + h / 2.0 * q).collect();
            let y2 = matvec_t(&j[1], &k2);
            let k1: Vec<f64> = a.iter().zip(&y2).map(|(v, q)| h / 6.0 * v + h / 2.0 * q).collect();
            let y1 = matvec_t(&j[0], &k1);
            lam[step] = (0..len).map(|i| a[i] + y1[i] + y2[i] + y3[i] + y4[i]).collect();
        }
        lam
    }

    #[test]
    fn rescaled_adjoint_matches_unrescaled_dense_oracle() {
        let n = 6;
        let s = random_state(n, 2, 4);
        let model = InteractionModel::default();
        let c = ControlSchedule::constant(0.0, 0.4, 2, &[1.0, 0.5, -0.5, 0.0], 2, 10.0).unwrap();
        let (_, v0) = moments(&s.positions, 2);
        let w = s3(0.4, 0.9 * v0);
        let rec = integrate_forward(&s, &c, &model, 8).unwrap();
        let adj = integrate_adjoint(&rec, &c, &model, &w, CostQuadrature::Trapezoid).unwrap();
        let lam = dense_adjoint(&rec, &c, &model, &w);
        let nd = 2 * n;
        for t in 0..lam.len() {
            for i in 0..nd {
                let want_r = -(n as f64) * lam[t][i];
                let want_s = -(n as f64) * lam[t][nd + i];
                assert!((adj.r[t][i] - want_r).abs() <= 1e-12 * (1.0 + want_r.abs()));
                assert!((adj.s[t][i] - want_s).abs() <= 1e-12 * (1.0 + want_s.abs()));
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = random_state(5, 2, 7);
        let model = InteractionModel::default();
        let (_, v0) = moments(&s.positions, 2);
        let w = s3(0.5, 0.9 * v0);
        let mut c = ControlSchedule::uniform(0.0, 0.5, 5, 2, 2, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        c.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
        let mut p = MicroProblem::new(s, model, w, c.clone(), 4, CostQuadrature::Trapezoid).unwrap();
        let g = p.gradient(&c).unwrap();
        for _ in 0..5 {
            let mut dir = c.zeros_like();
            dir.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let dir = dir.scaled(1.0 / dir.norm());
            let eps = 1e-5;
            let jp = p.cost(&c.axpy(eps, &dir)).unwrap().total();
            let jm = p.cost(&c.axpy(-eps, &dir)).unwrap().total();
            let fd = (jp - jm) / (2.0 * eps);
            let ad = g.dot(&dir);
            assert!((fd - ad).abs() <= 1e-4 * fd.abs().max(ad.abs()), "fd {fd} vs adjoint {ad}");
        }
    }

    #[test]
    fn terminal_quadrature_gradient_matches_differences() {
        let s = random_state(6, 2, 8);
        let model = InteractionModel::default();
        let w = s3(10.0, 20.0);
        let c = ControlSchedule::constant(1.0, 0.1, 1, &[2.0, 1.0, -1.0, 3.0], 2, 10.0).unwrap();
        let mut p = MicroProblem::new(s, model, w, c.clone(), 10, CostQuadrature::Terminal).unwrap();
        let g = p.gradient(&c).unwrap();
        for i in 0..4 {
            let mut e = c.zeros_like();
            e.values_mut()[i] = 1.0;
            let eps = 1e-4;
            let fd = (p.cost(&c.axpy(eps, &e)).unwrap().total()
                - p.cost(&c.axpy(-eps, &e)).unwrap().total())
                / (2.0 * eps);
            let ad = g.dot(&e);
            assert!((fd - ad).abs() <= 1e-5 * fd.abs().max(1e-12), "{fd} vs {ad}");
        }
    }
}
