//! Control-space machinery shared by both levels: projection onto the speed
//! cap, the nonlinear conjugate gradient direction, the projected Armijo rule,
//! and the instantaneous- and optimal-control drivers.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ControlSchedule, CostParts, CostQuadrature, Observation};

/// Reduced cost `Ĵ(u) = J(G(u), u)` over a fixed control layout.
pub trait ReducedProblem {
    /// Zero control carrying the layout (knots, agents, cap).
    fn template(&self) -> &ControlSchedule;
    fn cost(&mut self, control: &ControlSchedule) -> Result<CostParts>;
    /// Riesz representative of `∇Ĵ` in the discrete L² product.
    fn gradient(&mut self, control: &ControlSchedule) -> Result<ControlSchedule>;
}

/// A controllable state system that can build reduced problems from any
/// starting state and replay a control forward.
pub trait ControlledSystem {
    type State: Clone;
    type Problem: ReducedProblem;

    fn problem(
        &self,
        initial: &Self::State,
        template: &ControlSchedule,
        quadrature: CostQuadrature,
    ) -> Result<Self::Problem>;

    /// Runs `control` from `initial`; `observer` sees every solver node after
    /// the initial one.
    fn rollout(
        &self,
        initial: &Self::State,
        control: &ControlSchedule,
        observer: &mut dyn FnMut(f64, &Self::State),
    ) -> Result<Self::State>;

    fn observe(&self, t: f64, state: &Self::State) -> Observation;
}

/// Per-agent radial clipping to the speed cap. Speeds within a few ulps of
/// the cap count as feasible so that the operator is exactly idempotent.
pub fn project_control(c: &ControlSchedule) -> ControlSchedule {
    let cap = c.speed_cap();
    let threshold = cap * (1.0 + 4.0 * f64::EPSILON);
    let dim = c.dim();
    let mut out = c.clone();
    for agent in out.values_mut().chunks_mut(dim) {
        let norm = agent.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > threshold {
            let s = cap / norm;
            agent.iter_mut().for_each(|v| *v *= s);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct NcgDirection {
    pub direction: ControlSchedule,
    pub gamma: f64,
    /// Fell back to steepest descent.
    pub restarted: bool,
    /// The fallback was caused by a vanishing curvature denominator.
    pub degenerate: bool,
}

/// Nonlinear conjugate gradient direction with restart. `previous` holds
/// `(q_{k-1}, s_{k-1})`; `None` marks the first iteration.
pub fn ncg_direction(
    q: &ControlSchedule,
    previous: Option<(&ControlSchedule, &ControlSchedule)>,
    tol_cg: f64,
) -> NcgDirection {
    let steepest = |degenerate| NcgDirection {
        direction: q.scaled(-1.0),
        gamma: 0.0,
        restarted: true,
        degenerate,
    };
    let Some((q_prev, s_prev)) = previous else {
        return NcgDirection {
            restarted: false,
            ..steepest(false)
        };
    };
    let y = q.axpy(-1.0, q_prev);
    let denom = y.dot(s_prev);
    if denom == 0.0 || !denom.is_finite() {
        return steepest(true);
    }
    let gamma = y.dot(q) / denom;
    let s = q.scaled(-1.0).axpy(-gamma, s_prev);
    if s.dot(q) > -tol_cg {
        return steepest(false);
    }
    NcgDirection {
        direction: s,
        gamma,
        restarted: false,
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmijoParams {
    pub omega0: f64,
    pub gamma: f64,
    pub max_halvings: u32,
}

impl ArmijoParams {
    pub fn instantaneous() -> Self {
        ArmijoParams {
            omega0: 1000.0,
            gamma: 1e-4,
            max_halvings: 30,
        }
    }

    pub fn optimal() -> Self {
        ArmijoParams {
            omega0: 10.0,
            ..Self::instantaneous()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmijoOutcome {
    pub control: ControlSchedule,
    /// Accepted step; zero signals stagnation and `control` is the input.
    pub omega: f64,
    pub cost: CostParts,
    pub trials: u32,
}

/// Largest `ω = ω0/2^j` with `Ĵ(P(c + ωs)) ≤ Ĵ(c) − γ ω ‖q‖²`.
pub fn armijo_search<P: ReducedProblem + ?Sized>(
    problem: &mut P,
    c: &ControlSchedule,
    cost_c: CostParts,
    q: &ControlSchedule,
    s: &ControlSchedule,
    params: ArmijoParams,
) -> Result<ArmijoOutcome> {
    let q2 = q.dot(q);
    if s.values().iter().all(|v| *v == 0.0) {
        return Ok(ArmijoOutcome {
            control: c.clone(),
            omega: params.omega0,
            cost: cost_c,
            trials: 0,
        });
    }
    let reference = cost_c.total();
    let mut omega = params.omega0;
    for j in 0..=params.max_halvings {
        let trial = project_control(&c.axpy(omega, s));
        let cost = problem.cost(&trial)?;
        if cost.total() <= reference - params.gamma * omega * q2 {
            return Ok(ArmijoOutcome {
                control: trial,
                omega,
                cost,
                trials: j + 1,
            });
        }
        omega *= 0.5;
    }
    Ok(ArmijoOutcome {
        control: c.clone(),
        omega: 0.0,
        cost: cost_c,
        trials: params.max_halvings + 1,
    })
}

/// `‖c_next − c_prev‖ / ‖c_0‖`; falls back to `‖c_next‖` when the initial
/// control vanishes and reports zero when nothing moved.
pub fn relative_change(
    c_next: &ControlSchedule,
    c_prev: &ControlSchedule,
    c0: &ControlSchedule,
) -> f64 {
    let num = c_next.distance(c_prev);
    if num == 0.0 {
        return 0.0;
    }
    let den = match c0.norm() {
        d if d > 0.0 => d,
        _ => c_next.norm(),
    };
    num / den
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    IterationCap,
    Stagnated,
    /// Instantaneous control ran through every slice.
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
    pub grad_norm: f64,
    pub omega: f64,
    pub rel_change: f64,
    pub gradient_steps: usize,
    pub restarted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub strategy: String,
    pub status: Status,
    pub iterations: Vec<IterationRecord>,
    pub stagnant_slices: Vec<usize>,
}

impl OptimizerReport {
    pub fn costs(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.cost).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcSettings {
    pub armijo: ArmijoParams,
    /// Factor applied to the previous slice control to initialise the next.
    pub init_factor: f64,
}

impl Default for IcSettings {
    fn default() -> Self {
        IcSettings {
            armijo: ArmijoParams::instantaneous(),
            init_factor: 0.1,
        }
    }
}

/// Initial guess on slice `k + 1` from the control chosen on slice `k`.
pub fn next_slice_init(previous: &[f64], factor: f64) -> Vec<f64> {
    previous.iter().map(|v| factor * v).collect()
}

/// One projected steepest-descent step per slice, gluing the slice controls
/// into a schedule on the layout of `layout`.
pub fn run_instantaneous_control<S: ControlledSystem>(
    system: &S,
    initial: &S::State,
    layout: &ControlSchedule,
    settings: &IcSettings,
    observer: &mut dyn FnMut(f64, &S::State),
) -> Result<(ControlSchedule, OptimizerReport, S::State)> {
    let mut glued = layout.zeros_like();
    let mut state = initial.clone();
    let mut report = OptimizerReport {
        strategy: "instantaneous".into(),
        status: Status::Completed,
        iterations: Vec::with_capacity(layout.slices()),
        stagnant_slices: Vec::new(),
    };
    observer(layout.start(), &state);
    let mut init = vec![0.0; layout.agents() * layout.dim()];
    for k in 0..layout.slices() {
        let knots = vec![layout.knots()[k], layout.knots()[k + 1]];
        let template = ControlSchedule::new(
            knots,
            layout.agents(),
            layout.dim(),
            vec![0.0; init.len()],
            layout.speed_cap(),
        )?;
        let mut problem = system.problem(&state, &template, CostQuadrature::Terminal)?;
        let c = project_control(&template.with_values(init.clone())?);
        let cost_c = problem.cost(&c)?;
        let q = problem.gradient(&c)?;
        let s = q.scaled(-1.0);
        let step = armijo_search(&mut problem, &c, cost_c, &q, &s, settings.armijo)?;
        if step.omega == 0.0 {
            report.stagnant_slices.push(k);
        }
        let chosen = project_control(&step.control);
        report.iterations.push(IterationRecord {
            iter: k,
            cost: step.cost.total(),
            j1: step.cost.j1,
            j2: step.cost.j2,
            j3: step.cost.j3,
            grad_norm: q.norm(),
            omega: step.omega,
            rel_change: relative_change(&chosen, &c, &c),
            gradient_steps: 1,
            restarted: false,
        });
        glued.slice_mut(k).copy_from_slice(chosen.values());
        state = system.rollout(&state, &chosen, observer)?;
        init = next_slice_init(chosen.values(), settings.init_factor);
    }
    Ok((glued, report, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcSettings {
    pub armijo: ArmijoParams,
    pub tol: f64,
    pub tol_cg: f64,
    pub max_iterations: usize,
}

impl Default for OcSettings {
    fn default() -> Self {
        OcSettings {
            armijo: ArmijoParams::optimal(),
            tol: 0.05,
            tol_cg: 1e-10,
            max_iterations: 50,
        }
    }
}

/// Full-horizon projected NCG with Armijo steps.
pub fn run_optimal_control<P: ReducedProblem + ?Sized>(
    problem: &mut P,
    initial_control: &ControlSchedule,
    settings: &OcSettings,
) -> Result<(ControlSchedule, OptimizerReport)> {
    let c0 = project_control(initial_control);
    let mut c = c0.clone();
    let mut cost = problem.cost(&c)?;
    let mut report = OptimizerReport {
        strategy: "optimal".into(),
        status: Status::IterationCap,
        iterations: Vec::new(),
        stagnant_slices: Vec::new(),
    };
    let mut previous: Option<(ControlSchedule, ControlSchedule)> = None;
    let mut stalls = 0;
    let mut first_grad_norm = None;
    for iter in 1..=settings.max_iterations {
        let q = problem.gradient(&c)?;
        let grad_norm = q.norm();
        if first_grad_norm.is_none() {
            report.iterations.push(IterationRecord {
                iter: 0,
                cost: cost.total(),
                j1: cost.j1,
                j2: cost.j2,
                j3: cost.j3,
                grad_norm,
                omega: 0.0,
                rel_change: 0.0,
                gradient_steps: 0,
                restarted: false,
            });
            first_grad_norm = Some(grad_norm);
        }
        let dir = ncg_direction(&q, previous.as_ref().map(|(a, b)| (a, b)), settings.tol_cg);
        let step = armijo_search(problem, &c, cost, &q, &dir.direction, settings.armijo)?;
        let stagnated = step.omega == 0.0;
        let rel = relative_change(&step.control, &c, &c0);
        report.iterations.push(IterationRecord {
            iter,
            cost: step.cost.total(),
            j1: step.cost.j1,
            j2: step.cost.j2,
            j3: step.cost.j3,
            grad_norm,
            omega: step.omega,
            rel_change: rel,
            gradient_steps: 1,
            restarted: dir.restarted,
        });
        previous = Some((q, dir.direction));
        c = step.control;
        cost = step.cost;
        if stagnated {
            stalls += 1;
            if stalls >= 2 {
                report.status = Status::Stagnated;
                break;
            }
            continue;
        }
        stalls = 0;
        if rel <= settings.tol {
            report.status = Status::Converged;
            break;
        }
    }
    Ok((c, report))
}
