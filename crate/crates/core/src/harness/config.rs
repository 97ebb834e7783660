//! Run configuration: a TOML file with sections, command-line overrides,
//! scenario presets and cross-field validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::{PhaseGrid, StorageConfig, TransportScheme, VelocityProfile};
use crate::model::{CostWeights, InteractionModel, PotentialParams};
use crate::optimize::{ArmijoParams, IcSettings, OcSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Micro,
    Meanfield,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Zero control, the uncontrolled baseline.
    None,
    Ic,
    Oc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    S1,
    S2,
    S3,
    #[serde(rename = "custom")]
    Custom,
}

impl Preset {
    /// `(σ1, σ2)` of the preset.
    pub fn weights(self) -> Option<(f64, f64)> {
        match self {
            Preset::S1 => Some((0.09, 0.001)),
            Preset::S2 => Some((0.0001, 0.9)),
            Preset::S3 => Some((0.005, 0.5)),
            Preset::Custom => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub level: Level,
    pub strategy: Strategy,
    pub seed: u64,
    pub horizon: f64,
    /// Control slices over the horizon.
    pub slices: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            level: Level::Micro,
            strategy: Strategy::Ic,
            seed: 1,
            horizon: 10.0,
            slices: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSection {
    pub preset: Preset,
    /// Overrides of the preset weights; required for `custom`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    pub sigma3: f64,
    /// Target variance as a multiple of the initial crowd variance.
    pub variance_factor: f64,
    pub destination: [f64; 2],
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            preset: Preset::S3,
            sigma1: None,
            sigma2: None,
            sigma3: 1e-6,
            variance_factor: 0.9,
            destination: [-20.0, -20.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub friction: f64,
    pub crowd: PotentialParams,
    pub agent: PotentialParams,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            friction: 1.0,
            crowd: PotentialParams::crowd_default(),
            agent: PotentialParams::agent_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrowdSection {
    /// Initial support `[[x_lo, x_hi], [y_lo, y_hi]]`.
    pub support: [[f64; 2]; 2],
}

impl Default for CrowdSection {
    fn default() -> Self {
        CrowdSection {
            support: [[-10.0, 55.0], [-20.0, 55.0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSection {
    pub count: usize,
    /// Explicit start positions; when absent the agents sit evenly on the
    /// circle through the corners of the crowd support, the first at 45°.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 2]>>,
}

impl Default for AgentSection {
    fn default() -> Self {
        AgentSection {
            count: 4,
            positions: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialControl {
    Zero,
    /// Every agent heads for the destination at half the speed cap.
    TowardDestination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlSection {
    pub speed_cap: f64,
    /// Initial Armijo step; the strategy's default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega0: Option<f64>,
    pub armijo_gamma: f64,
    pub max_halvings: u32,
    pub tol: f64,
    pub tol_cg: f64,
    pub max_iterations: usize,
    pub init_factor: f64,
    pub initial: InitialControl,
}

impl Default for ControlSection {
    fn default() -> Self {
        let oc = OcSettings::default();
        ControlSection {
            speed_cap: 10.0,
            omega0: None,
            armijo_gamma: oc.armijo.gamma,
            max_halvings: oc.armijo.max_halvings,
            tol: oc.tol,
            tol_cg: oc.tol_cg,
            max_iterations: oc.max_iterations,
            init_factor: IcSettings::default().init_factor,
            initial: InitialControl::TowardDestination,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroSection {
    pub particles: usize,
    pub steps_per_slice: usize,
    /// Standard deviation of the Gaussian initial velocities; 0 starts at rest.
    pub velocity_width: f64,
}

impl Default for MicroSection {
    fn default() -> Self {
        MicroSection {
            particles: 200,
            steps_per_slice: 10,
            velocity_width: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanfieldSection {
    /// Spatial points per dimension; also the histogram grid of particle runs.
    pub grid: usize,
    /// Velocity points per dimension; equal to `grid` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velocity_grid: Option<usize>,
    pub half_length: f64,
    pub v_max: f64,
    /// Time steps per control slice; half the CFL limit when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_slice: Option<usize>,
    pub transport: TransportScheme,
    /// Standard deviation of the Gaussian velocity profile; 0 puts all mass
    /// in the cells at rest.
    pub velocity_width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_budget: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spill_dir: Option<PathBuf>,
}

impl Default for MeanfieldSection {
    fn default() -> Self {
        MeanfieldSection {
            grid: 25,
            velocity_grid: None,
            half_length: 100.0,
            v_max: 5.0,
            steps_per_slice: None,
            transport: TransportScheme::default(),
            velocity_width: 0.5,
            memory_budget: None,
            spill_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    /// Relative paths resolve against the output root.
    pub dir: PathBuf,
    /// Write a state snapshot every this many control slices; 0 writes none.
    pub snapshot_every: usize,
    /// Velocity scale `V` of the control norm.
    pub velocity_scale: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("run"),
            snapshot_every: 0,
            velocity_scale: 5.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub scenario: ScenarioSection,
    pub model: ModelSection,
    pub crowd: CrowdSection,
    pub agents: AgentSection,
    pub control: ControlSection,
    pub micro: MicroSection,
    pub meanfield: MeanfieldSection,
    pub output: OutputSection,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `section.key=value` to a raw table; the value is read as TOML and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad key `{path}`")));
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses a raw table, rejecting every unknown key at once.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let mut unknown = Vec::new();
        let cfg: RunConfig = serde_ignored::deserialize(toml::Value::Table(table), |p| unknown.push(p.to_string()))
            .map_err(|e| Error::Config(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    /// File (optional) plus overrides, resolved and validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)?.resolved()
    }

    /// Fills the preset weights in and validates.
    pub fn resolved(mut self) -> Result<Self> {
        let preset = self.scenario.preset.weights();
        let pick = |explicit: Option<f64>, from_preset: Option<f64>, name: &str| {
            explicit
                .or(from_preset)
                .ok_or_else(|| Error::Config(format!("scenario.{name} is required for a custom scenario")))
        };
        self.scenario.sigma1 = Some(pick(self.scenario.sigma1, preset.map(|p| p.0), "sigma1")?);
        self.scenario.sigma2 = Some(pick(self.scenario.sigma2, preset.map(|p| p.1), "sigma2")?);
        self.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let r = &self.run;
        if !(r.horizon > 0.0 && r.horizon.is_finite()) {
            return bad(format!("run.horizon must be positive, got {}", r.horizon));
        }
        if r.slices == 0 {
            return bad("run.slices must be positive".into());
        }
        let s = &self.scenario;
        for (name, v) in [("sigma1", s.sigma1), ("sigma2", s.sigma2), ("sigma3", Some(s.sigma3))] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("scenario.{name} must be nonnegative, got {v}"));
                }
            }
        }
        if !(s.variance_factor >= 0.0) {
            return bad("scenario.variance_factor must be nonnegative".into());
        }
        self.model().validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        if self.agents.count == 0 {
            return bad("agents.count must be positive".into());
        }
        if let Some(p) = &self.agents.positions {
            if p.len() != self.agents.count {
                return bad(format!(
                    "agents.positions lists {} agents but agents.count is {}",
                    p.len(),
                    self.agents.count
                ));
            }
        }
        let c = &self.control;
        if !(c.speed_cap > 0.0) {
            return bad("control.speed_cap must be positive".into());
        }
        if c.omega0.is_some_and(|w| !(w > 0.0)) {
            return bad("control.omega0 must be positive".into());
        }
        if !(c.tol > 0.0 && c.armijo_gamma >= 0.0 && c.tol_cg >= 0.0) {
            return bad("control.tol must be positive, armijo_gamma and tol_cg nonnegative".into());
        }
        if c.max_iterations == 0 {
            return bad("control.max_iterations must be positive".into());
        }
        if self.micro.particles == 0 || self.micro.steps_per_slice == 0 {
            return bad("micro.particles and micro.steps_per_slice must be positive".into());
        }
        if !(self.micro.velocity_width >= 0.0 && self.meanfield.velocity_width >= 0.0) {
            return bad("velocity widths must be nonnegative".into());
        }
        if !(self.output.velocity_scale > 0.0) {
            return bad("output.velocity_scale must be positive".into());
        }
        let grid = self.grid().map_err(|e| Error::Config(format!("meanfield grid: {e}")))?;
        for axis in 0..2 {
            let [lo, hi] = self.crowd.support[axis];
            if !(lo < hi && lo >= -grid.half_length && hi <= grid.half_length) {
                return bad(format!(
                    "crowd.support [{lo}, {hi}] on axis {axis} is empty or leaves [−{0}, {0}]",
                    grid.half_length
                ));
            }
        }
        if self.run.level == Level::Meanfield {
            if let Some(sps) = self.meanfield.steps_per_slice {
                if sps == 0 {
                    return bad("meanfield.steps_per_slice must be positive".into());
                }
                grid.check_cfl(self.run.horizon / (self.run.slices * sps) as f64)
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn model(&self) -> InteractionModel {
        InteractionModel {
            phi1: self.model.crowd,
            phi2: self.model.agent,
            friction: self.model.friction,
        }
    }

    pub fn grid(&self) -> Result<PhaseGrid> {
        let m = &self.meanfield;
        let nv = m.velocity_grid.unwrap_or(m.grid);
        PhaseGrid::new(m.half_length, m.v_max, [m.grid, m.grid], [nv, nv])
    }

    pub fn velocity_profile(&self) -> VelocityProfile {
        if self.meanfield.velocity_width > 0.0 {
            VelocityProfile::Gaussian {
                width: self.meanfield.velocity_width,
            }
        } else {
            VelocityProfile::AtRest
        }
    }

    pub fn storage(&self) -> StorageConfig {
        StorageConfig {
            budget_bytes: self.meanfield.memory_budget,
            spill_dir: self.meanfield.spill_dir.clone(),
        }
    }

    /// Weights with the target variance taken from the initial crowd.
    pub fn weights(&self, initial_variance: f64) -> CostWeights {
        let s = &self.scenario;
        CostWeights {
            sigma1: s.sigma1.unwrap_or(0.0),
            sigma2: s.sigma2.unwrap_or(0.0),
            sigma3: s.sigma3,
            target_variance: s.variance_factor * initial_variance,
            destination: s.destination.to_vec(),
            horizon: self.run.horizon,
        }
    }

    fn armijo(&self, default: ArmijoParams) -> ArmijoParams {
        ArmijoParams {
            omega0: self.control.omega0.unwrap_or(default.omega0),
            gamma: self.control.armijo_gamma,
            max_halvings: self.control.max_halvings,
        }
    }

    pub fn ic_settings(&self) -> IcSettings {
        IcSettings {
            armijo: self.armijo(ArmijoParams::instantaneous()),
            init_factor: self.control.init_factor,
        }
    }

    pub fn oc_settings(&self) -> OcSettings {
        OcSettings {
            armijo: self.armijo(ArmijoParams::optimal()),
            tol: self.control.tol,
            tol_cg: self.control.tol_cg,
            max_iterations: self.control.max_iterations,
        }
    }

    /// Agent start positions, flat `M×2`.
    pub fn agent_positions(&self) -> Vec<f64> {
        if let Some(p) = &self.agents.positions {
            return p.iter().flatten().copied().collect();
        }
        let [[x0, x1], [y0, y1]] = self.crowd.support;
        let centre = [0.5 * (x0 + x1), 0.5 * (y0 + y1)];
        let radius = 0.5 * (x1 - x0).hypot(y1 - y0);
        let m = self.agents.count;
        (0..m)
            .flat_map(|k| {
                let a = std::f64::consts::FRAC_PI_4 + std::f64::consts::TAU * k as f64 / m as f64;
                [centre[0] + radius * a.cos(), centre[1] + radius * a.sin()]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_s3_fills_the_weights() {
        let c = RunConfig::load(None, &["scenario.preset=\"S3\"".into()]).unwrap();
        assert_eq!((c.scenario.sigma1, c.scenario.sigma2), (Some(0.005), Some(0.5)));
        let c = RunConfig::load(None, &["scenario.preset=S1".into()]).unwrap();
        assert_eq!((c.scenario.sigma1, c.scenario.sigma2), (Some(0.09), Some(0.001)));
    }

    #[test]
    fn explicit_weights_beat_the_preset() {
        let c = RunConfig::load(None, &["scenario.preset=S2".into(), "scenario.sigma2=0.25".into()]).unwrap();
        assert_eq!((c.scenario.sigma1, c.scenario.sigma2), (Some(0.0001), Some(0.25)));
    }

    #[test]
    fn empty_input_gives_the_documented_defaults() {
        let c = RunConfig::from_toml("").unwrap().resolved().unwrap();
        assert_eq!(c.run.horizon, 10.0);
        assert_eq!(c.run.slices, 100);
        assert_eq!(c.scenario.variance_factor, 0.9);
        assert_eq!(c.scenario.sigma3, 1e-6);
        assert_eq!(c.scenario.destination, [-20.0, -20.0]);
        assert_eq!(c.control.speed_cap, 10.0);
        assert_eq!(c.model.friction, 1.0);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = RunConfig::from_toml("[run]\nhorizn = 2\n[micro]\nparticle = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.horizn") && msg.contains("micro.particle"), "{msg}");
    }

    #[test]
    fn cfl_violation_prints_the_inequality() {
        let err = RunConfig::load(
            None,
            &[
                "run.level=meanfield".into(),
                "meanfield.grid=25".into(),
                "run.slices=10".into(),
                "meanfield.steps_per_slice=1".into(),
            ],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("> 0.5"), "{msg}");
    }

    #[test]
    fn custom_scenario_needs_weights() {
        assert!(RunConfig::load(None, &["scenario.preset=custom".into()]).is_err());
        let c = RunConfig::load(
            None,
            &[
                "scenario.preset=custom".into(),
                "scenario.sigma1=0.1".into(),
                "scenario.sigma2=0.2".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.scenario.sigma1, Some(0.1));
    }

    #[test]
    fn resolved_config_is_a_fixed_point() {
        let c = RunConfig::load(
            None,
            &[
                "run.level=meanfield".into(),
                "meanfield.memory_budget=1000000000".into(),
                "agents.positions=[[0.0, 1.0], [2.0, 3.0]]".into(),
                "agents.count=2".into(),
                "control.omega0=5.0".into(),
            ],
        )
        .unwrap();
        let again = RunConfig::from_toml(&c.to_toml()).unwrap().resolved().unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_toml(), again.to_toml());
    }

    #[test]
    fn ring_surrounds_the_support() {
        let c = RunConfig::default();
        let d = c.agent_positions();
        assert_eq!(d.len(), 8);
        let r = 0.5 * 65f64.hypot(75.0);
        for p in d.chunks(2) {
            assert!(((p[0] - 22.5).hypot(p[1] - 17.5) - r).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_agent_list_is_rejected() {
        assert!(RunConfig::load(None, &["agents.positions=[[0.0, 1.0]]".into()]).is_err());
    }
}
