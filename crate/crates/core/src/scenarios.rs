//! Built-in scenarios and the scenario file format.
//!
//! A scenario is plain data: the chain, its start state, the schedule
//! template the planner searches over, weights, constraints, goals, the task
//! objective, compliance gains and planner settings. The same structure is
//! read from TOML by the CLI.
//!
//! Inertial parameters of both experiments are repo choices, not measured
//! values.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{CostWeights, WeightTable};
use crate::dynamics::{ChainModel, ComplianceGains, JointLimits, Link};
use crate::error::{Error, Result};
use crate::nlp::Criticality;
use crate::ocp::{default_constraints, ConstraintKind, ConstraintSpec, GoalBox};
use crate::schedule::{JointMode, ResponseTimeMatrix, ScheduleOptions, TimeEntry};

/// Task-level objective J, maximized by the planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Horizontal range of a two-link throw released at the horizon.
    ThrowRange,
    /// `−(time_weight·t_f + torque_weight·∫Στ² dt)`.
    TerminalTimeTorque { time_weight: f64, torque_weight: f64 },
    /// `−weight·Σ(θ_i(t_f) − target_i)²`.
    TerminalPosition { targets: Vec<f64>, weight: f64 },
}

impl Objective {
    /// True when J is the negative of a cost, so oracle ratios compare costs.
    pub fn is_cost(&self) -> bool {
        !matches!(self, Objective::ThrowRange)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub angle: Vec<f64>,
    pub rate: Vec<f64>,
}

/// The response-time matrix the search starts from, and how it decodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTemplate {
    pub matrix: Vec<Vec<TimeEntry>>,
    pub initial_modes: Vec<JointMode>,
    /// Fixed horizon; entries equal to it stay pinned during the search.
    pub horizon: Option<f64>,
    #[serde(default)]
    pub blend_width: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointGoals {
    /// Required at the horizon when the joint ends driven.
    pub terminal: Option<GoalBox>,
    /// Required at the end of every driven span that stops before the horizon.
    pub span: Option<GoalBox>,
}

fn default_budget() -> usize {
    500
}
fn default_restarts() -> usize {
    5
}
fn default_sweeps() -> usize {
    2
}
fn default_nodes() -> usize {
    30
}
fn default_final_dt() -> f64 {
    1e-3
}
fn default_step() -> f64 {
    0.5
}
fn default_candidates() -> usize {
    5
}
fn default_oracle_nodes() -> usize {
    31
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerSettings {
    /// Total objective evaluations across all restarts.
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Block-coordinate passes over the joints.
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
    /// Collocation nodes per segment.
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// Integrator step while searching.
    pub planning_dt: f64,
    /// Integrator step of emitted plans.
    #[serde(default = "default_final_dt")]
    pub final_dt: f64,
    /// Initial simplex edge in the unconstrained parameters.
    #[serde(default = "default_step")]
    pub simplex_step: f64,
    /// Half-width of the uniform jitter applied to restart points.
    #[serde(default = "default_step")]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    /// Best distinct candidates tried when regenerating the final plan.
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    /// Limit back-off inside segment solves, as a fraction of each limit.
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "default_oracle_nodes")]
    pub oracle_nodes: usize,
}

impl PlannerSettings {
    pub fn with_step(planning_dt: f64) -> Self {
        Self {
            budget: default_budget(),
            restarts: default_restarts(),
            sweeps: default_sweeps(),
            nodes: default_nodes(),
            planning_dt,
            final_dt: default_final_dt(),
            simplex_step: default_step(),
            jitter: default_step(),
            seed: 0,
            candidates: default_candidates(),
            margin: 0.0,
            oracle_nodes: default_oracle_nodes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub model: ChainModel,
    pub initial: InitialState,
    pub schedule: ScheduleTemplate,
    #[serde(default)]
    pub weights: WeightTable,
    pub constraints: Vec<ConstraintSpec>,
    pub goals: Vec<JointGoals>,
    pub objective: Objective,
    pub compliance: Vec<ComplianceGains>,
    /// Per-joint bound on θ̈ inside segment solves.
    pub control_bound: Vec<f64>,
    pub settings: PlannerSettings,
}

impl Scenario {
    pub fn dof(&self) -> usize {
        self.model.dof()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let n = self.dof();
        let check = |what: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} has {len} entries for {n} joints")))
            }
        };
        check("initial.angle", self.initial.angle.len())?;
        check("initial.rate", self.initial.rate.len())?;
        check("schedule.matrix", self.schedule.matrix.len())?;
        check("schedule.initial_modes", self.schedule.initial_modes.len())?;
        check("goals", self.goals.len())?;
        check("compliance", self.compliance.len())?;
        check("control_bound", self.control_bound.len())?;
        if self.initial.angle.iter().chain(&self.initial.rate).any(|v| !v.is_finite()) {
            return Err(Error::Config("initial state must be finite".into()));
        }
        for g in &self.compliance {
            g.validate()?;
        }
        if self.control_bound.iter().any(|u| !(*u > 0.0 && u.is_finite())) {
            return Err(Error::Config("control bounds must be positive".into()));
        }
        self.weights.validate()?;
        for c in &self.constraints {
            if c.class == Criticality::LessCritical && !(c.gain > 0.0) {
                return Err(Error::Config(format!("penalty gain for {:?} must be positive", c.kind)));
            }
        }
        match &self.objective {
            Objective::ThrowRange if n != 2 => {
                return Err(Error::Config(format!("throw range needs two joints, got {n}")));
            }
            Objective::TerminalPosition { targets, .. } if targets.len() != n => {
                return Err(Error::Config("terminal position needs one target per joint".into()));
            }
            _ => {}
        }
        let s = &self.settings;
        if s.budget == 0 || s.restarts == 0 || s.sweeps == 0 || s.candidates == 0 {
            return Err(Error::Config("budget, restarts, sweeps and candidates must be at least 1".into()));
        }
        if !(s.planning_dt > 0.0 && s.final_dt > 0.0) {
            return Err(Error::Config("integrator steps must be positive".into()));
        }
        if s.nodes < 3 || s.oracle_nodes < 3 {
            return Err(Error::Config("need at least 3 collocation nodes".into()));
        }
        if !(self.schedule.blend_width >= 0.0) {
            return Err(Error::Config("blend width must be non-negative".into()));
        }
        let template = self.template();
        template.check()?;
        if template.max_entry() == 0.0 && self.schedule.horizon.is_none() {
            return Err(Error::Config("all-zero matrix needs a horizon".into()));
        }
        Ok(())
    }

    /// Template matrix with `eps` resolved against the final integrator step.
    pub fn template(&self) -> ResponseTimeMatrix {
        ResponseTimeMatrix::from_entries(&self.schedule.matrix, self.schedule.initial_modes.clone(), self.settings.final_dt)
    }

    /// Matrix from inline rows, sharing this scenario's initial modes.
    pub fn matrix_from(&self, rows: &[Vec<TimeEntry>]) -> ResponseTimeMatrix {
        ResponseTimeMatrix::from_entries(rows, self.schedule.initial_modes.clone(), self.settings.final_dt)
    }

    pub fn schedule_options(&self) -> ScheduleOptions {
        ScheduleOptions {
            blend_width: self.schedule.blend_width,
            horizon: self.schedule.horizon,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }
}

fn with_class(kind: ConstraintKind, class: Criticality) -> Vec<ConstraintSpec> {
    let mut out = default_constraints();
    for c in &mut out {
        if c.kind == kind {
            c.class = class;
        }
    }
    out
}

/// Two-link arm in vertical gravity throwing from a horizontal start.
///
/// Both joints start passive, switch on, and switch off again just before
/// release, so every joint ends passive.
pub fn throwing_scenario() -> Scenario {
    let limits = |torque: f64| JointLimits {
        angle: [-PI, PI],
        velocity: 3.14,
        torque: [-torque, torque],
        power: [-350.0, 350.0],
    };
    let horizon = 0.25;
    Scenario {
        name: "throwing".into(),
        model: ChainModel {
            links: vec![
                Link { length: 0.6, mass: 2.0, com: 0.3, inertia: 0.06 },
                Link { length: 0.3, mass: 1.0, com: 0.15, inertia: 0.0075 },
            ],
            limits: vec![limits(150.0), limits(50.0)],
            gravity: 9.81,
            system_power: 350.0,
        },
        initial: InitialState { angle: vec![0.0, 0.0], rate: vec![0.0, 0.0] },
        schedule: ScheduleTemplate {
            matrix: vec![
                vec![TimeEntry::At(0.05), TimeEntry::At(0.2), TimeEntry::At(horizon)],
                vec![TimeEntry::At(0.05), TimeEntry::At(0.2), TimeEntry::At(horizon)],
            ],
            initial_modes: vec![JointMode::Passive; 2],
            horizon: Some(horizon),
            blend_width: 0.0,
        },
        weights: WeightTable::default(),
        constraints: with_class(ConstraintKind::SystemPower, Criticality::Critical),
        goals: vec![JointGoals { terminal: Some(GoalBox::rate_at_least(0.0)), span: Some(GoalBox::rate_at_least(0.0)) }; 2],
        objective: Objective::ThrowRange,
        compliance: vec![ComplianceGains { inertia: 1.0, damping: 5.0, stiffness: 100.0 }; 2],
        control_bound: vec![150.0, 150.0],
        settings: PlannerSettings {
            margin: 0.01,
            ..PlannerSettings::with_step(0.0025)
        },
    }
}

/// Three-joint throw (shoulder, elbow, wrist) scored on time and torque.
pub fn throwing_three_joint_scenario() -> Scenario {
    let limits = |torque: f64| JointLimits {
        angle: [-PI, PI],
        velocity: 3.14,
        torque: [-torque, torque],
        power: [-350.0, 350.0],
    };
    let horizon = 0.6;
    let row = |a: f64| vec![TimeEntry::At(a), TimeEntry::At(horizon)];
    Scenario {
        name: "throwing3".into(),
        model: ChainModel {
            links: vec![
                Link { length: 0.4, mass: 2.0, com: 0.2, inertia: 0.027 },
                Link { length: 0.35, mass: 1.5, com: 0.175, inertia: 0.015 },
                Link { length: 0.15, mass: 0.5, com: 0.075, inertia: 0.001 },
            ],
            limits: vec![limits(150.0), limits(80.0), limits(30.0)],
            gravity: 9.81,
            system_power: 350.0,
        },
        initial: InitialState { angle: vec![0.0; 3], rate: vec![0.0; 3] },
        schedule: ScheduleTemplate {
            matrix: vec![row(0.05), row(0.1), row(0.15)],
            initial_modes: vec![JointMode::Passive; 3],
            horizon: Some(horizon),
            blend_width: 0.0,
        },
        weights: WeightTable::default(),
        constraints: with_class(ConstraintKind::SystemPower, Criticality::Critical),
        goals: vec![JointGoals { terminal: Some(GoalBox::point(0.8, 0.0)), span: None }; 3],
        objective: Objective::TerminalTimeTorque { time_weight: 1.0, torque_weight: 1e-3 },
        compliance: vec![ComplianceGains { inertia: 1.0, damping: 5.0, stiffness: 100.0 }; 3],
        control_bound: vec![100.0; 3],
        settings: PlannerSettings::with_step(0.005),
    }
}

/// Leg, hip and waist of an 80 kg body rising from a crouch in 3 s.
///
/// The leg actuator's force limit enters through a unit moment arm. The
/// waist starts passive and keeps its reference.
pub fn standing_scenario() -> Scenario {
    let limits = |torque: f64| JointLimits {
        angle: [-PI, PI],
        velocity: 3.0,
        torque: [-torque, torque],
        power: [-2000.0, 2000.0],
    };
    let horizon = 3.0;
    Scenario {
        name: "standing".into(),
        model: ChainModel {
            links: vec![
                Link { length: 0.9, mass: 20.0, com: 0.45, inertia: 1.35 },
                Link { length: 0.3, mass: 30.0, com: 0.15, inertia: 0.225 },
                Link { length: 0.6, mass: 30.0, com: 0.3, inertia: 0.9 },
            ],
            limits: vec![limits(800.0), limits(200.0), limits(200.0)],
            gravity: 9.81,
            system_power: f64::INFINITY,
        },
        initial: InitialState { angle: vec![2.4, -1.0, 0.0], rate: vec![0.0; 3] },
        schedule: ScheduleTemplate {
            matrix: vec![
                vec![TimeEntry::At(0.6), TimeEntry::At(0.0), TimeEntry::At(horizon)],
                vec![TimeEntry::Eps, TimeEntry::At(0.0), TimeEntry::At(horizon)],
                vec![TimeEntry::At(0.0), TimeEntry::At(0.0), TimeEntry::At(horizon)],
            ],
            initial_modes: vec![JointMode::Passive; 3],
            horizon: Some(horizon),
            blend_width: 0.0,
        },
        weights: WeightTable { active: CostWeights::new(1.0, 0.0, 0.0), passive: CostWeights::new(5.0, 0.1, 0.1) },
        constraints: default_constraints(),
        goals: vec![
            JointGoals { terminal: Some(GoalBox::point(FRAC_PI_2, 0.0)), span: None },
            JointGoals { terminal: Some(GoalBox::point(0.0, 0.0)), span: None },
            JointGoals { terminal: Some(GoalBox::point(0.0, 0.0)), span: None },
        ],
        objective: Objective::TerminalTimeTorque { time_weight: 1.0, torque_weight: 1e-4 },
        // virtual inertias near the joints' own, critically damped at 20 rad/s
        compliance: vec![
            ComplianceGains { inertia: 100.0, damping: 4000.0, stiffness: 40000.0 },
            ComplianceGains { inertia: 12.0, damping: 480.0, stiffness: 4800.0 },
            ComplianceGains { inertia: 4.0, damping: 160.0, stiffness: 1600.0 },
        ],
        control_bound: vec![10.0; 3],
        settings: PlannerSettings::with_step(0.01),
    }
}

fn unit_link() -> Link {
    Link { length: 1.0, mass: 1.0, com: 0.5, inertia: 1.0 / 12.0 }
}

fn free_limits() -> JointLimits {
    JointLimits {
        angle: [-10.0, 10.0],
        velocity: f64::INFINITY,
        torque: [f64::NEG_INFINITY, f64::INFINITY],
        power: [f64::NEG_INFINITY, f64::INFINITY],
    }
}

/// One joint without gravity moved 0 → 1 rad and stopped, minimum energy.
pub fn rest_to_rest_toy() -> Scenario {
    Scenario {
        name: "toy_rest_to_rest".into(),
        model: ChainModel { links: vec![unit_link()], limits: vec![free_limits()], gravity: 0.0, system_power: f64::INFINITY },
        initial: InitialState { angle: vec![0.0], rate: vec![0.0] },
        schedule: ScheduleTemplate {
            matrix: vec![vec![TimeEntry::Eps, TimeEntry::At(1.0)]],
            initial_modes: vec![JointMode::Passive],
            horizon: Some(1.0),
            blend_width: 0.0,
        },
        weights: WeightTable { active: CostWeights::new(1.0, 0.0, 0.0), passive: CostWeights::new(5.0, 0.1, 0.1) },
        constraints: default_constraints(),
        goals: vec![JointGoals { terminal: Some(GoalBox::point(1.0, 0.0)), span: None }],
        objective: Objective::TerminalTimeTorque { time_weight: 0.0, torque_weight: 1.0 },
        compliance: vec![ComplianceGains { inertia: 1.0, damping: 2.0, stiffness: 1.0 }],
        control_bound: vec![1e3],
        settings: PlannerSettings::with_step(0.01),
    }
}

/// One joint without gravity that waits, then runs at full speed; the best
/// switch time puts it on target at the horizon.
///
/// From rest, a run of length `L` at bound `a` and speed cap `v` covers
/// `vL − v²/(2a)`, so the target 0.9 with `v = 2`, `a = 20` is hit by a
/// switch at 0.5 s.
pub fn switch_toy() -> Scenario {
    let mut limits = free_limits();
    limits.velocity = 2.0;
    Scenario {
        name: "toy_switch".into(),
        model: ChainModel { links: vec![unit_link()], limits: vec![limits], gravity: 0.0, system_power: f64::INFINITY },
        initial: InitialState { angle: vec![0.0], rate: vec![0.0] },
        schedule: ScheduleTemplate {
            matrix: vec![vec![TimeEntry::At(0.3), TimeEntry::At(1.0)]],
            initial_modes: vec![JointMode::Passive],
            horizon: Some(1.0),
            blend_width: 0.0,
        },
        weights: WeightTable::default(),
        constraints: default_constraints(),
        goals: vec![JointGoals { terminal: Some(GoalBox::rate_at_least(0.0)), span: None }],
        objective: Objective::TerminalPosition { targets: vec![0.9], weight: 1.0 },
        compliance: vec![ComplianceGains { inertia: 1.0, damping: 2.0, stiffness: 1.0 }],
        control_bound: vec![20.0],
        settings: PlannerSettings { budget: 60, restarts: 2, ..PlannerSettings::with_step(0.005) },
    }
}

/// Two joints without gravity, both passive throughout from rest.
pub fn free_pair_toy() -> Scenario {
    Scenario {
        name: "toy_free_pair".into(),
        model: ChainModel {
            links: vec![unit_link(), unit_link()],
            limits: vec![free_limits(), free_limits()],
            gravity: 0.0,
            system_power: f64::INFINITY,
        },
        initial: InitialState { angle: vec![0.0; 2], rate: vec![0.0; 2] },
        schedule: ScheduleTemplate {
            matrix: vec![vec![TimeEntry::At(0.0), TimeEntry::At(1.0)]; 2],
            initial_modes: vec![JointMode::Passive; 2],
            horizon: Some(1.0),
            blend_width: 0.0,
        },
        weights: WeightTable::default(),
        constraints: default_constraints(),
        goals: vec![JointGoals::default(); 2],
        objective: Objective::TerminalPosition { targets: vec![0.0; 2], weight: 1.0 },
        compliance: vec![ComplianceGains { inertia: 1.0, damping: 2.0, stiffness: 1.0 }; 2],
        control_bound: vec![10.0; 2],
        settings: PlannerSettings { budget: 10, restarts: 1, ..PlannerSettings::with_step(0.01) },
    }
}

pub fn toy_scenarios() -> Vec<Scenario> {
    vec![rest_to_rest_toy(), switch_toy(), free_pair_toy()]
}

/// Built-in scenario by name.
pub fn builtin(name: &str) -> Result<Scenario> {
    match name {
        "throwing" => Ok(throwing_scenario()),
        "throwing3" => Ok(throwing_three_joint_scenario()),
        "standing" => Ok(standing_scenario()),
        "toy_rest_to_rest" => Ok(rest_to_rest_toy()),
        "toy_switch" => Ok(switch_toy()),
        "toy_free_pair" => Ok(free_pair_toy()),
        other => Err(Error::Config(format!(
            "unknown scenario {other:?}; built-ins are {}",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

pub const BUILTIN_NAMES: [&str; 6] = ["throwing", "throwing3", "standing", "toy_rest_to_rest", "toy_switch", "toy_free_pair"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{evaluate_motion, evaluate_motion_with, optimize_t, Fidelity};
    use crate::schedule::{MatrixParameterization, ModeSchedule};
    use proptest::prelude::*;

    #[test]
    fn builtins_validate_and_survive_toml() {
        for name in BUILTIN_NAMES {
            let s = builtin(name).unwrap();
            assert_eq!(s.name, name);
            s.validate().unwrap();
            let back = Scenario::from_toml(&s.to_toml().unwrap()).unwrap();
            assert_eq!(back, s, "{name}");
        }
        assert!(matches!(builtin("juggling"), Err(Error::Config(_))));
    }

    #[test]
    fn throwing_constants() {
        let s = throwing_scenario();
        assert_eq!(s.model.system_power, 350.0);
        assert!(s.model.limits.iter().all(|l| l.velocity == 3.14));
        assert_eq!(s.objective, Objective::ThrowRange);
        assert_eq!(s.template().columns(), 3);
    }

    #[test]
    fn standing_template_and_waist() {
        let s = standing_scenario();
        let m = s.template();
        let eps = m.rows[1][0];
        assert_eq!(m.rows, vec![vec![0.6, 0.0, 3.0], vec![eps, 0.0, 3.0], vec![0.0, 0.0, 3.0]]);
        assert_eq!(eps, crate::schedule::epsilon_for_step(s.settings.final_dt));
        let sched = ModeSchedule::build(&m, s.schedule_options()).unwrap();
        assert_eq!(sched.joints[2].len(), 1);
        assert_eq!(sched.joints[2][0].mode, JointMode::Passive);
        assert_eq!((sched.joints[2][0].start, sched.joints[2][0].end), (0.0, 3.0));
        let torque: Vec<f64> = s.model.limits.iter().map(|l| l.torque[1]).collect();
        assert_eq!(torque, vec![800.0, 200.0, 200.0]);
        let mass: f64 = s.model.links.iter().map(|l| l.mass).sum();
        assert_eq!(mass, 80.0);
    }

    #[test]
    fn throw_range_needs_two_links() {
        let mut s = throwing_three_joint_scenario();
        s.objective = Objective::ThrowRange;
        assert!(s.validate().is_err());
    }

    #[test]
    fn mismatched_joint_counts_are_rejected() {
        let mut s = throwing_scenario();
        s.goals.pop();
        assert!(s.validate().is_err());
        let mut s = standing_scenario();
        s.initial.angle.push(0.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn toy_plans_are_feasible() {
        for s in toy_scenarios() {
            let plan = optimize_t(&s, &s.template(), s.settings.budget).unwrap();
            assert!(plan.plan.feasible, "{}", s.name);
        }
    }

    #[test]
    fn three_joint_template_throw_stays_under_the_cap() {
        let s = throwing_three_joint_scenario();
        let ev = evaluate_motion_with(&s, &s.template(), Fidelity::Search).unwrap();
        assert!(ev.objective.is_finite());
        assert_eq!(ev.trajectory.q[0].len(), 3);
        assert!(ev.trajectory.peak_power() <= s.model.system_power + 1e-6);
    }

    #[test]
    fn free_pair_at_rest_stays_put() {
        let s = free_pair_toy();
        let ev = evaluate_motion(&s, &s.template()).unwrap();
        assert!(ev.trajectory.q.iter().flatten().all(|v| *v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Every matrix the search can reach ends with all joints passive.
        #[test]
        fn throwing_matrices_end_passive(z in prop::collection::vec(-6.0f64..6.0, 4)) {
            let s = throwing_scenario();
            let param = MatrixParameterization::new(&s.template(), s.schedule.horizon).unwrap();
            prop_assert_eq!(param.dim(), z.len());
            let m = param.decode(&z);
            let sched = ModeSchedule::build(&m, s.schedule_options()).unwrap();
            for intervals in &sched.joints {
                prop_assert_eq!(intervals.last().unwrap().mode, JointMode::Passive);
            }
        }
    }
}
