//! Scoring a response-time matrix and searching for the best one.
//!
//! An evaluation decodes the matrix into a schedule and sweeps over the
//! joints from distal to proximal. Driven spans of a joint are solved as
//! single-joint optimal control problems with the rest of the chain frozen
//! at the current estimate; passive spans follow the compliance law. After
//! the sweeps the whole chain is integrated once, coupled, and the result is
//! checked against every constraint and scored.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{self, throw_objective, ThrowOutcome};
use crate::dynamics::{
    event_grid, integrate, inverse_unchecked, mass_matrix_unchecked, total_power, ChainModel, ComplianceGains, ControlLaw, JointLimits,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::nlp::{Criticality, SolverOptions};
use crate::ocp::{solve_segment_with, ConstraintKind, ConstraintSpec, Coupling, GoalBox, OcpSpec, SegmentSolution};
use crate::scenarios::{Objective, Scenario};
use crate::schedule::{epsilon_for_step, JointMode, MatrixParameterization, ModeSchedule, ResponseTimeMatrix};
use crate::simplex::{self, lexicographic, SimplexOptions};

/// Score of an evaluation that violates a critical constraint, before the
/// violation is subtracted.
pub const INFEASIBLE_SCORE: f64 = -1e6;

/// Largest summed critical violation still counted as feasible.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-6;

/// Environment variable holding the number of search worker threads.
pub const WORKERS_ENV: &str = "HUMOTION_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fidelity {
    /// Coarse integrator step and looser segment tolerances.
    Search,
    /// Final integrator step and default segment tolerances.
    Final,
}

impl Fidelity {
    fn solver(self) -> SolverOptions {
        match self {
            Fidelity::Search => SolverOptions {
                step_tolerance: 1e-7,
                inner_tolerance: 1e-7,
                kkt_tolerance: 1e-5,
                feasibility_tolerance: 1e-7,
                ..SolverOptions::default()
            },
            Fidelity::Final => SolverOptions::default(),
        }
    }

    fn step(self, scenario: &Scenario) -> f64 {
        match self {
            Fidelity::Search => scenario.settings.planning_dt,
            Fidelity::Final => scenario.settings.final_dt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStatus {
    /// Followed the compliance law.
    Passive,
    Solved,
    /// Solver stopped without converging; its best iterate was used.
    BestIterate,
    /// No usable solution; the joint held zero acceleration.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub joint: usize,
    pub start: f64,
    pub end: f64,
    pub status: SegmentStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub objective: f64,
    pub critical_violation: f64,
    pub less_critical_violation: f64,
    pub stationarity: f64,
    pub slackness: f64,
    pub convex: bool,
    pub iterations: usize,
}

impl SegmentReport {
    fn passive(joint: usize, start: f64, end: f64) -> Self {
        Self {
            joint,
            start,
            end,
            status: SegmentStatus::Passive,
            message: None,
            objective: 0.0,
            critical_violation: 0.0,
            less_critical_violation: 0.0,
            stationarity: 0.0,
            slackness: 0.0,
            convex: true,
            iterations: 0,
        }
    }

    fn from_solution(joint: usize, status: SegmentStatus, s: &SegmentSolution) -> Self {
        Self {
            joint,
            start: s.t[0],
            end: *s.t.last().expect("nodes"),
            status,
            message: None,
            objective: s.objective,
            critical_violation: s.critical_violation,
            less_critical_violation: s.less_critical_violation,
            stationarity: s.stationarity,
            slackness: s.slackness,
            convex: s.convex,
            iterations: s.iterations,
        }
    }
}

/// A scored schedule with its coupled trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub matrix: ResponseTimeMatrix,
    pub schedule: ModeSchedule,
    pub trajectory: Trajectory,
    /// Task objective J.
    pub objective: f64,
    /// Integrated penalties of less-critical constraints.
    pub penalty: f64,
    /// `J − penalty` when feasible, otherwise below [`INFEASIBLE_SCORE`].
    pub score: f64,
    /// Summed critical violation over the grid, goals included.
    pub critical_violation: f64,
    pub feasible: bool,
    pub throw: Option<ThrowOutcome>,
    pub segments: Vec<SegmentReport>,
}

impl Evaluation {
    pub fn failures(&self) -> usize {
        self.segments.iter().filter(|s| s.status == SegmentStatus::Failed).count()
    }
}

#[derive(Clone, Debug)]
enum Drive {
    Passive,
    Profile(SegmentSolution),
    /// Constant rate from the span entry, used when a solve fails.
    Coast,
}

#[derive(Clone, Debug)]
struct Span {
    end: f64,
    drive: Drive,
}

/// Chain state on the evaluation grid. Accelerations and torques jump at
/// span boundaries, so those keep their left limits separately.
struct Estimate {
    t: Vec<f64>,
    q: Vec<Vec<f64>>,
    qd: Vec<Vec<f64>>,
    qdd: Vec<Vec<f64>>,
    tau: Vec<Vec<f64>>,
    qdd_left: Vec<Vec<f64>>,
    tau_left: Vec<Vec<f64>>,
}

impl Estimate {
    fn at_rest(model: &ChainModel, t: Vec<f64>, q0: &[f64]) -> Self {
        let n = q0.len();
        let len = t.len();
        let zero = vec![0.0; n];
        let tau0 = inverse_unchecked(model, q0, &zero, &zero);
        Self {
            t,
            q: vec![q0.to_vec(); len],
            qd: vec![zero.clone(); len],
            qdd: vec![zero.clone(); len],
            tau: vec![tau0.clone(); len],
            qdd_left: vec![zero; len],
            tau_left: vec![tau0; len],
        }
    }

    fn bracket(&self, t: f64, from_left: bool) -> (usize, f64) {
        let last = self.t.len() - 1;
        let k = if from_left {
            self.t.partition_point(|s| *s < t)
        } else {
            self.t.partition_point(|s| *s <= t)
        };
        let k = k.saturating_sub(1).min(last.saturating_sub(1));
        let span = self.t[k + 1] - self.t[k];
        let w = if span > 0.0 { ((t - self.t[k]) / span).clamp(0.0, 1.0) } else { 0.0 };
        (k, w)
    }

    fn lerp(from: &[f64], to: &[f64], w: f64) -> Vec<f64> {
        from.iter().zip(to).map(|(a, b)| a + w * (b - a)).collect()
    }

    fn sample(&self, t: f64, from_left: bool) -> [Vec<f64>; 4] {
        let (k, w) = self.bracket(t, from_left);
        [
            Self::lerp(&self.q[k], &self.q[k + 1], w),
            Self::lerp(&self.qd[k], &self.qd[k + 1], w),
            Self::lerp(&self.qdd[k], &self.qdd_left[k + 1], w),
            Self::lerp(&self.tau[k], &self.tau_left[k + 1], w),
        ]
    }

    /// (q, q̇, q̈, τ) interpolated linearly at `t`, right limit at boundaries.
    fn at(&self, t: f64) -> [Vec<f64>; 4] {
        self.sample(t, false)
    }

    fn at_left(&self, t: f64) -> [Vec<f64>; 4] {
        self.sample(t, true)
    }

    fn refresh_torque(&mut self, model: &ChainModel) {
        for k in 0..self.t.len() {
            self.tau[k] = inverse_unchecked(model, &self.q[k], &self.qd[k], &self.qdd[k]);
            self.tau_left[k] = inverse_unchecked(model, &self.q[k], &self.qd[k], &self.qdd_left[k]);
        }
    }
}

/// Passive acceleration from the compliance law with a frozen reference.
fn compliant_accel(g: &ComplianceGains, reference: f64, angle: f64, rate: f64, tau_pr: f64) -> f64 {
    let dtheta = reference - angle;
    let dtheta_dot = -rate;
    -(tau_pr - g.damping * dtheta_dot - g.stiffness * dtheta) / g.inertia
}

pub(crate) fn limit_scale(lo: f64, hi: f64) -> f64 {
    let s = lo.abs().max(hi.abs());
    if s.is_finite() {
        s.max(1.0)
    } else {
        1.0
    }
}

/// Horizon of a matrix under a scenario's schedule options.
pub fn horizon(scenario: &Scenario, matrix: &ResponseTimeMatrix) -> f64 {
    scenario.schedule.horizon.unwrap_or(0.0).max(matrix.max_entry())
}

pub(crate) fn class_of(scenario: &Scenario, kind: ConstraintKind) -> Option<(Criticality, f64)> {
    scenario.constraints.iter().find(|c| c.kind == kind).map(|c| (c.class, c.gain))
}

fn power_cap(scenario: &Scenario) -> Option<f64> {
    match class_of(scenario, ConstraintKind::SystemPower) {
        Some((Criticality::Critical, _)) if scenario.model.system_power.is_finite() => Some(scenario.model.system_power),
        _ => None,
    }
}

/// Clamps to the torque limits and, when the system power cap is hard,
/// scales all torques down so `Σ|τ q̇|` stays under it.
fn saturate(limits: &[JointLimits], cap: Option<f64>, tau: &mut [f64], qd: &[f64]) {
    for (t, l) in tau.iter_mut().zip(limits) {
        *t = t.clamp(l.torque[0], l.torque[1]);
    }
    if let Some(cap) = cap {
        let p: f64 = tau.iter().zip(qd).map(|(t, v)| (t * v).abs()).sum();
        if p > cap {
            let s = cap / p;
            for t in tau.iter_mut() {
                *t *= s;
            }
        }
    }
}

/// Constraint classes seen by a single-joint segment. The system power row
/// depends on a frozen estimate of the other joints, so a hard row can be
/// inconsistent; segments treat it as soft and the coupled pass enforces the
/// cap by saturation.
fn segment_constraints(constraints: &[ConstraintSpec]) -> Vec<ConstraintSpec> {
    constraints
        .iter()
        .map(|c| match c.kind {
            ConstraintKind::SystemPower => ConstraintSpec { class: Criticality::LessCritical, ..*c },
            _ => *c,
        })
        .collect()
}

/// Couples the segment profiles into one chain: driven joints follow their
/// planned accelerations, passive joints the compliance law.
///
/// A driven span is re-planned from the state actually reached at its start
/// whenever that state differs from the one it was planned from.
struct PlanLaw<'a> {
    evaluator: &'a Evaluator<'a>,
    estimate: &'a Estimate,
    spans: Vec<Vec<Span>>,
    reports: Vec<Vec<SegmentReport>>,
    cap: Option<f64>,
    step_start: f64,
    reference: Vec<f64>,
    previous: Option<Vec<JointMode>>,
}

/// Entry states closer than this to the planned one are not re-planned.
const REPLAN_TOLERANCE: f64 = 1e-10;

impl<'a> PlanLaw<'a> {
    fn new(evaluator: &'a Evaluator<'a>, estimate: &'a Estimate, spans: Vec<Vec<Span>>, reports: Vec<Vec<SegmentReport>>) -> Self {
        let scenario = evaluator.scenario;
        Self {
            evaluator,
            estimate,
            spans,
            reports,
            cap: power_cap(scenario),
            step_start: 0.0,
            reference: scenario.initial.angle.clone(),
            previous: None,
        }
    }

    fn span_index(&self, joint: usize, t: f64) -> usize {
        let spans = &self.spans[joint];
        spans.partition_point(|s| s.end <= t).min(spans.len() - 1)
    }

    fn driven_accel(&self, joint: usize, t: f64) -> f64 {
        match &self.spans[joint][self.span_index(joint, t)].drive {
            Drive::Profile(sol) => sol.control_at(t),
            Drive::Passive | Drive::Coast => 0.0,
        }
    }

    fn replan(&mut self, joint: usize, t: f64, entry: [f64; 2]) {
        let i = self.span_index(joint, t);
        let Drive::Profile(sol) = &self.spans[joint][i].drive else { return };
        let (start, end) = (sol.t[0], self.spans[joint][i].end);
        let drift = (sol.angle[0] - entry[0]).abs().max((sol.rate[0] - entry[1]).abs());
        if drift <= REPLAN_TOLERANCE || (start - t).abs() > 1e-9 * end.max(1.0) {
            return;
        }
        let warm = sol.control.clone();
        let (drive, report) = self.evaluator.solve_driven(self.estimate, joint, start, end, entry, Some(&warm));
        self.spans[joint][i].drive = drive;
        self.reports[joint][i] = report;
    }
}

impl ControlLaw for PlanLaw<'_> {
    fn on_grid_point(&mut self, t: f64, q: &[f64], qd: &[f64], modes: &[JointMode]) {
        self.step_start = t;
        for (j, mode) in modes.iter().enumerate() {
            let entered = self.previous.as_ref().is_none_or(|p| p[j] != JointMode::Passive);
            if *mode == JointMode::Passive && entered {
                self.reference[j] = q[j];
            }
            let started = self.previous.as_ref().is_some_and(|p| !p[j].is_driven());
            if mode.is_driven() && started {
                self.replan(j, t, [q[j], qd[j]]);
            }
        }
        self.previous = Some(modes.to_vec());
    }

    fn torque(&mut self, _t: f64, q: &[f64], qd: &[f64], modes: &[JointMode]) -> Vec<f64> {
        let scenario = self.evaluator.scenario;
        let model = &scenario.model;
        let mut acc: Vec<f64> = (0..modes.len())
            .map(|j| if modes[j].is_driven() { self.driven_accel(j, self.step_start) } else { 0.0 })
            .collect();
        if modes.contains(&JointMode::Passive) {
            let hold = inverse_unchecked(model, q, qd, &acc);
            for j in 0..modes.len() {
                if modes[j] == JointMode::Passive {
                    acc[j] = compliant_accel(&scenario.compliance[j], self.reference[j], q[j], qd[j], hold[j]);
                }
            }
        }
        let mut tau = inverse_unchecked(model, q, qd, &acc);
        saturate(&model.limits, self.cap, &mut tau, qd);
        tau
    }
}

/// Nearest grid index to `t`.
fn grid_index(grid: &[f64], t: f64) -> usize {
    let k = grid.partition_point(|s| *s < t);
    if k == 0 {
        return 0;
    }
    if k >= grid.len() {
        return grid.len() - 1;
    }
    if (grid[k] - t).abs() <= (t - grid[k - 1]).abs() {
        k
    } else {
        k - 1
    }
}

struct Evaluator<'a> {
    scenario: &'a Scenario,
    schedule: ModeSchedule,
    fidelity: Fidelity,
    t_final: f64,
}

impl<'a> Evaluator<'a> {
    fn goal_for(&self, joint: usize, end: f64) -> Option<GoalBox> {
        let goals = &self.scenario.goals[joint];
        if end >= self.t_final {
            goals.terminal
        } else {
            goals.span
        }
    }

    fn segment_spec(&self, joint: usize, start: f64, end: f64, initial: [f64; 2]) -> Result<OcpSpec> {
        let s = self.scenario;
        let nodes = s.settings.nodes;
        let h = (end - start) / (nodes - 1) as f64;
        let inside = |t: f64| t.min(end - 1e-9 * (end - start)).max(start);
        let weights = (0..nodes)
            .map(|k| cost::weights_at(&self.schedule, joint, inside(start + k as f64 * h), &s.weights))
            .collect::<Result<Vec<_>>>()?;
        Ok(OcpSpec {
            t_start: start,
            t_end: end,
            initial,
            goal: self.goal_for(joint, end),
            weights,
            constraints: segment_constraints(&s.constraints),
            limits: s.model.limits[joint].clone(),
            system_power: s.model.system_power,
            u_max: s.control_bound[joint],
            nodes,
            margin: s.settings.margin,
        })
    }

    fn coupling(&self, est: &Estimate, joint: usize, times: &[f64]) -> Coupling {
        let model = &self.scenario.model;
        let mut c = Coupling::default();
        for (i, &t) in times.iter().enumerate() {
            let [q, qd, mut qdd, tau] = if i + 1 == times.len() { est.at_left(t) } else { est.at(t) };
            qdd[joint] = 0.0;
            let m = mass_matrix_unchecked(model, &q);
            let bias = inverse_unchecked(model, &q, &qd, &qdd)[joint];
            let other: f64 = (0..q.len()).filter(|&i| i != joint).map(|i| (tau[i] * qd[i]).abs()).sum();
            c.inertia.push(m[(joint, joint)]);
            c.bias.push(bias);
            c.other_power.push(other);
        }
        c
    }

    /// Solves one driven span, falling back to coasting when no usable
    /// solution exists.
    fn solve_driven(&self, est: &Estimate, joint: usize, start: f64, end: f64, initial: [f64; 2], warm: Option<&[f64]>) -> (Drive, SegmentReport) {
        let spec = match self.segment_spec(joint, start, end, initial) {
            Ok(s) => s,
            Err(e) => return (Drive::Coast, self.failed(joint, start, end, e.to_string())),
        };
        let coupling = self.coupling(est, joint, &spec.node_times());
        match solve_segment_with(&spec, &coupling, JointMode::Active, &self.fidelity.solver(), warm) {
            Ok(sol) => {
                let report = SegmentReport::from_solution(joint, SegmentStatus::Solved, &sol);
                (Drive::Profile(sol), report)
            }
            // the frozen coupling can make a segment inconsistent; the
            // coupled pass decides whether the best iterate is good enough
            Err(Error::NonConvergence { best, .. }) => {
                let report = SegmentReport::from_solution(joint, SegmentStatus::BestIterate, &best);
                (Drive::Profile(*best), report)
            }
            Err(e) => (Drive::Coast, self.failed(joint, start, end, e.to_string())),
        }
    }

    fn failed(&self, joint: usize, start: f64, end: f64, message: String) -> SegmentReport {
        SegmentReport {
            status: SegmentStatus::Failed,
            message: Some(message),
            ..SegmentReport::passive(joint, start, end)
        }
    }

    /// Integrates one passive joint on grid points `[a, b]` under the
    /// compliance law, the rest of the chain taken from the estimate.
    fn passive_profile(&self, est: &Estimate, joint: usize, a: usize, b: usize, entry: [f64; 2]) -> Vec<[f64; 3]> {
        let model = &self.scenario.model;
        let gains = &self.scenario.compliance[joint];
        let reference = entry[0];
        // stages at the end of a step see the chain from the left, as the
        // integrator holds modes and planned controls over each step
        let accel = |t: f64, step: f64, angle: f64, rate: f64| {
            let [mut q, mut qd, mut qdd, _] = if t > step { est.at_left(t) } else { est.at(t) };
            let modes = self.schedule.modes_at_clamped(step);
            for (i, m) in modes.iter().enumerate() {
                if !m.is_driven() {
                    qdd[i] = 0.0;
                }
            }
            q[joint] = angle;
            qd[joint] = rate;
            qdd[joint] = 0.0;
            let hold = inverse_unchecked(model, &q, &qd, &qdd)[joint];
            compliant_accel(gains, reference, angle, rate, hold)
        };
        let (mut x, mut v) = (entry[0], entry[1]);
        let mut out = Vec::with_capacity(b - a + 1);
        out.push([x, v, accel(est.t[a], est.t[a], x, v)]);
        for k in a..b {
            let (t, h) = (est.t[k], est.t[k + 1] - est.t[k]);
            let k1 = accel(t, t, x, v);
            let (x2, v2) = (x + 0.5 * h * v, v + 0.5 * h * k1);
            let k2 = accel(t + 0.5 * h, t, x2, v2);
            let (x3, v3) = (x + 0.5 * h * v2, v + 0.5 * h * k2);
            let k3 = accel(t + 0.5 * h, t, x3, v3);
            let (x4, v4) = (x + h * v3, v + h * k3);
            let k4 = accel(t + h, t, x4, v4);
            x += h / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            out.push([x, v, accel(est.t[k + 1], est.t[k + 1], x, v)]);
        }
        out
    }

    fn run(&self, matrix: &ResponseTimeMatrix) -> Result<Evaluation> {
        let s = self.scenario;
        let n = s.dof();
        let dt = self.fidelity.step(s);
        let grid = event_grid(0.0, self.t_final, dt, &self.schedule.boundaries());
        let mut est = Estimate::at_rest(&s.model, grid, &s.initial.angle);
        for k in 0..est.t.len() {
            est.qd[k].clone_from(&s.initial.rate);
        }
        est.refresh_torque(&s.model);

        let span_list: Vec<Vec<(f64, f64, bool)>> = (0..n).map(|j| self.schedule.spans(j)).collect();
        let mut spans: Vec<Vec<Span>> = vec![Vec::new(); n];
        let mut reports: Vec<Vec<SegmentReport>> = vec![Vec::new(); n];

        for _ in 0..s.settings.sweeps {
            for j in (0..n).rev() {
                let previous = std::mem::take(&mut spans[j]);
                reports[j].clear();
                let mut state = [s.initial.angle[j], s.initial.rate[j]];
                let mut profile = vec![[0.0; 3]; est.t.len()];
                let mut left_accel = vec![0.0; est.t.len()];
                for (i, &(start, end, driven)) in span_list[j].iter().enumerate() {
                    let a = grid_index(&est.t, start);
                    let b = grid_index(&est.t, end);
                    if driven {
                        let warm = match previous.get(i).map(|p| &p.drive) {
                            Some(Drive::Profile(sol)) => Some(sol.control.as_slice()),
                            _ => None,
                        };
                        let (drive, report) = self.solve_driven(&est, j, start, end, state, warm);
                        for (k, slot) in profile.iter_mut().enumerate().take(b + 1).skip(a) {
                            *slot = sample(&drive, state, start, est.t[k]);
                            if k > a || a == 0 {
                                left_accel[k] = slot[2];
                            }
                        }
                        let last = sample(&drive, state, start, end);
                        state = [last[0], last[1]];
                        spans[j].push(Span { end, drive });
                        reports[j].push(report);
                    } else {
                        let out = self.passive_profile(&est, j, a, b, state);
                        let last = *out.last().expect("span has grid points");
                        profile[a..=b].copy_from_slice(&out);
                        for (k, p) in out.iter().enumerate().skip(usize::from(a > 0)) {
                            left_accel[a + k] = p[2];
                        }
                        state = [last[0], last[1]];
                        spans[j].push(Span { end, drive: Drive::Passive });
                        reports[j].push(SegmentReport::passive(j, start, end));
                    }
                }
                for (k, p) in profile.iter().enumerate() {
                    est.q[k][j] = p[0];
                    est.qd[k][j] = p[1];
                    est.qdd[k][j] = p[2];
                }
                for (k, &a) in left_accel.iter().enumerate() {
                    est.qdd_left[k][j] = a;
                }
                est.refresh_torque(&s.model);
            }
        }

        // final coupled pass, with collocation nodes on the grid so planned
        // accelerations stay constant within every step
        let mut events = self.schedule.boundaries();
        for js in &spans {
            for span in js {
                if let Drive::Profile(sol) = &span.drive {
                    events.extend_from_slice(&sol.t);
                }
            }
        }
        let mut law = PlanLaw::new(&self, &est, spans, reports);
        let trajectory = integrate(
            &s.model,
            &mut law,
            &s.initial.angle,
            &s.initial.rate,
            (0.0, self.t_final),
            dt,
            &events,
            Some(&self.schedule),
        );
        let PlanLaw { reports, .. } = law;
        let segments: Vec<SegmentReport> = reports.into_iter().flatten().collect();
        let failures = segments.iter().filter(|r| r.status == SegmentStatus::Failed).count();
        let trajectory = match trajectory {
            Ok(t) => t,
            Err(e) => {
                let mut segments = segments;
                segments.push(SegmentReport {
                    message: Some(e.to_string()),
                    ..self.failed(0, 0.0, self.t_final, String::new())
                });
                let v = (failures + 1) as f64;
                return Ok(Evaluation {
                    matrix: matrix.clone(),
                    schedule: self.schedule.clone(),
                    trajectory: Trajectory::default(),
                    objective: 0.0,
                    penalty: 0.0,
                    score: INFEASIBLE_SCORE - v,
                    critical_violation: v,
                    feasible: false,
                    throw: None,
                    segments,
                });
            }
        };
        let assessment = assess(s, &self.schedule, matrix, &trajectory)?;
        let violation = assessment.critical_violation + failures as f64;
        let feasible = violation <= FEASIBILITY_TOLERANCE;
        let score = if feasible {
            assessment.objective - assessment.penalty
        } else {
            INFEASIBLE_SCORE - violation
        };
        Ok(Evaluation {
            matrix: matrix.clone(),
            schedule: self.schedule.clone(),
            trajectory,
            objective: assessment.objective,
            penalty: assessment.penalty,
            score,
            critical_violation: violation,
            feasible,
            throw: assessment.throw,
            segments,
        })
    }
}

/// (θ, θ̇, θ̈) of a driven span at `t`.
fn sample(drive: &Drive, entry: [f64; 2], start: f64, t: f64) -> [f64; 3] {
    match drive {
        Drive::Profile(sol) => {
            let m = sol.control.len();
            let k = sol.t.partition_point(|x| *x <= t).saturating_sub(1).min(m - 1);
            let (u, tau) = (sol.control[k], t - sol.t[k]);
            [sol.angle[k] + sol.rate[k] * tau + 0.5 * u * tau * tau, sol.rate[k] + u * tau, u]
        }
        Drive::Coast | Drive::Passive => [entry[0] + entry[1] * (t - start), entry[1], 0.0],
    }
}

/// Objective, penalties and critical violation of a finished trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub objective: f64,
    pub penalty: f64,
    pub critical_violation: f64,
    pub throw: Option<ThrowOutcome>,
}

/// Checks a trajectory against the scenario's constraints and goals, and
/// evaluates the task objective.
///
/// Terminal goals bind joints whose final interval is driven; span goals
/// bind the ends of driven spans that stop before the horizon.
pub fn assess(scenario: &Scenario, schedule: &ModeSchedule, matrix: &ResponseTimeMatrix, traj: &Trajectory) -> Result<Assessment> {
    if traj.is_empty() {
        return Err(Error::Input("empty trajectory".into()));
    }
    let n = scenario.dof();
    let model = &scenario.model;
    let mut critical = 0.0;
    let mut integrand = vec![0.0; traj.len()];
    let mut add = |k: usize, g: f64, class: Criticality, gain: f64, critical: &mut f64| {
        if g > 0.0 {
            match class {
                Criticality::Critical => *critical += g,
                Criticality::LessCritical => integrand[k] += gain * g * g,
            }
        }
    };
    let kinds = [
        ConstraintKind::Angle,
        ConstraintKind::Velocity,
        ConstraintKind::Torque,
        ConstraintKind::JointPower,
    ];
    for k in 0..traj.len() {
        let (q, qd, tau) = (&traj.q[k], &traj.qd[k], &traj.tau[k]);
        for j in 0..n {
            let l = &model.limits[j];
            for kind in kinds {
                let Some((class, gain)) = class_of(scenario, kind) else { continue };
                let (value, lo, hi) = match kind {
                    ConstraintKind::Angle => (q[j], l.angle[0], l.angle[1]),
                    ConstraintKind::Velocity => (qd[j], -l.velocity, l.velocity),
                    ConstraintKind::Torque => (tau[j], l.torque[0], l.torque[1]),
                    _ => (tau[j] * qd[j], l.power[0], l.power[1]),
                };
                let scale = limit_scale(lo, hi);
                if hi.is_finite() {
                    add(k, (value - hi) / scale, class, gain, &mut critical);
                }
                if lo.is_finite() {
                    add(k, (lo - value) / scale, class, gain, &mut critical);
                }
            }
        }
        if let Some((class, gain)) = class_of(scenario, ConstraintKind::SystemPower) {
            let cap = model.system_power;
            if cap.is_finite() {
                let p = total_power(tau, qd);
                add(k, (p - cap) / cap.max(1.0), class, gain, &mut critical);
            }
        }
    }
    let penalty = cost::trapezoid(&traj.t, &integrand);

    let last = traj.len() - 1;
    let t_final = schedule.t_final;
    for j in 0..n {
        let goals = &scenario.goals[j];
        let ends_driven = schedule.joints[j].last().is_some_and(|iv| iv.mode.is_driven());
        if let (true, Some(goal)) = (ends_driven, goals.terminal) {
            critical += goal.violation(traj.q[last][j], traj.qd[last][j]);
        }
        if let Some(goal) = goals.span {
            for (_, end, driven) in schedule.spans(j) {
                if driven && end < t_final {
                    let k = traj.index_at(end);
                    critical += goal.violation(traj.q[k][j], traj.qd[k][j]);
                }
            }
        }
    }

    let (objective, throw) = match &scenario.objective {
        Objective::ThrowRange => {
            let first = [matrix.first_switch(0, t_final), matrix.first_switch(1, t_final)];
            let outcome = throw_objective(model, traj, first)?;
            (outcome.range, Some(outcome))
        }
        Objective::TerminalTimeTorque { time_weight, torque_weight } => {
            let sq: Vec<f64> = traj.tau.iter().map(|t| t.iter().map(|v| v * v).sum()).collect();
            (-(time_weight * t_final + torque_weight * cost::trapezoid(&traj.t, &sq)), None)
        }
        Objective::TerminalPosition { targets, weight } => {
            let err: f64 = traj.q[last].iter().zip(targets).map(|(a, b)| (a - b).powi(2)).sum();
            (-weight * err, None)
        }
    };
    Ok(Assessment {
        objective,
        penalty,
        critical_violation: critical,
        throw,
    })
}

/// Scores `matrix` on `scenario` at the final integrator resolution.
pub fn evaluate_motion(scenario: &Scenario, matrix: &ResponseTimeMatrix) -> Result<Evaluation> {
    evaluate_motion_with(scenario, matrix, Fidelity::Final)
}

/// [`evaluate_motion`] at a chosen fidelity.
///
/// Invalid matrices are errors. Segment failures and constraint violations
/// are not: they give a score below [`INFEASIBLE_SCORE`] and are listed in
/// the segment reports.
pub fn evaluate_motion_with(scenario: &Scenario, matrix: &ResponseTimeMatrix, fidelity: Fidelity) -> Result<Evaluation> {
    scenario.validate()?;
    if matrix.joints() != scenario.dof() {
        return Err(Error::Input(format!("matrix has {} rows for {} joints", matrix.joints(), scenario.dof())));
    }
    let schedule = ModeSchedule::build(matrix, scenario.schedule_options())?;
    let t_final = schedule.t_final;
    Evaluator {
        scenario,
        schedule,
        fidelity,
        t_final,
    }
    .run(matrix)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub evaluations: usize,
    /// Best score after each evaluation.
    pub best: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub plan: Evaluation,
    pub trace: SearchTrace,
    /// Unconstrained search coordinates of the plan's matrix.
    pub parameters: Vec<f64>,
    #[serde(skip)]
    pub elapsed: Duration,
}

fn worker_count() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.trim().parse().ok().filter(|n| *n > 0)
}

/// Per-restart evaluation budgets summing to `budget`.
fn split_budget(budget: usize, restarts: usize) -> Vec<usize> {
    let restarts = restarts.min(budget).max(1);
    (0..restarts).map(|r| budget / restarts + usize::from(r < budget % restarts)).collect()
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(restart as u64)
}

/// Searches the matrix entries of `init`'s nonzero pattern for the highest
/// score, then regenerates the best plan at the final resolution.
///
/// Restarts run concurrently; their results are merged in restart order, so
/// the outcome does not depend on the number of workers.
pub fn optimize_t(scenario: &Scenario, init: &ResponseTimeMatrix, budget: usize) -> Result<PlanResult> {
    let started = Instant::now();
    scenario.validate()?;
    if budget == 0 {
        return Err(Error::Parameter("budget must be at least one evaluation".into()));
    }
    let param = MatrixParameterization::new(init, scenario.schedule.horizon)?;
    let z0 = param.encode(init)?;
    let settings = &scenario.settings;
    let budgets = split_budget(budget, settings.restarts);

    let run = |r: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(settings.seed, r));
        let start: Vec<f64> = z0.iter().map(|z| z + settings.jitter * (2.0 * rng.random::<f64>() - 1.0)).collect();
        let options = SimplexOptions {
            step: settings.simplex_step,
            max_evaluations: budgets[r],
            tolerance: 1e-6,
        };
        let objective = |z: &[f64]| match evaluate_motion_with(scenario, &param.decode(z), Fidelity::Search) {
            Ok(ev) => -ev.score,
            Err(_) => -(2.0 * INFEASIBLE_SCORE),
        };
        simplex::minimize(objective, &start, &options).history
    };
    let histories: Vec<Vec<(Vec<f64>, f64)>> = match worker_count() {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Planning(e.to_string()))?
            .install(|| (0..budgets.len()).into_par_iter().map(run).collect()),
        None => (0..budgets.len()).into_par_iter().map(run).collect(),
    };

    let mut trace = SearchTrace::default();
    let mut best = f64::NEG_INFINITY;
    let mut points: Vec<(Vec<f64>, f64)> = Vec::new();
    for (z, value) in histories.into_iter().flatten() {
        let score = -value;
        best = best.max(score);
        trace.best.push(best);
        points.push((z, score));
    }
    trace.evaluations = points.len();
    points.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| lexicographic(&a.0, &b.0)));
    points.dedup_by(|a, b| a.0 == b.0);

    let mut last_error = String::from("no feasible schedule found");
    for (z, score) in points.iter().filter(|p| p.1 > INFEASIBLE_SCORE).take(settings.candidates) {
        let ev = evaluate_motion(scenario, &param.decode(z))?;
        if ev.feasible {
            return Ok(PlanResult {
                plan: ev,
                trace,
                parameters: z.clone(),
                elapsed: started.elapsed(),
            });
        }
        last_error = format!(
            "candidate with search score {score} has critical violation {} at full resolution",
            ev.critical_violation
        );
    }
    Err(Error::Planning(last_error))
}

/// Every joint starts passive, switches on at ε and stays driven to the
/// horizon.
pub fn synchronous_matrix(scenario: &Scenario) -> Result<ResponseTimeMatrix> {
    let template = scenario.template();
    let cols = template.columns();
    if cols < 2 {
        return Err(Error::Config("synchronous baseline needs at least two columns".into()));
    }
    let t_final = horizon(scenario, &template);
    let eps = epsilon_for_step(scenario.settings.final_dt);
    let row = |_| {
        let mut r = vec![0.0; cols];
        r[0] = eps;
        r[cols - 1] = t_final;
        r
    };
    Ok(ResponseTimeMatrix::new((0..scenario.dof()).map(row).collect(), vec![JointMode::Passive; scenario.dof()]))
}

pub fn synchronous_plan(scenario: &Scenario) -> Result<Evaluation> {
    evaluate_motion(scenario, &synchronous_matrix(scenario)?)
}

/// `J(plan)/J(reference)` for objectives that are maximized as such, and
/// `cost(reference)/cost(plan)` for objectives that are negated costs.
pub fn objective_ratio(objective: &Objective, plan: f64, reference: f64) -> f64 {
    if objective.is_cost() {
        reference / plan
    } else {
        plan / reference
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{free_pair_toy, rest_to_rest_toy, switch_toy, throwing_scenario};
    use crate::schedule::TimeEntry;
    use proptest::prelude::*;

    #[test]
    fn zero_matrix_at_rest_stays_at_rest() {
        let s = free_pair_toy();
        let ev = evaluate_motion(&s, &s.template()).unwrap();
        assert!(ev.feasible);
        assert_eq!(ev.objective, 0.0);
        assert_eq!(ev.critical_violation, 0.0);
        for (q, qd) in ev.trajectory.q.iter().zip(&ev.trajectory.qd) {
            assert!(q.iter().chain(qd).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn rest_to_rest_matches_minimum_energy() {
        let s = rest_to_rest_toy();
        let ev = evaluate_motion(&s, &s.template()).unwrap();
        assert!(ev.feasible, "{:?}", ev.segments);
        let duration = 1.0 - s.template().rows[0][0];
        // τ = I θ̈ about the joint, I = 1/3
        let expected = 12.0 / duration.powi(3) / 9.0;
        assert!((-ev.objective - expected).abs() / expected < 0.01, "{} vs {expected}", -ev.objective);
    }

    #[test]
    fn score_decomposes_into_objective_and_penalty() {
        let s = throwing_scenario();
        let ev = evaluate_motion(&s, &s.template()).unwrap();
        assert!(ev.feasible, "{:?}", ev.segments);
        let a = assess(&s, &ev.schedule, &ev.matrix, &ev.trajectory).unwrap();
        assert!((ev.score - (a.objective - a.penalty)).abs() <= 1e-10);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let s = throwing_scenario();
        let a = evaluate_motion_with(&s, &s.template(), Fidelity::Search).unwrap();
        let b = evaluate_motion_with(&s, &s.template(), Fidelity::Search).unwrap();
        assert_eq!(a.score.to_bits(), b.score.to_bits());
        assert_eq!(a.trajectory, b.trajectory);
    }

    #[test]
    fn delayed_row_delays_motion() {
        let s = throwing_scenario();
        let m = s.matrix_from(&[
            vec![TimeEntry::At(0.02), TimeEntry::At(0.2), TimeEntry::At(0.25)],
            vec![TimeEntry::At(0.12), TimeEntry::At(0.2), TimeEntry::At(0.25)],
        ]);
        let ev = evaluate_motion(&s, &m).unwrap();
        let start = |j: usize| {
            let k = ev.trajectory.qd.iter().position(|v| v[j].abs() > 0.5).unwrap();
            ev.trajectory.t[k]
        };
        assert!(start(0) < 0.05 && start(1) >= 0.12, "{} {}", start(0), start(1));
    }

    #[test]
    fn switch_toy_search_finds_grid_optimum() {
        let s = switch_toy();
        let plan = optimize_t(&s, &s.template(), s.settings.budget).unwrap();
        let found = plan.plan.matrix.rows[0][0];
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 1..200 {
            let a = i as f64 / 200.0;
            let ev = evaluate_motion_with(&s, &s.matrix_from(&[vec![TimeEntry::At(a), TimeEntry::At(1.0)]]), Fidelity::Search).unwrap();
            if ev.score > best.0 {
                best = (ev.score, a);
            }
        }
        assert!((found - best.1).abs() < 0.01, "{found} vs grid {}", best.1);
        assert!(plan.trace.best.windows(2).all(|w| w[1] >= w[0]));
    }

    /// No sample-to-sample change larger than the local rates and
    /// accelerations allow, and every switch instant is a grid point.
    fn assert_continuous(ev: &Evaluation) {
        let tr = &ev.trajectory;
        let peak_accel = tr.qdd.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 1..tr.len() {
            let h = tr.t[k] - tr.t[k - 1];
            for j in 0..tr.dof() {
                let rate = tr.qd[k][j].abs().max(tr.qd[k - 1][j].abs());
                assert!((tr.q[k][j] - tr.q[k - 1][j]).abs() <= h * rate + h * h * peak_accel + 1e-9);
                assert!((tr.qd[k][j] - tr.qd[k - 1][j]).abs() <= 1.5 * h * peak_accel + 1e-9);
            }
        }
        for sw in ev.schedule.switches.iter().flatten() {
            assert!(tr.t.contains(sw), "switch {sw} not on the grid");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn moving_pair_is_continuous(z in prop::collection::vec(-4.0f64..4.0, 4), r0 in -1.0f64..1.0, r1 in -1.0f64..1.0) {
            let mut s = free_pair_toy();
            s.initial.rate = vec![r0, r1];
            s.schedule.matrix = vec![vec![TimeEntry::At(0.2), TimeEntry::At(0.6), TimeEntry::At(1.0)]; 2];
            let param = MatrixParameterization::new(&s.template(), s.schedule.horizon).unwrap();
            let ev = evaluate_motion(&s, &param.decode(&z[..param.dim()])).unwrap();
            assert_continuous(&ev);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn throws_respect_the_power_cap(z in prop::collection::vec(-4.0f64..4.0, 4)) {
            let s = throwing_scenario();
            let param = MatrixParameterization::new(&s.template(), s.schedule.horizon).unwrap();
            let ev = evaluate_motion_with(&s, &param.decode(&z[..param.dim()]), Fidelity::Search).unwrap();
            prop_assert!(ev.trajectory.peak_power() <= s.model.system_power + 1e-6, "{}", ev.trajectory.peak_power());
            assert_continuous(&ev);
        }

        #[test]
        fn best_so_far_never_drops(seed in 0u64..1000) {
            let mut s = switch_toy();
            s.settings.seed = seed;
            let plan = optimize_t(&s, &s.template(), 30).unwrap();
            prop_assert_eq!(plan.trace.best.len(), plan.trace.evaluations);
            prop_assert!(plan.trace.best.windows(2).all(|w| w[1] >= w[0]));
            prop_assert_eq!(*plan.trace.best.last().unwrap(), plan.trace.best.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }

    #[test]
    fn budget_split_is_exact() {
        assert_eq!(split_budget(500, 5), vec![100; 5]);
        assert_eq!(split_budget(7, 3), vec![3, 2, 2]);
        assert_eq!(split_budget(2, 5), vec![1, 1]);
    }
}
