//! Reference optimum: one collocation problem over the whole horizon and
//! all joints at once, with no response-time matrix.
//!
//! Controls are joint accelerations held constant on each of the
//! `oracle_nodes − 1` intervals. Angles and rates follow from them exactly,
//! torques come from inverse dynamics. Limits are checked at both ends and
//! the midpoint of every interval. The solved profile is then executed by
//! computed torque on the final integrator grid and scored like any plan.

use std::cell::RefCell;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cost::throw_outcome;
use crate::dynamics::{integrate, inverse_unchecked, mass_matrix_unchecked, ChainModel, ControlLaw, Trajectory};
use crate::error::{Error, Result};
use crate::nlp::{self, Criticality, Problem, SolverOptions, Termination};
use crate::ocp::ConstraintKind;
use crate::planner::{assess, class_of, horizon, limit_scale, synchronous_plan, Evaluation, FEASIBILITY_TOLERANCE, INFEASIBLE_SCORE};
use crate::scenarios::{Objective, Scenario};
use crate::schedule::{JointMode, ModeSchedule, ResponseTimeMatrix};

/// Sample points per interval: start, midpoint, end.
const PER_INTERVAL: usize = 3;

#[derive(Clone, Copy, Debug)]
enum Quantity {
    Angle(usize),
    Rate(usize),
    Torque(usize),
    Power(usize),
    /// `Σ σ_j τ_j θ̇_j` for the sign pattern in the bits.
    System(u32),
}

#[derive(Clone, Copy, Debug)]
struct Row {
    sample: usize,
    quantity: Quantity,
    /// `+1` for an upper bound, `−1` for a lower bound.
    side: f64,
    bound: f64,
    scale: f64,
    class: Criticality,
    gain: f64,
}

/// Chain state, torque and torque sensitivities at every sample.
struct Samples {
    q: Vec<Vec<f64>>,
    qd: Vec<Vec<f64>>,
    tau: Vec<Vec<f64>>,
    /// ∂τ/∂q, ∂τ/∂θ̇ and the mass matrix (∂τ/∂θ̈).
    dq: Vec<DMatrix<f64>>,
    dqd: Vec<DMatrix<f64>>,
    mass: Vec<DMatrix<f64>>,
}

struct Collocation<'a> {
    scenario: &'a Scenario,
    model: &'a ChainModel,
    n: usize,
    intervals: usize,
    step: f64,
    t_final: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rows: Vec<Row>,
    /// Per sample: ∂q/∂u and ∂θ̇/∂u of one joint with respect to its own
    /// interval controls.
    angle_sens: Vec<Vec<f64>>,
    rate_sens: Vec<Vec<f64>>,
    cache: RefCell<Option<(Vec<f64>, std::rc::Rc<Samples>)>>,
}

impl<'a> Collocation<'a> {
    fn new(scenario: &'a Scenario, t_final: f64) -> Self {
        let model = &scenario.model;
        let n = scenario.dof();
        let intervals = scenario.settings.oracle_nodes - 1;
        let step = t_final / intervals as f64;
        let samples = intervals * PER_INTERVAL;
        let offsets = [0.0, 0.5 * step, step];

        let mut angle_sens = vec![vec![0.0; intervals]; samples];
        let mut rate_sens = vec![vec![0.0; intervals]; samples];
        for i in 0..intervals {
            for (p, &tau) in offsets.iter().enumerate() {
                let s = i * PER_INTERVAL + p;
                let t = i as f64 * step + tau;
                for l in 0..i {
                    // control l acts over [t_l, t_{l+1}] and then carries its rate forward
                    let end = (l + 1) as f64 * step;
                    angle_sens[s][l] = 0.5 * step * step + step * (t - end);
                    rate_sens[s][l] = step;
                }
                angle_sens[s][i] = 0.5 * tau * tau;
                rate_sens[s][i] = tau;
            }
        }

        let margin = scenario.settings.margin;
        let mut rows = Vec::new();
        let bound_rows = |sample: usize, quantity: Quantity, lo: f64, hi: f64, class: Criticality, gain: f64, rows: &mut Vec<Row>| {
            let scale = limit_scale(lo, hi);
            if hi.is_finite() {
                rows.push(Row { sample, quantity, side: 1.0, bound: hi - margin * scale, scale, class, gain });
            }
            if lo.is_finite() {
                rows.push(Row { sample, quantity, side: -1.0, bound: lo + margin * scale, scale, class, gain });
            }
        };
        for s in 0..samples {
            for j in 0..n {
                let l = &model.limits[j];
                let kinds = [
                    (ConstraintKind::Angle, Quantity::Angle(j), l.angle),
                    (ConstraintKind::Velocity, Quantity::Rate(j), [-l.velocity, l.velocity]),
                    (ConstraintKind::Torque, Quantity::Torque(j), l.torque),
                    (ConstraintKind::JointPower, Quantity::Power(j), l.power),
                ];
                for (kind, quantity, [lo, hi]) in kinds {
                    if let Some((class, gain)) = class_of(scenario, kind) {
                        bound_rows(s, quantity, lo, hi, class, gain, &mut rows);
                    }
                }
            }
            if let Some((class, gain)) = class_of(scenario, ConstraintKind::SystemPower) {
                let cap = model.system_power;
                if cap.is_finite() {
                    for bits in 0..(1u32 << n) {
                        let scale = cap.max(1.0);
                        rows.push(Row { sample: s, quantity: Quantity::System(bits), side: 1.0, bound: cap - margin * scale, scale, class, gain });
                    }
                }
            }
        }
        let last = samples - 1;
        for (j, goals) in scenario.goals.iter().enumerate() {
            if let Some(goal) = goals.terminal {
                for (quantity, [lo, hi]) in [(Quantity::Angle(j), goal.angle), (Quantity::Rate(j), goal.rate)] {
                    for (side, bound) in [(1.0, hi), (-1.0, lo)] {
                        if bound.is_finite() {
                            rows.push(Row { sample: last, quantity, side, bound, scale: 1.0, class: Criticality::Critical, gain: 1.0 });
                        }
                    }
                }
            }
        }

        let bounds: Vec<f64> = (0..n).flat_map(|j| std::iter::repeat_n(scenario.control_bound[j], intervals)).collect();
        Self {
            scenario,
            model,
            n,
            intervals,
            step,
            t_final,
            lower: bounds.iter().map(|b| -b).collect(),
            upper: bounds,
            rows,
            angle_sens,
            rate_sens,
            cache: RefCell::new(None),
        }
    }

    fn control(&self, x: &[f64], interval: usize) -> Vec<f64> {
        (0..self.n).map(|j| x[j * self.intervals + interval]).collect()
    }

    fn samples(&self, x: &[f64]) -> std::rc::Rc<Samples> {
        if let Some((key, s)) = self.cache.borrow().as_ref() {
            if key.as_slice() == x {
                return s.clone();
            }
        }
        let (n, m) = (self.n, self.intervals);
        let q0 = &self.scenario.initial.angle;
        let qd0 = &self.scenario.initial.rate;
        let total = m * PER_INTERVAL;
        let mut out = Samples {
            q: Vec::with_capacity(total),
            qd: Vec::with_capacity(total),
            tau: Vec::with_capacity(total),
            dq: Vec::with_capacity(total),
            dqd: Vec::with_capacity(total),
            mass: Vec::with_capacity(total),
        };
        let h = 1e-6;
        for s in 0..total {
            let i = s / PER_INTERVAL;
            let t = i as f64 * self.step + [0.0, 0.5, 1.0][s % PER_INTERVAL] * self.step;
            let q: Vec<f64> = (0..n)
                .map(|j| q0[j] + qd0[j] * t + (0..=i).map(|l| self.angle_sens[s][l] * x[j * m + l]).sum::<f64>())
                .collect();
            let qd: Vec<f64> = (0..n)
                .map(|j| qd0[j] + (0..=i).map(|l| self.rate_sens[s][l] * x[j * m + l]).sum::<f64>())
                .collect();
            let u = self.control(x, i);
            let tau = inverse_unchecked(self.model, &q, &qd, &u);
            let mut dq = DMatrix::zeros(n, n);
            let mut dqd = DMatrix::zeros(n, n);
            for c in 0..n {
                let (mut up, mut down) = (q.clone(), q.clone());
                up[c] += h;
                down[c] -= h;
                let (a, b) = (inverse_unchecked(self.model, &up, &qd, &u), inverse_unchecked(self.model, &down, &qd, &u));
                let (mut vup, mut vdown) = (qd.clone(), qd.clone());
                vup[c] += h;
                vdown[c] -= h;
                let (va, vb) = (inverse_unchecked(self.model, &q, &vup, &u), inverse_unchecked(self.model, &q, &vdown, &u));
                for r in 0..n {
                    dq[(r, c)] = (a[r] - b[r]) / (2.0 * h);
                    dqd[(r, c)] = (va[r] - vb[r]) / (2.0 * h);
                }
            }
            out.mass.push(mass_matrix_unchecked(self.model, &q));
            out.q.push(q);
            out.qd.push(qd);
            out.tau.push(tau);
            out.dq.push(dq);
            out.dqd.push(dqd);
        }
        let out = std::rc::Rc::new(out);
        *self.cache.borrow_mut() = Some((x.to_vec(), out.clone()));
        out
    }

    fn value(row: &Row, s: &Samples) -> f64 {
        let k = row.sample;
        match row.quantity {
            Quantity::Angle(j) => s.q[k][j],
            Quantity::Rate(j) => s.qd[k][j],
            Quantity::Torque(j) => s.tau[k][j],
            Quantity::Power(j) => s.tau[k][j] * s.qd[k][j],
            Quantity::System(bits) => (0..s.q[k].len()).map(|j| sign(bits, j) * s.tau[k][j] * s.qd[k][j]).sum(),
        }
    }

    /// Pulls per-sample adjoints on (q, θ̇, τ) back onto the controls.
    fn pull_back(&self, s: &Samples, adj_q: &[Vec<f64>], adj_qd: &[Vec<f64>], adj_tau: &[Vec<f64>], grad: &mut [f64]) {
        let (n, m) = (self.n, self.intervals);
        for k in 0..adj_q.len() {
            let i = k / PER_INTERVAL;
            let lt = nalgebra::DVector::from_column_slice(&adj_tau[k]);
            let on_q = s.dq[k].tr_mul(&lt);
            let on_qd = s.dqd[k].tr_mul(&lt);
            let on_u = s.mass[k].tr_mul(&lt);
            for j in 0..n {
                let (aq, av) = (adj_q[k][j] + on_q[j], adj_qd[k][j] + on_qd[j]);
                if aq != 0.0 || av != 0.0 {
                    for l in 0..=i {
                        grad[j * m + l] += self.angle_sens[k][l] * aq + self.rate_sens[k][l] * av;
                    }
                }
                grad[j * m + i] += on_u[j];
            }
        }
    }

    fn zero_adjoints(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.n]; self.intervals * PER_INTERVAL]
    }
}

fn sign(bits: u32, j: usize) -> f64 {
    if bits >> j & 1 == 1 {
        -1.0
    } else {
        1.0
    }
}

impl Problem for Collocation<'_> {
    fn dim(&self) -> usize {
        self.n * self.intervals
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn objective(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let s = self.samples(x);
        let last = s.q.len() - 1;
        let (mut aq, mut av, mut at) = (self.zero_adjoints(), self.zero_adjoints(), self.zero_adjoints());
        let value = match &self.scenario.objective {
            Objective::ThrowRange => {
                let q0 = &self.scenario.initial.angle;
                let inputs = [s.qd[last][0], s.qd[last][1], s.q[last][0] - q0[0], s.q[last][1] - q0[1]];
                let range = |v: &[f64]| throw_outcome(self.model, [v[0], v[1]], [v[2], v[3]]).map_or(0.0, |o| o.range);
                let d = nlp::central_difference(range, &inputs, 1e-7);
                av[last] = vec![-d[0], -d[1]];
                aq[last] = vec![-d[2], -d[3]];
                -range(&inputs)
            }
            Objective::TerminalTimeTorque { time_weight, torque_weight } => {
                let mut sum = 0.0;
                for (k, tau) in s.tau.iter().enumerate() {
                    // Simpson's rule on each interval
                    let w = torque_weight * self.step / 6.0 * if k % PER_INTERVAL == 1 { 4.0 } else { 1.0 };
                    sum += w * tau.iter().map(|v| v * v).sum::<f64>();
                    at[k] = tau.iter().map(|v| 2.0 * w * v).collect();
                }
                time_weight * self.t_final + sum
            }
            Objective::TerminalPosition { targets, weight } => {
                aq[last] = s.q[last].iter().zip(targets).map(|(a, b)| 2.0 * weight * (a - b)).collect();
                weight * s.q[last].iter().zip(targets).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            }
        };
        self.pull_back(&s, &aq, &av, &at, grad);
        value
    }

    fn constraint_count(&self) -> usize {
        self.rows.len()
    }

    fn constraints(&self, x: &[f64], g: &mut [f64]) {
        let s = self.samples(x);
        for (r, row) in self.rows.iter().enumerate() {
            g[r] = row.side * (Self::value(row, &s) - row.bound) / row.scale;
        }
    }

    fn constraint_vjp(&self, x: &[f64], w: &[f64], grad: &mut [f64]) {
        let s = self.samples(x);
        let (mut aq, mut av, mut at) = (self.zero_adjoints(), self.zero_adjoints(), self.zero_adjoints());
        for (row, &wr) in self.rows.iter().zip(w) {
            if wr == 0.0 {
                continue;
            }
            let c = wr * row.side / row.scale;
            let k = row.sample;
            match row.quantity {
                Quantity::Angle(j) => aq[k][j] += c,
                Quantity::Rate(j) => av[k][j] += c,
                Quantity::Torque(j) => at[k][j] += c,
                Quantity::Power(j) => {
                    at[k][j] += c * s.qd[k][j];
                    av[k][j] += c * s.tau[k][j];
                }
                Quantity::System(bits) => {
                    for j in 0..self.n {
                        at[k][j] += c * sign(bits, j) * s.qd[k][j];
                        av[k][j] += c * sign(bits, j) * s.tau[k][j];
                    }
                }
            }
        }
        self.pull_back(&s, &aq, &av, &at, grad);
    }

    fn criticality(&self, j: usize) -> Criticality {
        self.rows[j].class
    }

    fn gain(&self, j: usize) -> f64 {
        self.rows[j].gain
    }
}

/// Executes interval-constant accelerations by computed torque.
struct Replay<'a> {
    model: &'a ChainModel,
    controls: &'a [f64],
    intervals: usize,
    step: f64,
    current: usize,
}

impl ControlLaw for Replay<'_> {
    fn torque(&mut self, _t: f64, q: &[f64], qd: &[f64], _modes: &[JointMode]) -> Vec<f64> {
        let u: Vec<f64> = (0..q.len()).map(|j| self.controls[j * self.intervals + self.current]).collect();
        inverse_unchecked(self.model, q, qd, &u)
    }

    fn on_grid_point(&mut self, t: f64, _q: &[f64], _qd: &[f64], _modes: &[JointMode]) {
        self.current = ((t / self.step + 1e-9).floor() as usize).min(self.intervals - 1);
    }
}

/// Diagnostics of the oracle solve that produced a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub intervals: usize,
    pub starts: usize,
    /// Index of the start the plan came from: 0 is the zero control, then
    /// the warm starts in order.
    pub chosen_start: usize,
    pub converged: bool,
    pub outer_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePlan {
    pub plan: Evaluation,
    pub report: OracleReport,
}

/// Matrix under which every joint is active for the whole horizon.
pub fn all_active_matrix(scenario: &Scenario, t_final: f64) -> ResponseTimeMatrix {
    ResponseTimeMatrix::new(vec![vec![t_final]; scenario.dof()], vec![JointMode::Active; scenario.dof()])
}

/// Interval-constant accelerations reproducing the rates of `traj` at the
/// interval ends.
fn controls_from(traj: &Trajectory, n: usize, intervals: usize, step: f64, bounds: &[f64]) -> Vec<f64> {
    let rate_at = |t: f64, j: usize| {
        let k = traj.index_at(t);
        if k == 0 || traj.t[k] <= t {
            return traj.qd[k][j];
        }
        let w = (t - traj.t[k - 1]) / (traj.t[k] - traj.t[k - 1]);
        traj.qd[k - 1][j] + w * (traj.qd[k][j] - traj.qd[k - 1][j])
    };
    let mut x = vec![0.0; n * intervals];
    for j in 0..n {
        for i in 0..intervals {
            let u = (rate_at((i + 1) as f64 * step, j) - rate_at(i as f64 * step, j)) / step;
            x[j * intervals + i] = u.clamp(-bounds[j], bounds[j]);
        }
    }
    x
}

/// Solves the whole-horizon problem from the zero control and from every
/// trajectory in `warm`, and returns the best executed result.
pub fn oracle_plan(scenario: &Scenario, warm: &[&Trajectory]) -> Result<OraclePlan> {
    scenario.validate()?;
    let t_final = horizon(scenario, &scenario.template());
    let problem = Collocation::new(scenario, t_final);
    let matrix = all_active_matrix(scenario, t_final);
    let schedule = ModeSchedule::build(&matrix, scenario.schedule_options())?;
    let (n, m, step) = (problem.n, problem.intervals, problem.step);

    let mut starts = vec![vec![0.0; n * m]];
    starts.extend(warm.iter().map(|t| controls_from(t, n, m, step, &scenario.control_bound)));
    let options = SolverOptions {
        kkt_tolerance: 1e-6,
        feasibility_tolerance: 1e-8,
        ..SolverOptions::default()
    };

    let mut best: Option<OraclePlan> = None;
    for (index, x0) in starts.iter().enumerate() {
        let sol = nlp::solve(&problem, x0, &options);
        let mut law = Replay { model: &scenario.model, controls: &sol.x, intervals: m, step, current: 0 };
        let node_times: Vec<f64> = (1..m).map(|i| i as f64 * step).collect();
        let traj = integrate(
            &scenario.model,
            &mut law,
            &scenario.initial.angle,
            &scenario.initial.rate,
            (0.0, t_final),
            scenario.settings.final_dt,
            &node_times,
            Some(&schedule),
        )?;
        let a = assess(scenario, &schedule, &matrix, &traj)?;
        let feasible = a.critical_violation <= FEASIBILITY_TOLERANCE;
        let score = if feasible { a.objective - a.penalty } else { INFEASIBLE_SCORE - a.critical_violation };
        let plan = Evaluation {
            matrix: matrix.clone(),
            schedule: schedule.clone(),
            trajectory: traj,
            objective: a.objective,
            penalty: a.penalty,
            score,
            critical_violation: a.critical_violation,
            feasible,
            throw: a.throw,
            segments: Vec::new(),
        };
        let report = OracleReport {
            intervals: m,
            starts: starts.len(),
            chosen_start: index,
            converged: sol.termination == Termination::Converged,
            outer_iterations: sol.outer_iterations,
        };
        if best.as_ref().is_none_or(|b| plan.score > b.plan.score) {
            best = Some(OraclePlan { plan, report });
        }
    }
    let mut best = best.ok_or_else(|| Error::Planning("oracle has no starting point".into()))?;
    best.report.starts = starts.len();
    Ok(best)
}

/// The two reference plans a schedule is judged against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub synchronous: Evaluation,
    pub oracle: OraclePlan,
}

/// Synchronous plan, and the oracle warm-started from it.
pub fn make_baselines(scenario: &Scenario) -> Result<Baselines> {
    let synchronous = synchronous_plan(scenario)?;
    let oracle = oracle_plan(scenario, &[&synchronous.trajectory])?;
    Ok(Baselines { synchronous, oracle })
}
