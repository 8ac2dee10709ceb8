//! Single-joint optimal control over one schedule span.
//!
//! The joint is a double integrator `θ̈ = u` whose torque is affine in `u`
//! through a coupling profile frozen from the rest of the chain. The control
//! is held constant on each collocation interval and is the only decision
//! variable: nodal rates and angles follow from the trapezoidal recurrences,
//! which are exact for such controls, so the collocation defects vanish
//! identically and the NLP is a box-constrained problem over `u`.

use serde::{Deserialize, Serialize};

use crate::cost::CostWeights;
use crate::dynamics::JointLimits;
use crate::error::{Error, Result};
use crate::nlp::{self, Criticality, Problem, SolverOptions, Termination};
use crate::schedule::JointMode;

pub use crate::nlp::{penalty, violation_measure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Angle,
    Velocity,
    Torque,
    JointPower,
    SystemPower,
    Goal,
}

fn default_gain() -> f64 {
    100.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    pub class: Criticality,
    #[serde(default = "default_gain")]
    pub gain: f64,
}

impl ConstraintSpec {
    pub const fn new(kind: ConstraintKind, class: Criticality) -> Self {
        Self { kind, class, gain: 100.0 }
    }
}

/// Angle and torque limits hard, power soft.
pub fn default_constraints() -> Vec<ConstraintSpec> {
    use ConstraintKind::*;
    use Criticality::*;
    vec![
        ConstraintSpec::new(Angle, Critical),
        ConstraintSpec::new(Velocity, Critical),
        ConstraintSpec::new(Torque, Critical),
        ConstraintSpec::new(JointPower, LessCritical),
        ConstraintSpec::new(SystemPower, LessCritical),
    ]
}

/// Terminal set: a box in (θ, θ̇). Infinite sides are unconstrained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalBox {
    pub angle: [f64; 2],
    pub rate: [f64; 2],
}

impl GoalBox {
    pub fn point(angle: f64, rate: f64) -> Self {
        Self {
            angle: [angle, angle],
            rate: [rate, rate],
        }
    }

    pub fn rate_at_least(min: f64) -> Self {
        Self {
            angle: [f64::NEG_INFINITY, f64::INFINITY],
            rate: [min, f64::INFINITY],
        }
    }

    pub fn contains(&self, angle: f64, rate: f64, tol: f64) -> bool {
        angle >= self.angle[0] - tol && angle <= self.angle[1] + tol && rate >= self.rate[0] - tol && rate <= self.rate[1] + tol
    }

    /// Summed distance outside the box.
    pub fn violation(&self, angle: f64, rate: f64) -> f64 {
        (self.angle[0] - angle).max(0.0) + (angle - self.angle[1]).max(0.0) + (self.rate[0] - rate).max(0.0) + (rate - self.rate[1]).max(0.0)
    }

    fn center(&self, lo: f64, hi: f64, fallback: f64) -> f64 {
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo.max(fallback),
            (false, true) => hi.min(fallback),
            (false, false) => fallback,
        }
    }
}

/// Frozen per-node coupling: torque is `inertia·u + bias`, and the rest of
/// the chain draws `other_power`.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Coupling {
    pub inertia: Vec<f64>,
    pub bias: Vec<f64>,
    pub other_power: Vec<f64>,
}

impl Coupling {
    pub fn uniform(nodes: usize, inertia: f64, bias: f64) -> Self {
        Self {
            inertia: vec![inertia; nodes],
            bias: vec![bias; nodes],
            other_power: vec![0.0; nodes],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpSpec {
    pub t_start: f64,
    pub t_end: f64,
    /// (θ, θ̇) at `t_start`.
    pub initial: [f64; 2],
    pub goal: Option<GoalBox>,
    /// One weight triple per node, or a single triple for all nodes.
    pub weights: Vec<CostWeights>,
    pub constraints: Vec<ConstraintSpec>,
    pub limits: JointLimits,
    pub system_power: f64,
    pub u_max: f64,
    pub nodes: usize,
    /// Back-off applied to every limit, as a fraction of its scale.
    pub margin: f64,
}

impl OcpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_start < self.t_end) || !self.t_start.is_finite() || !self.t_end.is_finite() {
            return Err(Error::Input(format!("segment [{}, {}] is empty", self.t_start, self.t_end)));
        }
        if self.nodes < 3 {
            return Err(Error::Parameter(format!("need at least 3 nodes, got {}", self.nodes)));
        }
        if !(self.u_max > 0.0) {
            return Err(Error::Parameter("control bound must be positive".into()));
        }
        if !(self.initial[0].is_finite() && self.initial[1].is_finite()) {
            return Err(Error::Input("initial state must be finite".into()));
        }
        if self.weights.is_empty() || (self.weights.len() != 1 && self.weights.len() != self.nodes) {
            return Err(Error::Input("weights must have one entry or one per node".into()));
        }
        for w in &self.weights {
            w.validate()?;
        }
        for c in &self.constraints {
            if c.class == Criticality::LessCritical && !(c.gain > 0.0) {
                return Err(Error::Parameter(format!("penalty gain for {:?} must be positive", c.kind)));
            }
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::Parameter("margin must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / (self.nodes - 1) as f64
    }

    pub fn node_times(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.nodes)
            .map(|k| if k + 1 == self.nodes { self.t_end } else { self.t_start + k as f64 * h })
            .collect()
    }

    fn weights_at(&self, k: usize) -> CostWeights {
        if self.weights.len() == 1 {
            self.weights[0]
        } else {
            self.weights[k]
        }
    }

    fn class_of(&self, kind: ConstraintKind) -> Option<ConstraintSpec> {
        if kind == ConstraintKind::Goal {
            return Some(ConstraintSpec::new(kind, Criticality::Critical));
        }
        self.constraints.iter().copied().find(|c| c.kind == kind)
    }
}

/// Costates (one per state) and constraint multipliers.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentedState {
    pub costate: Vec<f64>,
    pub multipliers: Vec<f64>,
}

/// `L + λᵀf + μᵀg + Σ penalties`.
pub fn augmented_hamiltonian(running: f64, dynamics: &[f64], constraints: &[f64], state: &AugmentedState, penalties: &[f64]) -> Result<f64> {
    if state.costate.len() != dynamics.len() {
        return Err(Error::Input(format!(
            "{} costates for {} state derivatives",
            state.costate.len(),
            dynamics.len()
        )));
    }
    if state.multipliers.len() != constraints.len() {
        return Err(Error::Input(format!(
            "{} multipliers for {} constraints",
            state.multipliers.len(),
            constraints.len()
        )));
    }
    if state.multipliers.iter().any(|m| *m < 0.0) {
        return Err(Error::Input("multipliers must be non-negative".into()));
    }
    let lf: f64 = state.costate.iter().zip(dynamics).map(|(a, b)| a * b).sum();
    let mg: f64 = state.multipliers.iter().zip(constraints).map(|(a, b)| a * b).sum();
    Ok(running + lf + mg + penalties.iter().sum::<f64>())
}

/// Pieces of the pointwise Hamiltonian on one collocation interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDiagnostics {
    pub t: f64,
    pub running: f64,
    pub dynamics: [f64; 2],
    pub state: AugmentedState,
    /// Critical constraint values depending on this interval's control.
    pub constraints: Vec<f64>,
    /// Penalty values of less-critical constraints on this interval.
    pub penalties: Vec<f64>,
    pub hamiltonian: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSolution {
    pub mode: JointMode,
    /// Node times.
    pub t: Vec<f64>,
    pub angle: Vec<f64>,
    pub rate: Vec<f64>,
    /// Control on each interval `[t_k, t_{k+1})`.
    pub control: Vec<f64>,
    /// Torque at the start of each interval.
    pub torque: Vec<f64>,
    pub objective: f64,
    /// Every constraint row, normalized by its limit scale.
    pub constraint_values: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub critical_violation: f64,
    pub less_critical_violation: f64,
    /// Largest trapezoidal defect of the stored states.
    pub defect_residual: f64,
    /// `‖∂H/∂u‖∞` over intervals where the control bound is inactive.
    pub stationarity: f64,
    /// `max_j |μ_j g_j|`.
    pub slackness: f64,
    /// Smallest pointwise `∂²H/∂u²`.
    pub hessian_min: f64,
    /// False when `∂²H/∂u² ≤ 0` somewhere: the result is the best feasible
    /// iterate, not a certified minimum.
    pub convex: bool,
    /// Less-critical violation after each continuation round.
    pub continuation: Vec<f64>,
    pub iterations: usize,
    pub nodes: Vec<NodeDiagnostics>,
}

impl SegmentSolution {
    /// Control at time `t`, held outside the segment.
    pub fn control_at(&self, t: f64) -> f64 {
        let k = self.t.partition_point(|x| *x <= t).saturating_sub(1);
        self.control[k.min(self.control.len() - 1)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Quantity {
    Angle,
    Rate,
    Torque,
    Power,
    /// `s·τθ̇ + P_others`.
    System(f64),
}

#[derive(Clone, Copy, Debug)]
struct Row {
    node: usize,
    /// Interval whose control the row depends on.
    control: usize,
    quantity: Quantity,
    sign: f64,
    bound: f64,
    scale: f64,
    class: Criticality,
    gain: f64,
}

/// The transcribed segment problem, exposed for derivative checks.
pub struct SegmentNlp<'a> {
    spec: &'a OcpSpec,
    coupling: &'a Coupling,
    h: f64,
    rows: Vec<Row>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<'a> SegmentNlp<'a> {
    pub fn new(spec: &'a OcpSpec, coupling: &'a Coupling) -> Result<Self> {
        spec.validate()?;
        let n = spec.nodes;
        if coupling.inertia.len() != n || coupling.bias.len() != n || coupling.other_power.len() != n {
            return Err(Error::Input(format!("coupling profile must have {n} nodes")));
        }
        if coupling.inertia.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Input("coupled inertia must be positive".into()));
        }
        let h = spec.step();
        // (node, interval) pairs: states at nodes 1.., controls at both ends of every interval
        let state_nodes: Vec<(usize, usize)> = (1..n).map(|k| (k, k - 1)).collect();
        let control_ends: Vec<(usize, usize)> = (0..n - 1).flat_map(|i| [(i, i), (i + 1, i)]).collect();
        let terminal = [(n - 1, n - 2)];

        let mut rows = Vec::new();
        let lim = &spec.limits;
        let mut two_sided = |kind: ConstraintKind, quantity: Quantity, lo: f64, hi: f64, at: &[(usize, usize)]| {
            let Some(c) = spec.class_of(kind) else { return };
            let scale = lo.abs().max(hi.abs());
            let scale = if scale.is_finite() { scale.max(1.0) } else { 1.0 };
            let back = if kind == ConstraintKind::Goal { 0.0 } else { spec.margin * scale };
            for &(node, control) in at {
                let mut row = Row { node, control, quantity, sign: 1.0, bound: hi - back, scale, class: c.class, gain: c.gain };
                if hi.is_finite() {
                    rows.push(row);
                }
                if lo.is_finite() {
                    row.sign = -1.0;
                    row.bound = -(lo + back);
                    rows.push(row);
                }
            }
        };
        two_sided(ConstraintKind::Angle, Quantity::Angle, lim.angle[0], lim.angle[1], &state_nodes);
        two_sided(ConstraintKind::Velocity, Quantity::Rate, -lim.velocity, lim.velocity, &state_nodes);
        two_sided(ConstraintKind::Torque, Quantity::Torque, lim.torque[0], lim.torque[1], &control_ends);
        two_sided(ConstraintKind::JointPower, Quantity::Power, lim.power[0], lim.power[1], &control_ends);
        if let Some(g) = spec.goal {
            two_sided(ConstraintKind::Goal, Quantity::Angle, g.angle[0], g.angle[1], &terminal);
            two_sided(ConstraintKind::Goal, Quantity::Rate, g.rate[0], g.rate[1], &terminal);
        }
        if let Some(c) = spec.class_of(ConstraintKind::SystemPower) {
            if spec.system_power.is_finite() {
                let p = spec.system_power;
                for &(node, control) in &control_ends {
                    for s in [1.0, -1.0] {
                        rows.push(Row {
                            node,
                            control,
                            quantity: Quantity::System(s),
                            sign: 1.0,
                            bound: p * (1.0 - spec.margin),
                            scale: p.max(1.0),
                            class: c.class,
                            gain: c.gain,
                        });
                    }
                }
            }
        }
        Ok(Self {
            spec,
            coupling,
            h,
            rows,
            lo: vec![-spec.u_max; n - 1],
            hi: vec![spec.u_max; n - 1],
        })
    }

    /// Nodal (θ, θ̇) from the interval controls.
    pub fn states(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = u.len() + 1;
        let mut th = vec![self.spec.initial[0]; n];
        let mut om = vec![self.spec.initial[1]; n];
        for k in 1..n {
            om[k] = om[k - 1] + self.h * u[k - 1];
            th[k] = th[k - 1] + 0.5 * self.h * (om[k - 1] + om[k]);
        }
        (th, om)
    }

    pub fn torque(&self, node: usize, u: f64) -> f64 {
        self.coupling.inertia[node] * u + self.coupling.bias[node]
    }

    /// Row value and partials with respect to (θ, θ̇, u).
    fn row(&self, r: &Row, th: f64, om: f64, u: f64) -> (f64, [f64; 3]) {
        let k = r.node;
        let inertia = self.coupling.inertia[k];
        let tau = inertia * u + self.coupling.bias[k];
        let (q, d) = match r.quantity {
            Quantity::Angle => (th, [1.0, 0.0, 0.0]),
            Quantity::Rate => (om, [0.0, 1.0, 0.0]),
            Quantity::Torque => (tau, [0.0, 0.0, inertia]),
            Quantity::Power => (tau * om, [0.0, tau, inertia * om]),
            Quantity::System(s) => (s * tau * om + self.coupling.other_power[k], [0.0, s * tau, s * inertia * om]),
        };
        let f = r.sign / r.scale;
        ((r.sign * q - r.bound) / r.scale, [d[0] * f, d[1] * f, d[2] * f])
    }

    /// Pulls nodal adjoints of (θ, θ̇) back onto the controls.
    fn backprop(&self, gth: &mut [f64], gom: &mut [f64], gu: &mut [f64]) {
        let h = self.h;
        for k in (0..gu.len()).rev() {
            gth[k] += gth[k + 1];
            gom[k + 1] += 0.5 * h * gth[k + 1];
            gom[k] += 0.5 * h * gth[k + 1];
            gom[k] += gom[k + 1];
            gu[k] += h * gom[k + 1];
        }
    }

    fn interval_weights(&self, i: usize) -> CostWeights {
        let a = self.spec.weights_at(i);
        let b = self.spec.weights_at(i + 1);
        a.lerp(&b, 0.5)
    }

    /// Exact interval cost for a constant control and linear rate.
    fn interval_cost(&self, i: usize, om0: f64, om1: f64, u: f64) -> (f64, [f64; 3]) {
        let w = self.interval_weights(i);
        let h = self.h;
        let c = w.k_u - w.k_a;
        let sq = (om0 * om0 + om0 * om1 + om1 * om1) / 3.0;
        let value = h * (c * u * u - w.k_v * sq);
        let d0 = -h * w.k_v * (2.0 * om0 + om1) / 3.0;
        let d1 = -h * w.k_v * (om0 + 2.0 * om1) / 3.0;
        (value, [d0, d1, 2.0 * h * c * u])
    }
}

impl Problem for SegmentNlp<'_> {
    fn dim(&self) -> usize {
        self.spec.nodes - 1
    }

    fn lower(&self) -> &[f64] {
        &self.lo
    }

    fn upper(&self) -> &[f64] {
        &self.hi
    }

    fn objective(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let n = u.len() + 1;
        let (_, om) = self.states(u);
        let mut gth = vec![0.0; n];
        let mut gom = vec![0.0; n];
        let mut value = 0.0;
        for i in 0..n - 1 {
            let (v, d) = self.interval_cost(i, om[i], om[i + 1], u[i]);
            value += v;
            gom[i] += d[0];
            gom[i + 1] += d[1];
            grad[i] = d[2];
        }
        self.backprop(&mut gth, &mut gom, grad);
        value
    }

    fn constraint_count(&self) -> usize {
        self.rows.len()
    }

    fn constraints(&self, u: &[f64], g: &mut [f64]) {
        let (th, om) = self.states(u);
        for (gj, r) in g.iter_mut().zip(&self.rows) {
            *gj = self.row(r, th[r.node], om[r.node], u[r.control]).0;
        }
    }

    fn constraint_vjp(&self, u: &[f64], w: &[f64], grad: &mut [f64]) {
        let n = u.len() + 1;
        let (th, om) = self.states(u);
        let mut gth = vec![0.0; n];
        let mut gom = vec![0.0; n];
        let mut gu = vec![0.0; n - 1];
        for (wj, r) in w.iter().zip(&self.rows) {
            if *wj == 0.0 {
                continue;
            }
            let (_, d) = self.row(r, th[r.node], om[r.node], u[r.control]);
            gth[r.node] += wj * d[0];
            gom[r.node] += wj * d[1];
            gu[r.control] += wj * d[2];
        }
        self.backprop(&mut gth, &mut gom, &mut gu);
        for (a, b) in grad.iter_mut().zip(&gu) {
            *a += b;
        }
    }

    fn criticality(&self, j: usize) -> Criticality {
        self.rows[j].class
    }

    fn gain(&self, j: usize) -> f64 {
        self.rows[j].gain
    }
}

/// Rejects goals that a double integrator with `|u| ≤ u_max` cannot reach in
/// the horizon, sampling the reachable terminal rates inside the goal box.
pub fn check_reachable(spec: &OcpSpec) -> Result<()> {
    let Some(goal) = spec.goal else { return Ok(()) };
    let (th0, om0) = (spec.initial[0], spec.initial[1]);
    let t = spec.t_end - spec.t_start;
    let a = spec.u_max;
    let lo = goal.rate[0].max(om0 - a * t);
    let hi = goal.rate[1].min(om0 + a * t);
    let slack = 1e-9 * (1.0 + a * t);
    if lo > hi + slack {
        return Err(Error::Infeasible(format!(
            "terminal rate in [{}, {}] unreachable from {om0} within {t} s",
            goal.rate[0], goal.rate[1]
        )));
    }
    let samples = if hi > lo { 41 } else { 1 };
    for i in 0..samples {
        let w = if samples == 1 { lo.min(hi) } else { lo + (hi - lo) * i as f64 / (samples - 1) as f64 };
        // accelerate-then-brake and brake-then-accelerate bound the angle
        let s = ((w - om0 + a * t) / (2.0 * a)).clamp(0.0, t);
        let v = om0 + a * s;
        let max = th0 + om0 * s + 0.5 * a * s * s + v * (t - s) - 0.5 * a * (t - s).powi(2);
        let s = ((om0 - w + a * t) / (2.0 * a)).clamp(0.0, t);
        let v = om0 - a * s;
        let min = th0 + om0 * s - 0.5 * a * s * s + v * (t - s) + 0.5 * a * (t - s).powi(2);
        let tol = 1e-9 * (1.0 + max.abs() + min.abs());
        if max >= goal.angle[0] - tol && min <= goal.angle[1] + tol {
            return Ok(());
        }
    }
    Err(Error::Infeasible(format!(
        "goal angle in [{}, {}] unreachable from {th0} within {t} s at |u| ≤ {a}",
        goal.angle[0], goal.angle[1]
    )))
}

/// Initial controls: the minimum-energy linear profile towards the goal
/// centre, clipped to the bound; zero without a goal.
fn initial_guess(spec: &OcpSpec) -> Vec<f64> {
    let n = spec.nodes;
    let Some(goal) = spec.goal else { return vec![0.0; n - 1] };
    let (th0, om0) = (spec.initial[0], spec.initial[1]);
    let t = spec.t_end - spec.t_start;
    let om_t = goal.center(goal.rate[0], goal.rate[1], om0);
    let th_t = goal.center(goal.angle[0], goal.angle[1], th0 + 0.5 * (om0 + om_t) * t);
    // u = a + b·s solves both terminal conditions
    let dv = om_t - om0;
    let dx = th_t - th0 - om0 * t;
    let b = (dv * t / 2.0 - dx) * 12.0 / t.powi(3);
    let a = dv / t - b * t / 2.0;
    let h = spec.step();
    (0..n - 1)
        .map(|i| (a + b * (i as f64 + 0.5) * h).clamp(-spec.u_max, spec.u_max))
        .collect()
}

/// Solves one segment. `mode` labels the result; weights come from the spec.
pub fn solve_segment(spec: &OcpSpec, coupling: &Coupling, mode: JointMode) -> Result<SegmentSolution> {
    solve_segment_with(spec, coupling, mode, &SolverOptions::default(), None)
}

/// [`solve_segment`] with explicit solver options and an optional warm start.
///
/// Without a warm start, a running cost that is not convex in `u` is also
/// started from full positive and full negative control, and the best
/// feasible result is kept.
pub fn solve_segment_with(
    spec: &OcpSpec,
    coupling: &Coupling,
    mode: JointMode,
    options: &SolverOptions,
    warm_start: Option<&[f64]>,
) -> Result<SegmentSolution> {
    let problem = SegmentNlp::new(spec, coupling)?;
    check_reachable(spec)?;
    let dim = spec.nodes - 1;
    let mut starts = vec![match warm_start {
        Some(x) if x.len() == dim => x.to_vec(),
        _ => initial_guess(spec),
    }];
    let concave = spec.weights.iter().any(|w| w.k_u <= w.k_a || w.k_v > 0.0);
    if concave && warm_start.is_none() {
        starts.push(vec![spec.u_max; dim]);
        starts.push(vec![-spec.u_max; dim]);
    }
    let mut best: Option<(nlp::Solution, SegmentSolution)> = None;
    for x0 in starts {
        let sol = nlp::solve(&problem, &x0, options);
        let out = assemble(&problem, &sol, mode);
        let better = match &best {
            None => true,
            Some((bs, bo)) => {
                let feasible = |s: &SegmentSolution| s.critical_violation <= 1e-6;
                match (feasible(&out), feasible(bo)) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => {
                        (sol.termination == Termination::Converged || bs.termination != Termination::Converged)
                            && out.objective < bo.objective - 1e-12 * (1.0 + bo.objective.abs())
                    }
                    (false, false) => out.critical_violation < bo.critical_violation,
                }
            }
        };
        if better {
            best = Some((sol, out));
        }
    }
    let (sol, out) = best.expect("at least one start");
    if sol.termination != Termination::Converged {
        return Err(Error::NonConvergence {
            iterations: sol.outer_iterations,
            best: Box::new(out),
        });
    }
    Ok(out)
}

fn assemble(p: &SegmentNlp, sol: &nlp::Solution, mode: JointMode) -> SegmentSolution {
    let spec = p.spec;
    let n = spec.nodes;
    let m = n - 1;
    let h = p.h;
    let u = &sol.x;
    let (th, om) = p.states(u);
    let torque: Vec<f64> = (0..m).map(|i| p.torque(i, u[i])).collect();
    let t = spec.node_times();
    let merit = &sol.merit;
    let multipliers: Vec<f64> = (0..p.rows.len())
        .map(|j| if p.rows[j].class == Criticality::Critical { merit.multipliers[j] } else { 0.0 })
        .collect();

    // adjoints of the Lagrangian give the discrete costates
    let mut gth = vec![0.0; n];
    let mut gom = vec![0.0; n];
    let mut gu = vec![0.0; m];
    let mut running = vec![0.0; m];
    let mut curvature = vec![0.0; m];
    for i in 0..m {
        let (v, d) = p.interval_cost(i, om[i], om[i + 1], u[i]);
        running[i] = v / h;
        gom[i] += d[0];
        gom[i + 1] += d[1];
        gu[i] = d[2];
        let w = p.interval_weights(i);
        curvature[i] = 2.0 * (w.k_u - w.k_a);
    }
    let mut interval_crit: Vec<Vec<(f64, f64)>> = vec![Vec::new(); m];
    let mut interval_pen: Vec<Vec<f64>> = vec![Vec::new(); m];
    for (j, r) in p.rows.iter().enumerate() {
        let (g, d) = p.row(r, th[r.node], om[r.node], u[r.control]);
        let weight = match r.class {
            Criticality::Critical => {
                interval_crit[r.control].push((g, multipliers[j]));
                multipliers[j]
            }
            Criticality::LessCritical => {
                let gain = r.gain * merit.penalty_scale;
                interval_pen[r.control].push(nlp::penalty(g, r.class, 0.0, gain) / h);
                if g > 0.0 {
                    curvature[r.control] += 2.0 * gain * d[2] * d[2] / h;
                }
                2.0 * gain * g.max(0.0)
            }
        };
        gth[r.node] += weight * d[0];
        gom[r.node] += weight * d[1];
        gu[r.control] += weight * d[2];
    }
    p.backprop(&mut gth, &mut gom, &mut gu);

    let tol = 1e-9 * spec.u_max;
    let stationarity = (0..m)
        .filter(|&i| u[i].abs() < spec.u_max - tol)
        .map(|i| (gu[i] / h).abs())
        .fold(0.0, f64::max);

    let nodes: Vec<NodeDiagnostics> = (0..m)
        .map(|i| {
            // sensitivity of the remaining Lagrangian to the interval's end state
            let state = AugmentedState {
                costate: vec![gth[i + 1], gom[i + 1]],
                multipliers: interval_crit[i].iter().map(|x| x.1).collect(),
            };
            let constraints: Vec<f64> = interval_crit[i].iter().map(|x| x.0).collect();
            let dynamics = [0.5 * (om[i] + om[i + 1]), u[i]];
            let hamiltonian =
                augmented_hamiltonian(running[i], &dynamics, &constraints, &state, &interval_pen[i]).unwrap_or(f64::NAN);
            NodeDiagnostics {
                t: t[i],
                running: running[i],
                dynamics,
                state,
                constraints,
                penalties: interval_pen[i].clone(),
                hamiltonian,
            }
        })
        .collect();

    let defect_residual = (1..n)
        .map(|k| {
            let a = (om[k] - om[k - 1] - h * u[k - 1]).abs();
            let b = (th[k] - th[k - 1] - 0.5 * h * (om[k - 1] + om[k])).abs();
            a.max(b)
        })
        .fold(0.0, f64::max);
    let hessian_min = curvature.iter().copied().fold(f64::INFINITY, f64::min);

    SegmentSolution {
        mode,
        t,
        angle: th,
        rate: om,
        control: u.clone(),
        torque,
        objective: sol.objective,
        constraint_values: sol.constraints.clone(),
        critical_violation: sol.critical_violation(p),
        less_critical_violation: sol.less_critical_violation(p),
        multipliers,
        defect_residual,
        stationarity,
        slackness: sol.slackness(p),
        hessian_min,
        convex: hessian_min > 0.0,
        continuation: sol.continuation.clone(),
        iterations: sol.outer_iterations,
        nodes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::{central_difference, AugmentedLagrangian};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn free_limits() -> JointLimits {
        JointLimits {
            angle: [f64::NEG_INFINITY, f64::INFINITY],
            velocity: f64::INFINITY,
            torque: [f64::NEG_INFINITY, f64::INFINITY],
            power: [f64::NEG_INFINITY, f64::INFINITY],
        }
    }

    fn rest_to_rest(u_max: f64) -> OcpSpec {
        OcpSpec {
            t_start: 0.0,
            t_end: 1.0,
            initial: [0.0, 0.0],
            goal: Some(GoalBox::point(1.0, 0.0)),
            weights: vec![CostWeights::new(1.0, 0.0, 0.0)],
            constraints: default_constraints(),
            limits: free_limits(),
            system_power: f64::INFINITY,
            u_max,
            nodes: 30,
            margin: 0.0,
        }
    }

    #[test]
    fn minimum_energy_rest_to_rest() {
        let spec = rest_to_rest(1e3);
        let sol = solve_segment(&spec, &Coupling::uniform(30, 1.0, 0.0), JointMode::Active).unwrap();
        assert!((sol.objective - 12.0).abs() / 12.0 < 0.01, "cost {}", sol.objective);
        let h = spec.step();
        for (t, u) in sol.t.iter().zip(&sol.control) {
            let mid = t + 0.5 * h;
            assert!((u - (6.0 - 12.0 * mid)).abs() < 0.05, "u({mid}) = {u}");
        }
        assert!(sol.slackness < 1e-6);
        assert!(sol.defect_residual < 1e-12);
        assert!(sol.convex);
        assert!(sol.stationarity < 1e-4, "stationarity {}", sol.stationarity);
    }

    /// Displacement and cost of `u = clamp(a(1 − 2t), ±u_max)` on [0, 1].
    fn saturated_profile(a: f64, u_max: f64) -> (f64, f64) {
        let n = 20000;
        let h = 1.0 / n as f64;
        let (mut th, mut om, mut cost) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let t = (k as f64 + 0.5) * h;
            let u = (a * (1.0 - 2.0 * t)).clamp(-u_max, u_max);
            th += om * h + 0.5 * u * h * h;
            om += u * h;
            cost += u * u * h;
        }
        (th, cost)
    }

    #[test]
    fn tight_bound_saturates_and_matches_switch_time_search() {
        let u_max = 4.5;
        let spec = rest_to_rest(u_max);
        let sol = solve_segment(&spec, &Coupling::uniform(30, 1.0, 0.0), JointMode::Active).unwrap();
        assert!(sol.control.iter().any(|u| (u.abs() - u_max).abs() < 1e-9));
        // grid over the instant where saturation ends
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..5000 {
            let s = 0.5 * i as f64 / 5000.0;
            let (th, cost) = saturated_profile(u_max / (1.0 - 2.0 * s), u_max);
            if (th - 1.0).abs() < best.0 {
                best = ((th - 1.0).abs(), cost);
            }
        }
        assert!((sol.objective - best.1).abs() / best.1 < 0.01, "{} vs {}", sol.objective, best.1);
        assert!(sol.stationarity < 1e-3, "stationarity {}", sol.stationarity);
    }

    fn throwing_segment() -> (OcpSpec, Coupling) {
        let mut constraints = default_constraints();
        constraints[3].class = Criticality::Critical;
        let spec = OcpSpec {
            t_start: 0.0,
            t_end: 0.5,
            initial: [0.0, 0.5],
            goal: None,
            weights: vec![CostWeights::new(1.0, 4.0, 1.0)],
            constraints,
            limits: JointLimits {
                angle: [-10.0, 10.0],
                velocity: 3.14,
                torque: [-100.0, 100.0],
                power: [-40.0, 40.0],
            },
            system_power: f64::INFINITY,
            u_max: 20.0,
            nodes: 30,
            margin: 0.0,
        };
        (spec, Coupling::uniform(30, 0.81, 0.0))
    }

    /// Backward dynamic programming over a rate lattice with constant
    /// acceleration per step.
    fn lattice_oracle(spec: &OcpSpec, inertia: f64) -> f64 {
        let steps = 250;
        let h = (spec.t_end - spec.t_start) / steps as f64;
        let dw = 1e-3;
        let vmax = spec.limits.velocity;
        let m = (vmax / dw).floor() as i64;
        let count = (2 * m + 1) as usize;
        let rate = |i: usize| (i as i64 - m) as f64 * dw;
        let reach = (spec.u_max * h / dw).floor() as i64;
        let w = spec.weights[0];
        let ok = |om: f64, u: f64| {
            let tau = inertia * u;
            tau >= spec.limits.torque[0] && tau <= spec.limits.torque[1] && (tau * om).abs() <= spec.limits.power[1]
        };
        let mut value = vec![0.0; count];
        for _ in 0..steps {
            let mut next = vec![f64::INFINITY; count];
            for i in 0..count {
                let om = rate(i);
                for d in -reach..=reach {
                    let j = i as i64 + d;
                    if j < 0 || j >= count as i64 {
                        continue;
                    }
                    let u = d as f64 * dw / h;
                    let om2 = rate(j as usize);
                    if !ok(om, u) || !ok(om2, u) {
                        continue;
                    }
                    let stage = h * ((w.k_u - w.k_a) * u * u - w.k_v * (om * om + om * om2 + om2 * om2) / 3.0);
                    let c = stage + value[j as usize];
                    if c < next[i] {
                        next[i] = c;
                    }
                }
            }
            value = next;
        }
        value[((spec.initial[1] / dw).round() as i64 + m) as usize]
    }

    #[test]
    fn active_segment_matches_lattice_oracle() {
        let (spec, coupling) = throwing_segment();
        let sol = solve_segment(&spec, &coupling, JointMode::Active).unwrap();
        let oracle = lattice_oracle(&spec, 0.81);
        assert!((sol.objective - oracle).abs() / oracle.abs() < 0.01, "{} vs {}", sol.objective, oracle);
        assert!(sol.critical_violation < 1e-8);
        assert!(!sol.convex, "k_u = k_a leaves no curvature");
    }

    #[test]
    fn unreachable_goal_is_infeasible() {
        let mut spec = rest_to_rest(1.0);
        spec.goal = Some(GoalBox::point(5.0, 0.0));
        assert!(matches!(
            solve_segment(&spec, &Coupling::uniform(30, 1.0, 0.0), JointMode::Active),
            Err(Error::Infeasible(_))
        ));
        assert!(check_reachable(&rest_to_rest(4.0)).is_ok());
        assert!(check_reachable(&rest_to_rest(3.9)).is_err());
    }

    #[test]
    fn iteration_cap_carries_best_iterate() {
        let spec = rest_to_rest(1e3);
        let opts = SolverOptions { max_outer: 1, max_inner: 3, ..Default::default() };
        match solve_segment_with(&spec, &Coupling::uniform(30, 1.0, 0.0), JointMode::Active, &opts, None) {
            Err(Error::NonConvergence { iterations, best }) => {
                assert_eq!(iterations, 1);
                assert_eq!(best.control.len(), 29);
            }
            other => panic!("expected non-convergence, got {:?}", other.map(|s| s.objective)),
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = rest_to_rest(10.0);
        spec.nodes = 2;
        assert!(spec.validate().is_err());
        let mut spec = rest_to_rest(10.0);
        spec.t_end = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = rest_to_rest(10.0);
        spec.constraints[4].gain = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn hamiltonian_examples() {
        let zero = AugmentedState {
            costate: vec![0.0, 0.0],
            multipliers: vec![0.0],
        };
        assert_eq!(augmented_hamiltonian(2.5, &[1.0, 3.0], &[0.4], &zero, &[]).unwrap(), 2.5);
        let one = AugmentedState {
            costate: vec![0.0, 0.0],
            multipliers: vec![1.5],
        };
        let two = AugmentedState {
            costate: vec![0.0, 0.0],
            multipliers: vec![3.0],
        };
        let a = augmented_hamiltonian(2.5, &[1.0, 3.0], &[0.4], &one, &[]).unwrap();
        let b = augmented_hamiltonian(2.5, &[1.0, 3.0], &[0.4], &two, &[]).unwrap();
        assert_relative_eq!(b - a, 1.5 * 0.4, epsilon = 1e-15);
        assert!(augmented_hamiltonian(0.0, &[1.0], &[], &zero, &[]).is_err());
    }

    #[test]
    fn stored_node_hamiltonian_recomputes() {
        let (spec, coupling) = throwing_segment();
        let sol = solve_segment(&spec, &coupling, JointMode::Active).unwrap();
        for node in &sol.nodes {
            let h = augmented_hamiltonian(node.running, &node.dynamics, &node.constraints, &node.state, &node.penalties).unwrap();
            assert!((h - node.hamiltonian).abs() <= 1e-12 * (1.0 + h.abs()));
        }
    }

    #[test]
    fn doubling_nodes_barely_moves_objective() {
        let (spec, coupling) = throwing_segment();
        let coarse = solve_segment(&spec, &coupling, JointMode::Active).unwrap();
        let fine_spec = OcpSpec { nodes: 60, ..spec };
        let fine = solve_segment(&fine_spec, &Coupling::uniform(60, 0.81, 0.0), JointMode::Active).unwrap();
        assert!((coarse.objective - fine.objective).abs() / fine.objective.abs() < 0.005);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]

        #[test]
        fn merit_gradient_matches_central_differences(
            u in prop::collection::vec(-20.0f64..20.0, 29),
            mu in prop::collection::vec(0.0f64..5.0, 8),
        ) {
            let (mut spec, _) = throwing_segment();
            spec.goal = Some(GoalBox { angle: [0.2, 0.6], rate: [0.0, 2.0] });
            spec.system_power = 30.0;
            let coupling = Coupling {
                inertia: (0..30).map(|k| 0.8 + 0.01 * k as f64).collect(),
                bias: (0..30).map(|k| 2.0 * (k as f64 * 0.2).sin()).collect(),
                other_power: vec![5.0; 30],
            };
            let p = SegmentNlp::new(&spec, &coupling).unwrap();
            let mut al = AugmentedLagrangian::new(p.constraint_count(), 10.0);
            for (j, m) in al.multipliers.iter_mut().enumerate() {
                *m = mu[j % mu.len()];
            }
            let mut g = vec![0.0; 29];
            al.value_and_gradient(&p, &u, &mut g);
            let fd = central_difference(|x| al.value_and_gradient(&p, x, &mut [0.0; 29]), &u, 1e-6);
            let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() / scale < 1e-4, "{a} vs {b}");
            }
        }

        #[test]
        fn residuals_are_nonnegative_and_multipliers_dual_feasible(theta in 0.2f64..1.5) {
            let mut spec = rest_to_rest(50.0);
            spec.goal = Some(GoalBox::point(theta, 0.0));
            spec.limits.velocity = 2.5;
            let sol = solve_segment(&spec, &Coupling::uniform(30, 1.0, 0.0), JointMode::Active).unwrap();
            prop_assert!(sol.multipliers.iter().all(|m| *m >= 0.0));
            prop_assert!(sol.stationarity >= 0.0 && sol.slackness >= 0.0 && sol.defect_residual >= 0.0);
            prop_assert!(sol.slackness < 1e-6);
            prop_assert!(sol.continuation.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
