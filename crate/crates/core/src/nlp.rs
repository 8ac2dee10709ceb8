//! Box-constrained nonlinear programs with inequality constraints, solved by
//! an augmented Lagrangian outer loop around a projected quasi-Newton inner
//! solver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// How a constraint is enforced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    /// Hard constraint with a Lagrange multiplier.
    Critical,
    /// Soft constraint moved into the objective as a quadratic penalty.
    LessCritical,
}

/// `min f(x)` subject to `lower ≤ x ≤ upper` and `g(x) ≤ 0`.
pub trait Problem {
    fn dim(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    /// Objective value; writes its gradient into `grad`.
    fn objective(&self, x: &[f64], grad: &mut [f64]) -> f64;
    fn constraint_count(&self) -> usize;
    fn constraints(&self, x: &[f64], g: &mut [f64]);
    /// Adds `Σ_j w_j ∇g_j(x)` to `grad`.
    fn constraint_vjp(&self, x: &[f64], w: &[f64], grad: &mut [f64]);
    fn criticality(&self, j: usize) -> Criticality;
    /// Base penalty gain of a less-critical constraint.
    fn gain(&self, _j: usize) -> f64 {
        100.0
    }
}

/// Sum of positive parts.
pub fn violation_measure(g: &[f64]) -> f64 {
    g.iter().map(|v| v.max(0.0)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Cap on augmented-Lagrangian outer iterations.
    pub max_outer: usize,
    /// Cap on projected-gradient iterations per outer iteration.
    pub max_inner: usize,
    /// Outer convergence threshold on the step between outer iterates.
    pub step_tolerance: f64,
    /// Final inner convergence threshold on the projected-gradient step,
    /// relative to `1 + ‖x‖∞`. Early outer iterations start looser.
    pub inner_tolerance: f64,
    /// Outer convergence threshold on the projected Lagrangian gradient,
    /// relative to `1 + ‖∇f‖∞`; an alternative to the step test when the
    /// minimizer is not unique.
    pub kkt_tolerance: f64,
    /// Largest admissible critical violation at convergence.
    pub feasibility_tolerance: f64,
    pub initial_rho: f64,
    pub max_rho: f64,
    /// Continuation stops once the less-critical violation drops below this.
    pub penalty_target: f64,
    /// Continuation stops once the gain scale reaches this.
    pub max_penalty_scale: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer: 200,
            max_inner: 2000,
            step_tolerance: 1e-9,
            inner_tolerance: 1e-10,
            kkt_tolerance: 1e-7,
            feasibility_tolerance: 1e-9,
            initial_rho: 10.0,
            max_rho: 1e6,
            penalty_target: 1e-6,
            max_penalty_scale: 1e4,
        }
    }
}

/// Multipliers and penalty parameters defining the merit function.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedLagrangian {
    pub multipliers: Vec<f64>,
    pub rho: f64,
    /// Common factor applied to every less-critical gain.
    pub penalty_scale: f64,
}

impl AugmentedLagrangian {
    pub fn new(constraints: usize, rho: f64) -> Self {
        Self {
            multipliers: vec![0.0; constraints],
            rho,
            penalty_scale: 1.0,
        }
    }

    /// Merit value `f + Σ_crit ψ(g; μ, ρ) + Σ_less k·max(0, g)²` and its gradient.
    pub fn value_and_gradient<P: Problem + ?Sized>(&self, problem: &P, x: &[f64], grad: &mut [f64]) -> f64 {
        let m = problem.constraint_count();
        let mut g = vec![0.0; m];
        let mut w = vec![0.0; m];
        let mut value = problem.objective(x, grad);
        problem.constraints(x, &mut g);
        for j in 0..m {
            match problem.criticality(j) {
                Criticality::Critical => {
                    let mu = self.multipliers[j];
                    let shifted = (mu + self.rho * g[j]).max(0.0);
                    value += (shifted * shifted - mu * mu) / (2.0 * self.rho);
                    w[j] = shifted;
                }
                Criticality::LessCritical => {
                    let k = problem.gain(j) * self.penalty_scale;
                    let v = g[j].max(0.0);
                    value += k * v * v;
                    w[j] = 2.0 * k * v;
                }
            }
        }
        problem.constraint_vjp(x, &w, grad);
        value
    }

    /// Gradient of `f + Σ_crit μ g + Σ_less k·max(0, g)²` at fixed multipliers.
    pub fn lagrangian_gradient<P: Problem + ?Sized>(&self, problem: &P, x: &[f64], grad: &mut [f64]) {
        let m = problem.constraint_count();
        let mut g = vec![0.0; m];
        problem.objective(x, grad);
        problem.constraints(x, &mut g);
        let w: Vec<f64> = (0..m)
            .map(|j| match problem.criticality(j) {
                Criticality::Critical => self.multipliers[j],
                Criticality::LessCritical => 2.0 * problem.gain(j) * self.penalty_scale * g[j].max(0.0),
            })
            .collect();
        problem.constraint_vjp(x, &w, grad);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    IterationCap,
    /// Penalty parameter at its cap and the critical violation no longer
    /// shrinking: the constraints are most likely inconsistent.
    Stalled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub constraints: Vec<f64>,
    pub merit: AugmentedLagrangian,
    /// Less-critical violation at the end of each continuation round.
    pub continuation: Vec<f64>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub termination: Termination,
}

impl Solution {
    pub fn critical_violation<P: Problem + ?Sized>(&self, problem: &P) -> f64 {
        split_violation(problem, &self.constraints).0
    }

    pub fn less_critical_violation<P: Problem + ?Sized>(&self, problem: &P) -> f64 {
        split_violation(problem, &self.constraints).1
    }

    /// `max_j |μ_j g_j|` over critical constraints.
    pub fn slackness<P: Problem + ?Sized>(&self, problem: &P) -> f64 {
        (0..self.constraints.len())
            .filter(|&j| problem.criticality(j) == Criticality::Critical)
            .map(|j| (self.merit.multipliers[j] * self.constraints[j]).abs())
            .fold(0.0, f64::max)
    }
}

fn split_violation<P: Problem + ?Sized>(problem: &P, g: &[f64]) -> (f64, f64) {
    let mut crit = 0.0;
    let mut less = 0.0;
    for (j, v) in g.iter().enumerate() {
        match problem.criticality(j) {
            Criticality::Critical => crit += v.max(0.0),
            Criticality::LessCritical => less += v.max(0.0),
        }
    }
    (crit, less)
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Two-metric projected quasi-Newton method. Variables held at a bound by
/// the gradient take a projected-gradient step; the others take a BFGS step
/// on their block of a dense Hessian model. Backtracks along the projection
/// arc with an Armijo test.
///
/// Returns the final iterate, its value and the iteration count.
pub fn projected_quasi_newton<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], max_iter: usize, tol: f64) -> (Vec<f64>, f64, usize)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let mut grad = vec![0.0; n];
    let mut fx = f(&x, &mut grad);
    let mut model = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut further = vec![0.0; n];
    let mut further_grad = vec![0.0; n];
    let mut d = vec![0.0; n];

    let mut iter = 0;
    while iter < max_iter {
        let residual = (0..n)
            .map(|i| ((x[i] - grad[i]).clamp(lo[i], hi[i]) - x[i]).abs())
            .fold(0.0, f64::max);
        if residual < tol {
            break;
        }
        iter += 1;
        let binding: Vec<bool> = (0..n)
            .map(|i| {
                let eps = residual.min(0.01 * (hi[i] - lo[i]));
                (x[i] <= lo[i] + eps && grad[i] > 0.0) || (x[i] >= hi[i] - eps && grad[i] < 0.0)
            })
            .collect();

        let mut accepted = false;
        let mut f_trial = fx;
        for attempt in 0..2 {
            let newton = attempt == 0;
            let free: Vec<usize> = (0..n).filter(|&i| !binding[i]).collect();
            let scale = model.diagonal().iter().copied().fold(0.0, f64::max).max(1e-12);
            for i in 0..n {
                d[i] = -grad[i] / scale;
            }
            if newton && !free.is_empty() {
                let block = DMatrix::from_fn(free.len(), free.len(), |a, b| model[(free[a], free[b])]);
                let rhs = DVector::from_iterator(free.len(), free.iter().map(|&i| -grad[i]));
                match block.cholesky() {
                    Some(c) => {
                        let step = c.solve(&rhs);
                        for (k, &i) in free.iter().enumerate() {
                            d[i] = step[k];
                        }
                    }
                    None => continue,
                }
            }
            let mut lambda = 1.0;
            for _ in 0..50 {
                for i in 0..n {
                    trial[i] = (x[i] + lambda * d[i]).clamp(lo[i], hi[i]);
                }
                let decrease: f64 = (0..n).map(|i| grad[i] * (trial[i] - x[i])).sum();
                if decrease >= 0.0 {
                    if decrease == 0.0 && trial == x {
                        break;
                    }
                    lambda *= 0.5;
                    continue;
                }
                let ft = f(&trial, &mut trial_grad);
                if ft.is_finite() && ft <= fx + 1e-4 * decrease {
                    f_trial = ft;
                    accepted = true;
                    if lambda == 1.0 {
                        // negative curvature leaves the model too cautious;
                        // keep doubling while the merit keeps falling
                        for _ in 0..40 {
                            lambda *= 2.0;
                            for i in 0..n {
                                further[i] = (x[i] + lambda * d[i]).clamp(lo[i], hi[i]);
                            }
                            if further == trial {
                                break;
                            }
                            let fe = f(&further, &mut further_grad);
                            if !(fe < f_trial) {
                                break;
                            }
                            f_trial = fe;
                            std::mem::swap(&mut trial, &mut further);
                            std::mem::swap(&mut trial_grad, &mut further_grad);
                        }
                    }
                    break;
                }
                lambda *= 0.5;
            }
            if accepted {
                break;
            }
            // the model is misleading; fall back to a scaled gradient step
            model.fill_with_identity();
            model *= scale;
        }
        if !accepted {
            break;
        }

        let s = DVector::from_iterator(n, (0..n).map(|i| trial[i] - x[i]));
        let y = DVector::from_iterator(n, (0..n).map(|i| trial_grad[i] - grad[i]));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if !scaled {
                model.fill_with_identity();
                model *= y.dot(&y) / sy;
                scaled = true;
            }
            let bs = &model * &s;
            let sbs = s.dot(&bs);
            if sbs > 0.0 {
                model += &y * y.transpose() / sy - &bs * bs.transpose() / sbs;
            }
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        fx = f_trial;
    }
    (x, fx, iter)
}

/// Outer rounds at the penalty cap without progress before giving up.
const STALL_ROUNDS: usize = 10;

/// Augmented Lagrangian solve with penalty continuation on the less-critical
/// constraints. `x0` is projected onto the box first.
pub fn solve<P: Problem + ?Sized>(problem: &P, x0: &[f64], options: &SolverOptions) -> Solution {
    let m = problem.constraint_count();
    let (lo, hi) = (problem.lower(), problem.upper());
    let mut merit = AugmentedLagrangian::new(m, options.initial_rho);
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let mut g = vec![0.0; m];
    let mut continuation = Vec::new();
    let mut inner_total = 0;
    let mut prev_violation = f64::INFINITY;
    let mut termination = Termination::IterationCap;
    let mut outer = 0;
    let mut least_violation = f64::INFINITY;
    let mut stalled = 0;

    let mut inner_tol = 1e-3f64.max(options.inner_tolerance);
    let mut grad = vec![0.0; problem.dim()];
    while outer < options.max_outer {
        outer += 1;
        let scale = 1.0 + inf_norm(&x);
        let (next, _, inner) = projected_quasi_newton(
            |z, grad| merit.value_and_gradient(problem, z, grad),
            &x,
            lo,
            hi,
            options.max_inner,
            inner_tol * scale,
        );
        inner_total += inner;
        let step = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        problem.constraints(&x, &mut g);

        let mut crit_violation = 0.0f64;
        for j in 0..m {
            if problem.criticality(j) == Criticality::Critical {
                merit.multipliers[j] = (merit.multipliers[j] + merit.rho * g[j]).max(0.0);
                crit_violation = crit_violation.max(g[j].max(0.0));
            }
        }
        if crit_violation > options.feasibility_tolerance && crit_violation > 0.25 * prev_violation {
            merit.rho = (merit.rho * 10.0).min(options.max_rho);
        }
        prev_violation = crit_violation;
        if merit.rho >= options.max_rho && crit_violation > options.feasibility_tolerance && crit_violation > 0.99 * least_violation {
            stalled += 1;
            if stalled >= STALL_ROUNDS {
                termination = Termination::Stalled;
                break;
            }
        } else {
            stalled = 0;
        }
        least_violation = least_violation.min(crit_violation);

        problem.objective(&x, &mut grad);
        let objective_scale = 1.0 + inf_norm(&grad);
        merit.lagrangian_gradient(problem, &x, &mut grad);
        let kkt = (0..x.len())
            .map(|i| ((x[i] - grad[i]).clamp(lo[i], hi[i]) - x[i]).abs())
            .fold(0.0, f64::max);

        let settled = crit_violation <= options.feasibility_tolerance
            && (step <= options.step_tolerance * (1.0 + inf_norm(&x)) || kkt <= options.kkt_tolerance * objective_scale);
        inner_tol = (inner_tol * 0.1).max(options.inner_tolerance);
        if settled {
            let less = split_violation(problem, &g).1;
            continuation.push(less);
            if less < options.penalty_target || merit.penalty_scale >= options.max_penalty_scale {
                termination = Termination::Converged;
                break;
            }
            merit.penalty_scale *= 10.0;
        }
    }

    let mut grad = vec![0.0; problem.dim()];
    let objective = problem.objective(&x, &mut grad);
    Solution {
        x,
        objective,
        constraints: g,
        merit,
        continuation,
        outer_iterations: outer,
        inner_iterations: inner_total,
        termination,
    }
}

/// Penalty contribution of one constraint: `μ g` when critical, `k·g²` on
/// the violated side when less critical.
pub fn penalty(g: f64, class: Criticality, multiplier: f64, gain: f64) -> f64 {
    match class {
        Criticality::Critical => multiplier * g,
        Criticality::LessCritical => {
            if g > 0.0 {
                gain * g * g
            } else {
                0.0
            }
        }
    }
}

/// Central-difference gradient, used by tests and by solvers that lack
/// analytic Jacobians.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}
