//! Mode-dependent running costs and the ballistic throwing objective.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ChainModel, Trajectory};
use crate::error::{Error, Result};
use crate::schedule::{JointMode, ModeInterval, ModeSchedule};

/// Weights of `k_u ∫u² − k_v ∫θ̇² − k_a ∫θ̈²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub k_u: f64,
    pub k_v: f64,
    pub k_a: f64,
}

impl CostWeights {
    pub const fn new(k_u: f64, k_v: f64, k_a: f64) -> Self {
        Self { k_u, k_v, k_a }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_u > 0.0 && self.k_u.is_finite()) {
            return Err(Error::Parameter(format!("k_u must be positive, got {}", self.k_u)));
        }
        if !(self.k_v >= 0.0 && self.k_a >= 0.0 && self.k_v.is_finite() && self.k_a.is_finite()) {
            return Err(Error::Parameter("k_v and k_a must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn lerp(&self, other: &CostWeights, s: f64) -> CostWeights {
        CostWeights {
            k_u: (1.0 - s) * self.k_u + s * other.k_u,
            k_v: (1.0 - s) * self.k_v + s * other.k_v,
            k_a: (1.0 - s) * self.k_a + s * other.k_a,
        }
    }

    /// Integrand at one instant; `u` doubles as θ̈ for the double integrator.
    pub fn integrand(&self, rate: f64, u: f64) -> f64 {
        (self.k_u - self.k_a) * u * u - self.k_v * rate * rate
    }
}

/// Per-mode weight triples. Transition weights are blended, not stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub active: CostWeights,
    pub passive: CostWeights,
}

impl Default for WeightTable {
    fn default() -> Self {
        Self {
            active: CostWeights::new(1.0, 4.0, 1.0),
            passive: CostWeights::new(5.0, 0.1, 0.1),
        }
    }
}

impl WeightTable {
    pub fn validate(&self) -> Result<()> {
        self.active.validate()?;
        self.passive.validate()
    }
}

/// Weights for a mode; a transition on its own is the midpoint of the two.
pub fn weights_for_mode(mode: JointMode, table: &WeightTable) -> CostWeights {
    match mode {
        JointMode::Active => table.active,
        JointMode::Passive => table.passive,
        JointMode::Transition => table.passive.lerp(&table.active, 0.5),
    }
}

/// Weights at time `t` inside `interval`, blending linearly across a
/// transition window from the outgoing to the incoming mode.
pub fn weights_in_interval(interval: &ModeInterval, t: f64, table: &WeightTable) -> CostWeights {
    match (interval.mode, interval.blend) {
        (JointMode::Transition, Some((from, to))) => {
            let a = weights_for_mode(from, table);
            let b = weights_for_mode(to, table);
            a.lerp(&b, interval.fraction(t))
        }
        (mode, _) => weights_for_mode(mode, table),
    }
}

pub fn weights_at(schedule: &ModeSchedule, joint: usize, t: f64, table: &WeightTable) -> Result<CostWeights> {
    let iv = schedule.interval_at(joint, t.min(schedule.t_final * (1.0 - 1e-15)))?;
    Ok(weights_in_interval(iv, t, table))
}

/// Trapezoidal `k_u ∫u² − k_v ∫θ̇² − k_a ∫θ̈²` over sampled values.
pub fn running_cost(weights: &CostWeights, t: &[f64], rate: &[f64], u: &[f64]) -> f64 {
    let f: Vec<f64> = rate.iter().zip(u).map(|(v, a)| weights.integrand(*v, *a)).collect();
    trapezoid(t, &f)
}

/// [`running_cost`] on samples `range` of `joint` in a trajectory.
pub fn segment_cost(
    weights: &CostWeights,
    segment: &Trajectory,
    range: std::ops::Range<usize>,
    joint: usize,
) -> f64 {
    let t = &segment.t[range.clone()];
    let rate: Vec<f64> = segment.qd[range.clone()].iter().map(|q| q[joint]).collect();
    let u: Vec<f64> = segment.qdd[range].iter().map(|q| q[joint]).collect();
    running_cost(weights, t, &rate, &u)
}

pub fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2)
        .zip(f.windows(2))
        .map(|(tw, fw)| 0.5 * (tw[1] - tw[0]) * (fw[0] + fw[1]))
        .sum()
}

/// Time for a projectile released at height `h` with speed `v` at `angle`
/// to reach the landing plane.
pub fn flight_time(v: f64, angle: f64, h: f64, g: f64) -> Result<f64> {
    if !(g > 0.0) {
        return Err(Error::Domain(format!("gravity must be positive, got {g}")));
    }
    if h < 0.0 {
        return Err(Error::Domain(format!("release height {h} below the landing plane")));
    }
    let vy = v * angle.sin();
    Ok((vy + (vy * vy + 2.0 * g * h).sqrt()) / g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThrowOutcome {
    pub speed: f64,
    pub angle: f64,
    pub height: f64,
    pub flight_time: f64,
    pub range: f64,
    /// Velocity components the speed was computed from.
    pub velocity: [f64; 2],
    /// False when the release point lies below the landing plane.
    pub feasible: bool,
}

/// Release outcome of a two-link throw from joint rates at release and the
/// angle each joint swept since it first became active.
///
/// The release angle is the sum of both sweeps and is used for the height
/// of the distal term as well.
pub fn throw_outcome(model: &ChainModel, rates: [f64; 2], sweeps: [f64; 2]) -> Result<ThrowOutcome> {
    if model.dof() != 2 {
        return Err(Error::Input(format!(
            "throw objective needs a two-link chain, got {} links",
            model.dof()
        )));
    }
    let (l1, l2) = (model.links[0].length, model.links[1].length);
    let vx = l2 * rates[1] * sweeps[1].cos() + l1 * rates[0] * sweeps[0].cos();
    let vy = l2 * rates[1] * sweeps[1].sin() + l1 * rates[0] * sweeps[0].sin();
    let speed = vx.hypot(vy);
    let angle = sweeps[0] + sweeps[1];
    let height = l2 * angle.sin() + l1 * sweeps[0].sin();
    if height < 0.0 {
        return Ok(ThrowOutcome {
            speed,
            angle,
            height,
            flight_time: 0.0,
            range: 0.0,
            velocity: [vx, vy],
            feasible: false,
        });
    }
    let tf = flight_time(speed, angle, height, model.gravity)?;
    Ok(ThrowOutcome {
        speed,
        angle,
        height,
        flight_time: tf,
        range: speed * angle.cos() * tf,
        velocity: [vx, vy],
        feasible: true,
    })
}

/// [`throw_outcome`] for a trajectory released at its last sample. Sweeps
/// integrate θ̇ from each joint's first switch to the end.
pub fn throw_objective(model: &ChainModel, trajectory: &Trajectory, first_switch: [f64; 2]) -> Result<ThrowOutcome> {
    if trajectory.is_empty() {
        return Err(Error::Input("empty trajectory".into()));
    }
    let last = trajectory.len() - 1;
    let mut sweeps = [0.0; 2];
    for (j, sweep) in sweeps.iter_mut().enumerate() {
        let k = trajectory.index_at(first_switch[j]);
        let t = &trajectory.t[k..];
        let v: Vec<f64> = trajectory.qd[k..].iter().map(|q| q[j]).collect();
        *sweep = trapezoid(t, &v);
    }
    let rates = [trajectory.qd[last][0], trajectory.qd[last][1]];
    throw_outcome(model, rates, sweeps)
}
