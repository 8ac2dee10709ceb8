//! Rigid-body dynamics of planar serial chains.
//!
//! Joint angles are relative: link `i` points along the absolute angle
//! `q[0] + ... + q[i]`, measured counter-clockwise from the +x axis. Gravity
//! acts along −y. The equations of motion are the usual
//!
//! ```text
//! M(q) q̈ + C(q, q̇) q̇ + G(q) = τ + τ_c
//! ```
//!
//! with `C` assembled from the Christoffel symbols of `M`, so `Ṁ − 2C` is
//! skew-symmetric. Splitting the joints into an active set `a` and a passive
//! set `p` picks out the blocks `M_a`, `M_ap`, `M_pa`, `M_p`; the joint solve
//! below is the same system written without the partition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{JointMode, ModeSchedule};

/// Geometry and inertia of one link, measured from its proximal joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub length: f64,
    pub mass: f64,
    /// Distance from the proximal joint to the center of mass.
    pub com: f64,
    /// Rotational inertia about the center of mass.
    pub inertia: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    /// `[min, max]` joint angle (rad).
    pub angle: [f64; 2],
    /// Symmetric speed bound |q̇| ≤ velocity (rad/s).
    #[serde(default = "unbounded")]
    pub velocity: f64,
    /// `[min, max]` joint torque (N·m).
    pub torque: [f64; 2],
    /// `[min, max]` mechanical power τ·q̇ of this joint (W).
    pub power: [f64; 2],
}

fn unbounded() -> f64 {
    f64::INFINITY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainModel {
    pub links: Vec<Link>,
    pub limits: Vec<JointLimits>,
    /// Gravity magnitude (m/s²), acting along −y.
    pub gravity: f64,
    /// Cap on Σ|τ_i q̇_i| (W).
    pub system_power: f64,
}

impl ChainModel {
    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.links.len();
        if n == 0 {
            return Err(Error::Parameter("chain needs at least one link".into()));
        }
        if self.limits.len() != n {
            return Err(Error::Parameter(format!(
                "{} joint limit entries for {} links",
                self.limits.len(),
                n
            )));
        }
        for (i, link) in self.links.iter().enumerate() {
            let positive = [link.length, link.mass, link.inertia];
            if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Parameter(format!(
                    "link {i}: length, mass and inertia must be positive"
                )));
            }
            if !(link.com >= 0.0 && link.com <= link.length) {
                return Err(Error::Parameter(format!(
                    "link {i}: com offset {} outside [0, {}]",
                    link.com, link.length
                )));
            }
        }
        for (i, lim) in self.limits.iter().enumerate() {
            if !(lim.angle[0] < lim.angle[1]) {
                return Err(Error::Parameter(format!("joint {i}: empty angle range")));
            }
            if !(lim.torque[0] < lim.torque[1]) {
                return Err(Error::Parameter(format!("joint {i}: empty torque range")));
            }
            if !(lim.power[0] < lim.power[1]) {
                return Err(Error::Parameter(format!("joint {i}: empty power range")));
            }
            if !(lim.velocity > 0.0) {
                return Err(Error::Parameter(format!("joint {i}: velocity bound must be positive")));
            }
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return Err(Error::Parameter("gravity must be finite and non-negative".into()));
        }
        if !(self.system_power > 0.0) {
            return Err(Error::Parameter("system power cap must be positive".into()));
        }
        Ok(())
    }

    fn check_vector(&self, name: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.dof() {
            return Err(Error::Input(format!(
                "{name} has length {}, expected {}",
                v.len(),
                self.dof()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(format!("{name} contains non-finite entries")));
        }
        Ok(())
    }

    /// Joint origins and link centers of mass in the base frame.
    pub fn frames(&self, q: &[f64]) -> Frames {
        let n = self.dof();
        let mut origin = Vec::with_capacity(n + 1);
        let mut com = Vec::with_capacity(n);
        let mut p = [0.0, 0.0];
        let mut phi = 0.0;
        for (i, link) in self.links.iter().enumerate() {
            phi += q[i];
            let (s, c) = phi.sin_cos();
            origin.push(p);
            com.push([p[0] + link.com * c, p[1] + link.com * s]);
            p = [p[0] + link.length * c, p[1] + link.length * s];
        }
        origin.push(p);
        Frames { origin, com }
    }
}

/// Positions computed by [`ChainModel::frames`]. `origin` has one extra
/// entry: the distal tip of the last link.
#[derive(Clone, Debug)]
pub struct Frames {
    pub origin: Vec<[f64; 2]>,
    pub com: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
}

impl JointState {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qd: vec![0.0; n],
            qdd: vec![0.0; n],
        }
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// z × v for the planar unit normal z.
fn perp(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

/// Mass matrix by direct summation over the links distal to each joint pair:
/// `M_jk = Σ_{i ≥ max(j,k)} m_i (c_i − o_j)·(c_i − o_k) + I_i`.
pub fn mass_matrix_explicit(model: &ChainModel, q: &[f64]) -> DMatrix<f64> {
    let n = model.dof();
    let f = model.frames(q);
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in j..n {
            let mut acc = 0.0;
            for i in k..n {
                let link = &model.links[i];
                acc += link.mass * dot(sub(f.com[i], f.origin[j]), sub(f.com[i], f.origin[k]))
                    + link.inertia;
            }
            m[(j, k)] = acc;
            m[(k, j)] = acc;
        }
    }
    m
}

/// Mass matrix by composite-rigid-body accumulation from the tip inward.
pub fn mass_matrix_composite(model: &ChainModel, q: &[f64]) -> DMatrix<f64> {
    let n = model.dof();
    let f = model.frames(q);
    let mut m = DMatrix::zeros(n, n);
    let mut mass = 0.0;
    let mut moment = [0.0, 0.0];
    let mut second = 0.0;
    for k in (0..n).rev() {
        let link = &model.links[k];
        let c = f.com[k];
        mass += link.mass;
        moment = [moment[0] + link.mass * c[0], moment[1] + link.mass * c[1]];
        second += link.mass * dot(c, c) + link.inertia;
        let o = f.origin[k];
        // composite inertia about o_k and first moment about o_k
        let ic = second - 2.0 * dot(o, moment) + mass * dot(o, o);
        let h = [moment[0] - mass * o[0], moment[1] - mass * o[1]];
        m[(k, k)] = ic;
        for j in 0..k {
            let v = ic + dot(sub(o, f.origin[j]), h);
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
    }
    m
}

/// Mass matrix `M(q)`; closed-form summation for up to three joints, the
/// composite recursion beyond that.
pub fn mass_matrix(model: &ChainModel, q: &[f64]) -> Result<DMatrix<f64>> {
    model.check_vector("q", q)?;
    Ok(mass_matrix_unchecked(model, q))
}

pub(crate) fn mass_matrix_unchecked(model: &ChainModel, q: &[f64]) -> DMatrix<f64> {
    if model.dof() <= 3 {
        mass_matrix_explicit(model, q)
    } else {
        mass_matrix_composite(model, q)
    }
}

/// `∂M/∂q_l` for every joint `l`.
pub fn mass_matrix_partials(model: &ChainModel, q: &[f64]) -> Vec<DMatrix<f64>> {
    let n = model.dof();
    let f = model.frames(q);
    // derivative of (c_i − o_j) with respect to q_l, for j ≤ i
    let d = |i: usize, j: usize, l: usize| -> [f64; 2] {
        if l > i {
            [0.0, 0.0]
        } else {
            perp(sub(f.com[i], f.origin[j.max(l)]))
        }
    };
    (0..n)
        .map(|l| {
            let mut dm = DMatrix::zeros(n, n);
            for j in 0..n {
                for k in j..n {
                    let mut acc = 0.0;
                    for i in k..n {
                        let rj = sub(f.com[i], f.origin[j]);
                        let rk = sub(f.com[i], f.origin[k]);
                        acc += model.links[i].mass * (dot(d(i, j, l), rk) + dot(rj, d(i, k, l)));
                    }
                    dm[(j, k)] = acc;
                    dm[(k, j)] = acc;
                }
            }
            dm
        })
        .collect()
}

/// Coriolis/centrifugal matrix from Christoffel symbols of the first kind.
pub fn coriolis_matrix(model: &ChainModel, q: &[f64], qd: &[f64]) -> DMatrix<f64> {
    let n = model.dof();
    let dm = mass_matrix_partials(model, q);
    let mut c = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            let mut acc = 0.0;
            for l in 0..n {
                acc += 0.5 * (dm[l][(j, k)] + dm[k][(j, l)] - dm[j][(k, l)]) * qd[l];
            }
            c[(j, k)] = acc;
        }
    }
    c
}

/// `Ṁ = Σ_l ∂M/∂q_l · q̇_l`.
pub fn mass_matrix_rate(model: &ChainModel, q: &[f64], qd: &[f64]) -> DMatrix<f64> {
    let n = model.dof();
    mass_matrix_partials(model, q)
        .iter()
        .zip(qd)
        .fold(DMatrix::zeros(n, n), |acc, (dm, v)| acc + dm * *v)
}

/// Gravitational torque `G(q) = ∂V/∂q`.
pub fn gravity_vector(model: &ChainModel, q: &[f64]) -> DVector<f64> {
    let n = model.dof();
    let f = model.frames(q);
    DVector::from_fn(n, |j, _| {
        (j..n)
            .map(|i| model.links[i].mass * (f.com[i][0] - f.origin[j][0]))
            .sum::<f64>()
            * model.gravity
    })
}

/// `C(q, q̇) q̇ + G(q)`.
pub(crate) fn bias_torque(model: &ChainModel, q: &[f64], qd: &[f64]) -> DVector<f64> {
    DVector::from_vec(newton_euler(model, q, qd, None))
}

/// Planar recursive Newton–Euler: joint torques for `q̈` (zero when `None`).
/// Gravity enters as an upward acceleration of the base.
pub(crate) fn newton_euler(model: &ChainModel, q: &[f64], qd: &[f64], qdd: Option<&[f64]>) -> Vec<f64> {
    let n = model.dof();
    let cross = |a: [f64; 2], b: [f64; 2]| a[0] * b[1] - a[1] * b[0];
    // per link: unit axis, angular rate and acceleration, acceleration of the COM
    let mut axis = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut com_acc = Vec::with_capacity(n);
    let (mut phi, mut omega, mut alp) = (0.0, 0.0, 0.0);
    let mut origin_acc = [0.0, model.gravity];
    for (i, link) in model.links.iter().enumerate() {
        phi += q[i];
        omega += qd[i];
        alp += qdd.map_or(0.0, |a| a[i]);
        let (s, c) = phi.sin_cos();
        let e = [c, s];
        let at = |r: f64| {
            [
                origin_acc[0] - alp * r * e[1] - omega * omega * r * e[0],
                origin_acc[1] + alp * r * e[0] - omega * omega * r * e[1],
            ]
        };
        com_acc.push(at(link.com));
        origin_acc = at(link.length);
        axis.push(e);
        alpha.push(alp);
    }
    let mut tau = vec![0.0; n];
    let mut force = [0.0, 0.0];
    let mut moment = 0.0;
    for i in (0..n).rev() {
        let link = &model.links[i];
        let e = axis[i];
        let inertial = [link.mass * com_acc[i][0], link.mass * com_acc[i][1]];
        moment += link.inertia * alpha[i] + cross([link.com * e[0], link.com * e[1]], inertial) + cross([link.length * e[0], link.length * e[1]], force);
        force = [force[0] + inertial[0], force[1] + inertial[1]];
        tau[i] = moment;
    }
    tau
}

/// Joint accelerations `M⁻¹(τ + τ_c − C q̇ − G)`.
pub fn forward_dynamics(
    model: &ChainModel,
    state: &JointState,
    tau: &[f64],
    tau_contact: &[f64],
) -> Result<Vec<f64>> {
    model.check_vector("q", &state.q)?;
    model.check_vector("qd", &state.qd)?;
    model.check_vector("tau", tau)?;
    model.check_vector("tau_contact", tau_contact)?;
    Ok(forward_unchecked(model, &state.q, &state.qd, tau, Some(tau_contact)))
}

pub(crate) fn forward_unchecked(
    model: &ChainModel,
    q: &[f64],
    qd: &[f64],
    tau: &[f64],
    tau_contact: Option<&[f64]>,
) -> Vec<f64> {
    let m = mass_matrix_unchecked(model, q);
    let mut rhs = DVector::from_column_slice(tau) - bias_torque(model, q, qd);
    if let Some(tc) = tau_contact {
        rhs += DVector::from_column_slice(tc);
    }
    let chol = m.cholesky().expect("mass matrix is positive definite");
    chol.solve(&rhs).iter().copied().collect()
}

/// Torques `M q̈ + C q̇ + G` that realize the state's accelerations.
pub fn inverse_dynamics(model: &ChainModel, state: &JointState) -> Result<Vec<f64>> {
    model.check_vector("q", &state.q)?;
    model.check_vector("qd", &state.qd)?;
    model.check_vector("qdd", &state.qdd)?;
    Ok(inverse_unchecked(model, &state.q, &state.qd, &state.qdd))
}

pub(crate) fn inverse_unchecked(model: &ChainModel, q: &[f64], qd: &[f64], qdd: &[f64]) -> Vec<f64> {
    newton_euler(model, q, qd, Some(qdd))
}

pub fn kinetic_energy(model: &ChainModel, q: &[f64], qd: &[f64]) -> f64 {
    let v = DVector::from_column_slice(qd);
    0.5 * (v.transpose() * mass_matrix_unchecked(model, q) * &v)[(0, 0)]
}

pub fn potential_energy(model: &ChainModel, q: &[f64]) -> f64 {
    let f = model.frames(q);
    model
        .links
        .iter()
        .zip(&f.com)
        .map(|(l, c)| l.mass * model.gravity * c[1])
        .sum()
}

/// Σ_i |τ_i q̇_i|.
pub fn total_power(tau: &[f64], qd: &[f64]) -> f64 {
    tau.iter().zip(qd).map(|(t, v)| (t * v).abs()).sum()
}

/// Virtual inertia, damping and stiffness of one passive joint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplianceGains {
    pub inertia: f64,
    pub damping: f64,
    pub stiffness: f64,
}

impl ComplianceGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.inertia > 0.0 && self.inertia.is_finite()) {
            return Err(Error::Parameter(format!(
                "compliance inertia must be positive, got {}",
                self.inertia
            )));
        }
        if !(self.damping >= 0.0 && self.stiffness >= 0.0) {
            return Err(Error::Parameter("compliance damping and stiffness must be non-negative".into()));
        }
        Ok(())
    }

    fn accel(&self, dq: f64, dqd: f64, tau: f64) -> f64 {
        (tau - self.damping * dqd - self.stiffness * dq) / self.inertia
    }
}

/// Deviation acceleration of the inertia-damping-spring law
/// `B Δθ̈ + D Δθ̇ + K Δθ = τ_pr`, with `Δθ = θ_ref − θ`.
///
/// All slices run over the passive joints only.
pub fn compliant_response(
    gains: &[ComplianceGains],
    dtheta: &[f64],
    dtheta_dot: &[f64],
    tau_pr: &[f64],
) -> Result<Vec<f64>> {
    let n = gains.len();
    if dtheta.len() != n || dtheta_dot.len() != n || tau_pr.len() != n {
        return Err(Error::Input("compliance vectors must match the passive joint count".into()));
    }
    gains
        .iter()
        .enumerate()
        .map(|(i, g)| {
            g.validate()?;
            Ok(g.accel(dtheta[i], dtheta_dot[i], tau_pr[i]))
        })
        .collect()
}

/// Time-gridded joint motion with the mode label of every joint at each sample.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub qd: Vec<Vec<f64>>,
    pub qdd: Vec<Vec<f64>>,
    pub tau: Vec<Vec<f64>>,
    pub modes: Vec<Vec<JointMode>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.q.first().map_or(0, Vec::len)
    }

    pub fn joint_angle(&self, joint: usize) -> Vec<f64> {
        self.q.iter().map(|q| q[joint]).collect()
    }

    pub fn joint_rate(&self, joint: usize) -> Vec<f64> {
        self.qd.iter().map(|q| q[joint]).collect()
    }

    pub fn joint_accel(&self, joint: usize) -> Vec<f64> {
        self.qdd.iter().map(|q| q[joint]).collect()
    }

    /// Σ|τ q̇| at every sample.
    pub fn power_curve(&self) -> Vec<f64> {
        self.tau.iter().zip(&self.qd).map(|(t, v)| total_power(t, v)).collect()
    }

    pub fn peak_power(&self) -> f64 {
        self.power_curve().into_iter().fold(0.0, f64::max)
    }

    /// Index of the first sample with `t ≥ time` (clamped to the last sample).
    pub fn index_at(&self, time: f64) -> usize {
        self.t.partition_point(|&s| s < time).min(self.len().saturating_sub(1))
    }
}

/// Torque source for [`integrate`].
pub trait ControlLaw {
    /// Commanded joint torques. Called at every Runge–Kutta stage; `modes` are
    /// the joint modes of the step being taken.
    fn torque(&mut self, t: f64, q: &[f64], qd: &[f64], modes: &[JointMode]) -> Vec<f64>;

    /// Called once per grid point before the step that starts there.
    fn on_grid_point(&mut self, _t: f64, _q: &[f64], _qd: &[f64], _modes: &[JointMode]) {}
}

/// Time grid: uniform `dt` steps inside every span between consecutive
/// events, with a shortened final step so each event lands on the grid.
pub fn event_grid(t0: f64, tf: f64, dt: f64, events: &[f64]) -> Vec<f64> {
    let mut breaks: Vec<f64> = events
        .iter()
        .copied()
        .filter(|e| *e > t0 && *e < tf)
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    breaks.push(tf);
    let mut grid = vec![t0];
    let mut start = t0;
    for end in breaks {
        let steps = ((end - start) / dt - 1e-9).ceil().max(1.0) as usize;
        for k in 1..steps {
            grid.push(start + k as f64 * dt);
        }
        grid.push(end);
        start = end;
    }
    grid
}

/// Classic fourth-order Runge–Kutta on the event-aligned grid.
#[allow(clippy::too_many_arguments)]
pub fn integrate<L: ControlLaw + ?Sized>(
    model: &ChainModel,
    law: &mut L,
    q0: &[f64],
    qd0: &[f64],
    t_span: (f64, f64),
    dt: f64,
    events: &[f64],
    schedule: Option<&ModeSchedule>,
) -> Result<Trajectory> {
    model.check_vector("q0", q0)?;
    model.check_vector("qd0", qd0)?;
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!("step size must be positive, got {dt}")));
    }
    let (t0, tf) = t_span;
    if !(tf > t0) {
        return Err(Error::Input(format!("empty time span [{t0}, {tf}]")));
    }
    if events.iter().any(|e| *e < t0 || *e > tf) {
        return Err(Error::Input("switch times must lie within the time span".into()));
    }
    let n = model.dof();
    let grid = event_grid(t0, tf, dt, events);
    let modes_at = |t: f64| -> Vec<JointMode> {
        match schedule {
            Some(s) => s.modes_at_clamped(t),
            None => vec![JointMode::Active; n],
        }
    };

    let mut traj = Trajectory::default();
    let mut q = q0.to_vec();
    let mut qd = qd0.to_vec();

    let eval = |law: &mut L, t: f64, q: &[f64], qd: &[f64], modes: &[JointMode]| -> Result<(Vec<f64>, Vec<f64>)> {
        let tau = law.torque(t, q, qd, modes);
        if tau.len() != n || tau.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                t,
                reason: "control law returned a non-finite torque".into(),
            });
        }
        let qdd = forward_unchecked(model, q, qd, &tau, None);
        if qdd.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                t,
                reason: "non-finite acceleration".into(),
            });
        }
        Ok((tau, qdd))
    };

    for (k, &t) in grid.iter().enumerate() {
        let modes = modes_at(t);
        law.on_grid_point(t, &q, &qd, &modes);
        let (tau, qdd) = eval(law, t, &q, &qd, &modes)?;
        traj.t.push(t);
        traj.q.push(q.clone());
        traj.qd.push(qd.clone());
        traj.qdd.push(qdd.clone());
        traj.tau.push(tau);
        traj.modes.push(modes.clone());

        let Some(&t_next) = grid.get(k + 1) else { break };
        let h = t_next - t;
        let k1v = qdd;
        let k1x = qd.clone();
        let q2: Vec<f64> = (0..n).map(|i| q[i] + 0.5 * h * k1x[i]).collect();
        let v2: Vec<f64> = (0..n).map(|i| qd[i] + 0.5 * h * k1v[i]).collect();
        let (_, k2v) = eval(law, t + 0.5 * h, &q2, &v2, &modes)?;
        let q3: Vec<f64> = (0..n).map(|i| q[i] + 0.5 * h * v2[i]).collect();
        let v3: Vec<f64> = (0..n).map(|i| qd[i] + 0.5 * h * k2v[i]).collect();
        let (_, k3v) = eval(law, t + 0.5 * h, &q3, &v3, &modes)?;
        let q4: Vec<f64> = (0..n).map(|i| q[i] + h * v3[i]).collect();
        let v4: Vec<f64> = (0..n).map(|i| qd[i] + h * k3v[i]).collect();
        let (_, k4v) = eval(law, t_next, &q4, &v4, &modes)?;
        for i in 0..n {
            q[i] += h / 6.0 * (k1x[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i]);
            qd[i] += h / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
        }
    }
    Ok(traj)
}

/// Scalar compliant joint driven by a disturbance torque, integrated with RK4.
/// Returns `(t, Δθ, Δθ̇)` samples.
pub fn simulate_compliance<F>(gains: ComplianceGains, disturbance: F, duration: f64, dt: f64) -> Result<Vec<(f64, f64, f64)>>
where
    F: Fn(f64) -> f64,
{
    gains.validate()?;
    let steps = (duration / dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let (mut x, mut v) = (0.0, 0.0);
    let f = |t: f64, x: f64, v: f64| (v, gains.accel(x, v, disturbance(t)));
    for k in 0..=steps {
        let t = k as f64 * dt;
        out.push((t, x, v));
        let (a1, b1) = f(t, x, v);
        let (a2, b2) = f(t + 0.5 * dt, x + 0.5 * dt * a1, v + 0.5 * dt * b1);
        let (a3, b3) = f(t + 0.5 * dt, x + 0.5 * dt * a2, v + 0.5 * dt * b2);
        let (a4, b4) = f(t + dt, x + dt * a3, v + dt * b3);
        x += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        v += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
    }
    Ok(out)
}

/// One row of a stiffness or damping sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: &'static str,
    pub value: f64,
    pub peak_deviation: f64,
    pub peak_rate_deviation: f64,
    /// Root-mean-square of Δθ over the run.
    pub rms_deviation: f64,
    /// Root-mean-square of Δθ̇ over the run.
    pub rms_rate_deviation: f64,
}

/// Peak |Δθ| and |Δθ̇| of a compliant joint under a half-sine torque pulse,
/// sweeping stiffness with damping fixed and then damping with stiffness fixed.
pub fn compliance_sweep(
    base: ComplianceGains,
    stiffness: &[f64],
    damping: &[f64],
    pulse_torque: f64,
    pulse_width: f64,
    duration: f64,
    dt: f64,
) -> Result<Vec<SweepRow>> {
    let pulse = move |t: f64| {
        if t < pulse_width {
            pulse_torque * (std::f64::consts::PI * t / pulse_width).sin()
        } else {
            0.0
        }
    };
    let measure = |parameter: &'static str, value: f64, g: ComplianceGains| -> Result<SweepRow> {
        let samples = simulate_compliance(g, pulse, duration, dt)?;
        let n = samples.len() as f64;
        let mut row = SweepRow {
            parameter,
            value,
            peak_deviation: 0.0,
            peak_rate_deviation: 0.0,
            rms_deviation: 0.0,
            rms_rate_deviation: 0.0,
        };
        for &(_, x, v) in &samples {
            row.peak_deviation = row.peak_deviation.max(x.abs());
            row.peak_rate_deviation = row.peak_rate_deviation.max(v.abs());
            row.rms_deviation += x * x;
            row.rms_rate_deviation += v * v;
        }
        row.rms_deviation = (row.rms_deviation / n).sqrt();
        row.rms_rate_deviation = (row.rms_rate_deviation / n).sqrt();
        Ok(row)
    };
    let mut rows = Vec::new();
    for &k in stiffness {
        rows.push(measure("stiffness", k, ComplianceGains { stiffness: k, ..base })?);
    }
    for &d in damping {
        rows.push(measure("damping", d, ComplianceGains { damping: d, ..base })?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn unit_chain(n: usize, gravity: f64) -> ChainModel {
        ChainModel {
            links: (0..n)
                .map(|_| Link {
                    length: 1.0,
                    mass: 1.0,
                    com: 0.5,
                    inertia: 1.0 / 12.0,
                })
                .collect(),
            limits: (0..n)
                .map(|_| JointLimits {
                    angle: [-10.0, 10.0],
                    velocity: f64::INFINITY,
                    torque: [-100.0, 100.0],
                    power: [-1e3, 1e3],
                })
                .collect(),
            gravity,
            system_power: 1e3,
        }
    }

    #[test]
    fn single_link_mass_is_point_formula() {
        let m = unit_chain(1, 9.81);
        for q in [0.0, 0.7, -2.0] {
            let mm = mass_matrix(&m, &[q]).unwrap();
            assert_relative_eq!(mm[(0, 0)], 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_link_mass_even_in_elbow() {
        let m = unit_chain(2, 9.81);
        let a = mass_matrix(&m, &[0.3, 0.8]).unwrap();
        let b = mass_matrix(&m, &[0.3, -0.8]).unwrap();
        assert_relative_eq!(a, a.transpose(), epsilon = 1e-14);
        assert_relative_eq!(a, b, epsilon = 1e-14);
    }

    #[test]
    fn composite_recursion_matches_explicit_sum() {
        let m = unit_chain(3, 9.81);
        let q = [0.4, -1.1, 2.3];
        assert_relative_eq!(
            mass_matrix_explicit(&m, &q),
            mass_matrix_composite(&m, &q),
            epsilon = 1e-12
        );
    }

    #[test]
    fn pendulum_acceleration_from_horizontal() {
        // zero angle is horizontal in this convention
        let m = unit_chain(1, 9.81);
        let s = JointState::at_rest(vec![0.0]);
        let a = forward_dynamics(&m, &s, &[0.0], &[0.0]).unwrap();
        let expected = -1.0 * 9.81 * 0.5 / (1.0 / 12.0 + 0.25);
        assert_relative_eq!(a[0], expected, epsilon = 1e-12);
        // straight up is an equilibrium
        let s = JointState::at_rest(vec![std::f64::consts::FRAC_PI_2]);
        let a = forward_dynamics(&m, &s, &[0.0], &[0.0]).unwrap();
        assert!(a[0].abs() < 1e-12);
    }

    #[test]
    fn balanced_torque_gives_zero_acceleration() {
        let m = unit_chain(2, 9.81);
        let q = [0.3, 0.9];
        let qd = [1.2, -0.4];
        let tau: Vec<f64> = bias_torque(&m, &q, &qd).iter().copied().collect();
        let s = JointState {
            q: q.to_vec(),
            qd: qd.to_vec(),
            qdd: vec![0.0; 2],
        };
        let a = forward_dynamics(&m, &s, &tau, &[0.0, 0.0]).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn static_two_link_gravity_moments() {
        let m = ChainModel {
            links: vec![
                Link { length: 0.6, mass: 2.0, com: 0.3, inertia: 0.06 },
                Link { length: 0.3, mass: 1.0, com: 0.15, inertia: 0.0075 },
            ],
            ..unit_chain(2, 9.81)
        };
        let tau = inverse_dynamics(&m, &JointState::at_rest(vec![0.0, 0.0])).unwrap();
        assert_relative_eq!(tau[0], 9.81 * (2.0 * 0.3 + 1.0 * (0.6 + 0.15)), epsilon = 1e-12);
        assert_relative_eq!(tau[1], 9.81 * 1.0 * 0.15, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_finite_angles() {
        let m = unit_chain(2, 9.81);
        assert!(matches!(mass_matrix(&m, &[f64::NAN, 0.0]), Err(Error::Input(_))));
        assert!(matches!(mass_matrix(&m, &[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn compliance_equilibrium_and_bad_inertia() {
        let g = ComplianceGains { inertia: 1.0, damping: 0.5, stiffness: 4.0 };
        assert_eq!(compliant_response(&[g], &[0.0], &[0.0], &[0.0]).unwrap(), vec![0.0]);
        let bad = ComplianceGains { inertia: 0.0, ..g };
        assert!(matches!(
            compliant_response(&[bad], &[0.0], &[0.0], &[0.0]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn compliance_step_settles_at_spring_deflection() {
        let g = ComplianceGains { inertia: 1.0, damping: 3.0, stiffness: 4.0 };
        let s = simulate_compliance(g, |_| 2.0, 20.0, 1e-3).unwrap();
        assert_relative_eq!(s.last().unwrap().1, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn power_examples() {
        assert_eq!(total_power(&[0.0, 0.0], &[3.0, -1.0]), 0.0);
        assert_eq!(total_power(&[2.0, -3.0], &[1.0, 1.0]), 5.0);
    }

    #[test]
    fn event_grid_hits_every_event_once() {
        let g = event_grid(0.0, 1.0, 0.03, &[0.1, 0.35, 0.35, 0.9]);
        for e in [0.1, 0.35, 0.9, 1.0] {
            assert_eq!(g.iter().filter(|&&t| t == e).count(), 1);
        }
        assert!(g.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 0.03 + 1e-15));
    }

    struct Free;
    impl ControlLaw for Free {
        fn torque(&mut self, _: f64, q: &[f64], _: &[f64], _: &[JointMode]) -> Vec<f64> {
            vec![0.0; q.len()]
        }
    }

    #[test]
    fn free_link_without_gravity_moves_uniformly() {
        let m = unit_chain(1, 0.0);
        let tr = integrate(&m, &mut Free, &[0.2], &[1.0], (0.0, 1.5), 1e-2, &[], None).unwrap();
        for (t, q) in tr.t.iter().zip(&tr.q) {
            assert_relative_eq!(q[0], 0.2 + t, epsilon = 1e-12);
        }
    }

    struct Nan;
    impl ControlLaw for Nan {
        fn torque(&mut self, t: f64, q: &[f64], _: &[f64], _: &[JointMode]) -> Vec<f64> {
            vec![if t > 0.5 { f64::NAN } else { 0.0 }; q.len()]
        }
    }

    #[test]
    fn non_finite_torque_aborts_with_time() {
        let m = unit_chain(1, 9.81);
        let err = integrate(&m, &mut Nan, &[0.0], &[0.0], (0.0, 1.0), 0.1, &[], None).unwrap_err();
        match err {
            Error::Integration { t, .. } => assert!(t > 0.5 && t <= 0.6 + 1e-12),
            e => panic!("unexpected {e}"),
        }
    }

    /// Closed-form underdamped step: peak time π/ω_d, overshoot exp(−ζπ/√(1−ζ²)).
    #[test]
    fn underdamped_step_peak_and_overshoot() {
        let g = ComplianceGains { inertia: 1.0, damping: 0.5, stiffness: 4.0 };
        let s = simulate_compliance(g, |_| 1.0, 6.0, 1e-3).unwrap();
        let (tp, xp) = s.iter().fold((0.0, f64::MIN), |acc, x| if x.1 > acc.1 { (x.0, x.1) } else { acc });
        let wn = 2.0f64;
        let zeta = 0.5 / (2.0 * wn);
        let wd = wn * (1.0 - zeta * zeta).sqrt();
        let t_peak = std::f64::consts::PI / wd;
        let overshoot = (-zeta * std::f64::consts::PI / (1.0 - zeta * zeta).sqrt()).exp();
        assert!((tp - t_peak).abs() / t_peak < 0.01);
        assert!(((xp / 0.25 - 1.0) - overshoot).abs() / overshoot < 0.01);
    }

    #[test]
    fn sweeps_are_monotone() {
        let base = ComplianceGains { inertia: 1.0, damping: 1.0, stiffness: 4.0 };
        let rows = compliance_sweep(base, &[1.0, 2.0, 4.0, 8.0, 16.0], &[0.25, 0.5, 1.0, 2.0, 4.0], 1.0, 0.2, 10.0, 1e-3).unwrap();
        let (k, d) = rows.split_at(5);
        for w in k.windows(2) {
            assert!(w[1].peak_deviation <= w[0].peak_deviation);
            assert!(w[1].rms_deviation <= w[0].rms_deviation);
        }
        for w in d.windows(2) {
            assert!(w[1].peak_rate_deviation <= w[0].peak_rate_deviation);
            assert!(w[1].rms_rate_deviation <= w[0].rms_rate_deviation);
        }
    }

    fn arm3() -> ChainModel {
        ChainModel {
            links: vec![
                Link { length: 0.7, mass: 3.0, com: 0.3, inertia: 0.12 },
                Link { length: 0.5, mass: 2.0, com: 0.2, inertia: 0.05 },
                Link { length: 0.4, mass: 1.5, com: 0.25, inertia: 0.02 },
            ],
            ..unit_chain(3, 9.81)
        }
    }

    /// Centre-of-mass positions by direct trigonometry, independent of `frames`.
    fn com_positions(m: &ChainModel, q: &[f64]) -> Vec<[f64; 2]> {
        let (mut x, mut y, mut a) = (0.0, 0.0, 0.0);
        let mut out = Vec::new();
        for (l, qi) in m.links.iter().zip(q) {
            a += qi;
            out.push([x + l.com * a.cos(), y + l.com * a.sin()]);
            x += l.length * a.cos();
            y += l.length * a.sin();
        }
        out
    }

    /// Mass matrix as the Hessian of kinetic energy built from finite-difference
    /// Jacobians of the link centres.
    fn mass_oracle(m: &ChainModel, q: &[f64]) -> DMatrix<f64> {
        let n = q.len();
        let h = 1e-6;
        let mut jac = vec![vec![[0.0; 2]; n]; n];
        for k in 0..n {
            let (mut qp, mut qm) = (q.to_vec(), q.to_vec());
            qp[k] += h;
            qm[k] -= h;
            let (p, mm) = (com_positions(m, &qp), com_positions(m, &qm));
            for i in 0..n {
                jac[i][k] = [(p[i][0] - mm[i][0]) / (2.0 * h), (p[i][1] - mm[i][1]) / (2.0 * h)];
            }
        }
        DMatrix::from_fn(n, n, |j, k| {
            (0..n)
                .map(|i| {
                    let rot = if i >= j.max(k) { m.links[i].inertia } else { 0.0 };
                    m.links[i].mass * (jac[i][j][0] * jac[i][k][0] + jac[i][j][1] * jac[i][k][1]) + rot
                })
                .sum()
        })
    }

    fn mass_rate_oracle(m: &ChainModel, q: &[f64], qd: &[f64]) -> DMatrix<f64> {
        let h = 1e-6;
        let qp: Vec<f64> = q.iter().zip(qd).map(|(a, b)| a + h * b).collect();
        let qm: Vec<f64> = q.iter().zip(qd).map(|(a, b)| a - h * b).collect();
        (mass_matrix_explicit(m, &qp) - mass_matrix_explicit(m, &qm)) / (2.0 * h)
    }

    #[test]
    fn mass_matrix_matches_kinetic_energy_oracle() {
        let m = arm3();
        let q = [0.3, -0.8, 1.9];
        assert_relative_eq!(mass_matrix(&m, &q).unwrap(), mass_oracle(&m, &q), epsilon = 1e-7);
        let qd = [0.7, -1.3, 2.0];
        assert_relative_eq!(mass_matrix_rate(&m, &q, &qd), mass_rate_oracle(&m, &q, &qd), epsilon = 1e-6);
    }

    #[test]
    fn gravity_is_gradient_of_potential() {
        let m = arm3();
        let q = [0.4, 1.1, -0.6];
        let g = gravity_vector(&m, &q);
        for k in 0..3 {
            let (mut qp, mut qm) = (q.to_vec(), q.to_vec());
            qp[k] += 1e-6;
            qm[k] -= 1e-6;
            let d = (potential_energy(&m, &qp) - potential_energy(&m, &qm)) / 2e-6;
            assert_relative_eq!(g[k], d, epsilon = 1e-6);
        }
    }

    #[test]
    fn unforced_energy_is_conserved() {
        let m = arm3();
        let mut law = Free;
        let q0 = [0.2, 0.5, -0.3];
        let qd0 = [0.5, -0.4, 0.8];
        let tr = integrate(&m, &mut law, &q0, &qd0, (0.0, 2.0), 1e-3, &[], None).unwrap();
        let energy = |k: usize| kinetic_energy(&m, &tr.q[k], &tr.qd[k]) + potential_energy(&m, &tr.q[k]);
        let e0 = energy(0);
        let scale = e0.abs().max(kinetic_energy(&m, &q0, &qd0));
        let drift = (0..tr.len()).map(|k| (energy(k) - e0).abs()).fold(0.0, f64::max);
        assert!(drift / scale < 1e-6, "relative drift {}", drift / scale);
    }

    #[test]
    fn runge_kutta_is_fourth_order() {
        let m = unit_chain(2, 9.81);
        let run = |dt: f64| integrate(&m, &mut Free, &[0.3, 0.2], &[0.0, 0.5], (0.0, 1.0), dt, &[], None).unwrap();
        let reference = run(1e-4);
        let end = |tr: &Trajectory| tr.q.last().unwrap()[1];
        let e1 = (end(&run(0.01)) - end(&reference)).abs();
        let e2 = (end(&run(0.005)) - end(&reference)).abs();
        let order = (e1 / e2).log2();
        assert!((3.5..4.6).contains(&order), "observed order {order}");
    }

    proptest::proptest! {
        #[test]
        fn mass_matrix_positive_definite(q in proptest::collection::vec(-3.2f64..3.2, 3)) {
            let mm = mass_matrix(&arm3(), &q).unwrap();
            proptest::prop_assert!(mm.clone().cholesky().is_some());
            proptest::prop_assert!((mm.clone() - mm.transpose()).amax() < 1e-14);
        }

        #[test]
        fn inverse_then_forward_round_trips(
            q in proptest::collection::vec(-3.0f64..3.0, 3),
            qd in proptest::collection::vec(-4.0f64..4.0, 3),
            qdd in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let m = arm3();
            let s = JointState { q, qd, qdd };
            let tau = inverse_dynamics(&m, &s).unwrap();
            let back = forward_dynamics(&m, &s, &tau, &[0.0; 3]).unwrap();
            for (a, b) in back.iter().zip(&s.qdd) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn newton_euler_matches_lagrangian_form(
            q in proptest::collection::vec(-3.0f64..3.0, 3),
            qd in proptest::collection::vec(-4.0f64..4.0, 3),
            qdd in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let m = arm3();
            let lagrange = mass_matrix(&m, &q).unwrap() * DVector::from_column_slice(&qdd)
                + coriolis_matrix(&m, &q, &qd) * DVector::from_column_slice(&qd)
                + gravity_vector(&m, &q);
            let tau = newton_euler(&m, &q, &qd, Some(&qdd));
            for (a, b) in tau.iter().zip(lagrange.iter()) {
                proptest::prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn mass_rate_minus_twice_coriolis_is_skew(
            q in proptest::collection::vec(-3.0f64..3.0, 3),
            qd in proptest::collection::vec(-4.0f64..4.0, 3),
        ) {
            let m = arm3();
            let n = mass_matrix_rate(&m, &q, &qd) - 2.0 * coriolis_matrix(&m, &q, &qd);
            proptest::prop_assert!((n.clone() + n.transpose()).amax() < 1e-8);
        }
    }
}
