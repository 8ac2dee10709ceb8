//! Response-time matrices and the per-joint mode timelines they induce.
//!
//! Row `i` of the matrix lists the instants at which joint `i` toggles
//! between active and passive operation; a zero means "no change in this
//! slot". Entries equal to the horizon `t_f` mark the end of the motion and
//! do not toggle. Each toggle is surrounded by a transition window in which
//! cost weights blend between the two modes.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default width of the transition window centered on each switch (s).
pub const DEFAULT_BLEND_WIDTH: f64 = 0.05;

/// Smallest admissible time entry; the matrices' ε resolves to this or the
/// integrator step, whichever is smaller.
pub const EPSILON_TIME: f64 = 1e-3;

pub fn epsilon_for_step(dt: f64) -> f64 {
    EPSILON_TIME.min(dt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointMode {
    Active,
    Passive,
    Transition,
}

impl JointMode {
    pub fn toggled(self) -> JointMode {
        match self {
            JointMode::Active => JointMode::Passive,
            JointMode::Passive => JointMode::Active,
            JointMode::Transition => JointMode::Transition,
        }
    }

    /// One-letter label used in CSV output.
    pub fn letter(self) -> char {
        match self {
            JointMode::Active => 'A',
            JointMode::Passive => 'P',
            JointMode::Transition => 'T',
        }
    }

    /// Driven joints follow an optimized acceleration profile; passive ones
    /// follow the compliance law.
    pub fn is_driven(self) -> bool {
        !matches!(self, JointMode::Passive)
    }
}

impl fmt::Display for JointMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JointMode::Active => "active",
            JointMode::Passive => "passive",
            JointMode::Transition => "transition",
        };
        f.write_str(s)
    }
}

/// A single time entry as written in config files: a number or the
/// symbolic `"eps"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeEntry {
    Eps,
    At(f64),
}

impl TimeEntry {
    pub fn resolve(self, dt: f64) -> f64 {
        match self {
            TimeEntry::Eps => epsilon_for_step(dt),
            TimeEntry::At(v) => v,
        }
    }
}

impl Serialize for TimeEntry {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TimeEntry::Eps => s.serialize_str("eps"),
            TimeEntry::At(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for TimeEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(TimeEntry::At(v)),
            Raw::Int(v) => Ok(TimeEntry::At(v as f64)),
            Raw::Str(s) if s.eq_ignore_ascii_case("eps") || s == "ε" => Ok(TimeEntry::Eps),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad time entry {s:?}"))),
        }
    }
}

impl std::str::FromStr for TimeEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("eps") || s == "ε" {
            return Ok(TimeEntry::Eps);
        }
        s.parse::<f64>()
            .map(TimeEntry::At)
            .map_err(|_| Error::Input(format!("bad time entry {s:?}")))
    }
}

/// Parse inline matrices such as `"eps,0,1.5;0,0.2,1.2"` or
/// `"[0.1 0.3 0.9; 0 0.2 0.9]"`. Rows split on `;`, entries on commas or
/// whitespace.
pub fn parse_matrix_rows(text: &str) -> Result<Vec<Vec<TimeEntry>>> {
    let text = text.trim().trim_start_matches('[').trim_end_matches(']');
    text.split(';')
        .filter(|r| !r.trim().is_empty())
        .map(|row| {
            row.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|e| !e.is_empty())
                .map(str::parse)
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseTimeMatrix {
    pub rows: Vec<Vec<f64>>,
    pub initial_modes: Vec<JointMode>,
}

impl ResponseTimeMatrix {
    pub fn new(rows: Vec<Vec<f64>>, initial_modes: Vec<JointMode>) -> Self {
        Self { rows, initial_modes }
    }

    pub fn from_entries(rows: &[Vec<TimeEntry>], initial_modes: Vec<JointMode>, dt: f64) -> Self {
        Self {
            rows: rows
                .iter()
                .map(|r| r.iter().map(|e| e.resolve(dt)).collect())
                .collect(),
            initial_modes,
        }
    }

    pub fn joints(&self) -> usize {
        self.rows.len()
    }

    pub fn columns(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Largest entry.
    pub fn max_entry(&self) -> f64 {
        self.rows.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// Nonzero entries of `joint` strictly before `t_final`, i.e. its toggles.
    pub fn switches(&self, joint: usize, t_final: f64) -> Vec<f64> {
        self.rows[joint]
            .iter()
            .copied()
            .filter(|&v| v > 0.0 && v < t_final)
            .collect()
    }

    /// First time `joint` changes mode, or 0 if it never does.
    pub fn first_switch(&self, joint: usize, t_final: f64) -> f64 {
        self.switches(joint, t_final).first().copied().unwrap_or(0.0)
    }

    /// Shape, sign, and per-row monotonicity checks.
    pub fn check(&self) -> Result<()> {
        if self.rows.is_empty() || self.columns() == 0 {
            return Err(Error::Input("response-time matrix is empty".into()));
        }
        let cols = self.columns();
        if self.rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("response-time matrix rows differ in length".into()));
        }
        if self.initial_modes.len() != self.rows.len() {
            return Err(Error::Input(format!(
                "{} initial modes for {} joints",
                self.initial_modes.len(),
                self.rows.len()
            )));
        }
        if self.initial_modes.contains(&JointMode::Transition) {
            return Err(Error::Input("initial mode must be active or passive".into()));
        }
        for (i, row) in self.rows.iter().enumerate() {
            let mut last: Option<f64> = None;
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Input(format!("entry ({i}, {j}) is not finite")));
                }
                if v < 0.0 {
                    return Err(Error::Input(format!("entry ({i}, {j}) = {v} is negative")));
                }
                if v == 0.0 {
                    continue;
                }
                if let Some(prev) = last {
                    if v <= prev {
                        return Err(Error::Schedule {
                            joint: i,
                            column: j,
                            reason: format!("{v} does not exceed the previous entry {prev}"),
                        });
                    }
                }
                last = Some(v);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeInterval {
    pub start: f64,
    pub end: f64,
    pub mode: JointMode,
    /// For transition windows: the modes blended from and to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blend: Option<(JointMode, JointMode)>,
}

impl ModeInterval {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }

    /// Position of `t` inside the interval, 0 at the start and 1 at the end.
    pub fn fraction(&self, t: f64) -> f64 {
        ((t - self.start) / (self.end - self.start)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    /// Width of each transition window; zero disables transition intervals.
    pub blend_width: f64,
    /// Horizon override. The schedule runs to the larger of this and the
    /// largest matrix entry.
    pub horizon: Option<f64>,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            blend_width: DEFAULT_BLEND_WIDTH,
            horizon: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSchedule {
    pub joints: Vec<Vec<ModeInterval>>,
    pub t_final: f64,
    pub switches: Vec<Vec<f64>>,
}

/// Decode `matrix` into per-joint timelines with default options.
pub fn validate(matrix: &ResponseTimeMatrix) -> Result<ModeSchedule> {
    ModeSchedule::build(matrix, ScheduleOptions::default())
}

impl ModeSchedule {
    pub fn build(matrix: &ResponseTimeMatrix, options: ScheduleOptions) -> Result<Self> {
        matrix.check()?;
        if !(options.blend_width >= 0.0) {
            return Err(Error::Parameter("blend width must be non-negative".into()));
        }
        let t_final = options.horizon.unwrap_or(0.0).max(matrix.max_entry());
        if !(t_final > 0.0) {
            return Err(Error::Input("schedule horizon is zero".into()));
        }
        let half = 0.5 * options.blend_width;
        let mut joints = Vec::with_capacity(matrix.joints());
        let mut switches = Vec::with_capacity(matrix.joints());
        for (i, &initial) in matrix.initial_modes.iter().enumerate() {
            let sw = matrix.switches(i, t_final);
            joints.push(Self::timeline(&sw, initial, t_final, half));
            switches.push(sw);
        }
        Ok(Self {
            joints,
            t_final,
            switches,
        })
    }

    fn timeline(sw: &[f64], initial: JointMode, t_final: f64, half: f64) -> Vec<ModeInterval> {
        let mut out: Vec<ModeInterval> = Vec::new();
        let mut push = |start: f64, end: f64, mode: JointMode, blend| {
            if end > start {
                out.push(ModeInterval { start, end, mode, blend });
            }
        };
        let mut mode = initial;
        let mut cursor = 0.0;
        for (k, &s) in sw.iter().enumerate() {
            let prev = if k == 0 { 0.0 } else { sw[k - 1] };
            let next = sw.get(k + 1).copied().unwrap_or(t_final);
            let left = if k == 0 { half.min(s - prev) } else { half.min(0.5 * (s - prev)) };
            let right = if k + 1 == sw.len() { half.min(next - s) } else { half.min(0.5 * (next - s)) };
            // a window clipped at the midpoint starts where the previous one ended
            let a = if k > 0 && 0.5 * (s - prev) <= half { cursor } else { s - left };
            let b = s + right;
            push(cursor, a, mode, None);
            let new_mode = mode.toggled();
            if b > a {
                push(a, b, JointMode::Transition, Some((mode, new_mode)));
            }
            mode = new_mode;
            cursor = b;
        }
        push(cursor, t_final, mode, None);
        out
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn interval_at(&self, joint: usize, t: f64) -> Result<&ModeInterval> {
        if joint >= self.joints.len() {
            return Err(Error::Input(format!("no joint {joint}")));
        }
        if !(t >= 0.0 && t < self.t_final) {
            return Err(Error::Range {
                t,
                t_final: self.t_final,
            });
        }
        let ivs = &self.joints[joint];
        let idx = ivs.partition_point(|iv| iv.end <= t);
        Ok(&ivs[idx.min(ivs.len() - 1)])
    }

    /// Mode of `joint` at `t`; intervals are right-open so an instant on a
    /// boundary belongs to the later interval.
    pub fn mode_at(&self, joint: usize, t: f64) -> Result<JointMode> {
        self.interval_at(joint, t).map(|iv| iv.mode)
    }

    /// Modes of every joint, with `t ≥ t_final` mapped to the final interval.
    pub fn modes_at_clamped(&self, t: f64) -> Vec<JointMode> {
        self.joints
            .iter()
            .map(|ivs| {
                let idx = ivs.partition_point(|iv| iv.end <= t);
                ivs[idx.min(ivs.len() - 1)].mode
            })
            .collect()
    }

    /// Every interval boundary strictly inside the horizon, sorted.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self
            .joints
            .iter()
            .flatten()
            .map(|iv| iv.start)
            .chain(self.switches.iter().flatten().copied())
            .filter(|&t| t > 0.0 && t < self.t_final)
            .collect();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }

    /// Maximal runs of driven (active or transition) intervals of `joint`,
    /// alternating with passive runs, as `(start, end, driven)` triples.
    pub fn spans(&self, joint: usize) -> Vec<(f64, f64, bool)> {
        let mut out: Vec<(f64, f64, bool)> = Vec::new();
        for iv in &self.joints[joint] {
            let driven = iv.mode.is_driven();
            match out.last_mut() {
                Some(last) if last.2 == driven => last.1 = iv.end,
                _ => out.push((iv.start, iv.end, driven)),
            }
        }
        out
    }
}

/// Strictly increasing row from unconstrained parameters: running sums of
/// `exp(z)`.
pub fn parameterize(z: &[f64]) -> Vec<f64> {
    z.iter()
        .scan(0.0, |acc, v| {
            *acc += v.exp();
            Some(*acc)
        })
        .collect()
}

/// Inverse of [`parameterize`] for a strictly increasing positive row.
pub fn unparameterize(row: &[f64]) -> Result<Vec<f64>> {
    let mut prev = 0.0;
    row.iter()
        .map(|&v| {
            let gap = v - prev;
            prev = v;
            if gap > 0.0 {
                Ok(gap.ln())
            } else {
                Err(Error::Input("row must be positive and strictly increasing".into()))
            }
        })
        .collect()
}

/// Strictly increasing row inside `(0, horizon)`: running sums of `exp(z)`
/// normalized by `1 + Σ exp(z)`.
pub fn parameterize_within(z: &[f64], horizon: f64) -> Vec<f64> {
    // shift by the largest logit so large z cannot overflow
    let top = z.iter().copied().fold(0.0, f64::max);
    let weights: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let total = weights.iter().sum::<f64>() + (-top).exp();
    weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(horizon * *acc / total)
        })
        .collect()
}

pub fn unparameterize_within(row: &[f64], horizon: f64) -> Result<Vec<f64>> {
    let rest = horizon - row.last().copied().unwrap_or(0.0);
    if !(rest > 0.0) {
        return Err(Error::Input("row must end before the horizon".into()));
    }
    Ok(unparameterize(row)?.into_iter().map(|g| g - rest.ln()).collect())
}

/// Maps between a response-time matrix with a fixed zero pattern and the
/// unconstrained vector searched by the planner.
///
/// With a fixed horizon, entries equal to it stay pinned and the remaining
/// nonzero entries of each row are encoded with [`parameterize_within`];
/// otherwise every nonzero entry is free and encoded with [`parameterize`].
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixParameterization {
    template: ResponseTimeMatrix,
    horizon: Option<f64>,
    free: Vec<Vec<usize>>,
}

impl MatrixParameterization {
    pub fn new(template: &ResponseTimeMatrix, horizon: Option<f64>) -> Result<Self> {
        template.check()?;
        let free = template
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &v)| v > 0.0 && horizon.is_none_or(|h| v < h))
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        Ok(Self {
            template: template.clone(),
            horizon,
            free,
        })
    }

    pub fn dim(&self) -> usize {
        self.free.iter().map(Vec::len).sum()
    }

    pub fn encode(&self, matrix: &ResponseTimeMatrix) -> Result<Vec<f64>> {
        let mut z = Vec::with_capacity(self.dim());
        for (row, cols) in matrix.rows.iter().zip(&self.free) {
            let vals: Vec<f64> = cols.iter().map(|&j| row[j]).collect();
            z.extend(match self.horizon {
                Some(h) => unparameterize_within(&vals, h)?,
                None => unparameterize(&vals)?,
            });
        }
        Ok(z)
    }

    pub fn decode(&self, z: &[f64]) -> ResponseTimeMatrix {
        let mut out = self.template.clone();
        let mut offset = 0;
        for (row, cols) in out.rows.iter_mut().zip(&self.free) {
            let part = &z[offset..offset + cols.len()];
            offset += cols.len();
            let vals = match self.horizon {
                Some(h) => parameterize_within(part, h),
                None => parameterize(part),
            };
            for (&j, v) in cols.iter().zip(vals) {
                row[j] = v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use JointMode::*;

    fn eq2() -> ResponseTimeMatrix {
        ResponseTimeMatrix::new(vec![vec![0.1, 0.3, 0.9], vec![0.0, 0.2, 0.9]], vec![Passive, Passive])
    }

    #[test]
    fn two_joint_example_delay() {
        let s = validate(&eq2()).unwrap();
        assert_eq!(s.t_final, 0.9);
        assert_eq!(s.mode_at(0, 0.2).unwrap(), Active);
        assert_eq!(s.mode_at(0, 0.05).unwrap(), Passive);
        assert_eq!(s.mode_at(0, 0.5).unwrap(), Passive);
        assert_eq!(s.mode_at(1, 0.1).unwrap(), Passive);
        assert_eq!(s.mode_at(1, 0.5).unwrap(), Active);
        assert_relative_eq!(s.switches[1][0] - s.switches[0][0], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_row_keeps_initial_mode() {
        let m = ResponseTimeMatrix::new(vec![vec![0.0, 0.0], vec![0.4, 0.0]], vec![Active, Passive]);
        let s = validate(&m).unwrap();
        assert_eq!(s.joints[0].len(), 1);
        assert_eq!(s.joints[0][0].mode, Active);
        assert_eq!((s.joints[0][0].start, s.joints[0][0].end), (0.0, 0.4));
    }

    #[test]
    fn arm_matrix_intervals() {
        let e = EPSILON_TIME;
        let m = ResponseTimeMatrix::new(
            vec![vec![e, 0.0, 1.5, 1.6], vec![0.0, 0.2, 1.2, 1.6], vec![0.0, 0.5, 1.4, 1.6]],
            vec![Passive; 3],
        );
        let s = ModeSchedule::build(&m, ScheduleOptions { blend_width: 0.0, horizon: None }).unwrap();
        let expect = [(e, 1.5), (0.2, 1.2), (0.5, 1.4)];
        for (j, (a, b)) in expect.iter().enumerate() {
            let active: Vec<_> = s.joints[j].iter().filter(|iv| iv.mode == Active).collect();
            assert_eq!(active.len(), 1);
            assert_eq!((active[0].start, active[0].end), (*a, *b));
            assert_eq!(s.joints[j].last().unwrap().mode, Passive);
            assert_eq!(s.joints[j].last().unwrap().end, 1.6);
        }
    }

    #[test]
    fn switch_instant_belongs_to_new_mode_without_blend() {
        let s = ModeSchedule::build(&eq2(), ScheduleOptions { blend_width: 0.0, horizon: None }).unwrap();
        assert_eq!(s.mode_at(0, 0.1).unwrap(), Active);
        assert_eq!(s.mode_at(0, 0.3).unwrap(), Passive);
    }

    #[test]
    fn blend_window_is_transition() {
        let s = validate(&eq2()).unwrap();
        assert_eq!(s.mode_at(0, 0.1).unwrap(), Transition);
        assert_eq!(s.mode_at(0, 0.09).unwrap(), Transition);
        assert_eq!(s.mode_at(0, 0.074).unwrap(), Passive);
        assert_eq!(s.mode_at(0, 0.125).unwrap(), Active);
        let tr = s.interval_at(0, 0.1).unwrap();
        assert_relative_eq!(tr.end - tr.start, DEFAULT_BLEND_WIDTH, epsilon = 1e-12);
        assert_eq!(tr.blend, Some((Passive, Active)));
    }

    #[test]
    fn non_monotone_row_names_joint_and_column() {
        let m = ResponseTimeMatrix::new(vec![vec![0.1, 0.3, 0.9], vec![0.5, 0.2, 0.9]], vec![Passive; 2]);
        match validate(&m) {
            Err(Error::Schedule { joint: 1, column: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_entry_is_input_error() {
        let m = ResponseTimeMatrix::new(vec![vec![-0.1, 0.3]], vec![Passive]);
        assert!(matches!(validate(&m), Err(Error::Input(_))));
    }

    #[test]
    fn mode_at_out_of_range() {
        let s = validate(&eq2()).unwrap();
        assert!(matches!(s.mode_at(0, 0.9), Err(Error::Range { .. })));
        assert!(matches!(s.mode_at(0, -0.1), Err(Error::Range { .. })));
    }

    #[test]
    fn cumulative_exponential_row() {
        let row = parameterize(&[0.1f64.ln(), 0.2f64.ln(), 0.6f64.ln()]);
        for (a, b) in row.iter().zip([0.1, 0.3, 0.9]) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn example_matrix_round_trip() {
        let p = MatrixParameterization::new(&eq2(), None).unwrap();
        let z = p.encode(&eq2()).unwrap();
        assert_eq!(z.len(), 5);
        let back = p.decode(&z);
        for (r, s) in back.rows.iter().flatten().zip(eq2().rows.iter().flatten()) {
            assert_relative_eq!(*r, *s, epsilon = 1e-12);
        }
        let ph = MatrixParameterization::new(&eq2(), Some(0.9)).unwrap();
        assert_eq!(ph.dim(), 3);
        let back = ph.decode(&ph.encode(&eq2()).unwrap());
        for (r, s) in back.rows.iter().flatten().zip(eq2().rows.iter().flatten()) {
            assert_relative_eq!(*r, *s, epsilon = 1e-12);
        }
    }

    fn check_partition(s: &ModeSchedule) {
        for ivs in &s.joints {
            assert_eq!(ivs[0].start, 0.0);
            assert_eq!(ivs.last().unwrap().end, s.t_final);
            for w in ivs.windows(2) {
                assert_eq!(w[0].end, w[1].start);
                // abutting windows of neighbouring switches differ in direction
                assert_ne!((w[0].mode, w[0].blend), (w[1].mode, w[1].blend));
            }
            assert!(ivs.iter().all(|iv| iv.end > iv.start));
        }
    }

    proptest! {
        #[test]
        fn random_rows_round_trip(z in prop::collection::vec(-5.0f64..3.0, 1..6)) {
            let row = parameterize(&z);
            let back = unparameterize(&row).unwrap();
            for (a, b) in z.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn bounded_rows_round_trip(z in prop::collection::vec(-5.0f64..5.0, 1..5)) {
            let row = parameterize_within(&z, 1.6);
            prop_assert!(row.iter().all(|v| *v > 0.0 && *v < 1.6));
            let back = unparameterize_within(&row, 1.6).unwrap();
            for (a, b) in z.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn any_parameters_validate(z in prop::collection::vec(-8.0f64..4.0, 4), blend in 0.0f64..0.2) {
            let template = ResponseTimeMatrix::new(
                vec![vec![0.1, 0.5, 1.0], vec![0.2, 0.6, 1.0]],
                vec![Passive, Passive],
            );
            for horizon in [None, Some(1.0)] {
                let p = MatrixParameterization::new(&template, horizon).unwrap();
                let zz: Vec<f64> = z.iter().copied().take(p.dim()).chain(std::iter::repeat(0.0)).take(p.dim()).collect();
                let m = p.decode(&zz);
                let s = ModeSchedule::build(&m, ScheduleOptions { blend_width: blend, horizon }).unwrap();
                check_partition(&s);
            }
        }

        #[test]
        fn mode_changes_only_at_boundaries(t in 0.0f64..0.9) {
            let s = validate(&eq2()).unwrap();
            for j in 0..2 {
                let iv = s.interval_at(j, t).unwrap();
                prop_assert!(iv.contains(t));
                let hits = s.joints[j].iter().filter(|x| x.contains(t)).count();
                prop_assert_eq!(hits, 1);
            }
        }
    }
}
