//! Command-line front end.
//!
//! Every command reads one scenario (a built-in name or a TOML file) and
//! writes its results into the `--out` directory. Nothing written depends on
//! wall-clock time, so repeated runs with the same inputs produce identical
//! files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::cost::ThrowOutcome;
use crate::dynamics::{compliance_sweep, SweepRow, Trajectory};
use crate::error::Error;
use crate::oracle::{make_baselines, Baselines};
use crate::planner::{evaluate_motion, horizon, objective_ratio, optimize_t, Evaluation, SegmentReport};
use crate::scenarios::{builtin, Scenario};
use crate::schedule::{parse_matrix_rows, JointMode, ModeSchedule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "humotion", version, about = "Plan staged multi-joint motions from response-time matrices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Built-in scenario name.
    #[arg(long, global = true)]
    pub scenario: Option<String>,

    /// Scenario TOML file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Evaluation budget for the search, overriding the scenario's.
    #[arg(long, global = true)]
    pub budget: Option<usize>,

    /// Inline response-time matrix, e.g. "[0.1 0.3 0.9; 0 0.2 0.9]".
    /// Required by `evaluate`; used as the starting matrix by `plan`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub matrix: Option<String>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Search for the best response-time matrix.
    Plan,
    /// Score a given matrix without searching.
    Evaluate,
    /// Synchronous and whole-horizon reference plans.
    Baseline,
    /// Stiffness and damping sweeps of each joint's compliance.
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
}

/// Why a command stopped, mapped onto the process exit status.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Infeasible(String),
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Infeasible(_) => EXIT_INFEASIBLE,
            Failure::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Infeasible(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Input(_) | Error::Schedule { .. } | Error::Parameter(_) | Error::Config(_) => Failure::Config(message),
            Error::Planning(_) | Error::Infeasible(_) => Failure::Infeasible(message),
            _ => Failure::Internal(message),
        }
    }
}

/// Files a command wrote, and whether every plan among them is feasible.
#[derive(Debug)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub feasible: bool,
}

/// Runs a parsed command line and returns the process exit status.
pub fn main_with(cli: &Cli) -> i32 {
    match run(cli) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.feasible {
                EXIT_OK
            } else {
                eprintln!("error: plan violates a critical constraint");
                EXIT_INFEASIBLE
            }
        }
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            failure.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome, Failure> {
    let mut scenario = load_scenario(cli)?;
    scenario.settings.seed = cli.seed;
    if let Some(b) = cli.budget {
        scenario.settings.budget = b;
    }
    scenario.validate()?;
    fs::create_dir_all(&cli.out).map_err(|e| Failure::Internal(format!("{}: {e}", cli.out.display())))?;
    match cli.command {
        Command::Plan => plan(cli, &scenario),
        Command::Evaluate => evaluate(cli, &scenario),
        Command::Baseline => baseline(cli, &scenario),
        Command::Sweep => sweep(cli, &scenario),
    }
}

fn load_scenario(cli: &Cli) -> Result<Scenario, Failure> {
    match (&cli.scenario, &cli.config) {
        (Some(name), None) => Ok(builtin(name)?),
        (None, Some(path)) => Scenario::load(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display()))),
        _ => Err(Failure::Config("give exactly one of --scenario and --config".into())),
    }
}

fn inline_matrix(cli: &Cli, scenario: &Scenario) -> Result<Option<crate::schedule::ResponseTimeMatrix>, Failure> {
    let Some(text) = &cli.matrix else { return Ok(None) };
    let m = scenario.matrix_from(&parse_matrix_rows(text)?);
    m.check()?;
    if m.joints() != scenario.dof() {
        return Err(Failure::Config(format!("matrix has {} rows for {} joints", m.joints(), scenario.dof())));
    }
    Ok(Some(m))
}

fn plan(cli: &Cli, scenario: &Scenario) -> Result<Outcome, Failure> {
    let init = inline_matrix(cli, scenario)?.unwrap_or_else(|| scenario.template());
    init.check()?;
    let result = optimize_t(scenario, &init, scenario.settings.budget)?;
    let baselines = make_baselines(scenario)?;
    let mut report = Report::new("plan", cli, scenario, &result.plan);
    report.search = Some(SearchSection {
        evaluations: result.trace.evaluations,
        best_score: result.trace.best.clone(),
    });
    report.baselines = Some(BaselineSection::new(scenario, &result.plan, &baselines));
    let files = vec![
        write_csv(&cli.out.join("trajectory.csv"), &result.plan.trajectory)?,
        write_toml(&cli.out.join("report.toml"), &report)?,
    ];
    Ok(Outcome { files, feasible: result.plan.feasible })
}

fn evaluate(cli: &Cli, scenario: &Scenario) -> Result<Outcome, Failure> {
    let matrix = inline_matrix(cli, scenario)?.ok_or_else(|| Failure::Config("evaluate needs --matrix".into()))?;
    let ev = evaluate_motion(scenario, &matrix)?;
    let report = Report::new("evaluate", cli, scenario, &ev);
    let files = vec![
        write_csv(&cli.out.join("trajectory.csv"), &ev.trajectory)?,
        write_toml(&cli.out.join("report.toml"), &report)?,
    ];
    Ok(Outcome { files, feasible: ev.feasible })
}

#[derive(Serialize)]
struct BaselineReport {
    scenario: String,
    command: &'static str,
    synchronous: PlanSection,
    oracle: PlanSection,
    oracle_intervals: usize,
    oracle_starts: usize,
    oracle_chosen_start: usize,
    oracle_converged: bool,
    oracle_outer_iterations: usize,
    synchronous_to_oracle: f64,
}

fn baseline(cli: &Cli, scenario: &Scenario) -> Result<Outcome, Failure> {
    let b = make_baselines(scenario)?;
    let o = &b.oracle;
    let report = BaselineReport {
        scenario: scenario.name.clone(),
        command: "baseline",
        synchronous: PlanSection::new(scenario, &b.synchronous),
        oracle: PlanSection::new(scenario, &o.plan),
        oracle_intervals: o.report.intervals,
        oracle_starts: o.report.starts,
        oracle_chosen_start: o.report.chosen_start,
        oracle_converged: o.report.converged,
        oracle_outer_iterations: o.report.outer_iterations,
        synchronous_to_oracle: objective_ratio(&scenario.objective, b.synchronous.objective, o.plan.objective),
    };
    let files = vec![
        write_csv(&cli.out.join("synchronous.csv"), &b.synchronous.trajectory)?,
        write_csv(&cli.out.join("oracle.csv"), &o.plan.trajectory)?,
        write_toml(&cli.out.join("report.toml"), &report)?,
    ];
    Ok(Outcome { files, feasible: b.synchronous.feasible && o.plan.feasible })
}

/// Multipliers applied to a joint's own stiffness and damping.
pub const SWEEP_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
const PULSE_TORQUE: f64 = 1.0;
const PULSE_WIDTH: f64 = 0.2;
const SWEEP_DURATION: f64 = 10.0;

fn sweep(cli: &Cli, scenario: &Scenario) -> Result<Outcome, Failure> {
    let path = cli.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_failure)?;
    w.write_record([
        "joint",
        "parameter",
        "value",
        "peak_deviation",
        "peak_rate_deviation",
        "rms_deviation",
        "rms_rate_deviation",
    ])
    .map_err(csv_failure)?;
    let mut monotone = true;
    for (j, base) in scenario.compliance.iter().enumerate() {
        let k: Vec<f64> = SWEEP_FACTORS.iter().map(|f| f * base.stiffness).collect();
        let d: Vec<f64> = SWEEP_FACTORS.iter().map(|f| f * base.damping).collect();
        let rows = compliance_sweep(*base, &k, &d, PULSE_TORQUE, PULSE_WIDTH, SWEEP_DURATION, scenario.settings.final_dt)?;
        monotone &= sweep_is_monotone(&rows);
        for r in &rows {
            w.write_record([
                j.to_string(),
                r.parameter.to_string(),
                num(r.value),
                num(r.peak_deviation),
                num(r.peak_rate_deviation),
                num(r.rms_deviation),
                num(r.rms_rate_deviation),
            ])
            .map_err(csv_failure)?;
        }
    }
    w.flush().map_err(|e| Failure::Internal(e.to_string()))?;
    if !monotone {
        eprintln!("warning: a compliance sweep is not monotone");
    }
    Ok(Outcome { files: vec![path], feasible: true })
}

/// Peak and RMS deviation non-increasing in stiffness, peak and RMS rate
/// deviation non-increasing in damping.
pub fn sweep_is_monotone(rows: &[SweepRow]) -> bool {
    let by = |name: &str| rows.iter().filter(|r| r.parameter == name).collect::<Vec<_>>();
    let k = by("stiffness");
    let d = by("damping");
    k.windows(2)
        .all(|w| w[1].peak_deviation <= w[0].peak_deviation && w[1].rms_deviation <= w[0].rms_deviation)
        && d.windows(2)
            .all(|w| w[1].peak_rate_deviation <= w[0].peak_rate_deviation && w[1].rms_rate_deviation <= w[0].rms_rate_deviation)
}

#[derive(Serialize)]
struct Report {
    scenario: String,
    command: &'static str,
    seed: u64,
    budget: usize,
    plan: PlanSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    search: Option<SearchSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baselines: Option<BaselineSection>,
    schedule: Vec<JointSchedule>,
    diagnostics: Diagnostics,
    segments: Vec<SegmentReport>,
    power: PowerCurve,
}

impl Report {
    fn new(command: &'static str, cli: &Cli, scenario: &Scenario, ev: &Evaluation) -> Self {
        Report {
            scenario: scenario.name.clone(),
            command,
            seed: cli.seed,
            budget: scenario.settings.budget,
            plan: PlanSection::new(scenario, ev),
            search: None,
            baselines: None,
            schedule: schedule_section(&ev.schedule),
            diagnostics: Diagnostics::new(ev),
            segments: ev.segments.clone(),
            power: PowerCurve {
                t: ev.trajectory.t.clone(),
                total: ev.trajectory.power_curve(),
            },
        }
    }
}

#[derive(Serialize)]
struct PlanSection {
    horizon: f64,
    matrix: Vec<Vec<f64>>,
    initial_modes: Vec<String>,
    first_switch: Vec<f64>,
    objective: f64,
    penalty: f64,
    score: f64,
    feasible: bool,
    critical_violation: f64,
    peak_power: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    throw: Option<ThrowOutcome>,
}

impl PlanSection {
    fn new(scenario: &Scenario, ev: &Evaluation) -> Self {
        let t_final = horizon(scenario, &ev.matrix);
        PlanSection {
            horizon: t_final,
            matrix: ev.matrix.rows.clone(),
            initial_modes: ev.matrix.initial_modes.iter().map(|m| m.letter().to_string()).collect(),
            first_switch: (0..ev.matrix.joints()).map(|j| ev.matrix.first_switch(j, t_final)).collect(),
            objective: ev.objective,
            penalty: ev.penalty,
            score: ev.score,
            feasible: ev.feasible,
            critical_violation: ev.critical_violation,
            peak_power: ev.trajectory.peak_power(),
            throw: ev.throw,
        }
    }
}

#[derive(Serialize)]
struct SearchSection {
    evaluations: usize,
    /// Best score after each evaluation.
    best_score: Vec<f64>,
}

#[derive(Serialize)]
struct BaselineSection {
    synchronous_objective: f64,
    synchronous_peak_power: f64,
    synchronous_feasible: bool,
    /// Plan over synchronous; above 1 means the plan is better.
    synchronous_ratio: f64,
    peak_power_ratio: f64,
    oracle_objective: f64,
    oracle_feasible: bool,
    oracle_converged: bool,
    /// Plan over oracle; above 1 means the plan is better.
    oracle_ratio: f64,
}

impl BaselineSection {
    fn new(scenario: &Scenario, plan: &Evaluation, b: &Baselines) -> Self {
        let ratio = |reference: f64| objective_ratio(&scenario.objective, plan.objective, reference);
        let sync_peak = b.synchronous.trajectory.peak_power();
        BaselineSection {
            synchronous_objective: b.synchronous.objective,
            synchronous_peak_power: sync_peak,
            synchronous_feasible: b.synchronous.feasible,
            synchronous_ratio: ratio(b.synchronous.objective),
            peak_power_ratio: plan.trajectory.peak_power() / sync_peak,
            oracle_objective: b.oracle.plan.objective,
            oracle_feasible: b.oracle.plan.feasible,
            oracle_converged: b.oracle.report.converged,
            oracle_ratio: ratio(b.oracle.plan.objective),
        }
    }
}

#[derive(Serialize)]
struct JointSchedule {
    joint: usize,
    switches: Vec<f64>,
    intervals: Vec<IntervalRow>,
}

#[derive(Serialize)]
struct IntervalRow {
    start: f64,
    end: f64,
    mode: String,
}

fn schedule_section(schedule: &ModeSchedule) -> Vec<JointSchedule> {
    schedule
        .joints
        .iter()
        .enumerate()
        .map(|(j, intervals)| JointSchedule {
            joint: j,
            switches: schedule.switches[j].clone(),
            intervals: intervals
                .iter()
                .map(|i| IntervalRow { start: i.start, end: i.end, mode: i.mode.to_string() })
                .collect(),
        })
        .collect()
}

#[derive(Serialize)]
struct Diagnostics {
    segments: usize,
    failed_segments: usize,
    max_stationarity: f64,
    max_slackness: f64,
    max_segment_violation: f64,
}

impl Diagnostics {
    fn new(ev: &Evaluation) -> Self {
        let max = |f: fn(&SegmentReport) -> f64| ev.segments.iter().map(f).fold(0.0, f64::max);
        Diagnostics {
            segments: ev.segments.len(),
            failed_segments: ev.failures(),
            max_stationarity: max(|s| s.stationarity),
            max_slackness: max(|s| s.slackness),
            max_segment_violation: max(|s| s.critical_violation),
        }
    }
}

#[derive(Serialize)]
struct PowerCurve {
    t: Vec<f64>,
    /// Σ|τ θ̇| at each sample.
    total: Vec<f64>,
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn csv_failure(e: csv::Error) -> Failure {
    Failure::Internal(e.to_string())
}

/// Column names: `t`, then `theta_j`, `theta_dot_j`, `theta_ddot_j`, `tau_j`
/// for each joint, then `mode`.
pub fn csv_header(dof: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for j in 0..dof {
        h.extend([
            format!("theta_{j}"),
            format!("theta_dot_{j}"),
            format!("theta_ddot_{j}"),
            format!("tau_{j}"),
        ]);
    }
    h.push("mode".into());
    h
}

/// Writes one row per integrator sample. The mode column holds one letter
/// per joint.
pub fn write_csv(path: &Path, traj: &Trajectory) -> Result<PathBuf, Failure> {
    let mut w = csv::Writer::from_path(path).map_err(csv_failure)?;
    w.write_record(csv_header(traj.dof())).map_err(csv_failure)?;
    for k in 0..traj.len() {
        let mut row = vec![num(traj.t[k])];
        for j in 0..traj.dof() {
            row.extend([num(traj.q[k][j]), num(traj.qd[k][j]), num(traj.qdd[k][j]), num(traj.tau[k][j])]);
        }
        row.push(traj.modes[k].iter().map(|m: &JointMode| m.letter()).collect());
        w.write_record(&row).map_err(csv_failure)?;
    }
    w.flush().map_err(|e| Failure::Internal(e.to_string()))?;
    Ok(path.to_path_buf())
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, Failure> {
    let text = toml::to_string(value).map_err(|e| Failure::Internal(e.to_string()))?;
    fs::write(path, text).map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("humotion").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn header_has_four_columns_per_joint_plus_two() {
        for n in 1..5 {
            assert_eq!(csv_header(n).len(), 4 * n + 2);
        }
    }

    #[test]
    fn flags_parse_after_the_command() {
        let cli = parse(&["evaluate", "--scenario", "throwing", "--matrix", "[0.1 0.3 0.9; 0 0.2 0.9]", "--seed", "3"]);
        assert_eq!(cli.command, Command::Evaluate);
        assert_eq!(cli.seed, 3);
        assert_eq!(cli.scenario.as_deref(), Some("throwing"));
    }

    #[test]
    fn scenario_source_is_required_and_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        for args in [vec!["sweep", "--out", out], vec!["sweep", "--scenario", "throwing", "--config", "x.toml", "--out", out]] {
            assert_eq!(run(&parse(&args)).unwrap_err().exit_code(), EXIT_CONFIG);
        }
    }

    #[test]
    fn errors_map_to_exit_codes() {
        let schedule = Error::Schedule { joint: 1, column: 2, reason: "x".into() };
        assert_eq!(Failure::from(schedule).exit_code(), EXIT_CONFIG);
        assert_eq!(Failure::from(Error::Planning("x".into())).exit_code(), EXIT_INFEASIBLE);
        assert_eq!(Failure::from(Error::Domain("x".into())).exit_code(), EXIT_INTERNAL);
    }

    #[test]
    fn unknown_scenario_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let cli = parse(&["sweep", "--scenario", "juggling", "--out", out]);
        assert_eq!(run(&cli).unwrap_err().exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn non_monotone_row_names_joint_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let cli = parse(&["evaluate", "--scenario", "throwing", "--matrix", "0.1 0.3 0.2; 0 0.2 0.9", "--out", out]);
        let err = run(&cli).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        assert!(err.message().contains("joint 0") && err.message().contains("column 2"), "{}", err.message());
    }

    #[test]
    fn sweep_writes_monotone_table() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let outcome = run(&parse(&["sweep", "--scenario", "throwing", "--out", out])).unwrap();
        let text = fs::read_to_string(&outcome.files[0]).unwrap();
        // header plus ten rows per joint
        assert_eq!(text.lines().count(), 1 + 2 * 10);
    }
}
