use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use humotion::scenarios::{rest_to_rest_toy, switch_toy};

fn humotion(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_humotion"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run humotion")
}

fn header(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().next().unwrap().split(',').map(str::to_string).collect()
}

fn time_column(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect()
}

#[test]
fn evaluate_echoes_the_delayed_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let o = humotion(&["evaluate", "--scenario", "throwing", "--matrix", "[0.1 0.3 0.9; 0 0.2 0.9]"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let report: toml::Table = fs::read_to_string(dir.path().join("report.toml")).unwrap().parse().unwrap();
    let plan = report["plan"].as_table().unwrap();
    let first: Vec<f64> = plan["first_switch"].as_array().unwrap().iter().map(|v| v.as_float().unwrap()).collect();
    assert_eq!(first, vec![0.1, 0.2]);
    let schedule = report["schedule"].as_array().unwrap();
    let shoulder = schedule[0]["intervals"].as_array().unwrap();
    assert_eq!(shoulder[1]["mode"].as_str(), Some("active"));
    assert_eq!(shoulder[1]["start"].as_float(), Some(0.1));
    assert_eq!(shoulder[1]["end"].as_float(), Some(0.3));

    let csv = dir.path().join("trajectory.csv");
    assert_eq!(header(&csv).len(), 4 * 2 + 2);
    let t = time_column(&csv);
    for sw in [0.1, 0.2, 0.3] {
        assert!(t.contains(&sw), "switch {sw} missing from the time column");
    }
    assert_eq!(*t.last().unwrap(), 0.9);
    assert!(t.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 1e-3 + 1e-12));
}

#[test]
fn non_monotone_row_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = humotion(&["evaluate", "--scenario", "throwing", "--matrix", "0.1 0.3 0.9; 0.5 0.2 0.9"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("joint 1") && err.contains("column 1"), "{err}");
}

#[test]
fn bad_inputs_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 5] = [
        &["plan", "--scenario", "juggling"],
        &["evaluate", "--scenario", "throwing"],
        &["evaluate", "--scenario", "throwing", "--matrix", "0.1 0.2"],
        &["plan", "--config", "/nonexistent/scenario.toml"],
        &["sweep"],
    ];
    for args in cases {
        let o = humotion(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = humotion(&["plan", "--scenario", "throwing", "--format", "parquet"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_plans_match_builtin_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("switch.toml");
    fs::write(&cfg, switch_toy().to_toml().unwrap()).unwrap();
    let cfg = cfg.to_str().unwrap();
    let runs = [
        (dir.path().join("a"), vec!["plan", "--config", cfg, "--seed", "4"]),
        (dir.path().join("b"), vec!["plan", "--config", cfg, "--seed", "4"]),
        (dir.path().join("c"), vec!["plan", "--scenario", "toy_switch", "--seed", "4"]),
    ];
    for (out, args) in &runs {
        let o = humotion(args, out);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trajectory.csv", "report.toml"] {
        let a = fs::read(runs[0].0.join(f)).unwrap();
        assert_eq!(a, fs::read(runs[1].0.join(f)).unwrap(), "{f}");
        assert_eq!(a, fs::read(runs[2].0.join(f)).unwrap(), "{f}");
    }
    let report: toml::Table = fs::read_to_string(runs[0].0.join("report.toml")).unwrap().parse().unwrap();
    assert_eq!(report["seed"].as_integer(), Some(4));
    assert!(report["baselines"]["oracle_ratio"].as_float().is_some());
}

#[test]
fn budget_flag_caps_the_search() {
    let dir = tempfile::tempdir().unwrap();
    let o = humotion(&["plan", "--scenario", "toy_switch", "--budget", "7"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let report: toml::Table = fs::read_to_string(dir.path().join("report.toml")).unwrap().parse().unwrap();
    assert_eq!(report["search"]["evaluations"].as_integer(), Some(7));
    assert_eq!(report["budget"].as_integer(), Some(7));
}

#[test]
fn unreachable_goal_exits_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = rest_to_rest_toy();
    // 1 rad in under a second needs more than 0.5 rad/s² of acceleration
    s.control_bound = vec![0.5];
    let cfg = dir.path().join("weak.toml");
    fs::write(&cfg, s.to_toml().unwrap()).unwrap();
    let o = humotion(&["evaluate", "--config", cfg.to_str().unwrap(), "--matrix", "eps 1"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn baseline_and_sweep_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = humotion(&["baseline", "--scenario", "toy_rest_to_rest"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["synchronous.csv", "oracle.csv"] {
        assert_eq!(header(&dir.path().join(f)).len(), 4 + 2);
    }
    let report: toml::Table = fs::read_to_string(dir.path().join("report.toml")).unwrap().parse().unwrap();
    assert!(report["oracle"]["feasible"].as_bool().unwrap());

    let o = humotion(&["sweep", "--scenario", "standing"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 10);
    assert!(o.stderr.is_empty(), "{}", String::from_utf8_lossy(&o.stderr));
}
