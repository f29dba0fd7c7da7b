use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wqms_cli::config::ScenarioConfig;
use wqms_core::fixtures::{self, Scenario};
use wqms_core::network::SpeciesInitialState;

fn wqms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wqms"))
        .args(args)
        .env_remove("WQMS_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = wqms(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Writes `name` under `root` and returns its config path.
fn fixture(root: &Path, name: &str) -> PathBuf {
    let dir = root.join(name);
    ok(&["fixture", name, dir.to_str().unwrap()]);
    dir.join("scenario.toml")
}

fn custom(root: &Path, s: &Scenario) -> PathBuf {
    custom_with(root, s, |_| {})
}

fn custom_with(root: &Path, s: &Scenario, edit: impl FnOnce(&mut ScenarioConfig)) -> PathBuf {
    let dir = root.join(&s.name);
    fixtures::write_scenario(s, &dir).unwrap();
    let mut cfg = ScenarioConfig::for_directory(s.plan.clone(), s.reactions, !s.targets.is_empty());
    edit(&mut cfg);
    let path = dir.join("scenario.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (h, rows) = table(path);
    let i = h
        .iter()
        .position(|c| c == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

fn summary_value(path: &Path, key: &str) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    let line = text
        .lines()
        .find(|l| l.starts_with(&format!("{key} =")))
        .unwrap();
    line.split('=')
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn plan_step_divides_the_hydraulic_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "bla-m");
    let out = tmp.path().join("out");
    ok(&[
        "plan",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    let report: toml::Value =
        toml::from_str(&std::fs::read_to_string(out.join("plan.toml")).unwrap()).unwrap();
    let dt = report["dt"].as_float().unwrap();
    let substeps = report["substeps"].as_integer().unwrap();
    assert!((dt * substeps as f64 - 3600.0).abs() < 1e-9);
}

#[test]
fn implicit_fixed_count_applies_to_every_pipe() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "bla-m");
    let out = tmp.path().join("out");
    ok(&[
        "plan",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--family",
        "implicit",
        "--segments",
        "10",
    ]);
    assert!(column(&out.join("plan_samples.csv"), "segments")
        .iter()
        .all(|&s| s == 10.0));
}

#[test]
fn impossible_step_exits_with_planning_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "bla-m");
    let out = wqms(&[
        "plan",
        "-c",
        cfg.to_str().unwrap(),
        "--dt-cap",
        "0.7",
        "--dt-min",
        "0.7",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("configured cap") && err.contains("requires dt"),
        "{err}"
    );
}

#[test]
fn bad_inputs_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(wqms(&["plan"]).status.code(), Some(2));
    assert_eq!(
        wqms(&["fixture", "nope", tmp.path().to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    let cfg = fixture(tmp.path(), "plug-flow");
    std::fs::remove_file(cfg.parent().unwrap().join("hydraulics.csv")).unwrap();
    let out = wqms(&["plan", "-c", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input file"));
}

#[test]
fn config_path_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "stagnant");
    let out = Command::new(env!("CARGO_BIN_EXE_wqms"))
        .args(["plan"])
        .env("WQMS_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(cfg.parent().unwrap().join("out/plan.toml").exists());
}

#[test]
fn plug_flow_outlet_decays_exponentially() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "plug-flow");
    let out = tmp.path().join("out");
    ok(&[
        "simulate",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--stride",
        "10",
    ]);
    let outlet = column(&out.join("trajectory_auto.csv"), "chlorine:J1");
    let want = (-1.0f64).exp();
    assert!((outlet.last().unwrap() - want).abs() / want < 0.01);
}

#[test]
fn stagnant_network_output_equals_input() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = fixtures::stagnant();
    s.reactions.mutual_rate = 0.0;
    let mut file = s.topology.to_file();
    for p in &mut file.pipes {
        p.bulk_rate = 0.0;
        p.wall_rate = 0.0;
    }
    for t in &mut file.tanks {
        t.bulk_rate = 0.0;
    }
    s.topology = wqms_core::network::NetworkTopology::new(file).unwrap();
    let cfg = custom(tmp.path(), &s);
    let out = tmp.path().join("out");
    ok(&[
        "simulate",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    let (_, rows) = table(&out.join("trajectory_auto.csv"));
    for r in &rows {
        assert_eq!(r[1..], rows[0][1..]);
    }
}

#[test]
fn advective_run_underestimates_the_dead_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "dead-end-2");
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    ok(&["simulate", "-c", c, "-o", o, "--transport", "ar"]);
    ok(&["simulate", "-c", c, "-o", o, "--transport", "auto"]);
    let ar = column(&out.join("trajectory_ar.csv"), "chlorine:J2");
    let dispersive = column(&out.join("trajectory_auto.csv"), "chlorine:J2");
    let (ta, td) = (
        column(&out.join("trajectory_ar.csv"), "time"),
        column(&out.join("trajectory_auto.csv"), "time"),
    );
    assert_eq!(ta, td);
    // Some moment where dispersion has delivered chlorine the advective front has not.
    assert!(ar.iter().zip(&dispersive).any(|(a, d)| d - a > 1e-3));
}

#[test]
fn single_booster_takes_all_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "single-booster");
    let out = tmp.path().join("out");
    ok(&[
        "analyze",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(column(&out.join("booster_weights.csv"), "B1")
        .iter()
        .all(|&r| r == 1.0));
}

#[test]
fn booster_line_reports_tiles() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "booster-line");
    let out = tmp.path().join("out");
    ok(&[
        "analyze",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    let (h, rows) = table(&out.join("tiles.csv"));
    assert_eq!(
        h[..6],
        ["step", "booster", "target", "rank", "size", "full_rank"]
    );
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r[5] == "0" || r[5] == "1"));
}

#[test]
fn reversed_hydraulics_move_the_controllable_window() {
    let tmp = tempfile::tempdir().unwrap();
    let flags = |name: &str| {
        let cfg = fixture(tmp.path(), name);
        let out = tmp.path().join(format!("{name}-out"));
        ok(&[
            "analyze",
            "-c",
            cfg.to_str().unwrap(),
            "-o",
            out.to_str().unwrap(),
        ]);
        column(&out.join("tiles.csv"), "full_rank")
    };
    assert_ne!(flags("fos-a"), flags("fos-b"));
}

#[test]
fn weighted_case_spreads_injection_over_both_boosters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "bla-m");
    let c = cfg.to_str().unwrap();
    let (one, two) = (tmp.path().join("case1"), tmp.path().join("case2"));
    ok(&[
        "control",
        "-c",
        c,
        "-o",
        one.to_str().unwrap(),
        "--unweighted",
        "--no-thm-cap",
    ]);
    ok(&[
        "control",
        "-c",
        c,
        "-o",
        two.to_str().unwrap(),
        "--weighted",
    ]);
    for dir in [&one, &two] {
        assert!(dir.join("control_inputs.csv").exists() && dir.join("control_states.csv").exists());
    }
    let b1: f64 = column(&two.join("control_inputs.csv"), "B1").iter().sum();
    let b2: f64 = column(&two.join("control_inputs.csv"), "B2").iter().sum();
    assert!(b1 > 0.0 && b2 > 0.0, "{b1} {b2}");
}

#[test]
fn interior_start_needs_almost_no_chlorine() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = fixtures::single_booster();
    for step in &mut s.trace.steps {
        step.velocities.iter_mut().for_each(|v| *v = 0.0);
        step.demands.iter_mut().for_each(|d| *d = 0.0);
        step.booster_flows.iter_mut().for_each(|q| *q = 0.0);
    }
    s.initial = SpeciesInitialState::uniform(1.0, 0.0, 0.0);
    // Without tracking weight the controller only pays for chlorine.
    let cfg = custom_with(tmp.path(), &s, |c| c.weights.q_scale = 0.0);
    let out = tmp.path().join("out");
    ok(&[
        "control",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--unweighted",
    ]);
    assert!(column(&out.join("control_inputs.csv"), "B1")
        .iter()
        .all(|u| u.abs() < 1e-6));
}

#[test]
fn thm_start_above_cap_reports_slack() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = fixtures::single_booster();
    s.initial = SpeciesInitialState::uniform(0.6, 0.0, 0.081);
    let cfg = custom(tmp.path(), &s);
    let out = tmp.path().join("out");
    let run = wqms(&[
        "control",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("slack"));
    assert!(summary_value(&out.join("control_summary.txt"), "slack.thms") > 0.0);
}

#[test]
fn reruns_are_byte_identical_and_golden_detects_changes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "two-booster-dead-end");
    let c = cfg.to_str().unwrap();
    let read = |f: &str| std::fs::read(cfg.parent().unwrap().join("out").join(f)).unwrap();
    ok(&["control", "-c", c, "--golden", "record"]);
    let first = read("control_states.csv");
    ok(&["control", "-c", c, "--golden", "compare"]);
    assert_eq!(first, read("control_states.csv"));

    // Perturb the recording beyond the default tolerance.
    let golden = cfg
        .parent()
        .unwrap()
        .join("golden/control/control_inputs.csv");
    let text = std::fs::read_to_string(&golden).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[1].split(',').map(String::from).collect();
    let v: f64 = cells[1].parse().unwrap();
    cells[1] = format!("{}", v + 1e-3);
    lines[1] = cells.join(",");
    std::fs::write(&golden, lines.join("\n") + "\n").unwrap();
    let out = wqms(&["control", "-c", c, "--golden", "compare"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("control_inputs.csv row 1"));
}

#[test]
fn concurrent_runs_share_an_output_directory_safely() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), "single-booster");
    let c = cfg.to_str().unwrap().to_string();
    let handles: Vec<_> = (0..3)
        .map(|_| {
            let c = c.clone();
            std::thread::spawn(move || wqms(&["simulate", "-c", &c]).status.success())
        })
        .collect();
    assert!(handles.into_iter().all(|h| h.join().unwrap()));
    let out = cfg.parent().unwrap().join("out");
    assert!(out.join(".wqms.lock").exists());
    let (_, rows) = table(&out.join("trajectory_auto.csv"));
    assert!(!rows.is_empty());
}
