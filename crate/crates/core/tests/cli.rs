use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bltsch::cli::{EXIT_OK, EXIT_VALIDATION};
use bltsch::feasibility::read_curve;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bltsch"));
    c.env_remove("BLTSCH_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn bltsch")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scenario(name: &str) -> String {
    repo().join("scenarios").join(name).to_string_lossy().into_owned()
}

fn alternating(routers: u32) -> String {
    let mut s = String::from("name = \"alt\"\nhorizon = 60.0\n[[nodes]]\nid = 0\nrole = \"BORDER_ROUTER\"\n");
    for r in 1..=routers {
        s += &format!("[[nodes]]\nid = {r}\nrole = \"ROUTER\"\nparent = 0\n");
    }
    s += r#"[[nodes]]
id = 30
role = "END_DEVICE"
parent = 1
strategy = { strategy = "nonsynchronized", n_channels_used = 4, router_mode = { kind = "ALTERNATING", tsch_fraction = 0.5 } }
harvester = { kind = "constant", power = 1e-4 }
capacitor = { capacitance = 100e-6, leakage_current = 0.5e-6, v_turn_on = 2.6 }
"#;
    for r in 2..=routers {
        s += &format!("[[links]]\na = 30\nb = {r}\np = 0.9\n");
    }
    s
}

#[test]
fn shipped_scenarios_validate() {
    for name in ["strategy1_solar.toml", "strategy2_vibration.toml", "strategy3_rf.toml"] {
        let o = run(&["validate", "--scenario", &scenario(name)]);
        assert_eq!(code(&o), EXIT_OK, "{name}: {}", stderr(&o));
    }
}

#[test]
fn too_few_alternating_routers_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dir.path().join("eight.toml");
    let bad = dir.path().join("four.toml");
    fs::write(&ok, alternating(8)).unwrap();
    fs::write(&bad, alternating(4)).unwrap();
    assert_eq!(code(&run(&["validate", "--scenario", ok.to_str().unwrap()])), EXIT_OK);
    let o = run(&["validate", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_VALIDATION);
    assert!(stderr(&o).contains("minimum 8 routers"), "{}", stderr(&o));
}

#[test]
fn inverted_hysteresis_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("inv.toml");
    let text = alternating(8).replace("v_turn_on = 2.6", "v_turn_on = 1.5");
    fs::write(&f, &text).unwrap();
    let line = text.lines().position(|l| l.contains("v_turn_on = 1.5")).unwrap() + 1;
    let o = run(&["validate", "--scenario", f.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_VALIDATION);
    let err = stderr(&o);
    assert!(err.contains("hysteresis"), "{err}");
    assert!(err.contains(&format!("inv.toml:{line}:")), "line {line}: {err}");
}

#[test]
fn unknown_strategy_is_a_validation_error() {
    let o = run(&["feasibility", "--strategy", "bogus", "--power", "1e-4"]);
    assert_eq!(code(&o), EXIT_VALIDATION);
}

#[test]
fn missing_scenario_fails() {
    let o = run(&["validate", "--scenario", "/nonexistent/x.toml"]);
    assert_ne!(code(&o), EXIT_OK);
}

#[test]
fn simulate_writes_per_seed_outputs_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let sc = scenario("strategy3_rf.toml");
    let o = run(&["simulate", "--scenario", &sc, "--out", out_s, "--seeds", "3"]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    for s in 1..=3 {
        for suffix in [".json", "_nodes.csv", "_frames.csv", "_routers.csv", "_log.csv", "_energy.csv", "_joins.csv"] {
            assert!(out.join(format!("seed_{s}{suffix}")).is_file(), "seed_{s}{suffix}");
        }
    }
    assert!(!out.join("seed_4.json").exists());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 3);
    assert!(out.join("timetable.csv").is_file());
    assert!(out.join("schedule.csv").is_file());

    let again = run(&["simulate", "--scenario", &sc, "--out", out_s, "--seeds", "3"]);
    assert_eq!(code(&again), EXIT_VALIDATION);
    let forced = run(&["simulate", "--scenario", &sc, "--out", out_s, "--seed-list", "7", "--force"]);
    assert_eq!(code(&forced), EXIT_OK);
    assert!(out.join("seed_7.json").is_file());
    assert!(!out.join("seed_1.json").exists());
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env_run");
    let o = bin()
        .args(["simulate", "--scenario", &scenario("strategy3_rf.toml"), "--seed-list", "1", "--format", "json"])
        .env("BLTSCH_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("seed_1.json")).unwrap()).unwrap();
    assert_eq!(m["digest"].as_str().unwrap().len(), 64);
    assert!(m["frames"].as_array().is_some());
}

#[test]
fn same_seed_gives_same_digest_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let digest = |name: &str| {
        let out = dir.path().join(name);
        let o = run(&["simulate", "--scenario", &scenario("strategy2_vibration.toml"), "--out", out.to_str().unwrap(), "--seed-list", "5"]);
        assert_eq!(code(&o), EXIT_OK);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        v["digests"][0].as_str().unwrap().to_string()
    };
    assert_eq!(digest("a"), digest("b"));
}

#[test]
fn join_sequence_log_is_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seq");
    let o = run(&["simulate", "--scenario", &scenario("strategy2_vibration.toml"), "--out", out.to_str().unwrap(), "--seed-list", "1"]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("seed_1_log.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["time", "asn", "node", "event", "radio", "detail"]);
    let rows: Vec<(f64, u32, String)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[2].parse().unwrap(), r[3].to_string())
        })
        .collect();
    assert!(rows.windows(2).all(|w| w[0].0 <= w[1].0));
    let node: Vec<&str> = rows.iter().filter(|r| r.1 == 20).map(|r| r.2.as_str()).collect();
    let pos = |ev: &[&str]| node.iter().position(|e| ev.contains(e)).unwrap_or_else(|| panic!("no {ev:?} in {node:?}"));
    let order = [
        pos(&["SCAN", "SOLICIT"]),
        pos(&["BEACON"]),
        pos(&["CONTROL"]),
        pos(&["JRQ"]),
        pos(&["JRS"]),
        pos(&["JOINED"]),
        pos(&["DATA_TX"]),
    ];
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{order:?}");
}

#[test]
fn sweep_all_gives_six_curves_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("curves.csv");
    let o = run(&["sweep", "--points", "25", "--out", f.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let rows = read_curve(fs::File::open(&f).unwrap()).unwrap();
    let curves: BTreeSet<(String, String)> = rows.iter().map(|r| (r.strategy.clone(), r.variant.clone())).collect();
    assert_eq!(curves.len(), 6);
    assert_eq!(rows.len(), 150);
    for c in &curves {
        let mut xs: Vec<_> = rows.iter().filter(|r| (&r.strategy, &r.variant) == (&c.0, &c.1)).collect();
        xs.sort_by(|a, b| a.power_w.total_cmp(&b.power_w));
        assert!(xs.windows(2).all(|w| w[1].min_interval_s <= w[0].min_interval_s), "{c:?}");
    }

    let v = run(&["validate-curve", f.to_str().unwrap()]);
    assert_eq!(code(&v), EXIT_OK, "{}", stderr(&v));
    assert!(String::from_utf8_lossy(&v.stdout).contains("lossless"));

    assert_eq!(code(&run(&["sweep", "--points", "5", "--out", f.to_str().unwrap()])), EXIT_VALIDATION);
    assert_eq!(code(&run(&["sweep", "--points", "5", "--out", f.to_str().unwrap(), "--force"])), EXIT_OK);

    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "strategy,variant,power_w,min_interval_s,feasible\nadhoc,base,1e-4,inf,true\n").unwrap();
    assert_eq!(code(&run(&["validate-curve", broken.to_str().unwrap()])), EXIT_VALIDATION);
}

#[test]
fn single_point_sweep_gives_one_row() {
    let o = run(&["sweep", "--strategy", "adhoc", "--base-only", "--lo", "2e-4", "--hi", "2e-4", "--points", "1"]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let rows = read_curve(o.stdout.as_slice()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].feasible);
}

#[test]
fn feasibility_json_output() {
    let o = run(&["feasibility", "--strategy", "synchronized", "--power", "3e-4", "--format", "json"]);
    assert_eq!(code(&o), EXIT_OK);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["strategy"], "synchronized");
    assert_eq!(v[0]["feasible"], true);
}

#[test]
fn calibrate_writes_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("cal.toml");
    let o = run(&["calibrate", "--out", f.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((report["achieved"]["join_energy"].as_f64().unwrap() - 0.325).abs() < 0.01);
    let cal = bltsch::calibration::Calibration::load(&f).unwrap();
    assert_eq!(cal, bltsch::calibration::Calibration::builtin());
    assert_eq!(code(&run(&["calibrate", "--out", f.to_str().unwrap()])), EXIT_VALIDATION);
}
