use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn platoon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_platoon")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn data(name: &str) -> String {
    format!("{}/../../data/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn write(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

/// One 100 km edge with two profiles: free, or 1 extra step at entries 0..4.
fn pair_network(dir: &Path) -> String {
    write(
        dir,
        "net.json",
        &json!({
            "time_step_minutes": 5,
            "hubs": [{"id": 1, "name": "A", "population_weight": 1.0}, {"id": 2, "name": "B", "population_weight": 1.0}],
            "edges": [{"id": 1, "tail": 1, "head": 2, "length_km": 100.0, "base_travel_steps": 3, "delay_profile_ids": [0, 1]}],
            "delay_profiles": [
                {"id": 0, "entries": []},
                {"id": 1, "entries": [{"edge": 1, "t": 0, "delta": 1}, {"edge": 1, "t": 1, "delta": 1}]}
            ]
        }),
    )
}

fn config(dir: &Path, extra: Value) -> String {
    let mut c = json!({"network": data("synthetic-10.json"), "vehicle_count": 2, "samples": 1, "seed": 3});
    c.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    write(dir, "config.json", &c)
}

#[test]
fn bundled_networks_validate() {
    for name in ["sweden.json", "synthetic-10.json"] {
        let out = platoon(&["validate", &data(name)]);
        assert_eq!(code(&out), 0, "{}", text(&out));
    }
}

#[test]
fn dangling_edge_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let net = write(
        dir.path(),
        "bad.json",
        &json!({
            "time_step_minutes": 5,
            "hubs": [{"id": 1, "name": "A", "population_weight": 1.0}],
            "edges": [{"id": 7, "tail": 1, "head": 9, "length_km": 10.0, "base_travel_steps": 1}]
        }),
    );
    let out = platoon(&["validate", &net]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains('7') && text(&out).contains('9'), "{}", text(&out));
}

#[test]
fn missing_file_is_an_io_error() {
    assert_eq!(code(&platoon(&["validate", "/nonexistent/net.json"])), 2);
    let out = platoon(&["simulate", "--config", "/nonexistent/c.json", "--out", "/tmp/x"]);
    assert_eq!(code(&out), 2, "{}", text(&out));
}

#[test]
fn lone_vehicle_solves_to_zero_waits() {
    let dir = tempfile::tempdir().unwrap();
    let net = pair_network(dir.path());
    let fleet = write(dir.path(), "fleet.json", &json!([{"id": 5, "edge_sequence": [1], "start_step": 0}]));
    let scenario = write(dir.path(), "s.json", &json!({"profile_assignment": {"1": 0}}));
    let out = platoon(&["solve-static", "--network", &net, "--fleet", &fleet, "--scenario", &scenario, "--verify"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["profile"]["5"], json!([0]));
    assert_eq!(report["verified"], json!(true));
}

#[test]
fn earlier_vehicle_waits_one_step_for_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    let net = pair_network(dir.path());
    let fleet = write(
        dir.path(),
        "fleet.json",
        &json!([{"id": 1, "edge_sequence": [1], "start_step": 0}, {"id": 2, "edge_sequence": [1], "start_step": 1}]),
    );
    let scenario = write(dir.path(), "s.json", &json!({"profile_assignment": {"1": 0}}));
    let out_path = dir.path().join("solve.json");
    let out = platoon(&[
        "solve-static", "--network", &net, "--fleet", &fleet, "--scenario", &scenario, "--verify", "--out", out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report["profile"]["1"], json!([1]));
    assert_eq!(report["profile"]["2"], json!([0]));
    assert_eq!(report["verified"], json!(true));
    assert_eq!(report["expected_utility_centi"]["1"], json!("6300"));
    assert_eq!(report["expected_utility_centi"]["2"], json!("8500"));
}

#[test]
fn distribution_solves_in_expectation_and_guards_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let net = pair_network(dir.path());
    let fleet = write(
        dir.path(),
        "fleet.json",
        &json!([{"id": 1, "edge_sequence": [1], "start_step": 0}, {"id": 2, "edge_sequence": [1], "start_step": 1}]),
    );
    let dist = write(
        dir.path(),
        "d.json",
        &json!({
            "edges": [{"edge": 1, "profiles": [{"id": 0, "p_num": 1, "p_den": 2}, {"id": 1, "p_num": 1, "p_den": 2}]}],
            "starts": [{"vehicle": 2, "steps": [{"t": 1, "p_num": 1, "p_den": 2}, {"t": 2, "p_num": 1, "p_den": 2}]}]
        }),
    );
    let out = platoon(&["solve-static", "--network", &net, "--fleet", &fleet, "--distribution", &dist, "--verify"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["verified"], json!(true));
    assert_eq!(report["approximate"], json!(false));

    let out = platoon(&["solve-static", "--network", &net, "--fleet", &fleet, "--distribution", &dist, "--support-cap", "2"]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("cap of 2"), "{}", text(&out));

    let args = ["solve-static", "--network", &net, "--fleet", &fleet, "--distribution", &dist, "--support-cap", "2", "--sample", "50", "--seed", "4"];
    let a = platoon(&args);
    assert_eq!(code(&a), 0, "{}", text(&a));
    let report: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["approximate"], json!(true));
    assert_eq!(a.stdout, platoon(&args).stdout);
}

#[test]
fn minimal_simulation_writes_all_tables_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({}));
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = platoon(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--policies", "SP,IP,DRHS,SRHS,KTT", "--traces"]);
        assert_eq!(code(&out), 0, "{}", text(&out));
        out_dir
    };
    let a = run("a");
    let b = run("b");
    for name in ["metrics.json", "raw.csv", "followers.csv", "platoon_hist.csv"] {
        let x = std::fs::read(a.join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let raw = std::fs::read_to_string(a.join("raw.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + 5);
    assert_eq!(std::fs::read_dir(a.join("traces")).unwrap().count(), 5);
}

#[test]
fn overrides_apply_and_bad_values_are_domain_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({}));
    let out_dir: PathBuf = dir.path().join("o");
    let o = out_dir.to_str().unwrap();
    let out = platoon(&[
        "simulate", "--config", &cfg, "--out", o, "--vehicles", "6", "--samples", "2", "--seed", "9", "--budget", "2", "--c-b", "4.0",
        "--c-t", "10", "--horizon", "3", "--gating", "10", "--policies", "sp,drhs", "--jobs", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let raw = std::fs::read_to_string(out_dir.join("raw.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + 2 * 2);
    assert!(raw.contains(",SP,") && raw.contains(",DRHS,"));

    assert_eq!(code(&platoon(&["simulate", "--config", &cfg, "--out", o, "--policies", "XYZ"])), 1);
    assert_eq!(code(&platoon(&["simulate", "--config", &cfg, "--out", o, "--vehicles", "0"])), 1);
    let bad = write(dir.path(), "bad.json", &json!({"network": data("synthetic-10.json"), "samples": 0, "min_km": 900}));
    let out = platoon(&["simulate", "--config", &bad, "--out", o]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("samples") && text(&out).contains("min_km"), "{}", text(&out));
}

#[test]
fn budget_sweep_writes_one_table_per_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({"vehicle_count": 8, "policies": ["DRHS"]}));
    let out_dir = dir.path().join("sweep");
    let o = out_dir.to_str().unwrap();
    let out = platoon(&["sweep", "--config", &cfg, "--out", o, "--axis", "budget", "--values", "1,2,3,4", "--c-b-values", "0.5,1.7,4.0"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    for name in ["sweep_rate.csv", "sweep_wait_minutes.csv", "sweep_utility_million_sek.csv", "sweep.json"] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
    let rate = std::fs::read_to_string(out_dir.join("sweep_rate.csv")).unwrap();
    let lines: Vec<&str> = rate.lines().collect();
    assert_eq!(lines.len(), 1 + 3, "{rate}");
    assert_eq!(lines[0].split(',').count(), 2 + 4, "{rate}");

    let out = platoon(&["sweep", "--config", &cfg, "--out", o, "--axis", "vehicle_count", "--values", "50"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let rate = std::fs::read_to_string(out_dir.join("sweep_rate.csv")).unwrap();
    assert_eq!(rate.lines().count(), 2, "{rate}");

    assert_eq!(code(&platoon(&["sweep", "--config", &cfg, "--out", o, "--axis", "budget", "--values"])), 1);
    assert_eq!(code(&platoon(&["sweep", "--config", &cfg, "--out", o, "--axis", "speed", "--values", "1"])), 1);
}

#[test]
fn help_documents_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("validate", &[]),
        (
            "solve-static",
            &["--network", "--fleet", "--scenario", "--distribution", "--sample", "--support-cap", "--seed", "--c-b", "--c-t", "--verify", "--out"],
        ),
        (
            "simulate",
            &[
                "--config", "--out", "--traces", "--vehicles", "--seed", "--policies", "--budget", "--c-b", "--c-t", "--horizon", "--gating",
                "--samples", "--jobs",
            ],
        ),
        ("sweep", &["--config", "--out", "--axis", "--values", "--c-b-values", "--vehicles", "--jobs"]),
    ];
    for (cmd, flags) in expected {
        let out = platoon(&[cmd, "--help"]);
        assert_eq!(code(&out), 0);
        let help = String::from_utf8(out.stdout).unwrap();
        for line in help.lines().filter(|l| l.trim_start().starts_with('-')) {
            let described = line.trim_start().split("  ").filter(|s| !s.trim().is_empty()).count() >= 2;
            assert!(described, "{cmd}: undocumented flag line {line:?}");
        }
        for flag in *flags {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
        assert!(help.contains("--verbose"), "{cmd}");
    }
}
