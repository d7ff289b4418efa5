use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nsattn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsattn"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 3] = ["--deterministic", "--set", "workload.flows=120"];

#[test]
fn resources_flags_the_large_operating_point() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["--deterministic", "resources", "--m", "256", "--d-v", "64", "--b", "16"];
    let o = nsattn(tmp.path(), &args);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("262,144 bits (32 KB)"), "{text}");
    assert!(text.contains("overall: INFEASIBLE"));
    assert_eq!(fs::read_to_string(tmp.path().join("budget.txt")).unwrap(), text);

    let budget = json(&tmp.path().join("budget.json"));
    let manifest = json(&tmp.path().join("manifest.json"));
    assert_eq!(budget["command"], "resources");
    assert_eq!(budget["config_hash"], manifest["config_hash"]);
    assert_eq!(budget["result"]["agg_bits"], 262_144);
    assert!(manifest.get("generated_at_unix_s").is_none());

    let strict = nsattn(tmp.path(), &[&["--strict"], &args[..]].concat());
    assert_eq!(strict.status.code(), Some(2));
}

#[test]
fn default_point_is_feasible_and_timestamped_without_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nsattn(tmp.path(), &["--strict", "resources"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("overall: FEASIBLE"));
    let manifest = json(&tmp.path().join("manifest.json"));
    assert!(manifest["generated_at_unix_s"].is_u64());
    assert!(manifest["files"].as_array().unwrap().iter().any(|f| f == "budget.json"));
}

#[test]
fn shipped_config_hashes_like_the_defaults() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    nsattn(a.path(), &["--deterministic", "resources"]);
    nsattn(b.path(), &["--deterministic", "--config", cfg, "resources"]);
    assert_eq!(
        json(&a.path().join("manifest.json"))["config_hash"],
        json(&b.path().join("manifest.json"))["config_hash"]
    );
    let c = tempfile::tempdir().unwrap();
    nsattn(c.path(), &["--deterministic", "--seed", "8", "resources"]);
    let other = json(&c.path().join("manifest.json"));
    assert_ne!(
        other["config_hash"],
        json(&a.path().join("manifest.json"))["config_hash"]
    );
    assert_eq!(other["seed"], 8);
}

#[test]
fn bad_configuration_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[features]\nbogus = 3\n").unwrap();
    let o = nsattn(tmp.path(), &["--config", cfg.to_str().unwrap(), "resources"]);
    assert_eq!(o.status.code(), Some(1));
    let o = nsattn(tmp.path(), &["--set", "features.m=-4", "resources"]);
    assert_eq!(o.status.code(), Some(1));
    let o = nsattn(tmp.path(), &["--set", "nosuchkey", "resources"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn theory_check_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nsattn(tmp.path(), &["--deterministic", "theory-check", "ema"]);
    assert_eq!(o.status.code(), Some(0));
    let report = json(&tmp.path().join("theory.json"));
    assert_eq!(report["pass"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 1);

    let o = nsattn(
        tmp.path(),
        &[
            "--deterministic",
            "--set",
            "theory.kernel_eps=0.02",
            "theory-check",
            "kernel",
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
}

#[test]
fn strict_simulation_refuses_an_oversized_state() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nsattn(
        tmp.path(),
        &[&SMALL[..], &["--strict", "--set", "features.m=1024", "simulate"]].concat(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_simulate_score_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("t.csv");
    let o = nsattn(
        tmp.path(),
        &[&SMALL[..], &["generate", "--output", trace.to_str().unwrap()]].concat(),
    );
    assert!(o.status.success());
    let header = fs::read_to_string(&trace).unwrap();
    assert!(header.lines().next().unwrap().contains("label"));

    let sim = tmp.path().join("sim");
    let o = nsattn(
        &sim,
        &[
            &SMALL[..],
            &["simulate", "--trace", trace.to_str().unwrap(), "--window-sweep", "2,8"],
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = fs::read_to_string(sim.join("window_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "window,bits_per_flow,macro_f1");
    assert_eq!(sweep.lines().count(), 3);

    let scored = tmp.path().join("score");
    let packets = sim.join("packets.jsonl");
    let o = nsattn(
        &scored,
        &["--deterministic", "score", "--packets", packets.to_str().unwrap()],
    );
    assert!(o.status.success());
    let metrics = json(&scored.join("metrics.json"));
    let f1 = metrics["result"]["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

#[test]
fn compiled_global_index_feeds_back_into_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let tables = tmp.path().join("tables");
    let o = nsattn(&tables, &[&SMALL[..], &["compile-tables"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(tables.join("rules.tbl")).unwrap().lines().count() > 0);
    let index = tables.join("global_index.tbl");
    assert!(index.exists());

    let sim = tmp.path().join("sim");
    let o = nsattn(
        &sim,
        &[&SMALL[..], &["--global-index", index.to_str().unwrap(), "simulate"]].concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn fit_rules_writes_a_parseable_rule_file() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nsattn(tmp.path(), &[&SMALL[..], &["fit-rules"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rules = tmp.path().join("rules.txt");
    let sim = tmp.path().join("sim");
    let o = nsattn(
        &sim,
        &[
            &SMALL[..],
            &[
                "--set",
                &format!("rules.path={:?}", rules.to_str().unwrap()),
                "simulate",
            ],
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn control_loop_writes_cadence_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nsattn(
        tmp.path(),
        &["--deterministic", "control-loop", "--horizon", "60", "--cadence-table"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(tmp.path().join("cadence.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 * 3);
    let traj = fs::read_to_string(tmp.path().join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("step,ts_ns,v,installs,version\n"));
}
