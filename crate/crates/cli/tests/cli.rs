//! End-to-end runs of the `dualscale` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dualscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualscale")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dualscale(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn single_ap(dir: &TempDir, rate: &str, lambda: &str) -> PathBuf {
    let p = path(dir, "one.json");
    ok(&["generate", "--kind", "single-ap", "--rate", rate, "--lambda", lambda, "--out", s(&p)]);
    p
}

fn three_ap(dir: &TempDir) -> PathBuf {
    let p = path(dir, "three.json");
    ok(&["generate", "--kind", "fixed", "--aps", "3", "--seed", "2", "--out", s(&p)]);
    p
}

#[test]
fn optimize_single_ap_is_mm1() {
    let dir = TempDir::new().unwrap();
    let scenario = single_ap(&dir, "3", "1");
    let alloc = path(&dir, "alloc.json");
    let text = ok(&["optimize", s(&scenario), "--method", "p1", "--out", s(&alloc)]);
    assert!(text.contains("stationary allocation"), "{text}");
    assert!(text.contains("y[{1}] = 1.000000  (mask 1)"), "{text}");
    assert!(text.contains("network mean delay: 0.500000 s"), "{text}");
    let file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&alloc).unwrap()).unwrap();
    assert_eq!(file["y"]["1"], 1.0);
}

#[test]
fn optimize_json_output_parses() {
    let dir = TempDir::new().unwrap();
    let scenario = three_ap(&dir);
    let text = ok(&["optimize", s(&scenario), "--method", "p2", "--load-mult", "2", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["method"], "p2");
    assert_eq!(v["rho"].as_array().unwrap().len(), 3);
    assert!(v["objective"].as_f64().unwrap() > 0.0);
}

#[test]
fn bad_input_exits_with_2() {
    let dir = TempDir::new().unwrap();
    let scenario = single_ap(&dir, "3", "1");
    assert_eq!(dualscale(&["optimize", s(&scenario), "--method", "p9"]).status.code(), Some(2));
    assert_eq!(dualscale(&["optimize", s(&scenario), "--load-mult", "-1"]).status.code(), Some(2));
    assert_eq!(dualscale(&["optimize", s(&path(&dir, "missing.json"))]).status.code(), Some(2));
    let missing = path(&dir, "missing-alloc.json");
    let out = dualscale(&["simulate", s(&scenario), "--allocation", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing-alloc.json"));
    let garbage = path(&dir, "garbage.json");
    std::fs::write(&garbage, "{\"aps\": 3}").unwrap();
    assert_eq!(dualscale(&["optimize", s(&garbage)]).status.code(), Some(2));
}

#[test]
fn overload_exits_with_3() {
    let dir = TempDir::new().unwrap();
    let scenario = single_ap(&dir, "2", "3");
    let out = dualscale(&["optimize", s(&scenario), "--method", "p2"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_matches_mm1_and_repeats_per_seed() {
    let dir = TempDir::new().unwrap();
    let scenario = single_ap(&dir, "3", "1");
    let alloc = path(&dir, "alloc.json");
    ok(&["optimize", s(&scenario), "--out", s(&alloc)]);
    let csv = path(&dir, "sim.csv");
    let run = |seed: &str| ok(&["simulate", s(&scenario), "--allocation", s(&alloc), "--seed", seed, "--packets", "200000", "--out", s(&csv)]);
    let a = run("8");
    let b = run("8");
    assert_eq!(a, b);
    let lines: Vec<String> = std::fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3, "header plus two rows");
    assert_eq!(lines[1], lines[2]);
    let mean: f64 = lines[1].split(',').nth(4).unwrap().parse().unwrap();
    assert!((mean - 0.5).abs() < 0.05, "simulated {mean}");
}

#[test]
fn sweep_writes_one_row_per_method_and_load() {
    let dir = TempDir::new().unwrap();
    let scenario = three_ap(&dir);
    let out = path(&dir, "sweep.csv");
    let args = [
        "sweep", s(&scenario), "--methods", "p1,p2,full-reuse", "--loads", "1,2,3,4,5,6,40",
        "--packets", "5000", "--seeds", "1,2", "--out", s(&out),
    ];
    ok(&args);
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,load_mult,analytic_delay_s,sim_delay_s,sim_ci_s,max_rho,outer_iters,status");
    assert_eq!(lines.len(), 1 + 3 * 7);
    let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert!(methods[..7].iter().all(|&m| m == "p1"));
    assert!(methods[14..].iter().all(|&m| m == "full-reuse"));
    for l in &lines[1..] {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(cells.len(), 8);
        if cells[1] == "40.0" {
            assert!(matches!(cells[7], "infeasible" | "unstable"), "{l}");
            assert_eq!(cells[2], "");
        } else {
            assert_eq!(cells[7], "ok", "{l}");
            assert!(cells[3].parse::<f64>().unwrap() > 0.0);
        }
    }
    // Thread count does not change the output.
    let again = path(&dir, "again.csv");
    let mut single = args.to_vec();
    single.truncate(single.len() - 2);
    single.extend(["--jobs", "1", "--out", s(&again)]);
    ok(&single);
    assert_eq!(std::fs::read_to_string(&again).unwrap(), text);
}

#[test]
fn analytic_only_sweep_leaves_sim_cells_empty() {
    let dir = TempDir::new().unwrap();
    let scenario = three_ap(&dir);
    let text = ok(&["sweep", s(&scenario), "--methods", "conservative", "--loads", "1", "--packets", "0"]);
    let row = text.lines().nth(1).unwrap();
    let cells: Vec<&str> = row.split(',').collect();
    assert_eq!(cells[0], "conservative");
    assert!(cells[2].parse::<f64>().unwrap() > 0.0);
    assert_eq!((cells[3], cells[4]), ("", ""));
    assert_eq!(cells[6], "1");
}

#[test]
fn full_reuse_saturates_before_dual_timescale() {
    let dir = TempDir::new().unwrap();
    let scenario = path(&dir, "cluster.json");
    ok(&["generate", "--kind", "cluster", "--out", s(&scenario)]);
    let loads = "0.5,1,2,3";
    let text = ok(&["sweep", s(&scenario), "--methods", "p2,full-reuse", "--loads", loads, "--packets", "0"]);
    let first_failure = |method: &str| {
        text.lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|c| c[0] == method)
            .position(|c| c[7] != "ok")
            .unwrap_or(usize::MAX)
    };
    let (p2, fr) = (first_failure("p2"), first_failure("full-reuse"));
    assert!(fr < usize::MAX, "{text}");
    assert!(fr < p2, "{text}");
}
