use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

use bpconj::conjugate::{extinction_vector, tilt};
use bpconj::fixedpoint::{find_fixed_points, FinderOptions};
use bpconj::model::eval_f;
use bpconj::ProcessModel;

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("models").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpconj")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SUPERCRITICAL: &str = r#"{"d":1,"types":[{"entries":[{"counts":[0],"prob":"1/4"},{"counts":[2],"prob":"3/4"}]}]}"#;

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(code(&run(&["analyze", s(&missing)])), 2);

    let garbage = write(dir.path(), "garbage.json", "{ not json");
    assert_eq!(code(&run(&["analyze", s(&garbage)])), 2);

    let unnormalized = write(
        dir.path(),
        "bad.json",
        r#"{"d":1,"types":[{"entries":[{"counts":[0],"prob":"1/2"},{"counts":[2],"prob":"1/4"}]}]}"#,
    );
    let out = run(&["validate", s(&unnormalized)]);
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());

    let cx = model("counterexample_d2.json");
    assert_eq!(code(&run(&["basin", s(&cx), "--lambda", "0.1"])), 2);
    assert_eq!(code(&run(&["basin", s(&cx), "--lambda", "0.1,0.1", "--q", "1.1,1.1"])), 2);
    assert_eq!(code(&run(&["fixed-points", s(&cx), "--no-such-flag"])), 2);
}

#[test]
fn seed_is_required() {
    let sq = model("single_quadratic.json");
    let out = run(&["verify-conjugate", s(&sq), "--replicas", "10", "--generations", "5"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    let out = run(&["simulate", s(&sq), "--replicas", "10", "--generations", "5"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn hypothesis_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "super.json", SUPERCRITICAL);
    let out = run(&["validate", s(&p)]);
    assert_eq!(code(&out), 1);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["outputs"]["pass"], false);
    assert!(report["outputs"]["failures"][0].as_str().unwrap().contains("subcritical"));
    assert_eq!(code(&run(&["pipeline", s(&p)])), 1);

    assert_eq!(code(&run(&["validate", s(&model("counterexample_d2.json"))])), 0);
}

#[test]
fn pipeline_index_out_of_range_lists_choices() {
    let out = run(&["pipeline", s(&model("counterexample_d2.json")), "--fixed-point-index", "3"]);
    assert_eq!(code(&out), 2);
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("0, 1, 2"), "{msg}");
}

#[test]
fn report_envelope() {
    let path = model("single_quadratic.json");
    let out = run(&["analyze", s(&path)]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["command"], "analyze");
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    let digest = hex::encode(Sha256::digest(std::fs::read(&path).unwrap()));
    assert_eq!(report["inputs_digest"], digest);
    assert!(report.get("wall_time_ms").is_none());
    assert!((report["outputs"]["rho"].as_f64().unwrap() - 0.5).abs() < 1e-12);

    let timed: Value = serde_json::from_slice(&run(&["--timing", "analyze", s(&path)]).stdout).unwrap();
    assert!(timed["wall_time_ms"].is_u64());
}

#[test]
fn basin_accepts_q_or_lambda() {
    let sq = model("single_quadratic.json");
    let below: Value = serde_json::from_slice(&run(&["basin", s(&sq), "--q", "2.5"]).stdout).unwrap();
    assert_eq!(below["outputs"]["verdict"]["verdict"], "S0");
    assert_eq!(below["outputs"]["revalidated"], true);
    let above: Value = serde_json::from_slice(&run(&["basin", s(&sq), "--lambda", "1.2"]).stdout).unwrap();
    assert_eq!(above["outputs"]["verdict"]["verdict"], "SInfty");
}

#[test]
fn conjugate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cx = model("counterexample_d2.json");
    let base = ProcessModel::load(&cx).unwrap();
    let found = find_fixed_points(&base, &FinderOptions::default()).unwrap();
    for (i, point) in found.points.iter().enumerate() {
        let out_path = dir.path().join(format!("conj{i}.json"));
        let idx = i.to_string();
        let out = run(&["conjugate", s(&cx), "--fixed-point-index", &idx, "--output", s(&out_path)]);
        assert_eq!(code(&out), 0);
        let written = ProcessModel::load(&out_path).unwrap();
        assert_eq!(written, tilt(&base, &point.q).unwrap().tilted);
        assert!(written.is_exact());
        let ext = extinction_vector(&written);
        for (a, q) in ext.a.iter().zip(&point.q) {
            assert!((a - 1.0 / q).abs() < 1e-9);
        }

        let stdout = run(&["conjugate", s(&cx), "--fixed-point-index", &idx]).stdout;
        let from_stdout = ProcessModel::from_json_str(std::str::from_utf8(&stdout).unwrap()).unwrap();
        assert_eq!(from_stdout, written);
    }
}

#[test]
fn conjugate_from_explicit_point() {
    let sq = model("single_quadratic.json");
    let out = run(&["conjugate", s(&sq), "--a", "3"]);
    assert_eq!(code(&out), 0);
    let m = ProcessModel::from_json_str(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    let probs: Vec<String> = m.dist(0).entries.iter().map(|e| e.prob.exact().unwrap().to_string()).collect();
    assert!(probs.contains(&"1/4".to_string()) && probs.contains(&"3/4".to_string()));
}

#[test]
fn fixed_points_and_residual_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cx = model("counterexample_d2.json");
    let grid = dir.path().join("grid.csv");
    let out = run(&["fixed-points", s(&cx), "--emit-residual-grid", s(&grid), "--residual-grid-n", "11"]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let m = ProcessModel::load(&cx).unwrap();
    for p in report["outputs"]["points"].as_array().unwrap() {
        let q: Vec<f64> = p["q"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let fq = eval_f(&m, &q).unwrap();
        assert!(fq.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-10));
    }
    let mut rdr = csv::Reader::from_path(&grid).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 4);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 121);
    for row in rows.iter().step_by(17) {
        let v: Vec<f64> = row.iter().map(|x| x.parse().unwrap()).collect();
        let fq = eval_f(&m, &v[..2]).unwrap();
        assert!((fq[0] - v[0] - v[2]).abs() < 1e-12 && (fq[1] - v[1] - v[3]).abs() < 1e-12);
    }
}

#[test]
fn simulate_csv_shape() {
    let cx = model("counterexample_d2.json");
    let out = run(&["simulate", s(&cx), "--generations", "4", "--replicas", "50", "--seed", "1"]);
    assert_eq!(code(&out), 0);
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["replica", "generation", "status", "x0", "x1"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows[0].iter().collect::<Vec<_>>(), ["0", "0", rows[0].get(2).unwrap(), "1", "0"]);
    let replicas: std::collections::BTreeSet<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(replicas.len(), 50);

    let out = run(&["simulate", s(&cx), "--generations", "4", "--replicas", "50", "--seed", "1", "--condition-extinct"]);
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    assert!(rdr.records().all(|r| &r.unwrap()[2] == "Extinct"));

    let out = run(&["simulate", s(&cx), "--generations", "4", "--replicas", "50", "--seed", "1", "--summary"]);
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(&rows[0][4], "1");
}

#[test]
fn seeds_change_output_and_repeats_do_not() {
    let sq = model("single_quadratic.json");
    let args = |seed: &'static str| vec!["verify-conjugate", "SQ", "--seed", seed, "--replicas", "2000", "--generations", "20"];
    let go = |seed: &'static str| {
        let mut a = args(seed);
        a[1] = s(&sq);
        run(&a)
    };
    let (a, b, c) = (go("7"), go("7"), go("8"));
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn truncate_scan_command() {
    let demo = model("demo_countable.json");
    let out = run(&["truncate-scan", s(&demo), "--schedule", "2,4,8"]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["outputs"]["scan"]["records"].as_array().unwrap().len(), 3);
    assert_eq!(report["outputs"]["assumptions"]["checks"].as_array().unwrap().len(), 4);
    assert_eq!(code(&run(&["truncate-scan", s(&demo), "--schedule", "2,64"])), 2);
    assert_eq!(code(&run(&["truncate-scan", s(&demo), "--dmax", "8", "--schedule", "16"])), 2);
}

#[test]
fn mesh_csv() {
    let out = run(&["mesh", s(&model("counterexample_d2.json")), "--grid", "5"]);
    assert_eq!(code(&out), 0);
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    for row in &rows {
        let lo: f64 = row[3].parse().unwrap();
        let hi: f64 = row[4].parse().unwrap();
        assert!(lo < hi && hi - lo <= 1e-9);
    }
}
