use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use evoline::hyperspace::{default_space, load_space};

const EVOLINE: &str = env!("CARGO_BIN_EXE_evoline");
const WORKER: &str = env!("CARGO_BIN_EXE_evoline-worker");

fn evoline(args: &[&str]) -> Output {
    Command::new(EVOLINE)
        .args(args)
        .env("EVOLINE_LOG", "error")
        .output()
        .expect("spawn evoline")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn optimize_smoke_populates_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let r1 = tmp.path().join("r1");
    let out = evoline(&[
        "optimize", "--algo", "de", "--evaluator", "surrogate", "--seed", "1", "--pop", "15", "--gens", "30",
        "--out", p(&r1),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "space.json", "history.csv", "best.json"] {
        assert!(r1.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_dir(r1.join("generations")).unwrap().count(), 30);
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("generation ")).count(), 30);
    let history = fs::read_to_string(r1.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 31);
}

#[test]
fn flag_validation_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evoline(&["optimize", "--f", "1.5", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("x").exists());
    let out = evoline(&["optimize", "--pop", "3", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = evoline(&["optimize", "--algo", "ga", "--cr", "0.5", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = evoline(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ga_default_population_is_fifteen() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ga");
    let out = evoline(&["optimize", "--algo", "ga", "--gens", "2", "--out", p(&dir)]);
    assert_eq!(out.status.code(), Some(0));
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["algorithm"], "ga");
    assert_eq!(config["ga"]["population_size"], 15);
    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("generations/gen0002.json")).unwrap()).unwrap();
    assert_eq!(snap["individuals"].as_array().unwrap().len(), 15);
}

#[test]
fn config_file_reproduces_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = evoline(&["optimize", "--seed", "9", "--gens", "4", "--no-wallclock", "--out", p(&a)]);
    assert_eq!(out.status.code(), Some(0));
    let out = evoline(&["optimize", "--config", p(&a.join("config.json")), "--out", p(&b)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
    assert_eq!(fs::read(a.join("config.json")).unwrap(), fs::read(b.join("config.json")).unwrap());
}

#[test]
fn space_init_round_trip_and_refusal() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("space.json");
    assert_eq!(evoline(&["space-init", p(&path)]).status.code(), Some(0));
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(load_space(&text).unwrap(), default_space());
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["version"], 1);

    fs::write(&path, "keep me").unwrap();
    assert_eq!(evoline(&["space-init", p(&path)]).status.code(), Some(3));
    assert_eq!(fs::read_to_string(&path).unwrap(), "keep me");
    assert_eq!(evoline(&["space-init", "--force", p(&path)]).status.code(), Some(0));
    assert_eq!(load_space(&fs::read_to_string(&path).unwrap()).unwrap(), default_space());
}

#[test]
fn custom_space_file_is_used_and_persisted() {
    let tmp = tempfile::tempdir().unwrap();
    let space = tmp.path().join("compact.json");
    assert_eq!(evoline(&["space-init", "--template", "compact", p(&space)]).status.code(), Some(0));
    let dir = tmp.path().join("run");
    let out = evoline(&["optimize", "--space", p(&space), "--gens", "2", "--out", p(&dir)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(&space).unwrap(), fs::read(dir.join("space.json")).unwrap());

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"version": 2, "genes": []}"#).unwrap();
    let out = evoline(&["optimize", "--space", p(&bad), "--out", p(&tmp.path().join("r2"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = evoline(&["optimize", "--space", p(&tmp.path().join("missing.json")), "--out", p(&tmp.path().join("r3"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn report_bundle_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(evoline(&["optimize", "--gens", "5", "--out", p(&run)]).status.code(), Some(0));
    let rep = tmp.path().join("rep");
    let out = evoline(&["report", p(&run), "--out", p(&rep)]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["curve.csv", "curve.svg", "best_phenotype.json", "best_table.txt", "index.txt"] {
        assert!(rep.join(f).is_file(), "{f}");
    }
    assert!(!rep.join("confusion.csv").exists());
    let index = fs::read_to_string(rep.join("index.txt")).unwrap();
    assert!(index.contains("confusion.csv skipped"));
    let table = fs::read_to_string(rep.join("best_table.txt")).unwrap();
    assert!(table.contains("global.optimizer"));
    assert!(table.contains("pool5  max 2x2"));

    assert_eq!(evoline(&["report", p(&tmp.path().join("nope"))]).status.code(), Some(3));
    fs::remove_file(run.join("best.json")).unwrap();
    assert_eq!(evoline(&["report", p(&run)]).status.code(), Some(3));
}

#[test]
fn worker_metrics_reach_confusion_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let evaluator = format!("worker:{WORKER} --metrics 3");
    let out = evoline(&["optimize", "--evaluator", &evaluator, "--pop", "5", "--gens", "2", "--parallel", "2", "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = tmp.path().join("rep");
    assert_eq!(evoline(&["report", p(&run), "--out", p(&rep)]).status.code(), Some(0));
    let confusion = fs::read_to_string(rep.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 4);
    let best: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("best.json")).unwrap()).unwrap();
    assert_eq!(best["evaluator"], evaluator);
}

#[test]
fn compare_sorts_by_best_fitness() {
    let tmp = tempfile::tempdir().unwrap();
    let de = tmp.path().join("de");
    let ga = tmp.path().join("ga");
    assert_eq!(evoline(&["optimize", "--algo", "de", "--seed", "2", "--gens", "6", "--out", p(&de)]).status.code(), Some(0));
    assert_eq!(evoline(&["optimize", "--algo", "ga", "--seed", "2", "--gens", "6", "--out", p(&ga)]).status.code(), Some(0));
    let cmp = tmp.path().join("cmp");
    let out = evoline(&["compare", p(&de), p(&ga), "--out", p(&cmp)]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(cmp.join("compare.csv")).unwrap();
    let bests: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(bests.len(), 2);
    assert!(bests[0] >= bests[1]);
    assert!(stdout(&out).contains("label"));

    assert_eq!(evoline(&["compare", p(&de), "--out", p(&cmp)]).status.code(), Some(2));
    assert_eq!(evoline(&["compare", p(&de), p(&tmp.path().join("missing"))]).status.code(), Some(3));
}

#[test]
fn bench_prints_reproducible_best() {
    let a = evoline(&["bench", "--function", "sphere", "--dims", "10", "--pop", "20", "--gens", "200", "--seed", "4"]);
    let b = evoline(&["bench", "--function", "sphere", "--dims", "10", "--pop", "20", "--gens", "200", "--seed", "4"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout(&a), stdout(&b));
    let value: f64 = stdout(&a).trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value < 1e-3, "{value}");
    assert_eq!(evoline(&["bench", "--dims", "0"]).status.code(), Some(2));
    assert_eq!(evoline(&["bench", "--function", "rastrigin", "--dims", "2", "--gens", "20"]).status.code(), Some(0));
}

#[test]
fn continuous_optimize_writes_box_space() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = evoline(&["optimize", "--evaluator", "sphere", "--dims", "4", "--pop", "8", "--gens", "5", "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(0));
    let space: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("space.json")).unwrap()).unwrap();
    assert_eq!(space["template"], "continuous-box");
    assert_eq!(evoline(&["report", p(&run), "--out", p(&tmp.path().join("rep"))]).status.code(), Some(0));
    let out = evoline(&["optimize", "--evaluator", "sphere", "--space", p(&run.join("space.json")), "--out", p(&tmp.path().join("r2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn environment_and_abort_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evoline(&["optimize", "--evaluator", "worker:/nonexistent/worker", "--out", p(&tmp.path().join("a"))]);
    assert_eq!(out.status.code(), Some(3));

    let evaluator = format!("worker:{WORKER} --fail-all");
    let out = evoline(&["optimize", "--evaluator", &evaluator, "--out", p(&tmp.path().join("b"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run aborted"));
}

#[test]
fn existing_and_completed_runs_are_protected() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(evoline(&["optimize", "--gens", "2", "--out", p(&run)]).status.code(), Some(0));
    assert_eq!(evoline(&["optimize", "--gens", "2", "--out", p(&run)]).status.code(), Some(3));
    let out = evoline(&["resume", p(&run)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("already complete"));
    assert_eq!(evoline(&["resume", p(&tmp.path().join("nothing"))]).status.code(), Some(3));
}

#[test]
fn help_lists_flags_and_defaults() {
    let out = evoline(&["optimize", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = stdout(&out);
    for needle in ["--algo", "--evaluator", "--seed", "--pop", "--gens", "--f ", "--cr", "--parallel", "[default: 10]", "[default: 0.9]"] {
        assert!(help.contains(needle), "{needle}");
    }
}

#[test]
fn logs_go_to_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(EVOLINE)
        .args(["optimize", "--gens", "2", "--out", p(&tmp.path().join("r"))])
        .env("EVOLINE_LOG", "info")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("INFO"), "{err}");
    assert!(!stdout(&out).contains("INFO"));
}
