use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn scenario(n: u32) -> String {
    fixtures()
        .join(format!("scenarios/s{n}.json"))
        .display()
        .to_string()
}

fn segplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segplan"))
        .args(args)
        .output()
        .expect("run segplan")
}

fn ok(args: &[&str]) -> Output {
    let out = segplan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).expect("json output")
}

fn gpu_count(map: &serde_json::Value) -> usize {
    map["gpus"].as_array().unwrap().len()
}

fn write_scenario(dir: &Path, body: &str) -> String {
    let path = dir.join("scenario.json");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

#[test]
fn enumerate_configs_lists_nineteen() {
    let out = ok(&["enumerate-configs"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 19);
    assert!(text.lines().any(|l| l == "4-2-1"));
    let wide = ok(&["enumerate-configs", "--size2-at-slot5"]);
    assert!(String::from_utf8(wide.stdout).unwrap().lines().count() > 19);
}

#[test]
fn plan_is_deterministic_and_optimization_never_adds_gpus() {
    for n in [1, 3, 5] {
        let s = scenario(n);
        let a = ok(&["plan", "--scenario", &s]);
        let b = ok(&["plan", "--scenario", &s]);
        assert_eq!(a.stdout, b.stdout);
        let unopt = ok(&["plan", "--scenario", &s, "--no-optimize"]);
        assert!(gpu_count(&json(&a.stdout)) <= gpu_count(&json(&unopt.stdout)));
    }
}

#[test]
fn plan_writes_map_and_summary_files() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("map.json");
    let summary = dir.path().join("summary.json");
    let out = ok(&[
        "plan",
        "--scenario",
        &scenario(2),
        "--out",
        map.to_str().unwrap(),
        "--summary",
        summary.to_str().unwrap(),
    ]);
    assert!(out.stdout.is_empty());
    let map = json(&fs::read(&map).unwrap());
    let summary = json(&fs::read(&summary).unwrap());
    assert_eq!(
        summary["gpu_count"].as_u64().unwrap() as usize,
        gpu_count(&map)
    );
    let input = json(&fs::read(scenario(2)).unwrap());
    assert_eq!(
        summary["services"].as_array().unwrap().len(),
        input["services"].as_array().unwrap().len()
    );
}

#[test]
fn invalid_scenario_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let profiles = fixtures().join("profiles");
    let s = write_scenario(
        dir.path(),
        r#"{"name":"bad","services":[{"model":"resnet50","request_rate":-5,"slo_latency_ms":100}]}"#,
    );
    let out = segplan(&[
        "plan",
        "--scenario",
        &s,
        "--profiles",
        profiles.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("request_rate"));

    let missing = segplan(&["plan", "--scenario", "/nonexistent/scenario.json"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn unreachable_slo_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let profiles = fixtures().join("profiles");
    let s = write_scenario(
        dir.path(),
        r#"{"name":"tight","services":[{"model":"vgg19","request_rate":100,"slo_latency_ms":0.01}]}"#,
    );
    let out = segplan(&[
        "plan",
        "--scenario",
        &s,
        "--profiles",
        profiles.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_then_merge_reports() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let out = ok(&[
        "simulate",
        "--scenario",
        &scenario(1),
        "--seed",
        "1",
        "--runs",
        "2",
        "--horizon",
        "5",
        "--csv",
        a.to_str().unwrap(),
    ]);
    let reports = json(&out.stdout);
    assert_eq!(reports.as_array().unwrap().len(), 2);
    ok(&[
        "simulate",
        "--scenario",
        &scenario(1),
        "--seed",
        "7",
        "--horizon",
        "5",
        "--arrivals",
        "deterministic",
        "--csv",
        b.to_str().unwrap(),
    ]);
    let rows_a = fs::read_to_string(&a).unwrap().lines().count() - 1;
    let rows_b = fs::read_to_string(&b).unwrap().lines().count() - 1;
    assert_eq!(rows_a, 12);
    assert_eq!(rows_b, 6);

    let merged = ok(&["report", a.to_str().unwrap(), b.to_str().unwrap()]);
    let text = String::from_utf8(merged.stdout).unwrap();
    assert!(text.lines().next().unwrap().starts_with("source,"));
    assert_eq!(text.lines().count(), 1 + rows_a + rows_b);
}

#[test]
fn simulate_accepts_a_saved_map() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("map.json");
    ok(&[
        "plan",
        "--scenario",
        &scenario(1),
        "--out",
        map.to_str().unwrap(),
    ]);
    let from_map = ok(&[
        "simulate",
        "--scenario",
        &scenario(1),
        "--map",
        map.to_str().unwrap(),
        "--seed",
        "3",
        "--horizon",
        "5",
    ]);
    let planned = ok(&[
        "simulate",
        "--scenario",
        &scenario(1),
        "--seed",
        "3",
        "--horizon",
        "5",
    ]);
    assert_eq!(from_map.stdout, planned.stdout);
}

#[test]
fn reconfigure_changes_only_the_named_service() {
    let out = ok(&[
        "reconfigure",
        "--scenario",
        &scenario(1),
        "--service",
        "resnet50",
        "--rate",
        "2500",
    ]);
    let diff = String::from_utf8(out.stderr).unwrap();
    let changes: Vec<&str> = diff
        .lines()
        .filter(|l| l.starts_with("+ ") || l.starts_with("- "))
        .collect();
    assert!(!changes.is_empty());
    assert!(changes.iter().all(|l| l.contains("resnet50")), "{diff}");
    let map = json(&out.stdout);
    let rate: f64 = map["gpus"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|g| g["segments"].as_array().unwrap())
        .filter(|s| s["service"] == "resnet50")
        .map(|s| s["throughput_rps"].as_f64().unwrap())
        .sum();
    assert!(rate >= 2500.0);

    let unknown = segplan(&[
        "reconfigure",
        "--scenario",
        &scenario(1),
        "--service",
        "nope",
        "--rate",
        "1",
    ]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn oracle_bounds_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let profiles = fixtures().join("profiles");
    let s = write_scenario(
        dir.path(),
        r#"{"name":"small","services":[
            {"model":"resnet50","request_rate":900,"slo_latency_ms":205},
            {"model":"mobilenetv2","request_rate":700,"slo_latency_ms":167}]}"#,
    );
    let out = ok(&[
        "oracle",
        "--scenario",
        &s,
        "--profiles",
        profiles.to_str().unwrap(),
    ]);
    let result = json(&out.stdout);
    let plan = ok(&[
        "plan",
        "--scenario",
        &s,
        "--profiles",
        profiles.to_str().unwrap(),
    ]);
    assert!(result["min_gpus"].as_u64().unwrap() as usize <= gpu_count(&json(&plan.stdout)));

    let big = segplan(&["oracle", "--scenario", &scenario(6)]);
    assert_eq!(big.status.code(), Some(2));
}

#[test]
fn synthesize_reproduces_shipped_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let models = fixtures().join("models.json");
    ok(&[
        "synthesize",
        "--models",
        models.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let mut count = 0;
    for entry in fs::read_dir(fixtures().join("profiles")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(dir.path().join(name)).unwrap(),
            "{name:?}"
        );
        count += 1;
    }
    assert_eq!(count, 11);
}
