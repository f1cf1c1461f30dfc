use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use simcal::scenario::{bundled_scenarios, ScenarioFile};

fn simcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simcal")).args(args).output().expect("spawn simcal")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn scenarios_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn shipped_scenario_files_match_the_builtins() {
    for s in bundled_scenarios() {
        let path = scenarios_dir().join(format!("{}.json", s.name));
        let text = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()));
        assert_eq!(ScenarioFile::from_json(&text).unwrap(), s, "{}", s.name);
    }
}

#[test]
fn calibrate_twice_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = simcal(&[
            "calibrate",
            "--scenario",
            "desk-tiny",
            "--override",
            "seed=7",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stderr(&o).lines().filter(|l| l.starts_with("stage")).count(), 4);
    }
    let fa = files(a.path());
    assert_eq!(fa.iter().map(|f| f.0.as_str()).collect::<Vec<_>>(), ["trace.csv", "trace.json"]);
    assert_eq!(fa, files(b.path()));
    let meta: serde_json::Value = serde_json::from_slice(&fa[1].1).unwrap();
    assert_eq!(meta["master_seed"], 7);
}

#[test]
fn seed_flag_beats_override() {
    let d = tempfile::tempdir().unwrap();
    let o = simcal(&[
        "calibrate",
        "--override",
        "seed=7",
        "--seed",
        "9",
        "--out",
        d.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("trace.json")).unwrap()).unwrap();
    assert_eq!(meta["master_seed"], 9);
}

#[test]
fn sweep_is_independent_of_workers() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (d, w) in [(&a, "1"), (&b, "2")] {
        let o = simcal(&[
            "sweep",
            "--scenario",
            scenarios_dir().join("paper-fig4b.json").to_str().unwrap(),
            "--override",
            "stack.atoms_per_side=2",
            "--override",
            "scene.receivers.grid.side=2",
            "--override",
            "sweep.slots=40",
            "--override",
            "sweep.seeds_per_point=2",
            "--override",
            "sweep.grid=[0.0,0.0001,0.0002]",
            "--workers",
            w,
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let fa = files(a.path());
    assert_eq!(fa.iter().map(|f| f.0.as_str()).collect::<Vec<_>>(), ["sweep.csv", "sweep_summary.csv"]);
    assert_eq!(fa, files(b.path()));
    assert_eq!(String::from_utf8_lossy(&fa[0].1).lines().count(), 1 + 3 * 2);
}

#[test]
fn heatmap_writes_every_panel() {
    let d = tempfile::tempdir().unwrap();
    let o = simcal(&["heatmap", "--out", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = files(d.path()).into_iter().map(|f| f.0).collect();
    for p in ["ideal", "practical", "calibrated", "difference", "magnitude_difference", "uncalibrated_difference"] {
        assert!(names.contains(&format!("heatmap_{p}.txt")), "{names:?}");
    }
    let text = fs::read_to_string(d.path().join("heatmap_ideal.txt")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.split(' ').count() == 4));
}

#[test]
fn monitor_logs_the_jump() {
    let d = tempfile::tempdir().unwrap();
    let o = simcal(&[
        "monitor",
        "--override",
        "monitor.known_slots=300",
        "--override",
        "monitor.change_at=150",
        "--out",
        d.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let events = fs::read_to_string(d.path().join("events.csv")).unwrap();
    let rows: Vec<&str> = events.lines().skip(1).collect();
    assert_eq!(rows.len(), 1, "{events}");
    let at: usize = rows[0].split(',').next().unwrap().parse().unwrap();
    assert!((150..155).contains(&at));
    let indicator = fs::read_to_string(d.path().join("indicator.csv")).unwrap();
    assert_eq!(indicator.lines().count(), 301);
}

#[test]
fn validate_passes_on_the_default_scenario() {
    let o = simcal(&["validate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() >= 4);
    assert!(out.lines().all(|l| l.starts_with("ok")), "{out}");
}

#[test]
fn schema_errors_exit_2_with_the_field_path() {
    let o = simcal(&["calibrate", "--override", "gradient.stepsize=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(line["error"], "schema");
    assert_eq!(line["field"], "gradient.stepsize");

    let o = simcal(&["calibrate", "--override", "stack.num_layers=0"]);
    assert_eq!(o.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert!(line["field"].as_str().unwrap().starts_with("stack"), "{line}");

    let o = simcal(&["calibrate", "--scenario", "no-such-scenario"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let o = simcal(&[
        "calibrate",
        "--override",
        "gradient.step_size=50",
        "--override",
        "gradient.line_search=false",
        "--out",
        d.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let last = stderr(&o).lines().last().unwrap().to_string();
    let line: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert_eq!(line["error"], "numerical");
    assert!(d.path().join("trace.csv").exists());
}

#[test]
fn ten_stage_trace_has_eleven_rows_per_matrix() {
    let d = tempfile::tempdir().unwrap();
    let path = scenarios_dir().join("paper-fig4a.json");
    let o = simcal(&["calibrate", "--scenario", path.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("trace.csv")).unwrap();
    let mut per_matrix = std::collections::BTreeMap::new();
    for line in csv.lines().skip(1) {
        *per_matrix.entry(line.split(',').nth(2).unwrap().to_string()).or_insert(0) += 1;
    }
    assert_eq!(per_matrix.len(), 4, "{per_matrix:?}");
    assert!(per_matrix.values().all(|&n| n == 11), "{per_matrix:?}");
}
