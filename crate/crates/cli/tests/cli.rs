use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn semisel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semisel")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = semisel(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic fixture written through the CLI itself.
fn fixture(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["--seed", "4", "synth", "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out.join("manifest.json")
}

fn weights(model: &Value, task: usize) -> Vec<f64> {
    model["tasks"][task]["w"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|row| row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()))
        .collect()
}

#[test]
fn synth_then_fit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), &[]);
    let model_path = dir.path().join("model.json");
    let stdout = ok(&["fit", "--manifest", p(&manifest), "--out", p(&model_path)]);
    assert!(stdout.contains("converged"));
    let model = json(&model_path);
    assert_eq!(model["converged"], Value::Bool(true));
    let trace: Vec<f64> = model["objective_trace"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
}

#[test]
fn synth_is_deterministic_and_records_the_support() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = fixture(a.path(), &["--d", "20", "--support", "4"]);
    let mb = fixture(b.path(), &["--d", "20", "--support", "4"]);
    let support = json(&ma)["support"].as_array().unwrap().len();
    assert_eq!(support, 4);
    for entry in fs::read_dir(ma.parent().unwrap()).unwrap() {
        let name = entry.unwrap().file_name();
        let left = fs::read(ma.parent().unwrap().join(&name)).unwrap();
        let right = fs::read(mb.parent().unwrap().join(&name)).unwrap();
        assert_eq!(left, right, "{name:?}");
    }
}

#[test]
fn missing_manifest_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.json");
    let out = semisel(&["fit", "--manifest", p(&missing), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.json"));
}

#[test]
fn invalid_values_and_configs_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), &[]);
    let out_path = dir.path().join("m.json");
    let out = semisel(&["fit", "--manifest", p(&manifest), "--out", p(&out_path), "--alpha", "-1"]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = dir.path().join("hp.json");
    fs::write(&cfg, r#"{"alpha": 1.0, "learning_rate": 3}"#).unwrap();
    let out = semisel(&["fit", "--manifest", p(&manifest), "--out", p(&out_path), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert_eq!(semisel(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(semisel(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_values_are_used_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), &[]);
    let cfg = dir.path().join("hp.json");
    fs::write(&cfg, r#"{"alpha": 100.0, "gamma": 0.01, "k": 7}"#).unwrap();
    let out_path = dir.path().join("m.json");
    ok(&["fit", "--manifest", p(&manifest), "--out", p(&out_path), "--config", p(&cfg), "--k", "9"]);
    let hp = &json(&out_path)["hyperparams"];
    assert_eq!(hp["alpha"], 100.0);
    assert_eq!(hp["gamma"], 0.01);
    assert_eq!(hp["k"], 9);
}

#[test]
fn overflowing_data_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rows: Vec<String> = (0..6).map(|i| format!("{}e300,{}e300", i + 1, 6 - i)).collect();
    fs::write(d.join("x.csv"), rows.join("\n")).unwrap();
    fs::write(d.join("y.csv"), "1,0\n0,1\n1,0\n0,1\n0,0\n0,0\n").unwrap();
    fs::write(d.join("m.json"), r#"{"tasks":[{"name":"a","features_csv":"x.csv","labels_csv":"y.csv"}]}"#).unwrap();
    let out = semisel(&["fit", "--manifest", p(&d.join("m.json")), "--out", p(&d.join("model.json")), "--k", "3"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dropping_coupling_matches_a_single_task_fit() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), &["--tasks", "2"]);
    // a manifest with only the first task
    let mut single = json(&manifest);
    single["tasks"].as_array_mut().unwrap().truncate(1);
    let single_path = manifest.parent().unwrap().join("single.json");
    fs::write(&single_path, serde_json::to_string(&single).unwrap()).unwrap();

    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["fit", "--manifest", p(&manifest), "--out", p(&a), "--gamma", "0", "--tasks", "1"]);
    ok(&["fit", "--manifest", p(&single_path), "--out", p(&b), "--gamma", "0"]);
    let (wa, wb) = (weights(&json(&a), 0), weights(&json(&b), 0));
    assert_eq!(wa.len(), wb.len());
    for (x, y) in wa.iter().zip(&wb) {
        assert!((x - y).abs() <= 1e-10);
    }
}

#[test]
fn select_writes_ranked_prefixes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), &["--d", "12"]);
    let model_path = dir.path().join("model.json");
    ok(&["fit", "--manifest", p(&manifest), "--out", p(&model_path)]);
    let model = json(&model_path);
    let pick = |n: &str| {
        let out = dir.path().join(format!("sel{n}.json"));
        ok(&["select", "--model", p(&model_path), "--top", n, "--out", p(&out)]);
        json(&out)
    };
    let (one, five, ten, all) = (pick("1"), pick("5"), pick("10"), pick("12"));
    for l in 0..2 {
        let ids = |v: &Value| -> Vec<u64> {
            v["tasks"][l]["selected"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect()
        };
        let scores: Vec<f64> = model["tasks"][l]["scores"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let best = (0..scores.len()).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
        assert_eq!(ids(&one), vec![best as u64]);
        assert_eq!(ids(&five)[..], ids(&ten)[..5]);
        let mut every = ids(&all);
        every.sort_unstable();
        assert_eq!(every, (0..12).collect::<Vec<u64>>());
    }
    let out = semisel(&["select", "--model", p(&model_path), "--top", "13", "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_reports_every_method_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), &["--d", "10", "--support", "3", "--samples", "60"]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let csv = dir.path().join(format!("{name}.csv"));
        ok(&[
            "--seed", "2", "eval", "--manifest", p(&manifest), "--out", p(&out), "--methods", "sfmc,fisher",
            "--fractions", "0.25,1", "--counts", "3", "--repeats", "5", "--alphas", "1,100", "--k", "6",
            "--csv", p(&csv),
        ]);
        (fs::read(&out).unwrap(), fs::read(&csv).unwrap())
    };
    let (first, first_csv) = run("r1.json");
    let (second, second_csv) = run("r2.json");
    assert_eq!(first, second);
    assert_eq!(first_csv, second_csv);
    let report: Value = serde_json::from_slice(&first).unwrap();
    let cells = report["cells"].as_array().unwrap();
    for method in ["sfmc", "fisher"] {
        assert!(cells.iter().any(|c| c["method"] == method));
    }
    for c in cells {
        assert!(c["map_std"].is_number());
        assert_eq!(c["map_per_repeat"].as_array().unwrap().len(), 5);
    }
}

#[test]
fn commands_leave_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), &[]);
    let data_dir = manifest.parent().unwrap();
    let snapshot = || -> Vec<(PathBuf, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(data_dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.into_iter().map(|f| (f.clone(), fs::read(f).unwrap())).collect()
    };
    let before = snapshot();
    let model = dir.path().join("model.json");
    ok(&["fit", "--manifest", p(&manifest), "--out", p(&model)]);
    let model_bytes = fs::read(&model).unwrap();
    ok(&["select", "--model", p(&model), "--top", "3", "--out", p(&dir.path().join("s.json"))]);
    ok(&["eval", "--manifest", p(&manifest), "--out", p(&dir.path().join("r.json")), "--repeats", "1", "--counts", "3", "--fractions", "0.5,1"]);
    assert_eq!(snapshot(), before);
    assert_eq!(fs::read(&model).unwrap(), model_bytes);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), &["--tasks", "3"]);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["--threads", "1", "fit", "--manifest", p(&manifest), "--out", p(&a)]);
    ok(&["--threads", "4", "fit", "--manifest", p(&manifest), "--out", p(&b)]);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}
