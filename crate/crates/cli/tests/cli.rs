use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dosefind_core::{DoseRule, GridKernelRule, KernelRidgeRule};
use nalgebra::DMatrix;
use serde_json::Value;
use tempfile::TempDir;

const QUICK: [&str; 4] = ["--restarts", "1", "--max-iters", "3"];

fn dosefind(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dosefind"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dosefind(args);
    assert!(
        out.status.success(),
        "dosefind {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &TempDir, name: &str, setting: &str, n: &str, p: &str, seed: &str) -> PathBuf {
    let out = path(dir, name);
    ok(&["generate", "--setting", setting, "--n", n, "--p", p, "--seed", seed, "--out", s(&out)]);
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn matrix(v: &Value) -> DMatrix<f64> {
    let rows = v["rows"].as_u64().unwrap() as usize;
    let cols = v["cols"].as_u64().unwrap() as usize;
    let data: Vec<f64> = v["data"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

fn read_doses(p: &Path) -> Vec<f64> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.parse().unwrap())
        .collect()
}

/// Covariate block of a trial CSV written by `generate`.
fn covariates_of(csv: &Path) -> DMatrix<f64> {
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&c| header[c].starts_with('x')).collect();
    let rows: Vec<Vec<f64>> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            keep.iter().map(|&c| f[c].parse().unwrap()).collect()
        })
        .collect();
    DMatrix::from_fn(rows.len(), keep.len(), |i, j| rows[i][j])
}

/// Trial with constant reward `c`, propensity `prop`, Setting-1-like covariates.
fn constant_reward_csv(dir: &TempDir, name: &str, c: f64, prop: f64) -> PathBuf {
    let src = generate(dir, &format!("{name}.src.csv"), "1", "60", "5", "9");
    let text = fs::read_to_string(src).unwrap();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let mut f: Vec<String> = line.split(',').map(str::to_owned).collect();
        let last = f.len() - 1;
        if i > 0 {
            f[last - 1] = c.to_string();
            f[last] = prop.to_string();
        }
        out.push_str(&f.join(","));
        out.push('\n');
    }
    let p = path(dir, name);
    fs::write(&p, out).unwrap();
    p
}

#[test]
fn fit_writes_orthonormal_basis_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "train.csv", "1", "80", "10", "1");
    let m1 = path(&dir, "m1.json");
    let m2 = path(&dir, "m2.json");
    for m in [&m1, &m2] {
        let mut args = vec!["fit", "--data", s(&data), "--out", s(m), "--method", "direct", "--d", "2", "--seed", "4"];
        args.extend(QUICK);
        ok(&args);
    }
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());

    let model = read_json(&m1);
    assert_eq!(model["format"], "dosefind-model");
    assert_eq!(model["version"], 1);
    let b = matrix(&model["basis"]);
    assert_eq!(b.shape(), (10, 2));
    let gram = b.transpose() * &b;
    assert!((gram - DMatrix::identity(2, 2)).amax() <= 1e-10);
    assert_eq!(model["config"]["seed"], 4);
    assert!(!model["report"]["objective_trace"].as_array().unwrap().is_empty());
}

#[test]
fn corrupt_csv_exits_2_without_output() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "bad.csv");
    fs::write(&data, "x1,x2,x3,a,r\n1,2,3,0.5,1\n1,oops,3,0.5,1\n").unwrap();
    let out = path(&dir, "m.json");
    let res = dosefind(&["fit", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    assert!(!out.exists());
    assert!(String::from_utf8_lossy(&res.stderr).contains("oops"));
    // Nothing else (e.g. a stray temp file) is left in the directory.
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn missing_data_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let res = dosefind(&["fit", "--data", s(&path(&dir, "nope.csv")), "--out", s(&path(&dir, "m.json"))]);
    assert_eq!(code(&res), 2);
}

#[test]
fn predict_on_training_rows_matches_the_fitted_rule() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "train.csv", "1", "80", "6", "2");
    let x = covariates_of(&data);
    for method in ["direct", "pseudo_direct"] {
        let model = path(&dir, &format!("{method}.json"));
        let doses = path(&dir, &format!("{method}.csv"));
        let mut args = vec!["fit", "--data", s(&data), "--out", s(&model), "--method", method];
        args.extend(QUICK);
        ok(&args);
        // The training CSV carries dose and reward columns; covariates are picked by name.
        ok(&["predict", "--model", s(&model), "--covariates", s(&data), "--out", s(&doses)]);
        let predicted = read_doses(&doses);
        let json = read_json(&model);
        let expected = if method == "direct" {
            serde_json::from_value::<KernelRidgeRule>(json["rule"].clone()).unwrap().recommend_all(&x)
        } else {
            serde_json::from_value::<GridKernelRule>(json["rule"].clone()).unwrap().recommend_all(&x)
        };
        assert_eq!(predicted.len(), 80);
        for (a, b) in predicted.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12, "{method}: {a} vs {b}");
            assert!((0.0..=2.0).contains(a));
        }
    }
}

#[test]
fn predict_positional_columns_empty_input_and_mismatch() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "train.csv", "1", "60", "5", "3");
    let model = path(&dir, "m.json");
    let mut args = vec!["fit", "--data", s(&data), "--out", s(&model), "--method", "pseudo_direct"];
    args.extend(QUICK);
    ok(&args);

    let unnamed = path(&dir, "unnamed.csv");
    fs::write(&unnamed, "c1,c2,c3,c4,c5\n0.1,0.2,0.3,0.4,0.5\n-1,0,1,0,-1\n").unwrap();
    let out = path(&dir, "doses.csv");
    ok(&["predict", "--model", s(&model), "--covariates", s(&unnamed), "--out", s(&out)]);
    assert_eq!(read_doses(&out).len(), 2);

    let empty = path(&dir, "empty.csv");
    fs::write(&empty, "").unwrap();
    let out = path(&dir, "empty_doses.csv");
    ok(&["predict", "--model", s(&model), "--covariates", s(&empty), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap(), "");

    let header_only = path(&dir, "header.csv");
    fs::write(&header_only, "x1,x2,x3,x4,x5\n").unwrap();
    let out = path(&dir, "header_doses.csv");
    ok(&["predict", "--model", s(&model), "--covariates", s(&header_only), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap(), "dose\n");

    let narrow = path(&dir, "narrow.csv");
    fs::write(&narrow, "c1,c2,c3\n1,2,3\n").unwrap();
    let out = path(&dir, "never.csv");
    let res = dosefind(&["predict", "--model", s(&model), "--covariates", s(&narrow), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    assert!(!out.exists());

    let res = dosefind(&["predict", "--model", s(&data), "--covariates", s(&unnamed), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
}

#[test]
fn constant_rewards_give_a_constant_rule() {
    let dir = TempDir::new().unwrap();
    let data = constant_reward_csv(&dir, "flat.csv", 3.0, 0.5);
    let model = path(&dir, "m.json");
    let mut args = vec!["fit", "--data", s(&data), "--out", s(&model), "--method", "pseudo_direct"];
    args.extend(QUICK);
    ok(&args);
    let doses = path(&dir, "d.csv");
    ok(&["predict", "--model", s(&model), "--covariates", s(&data), "--out", s(&doses)]);
    let d = read_doses(&doses);
    assert!(d.iter().all(|v| *v == d[0]), "{d:?}");
}

#[test]
fn evaluate_reports_available_metrics() {
    let dir = TempDir::new().unwrap();
    let train = generate(&dir, "train.csv", "1", "80", "6", "5");
    let model = path(&dir, "m.json");
    let mut args = vec!["fit", "--data", s(&train), "--out", s(&model), "--method", "direct"];
    args.extend(QUICK);
    ok(&args);

    // Constant rewards with unit propensity: the estimate is the constant.
    let flat = constant_reward_csv(&dir, "flat.csv", 2.5, 1.0);
    let flat6 = path(&dir, "flat6.csv");
    {
        // Widen the 5-covariate file to the model's 6 covariates.
        let text = fs::read_to_string(&flat).unwrap();
        let mut out = String::new();
        for (i, line) in text.lines().enumerate() {
            out.push_str(&if i == 0 { "x6,".to_owned() } else { format!("{},", (i % 7) as f64 * 0.3) });
            out.push_str(line);
            out.push('\n');
        }
        fs::write(&flat6, out).unwrap();
    }
    let m = path(&dir, "flat.json");
    ok(&["evaluate", "--model", s(&model), "--data", s(&flat6), "--out", s(&m), "--ipw"]);
    let v = read_json(&m);
    assert!((v["ipw_value"].as_f64().unwrap() - 2.5).abs() <= 1e-12, "{v}");
    assert!(v["dose_distance"].is_null());

    // No propensity, no setting: every field unavailable.
    let bare = path(&dir, "bare.csv");
    ok(&["generate", "--setting", "1", "--n", "50", "--p", "6", "--seed", "6", "--no-propensity", "--out", s(&bare)]);
    let m = path(&dir, "bare.json");
    ok(&["evaluate", "--model", s(&model), "--data", s(&bare), "--out", s(&m)]);
    let v = read_json(&m);
    for (k, val) in v.as_object().unwrap() {
        assert!(val.is_null(), "{k} = {val}");
    }

    let never = path(&dir, "never.json");
    let res = dosefind(&["evaluate", "--model", s(&model), "--data", s(&bare), "--out", s(&never), "--ipw"]);
    assert_eq!(code(&res), 2);
    assert!(!never.exists());

    // With the setting id, oracle metrics appear.
    let test = generate(&dir, "test.csv", "1", "200", "6", "7");
    let m = path(&dir, "oracle.json");
    ok(&["evaluate", "--model", s(&model), "--data", s(&test), "--out", s(&m), "--setting", "1"]);
    let v = read_json(&m);
    for k in ["ipw_value", "mean_reward", "dose_distance", "frobenius", "trace_corr", "canonical_corr"] {
        assert!(v[k].as_f64().is_some_and(f64::is_finite), "{k} missing in {v}");
    }
}

#[test]
fn simulate_is_deterministic_and_rejects_zero_reps() {
    let dir = TempDir::new().unwrap();
    let common = [
        "--setting", "5", "--p", "5", "--n", "50", "--n-test", "60", "--method", "pseudo_direct", "--seed", "42",
        "--restarts", "1", "--max-iters", "3",
    ];
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = path(&dir, run);
        let mut args = vec!["simulate", "--out", s(&out), "--reps", "2"];
        args.extend(common);
        let res = ok(&args);
        assert!(String::from_utf8_lossy(&res.stdout).contains("trace_corr"));
        outputs.push(out);
    }
    for f in ["results.csv", "summary.json", "config.txt"] {
        assert_eq!(fs::read(outputs[0].join(f)).unwrap(), fs::read(outputs[1].join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(outputs[0].join("results.csv")).unwrap();
    assert!(csv.starts_with("setting,rep,seed,method"));
    let summary = read_json(&outputs[0].join("summary.json"));
    assert_eq!(summary["aggregate"]["succeeded"], 2);

    let out = path(&dir, "zero");
    let mut args = vec!["simulate", "--out", s(&out), "--reps", "0"];
    args.extend(common);
    assert_eq!(code(&dosefind(&args)), 2);
    assert!(!out.exists());

    assert_eq!(code(&dosefind(&["simulate", "--out", s(&out)])), 2, "setting is required");
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "train.csv", "1", "60", "5", "8");
    let cfg = path(&dir, "run.conf");
    fs::write(&cfg, "# quick fit\nmethod = pseudo_direct\nseed = 11\nrestarts = 1\nmax_iters = 2\nq = 6\n").unwrap();
    let model = path(&dir, "m.json");
    ok(&["fit", "--config", s(&cfg), "--seed", "12", "--data", s(&data), "--out", s(&model)]);
    let json = read_json(&model);
    assert_eq!(json["config"]["seed"], 12);
    assert_eq!(json["config"]["q"], 6);
    assert_eq!(json["method"], "pseudo_direct");
    assert_eq!(json["rule"]["grid"]["points"].as_array().unwrap().len(), 6);

    fs::write(&cfg, "colour = blue\n").unwrap();
    let res = dosefind(&["fit", "--config", s(&cfg), "--data", s(&data), "--out", s(&model)]);
    assert_eq!(code(&res), 2);
    let res = dosefind(&["fit", "--method", "lasso", "--data", s(&data), "--out", s(&model)]);
    assert_eq!(code(&res), 2);
}

#[test]
fn generate_round_trips_through_fit_schema() {
    let dir = TempDir::new().unwrap();
    let a = generate(&dir, "a.csv", "3", "30", "7", "1");
    let b = generate(&dir, "b.csv", "3", "30", "7", "1");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x1,x2,x3,x4,x5,x6,x7,a,r,prop");
    assert_eq!(text.lines().count(), 31);
    assert_eq!(code(&dosefind(&["generate", "--setting", "9", "--out", s(&path(&dir, "c.csv"))])), 2);
}
