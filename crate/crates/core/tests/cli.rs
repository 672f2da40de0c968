use std::fs;
use std::path::Path;
use std::io::{BufRead, BufReader};
use std::process::{Command, Output, Stdio};

use ccr::cli::RunConfig;
use ccr::harness::SimulationPlan;
use ccr::datamodel::{load_dataset, read_vector, save_dataset, Dataset, GroundTruth};
use nalgebra::DVector;
use serde_json::Value;

fn ccr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run ccr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("JSON on stdout")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ccr(dir.path(), &["--help"])), 0);
    assert_eq!(code(&ccr(dir.path(), &["sweep", "--help"])), 0);
    assert_eq!(code(&ccr(dir.path(), &["--no-such-flag"])), 2);
    assert_eq!(code(&ccr(dir.path(), &["estimate"])), 2);
    assert_eq!(code(&ccr(dir.path(), &[])), 2);
}

#[test]
fn generate_defaults_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let out = ccr(dir.path(), &["generate", "--out", "d.ccrd"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("delta not set"));
    let d = load_dataset::<f64>(dir.path().join("d.ccrd")).unwrap();
    assert_eq!((d.n(), d.p(), d.p_w()), (300, 150, 100));
    assert!(d.truth.is_some());

    fs::write(dir.path().join("neg.json"), r#"{"dgp": {"n": -5}}"#).unwrap();
    let out = ccr(dir.path(), &["--config", "neg.json", "generate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dgp.n"), "{}", stderr(&out));

    fs::write(dir.path().join("typo.json"), r#"{"dgp": {"detla": 0.5}}"#).unwrap();
    let out = ccr(dir.path(), &["--config", "typo.json", "generate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("detla"));

    let out = ccr(dir.path(), &["--config", "absent.json", "generate"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn generate_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.ccrd", "b.ccrd"] {
        let out = ccr(dir.path(), &["--seed", "7", "generate", "--delta", "0.05", "--out", name]);
        assert_eq!(code(&out), 0);
    }
    let out = ccr(dir.path(), &["--seed", "8", "generate", "--delta", "0.05", "--out", "c.ccrd"]);
    assert_eq!(code(&out), 0);
    let a = fs::read(dir.path().join("a.ccrd")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.ccrd")).unwrap());
    assert_ne!(a, fs::read(dir.path().join("c.ccrd")).unwrap());
}

#[test]
fn estimate_with_and_without_truth() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ccr(dir.path(), &["generate", "--delta", "0.65", "--out", "d.ccrd"])), 0);
    let out = ccr(
        dir.path(),
        &["estimate", "d.ccrd", "--estimator", "cca", "--k", "8", "--ell", "10", "--out", "b.ccrv"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = stdout_json(&out);
    for key in ["mse", "term_row", "term_null", "term_perp"] {
        assert!(report[key].is_f64(), "{key} missing: {report}");
    }
    let beta = read_vector::<f64>(dir.path().join("b.ccrv")).unwrap();
    assert_eq!(beta.len(), 150);
    let on_disk: Value = serde_json::from_slice(&fs::read(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(on_disk, report);

    let d = load_dataset::<f64>(dir.path().join("d.ccrd")).unwrap();
    let bare = Dataset::new(d.y.clone(), d.z_x.clone(), d.z_w.clone(), None).unwrap();
    save_dataset(&bare, dir.path().join("bare.ccrd")).unwrap();
    let out = ccr(dir.path(), &["estimate", "bare.ccrd", "--estimator", "pca", "--out", "bare.ccrv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = stdout_json(&out);
    for key in ["mse", "term_row", "term_null", "term_perp"] {
        assert!(report[key].is_null(), "{key} should be null: {report}");
    }
    assert_eq!(read_vector::<f64>(dir.path().join("bare.ccrv")).unwrap().len(), 150);

    assert_eq!(code(&ccr(dir.path(), &["estimate", "d.ccrd", "--k", "0"])), 2);
    assert_eq!(code(&ccr(dir.path(), &["estimate", "d.ccrd", "--estimator", "lasso"])), 2);
    assert_eq!(code(&ccr(dir.path(), &["estimate", "bare.ccrd", "--estimator", "oracle"])), 2);
}

#[test]
fn diagnose_reports() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ccr(dir.path(), &["generate", "--delta", "0.001", "--out", "d.ccrd"])), 0);
    let out = ccr(dir.path(), &["diagnose", "d.ccrd", "--k", "8", "--ell", "10"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = stdout_json(&out);
    for c in r["key_quantities"]["overlap_cosines_true"].as_array().unwrap() {
        assert!(c.as_f64().unwrap() < 0.01, "{c}");
    }
    assert_eq!(r["empirical"]["overlap_cosines"].as_array().unwrap().len(), 8);
    assert!(r["recommendation"].is_string());
    assert!(r["regime"].is_string());
    assert!(r["key_quantities"]["nsr_x"].is_f64());

    // With independent noise the empirical cosines track the weak alignment.
    fs::write(dir.path().join("indep.json"), r#"{"dgp": {"rho": 0.0, "delta": 0.001}}"#).unwrap();
    assert_eq!(code(&ccr(dir.path(), &["--config", "indep.json", "generate", "--out", "i.ccrd"])), 0);
    let r = stdout_json(&ccr(dir.path(), &["diagnose", "i.ccrd"]));
    let lead = r["empirical"]["overlap_cosines"][0].as_f64().unwrap();
    assert!(lead < 0.4, "leading empirical cosine {lead}");

    // Clean data instrumenting itself: W = X, no noise.
    let d = load_dataset::<f64>(dir.path().join("d.ccrd")).unwrap();
    let t = d.truth.as_ref().unwrap();
    let x = t.x.clone();
    let y = &x * &t.beta;
    let truth = GroundTruth::new(x.clone(), x.clone(), t.beta.clone(), DVector::zeros(x.nrows()), &x, &x).unwrap();
    let clean = Dataset::new(y, x.clone(), x.clone(), Some(truth)).unwrap();
    save_dataset(&clean, dir.path().join("clean.ccrd")).unwrap();
    let out = ccr(dir.path(), &["diagnose", "clean.ccrd", "--k", "8", "--ell", "8", "--sigma-bar-sq", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = stdout_json(&out);
    for c in r["empirical"]["overlap_cosines"].as_array().unwrap() {
        assert!((c.as_f64().unwrap() - 1.0).abs() < 1e-8, "{c}");
    }
    assert!(r["regime"].is_string() && r["thresholds"]["t_hi"].is_f64());

    let bare = Dataset::new(d.y.clone(), d.z_x.clone(), d.z_w.clone(), None).unwrap();
    save_dataset(&bare, dir.path().join("bare.ccrd")).unwrap();
    let out = ccr(dir.path(), &["diagnose", "bare.ccrd"]);
    assert_eq!(code(&out), 0);
    let r = stdout_json(&out);
    for key in ["key_quantities", "regime", "recommendation", "lower_bound", "wedin"] {
        assert!(r[key].is_null(), "{key}");
    }
    assert!(r["empirical"]["overlap_cosines"].is_array());
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"dgp": {"n": 400, "delta": 0.05}, "sweep": {"reps": 3, "n_grid": [200]}}"#,
    )
    .unwrap();
    let out = ccr(dir.path(), &["--config", "c.json", "--seed", "11", "--workers", "2", "--print-config"]);
    assert_eq!(code(&out), 0);
    let (cfg, has_delta) = RunConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert!(has_delta);
    assert_eq!((cfg.dgp.n, cfg.dgp.base_seed, cfg.sweep.workers, cfg.sweep.reps), (400, 11, 2, 3));
    fs::write(dir.path().join("echo.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let again = ccr(dir.path(), &["--config", "echo.json", "--print-config"]);
    let (cfg2, _) = RunConfig::from_json(&String::from_utf8(again.stdout).unwrap()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(cfg2.plan(), cfg.plan());
}

const SMALL_SWEEP: &str = r#"{
  "dgp": {"k": 3, "ell": 4},
  "sweep": {
    "n_grid": [60, 90],
    "delta_grid": [0.05, 0.65],
    "reps": 4,
    "estimators": [
      {"kind": "naive"}, {"kind": "pca", "k": 3, "ell": 4}, {"kind": "cca", "k": 3, "ell": 4}
    ]
  }
}"#;

#[test]
fn sweep_summarize_plot_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("s.json"), SMALL_SWEEP).unwrap();
    let out = ccr(p, &["--config", "s.json", "--workers", "2", "sweep", "--out", "full"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("[4/4]"));
    let full_rep = fs::read(p.join("full/replications.csv")).unwrap();
    let full_sum = fs::read(p.join("full/summary.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&full_rep).lines().count(), 1 + 4 * 4 * 3);

    // Simulate a run killed after its second cell: keep two cells in the manifest.
    assert_eq!(code(&ccr(p, &["--config", "s.json", "sweep", "--out", "part"])), 0);
    let manifest_path = p.join("part/checkpoint/manifest.json");
    let mut manifest: Value = serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    let completed = manifest["completed"].as_array_mut().unwrap();
    let dropped: Vec<String> = completed.drain(2..).map(|v| v.as_str().unwrap().to_string()).collect();
    fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
    for key in &dropped {
        fs::remove_file(p.join(format!("part/checkpoint/cells/{key}.csv"))).unwrap();
    }
    fs::remove_file(p.join("part/replications.csv")).unwrap();
    fs::remove_file(p.join("part/summary.csv")).unwrap();
    let out = ccr(p, &["--config", "s.json", "--workers", "1", "--resume", "sweep", "--out", "part"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(p.join("part/replications.csv")).unwrap(), full_rep);
    assert_eq!(fs::read(p.join("part/summary.csv")).unwrap(), full_sum);

    let out = ccr(p, &["summarize", "full/replications.csv", "--out", "again.csv"]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(p.join("again.csv")).unwrap(), full_sum);

    for name in ["a.svg", "b.svg"] {
        assert_eq!(code(&ccr(p, &["plot", "full/summary.csv", "--out", name])), 0);
    }
    let svg = fs::read_to_string(p.join("a.svg")).unwrap();
    assert_eq!(svg, fs::read_to_string(p.join("b.svg")).unwrap());
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<g id=\"panel-").count(), 2);

    fs::write(p.join("bad.csv"), "regime,n\nmoderate,60\n").unwrap();
    assert_eq!(code(&ccr(p, &["plot", "bad.csv", "--out", "x.svg"])), 3);
}

#[test]
fn full_scale_sweep_warns() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("full.json"),
        r#"{"sweep": {"n_grid": [300, 500, 1000, 2000, 5000], "delta_grid": [0.001, 0.05, 0.65],
            "regimes": ["moderate", "high"], "reps": 250}}"#,
    )
    .unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_ccr"))
        .args(["--config", "full.json", "sweep", "--out", "full"])
        .current_dir(dir.path())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut first).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(first.contains("30000 rows") && first.contains("hours"), "{first}");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let full = RunConfig::from_json(&fs::read_to_string(root.join("full.json")).unwrap()).unwrap().0;
    assert_eq!(full.plan().row_count(), 30000);
    let desk = RunConfig::from_json(&fs::read_to_string(root.join("desk.json")).unwrap()).unwrap().0;
    assert_eq!(desk.plan(), SimulationPlan::default());
}
