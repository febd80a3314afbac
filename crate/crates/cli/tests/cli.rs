use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;
use videns_cli::provenance::strip_header;
use videns_core::data::{save_labels, save_predictions};
use videns_core::{EnsembleWeights, LabelSet, PredictionSet};

fn videns(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_videns"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) {
    let out = videns(args);
    assert_eq!(code(&out), 0, "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Labels with example `i` positive for class `i % c`, and a prediction file
/// that scores the true class 0.9 and everything else 0.1.
fn perfect_pair(dir: &Path, n: usize, c: usize) {
    let positives = (0..n).map(|i| vec![(i % c) as u32]).collect();
    let y = LabelSet::new(ids("e", n), c, positives).unwrap();
    save_labels(&y, &dir.join("labels.csv")).unwrap();
    for (name, flip) in [("good", false), ("bad", true)] {
        let scores = (0..n * c)
            .map(|k| if (k % c == (k / c) % c) != flip { 0.9 } else { 0.1 })
            .collect();
        let p = PredictionSet::new(name, ids("e", n), c, scores).unwrap();
        save_predictions(&p, &dir.join(format!("{name}.preds"))).unwrap();
    }
}

fn small_synth(seed: u64, members: usize) -> Value {
    let family: Vec<Value> = (0..members)
        .map(|i| json!({"name": format!("m{i}"), "feature_fraction": 0.7 - 0.15 * i as f64}))
        .collect();
    json!({
        "schema_version": 1,
        "seed": seed,
        "output_dir": "out",
        "predictions": (0..members).map(|i| format!("out/predictions/m{i}.preds")).collect::<Vec<_>>(),
        "labels": "out/eval_labels.csv",
        "synth": {
            "n_train": 600, "n_examples": 400, "n_classes": 20, "feature_dim": 12, "n_frames": [2, 5],
            "member_arch": {"hidden_dims": [16]},
            "member_train": {"epochs": 5, "batch_size": 32, "learning_rate": 0.005,
                             "output_bias_from_prior": true, "log_gap": false},
            "family": family
        },
        "train": {"hidden_dims": [16], "hyperparameters": {"epochs": 3, "batch_size": 32, "learning_rate": 0.005}},
        "ensemble": {"hyperparameters": {"epochs": 20, "batch_size": 50, "learning_rate": 0.01}},
        "eval": {"report_classes": 10}
    })
}

fn synth_dir(seed: u64, members: usize) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_synth(seed, members));
    ok(&["synth", "-c", cfg.to_str().unwrap()]);
    (dir, cfg)
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&read(path)).unwrap()
}

#[test]
fn perfect_predictions_score_one_and_delta_a_is_symmetric() {
    let dir = tempfile::tempdir().unwrap();
    perfect_pair(dir.path(), 12, 4);
    let cfg = write_config(
        dir.path(),
        &json!({"schema_version": 1, "seed": 1, "output_dir": "out",
                "predictions": ["good.preds", "bad.preds"], "labels": "labels.csv"}),
    );
    ok(&["eval", "-c", cfg.to_str().unwrap()]);
    let out = dir.path().join("out");
    let gap = read(&out.join("gap.csv"));
    assert!(gap.starts_with("# videns "));
    assert!(strip_header(&gap).contains("good,1.0000000000"), "{gap}");

    let delta = read(&out.join("delta_a.csv"));
    let rows: Vec<Vec<String>> = strip_header(&delta)
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(str::to_owned).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].len(), 2);
    assert_eq!(rows[0][1], rows[1][0]);

    let report = json_file(&out.join("eval_report.json"));
    assert_eq!(report["provenance"]["seed"], 1);
    assert_eq!(report["class_accuracy"]["model_names"], json!(["good", "bad"]));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&videns(&["frobnicate"])), 2);
    assert_eq!(code(&videns(&["eval"])), 2);
    assert_eq!(code(&videns(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&videns(&["eval", "-c", dir.path().join("missing.json").to_str().unwrap()])), 2);

    let cfg = write_config(dir.path(), &json!({"schema_version": 1, "seed": 1}));
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&videns(&["ensemble", "fit", "-c", c, "--method", "boosting"])), 2);
    assert_eq!(code(&videns(&["eval", "-c", c])), 2, "no predictions listed");
    assert_eq!(code(&videns(&["--threads", "0", "eval", "-c", c])), 2);
    let no_seed = write_config(dir.path(), &json!({"schema_version": 1}));
    assert_eq!(code(&videns(&["eval", "-c", no_seed.to_str().unwrap()])), 2);
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    perfect_pair(dir.path(), 6, 3);
    let y = LabelSet::new(ids("x", 6), 3, vec![vec![]; 6]).unwrap();
    save_labels(&y, &dir.path().join("other.csv")).unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({"schema_version": 1, "seed": 1, "output_dir": "out",
                "predictions": ["good.preds", "bad.preds"], "labels": "other.csv"}),
    );
    let out = videns(&["eval", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("misaligned"));
    assert_eq!(code(&videns(&["eval", "-c", cfg.to_str().unwrap(), "-p", "nope.preds"])), 3);
}

#[test]
fn unattainable_diversity_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_synth(2, 2);
    cfg["synth"]["max_correlation"] = json!(-1.0);
    cfg["synth"]["max_attempts"] = json!(1);
    let path = write_config(dir.path(), &cfg);
    assert_eq!(code(&videns(&["synth", "-c", path.to_str().unwrap()])), 4);
}

#[test]
fn average_fit_gives_uniform_weights() {
    let (dir, cfg) = synth_dir(4, 3);
    let c = cfg.to_str().unwrap();
    ok(&["ensemble", "fit", "-c", c, "--method", "average"]);
    let w = EnsembleWeights::load(&dir.path().join("out/weights.json")).unwrap();
    assert_eq!(w.alpha, vec![1.0 / 3.0; 3]);
    assert!(json_file(&dir.path().join("out/fit_report.json")).get("fit_report").is_none());
}

#[test]
fn correlation_fit_on_three_models_merges_twice() {
    let (dir, cfg) = synth_dir(5, 3);
    ok(&["ensemble", "fit", "-c", cfg.to_str().unwrap(), "--method", "correlation"]);
    let report = json_file(&dir.path().join("out/fit_report.json"));
    assert_eq!(report["trace"]["steps"].as_array().unwrap().len(), 2);
    assert_eq!(report["trace"]["order"].as_array().unwrap().len(), 3);
}

#[test]
fn moe_single_is_not_worse_than_averaging_and_apply_reproduces_its_gap() {
    let (dir, cfg) = synth_dir(6, 3);
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    ok(&["ensemble", "fit", "-c", c, "--method", "average", "--weights", out.join("avg.json").to_str().unwrap()]);
    let avg = json_file(&out.join("fit_report.json"))["heldout_gap"].as_f64().unwrap();
    ok(&["ensemble", "fit", "-c", c, "--method", "moe-single"]);
    let fit = json_file(&out.join("fit_report.json"));
    let moe = fit["heldout_gap"].as_f64().unwrap();
    assert!(moe >= avg - 0.001, "moe {moe} vs average {avg}");
    assert!(out.join("fit_epochs.csv").exists());

    ok(&["ensemble", "apply", "-c", c, "--kaggle"]);
    let ens = out.join("ensemble.preds");
    ok(&["eval", "-c", c, "-p", ens.to_str().unwrap(), "--subset", "heldout", "--output-dir", out.join("ens").to_str().unwrap()]);
    let gap: f64 = strip_header(&read(&out.join("ens/gap.csv")))
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((gap - moe).abs() < 1e-9, "apply+eval {gap} vs fit report {moe}");
    let kaggle = read(&out.join("ensemble_kaggle.csv"));
    assert!(kaggle.starts_with("VideoId,LabelConfidencePairs\n"));
    assert_eq!(kaggle.lines().count(), 401);

    ok(&["report", "-c", c, "--weights", out.join("avg.json").to_str().unwrap(), out.join("weights.json").to_str().unwrap()]);
    let summary = read(&out.join("report.csv"));
    assert_eq!(strip_header(&summary).lines().count(), 1 + 3 + 1 + 2);
}

#[test]
fn apply_rejects_a_mismatched_model_list() {
    let (dir, cfg) = synth_dir(7, 3);
    let c = cfg.to_str().unwrap();
    ok(&["ensemble", "fit", "-c", c, "--method", "average"]);
    let p = |m: &str| dir.path().join(format!("out/predictions/{m}.preds")).to_str().unwrap().to_owned();
    let out = videns(&["ensemble", "apply", "-c", c, "-p", &p("m1"), &p("m0"), &p("m2")]);
    assert_eq!(code(&out), 3);
}

#[test]
fn lambda_on_a_non_dual_method_only_warns() {
    let (_dir, cfg) = synth_dir(8, 2);
    let out = Command::new(env!("CARGO_BIN_EXE_videns"))
        .args(["ensemble", "fit", "-c", cfg.to_str().unwrap(), "--method", "moe-single", "--lambda", "3"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda only affects moe-dual"));
}

#[test]
fn fitting_on_base_training_examples_is_refused_unless_allowed() {
    let (dir, cfg) = synth_dir(9, 2);
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    // Predict on the training features so the fit data overlaps.
    let mut v = json_file(&cfg);
    v["train"]["predict_features"] = json!("out/train_features.feats");
    v["train"]["model_name"] = json!("seen");
    fs::write(&cfg, v.to_string()).unwrap();
    ok(&["train", "-c", c]);
    let seen = out.join("predictions/seen.preds");
    let labels = out.join("train_labels.csv");
    let args = ["ensemble", "fit", "-c", c, "-p", seen.to_str().unwrap(), seen.to_str().unwrap(), "--labels", labels.to_str().unwrap()];
    assert_eq!(code(&videns(&args)), 3);
    let mut allowed = args.to_vec();
    allowed.push("--allow-overlap");
    ok(&allowed);
}

#[test]
fn block_sweep_writes_one_model_per_depth_and_a_comparison() {
    let (dir, cfg) = synth_dir(10, 2);
    ok(&["--threads", "1", "train", "-c", cfg.to_str().unwrap(), "--blocks-sweep", "1,2,3"]);
    let out = dir.path().join("out");
    for b in 1..=3 {
        assert!(out.join(format!("models/toynet_b{b}.params")).exists());
        assert!(out.join(format!("predictions/toynet_b{b}.preds")).exists());
    }
    let table = read(&out.join("blocks_comparison.csv"));
    let rows: Vec<&str> = strip_header(&table).lines().collect();
    assert_eq!(rows[0], "model,n_resnet_blocks,n_params,final_loss,train_gap,heldout_gap");
    assert_eq!(rows.len(), 4);
}

#[test]
fn diversity_of_identical_models_is_zero_entropy() {
    let (dir, cfg) = synth_dir(11, 2);
    let m0 = dir.path().join("out/predictions/m0.preds");
    let m0 = m0.to_str().unwrap();
    ok(&["diversity", "-c", cfg.to_str().unwrap(), "-p", m0, m0]);
    let sweep = read(&dir.path().join("out/diversity_entropy.csv"));
    let rows: Vec<&str> = strip_header(&sweep).lines().skip(1).collect();
    assert_eq!(rows.len(), 10, "top-10 classes, one size each");
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[1], "2");
        assert_eq!(&f[3..6], &["0.0000000000"; 3]);
    }
    let many: Vec<String> = (0..21).map(|_| m0.to_owned()).collect();
    let mut args = vec!["diversity", "-c", cfg.to_str().unwrap(), "-p"];
    args.extend(many.iter().map(String::as_str));
    assert_eq!(code(&videns(&args)), 2);
}

#[test]
fn same_config_twice_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_synth(12, 2));
    let c = cfg.to_str().unwrap();
    let run = || {
        ok(&["synth", "-c", c]);
        ok(&["ensemble", "fit", "-c", c, "--method", "moe-perclass"]);
        ok(&["eval", "-c", c]);
        ["family_report.json", "fit_report.json", "fit_epochs.csv", "eval_report.json", "gap.csv", "delta_a.csv", "weights.json"]
            .map(|f| fs::read(dir.path().join("out").join(f)).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn flag_overrides_change_the_provenance_hash() {
    let dir = tempfile::tempdir().unwrap();
    perfect_pair(dir.path(), 6, 3);
    let cfg = write_config(
        dir.path(),
        &json!({"schema_version": 1, "seed": 1, "output_dir": "out",
                "predictions": ["good.preds", "bad.preds"], "labels": "labels.csv"}),
    );
    let c = cfg.to_str().unwrap();
    ok(&["eval", "-c", c]);
    let plain = read(&dir.path().join("out/gap.csv"));
    ok(&["eval", "-c", c, "--k", "2"]);
    let overridden = read(&dir.path().join("out/gap.csv"));
    assert_ne!(plain.lines().next(), overridden.lines().next());
    ok(&["eval", "-c", c, "--seed", "77"]);
    assert!(read(&dir.path().join("out/gap.csv")).lines().next().unwrap().ends_with("seed=77"));
}
