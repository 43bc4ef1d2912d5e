use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use minc_core::dataset::{make_block_graph, BlockGraphParams};
use minc_core::objective::MincConfig;
use minc_core::trainer::{metrics_csv, train, TrainConfig};
use minc_core::Dataset;
use tempfile::TempDir;

fn minc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = minc(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_data(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["gen-data", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("dataset.txt")
}

fn json_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn gen_data_is_reproducible_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let a = gen_data(&tmp.path().join("a"), &["--classes", "4", "--per-class", "8", "--seed", "7"]);
    let b = gen_data(&tmp.path().join("b"), &["--classes", "4", "--per-class", "8", "--seed", "7"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let loaded = Dataset::from_text(&fs::read_to_string(&a).unwrap()).unwrap();
    let fresh = Dataset::generate(&BlockGraphParams::default()).unwrap();
    assert_eq!(loaded, fresh);

    let text = fs::read_to_string(tmp.path().join("a/manifest.toml")).unwrap();
    let manifest: toml::Value = toml::from_str(&text).unwrap();
    let recorded = manifest["dataset"]["sha256"].as_str().unwrap();
    let actual = hex::encode(<sha2::Sha256 as sha2::Digest>::digest(fs::read(&a).unwrap()));
    assert_eq!(recorded, actual);
}

#[test]
fn gen_data_prints_block_spectrum() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok(&["gen-data", "--out", p(tmp.path()), "--top", "5"]);
    let values: Vec<f64> = stdout.lines().skip(2).map(|l| l.trim().parse().unwrap()).collect();
    let expected = [1.0, 0.9 - 0.1 / 3.0, 0.9 - 0.1 / 3.0, 0.9 - 0.1 / 3.0, 0.0];
    for (v, e) in values.iter().zip(expected) {
        assert!((v - e).abs() < 1e-12, "{values:?}");
    }
}

#[test]
fn degenerate_generator_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = minc(&["gen-data", "--classes", "1", "--per-class", "8", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(minc(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(minc(&["nonsense"]).status.code(), Some(1));
    assert_eq!(minc(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_with_one() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let out = minc(&["train", "--data", p(&data), "--out", p(&tmp.path().join("run")), "--beta", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "stepz = 4\n").unwrap();
    let out = minc(&["train", "--data", p(&data), "--out", p(&tmp.path().join("run")), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn spectral_run_writes_no_lambda_or_target() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--loss", "spectral", "--steps", "20", "--eval-every", "10"]);
    assert!(run.join("metrics.csv").is_file());
    assert!(run.join("online.txt").is_file());
    assert!(!run.join("lambda.txt").exists());
    assert!(!run.join("target.txt").exists());

    ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "20", "--eval-every", "10"]);
    assert!(run.join("lambda.txt").is_file());
    assert!(run.join("target.txt").is_file());
}

#[test]
fn config_file_and_flags_layer_over_defaults() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, "steps = 30\neval_every = 10\n[minc]\nbeta = 0.5\n").unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg), "--alpha", "1.5"]);
    let manifest: toml::Value = toml::from_str(&fs::read_to_string(run.join("manifest.toml")).unwrap()).unwrap();
    let c = &manifest["config"];
    assert_eq!(c["steps"].as_integer(), Some(30));
    assert_eq!(c["minc"]["beta"].as_float(), Some(0.5));
    assert_eq!(c["minc"]["alpha"].as_float(), Some(1.5));
    assert_eq!(c["minc"]["gamma"].as_float(), Some(0.996));
    assert_eq!(c["batch_size"].as_integer(), Some(32));
    let rows = fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 4);
}

#[test]
fn rerun_from_manifest_reproduces_metrics() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    ok(&["train", "--data", p(&data), "--out", p(&first), "--steps", "60", "--eval-every", "20", "--seed", "3"]);
    ok(&["train", "--from-manifest", p(&first.join("manifest.toml")), "--out", p(&second)]);
    assert_eq!(fs::read(first.join("metrics.csv")).unwrap(), fs::read(second.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(first.join("online.txt")).unwrap(), fs::read(second.join("online.txt")).unwrap());
}

#[test]
fn cli_run_matches_library_collapse_ablation_record() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--loss", "minc", "--no-gha", "--no-target", "--beta", "0.8",
        "--steps", "50", "--eval-every", "25",
    ]);
    let (joint, features) = make_block_graph(&BlockGraphParams::default()).unwrap();
    let cfg = TrainConfig {
        minc: MincConfig { use_lt: false, use_target: false, beta: 0.8, ..MincConfig::default() },
        steps: 50,
        eval_every: 25,
        ..TrainConfig::default()
    };
    let lib = train(&cfg, &joint, &features).unwrap();
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap(), metrics_csv(&lib.records));
    assert!(!run.join("target.txt").exists());
}

#[test]
fn training_does_not_touch_the_dataset() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let before = fs::read(&data).unwrap();
    ok(&["train", "--data", p(&data), "--out", p(&tmp.path().join("run")), "--steps", "5", "--eval-every", "5"]);
    assert_eq!(before, fs::read(&data).unwrap());
}

#[test]
fn changed_dataset_blocks_manifest_rerun() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "5", "--eval-every", "5"]);
    let mut text = fs::read_to_string(&data).unwrap();
    text.push('\n');
    fs::write(&data, text).unwrap();
    let out = minc(&["train", "--from-manifest", p(&run.join("manifest.toml")), "--out", p(&tmp.path().join("again"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn non_finite_training_exits_with_two_and_keeps_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let run = tmp.path().join("run");
    let out = minc(&[
        "train", "--data", p(&data), "--out", p(&run), "--normalize", "false", "--learning-rate", "1e6",
        "--inner-scale", "10", "--steps", "200", "--eval-every", "1",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let online = fs::read_to_string(run.join("online.txt")).unwrap();
    let model = minc_core::EmbeddingModel::from_text(&online).unwrap();
    assert!(model.params().iter().all(|v| v.is_finite()));
    let manifest = fs::read_to_string(run.join("manifest.toml")).unwrap();
    assert!(manifest.contains("aborted"));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    assert!(!csv.contains("NaN") && !csv.contains("inf"));
}

#[test]
fn oracle_matches_dense_solver_on_block_graph() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let out = tmp.path().join("oracle");
    ok(&["oracle", "--data", p(&data), "--out", p(&out), "--dim", "4"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    let angles = report["principal_angles"].as_array().unwrap();
    assert_eq!(angles.len(), 4);
    assert!(angles.iter().all(|a| a.as_f64().unwrap() <= 1e-6));
    let oracle = report["oracle_eigenvalues"].as_array().unwrap();
    let dense = report["dense_eigenvalues"].as_array().unwrap();
    for (a, b) in oracle.iter().zip(dense) {
        assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-8);
    }
}

#[test]
fn oracle_on_independence_graph_reports_one_eigenvalue() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &["--intra-mass", "0.25"]);
    let out = tmp.path().join("oracle");
    ok(&["oracle", "--data", p(&data), "--out", p(&out), "--dim", "3"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(report["nontrivial"], 1);
    let eig: Vec<f64> = report["oracle_eigenvalues"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((eig[0] - 1.0).abs() < 1e-9);
    assert!(eig[1..].iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn oracle_is_deterministic_and_reports_non_convergence() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["oracle", "--data", p(&data), "--out", p(&a), "--seed", "5"]);
    ok(&["oracle", "--data", p(&data), "--out", p(&b), "--seed", "5"]);
    assert_eq!(fs::read(a.join("oracle.json")).unwrap(), fs::read(b.join("oracle.json")).unwrap());

    let out = minc(&["oracle", "--data", p(&data), "--out", p(&tmp.path().join("c")), "--max-iter", "2"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("residual"));
}

#[test]
fn eval_is_repeatable_and_appends() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "300", "--eval-every", "100"]);
    let first = ok(&["eval", "--out", p(&run)]);
    let second = ok(&["eval", "--out", p(&run)]);
    assert_eq!(first, second);
    let records = json_lines(&run.join("eval.jsonl"));
    assert_eq!(records.len(), 2);
    let r = &records[0];
    for key in ["train_accuracy", "holdout_accuracy", "alignment", "rank_ratio", "mean_pairwise_cos"] {
        assert!(r[key].is_f64(), "{key}");
    }
    let last = fs::read_to_string(run.join("metrics.csv")).unwrap().lines().last().unwrap().to_string();
    let angle: f64 = last.split(',').nth(4).unwrap().parse().unwrap();
    assert!((r["alignment"].as_f64().unwrap() - angle).abs() < 1e-12);
}

#[test]
fn eval_of_random_encoder_on_uninformative_features_is_near_chance() {
    let tmp = TempDir::new().unwrap();
    let mut holdout = 0.0;
    let seeds = 5;
    for seed in 0..seeds {
        let s = seed.to_string();
        let data = gen_data(&tmp.path().join(format!("d{seed}")), &["--noise", "10", "--seed", &s]);
        let run = tmp.path().join(format!("r{seed}"));
        ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "1", "--learning-rate", "0", "--seed", &s]);
        ok(&["eval", "--out", p(&run)]);
        let r = &json_lines(&run.join("eval.jsonl"))[0];
        assert!(r["alignment"].as_f64().unwrap() > 1.0, "{r}");
        holdout += r["holdout_accuracy"].as_f64().unwrap();
    }
    let mean = holdout / seeds as f64;
    let sigma = (0.25f64 * 0.75 / 8.0).sqrt() / (seeds as f64).sqrt();
    assert!((mean - 0.25).abs() <= 3.0 * sigma, "mean holdout {mean}");
}

#[test]
fn eval_without_artifacts_fails() {
    let tmp = TempDir::new().unwrap();
    assert_ne!(minc(&["eval", "--out", p(tmp.path())]).status.code(), Some(0));
    let data = gen_data(&tmp.path().join("data"), &[]);
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "5", "--eval-every", "5"]);
    fs::remove_file(run.join("online.txt")).unwrap();
    assert_eq!(minc(&["eval", "--out", p(&run)]).status.code(), Some(1));
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let out = tmp.path().join("ablate");
    ok(&["ablate", "--data", p(&data), "--out", p(&out), "--steps", "4", "--eval-every", "4"]);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 4 * 3);
    assert!(out.join("manifest.toml").is_file());
}

#[test]
fn every_output_directory_has_one_manifest() {
    let tmp = TempDir::new().unwrap();
    let data = gen_data(&tmp.path().join("data"), &[]);
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "5", "--eval-every", "5"]);
    ok(&["eval", "--out", p(&run)]);
    for dir in [tmp.path().join("data"), run] {
        let manifests = fs::read_dir(&dir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".toml"))
            .count();
        assert_eq!(manifests, 1, "{}", dir.display());
    }
}
