use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cpsets::{ConformalModel, Method, MethodSpec};
use tempfile::TempDir;

fn cpsets(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpsets"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Four rows whose deterministic APS scores are 0.2, 0.5, 0.7 and 0.9: the
/// label is always the top class and carries that much mass.
fn calibration_fixture(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("cal.csv");
    let rows = [
        "0.2,0.1,0.1,0.1,0.1,0.1,0.1,0.1,0.1,0,0",
        "0.5,0.1,0.1,0.1,0.1,0.1,0,0,0,0,0",
        "0.7,0.1,0.1,0.1,0,0,0,0,0,0,0",
        "0.9,0.1,0,0,0,0,0,0,0,0,0",
    ];
    let text = format!("scores,K=10,kind=probabilities\n{}\n", rows.join("\n"));
    fs::write(&path, text).unwrap();
    path
}

fn write_model(dir: &Path, tau_hat: f64, classes: usize) -> std::path::PathBuf {
    let model = ConformalModel {
        spec: MethodSpec::new(Method::Aps, 0.1).unwrap(),
        tau_hat,
        n_cal: 100,
        seed: 3,
        classes,
        k_star: None,
        mix_prob: None,
        temperature: None,
    };
    let path = dir.join("model.toml");
    fs::write(&path, model.to_toml()).unwrap();
    path
}

#[test]
fn calibrate_writes_order_statistic_threshold() {
    let dir = TempDir::new().unwrap();
    let cal = calibration_fixture(dir.path());
    let out = dir.path().join("model");
    let o = cpsets(&[
        "calibrate",
        "-i",
        p(&cal),
        "-o",
        p(&out),
        "--method",
        "raps",
        "--lambda",
        "0",
        "--deterministic",
        "--alpha",
        "0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model =
        ConformalModel::from_toml(&fs::read_to_string(out.join("model.toml")).unwrap()).unwrap();
    assert_eq!(model.tau_hat, 0.7);
    assert_eq!(model.n_cal, 4);
    let line = stdout(&o);
    assert!(
        line.contains("tau_hat=0.7") && line.contains("n_cal=4"),
        "{line}"
    );
    assert!(out.join("config.toml").exists());
}

#[test]
fn missing_input_is_an_io_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("no_such_scores.csv");
    let o = cpsets(&[
        "calibrate",
        "-i",
        p(&missing),
        "-o",
        p(&dir.path().join("m")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no_such_scores.csv"), "{}", stderr(&o));
}

#[test]
fn bad_alpha_is_a_usage_error_before_io() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m");
    let o = cpsets(&[
        "calibrate",
        "-i",
        "does_not_exist.csv",
        "-o",
        p(&out),
        "--alpha",
        "1.5",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn malformed_scores_are_a_data_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "scores,K=2\n0.5,0.5,7\n").unwrap();
    let o = cpsets(&["calibrate", "-i", p(&path), "-o", p(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn infinite_threshold_lists_every_class() {
    let dir = TempDir::new().unwrap();
    let model = write_model(dir.path(), f64::INFINITY, 3);
    let scores = dir.path().join("s.csv");
    fs::write(&scores, "scores,K=3\n0.5,0.3,0.2,0\n0.1,0.1,0.8,2\n").unwrap();
    let o = cpsets(&["predict", "--model", p(&model), "-i", p(&scores)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines, ["0,3,0,1,2", "1,3,2,0,1"]);
}

#[test]
fn predict_hand_example_has_size_two() {
    let dir = TempDir::new().unwrap();
    let model = write_model(dir.path(), 0.85, 3);
    let scores = dir.path().join("s.csv");
    fs::write(&scores, "scores,K=3\n0.5,0.3,0.2,0\n").unwrap();
    let out = dir.path().join("pred");
    let o = cpsets(&[
        "predict",
        "--model",
        p(&model),
        "-i",
        p(&scores),
        "--deterministic",
        "-o",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(out.join("predictions.csv")).unwrap(),
        "0,2,0,1\n"
    );
}

#[test]
fn predict_rejects_class_count_mismatch() {
    let dir = TempDir::new().unwrap();
    let model = write_model(dir.path(), 0.85, 4);
    let scores = dir.path().join("s.csv");
    fs::write(&scores, "scores,K=3\n0.5,0.3,0.2,0\n").unwrap();
    let o = cpsets(&["predict", "--model", p(&model), "-i", p(&scores)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn deterministic_predictions_ignore_the_seed() {
    let dir = TempDir::new().unwrap();
    let syn = dir.path().join("syn");
    let o = cpsets(&[
        "synth",
        "-o",
        p(&syn),
        "--n",
        "400",
        "--classes",
        "8",
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = syn.join("scores.bin");
    let model = dir.path().join("model");
    assert!(cpsets(&["calibrate", "-i", p(&scores), "-o", p(&model)])
        .status
        .success());
    let model = model.join("model.toml");
    let run = |seed: &str, det: bool| {
        let mut args = vec![
            "predict",
            "--model",
            p(&model),
            "-i",
            p(&scores),
            "--seed",
            seed,
        ];
        if det {
            args.push("--deterministic");
        }
        let o = cpsets(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    assert_eq!(run("1", true), run("999", true));
    assert_eq!(run("1", false), run("1", false));
    assert_ne!(run("1", false), run("999", false));
}

#[test]
fn help_documents_the_common_flags() {
    for cmd in ["calibrate", "experiment"] {
        let o = cpsets(&[cmd, "--help"]);
        assert!(o.status.success());
        let help = stdout(&o);
        for flag in [
            "--alpha",
            "--method",
            "--lambda",
            "--k-reg",
            "--seed",
            "--deterministic",
            "--trials",
            "--cal-size",
            "--eval-size",
            "--tune-size",
            "--out",
        ] {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
    let top = stdout(&cpsets(&["--help"]));
    for sub in [
        "ingest",
        "synth",
        "fit-temp",
        "tune",
        "calibrate",
        "predict",
        "evaluate",
        "experiment",
    ] {
        assert!(top.contains(sub), "--help lacks {sub}");
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let cal = calibration_fixture(dir.path());
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "input = {:?}\nmethod = \"raps\"\nlambda = 0.0\ndeterministic = true\nalpha = 0.9\n",
            p(&cal)
        ),
    )
    .unwrap();
    let out = dir.path().join("m");
    let o = cpsets(&[
        "calibrate",
        "--config",
        p(&config),
        "-o",
        p(&out),
        "--alpha",
        "0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("tau_hat=0.7"));
    let echoed = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echoed.contains("alpha = 0.5"), "{echoed}");

    fs::write(&config, "alpah = 0.1\n").unwrap();
    let o = cpsets(&["calibrate", "--config", p(&config), "-o", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_method_single_trial_experiment_emits_every_artifact() {
    let dir = TempDir::new().unwrap();
    let syn = dir.path().join("syn");
    assert!(cpsets(&[
        "synth",
        "-o",
        p(&syn),
        "--n",
        "900",
        "--classes",
        "12",
        "--corruption",
        "tail_permute:3"
    ])
    .status
    .success());
    for f in ["truth.bin", "scores.bin", "manifest.toml"] {
        assert!(syn.join(f).exists(), "{f}");
    }
    let out = dir.path().join("exp");
    let o = cpsets(&[
        "experiment",
        "-i",
        p(&syn.join("scores.bin")),
        "-o",
        p(&out),
        "--methods",
        "raps",
        "--trials",
        "1",
        "--tune-size",
        "200",
        "--cal-size",
        "300",
        "--sweep",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "config.toml",
        "summary.txt",
        "summary.csv",
        "trials.csv",
        "hist_raps.csv",
        "strata.csv",
        "difficulty.csv",
        "sweep.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 10 * 5);
}

#[test]
fn full_pipeline_on_logits() {
    let dir = TempDir::new().unwrap();
    let syn = dir.path().join("syn");
    assert!(cpsets(&[
        "synth",
        "-o",
        p(&syn),
        "--n",
        "600",
        "--classes",
        "6",
        "--corruption",
        "temperature:2"
    ])
    .status
    .success());
    let scores = syn.join("scores.bin");
    let csv = dir.path().join("ingested");
    let o = cpsets(&["ingest", "-i", p(&scores), "-o", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rows=600"));

    let o = cpsets(&["tune", "-i", p(&scores), "--tune-objective", "adaptiveness"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("objective=adaptiveness"));

    let model = dir.path().join("model");
    assert!(cpsets(&[
        "calibrate",
        "-i",
        p(&scores),
        "-o",
        p(&model),
        "--method",
        "fixed_k"
    ])
    .status
    .success());
    let ev = dir.path().join("ev");
    let o = cpsets(&[
        "evaluate",
        "--model",
        p(&model.join("model.toml")),
        "-i",
        p(&scores),
        "-o",
        p(&ev),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "metrics.csv",
        "strata.csv",
        "difficulty.csv",
        "histogram.csv",
    ] {
        assert!(ev.join(f).exists(), "{f}");
    }
}
