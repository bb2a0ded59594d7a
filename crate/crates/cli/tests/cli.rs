use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "folds=2",
    "--set", "stages=1",
    "--set", "balanced_models=1",
    "--set", "cnn.conv1_channels=2",
    "--set", "cnn.conv2_channels=2",
    "--set", "cnn.hidden_units=4",
    "--set", "stage_train.epochs=1",
    "--set", "balanced_train.epochs=1",
    "--set", "fusion_train.epochs=2",
    "--set", "sampler.majority_subsample=10",
];

fn nodule(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodule"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    synth_sized(dir, seed, "4", "100")
}

fn synth_sized(dir: &Path, seed: &str, positives: &str, negatives: &str) -> PathBuf {
    let data = dir.join("data");
    let out = nodule(&[
        "synth", "--positives", positives, "--negatives", negatives, "--separation", "0.6",
        "--seed", seed, "--out", data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn with_data<'a>(data: &'a Path, args: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    v.extend([
        "--candidates".into(),
        data.join("candidates.csv").to_string_lossy().into_owned(),
        "--patches".into(),
        data.join("patches.bin").to_string_lossy().into_owned(),
    ]);
    v.extend(TINY.iter().map(|s| s.to_string()));
    v
}

fn run_strings(args: &[String]) -> Output {
    nodule(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn synth_writes_the_requested_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(&dir.path().join("a"), "7");
    let b = synth(&dir.path().join("b"), "7");
    let csv = std::fs::read_to_string(a.join("candidates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 105);
    for f in ["candidates.csv", "patches.bin", "manifest.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("timing.txt").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&nodule(&["synth", "--positives", "10", "--negatives", "5", "--seed", "1", "--out", out])), 2);
    assert_eq!(code(&nodule(&["synth", "--out", out])), 2, "seed is mandatory");
    assert_eq!(code(&nodule(&["no-such-command"])), 2);
    assert_eq!(code(&nodule(&["pipeline", "--seed", "1", "--out", out, "--set", "bogus=1"])), 2);
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "seed = 1\nthis line has no equals sign\n").unwrap();
    assert_eq!(code(&nodule(&["pipeline", "--config", conf.to_str().unwrap(), "--out", out])), 2);
}

#[test]
fn missing_inputs_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let missing = dir.path().join("nope.csv");
    let r = nodule(&[
        "pipeline", "--seed", "1", "--out", out.to_str().unwrap(),
        "--candidates", missing.to_str().unwrap(), "--patches", missing.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 1);
    let manifest = std::fs::read_to_string(out.join("manifest.txt.partial")).unwrap();
    assert!(manifest.contains("failed_phase=load"));
}

#[test]
fn failed_phase_marks_outputs_partial() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3");
    let out = dir.path().join("run");
    let mut args = with_data(&data, &["pipeline", "--seed", "2", "--out", out.to_str().unwrap()]);
    args.extend(["--set".into(), "thresholds=1".into()]);
    let r = run_strings(&args);
    assert_eq!(code(&r), 1, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("cascade"));
    assert!(out.join("folds.csv.partial").exists());
    assert!(!out.join("folds.csv").exists());
    assert!(!out.join("manifest.txt").exists());
    let manifest = std::fs::read_to_string(out.join("manifest.txt.partial")).unwrap();
    assert!(manifest.contains("failed_phase=cascade"));
}

#[test]
fn command_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "5");
    let cascade_out = dir.path().join("cascade");
    let r = run_strings(&with_data(&data, &["train-cascade", "--seed", "4", "--out", cascade_out.to_str().unwrap()]));
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let manifest = std::fs::read_to_string(cascade_out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("config_hash="));
    assert!(manifest.contains("train.stage.1.survivor_non_nodules="));
    assert!(cascade_out.join("cascade/cascade.txt").exists());
    assert_eq!(std::fs::read_to_string(cascade_out.join("trace.csv")).unwrap().lines().count(), 105);

    let vec_out = dir.path().join("vectors");
    let bundle = cascade_out.join("cascade");
    let r = run_strings(&with_data(
        &data,
        &["build-vectors", "--seed", "4", "--out", vec_out.to_str().unwrap(), "--cascade", bundle.to_str().unwrap()],
    ));
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let vectors = std::fs::read_to_string(vec_out.join("vectors.csv")).unwrap();
    assert!(vectors.starts_with("candidate_id,label,p1,p2\n"));

    let fusion_out = dir.path().join("fusion");
    let vectors_path = vec_out.join("vectors.csv");
    let cands = data.join("candidates.csv");
    let mut args: Vec<&str> = vec![
        "train-fusion", "--seed", "4", "--out", fusion_out.to_str().unwrap(),
        "--candidates", cands.to_str().unwrap(), "--vectors", vectors_path.to_str().unwrap(),
    ];
    args.extend(TINY);
    let r = nodule(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));

    let eval_out = dir.path().join("eval");
    let cascade_scores = format!("cascade={}", cascade_out.join("cascade_scores.csv").display());
    let fusion_scores = fusion_out.join("fusion_scores.csv");
    let r = nodule(&[
        "evaluate", "--out", eval_out.to_str().unwrap(),
        "--scores", &cascade_scores, "--scores", fusion_scores.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let froc = std::fs::read_to_string(eval_out.join("froc.csv")).unwrap();
    assert!(froc.starts_with("name,fp_per_scan,sensitivity\n"));
    assert!(froc.lines().any(|l| l.starts_with("cascade,")));
    assert!(froc.lines().any(|l| l.starts_with("fusion_scores,")));
    let svg = std::fs::read_to_string(eval_out.join("froc.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
}

#[test]
fn pipeline_outputs_and_seed_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_sized(dir.path(), "9", "12", "240");
    let mut runs = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(format!("run-{seed}"));
        let r = run_strings(&with_data(&data, &["pipeline", "--seed", seed, "--out", out.to_str().unwrap()]));
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        for f in ["froc.csv", "froc.svg", "vectors.csv", "manifest.txt", "fusion_scores.csv", "cascade_scores.csv"] {
            assert!(out.join(f).exists(), "{f}");
        }
        runs.push(out);
    }
    let va = std::fs::read_to_string(runs[0].join("vectors.csv")).unwrap();
    let vb = std::fs::read_to_string(runs[1].join("vectors.csv")).unwrap();
    assert_ne!(va, vb);
    assert_eq!(va.lines().next(), vb.lines().next());
    assert_eq!(va.lines().count(), vb.lines().count());
}

#[test]
fn gradient_check_command() {
    let r = nodule(&["gradient-check", "--seeds", "2"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert_eq!(stdout.lines().filter(|l| l.ends_with("ok")).count(), 4);
    assert_eq!(code(&nodule(&["gradient-check", "--epsilon", "0.1"])), 2);
}
