//! One test per acceptance criterion. Each writes a `criterion N ... PASS|FAIL`
//! line to stderr before asserting. Tests share a lock so that wall-time budgets are
//! measured without contention from the others.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nodule_core::cascade::{infer_cascade, predict_ids, CascadeModel, FinalCombine, StageModel};
use nodule_core::config::PipelineConfig;
use nodule_core::data::{generate_synthetic, CandidateRecord, Patch, PatchStore, SyntheticConfig};
use nodule_core::eval::{compute_froc, cpm, sensitivity_at, FrocPoint, ScoredCandidate, CPM_FP_RATES};
use nodule_core::nn::{gradient_check_suite, LayerSpec, NetworkModel, ProbeNetwork};
use nodule_core::pipeline::{run_pipeline, run_synth, PipelineSummary};
use nodule_core::sampling::{plan_inverse_imbalanced, InverseSamplerConfig};
use nodule_core::seed;
use rand::Rng;

/// Desk-scale benchmark shared by the single-sided and fusion criteria.
const BENCH_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const BENCH_SEPARATION: f64 = 0.3;
const BENCH_NOISE: f64 = 0.1;
const BENCH_SETTINGS: &[(&str, &str)] = &[
    ("stages", "2"),
    ("balanced_models", "2"),
    ("folds", "5"),
    ("cnn.conv1_channels", "4"),
    ("cnn.conv2_channels", "8"),
    ("cnn.hidden_units", "32"),
    ("stage_train.epochs", "20"),
    ("balanced_train.epochs", "60"),
];

const TINY: &[(&str, &str)] = &[
    ("folds", "2"),
    ("stages", "1"),
    ("balanced_models", "1"),
    ("cnn.conv1_channels", "2"),
    ("cnn.conv2_channels", "2"),
    ("cnn.hidden_units", "4"),
    ("stage_train.epochs", "1"),
    ("balanced_train.epochs", "1"),
    ("fusion_train.epochs", "2"),
    ("sampler.majority_subsample", "10"),
];

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, title: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    // written to the raw handle so the line shows even when output is captured
    let line = format!("\ncriterion {n} {title} ... {verdict} ({detail})\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn nodule(args: &[String]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_nodule"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn args(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn settings(pairs: &[(&str, &str)]) -> Vec<String> {
    pairs.iter().flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")]).collect()
}

fn data_args(dir: &Path) -> Vec<String> {
    vec![
        "--candidates".into(),
        dir.join("candidates.csv").to_string_lossy().into_owned(),
        "--patches".into(),
        dir.join("patches.bin").to_string_lossy().into_owned(),
    ]
}

fn run_ok(a: &[String]) {
    let out = nodule(a);
    assert!(out.status.success(), "{a:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn synth_cli(out: &Path, positives: usize, negatives: usize, seed: u64) {
    run_ok(&args(&[
        "synth",
        "--positives",
        &positives.to_string(),
        "--negatives",
        &negatives.to_string(),
        "--separation",
        "0.6",
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]));
}

#[test]
fn criterion_1_pipeline_smoke() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let user = std::env::var_os("NODULE_LUNA_CANDIDATES").zip(std::env::var_os("NODULE_LUNA_PATCHES"));
    let (data, source, extra) = match &user {
        Some((c, p)) => (
            vec!["--candidates".into(), c.to_string_lossy().into_owned(), "--patches".into(), p.to_string_lossy().into_owned()],
            "user-supplied candidate list",
            Vec::new(),
        ),
        None => {
            let d = dir.path().join("data");
            synth_cli(&d, 12, 240, 11);
            (data_args(&d), "no user data set, synthetic candidate list in the same format", settings(TINY))
        }
    };
    let out = dir.path().join("run");
    let mut a = args(&["pipeline", "--seed", "1", "--out", out.to_str().unwrap()]);
    a.extend(data);
    a.extend(extra);
    let result = nodule(&a);
    let froc = std::fs::read_to_string(out.join("froc.csv")).unwrap_or_default();
    let names: BTreeSet<&str> = froc.lines().skip(1).filter_map(|l| l.split(',').next()).collect();
    let passed = result.status.success()
        && out.join("froc.svg").exists()
        && names == BTreeSet::from(["cascade", "fusion"]);
    report(1, "pipeline end-to-end", passed, &format!("{source}; curves {names:?}"));
    assert!(passed, "{}", String::from_utf8_lossy(&result.stderr));
}

#[test]
fn criterion_2_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let results = gradient_check_suite(10, 1e-5).unwrap();
    let elapsed = start.elapsed();
    let worst = |n: ProbeNetwork| {
        results.iter().filter(|r| r.network == n).map(|r| r.report.max_relative_error).fold(0.0f64, f64::max)
    };
    let seeds = results.iter().map(|r| r.seed).collect::<BTreeSet<_>>().len();
    let (dense, conv) = (worst(ProbeNetwork::Dense), worst(ProbeNetwork::Conv));
    let passed = results.iter().all(|r| r.passed())
        && dense < 1e-4
        && conv < 1e-3
        && seeds >= 10
        && elapsed < Duration::from_secs(60);
    report(
        2,
        "gradient verification",
        passed,
        &format!("dense/relu/softmax {dense:.2e}, conv/maxpool {conv:.2e}, {seeds} seeds, {:.1}s", elapsed.as_secs_f64()),
    );
    assert!(passed);
}

fn brute_force_froc(scored: &[ScoredCandidate]) -> Vec<FrocPoint> {
    let scans = scored.iter().map(|c| &c.scan_id).collect::<BTreeSet<_>>().len();
    let positives = scored.iter().filter(|c| c.label == 1).count();
    let mut best: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for t in scored.iter().map(|c| c.score) {
        let tp = scored.iter().filter(|c| c.label == 1 && c.score >= t).count();
        let fp = scored.iter().filter(|c| c.label == 0 && c.score >= t).count();
        let rate = fp as f64 / scans as f64;
        let e = best.entry(rate.to_bits()).or_insert((rate, 0.0));
        e.1 = f64::max(e.1, tp as f64 / positives as f64);
    }
    let mut points: Vec<FrocPoint> =
        best.into_values().map(|(fp_per_scan, sensitivity)| FrocPoint { fp_per_scan, sensitivity }).collect();
    points.sort_by(|a, b| a.fp_per_scan.total_cmp(&b.fp_per_scan));
    points
}

fn brute_force_sensitivity(points: &[FrocPoint], f: f64) -> f64 {
    points.iter().filter(|p| p.fp_per_scan <= f).map(|p| p.sensitivity).fold(0.0, f64::max)
}

#[test]
fn criterion_3_froc_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = seed::rng(2024);
    let mut mismatches = 0;
    let mut instances = 0;
    while instances < 200 {
        let n = rng.gen_range(1..=100);
        let scans = rng.gen_range(1..=10);
        let grid = rng.gen_range(2..=60);
        let scored: Vec<ScoredCandidate> = (0..n)
            .map(|i| ScoredCandidate {
                candidate_id: i,
                scan_id: format!("s{}", rng.gen_range(0..scans)),
                label: u8::from(rng.gen_bool(0.3)),
                score: f64::from(rng.gen_range(0..=grid)) / f64::from(grid),
            })
            .collect();
        if !scored.iter().any(|c| c.label == 1) {
            continue;
        }
        instances += 1;
        let curve = compute_froc(&scored).unwrap();
        let oracle = brute_force_froc(&scored);
        let targets: Vec<f64> = CPM_FP_RATES.iter().copied().chain((0..5).map(|_| rng.gen_range(0.0..12.0))).collect();
        let expected: Vec<f64> = targets.iter().map(|&f| brute_force_sensitivity(&oracle, f)).collect();
        let hand_cpm = expected[..CPM_FP_RATES.len()].iter().sum::<f64>() / CPM_FP_RATES.len() as f64;
        if curve.points != oracle || sensitivity_at(&curve, &targets) != expected || (cpm(&curve) - hand_cpm).abs() > 1e-15 {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let passed = mismatches == 0 && elapsed < Duration::from_secs(30);
    report(
        3,
        "FROC oracle equivalence",
        passed,
        &format!("{instances} instances, {mismatches} mismatches, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(passed);
}

fn tiny_model(seed: u64) -> NetworkModel {
    NetworkModel::new(
        &[3, 48, 48],
        &[
            LayerSpec::MaxPool2x2,
            LayerSpec::MaxPool2x2,
            LayerSpec::MaxPool2x2,
            LayerSpec::Dense { in_units: 108, out_units: 2 },
            LayerSpec::Softmax,
        ],
        seed,
    )
    .unwrap()
}

#[test]
fn criterion_4_cascade_invariants() {
    let _g = serial();
    let mut violations: BTreeMap<char, usize> = BTreeMap::new();
    let mut max_mean_gap = 0.0f64;
    for run in 0..100u64 {
        let mut rng = seed::stream(run, "acceptance-cascade");
        let (records, store) = generate_synthetic(&SyntheticConfig {
            n_positive: rng.gen_range(1..=5),
            n_negative: rng.gen_range(10..=40),
            separation: 0.6,
            noise_sigma: 0.1,
            seed: run,
        })
        .unwrap();
        let ids: Vec<u64> = records.iter().map(|r| r.candidate_id).collect();
        let stages = rng.gen_range(0..=4);
        let cascade = CascadeModel {
            stages: (0..stages)
                .map(|i| StageModel {
                    model: tiny_model(run * 97 + i as u64),
                    threshold: rng.gen_range(0.2..0.7),
                    stage_index: i + 1,
                })
                .collect(),
            final_models: (0..rng.gen_range(1..=3)).map(|b| tiny_model(run * 97 + 50 + b)).collect(),
            final_combine: FinalCombine::Mean,
        };
        let (scores, trace) = infer_cascade(&cascade, &ids, &store).unwrap();

        let a_ok = scores.iter().all(|s| match s.filtered_at_stage {
            Some(k) => s.score == 0.0 && (1..=stages).contains(&k),
            None => s.score > 0.0,
        }) && scores.iter().filter(|s| s.filtered_at_stage.is_some()).count()
            == ids.len() - trace.survivors.last().map_or(ids.len(), Vec::len);
        if !a_ok {
            *violations.entry('a').or_default() += 1;
        }

        let counts: Vec<usize> = std::iter::once(ids.len()).chain(trace.survivors.iter().map(Vec::len)).collect();
        if counts.windows(2).any(|w| w[1] > w[0]) {
            *violations.entry('b').or_default() += 1;
        }

        if stages > 0 {
            let mut raised = cascade.clone();
            let which = rng.gen_range(0..stages);
            raised.stages[which].threshold += rng.gen_range(0.0..0.3);
            let (_, t1) = infer_cascade(&raised, &ids, &store).unwrap();
            let enlarged = trace.survivors.iter().zip(&t1.survivors).any(|(before, after)| {
                let before: BTreeSet<_> = before.iter().collect();
                after.iter().any(|id| !before.contains(id))
            });
            if enlarged {
                *violations.entry('c').or_default() += 1;
            }
        }

        let flat = CascadeModel {
            stages: Vec::new(),
            ..cascade.clone()
        };
        let (flat_scores, _) = infer_cascade(&flat, &ids, &store).unwrap();
        let per_model: Vec<Vec<f64>> = flat.final_models.iter().map(|m| predict_ids(m, &ids, &store).unwrap()).collect();
        for (i, s) in flat_scores.iter().enumerate() {
            let mean = per_model.iter().map(|p| p[i]).sum::<f64>() / per_model.len() as f64;
            max_mean_gap = max_mean_gap.max((s.score - mean).abs());
        }
    }
    if max_mean_gap > 1e-12 {
        violations.insert('d', 1);
    }
    let passed = violations.is_empty();
    report(
        4,
        "cascade invariants",
        passed,
        &format!("100 runs, violations {violations:?}, S=0 max gap {max_mean_gap:.1e}"),
    );
    assert!(passed);
}

struct Benchmark {
    runs: Vec<PipelineSummary>,
    elapsed: Duration,
}

fn benchmark() -> &'static Benchmark {
    static BENCH: OnceLock<Benchmark> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let runs = BENCH_SEEDS
            .iter()
            .map(|&s| {
                let data = dir.path().join(format!("data-{s}"));
                run_synth(
                    &SyntheticConfig {
                        n_positive: 10,
                        n_negative: 1000,
                        separation: BENCH_SEPARATION,
                        noise_sigma: BENCH_NOISE,
                        seed: s,
                    },
                    &data,
                )
                .unwrap();
                let mut c = PipelineConfig::default();
                c.set("seed", &s.to_string()).unwrap();
                c.set("candidates", data.join("candidates.csv").to_str().unwrap()).unwrap();
                c.set("patches", data.join("patches.bin").to_str().unwrap()).unwrap();
                c.set("out", dir.path().join(format!("run-{s}")).to_str().unwrap()).unwrap();
                for (k, v) in BENCH_SETTINGS {
                    c.set(k, v).unwrap();
                }
                run_pipeline(&c).unwrap()
            })
            .collect();
        Benchmark {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_5_single_sided_filtering() {
    let _g = serial();
    let bench = benchmark();
    let stages = bench.runs[0].held_out_stages.len();
    let mut passed = stages == 2 && bench.elapsed < Duration::from_secs(300);
    let mut detail = Vec::new();
    for k in 0..stages {
        let retention = mean(bench.runs.iter().map(|r| r.held_out_stages[k].nodule_retention()));
        let removal = mean(bench.runs.iter().map(|r| r.held_out_stages[k].non_nodule_removal()));
        passed &= retention >= 0.95 && removal >= 0.30;
        detail.push(format!("stage {}: retention {retention:.3} removal {removal:.3}", k + 1));
    }
    detail.push(format!("{} seeds, {:.0}s", bench.runs.len(), bench.elapsed.as_secs_f64()));
    report(5, "single-sided filtering", passed, &detail.join(", "));
    assert!(passed);
}

#[test]
fn criterion_6_fusion_benefit() {
    let _g = serial();
    let bench = benchmark();
    let fusion = mean(bench.runs.iter().map(|r| cpm(&r.fusion_curve)));
    let best_single = mean(bench.runs.iter().map(|r| r.model_curves.iter().map(cpm).fold(0.0, f64::max)));
    let baseline = mean(bench.runs.iter().map(|r| cpm(&r.mean_baseline_curve)));
    let models = bench.runs[0].model_curves.len();
    let passed = models == 4 && fusion >= best_single - 0.02 && fusion >= baseline - 0.02;
    report(
        6,
        "fusion benefit",
        passed,
        &format!(
            "M={models}, mean CPM over {} seeds: fusion {fusion:.3}, best single {best_single:.3}, mean baseline {baseline:.3}",
            bench.runs.len()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_7_sampler_counts() {
    let _g = serial();
    let (minority, majority) = (1_348u64, 551_065u64);
    let records: Vec<CandidateRecord> = (0..minority + majority)
        .map(|i| CandidateRecord {
            candidate_id: i,
            scan_id: format!("scan-{}", i / 1000),
            coord_x: 0.0,
            coord_y: 0.0,
            coord_z: 0.0,
            label: u8::from(i < minority),
        })
        .collect();
    let plan = plan_inverse_imbalanced(&records, &InverseSamplerConfig::default()).unwrap();
    // only the sampled candidates need patches
    let mut store = PatchStore::new();
    let len = Patch::zeros().values().len();
    for id in plan.samples.iter().map(|s| s.candidate_id).collect::<BTreeSet<_>>() {
        let v = (0..len).map(|j| ((id as usize * 31 + j) % 97) as f32 / 97.0).collect();
        store.insert(id, Patch::new(v).unwrap());
    }
    let set = plan.materialize(&store).unwrap();
    let pos = set.labels.iter().filter(|&&l| l == 1).count();
    let neg = set.labels.len() - pos;
    let distinct_neg = set.candidate_ids.iter().zip(&set.labels).filter(|(_, &l)| l == 0).map(|(id, _)| id).collect::<BTreeSet<_>>().len();
    let passed = plan.class_counts() == (12_132, 100) && (pos, neg) == (12_132, 100) && distinct_neg == 100;
    report(7, "sampler counts", passed, &format!("{pos} minority, {neg} majority"));
    assert!(passed);
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    ["froc.csv", "vectors.csv", "manifest.txt"]
        .iter()
        .filter_map(|f| std::fs::read(dir.join(f)).ok().map(|b| (f.to_string(), b)))
        .collect()
}

#[test]
fn criterion_8_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_cli(&data, 12, 240, 21);
    let bundle_run = dir.path().join("bundle");
    let mut a = args(&["train-cascade", "--seed", "3", "--out", bundle_run.to_str().unwrap()]);
    a.extend(data_args(&data));
    a.extend(settings(TINY));
    run_ok(&a);

    let commands: Vec<(&str, Box<dyn Fn(&Path) -> Vec<String>>)> = vec![
        (
            "build-vectors",
            Box::new(|out: &Path| {
                let mut a = args(&["build-vectors", "--seed", "3", "--out", out.to_str().unwrap()]);
                a.extend(["--cascade".into(), bundle_run.join("cascade").to_string_lossy().into_owned()]);
                a.extend(data_args(&data));
                a.extend(settings(TINY));
                a
            }),
        ),
        (
            "evaluate",
            Box::new(|out: &Path| {
                let scores = format!("cascade={}", bundle_run.join("cascade_scores.csv").display());
                args(&["evaluate", "--out", out.to_str().unwrap(), "--scores", &scores])
            }),
        ),
        (
            "pipeline",
            Box::new(|out: &Path| {
                let mut a = args(&["pipeline", "--seed", "5", "--out", out.to_str().unwrap()]);
                a.extend(data_args(&data));
                a.extend(settings(TINY));
                a
            }),
        ),
    ];
    let mut passed = true;
    let mut detail = Vec::new();
    for (name, build) in &commands {
        let reps: Vec<BTreeMap<String, Vec<u8>>> = (0..3)
            .map(|r| {
                let out: PathBuf = dir.path().join(format!("{name}-{r}"));
                run_ok(&build(&out));
                outputs(&out)
            })
            .collect();
        let same = reps.windows(2).all(|w| w[0] == w[1]) && reps[0].contains_key("manifest.txt");
        passed &= same;
        detail.push(format!("{name} [{}] {}", reps[0].keys().cloned().collect::<Vec<_>>().join(" "), if same { "identical" } else { "differs" }));
    }
    report(8, "determinism", passed, &format!("3 reps each: {}", detail.join("; ")));
    assert!(passed);
}
