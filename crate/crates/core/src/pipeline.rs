//! End-to-end runs behind the command-line tool.
//!
//! Every run writes into one output directory and finishes with
//! `manifest.txt` (deterministic) and `timing.txt` (wall time). When a phase
//! fails, the files it and earlier phases produced are renamed with a
//! `.partial` suffix and the manifest records the failing phase.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cascade::{
    infer_cascade, load_cascade, save_cascade, train_cascade, write_trace_csv, CandidateScore,
    CascadeModel, CascadeTrainingReport,
};
use crate::config::{manifest_header, sha256_file, FusionModels, Manifest, PipelineConfig};
use crate::data::{
    class_counts, generate_synthetic, load_candidates, load_patch_store, save_patch_store,
    split_folds, write_candidates, CandidateRecord, FoldAssignment, PatchStore, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::eval::{compute_froc, cpm, emit_report, read_scores, sensitivity_at, write_scores, FrocCurve, ScoredCandidate};
use crate::fusion::{build_probability_vectors, mean_baseline, train_fusion_cv, ProbabilityMatrix};
use crate::nn::{self, NetworkModel};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const PARTIAL_SUFFIX: &str = ".partial";

/// Output directory of one run and the files written into it so far.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    written: Vec<String>,
    started: Instant,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Registers `name` as an output of this run and returns its path.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let partial = self.root.join(format!("{name}{PARTIAL_SUFFIX}"));
        if partial.exists() {
            let _ = remove_path(&partial);
        }
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        self.root.join(name)
    }

    /// Runs one phase; on failure every registered output becomes `.partial`.
    pub fn phase<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("phase {name}");
        f(self).map_err(|e| {
            self.mark_partial(name, &e);
            Error::Phase {
                phase: name.to_string(),
                source: Box::new(e),
            }
        })
    }

    fn mark_partial(&self, phase: &str, error: &Error) {
        for name in &self.written {
            let from = self.root.join(name);
            if from.exists() {
                let to = self.root.join(format!("{name}{PARTIAL_SUFFIX}"));
                let _ = remove_path(&to);
                if let Err(e) = std::fs::rename(&from, &to) {
                    log::warn!("could not mark {} partial: {e}", from.display());
                }
            }
        }
        let mut m = Manifest::default();
        m.push("status", "failed");
        m.push("failed_phase", phase);
        m.push("error", error.to_string().replace('\n', " "));
        let path = self.root.join(format!("{MANIFEST_FILE}{PARTIAL_SUFFIX}"));
        if let Err(e) = m.write(&path) {
            log::warn!("could not write {}: {e}", path.display());
        }
    }

    /// Writes the manifest and the wall-time sidecar.
    pub fn finish(&mut self, manifest: &Manifest) -> Result<()> {
        let path = self.output(MANIFEST_FILE);
        manifest.write(&path)?;
        let timing = self.output(TIMING_FILE);
        let secs = self.started.elapsed().as_secs_f64();
        std::fs::write(&timing, format!("wall_time_seconds={secs:.3}\n")).map_err(|e| Error::io(&timing, e))
    }
}

fn remove_path(p: &Path) -> std::io::Result<()> {
    if p.is_dir() {
        std::fs::remove_dir_all(p)
    } else {
        std::fs::remove_file(p)
    }
}

#[derive(Debug)]
pub struct Dataset {
    pub records: Vec<CandidateRecord>,
    pub store: PatchStore,
}

impl Dataset {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let records = load_candidates(config.require_path(&config.candidates, "candidates")?)?;
        let store = load_patch_store(config.require_path(&config.patches, "patches")?)?;
        if let Some(r) = records.iter().find(|r| !store.contains(r.candidate_id)) {
            return Err(Error::MissingPatch(r.candidate_id));
        }
        Ok(Self { records, store })
    }

    fn describe(&self, m: &mut Manifest) {
        let (pos, neg) = class_counts(&self.records);
        let scans: std::collections::BTreeSet<&str> = self.records.iter().map(|r| r.scan_id.as_str()).collect();
        m.push("data.candidates", self.records.len());
        m.push("data.nodules", pos);
        m.push("data.non_nodules", neg);
        m.push("data.scans", scans.len());
        m.push("data.patches", self.store.len());
    }

    fn scored(&self, scores: &[CandidateScore]) -> Result<Vec<ScoredCandidate>> {
        let by_id: BTreeMap<u64, &CandidateRecord> = self.records.iter().map(|r| (r.candidate_id, r)).collect();
        scores
            .iter()
            .map(|s| {
                let r = by_id
                    .get(&s.candidate_id)
                    .ok_or_else(|| Error::Config(format!("scored candidate {} is not in the candidate list", s.candidate_id)))?;
                Ok(ScoredCandidate {
                    candidate_id: s.candidate_id,
                    scan_id: r.scan_id.clone(),
                    label: r.label,
                    score: s.score,
                })
            })
            .collect()
    }
}

fn push_inputs(m: &mut Manifest, config: &PipelineConfig) -> Result<()> {
    if let Some(p) = &config.candidates {
        m.push("input.candidates_sha256", sha256_file(p)?);
    }
    if let Some(p) = &config.patches {
        m.push("input.patches_sha256", sha256_file(p)?);
    }
    Ok(())
}

fn push_training_report(m: &mut Manifest, prefix: &str, report: &CascadeTrainingReport) {
    for s in &report.stages {
        let p = format!("{prefix}stage.{}", s.stage_index);
        m.push(format!("{p}.threshold"), s.threshold);
        m.push(format!("{p}.input_nodules"), s.input_nodules);
        m.push(format!("{p}.input_non_nodules"), s.input_non_nodules);
        m.push(format!("{p}.train_nodules"), s.train_nodules);
        m.push(format!("{p}.train_non_nodules"), s.train_non_nodules);
        m.push(format!("{p}.survivor_nodules"), s.survivor_nodules);
        m.push(format!("{p}.survivor_non_nodules"), s.survivor_non_nodules);
    }
    m.push(format!("{prefix}balanced.input_nodules"), report.final_nodules);
    m.push(format!("{prefix}balanced.input_non_nodules"), report.final_non_nodules);
}

fn push_curve(m: &mut Manifest, name: &str, curve: &FrocCurve) {
    let s = sensitivity_at(curve, &[4.0, 8.0]);
    m.push(format!("froc.{name}.cpm"), cpm(curve));
    m.push(format!("froc.{name}.sensitivity_at_4"), s[0]);
    m.push(format!("froc.{name}.sensitivity_at_8"), s[1]);
}

/// Models feeding the probability vectors, in cascade order.
pub fn fusion_inputs(cascade: &CascadeModel, which: FusionModels) -> Vec<&NetworkModel> {
    match which {
        FusionModels::All => cascade.all_models(),
        FusionModels::SingleSided => cascade.stages.iter().map(|s| &s.model).collect(),
        FusionModels::Balanced => cascade.final_models.iter().collect(),
    }
}

pub fn run_synth(config: &SyntheticConfig, out: &Path) -> Result<Manifest> {
    let mut run = RunDir::create(out)?;
    let (records, store) = run.phase("generate", |_| generate_synthetic(config))?;
    run.phase("write", |run| {
        write_candidates(&records, &run.output("candidates.csv"))?;
        save_patch_store(&store, &run.output("patches.bin"))
    })?;
    let mut m = Manifest::default();
    m.push("command", "synth");
    m.push("seed", config.seed);
    m.push("config.positives", config.n_positive);
    m.push("config.negatives", config.n_negative);
    m.push("config.separation", config.separation);
    m.push("config.noise_sigma", config.noise_sigma);
    Dataset { records, store }.describe(&mut m);
    m.push("output.candidates_sha256", sha256_file(&run.root().join("candidates.csv"))?);
    m.push("output.patches_sha256", sha256_file(&run.root().join("patches.bin"))?);
    run.finish(&m)?;
    Ok(m)
}

/// Trains one cascade on every candidate and scores them with it.
pub fn run_train_cascade(config: &PipelineConfig) -> Result<Manifest> {
    config.validate()?;
    let mut run = RunDir::create(config.require_path(&config.out, "out")?)?;
    let mut m = manifest_header("train-cascade", config);
    let data = run.phase("load", |_| {
        push_inputs(&mut m, config)?;
        Dataset::load(config)
    })?;
    data.describe(&mut m);
    let cascade_config = config.cascade_config()?;
    let (cascade, report) = run.phase("cascade", |run| {
        let (cascade, report) = train_cascade(&data.records, &data.store, &cascade_config)?;
        save_cascade(&cascade, &run.output("cascade"))?;
        Ok((cascade, report))
    })?;
    push_training_report(&mut m, "train.", &report);
    run.phase("score", |run| {
        let ids: Vec<u64> = data.records.iter().map(|r| r.candidate_id).collect();
        let (scores, trace) = infer_cascade(&cascade, &ids, &data.store)?;
        write_trace_csv(&scores, cascade.stages.len(), &run.output("trace.csv"))?;
        write_scores(&data.scored(&scores)?, &run.output("cascade_scores.csv"))?;
        for (i, survivors) in trace.survivors.iter().enumerate() {
            m.push(format!("trace.stage.{}.survivors", i + 1), survivors.len());
        }
        Ok(())
    })?;
    m.push("models", cascade.all_models().len());
    run.finish(&m)?;
    Ok(m)
}

/// Scores every candidate with every model of a saved cascade.
pub fn run_build_vectors(config: &PipelineConfig, cascade_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let mut run = RunDir::create(config.require_path(&config.out, "out")?)?;
    let mut m = manifest_header("build-vectors", config);
    let data = run.phase("load", |_| {
        push_inputs(&mut m, config)?;
        Dataset::load(config)
    })?;
    data.describe(&mut m);
    let cascade = run.phase("load-cascade", |_| load_cascade(cascade_dir))?;
    let matrix = run.phase("vectors", |run| {
        let models = fusion_inputs(&cascade, config.fusion_models);
        let matrix = build_probability_vectors(&models, &data.records, &data.store)?;
        matrix.write_csv(&run.output("vectors.csv"))?;
        Ok(matrix)
    })?;
    m.push("vectors.rows", matrix.n());
    m.push("vectors.models", matrix.m());
    m.push("output.vectors_sha256", sha256_file(&run.root().join("vectors.csv"))?);
    run.finish(&m)?;
    Ok(m)
}

/// Cross-validated fusion over a saved probability matrix.
pub fn run_train_fusion(config: &PipelineConfig, vectors: &Path) -> Result<Manifest> {
    config.validate()?;
    let seed = config.require_seed()?;
    let mut run = RunDir::create(config.require_path(&config.out, "out")?)?;
    let mut m = manifest_header("train-fusion", config);
    let records = run.phase("load", |_| {
        push_inputs(&mut m, config)?;
        m.push("input.vectors_sha256", sha256_file(vectors)?);
        load_candidates(config.require_path(&config.candidates, "candidates")?)
    })?;
    let matrix = run.phase("load-vectors", |_| ProbabilityMatrix::read_csv(vectors))?;
    let folds = run.phase("folds", |_| split_folds(&records, config.folds, seed::derive(seed, "folds")))?;
    let data = Dataset {
        records,
        store: PatchStore::new(),
    };
    let (pos, neg) = class_counts(&data.records);
    m.push("data.candidates", data.records.len());
    m.push("data.nodules", pos);
    m.push("data.non_nodules", neg);
    let curve = run.phase("fusion", |run| {
        let mut train = config.fusion_train.clone();
        train.seed = seed::derive(seed, "fusion");
        let cv = train_fusion_cv(&matrix, &folds, &config.fusion_spec(matrix.m()), &train)?;
        let dir = run.output("fusion");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (f, model) in cv.models.iter().enumerate() {
            nn::save_model(model, &dir.join(format!("fold-{f}.model")))?;
        }
        let scored = data.scored(&cv.scores)?;
        write_scores(&scored, &run.output("fusion_scores.csv"))?;
        compute_froc(&scored)
    })?;
    push_curve(&mut m, "fusion", &curve);
    run.finish(&m)?;
    Ok(m)
}

/// FROC report over one or more score files.
pub fn run_evaluate(inputs: &[(String, PathBuf)], out: &Path) -> Result<Manifest> {
    if inputs.is_empty() {
        return Err(Error::Config("no score files given".into()));
    }
    let mut run = RunDir::create(out)?;
    let mut m = Manifest::default();
    m.push("command", "evaluate");
    let curves = run.phase("evaluate", |run| {
        let mut curves = Vec::new();
        for (name, path) in inputs {
            if name.is_empty() || name.contains(',') {
                return Err(Error::Config(format!("curve name `{name}` must be non-empty and free of commas")));
            }
            curves.push((name.clone(), compute_froc(&read_scores(path)?)?));
        }
        run.output("froc.csv");
        run.output("froc.svg");
        emit_report(&curves, run.root())?;
        Ok(curves)
    })?;
    for ((name, curve), (_, path)) in curves.iter().zip(inputs) {
        m.push(format!("input.{name}_sha256"), sha256_file(path)?);
        m.push(format!("froc.{name}.scans"), curve.num_scans);
        m.push(format!("froc.{name}.positives"), curve.num_positives);
        push_curve(&mut m, name, curve);
    }
    run.finish(&m)?;
    Ok(m)
}

/// Held-out filtering counts of one stage, summed over folds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeldOutStage {
    pub nodules_in: usize,
    pub nodules_out: usize,
    pub non_nodules_in: usize,
    pub non_nodules_out: usize,
}

impl HeldOutStage {
    pub fn nodule_retention(&self) -> f64 {
        self.nodules_out as f64 / self.nodules_in as f64
    }

    pub fn non_nodule_removal(&self) -> f64 {
        1.0 - self.non_nodules_out as f64 / self.non_nodules_in as f64
    }
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub manifest: Manifest,
    pub cascade_curve: FrocCurve,
    pub fusion_curve: FrocCurve,
    pub mean_baseline_curve: FrocCurve,
    /// One curve per matrix column.
    pub model_curves: Vec<FrocCurve>,
    pub held_out_stages: Vec<HeldOutStage>,
    pub training_reports: Vec<CascadeTrainingReport>,
}

/// Out-of-fold run: for each scan-level fold a cascade is trained on the
/// remaining folds, then scores the fold through the cascade and through
/// each of its models; fusion is cross-validated on the same folds.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineSummary> {
    config.validate()?;
    let seed = config.require_seed()?;
    let mut run = RunDir::create(config.require_path(&config.out, "out")?)?;
    let mut m = manifest_header("pipeline", config);
    let data = run.phase("load", |_| {
        push_inputs(&mut m, config)?;
        Dataset::load(config)
    })?;
    data.describe(&mut m);
    let labels: BTreeMap<u64, u8> = data.records.iter().map(|r| (r.candidate_id, r.label)).collect();

    let folds = run.phase("folds", |run| {
        let folds = split_folds(&data.records, config.folds, seed::derive(seed, "folds"))?;
        let path = run.output("folds.csv");
        std::fs::write(&path, folds_listing(&folds)).map_err(|e| Error::io(&path, e))?;
        Ok(folds)
    })?;

    let mut cascades = Vec::with_capacity(folds.k());
    let mut training_reports = Vec::with_capacity(folds.k());
    let mut cascade_scores: BTreeMap<u64, CandidateScore> = BTreeMap::new();
    let mut held_out = vec![HeldOutStage::default(); config.stages];
    run.phase("cascade", |run| {
        let models_dir = run.output("models");
        for f in 0..folds.k() {
            let train: Vec<CandidateRecord> = data
                .records
                .iter()
                .filter(|r| folds.fold_of(r.candidate_id) != Some(f))
                .cloned()
                .collect();
            let mut cascade_config = config.cascade_config()?;
            cascade_config.seed = seed::derive(seed, &format!("fold-{f}"));
            let (cascade, report) = train_cascade(&train, &data.store, &cascade_config)?;
            save_cascade(&cascade, &models_dir.join(format!("fold-{f}")))?;
            let (scores, trace) = infer_cascade(&cascade, &folds.members(f), &data.store)?;
            for (i, (input, survivors)) in trace.inputs.iter().zip(&trace.survivors).enumerate() {
                let count = |ids: &[u64]| ids.iter().filter(|id| labels[*id] == 1).count();
                held_out[i].nodules_in += count(input);
                held_out[i].nodules_out += count(survivors);
                held_out[i].non_nodules_in += input.len() - count(input);
                held_out[i].non_nodules_out += survivors.len() - count(survivors);
            }
            cascade_scores.extend(scores.into_iter().map(|s| (s.candidate_id, s)));
            training_reports.push(report);
            cascades.push(cascade);
        }
        let ordered: Vec<CandidateScore> = data.records.iter().map(|r| cascade_scores[&r.candidate_id]).collect();
        write_trace_csv(&ordered, config.stages, &run.output("trace.csv"))?;
        write_scores(&data.scored(&ordered)?, &run.output("cascade_scores.csv"))
    })?;
    for (f, report) in training_reports.iter().enumerate() {
        push_training_report(&mut m, &format!("fold.{f}.train."), report);
    }
    for (i, s) in held_out.iter().enumerate() {
        let p = format!("held_out.stage.{}", i + 1);
        m.push(format!("{p}.input_nodules"), s.nodules_in);
        m.push(format!("{p}.survivor_nodules"), s.nodules_out);
        m.push(format!("{p}.input_non_nodules"), s.non_nodules_in);
        m.push(format!("{p}.survivor_non_nodules"), s.non_nodules_out);
    }

    let matrix = run.phase("vectors", |run| {
        let m_models = fusion_inputs(&cascades[0], config.fusion_models).len();
        let mut values: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (f, cascade) in cascades.iter().enumerate() {
            let ids = folds.members(f);
            let fold_records: Vec<CandidateRecord> = data
                .records
                .iter()
                .filter(|r| folds.fold_of(r.candidate_id) == Some(f))
                .cloned()
                .collect();
            debug_assert_eq!(fold_records.len(), ids.len());
            let part = build_probability_vectors(&fusion_inputs(cascade, config.fusion_models), &fold_records, &data.store)?;
            for i in 0..part.n() {
                values.insert(part.candidate_ids[i], part.row(i).to_vec());
            }
        }
        let flat = data.records.iter().flat_map(|r| values[&r.candidate_id].clone()).collect();
        let matrix = ProbabilityMatrix::new(
            data.records.iter().map(|r| r.candidate_id).collect(),
            data.records.iter().map(|r| r.label).collect(),
            m_models,
            flat,
        )?;
        matrix.write_csv(&run.output("vectors.csv"))?;
        Ok(matrix)
    })?;
    m.push("vectors.rows", matrix.n());
    m.push("vectors.models", matrix.m());

    let fusion_scores = run.phase("fusion", |run| {
        let mut train = config.fusion_train.clone();
        train.seed = seed::derive(seed, "fusion");
        let cv = train_fusion_cv(&matrix, &folds, &config.fusion_spec(matrix.m()), &train)?;
        let scored = data.scored(&cv.scores)?;
        write_scores(&scored, &run.output("fusion_scores.csv"))?;
        Ok(scored)
    })?;

    let summary = run.phase("evaluate", |run| {
        let cascade_scored = data.scored(&data.records.iter().map(|r| cascade_scores[&r.candidate_id]).collect::<Vec<_>>())?;
        let cascade_curve = compute_froc(&cascade_scored)?;
        let fusion_curve = compute_froc(&fusion_scores)?;
        run.output("froc.csv");
        run.output("froc.svg");
        emit_report(
            &[("cascade".to_string(), cascade_curve.clone()), ("fusion".to_string(), fusion_curve.clone())],
            run.root(),
        )?;
        let mean_baseline_curve = compute_froc(&data.scored(&mean_baseline(&matrix))?)?;
        let model_curves = (0..matrix.m())
            .map(|j| {
                let scores: Vec<CandidateScore> = matrix
                    .candidate_ids
                    .iter()
                    .zip(matrix.column(j))
                    .map(|(&candidate_id, score)| CandidateScore {
                        candidate_id,
                        score,
                        filtered_at_stage: None,
                    })
                    .collect();
                compute_froc(&data.scored(&scores)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PipelineSummary {
            manifest: Manifest::default(),
            cascade_curve,
            fusion_curve,
            mean_baseline_curve,
            model_curves,
            held_out_stages: held_out.clone(),
            training_reports: training_reports.clone(),
        })
    })?;
    push_curve(&mut m, "cascade", &summary.cascade_curve);
    push_curve(&mut m, "fusion", &summary.fusion_curve);
    push_curve(&mut m, "mean_baseline", &summary.mean_baseline_curve);
    for (j, c) in summary.model_curves.iter().enumerate() {
        push_curve(&mut m, &format!("model_{}", j + 1), c);
    }
    for name in ["vectors.csv", "froc.csv"] {
        m.push(format!("output.{name}_sha256"), sha256_file(&run.root().join(name))?);
    }
    run.finish(&m)?;
    Ok(PipelineSummary { manifest: m, ..summary })
}

/// Scan → fold listing for a fold assignment, one `scan_id,fold` row per scan.
pub fn folds_listing(folds: &FoldAssignment) -> String {
    let mut out = String::from("scan_id,fold\n");
    for f in 0..folds.k() {
        for s in folds.scans_in(f) {
            let _ = writeln!(out, "{s},{f}");
        }
    }
    out
}
