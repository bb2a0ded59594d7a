//! Cascaded single-sided classifiers.
//!
//! Each stage scores the candidates handed to it and drops those whose
//! nodule probability falls below its threshold (score 0, filtered at that
//! stage). Whatever survives every stage is scored by the balanced final
//! models, combined by their mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{class_counts, patch_input_shape, CandidateRecord, PatchStore};
use crate::error::{Error, Result};
use crate::nn::{self, LayerSpec, NetworkModel, TrainConfig};
use crate::sampling::{plan_balanced, plan_inverse_imbalanced, InverseSamplerConfig};
use crate::seed;

/// Candidates scored per forward pass during inference.
pub const INFERENCE_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct StageModel {
    pub model: NetworkModel,
    /// Candidates with probability `>= threshold` pass.
    pub threshold: f64,
    /// 1-based position in the cascade.
    pub stage_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalCombine {
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub stages: Vec<StageModel>,
    pub final_models: Vec<NetworkModel>,
    pub final_combine: FinalCombine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_id: u64,
    pub score: f64,
    /// Set only when a single-sided stage rejected the candidate.
    pub filtered_at_stage: Option<usize>,
}

/// Candidate sets seen by each single-sided stage: `inputs[i]` is the test
/// set of stage `i + 1` and `survivors[i]` the suspicious candidates it hands on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CascadeTrace {
    pub inputs: Vec<Vec<u64>>,
    pub survivors: Vec<Vec<u64>>,
}

impl CascadeModel {
    pub fn validate(&self) -> Result<()> {
        if self.final_models.is_empty() {
            return Err(Error::Config("a cascade needs at least one balanced model".into()));
        }
        for s in &self.stages {
            if !(0.0..=1.0).contains(&s.threshold) {
                return Err(Error::Config(format!(
                    "stage {} threshold {} outside [0, 1]",
                    s.stage_index, s.threshold
                )));
            }
        }
        Ok(())
    }

    /// Every model in cascade order: single-sided stages, then balanced models.
    pub fn all_models(&self) -> Vec<&NetworkModel> {
        self.stages
            .iter()
            .map(|s| &s.model)
            .chain(self.final_models.iter())
            .collect()
    }

    fn combine(&self, probs: &[f64]) -> f64 {
        match self.final_combine {
            FinalCombine::Mean => probs.iter().sum::<f64>() / probs.len() as f64,
        }
    }
}

/// Nodule probability of `model` for each id, in order.
pub fn predict_ids(model: &NetworkModel, ids: &[u64], store: &PatchStore) -> Result<Vec<f64>> {
    if model.input_shape() != patch_input_shape() {
        return Err(Error::Shape(format!(
            "model input {:?} does not match patch shape {:?}",
            model.input_shape(),
            patch_input_shape()
        )));
    }
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(INFERENCE_CHUNK) {
        out.extend(model.predict_positive(&store.batch(chunk)?, INFERENCE_CHUNK)?);
    }
    Ok(out)
}

/// Scores `candidates` through the cascade. Returned scores follow the input order.
pub fn infer_cascade(
    cascade: &CascadeModel,
    candidates: &[u64],
    store: &PatchStore,
) -> Result<(Vec<CandidateScore>, CascadeTrace)> {
    cascade.validate()?;
    let mut scores: BTreeMap<u64, CandidateScore> = BTreeMap::new();
    let mut trace = CascadeTrace::default();
    let mut current: Vec<u64> = candidates.to_vec();
    for stage in &cascade.stages {
        let probs = predict_ids(&stage.model, &current, store)?;
        let mut survivors = Vec::with_capacity(current.len());
        for (&id, p) in current.iter().zip(probs) {
            if p >= stage.threshold {
                survivors.push(id);
            } else {
                scores.insert(
                    id,
                    CandidateScore {
                        candidate_id: id,
                        score: 0.0,
                        filtered_at_stage: Some(stage.stage_index),
                    },
                );
            }
        }
        trace.inputs.push(std::mem::take(&mut current));
        trace.survivors.push(survivors.clone());
        current = survivors;
    }

    if !current.is_empty() {
        let per_model = cascade
            .final_models
            .iter()
            .map(|m| predict_ids(m, &current, store))
            .collect::<Result<Vec<_>>>()?;
        for (j, &id) in current.iter().enumerate() {
            let probs: Vec<f64> = per_model.iter().map(|p| p[j]).collect();
            scores.insert(
                id,
                CandidateScore {
                    candidate_id: id,
                    score: cascade.combine(&probs),
                    filtered_at_stage: None,
                },
            );
        }
    }
    let ordered = candidates.iter().map(|id| scores[id]).collect();
    Ok((ordered, trace))
}

/// Largest `th` such that the fraction of `probs` at or above `th` is at
/// least `target_retention`. With a target of 1.0 this is `min(probs)`.
pub fn calibrate_threshold(probs: &[f64], target_retention: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Empty("no minority probabilities to calibrate on".into()));
    }
    if !(target_retention > 0.0 && target_retention <= 1.0) {
        return Err(Error::Config(format!(
            "target retention {target_retention} outside (0, 1]"
        )));
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let needed = (1..=n)
        .find(|&c| c as f64 / n as f64 >= target_retention)
        .unwrap_or(n);
    Ok(sorted[needed - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ThresholdPolicy {
    /// Per stage, keep at least this fraction of the stage's training nodules
    /// (every augmented copy included).
    Calibrated { target_retention: f64 },
    /// One threshold shared by all stages.
    Shared(f64),
    PerStage(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub single_sided_stages: usize,
    pub balanced_models: usize,
    pub threshold: ThresholdPolicy,
    /// The seed field is replaced by a per-stage derived seed.
    pub sampler: InverseSamplerConfig,
    pub stage_train: TrainConfig,
    pub balanced_train: TrainConfig,
    pub architecture: Vec<LayerSpec>,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            single_sided_stages: 5,
            balanced_models: 5,
            threshold: ThresholdPolicy::Calibrated {
                target_retention: 1.0,
            },
            sampler: InverseSamplerConfig::default(),
            stage_train: TrainConfig::default(),
            balanced_train: TrainConfig::default(),
            architecture: nn::patch_cnn_specs(),
            seed: 0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.balanced_models == 0 {
            return Err(Error::Config("at least one balanced model is required".into()));
        }
        match &self.threshold {
            ThresholdPolicy::Calibrated { target_retention } => {
                if !(*target_retention > 0.0 && *target_retention <= 1.0) {
                    return Err(Error::Config(format!(
                        "calibration target {target_retention} outside (0, 1]"
                    )));
                }
            }
            ThresholdPolicy::Shared(t) => {
                if !(0.0..=1.0).contains(t) {
                    return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
                }
            }
            ThresholdPolicy::PerStage(ts) => {
                if ts.len() != self.single_sided_stages {
                    return Err(Error::Config(format!(
                        "{} thresholds for {} stages",
                        ts.len(),
                        self.single_sided_stages
                    )));
                }
                if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                    return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
                }
            }
        }
        self.sampler.validate()?;
        self.stage_train.validate()?;
        self.balanced_train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage_index: usize,
    /// Suspicious set handed to this stage.
    pub input_nodules: usize,
    pub input_non_nodules: usize,
    pub train_nodules: usize,
    pub train_non_nodules: usize,
    pub threshold: f64,
    pub survivor_nodules: usize,
    pub survivor_non_nodules: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrainingReport {
    pub stages: Vec<StageReport>,
    /// Suspicious set reaching the balanced stage.
    pub final_nodules: usize,
    pub final_non_nodules: usize,
}

fn new_model(config: &CascadeConfig, seed: u64) -> Result<NetworkModel> {
    NetworkModel::new(&patch_input_shape(), &config.architecture, seed)
}

/// Trains a cascade on `records` (the training folds).
///
/// Stage `i` learns from an inverse-imbalanced sample of the current
/// suspicious set, filters that set with its threshold, and hands the
/// survivors on. The balanced models then each learn from a balanced sample
/// of what is left.
pub fn train_cascade(
    records: &[CandidateRecord],
    store: &PatchStore,
    config: &CascadeConfig,
) -> Result<(CascadeModel, CascadeTrainingReport)> {
    config.validate()?;
    let mut suspicious: Vec<CandidateRecord> = records.to_vec();
    let mut stages = Vec::with_capacity(config.single_sided_stages);
    let mut report = CascadeTrainingReport::default();

    for stage_index in 1..=config.single_sided_stages {
        let (input_nodules, input_non_nodules) = class_counts(&suspicious);
        let sampler = InverseSamplerConfig {
            seed: seed::derive(config.seed, &format!("stage-{stage_index}-sampler")),
            ..config.sampler.clone()
        };
        let set = plan_inverse_imbalanced(&suspicious, &sampler)?.materialize(store)?;
        let (train_nodules, train_non_nodules) = set.class_counts();
        let train_cfg = TrainConfig {
            seed: seed::derive(config.seed, &format!("stage-{stage_index}-train")),
            ..config.stage_train.clone()
        };
        let model = nn::train(
            new_model(config, seed::derive(config.seed, &format!("stage-{stage_index}-init")))?,
            &set.to_tensor()?,
            &set.class_indices(),
            &train_cfg,
        )?;

        let threshold = match &config.threshold {
            ThresholdPolicy::Calibrated { target_retention } => {
                let probs = model.predict_positive(&set.to_tensor()?, INFERENCE_CHUNK)?;
                let nodule_probs: Vec<f64> = probs
                    .iter()
                    .zip(&set.labels)
                    .filter(|(_, &l)| l == 1)
                    .map(|(p, _)| *p)
                    .collect();
                calibrate_threshold(&nodule_probs, *target_retention)?
            }
            ThresholdPolicy::Shared(t) => *t,
            ThresholdPolicy::PerStage(ts) => ts[stage_index - 1],
        };

        let ids: Vec<u64> = suspicious.iter().map(|r| r.candidate_id).collect();
        let probs = predict_ids(&model, &ids, store)?;
        suspicious = suspicious
            .into_iter()
            .zip(probs)
            .filter(|(_, p)| *p >= threshold)
            .map(|(r, _)| r)
            .collect();
        let (survivor_nodules, survivor_non_nodules) = class_counts(&suspicious);
        log::info!(
            "stage {stage_index}: th={threshold:.6}, suspicious {input_nodules}+{input_non_nodules} -> {survivor_nodules}+{survivor_non_nodules}"
        );
        report.stages.push(StageReport {
            stage_index,
            input_nodules,
            input_non_nodules,
            train_nodules,
            train_non_nodules,
            threshold,
            survivor_nodules,
            survivor_non_nodules,
        });
        if survivor_nodules == 0 {
            return Err(Error::StageLostMinority { stage: stage_index });
        }
        stages.push(StageModel {
            model,
            threshold,
            stage_index,
        });
    }

    let (final_nodules, final_non_nodules) = class_counts(&suspicious);
    report.final_nodules = final_nodules;
    report.final_non_nodules = final_non_nodules;
    let mut final_models = Vec::with_capacity(config.balanced_models);
    for b in 1..=config.balanced_models {
        let set = plan_balanced(&suspicious, seed::derive(config.seed, &format!("balanced-{b}-sampler")))
            .map_err(|e| Error::Empty(format!("balanced stage after {} single-sided stages: {e}", stages.len())))?
            .materialize(store)?;
        let train_cfg = TrainConfig {
            seed: seed::derive(config.seed, &format!("balanced-{b}-train")),
            ..config.balanced_train.clone()
        };
        final_models.push(nn::train(
            new_model(config, seed::derive(config.seed, &format!("balanced-{b}-init")))?,
            &set.to_tensor()?,
            &set.class_indices(),
            &train_cfg,
        )?);
    }

    Ok((
        CascadeModel {
            stages,
            final_models,
            final_combine: FinalCombine::Mean,
        },
        report,
    ))
}

const DESCRIPTION_FILE: &str = "cascade.txt";

/// Writes `cascade.txt` plus one model file per stage and balanced model into `dir`.
pub fn save_cascade(cascade: &CascadeModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut desc = String::new();
    let _ = writeln!(desc, "stages={}", cascade.stages.len());
    let _ = writeln!(desc, "balanced_models={}", cascade.final_models.len());
    let _ = writeln!(desc, "final_combine=mean");
    for s in &cascade.stages {
        let file = format!("stage-{}.model", s.stage_index);
        nn::save_model(&s.model, &dir.join(&file))?;
        let _ = writeln!(desc, "stage.{}.threshold={}", s.stage_index, s.threshold);
        let _ = writeln!(desc, "stage.{}.model={file}", s.stage_index);
    }
    for (b, m) in cascade.final_models.iter().enumerate() {
        let file = format!("balanced-{}.model", b + 1);
        nn::save_model(m, &dir.join(&file))?;
        let _ = writeln!(desc, "balanced.{}.model={file}", b + 1);
    }
    let path = dir.join(DESCRIPTION_FILE);
    std::fs::write(&path, desc).map_err(|e| Error::io(&path, e))
}

pub fn load_cascade(dir: &Path) -> Result<CascadeModel> {
    let path = dir.join(DESCRIPTION_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: i as u64 + 1,
            message: "expected key=value".into(),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::format(&path, format!("missing key `{k}`")))
    };
    let count = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(&path, format!("`{k}` is not a count")))
    };
    if get("final_combine")? != "mean" {
        return Err(Error::format(&path, "unsupported final_combine"));
    }
    let mut stages = Vec::new();
    for i in 1..=count("stages")? {
        let threshold: f64 = get(&format!("stage.{i}.threshold"))?
            .parse()
            .map_err(|_| Error::format(&path, format!("bad threshold for stage {i}")))?;
        stages.push(StageModel {
            model: nn::load_model(&dir.join(get(&format!("stage.{i}.model"))?))?,
            threshold,
            stage_index: i,
        });
    }
    let final_models = (1..=count("balanced_models")?)
        .map(|b| nn::load_model(&dir.join(get(&format!("balanced.{b}.model"))?)))
        .collect::<Result<Vec<_>>>()?;
    let cascade = CascadeModel {
        stages,
        final_models,
        final_combine: FinalCombine::Mean,
    };
    cascade.validate()?;
    Ok(cascade)
}

/// `candidate_id,stage_reached,score`; survivors report the balanced stage
/// (number of single-sided stages + 1).
pub fn write_trace_csv(scores: &[CandidateScore], stages: usize, path: &Path) -> Result<()> {
    let mut out = String::from("candidate_id,stage_reached,score\n");
    for s in scores {
        let reached = s.filtered_at_stage.unwrap_or(stages + 1);
        let _ = writeln!(out, "{},{},{}", s.candidate_id, reached, s.score);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_threshold(&[0.9, 0.8, 0.95], 1.0).unwrap(), 0.8);
        assert_eq!(calibrate_threshold(&[0.9, 0.1], 0.5).unwrap(), 0.9);
        assert!(calibrate_threshold(&[], 1.0).is_err());
        assert!(calibrate_threshold(&[0.5], 0.0).is_err());
    }

    #[test]
    fn calibration_is_the_largest_admissible_threshold() {
        let mut rng = seed::rng(17);
        for _ in 0..500 {
            let n = rng.gen_range(1..30);
            // coarse values force ties
            let probs: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..10u8)) / 10.0).collect();
            let target = f64::from(rng.gen_range(1..=20u8)) / 20.0;
            let th = calibrate_threshold(&probs, target).unwrap();
            let retained = |t: f64| probs.iter().filter(|&&p| p >= t).count() as f64 / n as f64;
            assert!(retained(th) >= target);
            // exhaustive scan over every candidate threshold
            for &t in &probs {
                if t > th {
                    assert!(retained(t) < target, "{t} > {th} also satisfies {target}");
                }
            }
        }
    }
}
