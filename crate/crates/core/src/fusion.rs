//! Probability vectors over M models and the fusion meta-classifier.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::cascade::{predict_ids, CandidateScore, INFERENCE_CHUNK};
use crate::data::{CandidateRecord, FoldAssignment, PatchStore};
use crate::error::{Error, Result};
use crate::nn::{self, ClassWeighting, LayerSpec, NetworkModel, Tensor, TrainConfig};
use crate::seed;

/// Per-candidate nodule probabilities from M models, one row per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    pub candidate_ids: Vec<u64>,
    pub labels: Vec<u8>,
    m: usize,
    values: Vec<f64>,
}

impl ProbabilityMatrix {
    pub fn new(candidate_ids: Vec<u64>, labels: Vec<u8>, m: usize, values: Vec<f64>) -> Result<Self> {
        let n = candidate_ids.len();
        if labels.len() != n || values.len() != n * m {
            return Err(Error::Shape(format!(
                "{n} candidates, {} labels and {} values for {m} models",
                labels.len(),
                values.len()
            )));
        }
        if m == 0 {
            return Err(Error::Config("probability matrix needs at least one model".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("probability {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Config(format!("label {l} is not 0 or 1")));
        }
        Ok(Self {
            candidate_ids,
            labels,
            m,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.values[i * self.m + j]).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn rows_tensor(&self, rows: &[usize]) -> Result<Tensor> {
        let data = rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Tensor::new(vec![rows.len(), self.m], data)
    }

    /// Writes `candidate_id,label,p1..pM`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("candidate_id,label");
        for j in 1..=self.m {
            let _ = write!(out, ",p{j}");
        }
        out.push('\n');
        for i in 0..self.n() {
            let _ = write!(out, "{},{}", self.candidate_ids[i], self.labels[i]);
            for v in self.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let parse_err = |line: u64, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut records = reader.records();
        let header = records
            .next()
            .ok_or_else(|| Error::format(path, "empty file"))?
            .map_err(|e| parse_err(1, e.to_string()))?;
        let m = header.len().saturating_sub(2);
        let expected: Vec<String> = ["candidate_id".to_string(), "label".to_string()]
            .into_iter()
            .chain((1..=m).map(|j| format!("p{j}")))
            .collect();
        if m == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(parse_err(1, "expected header candidate_id,label,p1..pM".into()));
        }
        let (mut ids, mut labels, mut values) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in records.enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            if rec.len() != m + 2 {
                return Err(parse_err(line, format!("expected {} fields, got {}", m + 2, rec.len())));
            }
            ids.push(rec[0].parse().map_err(|_| parse_err(line, format!("bad candidate_id `{}`", &rec[0])))?);
            labels.push(rec[1].parse().map_err(|_| parse_err(line, format!("bad label `{}`", &rec[1])))?);
            for field in rec.iter().skip(2) {
                values.push(field.parse().map_err(|_| parse_err(line, format!("bad probability `{field}`")))?);
            }
        }
        Self::new(ids, labels, m, values).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Every model scores every candidate; column `j` holds model `j`.
pub fn build_probability_vectors(
    models: &[&NetworkModel],
    candidates: &[CandidateRecord],
    store: &PatchStore,
) -> Result<ProbabilityMatrix> {
    if models.is_empty() {
        return Err(Error::Config("no models to build probability vectors from".into()));
    }
    let ids: Vec<u64> = candidates.iter().map(|r| r.candidate_id).collect();
    let columns = models
        .iter()
        .map(|m| predict_ids(m, &ids, store))
        .collect::<Result<Vec<_>>>()?;
    let m = models.len();
    let mut values = vec![0.0; ids.len() * m];
    for (j, col) in columns.iter().enumerate() {
        for (i, &p) in col.iter().enumerate() {
            values[i * m + j] = p;
        }
    }
    ProbabilityMatrix::new(ids, candidates.iter().map(|r| r.label).collect(), m, values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionNetSpec {
    pub input_units: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output: usize,
    pub dropout_rate: f64,
}

impl FusionNetSpec {
    pub fn for_inputs(m: usize) -> Self {
        Self {
            input_units: m,
            hidden1: 70,
            hidden2: 20,
            output: 2,
            dropout_rate: 0.5,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense { in_units: self.input_units, out_units: self.hidden1 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: self.dropout_rate },
            LayerSpec::Dense { in_units: self.hidden1, out_units: self.hidden2 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: self.dropout_rate },
            LayerSpec::Dense { in_units: self.hidden2, out_units: self.output },
            LayerSpec::Softmax,
        ]
    }
}

pub fn build_fusion_net(spec: &FusionNetSpec, seed: u64) -> Result<NetworkModel> {
    NetworkModel::new(&[spec.input_units], &spec.layers(), seed)
}

pub fn default_fusion_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        epochs: 30,
        batch_size: 256,
        seed: 0,
        shuffle: true,
        class_weighting: ClassWeighting::InverseFrequency,
    }
}

#[derive(Debug, Clone)]
pub struct FusionCvResult {
    pub models: Vec<NetworkModel>,
    /// One score per matrix row, in row order.
    pub scores: Vec<CandidateScore>,
    /// Candidate ids each fold's model was trained on.
    pub train_ids: Vec<BTreeSet<u64>>,
    /// Candidate ids each fold's model scored.
    pub test_ids: Vec<BTreeSet<u64>>,
}

/// K-fold fusion training: the net for fold `f` learns from rows outside `f`
/// and scores the rows inside it.
pub fn train_fusion_cv(
    matrix: &ProbabilityMatrix,
    folds: &FoldAssignment,
    spec: &FusionNetSpec,
    config: &TrainConfig,
) -> Result<FusionCvResult> {
    if spec.input_units != matrix.m() {
        return Err(Error::Shape(format!(
            "fusion net expects {} inputs but the matrix has {} models",
            spec.input_units,
            matrix.m()
        )));
    }
    let row_fold = matrix
        .candidate_ids
        .iter()
        .map(|&id| {
            folds
                .fold_of(id)
                .ok_or_else(|| Error::Config(format!("candidate {id} has no fold")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut scores: Vec<Option<CandidateScore>> = vec![None; matrix.n()];
    let mut result = FusionCvResult {
        models: Vec::with_capacity(folds.k()),
        scores: Vec::new(),
        train_ids: Vec::with_capacity(folds.k()),
        test_ids: Vec::with_capacity(folds.k()),
    };
    for f in 0..folds.k() {
        let (test_rows, train_rows): (Vec<usize>, Vec<usize>) =
            (0..matrix.n()).partition(|&i| row_fold[i] == f);
        if !train_rows.iter().any(|&i| matrix.labels[i] == 1) {
            return Err(Error::FoldWithoutMinority { fold: f });
        }
        let labels: Vec<usize> = train_rows.iter().map(|&i| usize::from(matrix.labels[i])).collect();
        let train_cfg = TrainConfig {
            seed: seed::derive(config.seed, &format!("fusion-fold-{f}-train")),
            ..config.clone()
        };
        let model = nn::train(
            build_fusion_net(spec, seed::derive(config.seed, &format!("fusion-fold-{f}-init")))?,
            &matrix.rows_tensor(&train_rows)?,
            &labels,
            &train_cfg,
        )?;
        if !test_rows.is_empty() {
            let probs = model.predict_positive(&matrix.rows_tensor(&test_rows)?, INFERENCE_CHUNK)?;
            for (&i, p) in test_rows.iter().zip(probs) {
                scores[i] = Some(CandidateScore {
                    candidate_id: matrix.candidate_ids[i],
                    score: p,
                    filtered_at_stage: None,
                });
            }
        }
        result.train_ids.push(train_rows.iter().map(|&i| matrix.candidate_ids[i]).collect());
        result.test_ids.push(test_rows.iter().map(|&i| matrix.candidate_ids[i]).collect());
        result.models.push(model);
    }
    result.scores = scores
        .into_iter()
        .map(|s| s.expect("every row belongs to exactly one fold"))
        .collect();
    Ok(result)
}

/// Row means of the matrix, the untrained fusion baseline.
pub fn mean_baseline(matrix: &ProbabilityMatrix) -> Vec<CandidateScore> {
    (0..matrix.n())
        .map(|i| CandidateScore {
            candidate_id: matrix.candidate_ids[i],
            score: matrix.row(i).iter().sum::<f64>() / matrix.m() as f64,
            filtered_at_stage: None,
        })
        .collect()
}
