//! Plain-text `key = value` run configuration.
//!
//! A config file is read first, then overrides are applied in order. Every
//! setting has a canonical text form; its SHA-256 identifies a run.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::cascade::{CascadeConfig, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::fusion::{default_fusion_train_config, FusionNetSpec};
use crate::nn::{patch_cnn, ClassWeighting, PatchCnnWidths, TrainConfig};
use crate::sampling::InverseSamplerConfig;

/// Which cascade models feed the probability vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionModels {
    All,
    SingleSided,
    Balanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub candidates: Option<PathBuf>,
    pub patches: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub folds: usize,
    pub stages: usize,
    pub balanced_models: usize,
    pub calibration_target: f64,
    /// Empty means calibrated thresholds; one value is shared by all stages.
    pub thresholds: Vec<f64>,
    pub sampler: InverseSamplerConfig,
    pub cnn: PatchCnnWidths,
    pub stage_train: TrainConfig,
    pub balanced_train: TrainConfig,
    pub fusion_hidden1: usize,
    pub fusion_hidden2: usize,
    pub fusion_dropout: f64,
    pub fusion_train: TrainConfig,
    pub fusion_models: FusionModels,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let spec = FusionNetSpec::for_inputs(1);
        Self {
            candidates: None,
            patches: None,
            out: None,
            seed: None,
            folds: 10,
            stages: 5,
            balanced_models: 5,
            calibration_target: 1.0,
            thresholds: Vec::new(),
            sampler: InverseSamplerConfig::default(),
            cnn: PatchCnnWidths::default(),
            stage_train: TrainConfig::default(),
            balanced_train: TrainConfig::default(),
            fusion_hidden1: spec.hidden1,
            fusion_hidden2: spec.hidden2,
            fusion_dropout: spec.dropout_rate,
            fusion_train: default_fusion_train_config(),
            fusion_models: FusionModels::All,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_weighting(key: &str, value: &str) -> Result<ClassWeighting> {
    match value {
        "none" => Ok(ClassWeighting::None),
        "inverse_frequency" => Ok(ClassWeighting::InverseFrequency),
        _ => Err(Error::Config(format!(
            "`{key}`: expected none or inverse_frequency, got `{value}`"
        ))),
    }
}

fn weighting_name(w: ClassWeighting) -> &'static str {
    match w {
        ClassWeighting::None => "none",
        ClassWeighting::InverseFrequency => "inverse_frequency",
    }
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "learning_rate" => t.learning_rate = parse(key, value)?,
        "epochs" => t.epochs = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        "shuffle" => t.shuffle = parse(key, value)?,
        "class_weighting" => t.class_weighting = parse_weighting(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn push_train(out: &mut Vec<(String, String)>, prefix: &str, t: &TrainConfig) {
    out.push((format!("{prefix}.batch_size"), t.batch_size.to_string()));
    out.push((format!("{prefix}.class_weighting"), weighting_name(t.class_weighting).into()));
    out.push((format!("{prefix}.epochs"), t.epochs.to_string()));
    out.push((format!("{prefix}.learning_rate"), t.learning_rate.to_string()));
    out.push((format!("{prefix}.shuffle"), t.shuffle.to_string()));
}

/// Splits `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i as u64 + 1,
            message: format!("expected key = value, got `{line}`"),
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::default();
        for (k, v) in parse_pairs(&text, path)? {
            config.set(&k, &v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
                other => other,
            })?;
        }
        Ok(config)
    }

    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "candidates" => self.candidates = Some(PathBuf::from(value)),
            "patches" => self.patches = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "seed" => self.seed = Some(parse(key, value)?),
            "folds" => self.folds = parse(key, value)?,
            "stages" => self.stages = parse(key, value)?,
            "balanced_models" => self.balanced_models = parse(key, value)?,
            "calibration_target" => self.calibration_target = parse(key, value)?,
            "thresholds" => {
                self.thresholds = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|t| parse(key, t.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "sampler.majority_subsample" => self.sampler.majority_subsample = parse(key, value)?,
            "sampler.oversample_factor" => self.sampler.minority_oversample_factor = parse(key, value)?,
            "sampler.rotation_min" => self.sampler.rotation_range_degrees.0 = parse(key, value)?,
            "sampler.rotation_max" => self.sampler.rotation_range_degrees.1 = parse(key, value)?,
            "sampler.scale_min" => self.sampler.scale_range.0 = parse(key, value)?,
            "sampler.scale_max" => self.sampler.scale_range.1 = parse(key, value)?,
            "cnn.conv1_channels" => self.cnn.conv1_channels = parse(key, value)?,
            "cnn.conv2_channels" => self.cnn.conv2_channels = parse(key, value)?,
            "cnn.hidden_units" => self.cnn.hidden_units = parse(key, value)?,
            "cnn.dropout" => self.cnn.dropout = parse(key, value)?,
            "fusion.hidden1" => self.fusion_hidden1 = parse(key, value)?,
            "fusion.hidden2" => self.fusion_hidden2 = parse(key, value)?,
            "fusion.dropout" => self.fusion_dropout = parse(key, value)?,
            "fusion.models" => {
                self.fusion_models = match value {
                    "all" => FusionModels::All,
                    "single_sided" => FusionModels::SingleSided,
                    "balanced" => FusionModels::Balanced,
                    _ => {
                        return Err(Error::Config(format!(
                            "`{key}`: expected all, single_sided or balanced, got `{value}`"
                        )))
                    }
                }
            }
            _ => {
                let handled = match key.split_once('.') {
                    Some(("stage_train", f)) => set_train(&mut self.stage_train, f, key, value)?,
                    Some(("balanced_train", f)) => set_train(&mut self.balanced_train, f, key, value)?,
                    Some(("fusion_train", f)) => set_train(&mut self.fusion_train, f, key, value)?,
                    _ => false,
                };
                if !handled {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Sorted settings that determine results. Input and output paths are
    /// left out so that relocated reruns hash the same.
    pub fn canonical_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("balanced_models".to_string(), self.balanced_models.to_string()),
            ("calibration_target".into(), self.calibration_target.to_string()),
            ("cnn.conv1_channels".into(), self.cnn.conv1_channels.to_string()),
            ("cnn.conv2_channels".into(), self.cnn.conv2_channels.to_string()),
            ("cnn.dropout".into(), self.cnn.dropout.to_string()),
            ("cnn.hidden_units".into(), self.cnn.hidden_units.to_string()),
            ("folds".into(), self.folds.to_string()),
            ("fusion.dropout".into(), self.fusion_dropout.to_string()),
            ("fusion.hidden1".into(), self.fusion_hidden1.to_string()),
            ("fusion.hidden2".into(), self.fusion_hidden2.to_string()),
            (
                "fusion.models".into(),
                match self.fusion_models {
                    FusionModels::All => "all",
                    FusionModels::SingleSided => "single_sided",
                    FusionModels::Balanced => "balanced",
                }
                .into(),
            ),
            ("sampler.majority_subsample".into(), self.sampler.majority_subsample.to_string()),
            ("sampler.oversample_factor".into(), self.sampler.minority_oversample_factor.to_string()),
            ("sampler.rotation_max".into(), self.sampler.rotation_range_degrees.1.to_string()),
            ("sampler.rotation_min".into(), self.sampler.rotation_range_degrees.0.to_string()),
            ("sampler.scale_max".into(), self.sampler.scale_range.1.to_string()),
            ("sampler.scale_min".into(), self.sampler.scale_range.0.to_string()),
            ("seed".into(), self.seed.map_or_else(|| "unset".into(), |s| s.to_string())),
            ("stages".into(), self.stages.to_string()),
            ("thresholds".into(), join(&self.thresholds)),
        ];
        push_train(&mut out, "balanced_train", &self.balanced_train);
        push_train(&mut out, "fusion_train", &self.fusion_train);
        push_train(&mut out, "stage_train", &self.stage_train);
        out.sort();
        out
    }

    pub fn canonical_text(&self) -> String {
        self.canonical_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (`seed` key or --seed)".into()))
    }

    pub fn require_path<'a>(&'a self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("`{key}` is not set")))
    }

    pub fn threshold_policy(&self) -> Result<ThresholdPolicy> {
        Ok(match self.thresholds.len() {
            0 => ThresholdPolicy::Calibrated {
                target_retention: self.calibration_target,
            },
            1 => ThresholdPolicy::Shared(self.thresholds[0]),
            n if n == self.stages => ThresholdPolicy::PerStage(self.thresholds.clone()),
            n => {
                return Err(Error::Config(format!(
                    "{n} thresholds given for {} stages",
                    self.stages
                )))
            }
        })
    }

    pub fn cascade_config(&self) -> Result<CascadeConfig> {
        let config = CascadeConfig {
            single_sided_stages: self.stages,
            balanced_models: self.balanced_models,
            threshold: self.threshold_policy()?,
            sampler: self.sampler.clone(),
            stage_train: self.stage_train.clone(),
            balanced_train: self.balanced_train.clone(),
            architecture: patch_cnn(self.cnn),
            seed: self.require_seed()?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn fusion_spec(&self, m: usize) -> FusionNetSpec {
        FusionNetSpec {
            input_units: m,
            hidden1: self.fusion_hidden1,
            hidden2: self.fusion_hidden2,
            output: 2,
            dropout_rate: self.fusion_dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.require_seed()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.cnn.conv1_channels == 0 || self.cnn.conv2_channels == 0 || self.cnn.hidden_units == 0 {
            return Err(Error::Config("cnn widths must be positive".into()));
        }
        if self.fusion_hidden1 == 0 || self.fusion_hidden2 == 0 {
            return Err(Error::Config("fusion layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.fusion_dropout) || !(0.0..1.0).contains(&self.cnn.dropout) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        self.fusion_train.validate()?;
        self.cascade_config().map(|_| ())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Deterministic `key=value` run record, written in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        Ok(Self {
            entries: parse_pairs(text, origin)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Shared run header: config hash, seed and the resolved settings.
pub fn manifest_header(command: &str, config: &PipelineConfig) -> Manifest {
    let mut m = Manifest::default();
    m.push("command", command);
    m.push("config_hash", config.hash());
    m.push("seed", config.seed.map_or_else(|| "unset".into(), |s| s.to_string()));
    for (k, v) in config.canonical_pairs() {
        m.push(format!("config.{k}"), v);
    }
    m
}
