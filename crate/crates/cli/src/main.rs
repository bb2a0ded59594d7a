use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nodule_core::config::{Manifest, PipelineConfig};
use nodule_core::data::SyntheticConfig;
use nodule_core::nn::gradient_check_suite;
use nodule_core::pipeline;
use nodule_core::Error;

#[derive(Parser, Debug)]
#[command(name = "nodule", version, about = "Cascaded nodule candidate classification with fusion and FROC evaluation")]
struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Config override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Candidates CSV (`seriesuid,coordX,coordY,coordZ,class`).
    #[arg(long)]
    candidates: Option<PathBuf>,

    /// Patch store written by `synth` or an external extractor.
    #[arg(long)]
    patches: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic candidate list and patch store.
    Synth {
        #[arg(long, default_value_t = 10)]
        positives: usize,
        #[arg(long, default_value_t = 1000)]
        negatives: usize,
        /// Nodule blob peak intensity.
        #[arg(long, default_value_t = 0.3)]
        separation: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Train a cascade on every candidate and write its models and trace.
    TrainCascade(DataArgs),
    /// Score every candidate with every model of a saved cascade.
    BuildVectors {
        #[command(flatten)]
        data: DataArgs,
        /// Directory written by `train-cascade` (its `cascade` subdirectory).
        #[arg(long)]
        cascade: PathBuf,
    },
    /// Cross-validated fusion over a probability-vector CSV.
    TrainFusion {
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        vectors: PathBuf,
    },
    /// FROC report from one or more `candidate_id,scan_id,label,score` files.
    Evaluate {
        /// `NAME=PATH` or `PATH` (named after the file stem). Repeatable.
        #[arg(long, required = true)]
        scores: Vec<String>,
    },
    /// Out-of-fold cascade, probability vectors, fusion and FROC report.
    Pipeline(DataArgs),
    /// Finite-difference gradient verification of every layer kind.
    GradientCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
}

fn load_config(cli: &Cli, data: Option<&DataArgs>) -> Result<PipelineConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| match e {
            Error::Parse { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    if let Some(d) = data {
        if let Some(p) = &d.candidates {
            config.candidates = Some(p.clone());
        }
        if let Some(p) = &d.patches {
            config.patches = Some(p.clone());
        }
    }
    config.validate()?;
    Ok(config)
}

fn require_out(cli: &Cli, config: Option<&PipelineConfig>) -> Result<PathBuf, Error> {
    cli.out
        .clone()
        .or_else(|| config.and_then(|c| c.out.clone()))
        .ok_or_else(|| Error::Config("an output directory is required (--out)".into()))
}

fn named_scores(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) => (name.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(spec);
            let name = path
                .file_stem()
                .map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
            (name, path)
        }
    }
}

fn summarize(manifest: &Manifest, out: &Path) {
    for (k, v) in manifest.entries() {
        if k.starts_with("froc.") && k.ends_with(".cpm") {
            println!("{k} = {v}");
        }
    }
    println!("outputs written to {}", out.display());
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth {
            positives,
            negatives,
            separation,
            noise,
        } => {
            let file_config = match &cli.config {
                Some(_) => Some(load_config(cli, None)?),
                None => None,
            };
            let seed = cli
                .seed
                .or_else(|| file_config.as_ref().and_then(|c| c.seed))
                .ok_or_else(|| Error::Config("a seed is required (--seed)".into()))?;
            let out = require_out(cli, file_config.as_ref())?;
            let config = SyntheticConfig {
                n_positive: *positives,
                n_negative: *negatives,
                separation: *separation,
                noise_sigma: *noise,
                seed,
            };
            config.validate()?;
            let m = pipeline::run_synth(&config, &out)?;
            println!(
                "{} candidates ({} nodules) over {} scans",
                m.get("data.candidates").unwrap_or("?"),
                m.get("data.nodules").unwrap_or("?"),
                m.get("data.scans").unwrap_or("?")
            );
            summarize(&m, &out);
        }
        Command::TrainCascade(data) => {
            let config = load_config(cli, Some(data))?;
            let m = pipeline::run_train_cascade(&config)?;
            summarize(&m, config.out.as_deref().unwrap_or(Path::new(".")));
        }
        Command::BuildVectors { data, cascade } => {
            let config = load_config(cli, Some(data))?;
            let m = pipeline::run_build_vectors(&config, cascade)?;
            summarize(&m, config.out.as_deref().unwrap_or(Path::new(".")));
        }
        Command::TrainFusion { candidates, vectors } => {
            let data = DataArgs {
                candidates: candidates.clone(),
                patches: None,
            };
            let config = load_config(cli, Some(&data))?;
            let m = pipeline::run_train_fusion(&config, vectors)?;
            summarize(&m, config.out.as_deref().unwrap_or(Path::new(".")));
        }
        Command::Evaluate { scores } => {
            let out = require_out(cli, None)?;
            let inputs: Vec<(String, PathBuf)> = scores.iter().map(|s| named_scores(s)).collect();
            let m = pipeline::run_evaluate(&inputs, &out)?;
            summarize(&m, &out);
        }
        Command::Pipeline(data) => {
            let config = load_config(cli, Some(data))?;
            let m = pipeline::run_pipeline(&config)?.manifest;
            summarize(&m, config.out.as_deref().unwrap_or(Path::new(".")));
        }
        Command::GradientCheck { seeds, epsilon } => {
            if *seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()).into());
            }
            let results = gradient_check_suite(*seeds, *epsilon)?;
            let mut failed = 0;
            for r in &results {
                println!(
                    "{:<36} seed {:>3}  max rel error {:.3e}  (tolerance {:.0e}, {} probes, {} kinks skipped)  {}",
                    r.network.name(),
                    r.seed,
                    r.report.max_relative_error,
                    r.network.tolerance(),
                    r.report.probes,
                    r.report.kinks_skipped,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(CliError::Failed(format!(
                    "{failed} of {} gradient checks exceeded tolerance",
                    results.len()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
