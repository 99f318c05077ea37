//! `eegmm` command-line tool: synthetic data, preprocessing, features,
//! training, evaluation and ensembling.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

use eegmm::checkpoint::Checkpoint;
use eegmm::config::{apply_override, RunConfig};
use eegmm::encoders::{DualEncoder, ModelConfig};
use eegmm::manifest::DatasetManifest;
use eegmm::pipeline::{self, Split};
use eegmm::synth::{generate_synthetic, SynthSpec};
use eegmm::training::early_stop::trace_to_csv;
use eegmm::training::train_fold;

#[derive(Parser)]
#[command(name = "eegmm", version, about = "EEG-speech match-mismatch pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset whose EEG encodes the stimulus features
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON file with synthetic-spec fields
        #[arg(long)]
        config: Option<PathBuf>,
        /// override a spec field, e.g. `--set noise_sigma=0.5`
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Resample, band-filter and standardize every recording's EEG
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Build envelope, mel, word-embedding and PCA-reduced features
    Features {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Train one fold; writes checkpoint.mmck, trace.csv and run.json
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint (or an untrained model) and print a JSON report
    Eval {
        #[arg(long, required_unless_present = "untrained")]
        checkpoint: Option<PathBuf>,
        /// evaluate a freshly initialized model built from --config
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "validation")]
        split: Split,
        /// candidate-set seed; defaults to the run seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Majority-vote several checkpoints and print a JSON report
    Ensemble {
        /// checkpoint files, or one JSON file listing checkpoint paths
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "validation")]
        split: Split,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_config(path: Option<&Path>, overrides: Vec<String>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p, &overrides)?,
        None => RunConfig::from_json("{}", &overrides)?,
    })
}

fn with_flags(mut overrides: Vec<String>, fold: Option<usize>, seed: Option<u64>) -> Vec<String> {
    overrides.extend(fold.map(|f| format!("fold={f}")));
    overrides.extend(seed.map(|s| format!("train.seed={s}")));
    overrides
}

fn write_json(out: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            if let Err(e) = writeln!(stdout, "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

/// Expands a single `.json` argument into the checkpoint paths it lists.
fn checkpoint_paths(args: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if let [single] = args {
        if single.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(single).with_context(|| format!("reading {}", single.display()))?;
            let list: Vec<PathBuf> = serde_json::from_str(&text).context("checkpoint list must be a JSON array of paths")?;
            let base = single.parent().unwrap_or(Path::new(""));
            return Ok(list.into_iter().map(|p| base.join(p)).collect());
        }
    }
    Ok(args.to_vec())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, seed, config, overrides } => {
            let mut value = match &config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => serde_json::json!({}),
            };
            for o in &overrides {
                apply_override(&mut value, o)?;
            }
            if let Some(s) = seed {
                value["seed"] = s.into();
            }
            let spec: SynthSpec = serde_json::from_value(value).context("invalid synthetic spec")?;
            let m = generate_synthetic(&spec, &out)?;
            eprintln!("wrote {} recordings of {} subjects to {}", m.recordings.len(), m.subjects.len(), out.display());
        }
        Command::Preprocess { data, config, overrides } => {
            let cfg = run_config(config.as_deref(), overrides)?;
            let mut m = DatasetManifest::load(&data)?;
            pipeline::preprocess_dataset(&mut m, &cfg.bands)?;
            eprintln!("preprocessed {} recordings", m.recordings.len());
        }
        Command::Features { data, config, fold, overrides } => {
            let cfg = run_config(config.as_deref(), with_flags(overrides, fold, None))?;
            let mut m = DatasetManifest::load(&data)?;
            let written = pipeline::extract_features(&mut m, &cfg)?;
            eprintln!("wrote features: {}", written.join(", "));
        }
        Command::Train { config, data, out, fold, seed, overrides } => {
            let cfg = run_config(config.as_deref(), with_flags(overrides, fold, seed))?;
            let m = DatasetManifest::load(&data)?;
            let result = train_fold(&cfg, &m)?;
            std::fs::create_dir_all(&out)?;
            result.checkpoint.save(out.join("checkpoint.mmck"))?;
            std::fs::write(out.join("trace.csv"), trace_to_csv(&result.trace))?;
            std::fs::write(out.join("run.json"), cfg.to_json()? + "\n")?;
            eprintln!(
                "fold {}: best validation accuracy {:.4} at step {} ({} steps, stopped by {:?})",
                cfg.fold, result.checkpoint.best_val_accuracy, result.checkpoint.best_step, result.steps, result.stop
            );
        }
        Command::Eval { checkpoint, untrained, config, data, split, seed, out, overrides } => {
            let m = DatasetManifest::load(&data)?;
            let (model, cfg) = if untrained {
                let cfg = run_config(config.as_deref(), overrides)?;
                let recs = pipeline::split_recordings(&cfg, &m, split)?;
                let first = *recs.first().context("no recordings in the requested split")?;
                let eeg_channels = m.read_eeg(first, &cfg.eeg_variant)?.channels();
                let stim = m.stimulus_index(&m.recordings[first].stimulus_id).context("dangling stimulus")?;
                let feature_channels = cfg.features.iter().map(|f| m.read_feature(stim, f).map(|t| t.channels())).sum::<eegmm::Result<usize>>()?;
                let mut eeg = cfg.eeg.clone();
                eeg.in_channels = eeg_channels;
                (DualEncoder::new(ModelConfig { eeg, feature_channels }, cfg.train.seed)?, cfg)
            } else {
                if config.is_some() || !overrides.is_empty() {
                    bail!("--config/--set only apply with --untrained; a checkpoint carries its own run config");
                }
                let ck = Checkpoint::load(checkpoint.as_ref().unwrap())?;
                (ck.to_model()?, ck.run)
            };
            let report = pipeline::evaluate_model(&model, &cfg, &m, split, seed.unwrap_or(cfg.train.seed))?;
            eprintln!("accuracy {:.4} over {} candidate sets", report.accuracy, report.n);
            write_json(out.as_deref(), &report)?;
        }
        Command::Ensemble { checkpoints, data, split, seed, out } => {
            let m = DatasetManifest::load(&data)?;
            let loaded = checkpoint_paths(&checkpoints)?
                .into_iter()
                .map(|p| Ok((p.display().to_string(), Checkpoint::load(&p)?)))
                .collect::<Result<Vec<_>>>()?;
            let seed = seed.unwrap_or(loaded[0].1.run.train.seed);
            let report = pipeline::evaluate_ensemble(&loaded, &m, split, seed)?;
            eprintln!("ensemble of {} models: accuracy {:.4} over {} candidate sets", loaded.len(), report.accuracy, report.n);
            write_json(out.as_deref(), &report)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
