//! Dataset-level steps behind the command-line tool: EEG preprocessing,
//! feature extraction, checkpoint evaluation and ensembling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{standardize_lenient, SegmentedData};
use crate::dsp::{lowpass_embedding, multiband_eeg, BandSpec};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::eval::{accuracy, build_candidate_sets, ensemble_predict, predict_sets, CandidateSet, Prediction};
use crate::features::{
    continuous_word_embedding, envelope, mel_spectrogram, pca_fit_series, pca_transform_series, read_wav, read_words, FEATURE_RATE_HZ,
};
use crate::manifest::DatasetManifest;
use crate::mmts;
use crate::series::{resample, TimeSeries};
use crate::training::folds::FoldSpec;
use crate::training::resolve_folds;

pub const EEG_RATE_HZ: f64 = 64.0;
pub const BROADBAND: &str = "broadband";
pub const MULTIBAND: &str = "multiband";
/// Feature name of the continuous word embedding built from a words file.
pub const WORD_FEATURE: &str = "gpt";

fn file_stem(rel: &str) -> String {
    std::path::Path::new(rel).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| rel.to_string())
}

/// Writes the `broadband` (64 Hz, standardized) and `multiband` (band-passed
/// per `bands`, channels concatenated band-major, standardized) EEG of every
/// recording and registers them in the manifest, which is saved.
pub fn preprocess_dataset(manifest: &mut DatasetManifest, bands: &[BandSpec]) -> Result<()> {
    let root = manifest.root().to_path_buf();
    std::fs::create_dir_all(root.join("derived"))?;
    for i in 0..manifest.recordings.len() {
        let raw = manifest.read_eeg(i, "raw")?;
        let base = resample(&raw, EEG_RATE_HZ)?;
        let broadband = standardize_lenient(&base)?;
        let multiband = standardize_lenient(&multiband_eeg(&base, bands)?)?;
        let stem = file_stem(&manifest.recordings[i].eeg);
        for (name, ts) in [(BROADBAND, &broadband), (MULTIBAND, &multiband)] {
            let rel = format!("derived/{stem}_{name}.mmts");
            mmts::write(root.join(&rel), ts)?;
            manifest.recordings[i].variants.insert(name.to_string(), rel);
        }
    }
    manifest.save(&root)
}

fn register_feature(manifest: &mut DatasetManifest, stim: usize, name: &str, ts: &TimeSeries) -> Result<()> {
    let rel = format!("derived/{}_{name}.mmts", manifest.stimuli[stim].id);
    mmts::write(manifest.root().join(&rel), ts)?;
    manifest.stimuli[stim].features.insert(name.to_string(), rel);
    Ok(())
}

/// Stimuli heard in the training recordings of `fold`.
fn training_stimuli(manifest: &DatasetManifest, fold: &FoldSpec) -> BTreeSet<usize> {
    fold.train_recordings
        .iter()
        .filter_map(|&r| manifest.stimulus_index(&manifest.recordings[r].stimulus_id))
        .collect()
}

/// Builds the derived feature streams of every stimulus:
///
/// - `env` and `mel` from the stimulus audio, when present;
/// - `gpt` (continuous word embedding at 64 Hz) from the words file, when present;
/// - `<name>_pca` for every `run.pca` entry, fitted on the training stimuli
///   of the configured fold only, then resampled to 64 Hz. The word-embedding
///   reduction `gpt_pca` is additionally low-passed at `run.word_lowpass_hz`.
///
/// Returns the names of the features written. The manifest is saved.
pub fn extract_features(manifest: &mut DatasetManifest, run: &RunConfig) -> Result<Vec<String>> {
    std::fs::create_dir_all(manifest.root().join("derived"))?;
    let mut written = BTreeSet::new();
    for s in 0..manifest.stimuli.len() {
        if let Some(audio) = manifest.stimuli[s].audio.clone() {
            let wav = read_wav(manifest.resolve(&audio))?;
            register_feature(manifest, s, "env", &envelope(&wav)?)?;
            register_feature(manifest, s, "mel", &mel_spectrogram(&wav)?)?;
            written.extend(["env".to_string(), "mel".to_string()]);
        }
        if let Some(words) = manifest.stimuli[s].words.clone() {
            let (tokens, width) = read_words(manifest.resolve(&words))?;
            let duration = stimulus_duration(manifest, s)?
                .or_else(|| tokens.last().map(|w| w.offset_s))
                .ok_or_else(|| Error::EmptyInput(format!("stimulus `{}` has no words and no other feature", manifest.stimuli[s].id)))?;
            register_feature(manifest, s, WORD_FEATURE, &continuous_word_embedding(&tokens, width, duration)?)?;
            written.insert(WORD_FEATURE.to_string());
        }
    }

    if !run.pca.is_empty() {
        let folds = resolve_folds(run, manifest)?;
        let fold = folds.get(run.fold).ok_or_else(|| Error::InvalidArgument(format!("fold {} out of range", run.fold)))?;
        let fit_on = training_stimuli(manifest, fold);
        for (name, &k) in &run.pca {
            if !has_feature(manifest, name) {
                log::warn!("no stimulus has feature `{name}`; skipping its PCA");
                continue;
            }
            let train: Vec<TimeSeries> =
                fit_on.iter().map(|&s| manifest.read_feature(s, name)).collect::<Result<_>>()?;
            let model = pca_fit_series(&train.iter().collect::<Vec<_>>(), k)?;
            let out_name = format!("{name}_pca");
            for s in 0..manifest.stimuli.len() {
                if !manifest.stimuli[s].features.contains_key(name) {
                    continue;
                }
                let reduced = resample(&pca_transform_series(&model, &manifest.read_feature(s, name)?)?, FEATURE_RATE_HZ)?;
                let reduced = if name == WORD_FEATURE { lowpass_embedding(&reduced, run.word_lowpass_hz)? } else { reduced };
                register_feature(manifest, s, &out_name, &reduced)?;
            }
            written.insert(out_name);
        }
    }
    let root = manifest.root().to_path_buf();
    manifest.save(&root)?;
    Ok(written.into_iter().collect())
}

fn has_feature(manifest: &DatasetManifest, name: &str) -> bool {
    manifest.stimuli.iter().any(|s| s.features.contains_key(name))
}

/// Duration implied by the stimulus' first existing feature file.
fn stimulus_duration(manifest: &DatasetManifest, s: usize) -> Result<Option<f64>> {
    match manifest.stimuli[s].features.keys().next().cloned() {
        Some(name) => Ok(Some(manifest.read_feature(s, &name)?.duration_s())),
        None => Ok(None),
    }
}

/// Which recordings of the checkpoint's fold to evaluate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Validation,
    Train,
    All,
}

pub fn split_recordings(run: &RunConfig, manifest: &DatasetManifest, split: Split) -> Result<Vec<usize>> {
    if split == Split::All {
        return Ok((0..manifest.recordings.len()).collect());
    }
    let folds = resolve_folds(run, manifest)?;
    let fold = folds.get(run.fold).ok_or_else(|| Error::InvalidArgument(format!("fold {} out of range", run.fold)))?;
    Ok(match split {
        Split::Validation => fold.validation_recordings.clone(),
        _ => fold.train_recordings.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub predicted: usize,
    pub matched: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub per_set: Vec<SetReport>,
}

impl EvalReport {
    fn new(sets: &[CandidateSet], predicted: Vec<usize>, scores: Vec<Vec<f64>>) -> Self {
        let per_set: Vec<SetReport> = sets
            .iter()
            .zip(predicted)
            .zip(scores)
            .map(|((s, predicted), scores)| SetReport { predicted, matched: s.matched_index, scores })
            .collect();
        let hits = per_set.iter().filter(|r| r.predicted == r.matched).count();
        let n = per_set.len();
        Self { accuracy: if n == 0 { f64::NAN } else { hits as f64 / n as f64 }, n, per_set }
    }
}

fn load_split(run: &RunConfig, manifest: &DatasetManifest, split: Split) -> Result<SegmentedData> {
    let recs = split_recordings(run, manifest, split)?;
    if recs.is_empty() {
        return Err(Error::EmptyValidation);
    }
    SegmentedData::load(manifest, &recs, &run.eeg_variant, &run.features, run.train.segment_seconds, run.train.standardize)
}

/// Candidate sets drawn exactly as during training validation.
fn candidate_sets(run: &RunConfig, data: &SegmentedData, seed: u64) -> Result<Vec<CandidateSet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    build_candidate_sets(data, run.train.n_val_negatives, &mut rng)
}

/// Evaluates one model; `seed` selects the candidate sets.
pub fn evaluate_model(model: &DualEncoder, run: &RunConfig, manifest: &DatasetManifest, split: Split, seed: u64) -> Result<EvalReport> {
    let data = load_split(run, manifest, split)?;
    let sets = candidate_sets(run, &data, seed)?;
    let preds = predict_sets(model, &data, &sets)?;
    let (predicted, scores): (Vec<usize>, Vec<Vec<f64>>) = preds.into_iter().map(|p| (p.predicted, p.scores)).unzip();
    Ok(EvalReport::new(&sets, predicted, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub checkpoint: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub accuracy: f64,
    pub n: usize,
    /// scores are summed over members
    pub per_set: Vec<SetReport>,
    pub members: Vec<MemberReport>,
}

/// Plurality-vote ensemble over checkpoints that share fold, segment length
/// and recordings; each member reads its own EEG variant and features.
/// Candidate sets come from the first member's data.
pub fn evaluate_ensemble(checkpoints: &[(String, Checkpoint)], manifest: &DatasetManifest, split: Split, seed: u64) -> Result<EnsembleReport> {
    let (_, first) = checkpoints.first().ok_or_else(|| Error::EmptyInput("no checkpoints".into()))?;
    let base = load_split(&first.run, manifest, split)?;
    let sets = candidate_sets(&first.run, &base, seed)?;
    let mut per_model: Vec<Vec<Prediction>> = Vec::with_capacity(checkpoints.len());
    let mut members = Vec::with_capacity(checkpoints.len());
    for (name, ck) in checkpoints {
        if ck.fold != first.fold || ck.run.train.segment_seconds != first.run.train.segment_seconds {
            return Err(Error::ConfigMismatch(format!("checkpoint `{name}` uses a different fold or segment length")));
        }
        let data = load_split(&ck.run, manifest, split)?;
        let same_layout = data.recordings.len() == base.recordings.len()
            && data.recordings.iter().zip(&base.recordings).all(|(a, b)| a.manifest_index == b.manifest_index && a.n_segments == b.n_segments);
        if !same_layout {
            return Err(Error::ConfigMismatch(format!("checkpoint `{name}` segments the recordings differently")));
        }
        let preds = predict_sets(&ck.to_model()?, &data, &sets)?;
        members.push(MemberReport { checkpoint: name.clone(), accuracy: accuracy(&preds, &sets) });
        per_model.push(preds);
    }
    let predicted = ensemble_predict(&per_model)?;
    let summed: Vec<Vec<f64>> = (0..sets.len())
        .map(|s| {
            let mut acc = vec![0.0; sets[s].candidates.len()];
            for m in &per_model {
                acc.iter_mut().zip(&m[s].scores).for_each(|(a, v)| *a += v);
            }
            acc
        })
        .collect();
    let report = EvalReport::new(&sets, predicted, summed);
    Ok(EnsembleReport { accuracy: report.accuracy, n: report.n, per_set: report.per_set, members })
}
