//! Contrastive training: negative sampling, folds, Adam and the
//! early-stopped training loop.

pub mod adam;
pub mod early_stop;
pub mod folds;
pub mod negatives;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::autodiff::{ParamStore, Tape};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::dataset::SegmentedData;
use crate::encoders::{stack, DualEncoder, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{accuracy, build_candidate_sets, predict_sets, CandidateSet};
use crate::manifest::DatasetManifest;
use crate::series::TimeSeries;

use adam::AdamState;
use early_stop::{run_training, StopReason, TraceRow, Trainee};
use folds::{make_folds, FoldSpec};
use negatives::sample_negative_indices;

/// Contrastive loss of one anchor latent `[D, T]` against candidate latents,
/// summed over dimensions. Zero-variance dimensions are an error.
pub fn infonce_loss(anchor: &TimeSeries, candidates: &[&TimeSeries], matched: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.input(stack(&[anchor])?);
    let c = tape.input(stack(candidates)?);
    let sims = tape.pearson_sims(a, c, &[(0..candidates.len()).collect()], true)?;
    let loss = tape.infonce(sims, &[matched])?;
    Ok(tape.scalar(loss))
}

/// Seeds derived from the run seed for the independent random streams.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream)
}

/// Model, optimizer and data of one fold, stepped by [`run_training`].
pub struct Trainer<'a> {
    cfg: TrainConfig,
    pub model: DualEncoder,
    adam: AdamState,
    train: &'a SegmentedData,
    val: &'a SegmentedData,
    val_sets: Vec<CandidateSet>,
    examples: Vec<(usize, usize)>,
    cursor: usize,
    data_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, model: DualEncoder, train: &'a SegmentedData, val: &'a SegmentedData) -> Result<Self> {
        cfg.validate()?;
        let mut val_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 3));
        let val_sets = build_candidate_sets(val, cfg.n_val_negatives, &mut val_rng)?;
        if val_sets.is_empty() {
            return Err(Error::EmptyValidation);
        }
        let examples = train.examples();
        if examples.is_empty() {
            return Err(Error::EmptyInput("no training segments".into()));
        }
        for r in &train.recordings {
            if r.n_segments > 0 && train.stimulus_segments(r.stimulus) < 2 {
                return Err(Error::NoNegativesAvailable);
            }
        }
        let adam = AdamState::new(&model.params, cfg.lr);
        Ok(Self {
            data_rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1)),
            dropout_rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2)),
            cursor: examples.len(),
            examples,
            cfg,
            model,
            adam,
            train,
            val,
            val_sets,
        })
    }

    pub fn validation_sets(&self) -> &[CandidateSet] {
        &self.val_sets
    }

    /// Next batch of examples, reshuffling at every epoch boundary.
    fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor >= self.examples.len() {
                self.examples.shuffle(&mut self.data_rng);
                self.cursor = 0;
            }
            batch.push(self.examples[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

impl Trainee for Trainer<'_> {
    type Snapshot = ParamStore;

    fn train_step(&mut self, step: usize) -> Result<f64> {
        let batch = self.next_batch();
        let data = self.train;
        let mut unique: HashMap<(usize, usize), usize> = HashMap::new();
        let mut order: Vec<(usize, usize)> = Vec::new();
        let mut intern = |key: (usize, usize)| {
            *unique.entry(key).or_insert_with(|| {
                order.push(key);
                order.len() - 1
            })
        };
        let mut index = Vec::with_capacity(batch.len());
        let mut eeg_segments = Vec::with_capacity(batch.len());
        for &(r, k) in &batch {
            let stim = data.recordings[r].stimulus;
            let negatives = sample_negative_indices(data.stimulus_segments(stim), k, self.cfg.n_negatives, &mut self.data_rng)?;
            let mut row = Vec::with_capacity(negatives.len() + 1);
            row.push(intern((stim, k)));
            row.extend(negatives.into_iter().map(|j| intern((stim, j))));
            index.push(row);
            eeg_segments.push(data.eeg_segment(&data.eeg_ref(r, k))?);
        }
        let feat_segments = order.iter().map(|&(s, j)| data.feature_segment(&data.feature_ref(s, j))).collect::<Result<Vec<_>>>()?;

        let model = &mut self.model;
        let mut tape = Tape::new();
        let x = tape.input(stack(&eeg_segments.iter().collect::<Vec<_>>())?);
        let f = tape.input(stack(&feat_segments.iter().collect::<Vec<_>>())?);
        let z_eeg = model.eeg.forward(&mut tape, &model.params, x, true, &mut self.dropout_rng)?;
        let z_feat = model.feature.forward(&mut tape, &model.params, f)?;
        let sims = tape.pearson_sims(z_eeg, z_feat, &index, false)?;
        if tape.degenerate_sims() > 0 {
            log::warn!("step {step}: {} degenerate latent series scored as similarity 0", tape.degenerate_sims());
        }
        let loss = tape.infonce(sims, &vec![0; batch.len()])?;
        let value = tape.scalar(loss);
        tape.backward(loss, &mut model.params)?;
        self.adam.step(&mut model.params)?;
        model.params.zero_grad();
        Ok(value)
    }

    fn evaluate(&mut self) -> Result<f64> {
        let preds = predict_sets(&self.model, self.val, &self.val_sets)?;
        Ok(accuracy(&preds, &self.val_sets))
    }

    fn snapshot(&self) -> ParamStore {
        self.model.params.clone()
    }
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub steps: usize,
    pub stop: StopReason,
    pub fold: FoldSpec,
}

/// The fold definitions a run uses: its own, or the manifest's when empty.
pub fn resolve_folds(run: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<FoldSpec>> {
    let defs = if run.fold_defs.is_empty() { &manifest.fold_defs } else { &run.fold_defs };
    if defs.is_empty() {
        return Err(Error::InvalidArgument("no fold definitions in the run config or the manifest".into()));
    }
    make_folds(manifest, defs)
}

pub fn load_fold_data(run: &RunConfig, manifest: &DatasetManifest, fold: &FoldSpec) -> Result<(SegmentedData, SegmentedData)> {
    if fold.validation_recordings.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let t = &run.train;
    let load = |recs: &[usize]| SegmentedData::load(manifest, recs, &run.eeg_variant, &run.features, t.segment_seconds, t.standardize);
    Ok((load(&fold.train_recordings)?, load(&fold.validation_recordings)?))
}

/// Trains the configured fold and returns the best-validation checkpoint.
pub fn train_fold(run: &RunConfig, manifest: &DatasetManifest) -> Result<FoldRun> {
    let folds = resolve_folds(run, manifest)?;
    let fold = folds
        .get(run.fold)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("fold {} out of range (0..{})", run.fold, folds.len())))?;
    let (train, val) = load_fold_data(run, manifest, &fold)?;
    let mut eeg = run.eeg.clone();
    eeg.in_channels = train.eeg_channels().ok_or_else(|| Error::EmptyInput("no training recordings".into()))?;
    let model_cfg = ModelConfig { eeg, feature_channels: train.feature_channels().unwrap_or(0) };
    let model = DualEncoder::new(model_cfg.clone(), run.train.seed)?;
    let mut trainer = Trainer::new(run.train.clone(), model, &train, &val)?;
    let t = &run.train;
    let outcome = run_training(&mut trainer, t.eval_every_steps, t.patience_evals, t.max_steps)?;
    let checkpoint = Checkpoint {
        run: run.clone(),
        model: model_cfg,
        fold: run.fold,
        best_step: outcome.best_step,
        best_val_accuracy: outcome.best_accuracy,
        params: outcome.best,
    };
    Ok(FoldRun { checkpoint, trace: outcome.trace, steps: outcome.steps, stop: outcome.stop, fold })
}
