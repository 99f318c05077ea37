//! Match prediction by latent correlation, accuracy and ensemble voting.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::dataset::SegmentedData;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::series::{pearson_correlation, SegmentRef, TimeSeries};
use crate::training::negatives::sample_negative_indices;

/// Segments encoded per forward pass during evaluation.
pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub eeg_segment: SegmentRef,
    pub candidates: Vec<SegmentRef>,
    pub matched_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted: usize,
    pub scores: Vec<f64>,
}

/// One set per aligned segment: the matched feature segment plus
/// `n_negatives` distinct other segments of the same stimulus, with the
/// matched one placed at a random position.
pub fn build_candidate_sets<R: Rng + ?Sized>(data: &SegmentedData, n_negatives: usize, rng: &mut R) -> Result<Vec<CandidateSet>> {
    let mut sets = Vec::new();
    for (r, k) in data.examples() {
        let stim = data.recordings[r].stimulus;
        let count = data.stimulus_segments(stim);
        if count < n_negatives + 1 {
            return Err(Error::InvalidArgument(format!(
                "stimulus {stim} has {count} segments; {} distinct candidates are needed",
                n_negatives + 1
            )));
        }
        let mut candidates: Vec<SegmentRef> =
            sample_negative_indices(count, k, n_negatives, rng)?.into_iter().map(|j| data.feature_ref(stim, j)).collect();
        let matched_index = rng.random_range(0..=n_negatives);
        candidates.insert(matched_index, data.feature_ref(stim, k));
        sets.push(CandidateSet { eeg_segment: data.eeg_ref(r, k), candidates, matched_index });
    }
    Ok(sets)
}

/// Mean over latent dimensions of the Pearson correlation between two
/// `[D, T]` latents. Zero-variance dimensions are an error.
pub fn latent_score(anchor: &[f64], candidate: &[f64], d: usize) -> Result<f64> {
    if anchor.len() != candidate.len() || d == 0 || anchor.len() % d != 0 {
        return Err(Error::ShapeMismatch(format!("latents of {} and {} values with D = {d}", anchor.len(), candidate.len())));
    }
    let t = anchor.len() / d;
    let mut total = 0.0;
    for i in 0..d {
        total += pearson_correlation(&anchor[i * t..(i + 1) * t], &candidate[i * t..(i + 1) * t]).map_err(|e| match e {
            Error::DegenerateChannel { sd, .. } => Error::DegenerateChannel { channel: i, sd },
            other => other,
        })?;
    }
    Ok(total / d as f64)
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn predict_from_latents(anchor: &[f64], candidates: &[&[f64]], d: usize) -> Result<Prediction> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no candidates".into()));
    }
    let scores = candidates.iter().map(|c| latent_score(anchor, c, d)).collect::<Result<Vec<_>>>()?;
    Ok(Prediction { predicted: argmax_first(&scores), scores })
}

fn check_channels(model: &DualEncoder, eeg_channels: usize, feature_channels: usize) -> Result<()> {
    let want = (model.config.eeg.in_channels, model.config.feature_channels);
    if (eeg_channels, feature_channels) != want {
        return Err(Error::ConfigMismatch(format!(
            "model expects {} EEG and {} feature channels, data has {eeg_channels} and {feature_channels}",
            want.0, want.1
        )));
    }
    Ok(())
}

/// Scores raw EEG and feature segments with a model.
pub fn predict_match(model: &DualEncoder, eeg: &TimeSeries, candidates: &[&TimeSeries]) -> Result<Prediction> {
    let fc = candidates.first().map_or(model.config.feature_channels, |c| c.channels());
    check_channels(model, eeg.channels(), fc)?;
    let z = model.encode_eeg_batch(&[eeg])?;
    let zc = model.encode_feature_batch(candidates)?;
    let per = zc.len() / candidates.len();
    let views: Vec<&[f64]> = zc.chunks(per).collect();
    predict_from_latents(&z, &views, model.d_latent())
}

fn encode_unique(
    refs: impl Iterator<Item = SegmentRef>,
    load: impl Fn(&SegmentRef) -> Result<TimeSeries>,
    encode: impl Fn(&[&TimeSeries]) -> Result<Vec<f64>>,
) -> Result<(HashMap<SegmentRef, usize>, Vec<f64>)> {
    let mut index = HashMap::new();
    let mut order = Vec::new();
    for r in refs {
        index.entry(r).or_insert_with(|| {
            order.push(r);
            order.len() - 1
        });
    }
    let mut latents = Vec::new();
    for chunk in order.chunks(EVAL_BATCH) {
        let segs = chunk.iter().map(&load).collect::<Result<Vec<_>>>()?;
        let views: Vec<&TimeSeries> = segs.iter().collect();
        latents.extend(encode(&views)?);
    }
    Ok((index, latents))
}

/// Predicts every set, encoding each distinct segment once.
pub fn predict_sets(model: &DualEncoder, data: &SegmentedData, sets: &[CandidateSet]) -> Result<Vec<Prediction>> {
    if sets.is_empty() {
        return Ok(Vec::new());
    }
    check_channels(model, data.eeg_channels().unwrap_or(0), data.feature_channels().unwrap_or(0))?;
    let (eeg_idx, eeg_lat) =
        encode_unique(sets.iter().map(|s| s.eeg_segment), |r| data.eeg_segment(r), |b| model.encode_eeg_batch(b))?;
    let (feat_idx, feat_lat) = encode_unique(
        sets.iter().flat_map(|s| s.candidates.iter().copied()),
        |r| data.feature_segment(r),
        |b| model.encode_feature_batch(b),
    )?;
    let d = model.d_latent();
    let per = d * data.seg_len;
    sets.iter()
        .map(|s| {
            let e = eeg_idx[&s.eeg_segment];
            let anchor = &eeg_lat[e * per..(e + 1) * per];
            let cands: Vec<&[f64]> = s.candidates.iter().map(|c| &feat_lat[feat_idx[c] * per..(feat_idx[c] + 1) * per]).collect();
            predict_from_latents(anchor, &cands, d)
        })
        .collect()
}

/// Fraction of sets whose prediction equals the matched index.
pub fn accuracy(predictions: &[Prediction], sets: &[CandidateSet]) -> f64 {
    let n = predictions.len().min(sets.len());
    if n == 0 {
        return f64::NAN;
    }
    let hits = predictions.iter().zip(sets).filter(|(p, s)| p.predicted == s.matched_index).count();
    hits as f64 / n as f64
}

/// Plurality vote over per-model predictions for one set; ties go to the
/// highest summed score over the tied indices, then to the lowest index.
pub fn ensemble_vote(predictions: &[Prediction]) -> Result<usize> {
    let width = predictions.iter().map(|p| p.scores.len().max(p.predicted + 1)).max().ok_or_else(|| Error::EmptyInput("no models to vote".into()))?;
    let mut votes = vec![0usize; width];
    let mut summed = vec![0.0; width];
    for p in predictions {
        votes[p.predicted] += 1;
        for (i, s) in p.scores.iter().enumerate() {
            summed[i] += s;
        }
    }
    let top = *votes.iter().max().unwrap();
    let mut best: Option<usize> = None;
    for i in (0..width).filter(|&i| votes[i] == top) {
        if best.is_none_or(|b| summed[i] > summed[b]) {
            best = Some(i);
        }
    }
    Ok(best.unwrap())
}

/// Votes set by set; `per_model[m][s]` is model `m`'s prediction for set `s`.
pub fn ensemble_predict(per_model: &[Vec<Prediction>]) -> Result<Vec<usize>> {
    let n = per_model.first().map_or(0, Vec::len);
    if per_model.iter().any(|p| p.len() != n) {
        return Err(Error::LengthMismatch("models predicted different numbers of sets".into()));
    }
    (0..n)
        .map(|s| {
            let preds: Vec<Prediction> = per_model.iter().map(|m| m[s].clone()).collect();
            ensemble_vote(&preds)
        })
        .collect()
}
