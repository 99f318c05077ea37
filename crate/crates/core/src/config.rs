//! Run configuration: training hyper-parameters, encoder shape, EEG band
//! setup, feature list and fold definitions, loaded from JSON with optional
//! `key.path=value` overrides.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::dsp::{eeg_filter_bank, BandSpec};
use crate::encoders::EegEncoderConfig;
use crate::error::{Error, Result};
use crate::manifest::{default_fold_defs, SubjectRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Standardize {
    /// per channel over the whole recording, before segmentation
    #[default]
    Recording,
    /// per channel within every segment
    Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub n_negatives: usize,
    pub eval_every_steps: usize,
    pub patience_evals: usize,
    pub n_val_negatives: usize,
    pub segment_seconds: f64,
    pub seed: u64,
    /// hard cap on optimizer steps
    pub max_steps: usize,
    pub standardize: Standardize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 32,
            n_negatives: 32,
            eval_every_steps: 1000,
            patience_evals: 20,
            n_val_negatives: 4,
            segment_seconds: 5.0,
            seed: 0,
            max_steps: 200_000,
            standardize: Standardize::Recording,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.batch_size, self.n_negatives, self.eval_every_steps, self.patience_evals, self.n_val_negatives, self.max_steps];
        if counts.contains(&0) || !(self.lr > 0.0) || !(self.segment_seconds > 0.0) {
            return Err(Error::InvalidArgument("training settings must all be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// `in_channels` is taken from the data at training time
    pub eeg: EegEncoderConfig,
    /// which preprocessed EEG to train on: "broadband", "multiband" or "raw"
    pub eeg_variant: String,
    pub bands: Vec<BandSpec>,
    /// features fused (in order) into the feature-encoder input
    pub features: Vec<String>,
    /// features to reduce by PCA in the features step: name -> components
    pub pca: BTreeMap<String, usize>,
    pub word_lowpass_hz: f64,
    /// validation subject ranges; empty means the manifest's suggestion
    pub fold_defs: Vec<SubjectRange>,
    pub fold: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            eeg: EegEncoderConfig::default(),
            eeg_variant: "broadband".into(),
            bands: eeg_filter_bank(),
            features: vec!["env".into(), "mel".into(), "wav2vec_pca".into(), "gpt_pca".into()],
            pca: BTreeMap::from([("wav2vec".into(), 64), ("gpt".into(), 4)]),
            word_lowpass_hz: 4.0,
            fold_defs: default_fold_defs(),
            fold: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("override `{spec}`: `{key}` is not inside an object")))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*key).to_string()).or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_values() {
        let c = RunConfig::default();
        assert_eq!(c.train.lr, 2e-5);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.n_negatives, 32);
        assert_eq!(c.train.eval_every_steps, 1000);
        assert_eq!(c.train.patience_evals, 20);
        assert_eq!(c.train.n_val_negatives, 4);
        assert_eq!(c.train.segment_seconds, 5.0);
        assert_eq!(c.eeg.d_hidden, 256);
        assert_eq!(c.eeg.dropout_p, 0.5);
        assert_eq!(c.fold_defs.len(), 5);
    }

    #[test]
    fn partial_json_and_overrides() {
        let c = RunConfig::from_json(
            r#"{"train": {"seed": 4}, "features": ["synth"]}"#,
            &["train.lr=0.001".into(), "eeg.d_hidden=64".into(), "eeg_variant=multiband".into()],
        )
        .unwrap();
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.eeg.d_hidden, 64);
        assert_eq!(c.eeg_variant, "multiband");
        assert_eq!(c.features, vec!["synth"]);
        assert!(RunConfig::from_json("{}", &["nokey".into()]).is_err());
        assert!(RunConfig::from_json("{}", &["train.batch_size=0".into()]).is_err());
    }
}
