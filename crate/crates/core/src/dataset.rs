//! In-memory EEG recordings and fused stimulus features, cut into aligned
//! non-overlapping segments.

use std::collections::BTreeMap;

use crate::config::Standardize;
use crate::error::{Error, Result};
use crate::features::{fuse_features, FeatureSet};
use crate::manifest::DatasetManifest;
use crate::series::{segment_length, SegmentRef, TimeSeries, DEGENERATE_SD};

/// Per-channel z-scoring that maps constant channels to zero instead of
/// failing (silent mel bands, zero word-embedding dimensions).
pub fn standardize_lenient(ts: &TimeSeries) -> Result<TimeSeries> {
    let n = ts.samples();
    let mut out = ts.clone();
    for c in 0..ts.channels() {
        let x = out.channel_mut(c);
        let mean = x.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        for v in x.iter_mut() {
            *v = if sd > DEGENERATE_SD { (*v - mean) / sd } else { 0.0 };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LoadedRecording {
    pub manifest_index: usize,
    pub subject_id: u32,
    /// manifest stimulus index
    pub stimulus: usize,
    pub eeg: TimeSeries,
    /// aligned segments available in both EEG and features
    pub n_segments: usize,
}

#[derive(Debug, Clone)]
pub struct SegmentedData {
    pub seg_len: usize,
    pub standardize: Standardize,
    pub recordings: Vec<LoadedRecording>,
    /// fused features by manifest stimulus index (only stimuli that were loaded)
    pub features: BTreeMap<usize, TimeSeries>,
}

impl SegmentedData {
    /// Loads the given manifest recordings with their stimuli's `features`
    /// fused in order. EEG and features must share one sample rate.
    pub fn load(
        manifest: &DatasetManifest,
        recordings: &[usize],
        eeg_variant: &str,
        features: &[String],
        segment_seconds: f64,
        standardize: Standardize,
    ) -> Result<Self> {
        let mut fused: BTreeMap<usize, TimeSeries> = BTreeMap::new();
        let mut loaded = Vec::with_capacity(recordings.len());
        let mut rate = None;
        let mut seg_len = 0;
        for &ri in recordings {
            let rec = &manifest.recordings[ri];
            let stim = manifest
                .stimulus_index(&rec.stimulus_id)
                .ok_or_else(|| Error::Manifest(format!("recording {ri} references unknown stimulus `{}`", rec.stimulus_id)))?;
            if !fused.contains_key(&stim) {
                let mut set = FeatureSet::new();
                for name in features {
                    set.insert(name.clone(), manifest.read_feature(stim, name)?);
                }
                let f = fuse_features(&set, features)?;
                let f = match standardize {
                    Standardize::Recording => standardize_lenient(&f)?,
                    Standardize::Segment => f,
                };
                fused.insert(stim, f);
            }
            let feat = &fused[&stim];
            let eeg = manifest.read_eeg(ri, eeg_variant)?;
            let fs = *rate.get_or_insert(eeg.sample_rate_hz());
            if eeg.sample_rate_hz() != fs || feat.sample_rate_hz() != fs {
                return Err(Error::ConfigMismatch(format!(
                    "recording {ri}: EEG at {} Hz and features at {} Hz, expected {fs} Hz",
                    eeg.sample_rate_hz(),
                    feat.sample_rate_hz()
                )));
            }
            seg_len = segment_length(segment_seconds, fs)?;
            let eeg = match standardize {
                Standardize::Recording => standardize_lenient(&eeg)?,
                Standardize::Segment => eeg,
            };
            let n_segments = eeg.samples().min(feat.samples()) / seg_len;
            loaded.push(LoadedRecording { manifest_index: ri, subject_id: rec.subject_id, stimulus: stim, eeg, n_segments });
        }
        if let Some(first) = loaded.first() {
            for r in &loaded {
                if r.eeg.channels() != first.eeg.channels() {
                    return Err(Error::ConfigMismatch(format!(
                        "recording {} has {} EEG channels, recording {} has {}",
                        r.manifest_index,
                        r.eeg.channels(),
                        first.manifest_index,
                        first.eeg.channels()
                    )));
                }
            }
        }
        Ok(Self { seg_len, standardize, recordings: loaded, features: fused })
    }

    pub fn eeg_channels(&self) -> Option<usize> {
        self.recordings.first().map(|r| r.eeg.channels())
    }

    pub fn feature_channels(&self) -> Option<usize> {
        self.features.values().next().map(TimeSeries::channels)
    }

    /// Number of whole segments of a stimulus' features.
    pub fn stimulus_segments(&self, stimulus: usize) -> usize {
        self.features.get(&stimulus).map_or(0, |f| f.samples() / self.seg_len)
    }

    /// Segment `k` of loaded recording `r` (series id = position in `recordings`).
    pub fn eeg_ref(&self, r: usize, k: usize) -> SegmentRef {
        SegmentRef { series_id: r, start_sample: k * self.seg_len, length_samples: self.seg_len }
    }

    /// Segment `k` of a stimulus' features (series id = manifest stimulus index).
    pub fn feature_ref(&self, stimulus: usize, k: usize) -> SegmentRef {
        SegmentRef { series_id: stimulus, start_sample: k * self.seg_len, length_samples: self.seg_len }
    }

    pub fn eeg_segment(&self, seg: &SegmentRef) -> Result<TimeSeries> {
        let r = self
            .recordings
            .get(seg.series_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no loaded recording {}", seg.series_id)))?;
        self.finish(r.eeg.segment(seg)?)
    }

    pub fn feature_segment(&self, seg: &SegmentRef) -> Result<TimeSeries> {
        let f = self
            .features
            .get(&seg.series_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no loaded stimulus {}", seg.series_id)))?;
        self.finish(f.segment(seg)?)
    }

    fn finish(&self, ts: TimeSeries) -> Result<TimeSeries> {
        match self.standardize {
            Standardize::Recording => Ok(ts),
            Standardize::Segment => standardize_lenient(&ts),
        }
    }

    /// All (loaded recording, segment) pairs.
    pub fn examples(&self) -> Vec<(usize, usize)> {
        self.recordings.iter().enumerate().flat_map(|(r, rec)| (0..rec.n_segments).map(move |k| (r, k))).collect()
    }
}
