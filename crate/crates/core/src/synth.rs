//! Synthetic datasets whose EEG genuinely encodes the stimulus features.
//!
//! Each stimulus gets smooth random source series (low-passed Gaussian
//! noise). Every subject's EEG is a spatial mixture of those sources after a
//! causal convolution, plus Gaussian noise scaled to the signal RMS. Subjects
//! and stimuli are split into groups: a subject hears every stimulus of its
//! group and nothing else, so each group is a valid "unseen subjects and
//! unseen stimuli" validation fold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::dsp::lowpass_embedding;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Recording, Stimulus, Subject, SubjectRange};
use crate::mmts;
use crate::series::{zscore_standardize, TimeSeries};

pub const SYNTH_RATE_HZ: f64 = 64.0;
/// Name of the clean source features written for every stimulus.
pub const SOURCE_FEATURE: &str = "synth";
/// Name of the wide, noisy linear embedding of the sources.
pub const RAW_FEATURE: &str = "raw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_stimuli: usize,
    pub duration_s: f64,
    pub eeg_channels: usize,
    pub feature_channels: usize,
    /// width of the `raw` feature, reduced back by PCA in the features step
    pub raw_feature_width: usize,
    pub mixing_kernel_len: usize,
    /// noise standard deviation relative to the EEG signal RMS; infinite
    /// (written `"inf"` in JSON) means noise only
    #[serde(with = "sigma_json")]
    pub noise_sigma: f64,
    /// spread of per-subject spatial maps around the shared template
    pub subject_jitter: f64,
    pub n_groups: usize,
    pub feature_cutoff_hz: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            n_stimuli: 4,
            duration_s: 600.0,
            eeg_channels: 64,
            feature_channels: 4,
            raw_feature_width: 16,
            mixing_kernel_len: 16,
            noise_sigma: 0.1,
            subject_jitter: 0.3,
            n_groups: 2,
            feature_cutoff_hz: 4.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_subjects,
            self.n_stimuli,
            self.eeg_channels,
            self.feature_channels,
            self.raw_feature_width,
            self.mixing_kernel_len,
            self.n_groups,
        ];
        if positive.contains(&0) || !(self.duration_s > 0.0) || !(self.feature_cutoff_hz > 0.0) {
            return Err(Error::InvalidArgument("synthetic spec sizes must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.subject_jitter >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma and subject_jitter must be nonnegative".into()));
        }
        if self.n_groups > self.n_subjects || self.n_groups > self.n_stimuli {
            return Err(Error::InvalidArgument("need at least one subject and one stimulus per group".into()));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * SYNTH_RATE_HZ).round() as usize
    }

    pub fn subject_group(&self, subject_index: usize) -> usize {
        subject_index * self.n_groups / self.n_subjects
    }

    pub fn stimulus_group(&self, stimulus_index: usize) -> usize {
        stimulus_index * self.n_groups / self.n_stimuli
    }
}

/// JSON has no infinity: accept and emit the string `"inf"` for it.
mod sigma_json {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Sigma {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Sigma::deserialize(d)? {
            Sigma::Number(v) => Ok(v),
            Sigma::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Sigma::Text(t) => Err(serde::de::Error::custom(format!("noise_sigma `{t}` is neither a number nor \"inf\""))),
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// In-memory synthetic dataset before it is written to disk.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub sources: Vec<TimeSeries>,
    pub raw: Vec<TimeSeries>,
    /// (subject index, stimulus index, EEG)
    pub recordings: Vec<(usize, usize, TimeSeries)>,
}

pub fn synthesize(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (e, f, n) = (spec.eeg_channels, spec.feature_channels, spec.samples());

    let template = normal_vec(&mut rng, e * f);
    let subject_maps: Vec<Vec<f64>> = (0..spec.n_subjects)
        .map(|_| template.iter().zip(normal_vec(&mut rng, e * f)).map(|(t, j)| t + spec.subject_jitter * j).collect())
        .collect();
    let decay = spec.mixing_kernel_len as f64 / 4.0;
    let kernels: Vec<Vec<f64>> = (0..f)
        .map(|_| {
            let k: Vec<f64> = normal_vec(&mut rng, spec.mixing_kernel_len)
                .into_iter()
                .enumerate()
                .map(|(i, v)| v * (-(i as f64) / decay).exp())
                .collect();
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            k.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    let raw_map: Vec<f64> = normal_vec(&mut rng, spec.raw_feature_width * f).into_iter().map(|v| v / (f as f64).sqrt()).collect();

    let mut sources = Vec::with_capacity(spec.n_stimuli);
    let mut raw = Vec::with_capacity(spec.n_stimuli);
    let mut convolved = Vec::with_capacity(spec.n_stimuli);
    for _ in 0..spec.n_stimuli {
        let white = TimeSeries::new(f, SYNTH_RATE_HZ, normal_vec(&mut rng, f * n))?;
        let src = zscore_standardize(&lowpass_embedding(&white, spec.feature_cutoff_hz)?)?;
        let noise = normal_vec(&mut rng, spec.raw_feature_width * n);
        let mut wide = vec![0.0; spec.raw_feature_width * n];
        for w in 0..spec.raw_feature_width {
            for c in 0..f {
                let m = raw_map[w * f + c];
                for (o, s) in wide[w * n..(w + 1) * n].iter_mut().zip(src.channel(c)) {
                    *o += m * s;
                }
            }
            for (o, z) in wide[w * n..(w + 1) * n].iter_mut().zip(&noise[w * n..(w + 1) * n]) {
                *o += 0.05 * z;
            }
        }
        let mut conv = vec![0.0; f * n];
        for c in 0..f {
            let x = src.channel(c);
            for t in 0..n {
                conv[c * n + t] = kernels[c].iter().enumerate().take(t + 1).map(|(k, h)| h * x[t - k]).sum();
            }
        }
        raw.push(TimeSeries::new(spec.raw_feature_width, SYNTH_RATE_HZ, wide)?);
        sources.push(src);
        convolved.push(conv);
    }

    let mut recordings = Vec::new();
    for subj in 0..spec.n_subjects {
        for stim in (0..spec.n_stimuli).filter(|&k| spec.stimulus_group(k) == spec.subject_group(subj)) {
            let map = &subject_maps[subj];
            let conv = &convolved[stim];
            let mut signal = vec![0.0; e * n];
            for ch in 0..e {
                let row = &mut signal[ch * n..(ch + 1) * n];
                for c in 0..f {
                    let m = map[ch * f + c];
                    for (o, v) in row.iter_mut().zip(&conv[c * n..(c + 1) * n]) {
                        *o += m * v;
                    }
                }
            }
            let rms = (signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64).sqrt();
            let noise = normal_vec(&mut rng, e * n);
            let eeg: Vec<f64> = if spec.noise_sigma.is_infinite() {
                noise
            } else {
                signal.iter().zip(&noise).map(|(s, z)| s + spec.noise_sigma * rms * z).collect()
            };
            recordings.push((subj, stim, TimeSeries::new(e, SYNTH_RATE_HZ, eeg)?));
        }
    }
    Ok(SynthData { sources, raw, recordings })
}

pub fn subject_id(index: usize) -> u32 {
    index as u32 + 1
}

pub fn stimulus_id(index: usize) -> String {
    format!("stim{:02}", index + 1)
}

/// Generates the dataset, writes MMTS files plus `manifest.json` under `out`.
pub fn generate_synthetic(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out.as_ref();
    let data = synthesize(spec)?;
    std::fs::create_dir_all(out.join("stimuli"))?;
    std::fs::create_dir_all(out.join("eeg"))?;

    let mut stimuli = Vec::new();
    for (k, (src, raw)) in data.sources.iter().zip(&data.raw).enumerate() {
        let id = stimulus_id(k);
        let mut features = BTreeMap::new();
        for (name, ts) in [(SOURCE_FEATURE, src), (RAW_FEATURE, raw)] {
            let rel = format!("stimuli/{id}_{name}.mmts");
            mmts::write(out.join(&rel), ts)?;
            features.insert(name.to_string(), rel);
        }
        stimuli.push(Stimulus { id, features, words: None, audio: None });
    }
    let mut recordings = Vec::new();
    for (subj, stim, eeg) in &data.recordings {
        let rel = format!("eeg/sub-{:03}_{}.mmts", subject_id(*subj), stimulus_id(*stim));
        mmts::write(out.join(&rel), eeg)?;
        recordings.push(Recording {
            subject_id: subject_id(*subj),
            stimulus_id: stimulus_id(*stim),
            eeg: rel,
            variants: BTreeMap::new(),
        });
    }
    let subjects = (0..spec.n_subjects).map(|i| Subject { id: subject_id(i) }).collect();
    let mut manifest = DatasetManifest::new(subjects, stimuli, recordings);
    manifest.fold_defs = (0..spec.n_groups)
        .map(|g| {
            let members: Vec<u32> = (0..spec.n_subjects).filter(|&s| spec.subject_group(s) == g).map(subject_id).collect();
            SubjectRange { first: members[0], last: *members.last().unwrap() }
        })
        .collect();
    manifest.generator = Some(serde_json::to_value(spec)?);
    manifest.set_root(out);
    manifest.save(out)?;
    Ok(manifest)
}
