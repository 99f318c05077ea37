//! Speech feature streams at 64 Hz: envelope, log-mel spectrogram,
//! continuous word embeddings, PCA reduction and channel fusion.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use crate::dsp::{design_band, filtfilt, BandSpec};
use crate::error::{Error, Result};
use crate::mmts;
use crate::series::{resample, TimeSeries};

pub const FEATURE_RATE_HZ: f64 = 64.0;
pub const ENVELOPE_CUTOFF_HZ: f64 = 20.0;
pub const N_MEL: usize = 28;
pub const MEL_WINDOW_S: f64 = 0.025;
pub const LOG_FLOOR: f64 = 1e-10;

/// Named feature streams of one stimulus.
pub type FeatureSet = BTreeMap<String, TimeSeries>;

fn check_audio(audio: &TimeSeries) -> Result<()> {
    if audio.channels() != 1 {
        return Err(Error::InvalidArgument(format!("audio must be mono, got {} channels", audio.channels())));
    }
    if audio.sample_rate_hz() < 8000.0 {
        return Err(Error::InvalidArgument(format!("audio rate {} Hz is below 8 kHz", audio.sample_rate_hz())));
    }
    Ok(())
}

/// Full-wave rectification, zero-phase 20 Hz low-pass, resampling to 64 Hz.
pub fn envelope(audio: &TimeSeries) -> Result<TimeSeries> {
    check_audio(audio)?;
    let rectified = audio.map(f64::abs)?;
    let filter = design_band(&BandSpec::new(0.0, ENVELOPE_CUTOFF_HZ, 4), audio.sample_rate_hz())?;
    let smooth = filtfilt(&filter, &rectified)?;
    // filter and resampler ripple can dip marginally below zero
    resample(&smooth, FEATURE_RATE_HZ)?.map(|v| v.max(0.0))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge/centre frequencies of the triangular filters: `n_mel + 2` points
/// equally spaced on the mel scale from 0 Hz to Nyquist.
pub fn mel_band_edges(n_mel: usize, fs_hz: f64) -> Vec<f64> {
    let top = hz_to_mel(fs_hz / 2.0);
    (0..n_mel + 2).map(|i| mel_to_hz(top * i as f64 / (n_mel + 1) as f64)).collect()
}

/// Weight of triangular filter `m` at frequency `hz`.
pub fn mel_weight(edges: &[f64], m: usize, hz: f64) -> f64 {
    let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
    if hz <= lo || hz >= hi {
        0.0
    } else if hz <= mid {
        (hz - lo) / (mid - lo)
    } else {
        (hi - hz) / (hi - mid)
    }
}

/// Log mel band energies with frames centred on the 64 Hz grid.
pub fn mel_spectrogram(audio: &TimeSeries) -> Result<TimeSeries> {
    check_audio(audio)?;
    let fs = audio.sample_rate_hz();
    let x = audio.channel(0);
    let win_len = (MEL_WINDOW_S * fs).round() as usize;
    let nfft = win_len.next_power_of_two();
    let window: Vec<f64> = (0..win_len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win_len as f64).cos()).collect();
    let edges = mel_band_edges(N_MEL, fs);
    let bank: Vec<Vec<f64>> = (0..N_MEL)
        .map(|m| (0..=nfft / 2).map(|j| mel_weight(&edges, m, j as f64 * fs / nfft as f64)).collect())
        .collect();

    let n_frames = ((x.len() as f64) * FEATURE_RATE_HZ / fs).round().max(1.0) as usize;
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    let mut out = vec![0.0; N_MEL * n_frames];
    for k in 0..n_frames {
        let centre = (k as f64 * fs / FEATURE_RATE_HZ).round() as i64;
        let start = centre - (win_len / 2) as i64;
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            let idx = start + i as i64;
            if idx >= 0 && (idx as usize) < x.len() {
                buf[i] = Complex64::new(x[idx as usize] * w, 0.0);
            }
        }
        fft.process(&mut buf);
        for (m, weights) in bank.iter().enumerate() {
            let e: f64 = weights.iter().zip(&buf).map(|(w, c)| w * c.norm_sqr()).sum();
            out[m * n_frames + k] = e.max(LOG_FLOOR).ln();
        }
    }
    TimeSeries::new(N_MEL, FEATURE_RATE_HZ, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordToken {
    pub text: String,
    pub onset_s: f64,
    pub offset_s: f64,
    pub embedding: Vec<f64>,
}

/// Each word's embedding fills samples `[round(onset*64), round(offset*64))`;
/// later words overwrite earlier ones where spans overlap.
pub fn continuous_word_embedding(words: &[WordToken], width: usize, duration_s: f64) -> Result<TimeSeries> {
    if width == 0 {
        return Err(Error::InvalidArgument("embedding width must be positive".into()));
    }
    let n = (duration_s * FEATURE_RATE_HZ).round() as usize;
    let mut data = vec![0.0; width * n];
    for (i, w) in words.iter().enumerate() {
        if i > 0 && w.onset_s < words[i - 1].onset_s {
            return Err(Error::UnsortedWords { index: i });
        }
        if w.embedding.len() != width {
            return Err(Error::WidthMismatch { expected: width, got: w.embedding.len() });
        }
        if !(w.onset_s >= 0.0) || w.offset_s < w.onset_s || w.offset_s > duration_s {
            return Err(Error::InvalidArgument(format!(
                "word {i} `{}` spans [{}, {}) outside [0, {duration_s}]",
                w.text, w.onset_s, w.offset_s
            )));
        }
        let a = (w.onset_s * FEATURE_RATE_HZ).round() as usize;
        let b = ((w.offset_s * FEATURE_RATE_HZ).round() as usize).min(n);
        for (c, &e) in w.embedding.iter().enumerate() {
            data[c * n + a..c * n + b].fill(e);
        }
    }
    TimeSeries::new(width, FEATURE_RATE_HZ, data)
}

#[derive(Debug, Serialize, Deserialize)]
struct WordEntry {
    text: String,
    onset_s: f64,
    offset_s: f64,
    embedding_row: usize,
}

/// Embedding matrix stored next to a words file: same stem, `.mmts`
/// extension, one channel per embedding dimension and one sample per row.
pub fn words_matrix_path(words_json: &Path) -> PathBuf {
    words_json.with_extension("mmts")
}

pub fn read_words(path: impl AsRef<Path>) -> Result<(Vec<WordToken>, usize)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let entries: Vec<WordEntry> = serde_json::from_str(&text)?;
    let matrix = mmts::read(words_matrix_path(path))?;
    let width = matrix.channels();
    let words = entries
        .into_iter()
        .map(|e| {
            if e.embedding_row >= matrix.samples() {
                return Err(Error::Format(format!(
                    "{}: word `{}` references embedding row {} of {}",
                    path.display(),
                    e.text,
                    e.embedding_row,
                    matrix.samples()
                )));
            }
            let embedding = (0..width).map(|c| matrix.channel(c)[e.embedding_row]).collect();
            Ok(WordToken { text: e.text, onset_s: e.onset_s, offset_s: e.offset_s, embedding })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((words, width))
}

pub fn write_words(path: impl AsRef<Path>, words: &[WordToken]) -> Result<()> {
    let path = path.as_ref();
    let width = words.first().map(|w| w.embedding.len()).ok_or_else(|| Error::EmptyInput("no words to write".into()))?;
    let entries: Vec<WordEntry> = words
        .iter()
        .enumerate()
        .map(|(i, w)| WordEntry { text: w.text.clone(), onset_s: w.onset_s, offset_s: w.offset_s, embedding_row: i })
        .collect();
    let mut data = vec![0.0; width * words.len()];
    for (i, w) in words.iter().enumerate() {
        if w.embedding.len() != width {
            return Err(Error::WidthMismatch { expected: width, got: w.embedding.len() });
        }
        for (c, &e) in w.embedding.iter().enumerate() {
            data[c * words.len() + i] = e;
        }
    }
    mmts::write(words_matrix_path(path), &TimeSeries::new(width, 1.0, data)?)?;
    std::fs::write(path, serde_json::to_string_pretty(&entries)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k rows of input width, orthonormal
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `components^T * code + mean` for every row of `codes`.
    pub fn reconstruct(&self, codes: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if codes.ncols() != self.k() {
            return Err(Error::WidthMismatch { expected: self.k(), got: codes.ncols() });
        }
        Ok(DMatrix::from_fn(codes.nrows(), self.width(), |r, c| {
            self.mean[c] + self.components.iter().enumerate().map(|(j, comp)| codes[(r, j)] * comp[c]).sum::<f64>()
        }))
    }
}

/// Top-`k` principal directions of the rows (observations) of `rows`,
/// from the eigendecomposition of the sample covariance (n - 1 normalization).
pub fn pca_fit(rows: &DMatrix<f64>, k: usize) -> Result<PcaModel> {
    let (n, width) = rows.shape();
    if k == 0 || k > width {
        return Err(Error::RankDeficient { k, width });
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!("PCA with k = {k} needs more than {k} rows, got {n}")));
    }
    let mean: Vec<f64> = (0..width).map(|c| rows.column(c).mean()).collect();
    let mut centered = rows.clone();
    for c in 0..width {
        centered.column_mut(c).add_scalar_mut(-mean[c]);
    }
    let cov = centered.tr_mul(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[j].max(0.0));
    }
    Ok(PcaModel { mean, components, explained_variance })
}

pub fn pca_transform(model: &PcaModel, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if rows.ncols() != model.width() {
        return Err(Error::WidthMismatch { expected: model.width(), got: rows.ncols() });
    }
    Ok(DMatrix::from_fn(rows.nrows(), model.k(), |r, j| {
        model.components[j].iter().enumerate().map(|(c, w)| w * (rows[(r, c)] - model.mean[c])).sum()
    }))
}

/// Time samples as rows, channels as columns.
pub fn series_rows(ts: &TimeSeries) -> DMatrix<f64> {
    DMatrix::from_fn(ts.samples(), ts.channels(), |t, c| ts.channel(c)[t])
}

/// Fits PCA on the time samples of all given series together.
pub fn pca_fit_series(series: &[&TimeSeries], k: usize) -> Result<PcaModel> {
    let first = series.first().ok_or_else(|| Error::EmptyInput("no series to fit PCA on".into()))?;
    let width = first.channels();
    let total: usize = series.iter().map(|s| s.samples()).sum();
    let mut rows = DMatrix::zeros(total, width);
    let mut r0 = 0;
    for s in series {
        if s.channels() != width {
            return Err(Error::WidthMismatch { expected: width, got: s.channels() });
        }
        for c in 0..width {
            for (t, v) in s.channel(c).iter().enumerate() {
                rows[(r0 + t, c)] = *v;
            }
        }
        r0 += s.samples();
    }
    pca_fit(&rows, k)
}

pub fn pca_transform_series(model: &PcaModel, ts: &TimeSeries) -> Result<TimeSeries> {
    let codes = pca_transform(model, &series_rows(ts))?;
    let (n, k) = codes.shape();
    TimeSeries::new(k, ts.sample_rate_hz(), (0..k).flat_map(|j| (0..n).map(move |t| (j, t))).map(|(j, t)| codes[(t, j)]).collect())
}

/// Concatenates the named members' channels in the given order.
pub fn fuse_features(set: &FeatureSet, names: &[String]) -> Result<TimeSeries> {
    let mut parts = Vec::with_capacity(names.len());
    for name in names {
        parts.push(set.get(name).ok_or_else(|| Error::MissingFeature(name.clone()))?);
    }
    let first = parts.first().ok_or_else(|| Error::EmptyInput("no features to fuse".into()))?;
    let (n, fs) = (first.samples(), first.sample_rate_hz());
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.data().len()).sum());
    for (p, name) in parts.iter().zip(names) {
        if p.samples() != n || p.sample_rate_hz() != fs {
            return Err(Error::LengthMismatch(format!(
                "feature `{name}` has {} samples at {} Hz, `{}` has {n} at {fs} Hz",
                p.samples(),
                p.sample_rate_hz(),
                names[0]
            )));
        }
        data.extend_from_slice(p.data());
    }
    TimeSeries::new(data.len() / n, fs, data)
}

/// Reads a mono 16-bit integer or 32-bit float WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let wav_err = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidArgument(format!("{}: expected mono audio, got {} channels", path.display(), spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>().map_err(wav_err)?
        }
        (fmt, bits) => {
            return Err(Error::Format(format!("{}: unsupported WAV encoding {fmt:?} {bits}-bit", path.display())));
        }
    };
    TimeSeries::new(1, spec.sample_rate as f64, samples)
}
