//! Multichannel time series and the basic per-channel operations the rest
//! of the pipeline is built on: z-scoring, fixed-length segmentation,
//! windowed-sinc resampling and Pearson correlation.

use crate::error::{Error, Result};

/// Threshold below which a channel's sample standard deviation counts as zero.
pub const DEGENERATE_SD: f64 = 1e-8;

/// Kaiser window shape used by [`resample`].
pub const RESAMPLE_KAISER_BETA: f64 = 8.6;
/// Kernel taps per output sample, measured at the lower of the two rates.
pub const RESAMPLE_TAPS: usize = 64;

/// Channel-major multichannel signal: `data[c * samples + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    channels: usize,
    sample_rate_hz: f64,
    data: Vec<f64>,
}

impl TimeSeries {
    pub fn new(channels: usize, sample_rate_hz: f64, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("time series needs at least one channel".into()));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample rate {sample_rate_hz} must be positive")));
        }
        if data.is_empty() || data.len() % channels != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot be split into {channels} nonempty channels",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { channels, sample_rate_hz, data })
    }

    pub fn zeros(channels: usize, samples: usize, sample_rate_hz: f64) -> Result<Self> {
        Self::new(channels, sample_rate_hz, vec![0.0; channels * samples])
    }

    /// Builds a series from per-channel rows of equal length.
    pub fn from_channels(rows: &[Vec<f64>], sample_rate_hz: f64) -> Result<Self> {
        let n = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::LengthMismatch("channels have different lengths".into()));
        }
        Self::new(rows.len(), sample_rate_hz, rows.concat())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.samples() as f64 / self.sample_rate_hz
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.samples();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.samples();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.samples())
    }

    /// Copies `[start, start + len)` of every channel into a new series.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.samples() {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) outside series of {} samples",
                start + len,
                self.samples()
            )));
        }
        let mut out = Vec::with_capacity(self.channels * len);
        for ch in self.channel_iter() {
            out.extend_from_slice(&ch[start..start + len]);
        }
        Ok(Self { channels: self.channels, sample_rate_hz: self.sample_rate_hz, data: out })
    }

    pub fn segment(&self, seg: &SegmentRef) -> Result<Self> {
        self.slice(seg.start_sample, seg.length_samples)
    }

    /// Maps every value through `f`, rejecting non-finite results.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.channels, self.sample_rate_hz, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// A window into a series identified by `series_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct SegmentRef {
    pub series_id: usize,
    pub start_sample: usize,
    pub length_samples: usize,
}

impl SegmentRef {
    pub fn end_sample(&self) -> usize {
        self.start_sample + self.length_samples
    }
}

fn mean_and_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Per-channel standardization to zero mean and unit sample (n-1) standard deviation.
pub fn zscore_standardize(ts: &TimeSeries) -> Result<TimeSeries> {
    let mut out = ts.clone();
    for c in 0..out.channels() {
        let ch = out.channel_mut(c);
        let (mean, sd) = mean_and_sd(ch);
        if !(sd > DEGENERATE_SD) {
            return Err(Error::DegenerateChannel { channel: c, sd });
        }
        for v in ch.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    Ok(out)
}

/// Number of samples in a segment of `seconds` at `rate`, which must be a positive integer.
pub fn segment_length(seconds: f64, rate_hz: f64) -> Result<usize> {
    let len = seconds * rate_hz;
    let rounded = len.round();
    if !(seconds > 0.0) || rounded < 1.0 || (len - rounded).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{seconds} s at {rate_hz} Hz is not a whole positive number of samples"
        )));
    }
    Ok(rounded as usize)
}

/// Consecutive non-overlapping segments from sample 0; a trailing partial
/// segment is dropped.
pub fn segment_nonoverlap(ts: &TimeSeries, series_id: usize, seconds: f64) -> Result<Vec<SegmentRef>> {
    let len = segment_length(seconds, ts.sample_rate_hz())?;
    let count = ts.samples() / len;
    if count == 0 {
        return Err(Error::EmptyInput(format!(
            "series of {} samples is shorter than one {len}-sample segment",
            ts.samples()
        )));
    }
    Ok((0..count)
        .map(|k| SegmentRef { series_id, start_sample: k * len, length_samples: len })
        .collect())
}

/// Modified Bessel function of the first kind, order zero.
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed sinc resampling to `target_hz`.
///
/// Each output sample is a normalized weighted sum of the inputs within
/// `RESAMPLE_TAPS / 2` samples (at the lower rate) of its timestamp, with the
/// cutoff at the lower Nyquist frequency. Normalizing the weights keeps
/// constant signals exact, including at the edges.
pub fn resample(ts: &TimeSeries, target_hz: f64) -> Result<TimeSeries> {
    if !(target_hz > 0.0 && target_hz.is_finite()) {
        return Err(Error::InvalidArgument(format!("target rate {target_hz} must be positive")));
    }
    let fs = ts.sample_rate_hz();
    if (target_hz - fs).abs() <= 1e-12 * fs {
        return TimeSeries::new(ts.channels(), target_hz, ts.data().to_vec());
    }
    let n_in = ts.samples();
    let n_out = ((n_in as f64) * target_hz / fs).round() as usize;
    if n_out == 0 {
        return Err(Error::EmptyInput("resampled series would have no samples".into()));
    }
    let f_low = fs.min(target_hz);
    let cutoff = f_low / 2.0;
    let half_width = (RESAMPLE_TAPS as f64 / 2.0) * fs / f_low; // in input samples
    let norm_i0 = bessel_i0(RESAMPLE_KAISER_BETA);

    let mut out = vec![0.0; ts.channels() * n_out];
    let mut weights = Vec::new();
    for j in 0..n_out {
        let centre = j as f64 * fs / target_hz;
        let lo = (centre - half_width).ceil().max(0.0) as usize;
        let hi = ((centre + half_width).floor() as usize).min(n_in - 1);
        weights.clear();
        for i in lo..=hi {
            let dt = i as f64 - centre;
            let r = dt / half_width;
            let win = bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm_i0;
            weights.push(sinc(2.0 * cutoff * dt / fs) * win);
        }
        let total: f64 = weights.iter().sum();
        for (c, ch) in ts.channel_iter().enumerate() {
            let acc: f64 = weights.iter().zip(&ch[lo..=hi]).map(|(w, v)| w * v).sum();
            out[c * n_out + j] = acc / total;
        }
    }
    TimeSeries::new(ts.channels(), target_hz, out)
}

/// Pearson correlation of two equal-length vectors.
pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("pearson correlation needs at least two samples".into()));
    }
    let (mx, sx) = mean_and_sd(x);
    let (my, sy) = mean_and_sd(y);
    if !(sx > DEGENERATE_SD) {
        return Err(Error::DegenerateChannel { channel: 0, sd: sx });
    }
    if !(sy > DEGENERATE_SD) {
        return Err(Error::DegenerateChannel { channel: 1, sd: sy });
    }
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
