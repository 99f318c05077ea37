//! Zero-phase Butterworth filtering.
//!
//! Filters are designed as analog Butterworth prototypes, mapped to low-pass
//! or band-pass, discretized with the bilinear transform (with pre-warping)
//! and stored as second-order sections. [`filtfilt`] runs a cascade forward
//! and backward so the net response is `|H|^2` with zero phase.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::series::TimeSeries;

/// A pass band. `low_hz == 0` means low-pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    #[serde(default = "default_order")]
    pub order: usize,
}

fn default_order() -> usize {
    4
}

impl BandSpec {
    pub fn new(low_hz: f64, high_hz: f64, order: usize) -> Self {
        Self { low_hz, high_hz, order }
    }

    pub fn is_lowpass(&self) -> bool {
        self.low_hz == 0.0
    }

    fn validate(&self, fs_hz: f64) -> Result<()> {
        let nyquist = fs_hz / 2.0;
        if self.order == 0 {
            return Err(Error::InvalidBand("order must be positive".into()));
        }
        if !(self.low_hz >= 0.0 && self.low_hz < self.high_hz && self.high_hz < nyquist) {
            return Err(Error::InvalidBand(format!(
                "{}-{} Hz is not a valid band below the {nyquist} Hz Nyquist frequency",
                self.low_hz, self.high_hz
            )));
        }
        Ok(())
    }
}

/// The four-band EEG filter bank: 0-4, 4-8, 8-12 and 12-30 Hz, order 4.
pub fn eeg_filter_bank() -> Vec<BandSpec> {
    vec![
        BandSpec::new(0.0, 4.0, 4),
        BandSpec::new(4.0, 8.0, 4),
        BandSpec::new(8.0, 12.0, 4),
        BandSpec::new(12.0, 30.0, 4),
    ]
}

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + z_inv * self.b[1] + z2 * self.b[2]) / (1.0 + z_inv * self.a[0] + z2 * self.a[1])
    }

    fn pole_radius(&self) -> f64 {
        // roots of z^2 + a1 z + a2
        let (a1, a2) = (self.a[0], self.a[1]);
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        let r1 = (-a1 + disc) / 2.0;
        let r2 = (-a1 - disc) / 2.0;
        r1.norm().max(r2.norm())
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
}

impl BiquadCascade {
    pub fn identity() -> Self {
        Self { sections: vec![Biquad { b: [1.0, 0.0, 0.0], a: [0.0, 0.0] }] }
    }

    /// Complex response at `freq_hz` for sampling rate `fs_hz`.
    pub fn response(&self, freq_hz: f64, fs_hz: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / fs_hz);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    pub fn magnitude(&self, freq_hz: f64, fs_hz: f64) -> f64 {
        self.response(freq_hz, fs_hz).norm()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections.iter().map(Biquad::pole_radius).fold(0.0, f64::max)
    }

    /// Length of the odd-symmetric extension added at each end by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// Direct-form-II-transposed filtering with steady-state initial
    /// conditions for a step of height `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let mut level = x[0];
        for s in &self.sections {
            let y_ss = level * s.dc_gain();
            let mut z2 = s.b[2] * level - s.a[1] * y_ss;
            let mut z1 = s.b[1] * level - s.a[0] * y_ss + z2;
            for v in x.iter_mut() {
                let input = *v;
                let y = s.b[0] * input + z1;
                z1 = s.b[1] * input - s.a[0] * y + z2;
                z2 = s.b[2] * input - s.a[1] * y;
                *v = y;
            }
            level = y_ss;
        }
    }
}

fn butterworth_prototype(order: usize) -> Vec<Complex64> {
    (0..order)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + order + 1) as f64 / (2 * order) as f64))
        .collect()
}

fn prewarp(f_hz: f64, fs_hz: f64) -> f64 {
    2.0 * fs_hz * (PI * f_hz / fs_hz).tan()
}

/// Groups poles into conjugate pairs (or pairs of reals); a lone real pole
/// is returned as a single-element group.
fn pair_poles(poles: &[Complex64]) -> Vec<Vec<Complex64>> {
    let tol = 1e-10;
    let mut groups = Vec::new();
    let mut reals: Vec<Complex64> = Vec::new();
    for &p in poles {
        if p.im > tol {
            groups.push(vec![p, p.conj()]);
        } else if p.im.abs() <= tol {
            reals.push(Complex64::new(p.re, 0.0));
        }
    }
    reals.sort_by(|a, b| a.re.total_cmp(&b.re));
    for chunk in reals.chunks(2) {
        groups.push(chunk.to_vec());
    }
    groups
}

fn poly_from_roots(roots: &[Complex64]) -> [f64; 3] {
    match roots {
        [] => [1.0, 0.0, 0.0],
        [r] => [1.0, -r.re, 0.0],
        [r1, r2] => [1.0, -(r1 + r2).re, (r1 * r2).re],
        _ => unreachable!("sections hold at most two roots"),
    }
}

/// Designs a Butterworth low-pass (`low_hz == 0`) or band-pass cascade.
/// Band-pass filters of order `n` have `2n` poles, as is conventional.
pub fn design_band(spec: &BandSpec, fs_hz: f64) -> Result<BiquadCascade> {
    spec.validate(fs_hz)?;
    let n = spec.order;
    let fs2 = 2.0 * fs_hz;
    let proto = butterworth_prototype(n);

    let (analog_poles, n_zeros_at_origin, analog_gain) = if spec.is_lowpass() {
        let wc = prewarp(spec.high_hz, fs_hz);
        (proto.iter().map(|p| p * wc).collect::<Vec<_>>(), 0, wc.powi(n as i32))
    } else {
        let wl = prewarp(spec.low_hz, fs_hz);
        let wh = prewarp(spec.high_hz, fs_hz);
        let bw = wh - wl;
        let w0_sq = wl * wh;
        let mut poles = Vec::with_capacity(2 * n);
        for p in &proto {
            let pb = p * bw;
            let disc = (pb * pb - 4.0 * w0_sq).sqrt();
            poles.push((pb + disc) / 2.0);
            poles.push((pb - disc) / 2.0);
        }
        (poles, n, bw.powi(n as i32))
    };

    let n_poles = analog_poles.len();
    let digital_poles: Vec<Complex64> = analog_poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let num: Complex64 = std::iter::repeat_n(Complex64::new(fs2, 0.0), n_zeros_at_origin).product();
    let den: Complex64 = analog_poles.iter().map(|p| fs2 - p).product();
    let gain = analog_gain * (num / den).re;
    debug_assert!(n_zeros_at_origin == 0 || n_zeros_at_origin * 2 == n_poles);

    // zeros at s = 0 map to z = 1, zeros at infinity to z = -1; every
    // band-pass section gets one of each
    let one = Complex64::new(1.0, 0.0);
    let mut sections: Vec<Biquad> = pair_poles(&digital_poles)
        .into_iter()
        .map(|group| {
            let zeros = if spec.is_lowpass() { vec![-one; group.len()] } else { vec![one, -one] };
            let a = poly_from_roots(&group);
            Biquad { b: poly_from_roots(&zeros), a: [a[1], a[2]] }
        })
        .collect();
    for v in sections[0].b.iter_mut() {
        *v *= gain;
    }
    let mut cascade = BiquadCascade { sections };
    if spec.is_lowpass() {
        let dc: f64 = cascade.sections.iter().map(Biquad::dc_gain).product();
        for v in cascade.sections[0].b.iter_mut() {
            *v /= dc;
        }
    }
    Ok(cascade)
}

fn filtfilt_channel(filter: &BiquadCascade, x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    filter.run(&mut ext);
    ext.reverse();
    filter.run(&mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase forward-backward filtering of every channel.
pub fn filtfilt(filter: &BiquadCascade, ts: &TimeSeries) -> Result<TimeSeries> {
    let pad = filter.pad_len();
    if ts.samples() <= pad {
        return Err(Error::TooShort { samples: ts.samples(), needed: pad });
    }
    let data: Vec<f64> = ts.channel_iter().flat_map(|ch| filtfilt_channel(filter, ch, pad)).collect();
    TimeSeries::new(ts.channels(), ts.sample_rate_hz(), data)
}

/// Applies every band to every channel; output channels are band-major
/// (all channels of band 0, then all channels of band 1, ...).
pub fn multiband_eeg(ts: &TimeSeries, bands: &[BandSpec]) -> Result<TimeSeries> {
    if bands.is_empty() {
        return Err(Error::InvalidBand("filter bank has no bands".into()));
    }
    let mut data = Vec::with_capacity(ts.data().len() * bands.len());
    for band in bands {
        let filter = design_band(band, ts.sample_rate_hz())?;
        data.extend(filtfilt(&filter, ts)?.into_data());
    }
    TimeSeries::new(ts.channels() * bands.len(), ts.sample_rate_hz(), data)
}

/// Order-4 zero-phase low-pass, used to smooth continuous word embeddings.
pub fn lowpass_embedding(ts: &TimeSeries, cutoff_hz: f64) -> Result<TimeSeries> {
    let filter = design_band(&BandSpec::new(0.0, cutoff_hz, 4), ts.sample_rate_hz())?;
    filtfilt(&filter, ts)
}
