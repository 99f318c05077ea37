//! The EEG encoder and the speech-feature projection head.
//!
//! EEG path:
//!
//! ```text
//! linear(C -> C) -> 1x1 conv(C -> D_h)
//!   -> n_blocks x [ h += drop(gelu(dilated conv_a(h)))
//!                   h += drop(gelu(dilated conv_b(h)))
//!                   h  = drop(gelu(1x1 conv(h))) ]
//!   -> 1x1 conv(D_h -> 2 D_h) -> gelu -> 1x1 conv(2 D_h -> D)
//! ```
//!
//! Feature path: `1x1 conv(C_f -> 2D) -> gelu -> 1x1 conv(2D -> D)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::series::TimeSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EegEncoderConfig {
    pub in_channels: usize,
    pub d_hidden: usize,
    pub d_latent: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    /// two entries per block, one per dilated conv
    pub dilation_schedule: Vec<usize>,
    pub dropout_p: f64,
}

/// Dilations `2^(2j mod 5)`, `2^((2j + 1) mod 5)` for block `j`.
pub fn default_dilations(n_blocks: usize) -> Vec<usize> {
    (0..n_blocks).flat_map(|j| [1usize << ((2 * j) % 5), 1usize << ((2 * j + 1) % 5)]).collect()
}

impl Default for EegEncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            d_hidden: 256,
            d_latent: 64,
            n_blocks: 5,
            kernel: 3,
            dilation_schedule: default_dilations(5),
            dropout_p: 0.5,
        }
    }
}

impl EegEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.d_hidden == 0 || self.d_latent == 0 {
            return Err(Error::InvalidArgument("encoder widths must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel {} must be odd", self.kernel)));
        }
        if self.dilation_schedule.len() != 2 * self.n_blocks || self.dilation_schedule.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dilation schedule needs {} positive entries, got {:?}",
                2 * self.n_blocks,
                self.dilation_schedule
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Closed-form parameter count of the EEG encoder.
    pub fn param_count(&self) -> usize {
        let (c, h, d, k) = (self.in_channels, self.d_hidden, self.d_latent, self.kernel);
        let block = 2 * (h * h * k + h) + (h * h + h);
        c * (c + 1) + (c + 1) * h + self.n_blocks * block + (h + 1) * 2 * h + (2 * h + 1) * d
    }
}

/// Samples of input context seen by one output sample of the EEG encoder.
pub fn receptive_field(cfg: &EegEncoderConfig) -> usize {
    1 + (cfg.kernel - 1) * cfg.dilation_schedule.iter().sum::<usize>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoderConfig {
    pub in_channels: usize,
    pub d_latent: usize,
}

impl FeatureEncoderConfig {
    pub fn param_count(&self) -> usize {
        let (c, d) = (self.in_channels, self.d_latent);
        (c + 1) * 2 * d + (2 * d + 1) * d
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: ParamId,
    b: ParamId,
    dilation: usize,
    pointwise: bool,
}

impl Layer {
    /// Registers a layer with weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fn new(store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, kernel: Option<(usize, usize)>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (shape, fan_in, dilation) = match kernel {
            None => (vec![c_out, c_in], c_in, 1),
            Some((k, dil)) => (vec![c_out, c_in, k], c_in * k, dil),
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let n: usize = shape.iter().product();
        let w = store.add(format!("{name}.weight"), Tensor::new(shape, draw(n))?)?;
        let b = store.add(format!("{name}.bias"), Tensor::new(vec![c_out], draw(c_out))?)?;
        Ok(Self { w, b, dilation, pointwise: kernel.is_none() })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        if self.pointwise {
            tape.linear(x, w, Some(b))
        } else {
            tape.conv1d(x, w, Some(b), self.dilation)
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    dilated_a: Layer,
    dilated_b: Layer,
    mix: Layer,
}

#[derive(Debug, Clone)]
pub struct EegEncoder {
    cfg: EegEncoderConfig,
    input: Layer,
    proj: Layer,
    blocks: Vec<Block>,
    head_hidden: Layer,
    head_out: Layer,
}

impl EegEncoder {
    pub fn new(cfg: EegEncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, h) = (cfg.in_channels, cfg.d_hidden);
        let input = Layer::new(store, "eeg.input", c, c, None, rng)?;
        let proj = Layer::new(store, "eeg.proj", h, c, None, rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for j in 0..cfg.n_blocks {
            let (da, db) = (cfg.dilation_schedule[2 * j], cfg.dilation_schedule[2 * j + 1]);
            blocks.push(Block {
                dilated_a: Layer::new(store, &format!("eeg.block{j}.conv_a"), h, h, Some((cfg.kernel, da)), rng)?,
                dilated_b: Layer::new(store, &format!("eeg.block{j}.conv_b"), h, h, Some((cfg.kernel, db)), rng)?,
                mix: Layer::new(store, &format!("eeg.block{j}.mix"), h, h, None, rng)?,
            });
        }
        let head_hidden = Layer::new(store, "eeg.head_hidden", 2 * h, h, None, rng)?;
        let head_out = Layer::new(store, "eeg.head_out", cfg.d_latent, 2 * h, None, rng)?;
        Ok(Self { cfg, input, proj, blocks, head_hidden, head_out })
    }

    pub fn config(&self) -> &EegEncoderConfig {
        &self.cfg
    }

    /// `x: [B, in_channels, T]` to latents `[B, d_latent, T]`.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool, rng: &mut R) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "EEG encoder expects [B, {}, T], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let p = self.cfg.dropout_p;
        let x = self.input.forward(tape, store, x)?;
        let mut h = self.proj.forward(tape, store, x)?;
        for block in &self.blocks {
            for layer in [&block.dilated_a, &block.dilated_b] {
                let y = layer.forward(tape, store, h)?;
                let y = tape.gelu(y);
                let y = tape.dropout(y, p, training, rng)?;
                h = tape.add(h, y)?;
            }
            let y = block.mix.forward(tape, store, h)?;
            let y = tape.gelu(y);
            h = tape.dropout(y, p, training, rng)?;
        }
        let y = self.head_hidden.forward(tape, store, h)?;
        let y = tape.gelu(y);
        self.head_out.forward(tape, store, y)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    cfg: FeatureEncoderConfig,
    hidden: Layer,
    out: Layer,
}

impl FeatureEncoder {
    pub fn new(cfg: FeatureEncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.d_latent == 0 {
            return Err(Error::InvalidArgument("feature encoder widths must be positive".into()));
        }
        let hidden = Layer::new(store, "feat.hidden", 2 * cfg.d_latent, cfg.in_channels, None, rng)?;
        let out = Layer::new(store, "feat.out", cfg.d_latent, 2 * cfg.d_latent, None, rng)?;
        Ok(Self { cfg, hidden, out })
    }

    pub fn config(&self) -> &FeatureEncoderConfig {
        &self.cfg
    }

    /// `f: [B, in_channels, T]` to latents `[B, d_latent, T]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let shape = tape.shape(f);
        if shape.len() != 3 || shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "feature encoder expects [B, {}, T], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let y = self.hidden.forward(tape, store, f)?;
        let y = tape.gelu(y);
        self.out.forward(tape, store, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub eeg: EegEncoderConfig,
    pub feature_channels: usize,
}

impl ModelConfig {
    pub fn feature_config(&self) -> FeatureEncoderConfig {
        FeatureEncoderConfig { in_channels: self.feature_channels, d_latent: self.eeg.d_latent }
    }
}

/// Both encoders and their shared parameter store.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub eeg: EegEncoder,
    pub feature: FeatureEncoder,
    pub params: ParamStore,
}

impl DualEncoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let eeg = EegEncoder::new(config.eeg.clone(), &mut params, &mut rng)?;
        let feature = FeatureEncoder::new(config.feature_config(), &mut params, &mut rng)?;
        Ok(Self { config, eeg, feature, params })
    }

    pub fn d_latent(&self) -> usize {
        self.config.eeg.d_latent
    }

    /// Inference-mode latents for a batch of equally long series.
    pub fn encode_eeg_batch(&self, segments: &[&TimeSeries]) -> Result<Vec<f64>> {
        let x = stack(segments)?;
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = self.eeg.forward(&mut tape, &self.params, xv, false, &mut rng)?;
        Ok(tape.value(z).to_vec())
    }

    pub fn encode_feature_batch(&self, segments: &[&TimeSeries]) -> Result<Vec<f64>> {
        let f = stack(segments)?;
        let mut tape = Tape::new();
        let fv = tape.input(f);
        let z = self.feature.forward(&mut tape, &self.params, fv)?;
        Ok(tape.value(z).to_vec())
    }

    pub fn encode_eeg(&self, segment: &TimeSeries) -> Result<TimeSeries> {
        let z = self.encode_eeg_batch(&[segment])?;
        TimeSeries::new(self.d_latent(), segment.sample_rate_hz(), z)
    }

    pub fn encode_feature(&self, segment: &TimeSeries) -> Result<TimeSeries> {
        let z = self.encode_feature_batch(&[segment])?;
        TimeSeries::new(self.d_latent(), segment.sample_rate_hz(), z)
    }
}

/// Stacks equally shaped series into a `[B, C, T]` tensor.
pub fn stack(segments: &[&TimeSeries]) -> Result<Tensor> {
    let first = segments.first().ok_or_else(|| Error::EmptyInput("no segments to stack".into()))?;
    let (c, t) = (first.channels(), first.samples());
    let mut data = Vec::with_capacity(segments.len() * c * t);
    for s in segments {
        if (s.channels(), s.samples()) != (c, t) {
            return Err(Error::ShapeMismatch(format!(
                "segment [{}, {}] differs from [{c}, {t}]",
                s.channels(),
                s.samples()
            )));
        }
        data.extend_from_slice(s.data());
    }
    Tensor::new(vec![segments.len(), c, t], data)
}
