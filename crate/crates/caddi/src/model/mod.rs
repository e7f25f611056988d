//! The denoiser: a small decoder-only transformer over flattened trajectory
//! contexts, with 2D rotary position/timestep encoding.
//!
//! Timestep conditioning is carried only by the time-rotary subspace — there
//! is no additive timestep embedding — so the architecture stays a plain
//! causal language model.

mod checkpoint;
mod net;
pub mod rotary;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{backward, forward, forward_cached, predict_x0_logits, ForwardCache};
pub use rotary::{rotary_2d, RotaryDims};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("context length {n} exceeds max positions {max}")]
    ContextTooLong { n: usize, max: usize },
    #[error("timestep label {t} exceeds max timesteps {max}")]
    TimestepTooLarge { t: usize, max: usize },
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("attention mask covers {mask} positions, context has {n}")]
    MaskShapeMismatch { mask: usize, n: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("unexpected end of checkpoint file")]
    UnexpectedEof,
    #[error("checkpoint tensor {name} has {found} values, expected {expected}")]
    ShapeMismatch { name: String, found: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Per-head dims rotated by sequence position (even).
    pub seq_rotary_dims: usize,
    /// Per-head dims rotated by diffusion timestep (even).
    pub time_rotary_dims: usize,
    pub seq_rotary_base: f64,
    pub time_rotary_base: f64,
    /// Real symbols plus the mask symbol.
    pub vocab_augmented: usize,
    pub max_positions: usize,
    pub max_timesteps: usize,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, width 64, 4 heads; half of each head
    /// rotated by position, a quarter by timestep, a quarter unrotated.
    pub fn desk_default(vocab_augmented: usize, max_positions: usize, max_timesteps: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            seq_rotary_dims: 8,
            time_rotary_dims: 4,
            seq_rotary_base: 10_000.0,
            time_rotary_base: 10_000.0,
            vocab_augmented,
            max_positions,
            max_timesteps,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn rotary(&self) -> RotaryDims {
        RotaryDims {
            seq_dims: self.seq_rotary_dims,
            time_dims: self.time_rotary_dims,
            seq_base: self.seq_rotary_base,
            time_base: self.time_rotary_base,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad("layers, width and heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.seq_rotary_dims % 2 != 0 || self.time_rotary_dims % 2 != 0 {
            return bad("rotary subspaces must have even size".into());
        }
        if self.seq_rotary_dims + self.time_rotary_dims > self.d_head() {
            return bad(format!(
                "rotary subspaces ({} + {}) exceed head dim {}",
                self.seq_rotary_dims,
                self.time_rotary_dims,
                self.d_head()
            ));
        }
        if self.vocab_augmented < 2 {
            return bad("vocabulary must hold at least one symbol plus the mask".into());
        }
        if self.max_positions == 0 || self.max_timesteps == 0 {
            return bad("max positions and timesteps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNormParams,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2: LayerNormParams,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable tensors. Field order is the declaration order of the
/// checkpoint format and of every tensor walk (optimizer, gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub ln_f: LayerNormParams,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// One tensor's bookkeeping entry in the fixed walk order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub len: usize,
    /// Weight matrices get decoupled weight decay; biases and norms do not.
    pub decayed: bool,
}

impl Parameters {
    /// Scaled-normal initialization: std 0.02 for embeddings and projections,
    /// residual output projections scaled by 1/sqrt(2·n_layers), zero biases,
    /// unit norm gains. Deterministic in the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 0.02;
        let residual_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = |rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| std * gauss(rng))
        };
        let ln = |n: usize| LayerNormParams { gain: Array1::ones(n), bias: Array1::zeros(n) };
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1: ln(d),
                wq: normal(d, d, std, &mut rng),
                bq: Array1::zeros(d),
                wk: normal(d, d, std, &mut rng),
                bk: Array1::zeros(d),
                wv: normal(d, d, std, &mut rng),
                bv: Array1::zeros(d),
                wo: normal(d, d, residual_std, &mut rng),
                bo: Array1::zeros(d),
                ln2: ln(d),
                w1: normal(d, config.d_ff(), std, &mut rng),
                b1: Array1::zeros(config.d_ff()),
                w2: normal(config.d_ff(), d, residual_std, &mut rng),
                b2: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            embed: normal(config.vocab_augmented, d, std, &mut rng),
            layers,
            ln_f: ln(d),
            w_out: normal(d, config.vocab_augmented, std, &mut rng),
            b_out: Array1::zeros(config.vocab_augmented),
        })
    }

    /// All-zero tensors with the shapes the config dictates.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let ln = |n: usize| LayerNormParams { gain: Array1::zeros(n), bias: Array1::zeros(n) };
        Self {
            embed: Array2::zeros((config.vocab_augmented, d)),
            layers: (0..config.n_layers)
                .map(|_| LayerParams {
                    ln1: ln(d),
                    wq: Array2::zeros((d, d)),
                    bq: Array1::zeros(d),
                    wk: Array2::zeros((d, d)),
                    bk: Array1::zeros(d),
                    wv: Array2::zeros((d, d)),
                    bv: Array1::zeros(d),
                    wo: Array2::zeros((d, d)),
                    bo: Array1::zeros(d),
                    ln2: ln(d),
                    w1: Array2::zeros((d, config.d_ff())),
                    b1: Array1::zeros(config.d_ff()),
                    w2: Array2::zeros((config.d_ff(), d)),
                    b2: Array1::zeros(d),
                })
                .collect(),
            ln_f: ln(d),
            w_out: Array2::zeros((d, config.vocab_augmented)),
            b_out: Array1::zeros(config.vocab_augmented),
        }
    }

    /// Same shapes as `self`, all zeros (gradient and moment buffers).
    pub fn zeros_like(&self) -> Self {
        let zero2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let zero1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        let zln = |l: &LayerNormParams| LayerNormParams { gain: zero1(&l.gain), bias: zero1(&l.bias) };
        Self {
            embed: zero2(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1: zln(&l.ln1),
                    wq: zero2(&l.wq),
                    bq: zero1(&l.bq),
                    wk: zero2(&l.wk),
                    bk: zero1(&l.bk),
                    wv: zero2(&l.wv),
                    bv: zero1(&l.bv),
                    wo: zero2(&l.wo),
                    bo: zero1(&l.bo),
                    ln2: zln(&l.ln2),
                    w1: zero2(&l.w1),
                    b1: zero1(&l.b1),
                    w2: zero2(&l.w2),
                    b2: zero1(&l.b2),
                })
                .collect(),
            ln_f: zln(&self.ln_f),
            w_out: zero2(&self.w_out),
            b_out: zero1(&self.b_out),
        }
    }

    pub fn meta(&self) -> Vec<TensorMeta> {
        let mut meta = Vec::new();
        let mut push = |name: String, len: usize, decayed: bool| {
            meta.push(TensorMeta { name, len, decayed })
        };
        push("embed".into(), self.embed.len(), true);
        for (i, l) in self.layers.iter().enumerate() {
            push(format!("layer{i}.ln1.gain"), l.ln1.gain.len(), false);
            push(format!("layer{i}.ln1.bias"), l.ln1.bias.len(), false);
            push(format!("layer{i}.wq"), l.wq.len(), true);
            push(format!("layer{i}.bq"), l.bq.len(), false);
            push(format!("layer{i}.wk"), l.wk.len(), true);
            push(format!("layer{i}.bk"), l.bk.len(), false);
            push(format!("layer{i}.wv"), l.wv.len(), true);
            push(format!("layer{i}.bv"), l.bv.len(), false);
            push(format!("layer{i}.wo"), l.wo.len(), true);
            push(format!("layer{i}.bo"), l.bo.len(), false);
            push(format!("layer{i}.ln2.gain"), l.ln2.gain.len(), false);
            push(format!("layer{i}.ln2.bias"), l.ln2.bias.len(), false);
            push(format!("layer{i}.w1"), l.w1.len(), true);
            push(format!("layer{i}.b1"), l.b1.len(), false);
            push(format!("layer{i}.w2"), l.w2.len(), true);
            push(format!("layer{i}.b2"), l.b2.len(), false);
        }
        push("ln_f.gain".into(), self.ln_f.gain.len(), false);
        push("ln_f.bias".into(), self.ln_f.bias.len(), false);
        push("w_out".into(), self.w_out.len(), true);
        push("b_out".into(), self.b_out.len(), false);
        meta
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.push(self.embed.as_slice().unwrap());
        for l in &self.layers {
            out.push(l.ln1.gain.as_slice().unwrap());
            out.push(l.ln1.bias.as_slice().unwrap());
            out.push(l.wq.as_slice().unwrap());
            out.push(l.bq.as_slice().unwrap());
            out.push(l.wk.as_slice().unwrap());
            out.push(l.bk.as_slice().unwrap());
            out.push(l.wv.as_slice().unwrap());
            out.push(l.bv.as_slice().unwrap());
            out.push(l.wo.as_slice().unwrap());
            out.push(l.bo.as_slice().unwrap());
            out.push(l.ln2.gain.as_slice().unwrap());
            out.push(l.ln2.bias.as_slice().unwrap());
            out.push(l.w1.as_slice().unwrap());
            out.push(l.b1.as_slice().unwrap());
            out.push(l.w2.as_slice().unwrap());
            out.push(l.b2.as_slice().unwrap());
        }
        out.push(self.ln_f.gain.as_slice().unwrap());
        out.push(self.ln_f.bias.as_slice().unwrap());
        out.push(self.w_out.as_slice().unwrap());
        out.push(self.b_out.as_slice().unwrap());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.embed.as_slice_mut().unwrap());
        for l in &mut self.layers {
            out.push(l.ln1.gain.as_slice_mut().unwrap());
            out.push(l.ln1.bias.as_slice_mut().unwrap());
            out.push(l.wq.as_slice_mut().unwrap());
            out.push(l.bq.as_slice_mut().unwrap());
            out.push(l.wk.as_slice_mut().unwrap());
            out.push(l.bk.as_slice_mut().unwrap());
            out.push(l.wv.as_slice_mut().unwrap());
            out.push(l.bv.as_slice_mut().unwrap());
            out.push(l.wo.as_slice_mut().unwrap());
            out.push(l.bo.as_slice_mut().unwrap());
            out.push(l.ln2.gain.as_slice_mut().unwrap());
            out.push(l.ln2.bias.as_slice_mut().unwrap());
            out.push(l.w1.as_slice_mut().unwrap());
            out.push(l.b1.as_slice_mut().unwrap());
            out.push(l.w2.as_slice_mut().unwrap());
            out.push(l.b2.as_slice_mut().unwrap());
        }
        out.push(self.ln_f.gain.as_slice_mut().unwrap());
        out.push(self.ln_f.bias.as_slice_mut().unwrap());
        out.push(self.w_out.as_slice_mut().unwrap());
        out.push(self.b_out.as_slice_mut().unwrap());
        out
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Standard-normal draw (Box–Muller over the seeded stream).
fn gauss(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        if u > f64::MIN_POSITIVE {
            return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        }
    }
}

/// Per-position logits over the augmented vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub logits: Array2<f64>,
}

impl DenoiserOutput {
    /// Softmax of one row; a valid categorical over the augmented vocabulary.
    pub fn probs_row(&self, r: usize) -> Vec<f64> {
        softmax(self.logits.row(r).as_slice().unwrap())
    }

    pub fn log_probs_row(&self, r: usize) -> Vec<f64> {
        log_softmax(self.logits.row(r).as_slice().unwrap())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}
