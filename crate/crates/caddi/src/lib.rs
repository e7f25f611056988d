//! Non-Markovian discrete diffusion over character sequences.
//!
//! The forward process corrupts a clean sequence x_0 independently at every
//! timestep (each latent x_t depends only on x_0), so the whole trajectory
//! x_{t:T} carries complementary evidence about the data. A decoder-only
//! transformer with a 2D rotary encoding (token position + diffusion
//! timestep) reads the flattened trajectory and predicts x_0; sampling walks
//! t = T..1, re-corrupting each prediction with the marginal kernel.
//!
//! Modules follow the pipeline:
//!
//! - [`corpus`]: character vocabulary, encoding, deterministic batch windows
//! - [`schedule`]: noise schedules, marginal kernels, mutual-information decay
//! - [`trajectory`]: forward sampling, latent compression, attention masks
//! - [`model`]: the denoiser (forward/backward, init, checkpoints)
//! - [`train`]: ELBO objectives, AdamW loop, gradient verification
//! - [`sampler`]: block / token-autoregressive / speculative / guided decoding
//! - [`eval`]: bits-per-dimension bound, entropy, n-gram oracle, robustness

pub mod corpus;
pub mod eval;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod synthetic;
pub mod train;
pub mod trajectory;

pub use corpus::{BatchSampler, Vocabulary};
pub use model::{DenoiserOutput, ModelConfig, Parameters};
pub use sampler::{GenerationTrace, SamplerConfig, SamplerMode};
pub use schedule::{KernelKind, MarginalKernel, MiProfile, NoiseSchedule, ProcessKind};
pub use train::{LossReport, TrainConfig};
pub use trajectory::{AttentionMask, FlatContext, MaskMode, Trajectory};
