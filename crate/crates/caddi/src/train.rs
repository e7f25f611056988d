//! Training objectives and the optimization loop.
//!
//! For absorbing kernels the ELBO collapses to a weighted cross-entropy
//! between the clean sequence and the model's x_0 prediction at every
//! timestep block (`loss_absorb`). `elbo_general` is the kernel-agnostic
//! bound (reconstruction + prior KL + per-step reverse KLs, Monte-Carlo over
//! trajectories); on absorbing kernels with matching options the two agree
//! per trajectory, which doubles as an end-to-end check of the block-causal
//! mask and the 2D rotary labels.
//!
//! Two per-step weightings coexist:
//!
//! - [`KlWeighting::Corruption`]: block t weighted by α_{t−1} — the
//!   simplified absorbing-kernel objective used for training.
//! - [`KlWeighting::Survival`]: block t weighted by 1 − α_{t−1} — the exact
//!   kernel-row algebra; this is the weighting under which the bound is a
//!   genuine upper bound on NLL, so likelihood evaluation uses it.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{BatchSampler, CorpusError};
use crate::model::{
    self, backward, forward_cached, log_softmax, softmax, ModelConfig, ModelError, Parameters,
};
use crate::schedule::{KernelKind, MarginalKernel, NoiseSchedule, ScheduleError};
use crate::trajectory::{AttentionMask, FlatContext, MaskMode, Trajectory, TrajectoryError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("loss_absorb requires an absorbing kernel; use elbo_general for uniform kernels")]
    NonAbsorbingKernel,
    #[error("absorbing prior needs alpha_T = 1 (got {0})")]
    OpenPrior(f64),
    #[error("need at least one Monte-Carlo sample")]
    NoSamples,
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
    #[error("bad options: {0}")]
    BadOptions(String),
}

/// Weight applied to the reconstruction (t = 1) term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Unweighted reconstruction, w_0 = 1 (default).
    Exact,
    /// w_0 = α_0 (≈ 0), reproducing the simplified objective verbatim.
    Literal,
}

/// Weight applied to the per-step (t ≥ 2) terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlWeighting {
    /// α_{t−1}: the simplified absorbing-kernel training objective.
    Corruption,
    /// 1 − α_{t−1}: the exact kernel-row KL; valid likelihood bound.
    Survival,
}

/// Per-block loss weights, index t−1 for block t.
pub fn block_weights(
    schedule: &NoiseSchedule,
    mode: WeightMode,
    weighting: KlWeighting,
) -> Vec<f64> {
    (1..=schedule.horizon())
        .map(|t| match weighting {
            KlWeighting::Corruption => {
                if t == 1 {
                    match mode {
                        WeightMode::Exact => 1.0,
                        WeightMode::Literal => schedule.alpha_at(0),
                    }
                } else {
                    schedule.alpha_at(t - 1)
                }
            }
            KlWeighting::Survival => 1.0 - schedule.alpha_at(t - 1),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compression {
    Truncate,
    Recompose,
}

/// Which training layout the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Blocks attend bidirectionally within a timestep, causally across.
    BlockCausal,
    /// Token-causal mask over the window with the final block repeated.
    TokenCausalAugmented,
    /// Token-causal next-token prediction with the clean block teacher-forced.
    TokenCausalAr,
}

#[derive(Debug, Clone)]
pub struct LossOptions {
    /// Context window m_w in blocks.
    pub window: usize,
    /// Window start t; blocks [t, min(t+m_w−1, T)] enter the context.
    pub window_start: usize,
    pub attention: AttentionKind,
    pub compression: Compression,
    pub weight_mode: WeightMode,
    pub weighting: KlWeighting,
    pub mask_id: usize,
}

impl LossOptions {
    /// Whole-horizon window (the full objective, one pass over all blocks).
    pub fn full(horizon: usize, mask_id: usize) -> Self {
        Self {
            window: horizon,
            window_start: 1,
            attention: AttentionKind::BlockCausal,
            compression: Compression::Truncate,
            weight_mode: WeightMode::Exact,
            weighting: KlWeighting::Corruption,
            mask_id,
        }
    }
}

/// Loss decomposition: `total_nats` is the sum of the per-timestep
/// components over all tokens of one sequence.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub total_nats: f64,
    /// (timestep t, summed weighted cross-entropy of block t).
    pub per_block: Vec<(usize, f64)>,
    pub token_count: usize,
}

fn build_window_context(
    traj: &Trajectory,
    opts: &LossOptions,
) -> Result<FlatContext, TrajectoryError> {
    match opts.compression {
        Compression::Truncate => traj.truncate(opts.window_start, opts.window),
        Compression::Recompose => traj.recompose(opts.window_start, opts.window, opts.mask_id),
    }
}

/// Per-position prediction targets and their block weights for a layout.
///
/// Block-causal: position p predicts x_0 at its own sequence position, with
/// its own block's weight. Token-causal layouts predict through the standard
/// next-token shift: position p predicts the x_0 token at position p+1's
/// sequence label, weighted by p+1's block; the autoregressive layout
/// restricts targets to the teacher-forced clean block (and the boundary
/// position before it) with the window-start weight throughout.
fn prediction_targets(
    ctx: &FlatContext,
    x0: &[usize],
    weights: &[f64],
    opts: &LossOptions,
    window_len: usize,
) -> Vec<(usize, usize, f64)> {
    let n = ctx.len();
    match opts.attention {
        AttentionKind::BlockCausal => (0..n)
            .map(|p| (p, x0[ctx.seq_pos[p]], weights[ctx.time[p] - 1]))
            .collect(),
        AttentionKind::TokenCausalAugmented => (0..n - 1)
            .map(|p| (p, x0[ctx.seq_pos[p + 1]], weights[ctx.time[p + 1] - 1]))
            .collect(),
        AttentionKind::TokenCausalAr => {
            let w = weights[opts.window_start - 1];
            (window_len - 1..n - 1).map(|p| (p, x0[ctx.seq_pos[p + 1]], w)).collect()
        }
    }
}

fn layout_context(
    traj: &Trajectory,
    x0: &[usize],
    opts: &LossOptions,
) -> Result<(FlatContext, usize), TrainError> {
    let base = build_window_context(traj, opts)?;
    let window_len = base.len();
    let ctx = match opts.attention {
        AttentionKind::BlockCausal => base,
        AttentionKind::TokenCausalAugmented => base.bidir_augment()?,
        AttentionKind::TokenCausalAr => {
            let mut ctx = base;
            for (j, &tok) in x0.iter().enumerate() {
                ctx.push_entry(tok, j, 0);
            }
            ctx
        }
    };
    Ok((ctx, window_len))
}

fn mask_mode(attention: AttentionKind) -> MaskMode {
    match attention {
        AttentionKind::BlockCausal => MaskMode::BlockCausal,
        _ => MaskMode::TokenCausal,
    }
}

/// Weighted cross-entropy over one flattened window; optionally accumulates
/// parameter gradients of the summed loss.
pub(crate) fn window_loss(
    params: &Parameters,
    config: &ModelConfig,
    x0: &[usize],
    traj: &Trajectory,
    schedule: &NoiseSchedule,
    opts: &LossOptions,
    mut grads: Option<&mut Parameters>,
) -> Result<LossReport, TrainError> {
    let weights = block_weights(schedule, opts.weight_mode, opts.weighting);
    let (ctx, window_len) = layout_context(traj, x0, opts)?;
    let mask = AttentionMask::build(&ctx, mask_mode(opts.attention))?;
    let (out, cache) = forward_cached(params, config, &ctx, &mask)?;
    let targets = prediction_targets(&ctx, x0, &weights, opts, window_len);

    let mut total = 0.0;
    let mut per_block: Vec<(usize, f64)> = Vec::new();
    let mut dlogits = grads
        .as_ref()
        .map(|_| Array2::<f64>::zeros((ctx.len(), config.vocab_augmented)));
    for &(p, target, w) in &targets {
        let logp = log_softmax(out.logits.row(p).as_slice().unwrap());
        let ce = -logp[target];
        total += w * ce;
        let t_label = if opts.attention == AttentionKind::TokenCausalAr {
            opts.window_start
        } else if opts.attention == AttentionKind::BlockCausal {
            ctx.time[p]
        } else {
            ctx.time[p + 1]
        };
        match per_block.iter_mut().find(|(t, _)| *t == t_label) {
            Some((_, acc)) => *acc += w * ce,
            None => per_block.push((t_label, w * ce)),
        }
        if let Some(dl) = dlogits.as_mut() {
            let probs = softmax(out.logits.row(p).as_slice().unwrap());
            for c in 0..config.vocab_augmented {
                dl[[p, c]] += w * (probs[c] - if c == target { 1.0 } else { 0.0 });
            }
        }
    }
    if let (Some(g), Some(dl)) = (grads.as_deref_mut(), dlogits.as_ref()) {
        backward(params, config, &ctx, &cache, dl, g);
    }
    per_block.sort_by_key(|&(t, _)| t);
    Ok(LossReport { total_nats: total, per_block, token_count: targets.len() })
}

/// Windowed loss plus its parameter gradients (accumulated into `grads`).
pub fn window_grads(
    params: &Parameters,
    config: &ModelConfig,
    x0: &[usize],
    traj: &Trajectory,
    schedule: &NoiseSchedule,
    opts: &LossOptions,
    grads: &mut Parameters,
) -> Result<LossReport, TrainError> {
    window_loss(params, config, x0, traj, schedule, opts, Some(grads))
}

/// Simplified absorbing-kernel objective: the negative of
/// Σ_t w_{t−1}·x_0ᵀ log μ_θ(x_{t:T}, t), summed over tokens, read from one
/// forward pass over the flattened window.
pub fn loss_absorb(
    params: &Parameters,
    config: &ModelConfig,
    x0: &[usize],
    traj: &Trajectory,
    schedule: &NoiseSchedule,
    kernel: &MarginalKernel,
    opts: &LossOptions,
) -> Result<LossReport, TrainError> {
    if kernel.kind != KernelKind::Absorbing {
        return Err(TrainError::NonAbsorbingKernel);
    }
    window_loss(params, config, x0, traj, schedule, opts, None)
}

/// Literal categorical KL Σ_k q_k·(ln q_k − ln p_k) over the augmented
/// vocabulary.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qk, _)| qk > 0.0)
        .map(|(&qk, &pk)| qk * (qk.ln() - pk.ln()))
        .sum()
}

#[derive(Debug, Clone)]
pub struct ElboOptions {
    pub window: usize,
    pub compression: Compression,
    pub attention: AttentionKind,
    pub weight_mode: WeightMode,
    pub weighting: KlWeighting,
}

impl ElboOptions {
    /// Options that pair exactly with [`loss_absorb`] over a full window.
    pub fn paired(horizon: usize) -> Self {
        Self {
            window: horizon,
            compression: Compression::Truncate,
            attention: AttentionKind::BlockCausal,
            weight_mode: WeightMode::Exact,
            weighting: KlWeighting::Corruption,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElboEstimate {
    /// Monte-Carlo mean of the bound, nats per sequence (a lower bound on
    /// log p(x_0), so ≤ 0 in practice).
    pub mean_nats: f64,
    pub stderr_nats: f64,
    pub n_mc: usize,
    pub token_count: usize,
}

impl ElboEstimate {
    pub fn per_token_nats(&self) -> f64 {
        self.mean_nats / self.token_count as f64
    }
}

/// Reads the L logit rows predicting x_0 for timestep `t` from a windowed
/// context (one forward pass per timestep).
fn x0_prediction_rows(
    params: &Parameters,
    config: &ModelConfig,
    traj: &Trajectory,
    t: usize,
    opts: &ElboOptions,
    mask_id: usize,
) -> Result<Array2<f64>, TrainError> {
    let window = match opts.compression {
        Compression::Truncate => traj.truncate(t, opts.window)?,
        Compression::Recompose => traj.recompose(t, opts.window, mask_id)?,
    };
    // The bound is defined on the block-prediction model; token-level
    // autoregressive likelihoods are intractable, so AR reads through the
    // augmented one-shot layout here.
    let mode = match opts.attention {
        AttentionKind::BlockCausal => MaskMode::BlockCausal,
        _ => MaskMode::TokenCausal,
    };
    Ok(model::predict_x0_logits(params, config, &window, mode)?)
}

/// Monte-Carlo evidence bound: reconstruction − prior KL − Σ_t reverse KLs,
/// averaged over `n_mc` trajectories drawn with ChaCha streams 0..n_mc of
/// `seed` (so callers can re-derive the exact trajectories).
pub fn elbo_general(
    params: &Parameters,
    config: &ModelConfig,
    x0: &[usize],
    schedule: &NoiseSchedule,
    kernel: &MarginalKernel,
    n_mc: usize,
    seed: u64,
    opts: &ElboOptions,
) -> Result<ElboEstimate, TrainError> {
    if n_mc == 0 {
        return Err(TrainError::NoSamples);
    }
    let horizon = schedule.horizon();
    if kernel.kind == KernelKind::Absorbing && schedule.alpha_at(horizon) < 1.0 {
        return Err(TrainError::OpenPrior(schedule.alpha_at(horizon)));
    }
    let weights = block_weights(schedule, opts.weight_mode, opts.weighting);
    let uniform_prior = 1.0 / kernel.vocab_size as f64;
    let mut values = Vec::with_capacity(n_mc);
    for i in 0..n_mc {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let traj = Trajectory::forward_sample_with_rng(x0, schedule, kernel, &mut rng)?;
        let mut bound = 0.0;
        for t in 1..=horizon {
            let logits = x0_prediction_rows(params, config, &traj, t, opts, kernel.mask_id())?;
            for (j, &tok) in x0.iter().enumerate() {
                let mu = softmax(logits.row(j).as_slice().unwrap());
                let term = match kernel.kind {
                    // Absorbing rows share the mask mass, so the reverse KL
                    // reduces to the clean-token cross-entropy scaled by the
                    // block weight.
                    KernelKind::Absorbing => {
                        let mut onehot = vec![0.0; config.vocab_augmented];
                        onehot[tok] = 1.0;
                        weights[t - 1] * kl_categorical(&onehot, &mu)
                    }
                    KernelKind::Uniform => {
                        if t == 1 {
                            let mut onehot = vec![0.0; config.vocab_augmented];
                            onehot[tok] = 1.0;
                            weights[0] * kl_categorical(&onehot, &mu)
                        } else {
                            let a = schedule.alpha_at(t - 1);
                            let q = kernel.row(tok, a)?;
                            let mut p = vec![0.0; config.vocab_augmented];
                            for k in 0..kernel.vocab_size {
                                p[k] = (1.0 - a) * mu[k] + a * uniform_prior;
                            }
                            p[kernel.mask_id()] = (1.0 - a) * mu[kernel.mask_id()];
                            kl_categorical(&q, &p)
                        }
                    }
                };
                bound -= term;
            }
        }
        if kernel.kind == KernelKind::Uniform {
            let a_t = schedule.alpha_at(horizon);
            for &tok in x0 {
                let q = kernel.row(tok, a_t)?;
                let mut p = vec![0.0; config.vocab_augmented];
                for pk in p.iter_mut().take(kernel.vocab_size) {
                    *pk = uniform_prior;
                }
                bound -= kl_categorical(&q, &p);
            }
        }
        values.push(bound);
    }
    let mean = values.iter().sum::<f64>() / n_mc as f64;
    let var = if n_mc > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_mc - 1) as f64
    } else {
        0.0
    };
    Ok(ElboEstimate {
        mean_nats: mean,
        stderr_nats: (var / n_mc as f64).sqrt(),
        n_mc,
        token_count: x0.len(),
    })
}

/// Decoupled-weight-decay adaptive-moments optimizer.
pub struct AdamW {
    m: Parameters,
    v: Parameters,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &Parameters, weight_decay: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let meta = params.meta();
        let p_slices = params.slices_mut();
        let g_slices = grads.slices();
        let m_slices = self.m.slices_mut();
        let v_slices = self.v.slices_mut();
        for (((ps, gs), (ms, vs)), meta) in p_slices
            .into_iter()
            .zip(g_slices)
            .zip(m_slices.into_iter().zip(v_slices))
            .zip(meta)
        {
            let wd = if meta.decayed { self.weight_decay } else { 0.0 };
            for i in 0..ps.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * ps[i]);
            }
        }
    }
}

/// Linear warmup to `lr` then linear decay to zero at `total`.
pub fn lr_at(step: usize, lr: f64, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step < warmup {
        lr * (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        lr * (total - step) as f64 / (total - warmup) as f64
    } else {
        lr
    }
}

/// Which noise levels corrupt row t of the training trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionLevels {
    /// α_t — the independent forward process.
    Independent,
    /// α*_t — marginals of the matched stepwise chain (baseline training).
    Cumulative,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub horizon: usize,
    pub kernel: KernelKind,
    pub window: usize,
    pub attention: AttentionKind,
    pub compression: Compression,
    pub corruption: CorruptionLevels,
    pub weight_mode: WeightMode,
    pub seq_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let bad = |m: &str| Err(TrainError::BadOptions(m.into()));
        if self.horizon == 0 || self.window == 0 || self.seq_len == 0 {
            return bad("horizon, window and sequence length must be positive");
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch size and total steps must be positive");
        }
        if self.learning_rate <= 0.0 {
            return bad("learning rate must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: Parameters,
    /// (step, mean loss nats per target token, learning rate).
    pub loss_curve: Vec<(usize, f64, f64)>,
}

/// Trains a denoiser on an encoded corpus.
///
/// Per step: draw a batch of windows, sample one forward trajectory per
/// sequence, pick a window start uniformly in [1, T], accumulate gradients
/// of the windowed weighted cross-entropy, and take one AdamW step.
/// Deterministic in the seed.
pub fn train(config: &TrainConfig, corpus_ids: &[usize]) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let schedule = NoiseSchedule::linear(config.horizon)?;
    let kernel = match config.kernel {
        KernelKind::Absorbing => MarginalKernel::absorbing(config.model.vocab_augmented - 1),
        KernelKind::Uniform => MarginalKernel::uniform(config.model.vocab_augmented - 1),
    };
    let levels: Vec<f64> = (1..=config.horizon)
        .map(|t| match config.corruption {
            CorruptionLevels::Independent => schedule.alpha_at(t),
            CorruptionLevels::Cumulative => schedule.alpha_star_at(t),
        })
        .collect();

    let mut params = Parameters::init(&config.model, config.seed)?;
    let mut opt = AdamW::new(&params, config.weight_decay);
    let mut batches =
        BatchSampler::new(corpus_ids.to_vec(), config.seq_len, config.batch_size, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut loss_curve = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let lr = lr_at(step, config.learning_rate, config.warmup_steps, config.total_steps);
        let batch = batches.next_batch();
        let mut grads = params.zeros_like();
        let mut step_loss = 0.0;
        let mut step_tokens = 0usize;
        for x0 in &batch {
            let traj = Trajectory::forward_sample_at_levels(x0, &levels, &kernel, &mut rng)?;
            let start = rng.random_range(1..=config.horizon);
            let opts = LossOptions {
                window: config.window,
                window_start: start,
                attention: config.attention,
                compression: config.compression,
                weight_mode: config.weight_mode,
                weighting: KlWeighting::Corruption,
                mask_id: kernel.mask_id(),
            };
            let report =
                window_loss(&params, &config.model, x0, &traj, &schedule, &opts, Some(&mut grads))?;
            step_loss += report.total_nats;
            step_tokens += report.token_count;
        }
        if !step_loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        let scale = 1.0 / batch.len() as f64;
        for gs in grads.slices_mut() {
            for g in gs {
                *g *= scale;
            }
        }
        opt.step(&mut params, &grads, lr);
        loss_curve.push((step, step_loss / step_tokens.max(1) as f64, lr));
    }
    Ok(TrainOutput { params, loss_curve })
}

/// Max relative error between analytic gradients and central finite
/// differences over `samples_per_group` randomly chosen entries of every
/// tensor. 64-bit throughout.
///
/// The per-entry error is |a − n| / max(|a|, |n|, 1e-6). The 1e-6 floor is
/// the resolution of the measurement itself: with losses of order 10 nats
/// and step 1e-5, central differences carry ~1e-9 of cancellation noise, so
/// ratios against gradients smaller than ~1e-6 measure that noise rather
/// than fidelity (a genuine backward error still shows up, since it scales
/// with the gradient magnitude).
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_group: Vec<(String, f64)>,
}

const GRAD_SCALE_FLOOR: f64 = 1e-6;

pub fn grad_check(
    params: &mut Parameters,
    analytic: &Parameters,
    eps: f64,
    samples_per_group: usize,
    seed: u64,
    mut loss_fn: impl FnMut(&Parameters) -> f64,
) -> GradCheckReport {
    let meta = params.meta();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_group = Vec::with_capacity(meta.len());
    let mut max_rel = 0.0f64;
    for (g, m) in meta.iter().enumerate() {
        let mut group_max = 0.0f64;
        let n = m.len.min(samples_per_group);
        let idx: Vec<usize> = if m.len <= samples_per_group {
            (0..m.len).collect()
        } else {
            (0..n).map(|_| rng.random_range(0..m.len)).collect()
        };
        for &i in &idx {
            let orig = params.slices()[g][i];
            params.slices_mut()[g][i] = orig + eps;
            let up = loss_fn(params);
            params.slices_mut()[g][i] = orig - eps;
            let down = loss_fn(params);
            params.slices_mut()[g][i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let exact = analytic.slices()[g][i];
            let denom = exact.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            group_max = group_max.max(rel);
        }
        max_rel = max_rel.max(group_max);
        per_group.push((m.name.clone(), group_max));
    }
    GradCheckReport { max_rel_error: max_rel, per_group }
}
