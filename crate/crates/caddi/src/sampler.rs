//! Inference: block sampling, token-autoregressive decoding, semi-speculative
//! verification, step skipping, classifier-free guidance, and the stepwise
//! baseline reverse step.
//!
//! Every generator walks t = T..1. At a visited step the model predicts x̃_0
//! from the compressed trajectory window; x_{t−1} is then drawn by
//! re-corrupting x̃_0 with the marginal kernel at level α_{t−1}. Skipped
//! steps re-corrupt the most recent prediction without a model call.
//!
//! Randomness is split into named ChaCha streams of the seed — decode draws,
//! re-corruption draws, and injection draws — so paired runs (speculative vs
//! naive, clean vs injected) consume aligned corruption streams.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{self, log_softmax, softmax, ModelConfig, ModelError, Parameters};
use crate::schedule::{KernelKind, MarginalKernel, NoiseSchedule, ScheduleError};
use crate::trajectory::{FlatContext, MaskMode, Trajectory, TrajectoryError};
use crate::train::Compression;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("step budget {n_steps} outside 1..={horizon}")]
    BadStepBudget { n_steps: usize, horizon: usize },
    #[error("temperature must be > 0 (got {0})")]
    BadTemperature(f64),
    #[error("guidance scale must be ≥ 1 (got {0})")]
    BadGamma(f64),
    #[error("model vocabulary {model} does not match kernel vocabulary {kernel}")]
    VocabMismatch { model: usize, kernel: usize },
    #[error("absorbing prior needs alpha_T = 1 (got {0})")]
    OpenPrior(f64),
    #[error("guided distribution is not finite")]
    GuidanceNotFinite,
    #[error("prompt does not fit the sequence (pos {pos}, len {len}, seq {seq_len})")]
    PromptOutOfBounds { pos: usize, len: usize, seq_len: usize },
    #[error("stepwise reverse step requires an absorbing kernel")]
    NonAbsorbingBaseline,
    #[error("masked position with zero cumulative level at t={t}")]
    ImpossibleState { t: usize },
    #[error("injection fraction {0} outside [0, 1]")]
    BadFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Block-wise autoregression over timesteps.
    Caddi,
    /// Token-level autoregression within each timestep.
    CaddiAr,
    /// Stepwise chain with the closed-form posterior (copies unmasked tokens).
    MarkovBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VerifyPolicy {
    /// Accept a drafted token iff it equals the argmax of the verifier's
    /// distribution; keeps speculative decoding exactly equal to naive
    /// greedy decoding.
    Greedy,
    /// Accept iff the verifier assigns the draft at least this probability.
    Threshold(f64),
}

/// Fixed prompt span for infilling: positions `pos..pos+tokens.len()` stay
/// clamped to `tokens` in every prediction and every latent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub pos: usize,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub seq_len: usize,
    /// Model-call budget over the horizon; skipped steps reuse the latest
    /// prediction.
    pub n_steps: usize,
    pub temperature: f64,
    /// 0 disables top-k.
    pub top_k: usize,
    /// Classifier-free guidance scale; 1 disables guidance.
    pub gamma: f64,
    pub window: usize,
    pub compression: Compression,
    /// Mask family the model was trained for (block-causal windows or
    /// token-causal with bidirectional augmentation).
    pub attention: MaskMode,
    pub verify: VerifyPolicy,
    pub speculative: bool,
    pub prompt: Option<Prompt>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(mode: SamplerMode, seq_len: usize, horizon: usize) -> Self {
        Self {
            mode,
            seq_len,
            n_steps: horizon,
            temperature: 1.0,
            top_k: 0,
            gamma: 1.0,
            window: 5,
            compression: Compression::Truncate,
            attention: MaskMode::BlockCausal,
            verify: VerifyPolicy::Greedy,
            speculative: false,
            prompt: None,
            seed: 0,
        }
    }
}

/// Noise injected into the latent at one timestep (robustness harness):
/// ⌈fraction·L⌉ random positions replaced by random real symbols right
/// before the step at `timestep` runs.
#[derive(Debug, Clone, Copy)]
pub struct NoiseInjection {
    pub timestep: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub t: usize,
    pub x0_pred: Vec<usize>,
    pub x_prev: Vec<usize>,
    /// Accepted draft prefix length, for speculative steps.
    pub accepted: Option<usize>,
    pub model_called: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationTrace {
    pub steps: Vec<StepRecord>,
    pub final_x0: Vec<usize>,
    pub model_calls: usize,
}

/// Uniformly spaced model-call timesteps in [1, T], always containing T (and
/// 1 whenever the budget allows), ascending.
pub fn step_skip_schedule(horizon: usize, n_steps: usize) -> Result<Vec<usize>, SamplerError> {
    if n_steps == 0 || n_steps > horizon {
        return Err(SamplerError::BadStepBudget { n_steps, horizon });
    }
    if n_steps == 1 {
        return Ok(vec![horizon]);
    }
    Ok((0..n_steps)
        .map(|k| {
            let x = 1.0 + (horizon - 1) as f64 * k as f64 / (n_steps - 1) as f64;
            x.round() as usize
        })
        .collect())
}

/// Guided categorical: renormalized exp(γ·log q_cond − (γ−1)·log q_uncond).
pub fn cfg_distribution(
    cond_logits: &[f64],
    uncond_logits: &[f64],
    gamma: f64,
) -> Result<Vec<f64>, SamplerError> {
    if gamma < 1.0 {
        return Err(SamplerError::BadGamma(gamma));
    }
    let lc = log_softmax(cond_logits);
    let lu = log_softmax(uncond_logits);
    let combined: Vec<f64> =
        lc.iter().zip(&lu).map(|(&c, &u)| gamma * c - (gamma - 1.0) * u).collect();
    let probs = softmax(&combined);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(SamplerError::GuidanceNotFinite);
    }
    Ok(probs)
}

/// Temperature then top-k then renormalization, over logits.
fn adjusted_probs(logits: &[f64], temperature: f64, top_k: usize) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let mut probs = softmax(&scaled);
    if top_k > 0 && top_k < probs.len() {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
        for &i in &order[top_k..] {
            probs[i] = 0.0;
        }
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
    }
    probs
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

struct Streams {
    decode: ChaCha8Rng,
    corrupt: ChaCha8Rng,
    inject: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self { decode: stream(0), corrupt: stream(1), inject: stream(2) }
    }
}

struct Generator<'a> {
    params: &'a Parameters,
    model: &'a ModelConfig,
    schedule: &'a NoiseSchedule,
    kernel: &'a MarginalKernel,
    cfg: &'a SamplerConfig,
    injection: Option<NoiseInjection>,
    latents: Trajectory,
    streams: Streams,
    model_calls: usize,
}

impl<'a> Generator<'a> {
    fn new(
        params: &'a Parameters,
        model: &'a ModelConfig,
        schedule: &'a NoiseSchedule,
        kernel: &'a MarginalKernel,
        cfg: &'a SamplerConfig,
        injection: Option<NoiseInjection>,
    ) -> Result<Self, SamplerError> {
        if cfg.temperature <= 0.0 {
            return Err(SamplerError::BadTemperature(cfg.temperature));
        }
        if cfg.gamma < 1.0 {
            return Err(SamplerError::BadGamma(cfg.gamma));
        }
        if kernel.size_augmented() != model.vocab_augmented {
            return Err(SamplerError::VocabMismatch {
                model: model.vocab_augmented,
                kernel: kernel.size_augmented(),
            });
        }
        if let Some(p) = &cfg.prompt {
            if p.pos + p.tokens.len() > cfg.seq_len {
                return Err(SamplerError::PromptOutOfBounds {
                    pos: p.pos,
                    len: p.tokens.len(),
                    seq_len: cfg.seq_len,
                });
            }
        }
        if let Some(inj) = injection {
            if !(0.0..=1.0).contains(&inj.fraction) {
                return Err(SamplerError::BadFraction(inj.fraction));
            }
        }
        let horizon = schedule.horizon();
        if kernel.kind == KernelKind::Absorbing && schedule.alpha_at(horizon) < 1.0 {
            return Err(SamplerError::OpenPrior(schedule.alpha_at(horizon)));
        }
        let mut streams = Streams::new(cfg.seed);
        let mut latents = Trajectory::filled(horizon, cfg.seq_len, kernel.mask_id());
        let x_top: Vec<usize> = match kernel.kind {
            KernelKind::Absorbing => vec![kernel.mask_id(); cfg.seq_len],
            KernelKind::Uniform => (0..cfg.seq_len)
                .map(|_| streams.corrupt.random_range(0..kernel.vocab_size))
                .collect(),
        };
        latents.set_row(horizon, x_top);
        let mut gen = Self {
            params,
            model,
            schedule,
            kernel,
            cfg,
            injection,
            latents,
            streams,
            model_calls: 0,
        };
        let mut top = gen.latents.row(horizon).to_vec();
        gen.clamp_prompt(&mut top);
        gen.latents.set_row(horizon, top);
        Ok(gen)
    }

    fn clamp_prompt(&self, seq: &mut [usize]) {
        if let Some(p) = &self.cfg.prompt {
            seq[p.pos..p.pos + p.tokens.len()].copy_from_slice(&p.tokens);
        }
    }

    fn window_context(&self, t: usize) -> Result<FlatContext, TrajectoryError> {
        match self.cfg.compression {
            Compression::Truncate => self.latents.truncate(t, self.cfg.window),
            Compression::Recompose => {
                self.latents.recompose(t, self.cfg.window, self.kernel.mask_id())
            }
        }
    }

    /// Context with prompt positions stripped back to their raw latent values
    /// (the unconditional arm of classifier-free guidance).
    fn unconditional_context(&self, t: usize) -> Result<FlatContext, TrajectoryError> {
        // Latents are stored clamped; the unconditional arm re-masks the
        // prompt span so the model sees no conditioning signal.
        let mut ctx = self.window_context(t)?;
        if let Some(p) = &self.cfg.prompt {
            for i in 0..ctx.tokens.len() {
                let pos = ctx.seq_pos[i];
                if pos >= p.pos && pos < p.pos + p.tokens.len() {
                    ctx.tokens[i] = self.kernel.mask_id();
                }
            }
        }
        Ok(ctx)
    }

    fn block_logits(&mut self, t: usize) -> Result<(Array2<f64>, Option<Array2<f64>>), SamplerError> {
        let ctx = self.window_context(t)?;
        let logits = model::predict_x0_logits(self.params, self.model, &ctx, self.cfg.attention)?;
        self.model_calls += 1;
        let uncond = if self.cfg.gamma > 1.0 {
            let uctx = self.unconditional_context(t)?;
            let l = model::predict_x0_logits(self.params, self.model, &uctx, self.cfg.attention)?;
            self.model_calls += 1;
            Some(l)
        } else {
            None
        };
        Ok((logits, uncond))
    }

    /// Sampling distribution over clean tokens for one position: mask logit
    /// removed, guidance applied, temperature before top-k.
    fn position_probs(
        &self,
        cond_row: &[f64],
        uncond_row: Option<&[f64]>,
    ) -> Result<Vec<f64>, SamplerError> {
        let mut cond = cond_row.to_vec();
        cond[self.kernel.mask_id()] = f64::NEG_INFINITY;
        let base = match uncond_row {
            Some(u) => {
                let mut uncond = u.to_vec();
                uncond[self.kernel.mask_id()] = f64::NEG_INFINITY;
                let guided = cfg_distribution(&cond, &uncond, self.cfg.gamma)?;
                guided.iter().map(|&p| p.max(f64::MIN_POSITIVE).ln()).collect::<Vec<f64>>()
            }
            None => cond,
        };
        Ok(adjusted_probs(&base, self.cfg.temperature, self.cfg.top_k))
    }

    fn sample_block_prediction(&mut self, t: usize) -> Result<Vec<usize>, SamplerError> {
        let (cond, uncond) = self.block_logits(t)?;
        let mut pred = Vec::with_capacity(self.cfg.seq_len);
        for j in 0..self.cfg.seq_len {
            let probs = self.position_probs(
                cond.row(j).as_slice().unwrap(),
                uncond.as_ref().map(|u| u.row(j).to_vec()).as_deref(),
            )?;
            pred.push(sample_categorical(&probs, &mut self.streams.decode));
        }
        self.clamp_prompt(&mut pred);
        Ok(pred)
    }

    fn corrupt_to(&mut self, x0_pred: &[usize], t_minus_1: usize) -> Result<Vec<usize>, SamplerError> {
        let a = self.schedule.alpha_at(t_minus_1);
        let mut prev = Vec::with_capacity(x0_pred.len());
        for &tok in x0_pred {
            prev.push(self.kernel.corrupt_token(tok, a, &mut self.streams.corrupt)?);
        }
        self.clamp_prompt(&mut prev);
        Ok(prev)
    }

    fn maybe_inject(&mut self, t: usize) -> Result<(), SamplerError> {
        let Some(inj) = self.injection else { return Ok(()) };
        if inj.timestep != t {
            return Ok(());
        }
        let l = self.cfg.seq_len;
        let count = (inj.fraction * l as f64).ceil() as usize;
        if count == 0 {
            return Ok(());
        }
        let mut row = self.latents.row(t).to_vec();
        // Partial Fisher-Yates for distinct positions.
        let mut positions: Vec<usize> = (0..l).collect();
        for i in 0..count.min(l) {
            let j = self.streams.inject.random_range(i..l);
            positions.swap(i, j);
            row[positions[i]] = self.streams.inject.random_range(0..self.kernel.vocab_size);
        }
        self.latents.set_row(t, row);
        Ok(())
    }

    fn run_block(mut self) -> Result<GenerationTrace, SamplerError> {
        let horizon = self.schedule.horizon();
        let visited = step_skip_schedule(horizon, self.cfg.n_steps)?;
        let mut steps = Vec::with_capacity(horizon);
        let mut x0_pred: Vec<usize> = Vec::new();
        for t in (1..=horizon).rev() {
            self.maybe_inject(t)?;
            let called = visited.contains(&t);
            if called {
                x0_pred = self.sample_block_prediction(t)?;
            }
            let x_prev = self.corrupt_to(&x0_pred, t - 1)?;
            self.latents.set_row(t - 1, x_prev.clone());
            steps.push(StepRecord {
                t,
                x0_pred: x0_pred.clone(),
                x_prev,
                accepted: None,
                model_called: called,
            });
        }
        Ok(GenerationTrace {
            final_x0: self.latents.row(0).to_vec(),
            steps,
            model_calls: self.model_calls,
        })
    }

    /// Distribution over the next clean token given the window plus a decoded
    /// prefix (one forward pass, reading the last row).
    fn next_token_probs(
        &mut self,
        t: usize,
        prefix: &[usize],
    ) -> Result<Vec<f64>, SamplerError> {
        let logits = self.prefix_logits(t, prefix)?;
        let n = logits.nrows();
        let cond = logits.row(n - 1).to_vec();
        let uncond = if self.cfg.gamma > 1.0 {
            let ulogits = self.prefix_logits_uncond(t, prefix)?;
            Some(ulogits.row(n - 1).to_vec())
        } else {
            None
        };
        self.position_probs(&cond, uncond.as_deref())
    }

    fn ar_context(&self, base: &FlatContext, prefix: &[usize]) -> FlatContext {
        let mut ctx = base.clone();
        for (j, &tok) in prefix.iter().enumerate() {
            ctx.push_entry(tok, j, 0);
        }
        ctx
    }

    fn forward_ar(&mut self, ctx: &FlatContext) -> Result<Array2<f64>, SamplerError> {
        let mask = crate::trajectory::AttentionMask::build(ctx, MaskMode::TokenCausal)?;
        let out = model::forward(self.params, self.model, ctx, &mask)?;
        self.model_calls += 1;
        Ok(out.logits)
    }

    fn prefix_logits(&mut self, t: usize, prefix: &[usize]) -> Result<Array2<f64>, SamplerError> {
        let base = self.window_context(t)?;
        let ctx = self.ar_context(&base, prefix);
        self.forward_ar(&ctx)
    }

    fn prefix_logits_uncond(
        &mut self,
        t: usize,
        prefix: &[usize],
    ) -> Result<Array2<f64>, SamplerError> {
        let base = self.unconditional_context(t)?;
        let ctx = self.ar_context(&base, prefix);
        self.forward_ar(&ctx)
    }

    fn accepts(&self, probs: &[f64], draft_tok: usize) -> bool {
        match self.cfg.verify {
            VerifyPolicy::Greedy => draft_tok == argmax(probs),
            VerifyPolicy::Threshold(p_min) => probs[draft_tok] >= p_min,
        }
    }

    /// Naive token-by-token decoding: exactly L model calls.
    fn decode_naive(&mut self, t: usize) -> Result<Vec<usize>, SamplerError> {
        let mut prefix: Vec<usize> = Vec::with_capacity(self.cfg.seq_len);
        for j in 0..self.cfg.seq_len {
            let probs = self.next_token_probs(t, &prefix)?;
            let tok = sample_categorical(&probs, &mut self.streams.decode);
            prefix.push(self.forced_or(j, tok));
        }
        Ok(prefix)
    }

    fn forced_or(&self, j: usize, tok: usize) -> usize {
        match &self.cfg.prompt {
            Some(p) if j >= p.pos && j < p.pos + p.tokens.len() => p.tokens[j - p.pos],
            _ => tok,
        }
    }

    /// One verification pass over the whole draft; accept the longest prefix
    /// the policy allows, sample the first rejected position from the
    /// verifier's own distribution, then resume naive decoding.
    fn decode_speculative(
        &mut self,
        t: usize,
        draft: &[usize],
    ) -> Result<(Vec<usize>, usize), SamplerError> {
        let l = self.cfg.seq_len;
        let base = self.window_context(t)?;
        let base_len = base.len();
        let ctx = self.ar_context(&base, draft);
        let logits = self.forward_ar(&ctx)?;
        let ulogits = if self.cfg.gamma > 1.0 {
            let ub = self.unconditional_context(t)?;
            let uctx = self.ar_context(&ub, draft);
            Some(self.forward_ar(&uctx)?)
        } else {
            None
        };
        let probs_at = |gen: &Self, j: usize| -> Result<Vec<f64>, SamplerError> {
            let row = base_len - 1 + j;
            gen.position_probs(
                logits.row(row).as_slice().unwrap(),
                ulogits.as_ref().map(|u| u.row(row).to_vec()).as_deref(),
            )
        };
        let mut out: Vec<usize> = Vec::with_capacity(l);
        let mut accepted = 0usize;
        for j in 0..l {
            let probs = probs_at(&*self, j)?;
            let forced = self.forced_or(j, draft[j]);
            let is_forced = forced != draft[j] || self.prompt_covers(j);
            if is_forced {
                if forced == draft[j] {
                    out.push(forced);
                    accepted += 1;
                    continue;
                }
                out.push(forced);
                accepted = j;
                break;
            }
            if self.accepts(&probs, draft[j]) {
                out.push(draft[j]);
                accepted += 1;
            } else {
                let tok = sample_categorical(&probs, &mut self.streams.decode);
                out.push(self.forced_or(j, tok));
                accepted = j;
                break;
            }
        }
        // Resume sequential decoding for the remainder.
        while out.len() < l {
            let j = out.len();
            let probs = self.next_token_probs(t, &out)?;
            let tok = sample_categorical(&probs, &mut self.streams.decode);
            out.push(self.forced_or(j, tok));
        }
        Ok((out, accepted))
    }

    fn prompt_covers(&self, j: usize) -> bool {
        matches!(&self.cfg.prompt, Some(p) if j >= p.pos && j < p.pos + p.tokens.len())
    }

    fn run_ar(mut self) -> Result<GenerationTrace, SamplerError> {
        let horizon = self.schedule.horizon();
        let visited = step_skip_schedule(horizon, self.cfg.n_steps)?;
        let mut steps = Vec::with_capacity(horizon);
        let mut x0_pred: Vec<usize> = Vec::new();
        for t in (1..=horizon).rev() {
            self.maybe_inject(t)?;
            let called = visited.contains(&t);
            let mut accepted = None;
            if called {
                if self.cfg.speculative && !x0_pred.is_empty() {
                    let draft = x0_pred.clone();
                    let (pred, acc) = self.decode_speculative(t, &draft)?;
                    x0_pred = pred;
                    accepted = Some(acc);
                } else {
                    x0_pred = self.decode_naive(t)?;
                }
            }
            let x_prev = self.corrupt_to(&x0_pred, t - 1)?;
            self.latents.set_row(t - 1, x_prev.clone());
            steps.push(StepRecord {
                t,
                x0_pred: x0_pred.clone(),
                x_prev,
                accepted,
                model_called: called,
            });
        }
        Ok(GenerationTrace {
            final_x0: self.latents.row(0).to_vec(),
            steps,
            model_calls: self.model_calls,
        })
    }

    fn run_markov(mut self) -> Result<GenerationTrace, SamplerError> {
        if self.kernel.kind != KernelKind::Absorbing {
            return Err(SamplerError::NonAbsorbingBaseline);
        }
        let horizon = self.schedule.horizon();
        let mut steps = Vec::with_capacity(horizon);
        for t in (1..=horizon).rev() {
            self.maybe_inject(t)?;
            let ctx = self.latents.truncate(t, 1)?;
            let logits = model::predict_x0_logits(self.params, self.model, &ctx, MaskMode::BlockCausal)?;
            self.model_calls += 1;
            let x_t = self.latents.row(t).to_vec();
            let probs: Vec<Vec<f64>> = (0..self.cfg.seq_len)
                .map(|j| self.position_probs(logits.row(j).as_slice().unwrap(), None))
                .collect::<Result<_, _>>()?;
            let mut x_prev = markov_reverse_step(
                &x_t,
                &probs,
                self.schedule,
                t,
                self.kernel.mask_id(),
                &mut self.streams.decode,
            )?;
            self.clamp_prompt(&mut x_prev);
            self.latents.set_row(t - 1, x_prev.clone());
            steps.push(StepRecord {
                t,
                x0_pred: x_t,
                x_prev,
                accepted: None,
                model_called: true,
            });
        }
        Ok(GenerationTrace {
            final_x0: self.latents.row(0).to_vec(),
            steps,
            model_calls: self.model_calls,
        })
    }
}

/// Closed-form stepwise reverse step for the absorbing chain: unmasked tokens
/// are copied verbatim; a masked token resolves to a model draw with
/// probability (α*_t − α*_{t−1})/α*_t and stays masked otherwise.
pub fn markov_reverse_step(
    x_t: &[usize],
    x0_probs: &[Vec<f64>],
    schedule: &NoiseSchedule,
    t: usize,
    mask_id: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, SamplerError> {
    let star_t = schedule.alpha_star_at(t);
    let star_prev = schedule.alpha_star_at(t - 1);
    let mut out = Vec::with_capacity(x_t.len());
    for (j, &tok) in x_t.iter().enumerate() {
        if tok != mask_id {
            out.push(tok);
            continue;
        }
        if star_t == 0.0 {
            return Err(SamplerError::ImpossibleState { t });
        }
        let p_unmask = (star_t - star_prev) / star_t;
        if rng.random::<f64>() < p_unmask {
            out.push(sample_categorical(&x0_probs[j], rng));
        } else {
            out.push(mask_id);
        }
    }
    Ok(out)
}

/// One reverse step of the block sampler: predict x̃_0 from the flattened
/// window for timestep `t`, then draw x_{t−1} by re-corrupting it at level
/// α_{t−1}. Returns (x̃_0, x_{t−1}).
pub fn reverse_step(
    params: &Parameters,
    model_cfg: &ModelConfig,
    window: &FlatContext,
    t: usize,
    schedule: &NoiseSchedule,
    kernel: &MarginalKernel,
    cfg: &SamplerConfig,
    decode_rng: &mut impl Rng,
    corrupt_rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>), SamplerError> {
    if cfg.temperature <= 0.0 {
        return Err(SamplerError::BadTemperature(cfg.temperature));
    }
    let logits = model::predict_x0_logits(params, model_cfg, window, cfg.attention)?;
    let mut x0_pred = Vec::with_capacity(logits.nrows());
    for j in 0..logits.nrows() {
        let mut row = logits.row(j).to_vec();
        row[kernel.mask_id()] = f64::NEG_INFINITY;
        let probs = adjusted_probs(&row, cfg.temperature, cfg.top_k);
        x0_pred.push(sample_categorical(&probs, decode_rng));
    }
    let a = schedule.alpha_at(t - 1);
    let x_prev = x0_pred
        .iter()
        .map(|&tok| kernel.corrupt_token(tok, a, corrupt_rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((x0_pred, x_prev))
}

/// Runs one full generation according to the configured mode.
pub fn generate(
    params: &Parameters,
    model_cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    kernel: &MarginalKernel,
    cfg: &SamplerConfig,
    injection: Option<NoiseInjection>,
) -> Result<GenerationTrace, SamplerError> {
    if cfg.n_steps == 0 || cfg.n_steps > schedule.horizon() {
        return Err(SamplerError::BadStepBudget {
            n_steps: cfg.n_steps,
            horizon: schedule.horizon(),
        });
    }
    let gen = Generator::new(params, model_cfg, schedule, kernel, cfg, injection)?;
    match cfg.mode {
        SamplerMode::Caddi => gen.run_block(),
        SamplerMode::CaddiAr => gen.run_ar(),
        SamplerMode::MarkovBaseline => gen.run_markov(),
    }
}
