//! Forward trajectories, latent compression, and attention masks.
//!
//! A trajectory holds the (T+1) × L token matrix x_0..x_T. Model contexts are
//! built by flattening a window of timestep blocks in descending time order
//! (x_{t+m−1} first, x_t last), optionally after re-composing each block with
//! the most recently unmasked token per position, and optionally repeating
//! the final block so a token-causal mask still sees it bidirectionally.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::schedule::{MarginalKernel, NoiseSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("context window must be at least 1")]
    WindowTooSmall,
    #[error("timestep {t} outside 1..={horizon}")]
    TimestepOutOfRange { t: usize, horizon: usize },
    #[error("context is empty")]
    EmptyContext,
    #[error("block-causal masks are not defined on augmented layouts")]
    AugmentedBlockCausal,
    #[error("schedule horizon {horizon} does not match {expected} noise levels")]
    LevelCountMismatch { horizon: usize, expected: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// The (T+1) × L matrix of progressively corrupted sequences; row t is x_t.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    rows: Vec<Vec<usize>>,
    seq_len: usize,
}

impl Trajectory {
    /// Samples the independent forward process: row t is x_0 corrupted at
    /// level α_t, each timestep drawn independently given x_0.
    pub fn forward_sample(
        x0: &[usize],
        schedule: &NoiseSchedule,
        kernel: &MarginalKernel,
        seed: u64,
    ) -> Result<Self, TrajectoryError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::forward_sample_with_rng(x0, schedule, kernel, &mut rng)
    }

    pub fn forward_sample_with_rng(
        x0: &[usize],
        schedule: &NoiseSchedule,
        kernel: &MarginalKernel,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, TrajectoryError> {
        let levels: Vec<f64> = (1..=schedule.horizon()).map(|t| schedule.alpha_at(t)).collect();
        Self::forward_sample_at_levels(x0, &levels, kernel, rng)
    }

    /// Forward sampling with one explicit noise level per row. Row t gets
    /// `levels[t−1]`; the Markov-baseline trainer passes the cumulative α*_t
    /// here so its single-block contexts match the β-chain marginals.
    pub fn forward_sample_at_levels(
        x0: &[usize],
        levels: &[f64],
        kernel: &MarginalKernel,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, TrajectoryError> {
        let mut rows = Vec::with_capacity(levels.len() + 1);
        rows.push(x0.to_vec());
        for &a in levels {
            let row = x0
                .iter()
                .map(|&tok| kernel.corrupt_token(tok, a, rng))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Self { rows, seq_len: x0.len() })
    }

    /// Trajectory with every row set to `fill`; the sampler fills rows in
    /// while walking t = T..1.
    pub fn filled(horizon: usize, seq_len: usize, fill: usize) -> Self {
        Self { rows: vec![vec![fill; seq_len]; horizon + 1], seq_len }
    }

    pub fn from_rows(rows: Vec<Vec<usize>>) -> Self {
        assert!(!rows.is_empty());
        let seq_len = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == seq_len));
        Self { rows, seq_len }
    }

    /// Horizon T (number of latent rows past x_0).
    pub fn horizon(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, t: usize) -> &[usize] {
        &self.rows[t]
    }

    pub fn set_row(&mut self, t: usize, row: Vec<usize>) {
        assert_eq!(row.len(), self.seq_len);
        self.rows[t] = row;
    }

    fn window_high(&self, t: usize, window: usize) -> usize {
        (t + window - 1).min(self.horizon())
    }

    fn check_window(&self, t: usize, window: usize) -> Result<(), TrajectoryError> {
        if window < 1 {
            return Err(TrajectoryError::WindowTooSmall);
        }
        if t < 1 || t > self.horizon() {
            return Err(TrajectoryError::TimestepOutOfRange { t, horizon: self.horizon() });
        }
        Ok(())
    }

    /// Latent truncation: flatten blocks x_{min(t+m−1, T)} … x_t, clipping the
    /// window at the horizon rather than padding.
    pub fn truncate(&self, t: usize, window: usize) -> Result<FlatContext, TrajectoryError> {
        self.check_window(t, window)?;
        let hi = self.window_high(t, window);
        let mut ctx = FlatContext::empty(self.seq_len, Layout::Truncated);
        for s in (t..=hi).rev() {
            ctx.push_block(s, self.row(s));
        }
        Ok(ctx)
    }

    /// Trajectory re-composition: each block is replaced by its composite
    /// x_s^⤻ (per position, the first unmasked token scanning s, s+1, …, T;
    /// mask if every suffix row is masked), then truncated as above.
    pub fn recompose(
        &self,
        t: usize,
        window: usize,
        mask_id: usize,
    ) -> Result<FlatContext, TrajectoryError> {
        self.check_window(t, window)?;
        let hi = self.window_high(t, window);
        // Composites for s = T down to t; comp(s) = row(s) ⊕ comp(s+1).
        let mut comp = self.row(self.horizon()).to_vec();
        let mut blocks: Vec<(usize, Vec<usize>)> = Vec::new();
        for s in (t..=self.horizon()).rev() {
            if s < self.horizon() {
                for (c, &x) in comp.iter_mut().zip(self.row(s)) {
                    if x != mask_id {
                        *c = x;
                    }
                }
            }
            if s <= hi {
                blocks.push((s, comp.clone()));
            }
        }
        let mut ctx = FlatContext::empty(self.seq_len, Layout::Recomposed);
        for (s, block) in &blocks {
            ctx.push_block(*s, block);
        }
        Ok(ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Truncated,
    Recomposed,
    /// Final block repeated with identical labels.
    Augmented,
}

/// A flattened model input: token ids with per-entry sequence-position and
/// timestep labels. Time labels are non-increasing along the flattened order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatContext {
    pub tokens: Vec<usize>,
    pub seq_pos: Vec<usize>,
    pub time: Vec<usize>,
    pub block_len: usize,
    pub layout: Layout,
}

impl FlatContext {
    pub fn empty(block_len: usize, layout: Layout) -> Self {
        Self { tokens: Vec::new(), seq_pos: Vec::new(), time: Vec::new(), block_len, layout }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push_block(&mut self, time: usize, tokens: &[usize]) {
        debug_assert_eq!(tokens.len(), self.block_len);
        self.tokens.extend_from_slice(tokens);
        self.seq_pos.extend(0..tokens.len());
        self.time.extend(std::iter::repeat(time).take(tokens.len()));
    }

    /// Appends a single entry (token-autoregressive decoding grows the clean
    /// prefix one token at a time).
    pub fn push_entry(&mut self, token: usize, seq_pos: usize, time: usize) {
        self.tokens.push(token);
        self.seq_pos.push(seq_pos);
        self.time.push(time);
    }

    /// Causal bidirectional augmentation: the final block is appended once
    /// more with identical time labels, so every entry of the repeat can see
    /// the whole original block under a token-causal mask.
    pub fn bidir_augment(&self) -> Result<FlatContext, TrajectoryError> {
        if self.is_empty() {
            return Err(TrajectoryError::EmptyContext);
        }
        let n = self.len();
        let l = self.block_len;
        debug_assert!(n >= l && n % l == 0);
        let mut out = self.clone();
        out.layout = Layout::Augmented;
        for i in n - l..n {
            out.push_entry(self.tokens[i], self.seq_pos[i], self.time[i]);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Bidirectional within a timestep block, causal across blocks:
    /// (r, c) allowed iff time(c) ≥ time(r).
    BlockCausal,
    /// Standard lower-triangular mask.
    TokenCausal,
}

/// Boolean attention mask; entry (r, c) says whether query r may attend to
/// key c.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
    pub mode: MaskMode,
}

impl AttentionMask {
    pub fn build(context: &FlatContext, mode: MaskMode) -> Result<Self, TrajectoryError> {
        if context.is_empty() {
            return Err(TrajectoryError::EmptyContext);
        }
        if mode == MaskMode::BlockCausal && context.layout == Layout::Augmented {
            return Err(TrajectoryError::AugmentedBlockCausal);
        }
        let n = context.len();
        let mut allowed = vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                allowed[r * n + c] = match mode {
                    MaskMode::TokenCausal => c <= r,
                    MaskMode::BlockCausal => context.time[c] >= context.time[r],
                };
            }
        }
        Ok(Self { n, allowed, mode })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.n + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::KernelKind;

    fn linear(t: usize) -> NoiseSchedule {
        NoiseSchedule::linear(t).unwrap()
    }

    #[test]
    fn forward_sample_endpoint_rows() {
        let s = linear(4);
        let k = MarginalKernel::absorbing(4);
        let x0 = vec![0, 1, 2, 3, 0, 1];
        let traj = Trajectory::forward_sample(&x0, &s, &k, 0).unwrap();
        assert_eq!(traj.row(0), &x0[..]);
        assert!(traj.row(4).iter().all(|&t| t == k.mask_id()), "α_T = 1 masks row T");
    }

    #[test]
    fn forward_sample_zero_level_copies() {
        let s = NoiseSchedule::from_independent(vec![0.0, 1.0], 0.0).unwrap();
        let k = MarginalKernel::absorbing(4);
        let x0 = vec![0, 1, 2, 3];
        let traj = Trajectory::forward_sample(&x0, &s, &k, 3).unwrap();
        assert_eq!(traj.row(1), &x0[..]);
    }

    #[test]
    fn forward_sample_mask_fraction_tracks_level() {
        let s = linear(4);
        let k = MarginalKernel::absorbing(8);
        let x0: Vec<usize> = (0..1000).map(|i| i % 8).collect();
        let traj = Trajectory::forward_sample(&x0, &s, &k, 11).unwrap();
        let frac = traj.row(2).iter().filter(|&&t| t == k.mask_id()).count() as f64 / 1000.0;
        assert!((frac - 2.0 / 3.0).abs() < 0.05, "row-2 mask fraction {frac}");
    }

    #[test]
    fn forward_sample_absorbing_rows_are_x0_or_mask() {
        let s = linear(6);
        let k = MarginalKernel::absorbing(5);
        let x0: Vec<usize> = (0..64).map(|i| i % 5).collect();
        let traj = Trajectory::forward_sample(&x0, &s, &k, 5).unwrap();
        for t in 1..=6 {
            for (a, b) in traj.row(t).iter().zip(&x0) {
                assert!(*a == *b || *a == k.mask_id());
            }
        }
    }

    #[test]
    fn forward_sample_rows_are_conditionally_independent() {
        // Mask indicators of two distinct rows should be uncorrelated given
        // x_0: |corr| within 3σ binomial bounds over 10^4 trajectories.
        let s = linear(4);
        let k = MarginalKernel::absorbing(4);
        let x0 = vec![0];
        let n = 10_000;
        let (mut m1, mut m2, mut both) = (0.0, 0.0, 0.0);
        for seed in 0..n {
            let traj = Trajectory::forward_sample(&x0, &s, &k, seed).unwrap();
            let a = (traj.row(1)[0] == k.mask_id()) as u32 as f64;
            let b = (traj.row(2)[0] == k.mask_id()) as u32 as f64;
            m1 += a;
            m2 += b;
            both += a * b;
        }
        let nf = n as f64;
        let (p1, p2, p12) = (m1 / nf, m2 / nf, both / nf);
        let cov = p12 - p1 * p2;
        let sigma = (p1 * (1.0 - p1) * p2 * (1.0 - p2) / nf).sqrt();
        assert!(cov.abs() < 3.0 * sigma, "cov {cov} vs 3σ {}", 3.0 * sigma);
    }

    #[test]
    fn uniform_kernel_rows_stay_in_vocab() {
        let s = linear(3);
        let k = MarginalKernel::uniform(4);
        let x0 = vec![0, 1, 2, 3];
        let traj = Trajectory::forward_sample(&x0, &s, &k, 2).unwrap();
        assert_eq!(k.kind, KernelKind::Uniform);
        for t in 1..=3 {
            assert!(traj.row(t).iter().all(|&tok| tok < 4));
        }
    }

    fn toy_traj() -> Trajectory {
        // T = 8, L = 2, rows labeled by t for easy inspection.
        Trajectory::from_rows((0..=8).map(|t| vec![t * 10, t * 10 + 1]).collect())
    }

    #[test]
    fn truncate_orders_blocks_descending() {
        let traj = toy_traj();
        let ctx = traj.truncate(3, 5).unwrap();
        assert_eq!(ctx.time, vec![7, 7, 6, 6, 5, 5, 4, 4, 3, 3]);
        assert_eq!(ctx.tokens[0], 70);
        assert_eq!(ctx.tokens[9], 31);
        assert_eq!(ctx.seq_pos, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn truncate_clips_at_horizon() {
        let traj = toy_traj();
        let ctx = traj.truncate(6, 5).unwrap();
        assert_eq!(ctx.time, vec![8, 8, 7, 7, 6, 6], "clipped to 3 blocks");
        let top = traj.truncate(8, 3).unwrap();
        assert_eq!(top.time, vec![8, 8], "t = T keeps only x_T");
    }

    #[test]
    fn truncate_full_window_is_identity_flattening() {
        let traj = toy_traj();
        let t = 3;
        let ctx = traj.truncate(t, traj.horizon() - t + 1).unwrap();
        assert_eq!(ctx.len(), (traj.horizon() - t + 1) * 2);
        assert_eq!(ctx.time.first(), Some(&8));
        assert_eq!(ctx.time.last(), Some(&3));
    }

    #[test]
    fn truncate_validates_arguments() {
        let traj = toy_traj();
        assert!(matches!(traj.truncate(3, 0), Err(TrajectoryError::WindowTooSmall)));
        assert!(traj.truncate(0, 2).is_err());
        assert!(traj.truncate(9, 2).is_err());
    }

    #[test]
    fn recompose_takes_first_unmasked_toward_data() {
        // x_t = [m, a], x_{t+1} = [b, m] with T = t+1: composite is [b, a].
        let mask = 9;
        let traj = Trajectory::from_rows(vec![
            vec![7, 7], // x_0, unused by the operator
            vec![mask, 0],
            vec![1, mask],
        ]);
        let ctx = traj.recompose(1, 2, mask).unwrap();
        // Blocks descending: composite(2) = [1, m], composite(1) = [1, 0].
        assert_eq!(ctx.tokens, vec![1, mask, 1, 0]);
    }

    #[test]
    fn recompose_all_masked_stays_masked() {
        let mask = 3;
        let traj = Trajectory::from_rows(vec![vec![0, 1], vec![mask, mask], vec![mask, mask]]);
        let ctx = traj.recompose(1, 2, mask).unwrap();
        assert!(ctx.tokens.iter().all(|&t| t == mask));
    }

    #[test]
    fn recompose_matches_brute_force_suffix_scan() {
        let s = linear(6);
        let k = MarginalKernel::absorbing(5);
        let mask = k.mask_id();
        let x0: Vec<usize> = (0..32).map(|i| (i * 3) % 5).collect();
        for seed in 0..20 {
            let traj = Trajectory::forward_sample(&x0, &s, &k, seed).unwrap();
            let t = 1 + (seed as usize % 6);
            let ctx = traj.recompose(t, 3, mask).unwrap();
            let hi = (t + 2).min(6);
            for (b, s_block) in (t..=hi).rev().enumerate() {
                for j in 0..32 {
                    let expect = (s_block..=6)
                        .map(|s| traj.row(s)[j])
                        .find(|&tok| tok != mask)
                        .unwrap_or(mask);
                    assert_eq!(ctx.tokens[b * 32 + j], expect);
                }
            }
        }
    }

    #[test]
    fn recompose_reveals_x0_wherever_suffix_unmasked() {
        let s = linear(5);
        let k = MarginalKernel::absorbing(4);
        let mask = k.mask_id();
        let x0: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let traj = Trajectory::forward_sample(&x0, &s, &k, 77).unwrap();
        let t = 2;
        let ctx = traj.recompose(t, 1, mask).unwrap();
        for j in 0..40 {
            let any_unmasked = (t..=5).any(|s| traj.row(s)[j] != mask);
            if any_unmasked {
                assert_eq!(ctx.tokens[j], x0[j]);
            } else {
                assert_eq!(ctx.tokens[j], mask);
            }
        }
    }

    #[test]
    fn recompose_is_idempotent() {
        let s = linear(4);
        let k = MarginalKernel::absorbing(4);
        let mask = k.mask_id();
        let x0: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let traj = Trajectory::forward_sample(&x0, &s, &k, 9).unwrap();
        let once = traj.recompose(1, 4, mask).unwrap();
        // Feed the composites back in as rows (with a dummy x_0 row).
        let mut rows = vec![x0.clone()];
        for b in (0..4).rev() {
            rows.push(once.tokens[b * 16..(b + 1) * 16].to_vec());
        }
        let twice = Trajectory::from_rows(rows).recompose(1, 4, mask).unwrap();
        assert_eq!(once.tokens, twice.tokens);
    }

    #[test]
    fn augment_repeats_final_block() {
        let traj = toy_traj();
        let ctx = traj.truncate(4, 2).unwrap();
        let aug = ctx.bidir_augment().unwrap();
        assert_eq!(aug.len(), ctx.len() + 2, "grows by exactly one block");
        assert_eq!(aug.layout, Layout::Augmented);
        assert_eq!(&aug.tokens[4..6], &aug.tokens[2..4]);
        assert_eq!(&aug.time[4..6], &aug.time[2..4]);
    }

    #[test]
    fn augment_rejects_empty() {
        let ctx = FlatContext::empty(2, Layout::Truncated);
        assert!(ctx.bidir_augment().is_err());
    }

    #[test]
    fn token_causal_mask_is_lower_triangular() {
        let traj = toy_traj();
        let ctx = traj.truncate(7, 2).unwrap();
        let m = AttentionMask::build(&ctx, MaskMode::TokenCausal).unwrap();
        for r in 0..m.len() {
            for c in 0..m.len() {
                assert_eq!(m.allowed(r, c), c <= r);
            }
        }
    }

    #[test]
    fn block_causal_mask_blocks() {
        let traj = toy_traj();
        let ctx = traj.truncate(4, 2).unwrap();
        let m = AttentionMask::build(&ctx, MaskMode::BlockCausal).unwrap();
        // Block 5 occupies rows 0..2, block 4 rows 2..4.
        assert!(m.allowed(0, 1), "bidirectional within block");
        assert!(m.allowed(1, 0));
        assert!(m.allowed(2, 0), "later (lower-time) block sees earlier");
        assert!(!m.allowed(0, 2), "earlier block cannot see later");
    }

    #[test]
    fn block_causal_equals_token_causal_for_unit_blocks() {
        let traj = Trajectory::from_rows((0..=3).map(|t| vec![t]).collect());
        let ctx = traj.truncate(1, 3).unwrap();
        let a = AttentionMask::build(&ctx, MaskMode::BlockCausal).unwrap();
        let b = AttentionMask::build(&ctx, MaskMode::TokenCausal).unwrap();
        for r in 0..ctx.len() {
            for c in 0..ctx.len() {
                assert_eq!(a.allowed(r, c), b.allowed(r, c));
            }
        }
    }

    #[test]
    fn block_causal_rejects_augmented_layout() {
        let traj = toy_traj();
        let aug = traj.truncate(4, 2).unwrap().bidir_augment().unwrap();
        assert!(matches!(
            AttentionMask::build(&aug, MaskMode::BlockCausal),
            Err(TrajectoryError::AugmentedBlockCausal)
        ));
    }

    #[test]
    fn augmented_repeat_reaches_whole_original_block() {
        let traj = toy_traj();
        let ctx = traj.truncate(3, 3).unwrap();
        let aug = ctx.bidir_augment().unwrap();
        let m = AttentionMask::build(&aug, MaskMode::TokenCausal).unwrap();
        let n = aug.len();
        let l = aug.block_len;
        // Every entry of the repeat sees every entry of the original final block.
        for r in n - l..n {
            for c in n - 2 * l..n - l {
                assert!(m.allowed(r, c));
            }
        }
    }
}
