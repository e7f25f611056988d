//! Noise schedules, marginal corruption kernels, and mutual-information decay.
//!
//! A schedule stores the independent per-step masking probabilities α_t of
//! the non-Markovian forward process together with two derived curves: the
//! cumulative α*_t = ∏_{τ=t}^T α_τ (suffix products, computed backward) and
//! the stepwise β_t = 1 − (1−α*_t)/(1−α*_{t−1}) of the matched Markov chain.
//! Matching the two curves makes the Markov and non-Markov processes lose
//! information about x_0 at identical rates, which the `mi_decay_*` functions
//! expose as closed-form and Monte-Carlo profiles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("noise level {value} at step {step} outside [0, 1]")]
    LevelOutOfRange { step: usize, value: f64 },
    #[error("cumulative curve not non-decreasing at step {step}")]
    NotMonotone { step: usize },
    #[error("clean token {token} is the mask symbol; clean data cannot be masked")]
    CleanTokenIsMask { token: usize },
    #[error("token {token} out of range for vocabulary of {vocab} real symbols")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("p0 is not a probability distribution (sum {sum})")]
    BadDistribution { sum: f64 },
    #[error("need at least one Monte-Carlo sample")]
    NoSamples,
}

/// Independent per-step masking probabilities plus the derived cumulative and
/// Markov-stepwise curves.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// α_t for t = 1..=T at index t−1.
    alpha: Vec<f64>,
    /// α_0: the noise level of the data itself (0 — x_0 is never masked).
    alpha0: f64,
    /// α*_t = ∏_{τ=t}^T α_τ at index t−1.
    alpha_star: Vec<f64>,
    /// β_t of the matched Markov chain at index t−1.
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-marginal schedule: α_t = t/(t+1) for t < T and α_T = 1, so the
    /// cumulative curve is exactly α*_t = t/T.
    pub fn linear(horizon: usize) -> Result<Self, ScheduleError> {
        if horizon == 0 {
            return Err(ScheduleError::ZeroHorizon);
        }
        let mut alpha: Vec<f64> = (1..horizon).map(|t| t as f64 / (t + 1) as f64).collect();
        alpha.push(1.0);
        Self::from_independent(alpha, 0.0)
    }

    /// Builds a schedule from independent per-step levels α_1..α_T.
    pub fn from_independent(alpha: Vec<f64>, alpha0: f64) -> Result<Self, ScheduleError> {
        if alpha.is_empty() {
            return Err(ScheduleError::ZeroHorizon);
        }
        let alpha_star = cumulative_from_independent(&alpha)?;
        let beta = stepwise_from_cumulative(&alpha_star)?;
        if !(0.0..=1.0).contains(&alpha0) {
            return Err(ScheduleError::LevelOutOfRange { step: 0, value: alpha0 });
        }
        Ok(Self { alpha, alpha0, alpha_star, beta })
    }

    pub fn horizon(&self) -> usize {
        self.alpha.len()
    }

    /// α_t for t in 0..=T.
    pub fn alpha_at(&self, t: usize) -> f64 {
        if t == 0 {
            self.alpha0
        } else {
            self.alpha[t - 1]
        }
    }

    /// α*_t for t in 0..=T, with α*_0 := 0.
    pub fn alpha_star_at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.alpha_star[t - 1]
        }
    }

    /// β_t for t in 1..=T.
    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_star(&self) -> &[f64] {
        &self.alpha_star
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }
}

/// Suffix products α*_t = ∏_{τ=t}^T α_τ, computed from t = T downward so the
/// telescoping schedules stay exact.
pub fn cumulative_from_independent(alpha: &[f64]) -> Result<Vec<f64>, ScheduleError> {
    for (i, &a) in alpha.iter().enumerate() {
        if !(0.0..=1.0).contains(&a) {
            return Err(ScheduleError::LevelOutOfRange { step: i + 1, value: a });
        }
    }
    let mut star = vec![0.0; alpha.len()];
    let mut acc = 1.0;
    for t in (0..alpha.len()).rev() {
        acc *= alpha[t];
        star[t] = acc;
    }
    Ok(star)
}

/// Markov stepwise probabilities β_t = 1 − (1−α*_t)/(1−α*_{t−1}), α*_0 := 0.
///
/// Once the cumulative curve reaches 1 the chain is absorbed; the remaining
/// steps are forced to β = 1.
pub fn stepwise_from_cumulative(alpha_star: &[f64]) -> Result<Vec<f64>, ScheduleError> {
    let mut prev = 0.0;
    let mut beta = Vec::with_capacity(alpha_star.len());
    for (i, &cur) in alpha_star.iter().enumerate() {
        if !(0.0..=1.0).contains(&cur) {
            return Err(ScheduleError::LevelOutOfRange { step: i + 1, value: cur });
        }
        if cur < prev {
            return Err(ScheduleError::NotMonotone { step: i + 1 });
        }
        if prev >= 1.0 {
            beta.push(1.0);
        } else {
            beta.push(1.0 - (1.0 - cur) / (1.0 - prev));
        }
        prev = cur;
    }
    Ok(beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Absorbing,
    Uniform,
}

/// Marginal corruption kernel: a row gives q(x_t | x_0) at noise level `a`.
#[derive(Debug, Clone, Copy)]
pub struct MarginalKernel {
    pub kind: KernelKind,
    /// Number of real symbols |V|; the mask id is `vocab_size`.
    pub vocab_size: usize,
}

impl MarginalKernel {
    pub fn absorbing(vocab_size: usize) -> Self {
        Self { kind: KernelKind::Absorbing, vocab_size }
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self { kind: KernelKind::Uniform, vocab_size }
    }

    pub fn mask_id(&self) -> usize {
        self.vocab_size
    }

    pub fn size_augmented(&self) -> usize {
        self.vocab_size + 1
    }

    /// Kernel row for clean token `x0` at noise level `a`, over the augmented
    /// vocabulary (the uniform kernel puts no mass on the mask symbol).
    pub fn row(&self, x0: usize, a: f64) -> Result<Vec<f64>, ScheduleError> {
        self.check_level(a)?;
        self.check_clean(x0)?;
        let mut row = vec![0.0; self.size_augmented()];
        match self.kind {
            KernelKind::Absorbing => {
                row[x0] = 1.0 - a;
                row[self.mask_id()] = a;
            }
            KernelKind::Uniform => {
                let u = a / self.vocab_size as f64;
                for p in row.iter_mut().take(self.vocab_size) {
                    *p = u;
                }
                row[x0] += 1.0 - a;
            }
        }
        Ok(row)
    }

    /// Samples one corrupted token from the kernel row.
    pub fn corrupt_token(
        &self,
        x0: usize,
        a: f64,
        rng: &mut impl Rng,
    ) -> Result<usize, ScheduleError> {
        self.check_level(a)?;
        self.check_clean(x0)?;
        let corrupt = a > 0.0 && (a >= 1.0 || rng.random::<f64>() < a);
        Ok(match (corrupt, self.kind) {
            (false, _) => x0,
            (true, KernelKind::Absorbing) => self.mask_id(),
            (true, KernelKind::Uniform) => rng.random_range(0..self.vocab_size),
        })
    }

    fn check_level(&self, a: f64) -> Result<(), ScheduleError> {
        if !(0.0..=1.0).contains(&a) {
            return Err(ScheduleError::LevelOutOfRange { step: 0, value: a });
        }
        Ok(())
    }

    fn check_clean(&self, x0: usize) -> Result<(), ScheduleError> {
        if x0 == self.mask_id() {
            return Err(ScheduleError::CleanTokenIsMask { token: x0 });
        }
        if x0 > self.vocab_size {
            return Err(ScheduleError::TokenOutOfRange { token: x0, vocab: self.vocab_size });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessKind {
    /// Stepwise β-chain.
    Markov,
    /// Independent corruption of x_0 at every step.
    NonMarkov,
}

/// Normalized mutual-information decay of the single-token process.
///
/// `decay[t−1]` is D_t ∈ [0,1], the fraction of information about x_0 that
/// the suffix x_{t:T} has lost; `suffix_mi_nats[t−1]` is
/// I(x_{t:T}; x_0) = H(x_0)·(1 − D_t).
#[derive(Debug, Clone, PartialEq)]
pub struct MiProfile {
    pub decay: Vec<f64>,
    pub source_entropy_nats: f64,
    pub suffix_mi_nats: Vec<f64>,
    /// Set when H(x_0) = 0 (point-mass source): the decay fractions are then
    /// undefined as conditional-entropy ratios.
    pub degenerate: bool,
}

pub fn entropy_nats(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

fn check_p0(p0: &[f64]) -> Result<(), ScheduleError> {
    let sum: f64 = p0.iter().sum();
    if p0.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(ScheduleError::BadDistribution { sum });
    }
    Ok(())
}

/// Closed-form decay profile.
///
/// Markov: D_t = α*_t, reconstructed from the β curve (1 − ∏_{s≤t}(1−β_s)) so
/// that agreement with the non-Markov profile genuinely exercises the
/// stepwise correspondence. Non-Markov: D_t = ∏_{τ=t}^T α_τ.
pub fn mi_decay_analytic(
    schedule: &NoiseSchedule,
    kind: ProcessKind,
    p0: &[f64],
) -> Result<MiProfile, ScheduleError> {
    check_p0(p0)?;
    let horizon = schedule.horizon();
    let decay = match kind {
        ProcessKind::Markov => {
            let mut survive = 1.0;
            schedule
                .beta()
                .iter()
                .map(|&b| {
                    survive *= 1.0 - b;
                    1.0 - survive
                })
                .collect::<Vec<_>>()
        }
        ProcessKind::NonMarkov => {
            let mut acc = 1.0;
            let mut d = vec![0.0; horizon];
            for t in (0..horizon).rev() {
                acc *= schedule.alpha()[t];
                d[t] = acc;
            }
            d
        }
    };
    let h = entropy_nats(p0);
    let suffix_mi_nats = decay.iter().map(|&d| h * (1.0 - d)).collect();
    Ok(MiProfile { decay, source_entropy_nats: h, suffix_mi_nats, degenerate: h == 0.0 })
}

/// Monte-Carlo decay estimate for the single-token absorbing process.
///
/// Conditioned on the suffix x_{t:T}, the token is either revealed (some
/// coordinate unmasked, conditional entropy 0) or fully hidden (all masked,
/// conditional entropy H(x_0), since the masking coins are independent of
/// the value). D̂_t is therefore the empirical all-masked frequency.
pub fn mi_decay_montecarlo(
    schedule: &NoiseSchedule,
    kind: ProcessKind,
    p0: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<MiProfile, ScheduleError> {
    check_p0(p0)?;
    if n_samples == 0 {
        return Err(ScheduleError::NoSamples);
    }
    let horizon = schedule.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all_masked_counts = vec![0u64; horizon];
    let mut masked = vec![false; horizon];
    for _ in 0..n_samples {
        match kind {
            ProcessKind::NonMarkov => {
                for t in 0..horizon {
                    masked[t] = rng.random::<f64>() < schedule.alpha()[t];
                }
            }
            ProcessKind::Markov => {
                let mut is_masked = false;
                for t in 0..horizon {
                    if !is_masked && rng.random::<f64>() < schedule.beta()[t] {
                        is_masked = true;
                    }
                    masked[t] = is_masked;
                }
            }
        }
        // Suffix all-masked indicator, scanned from T down.
        let mut suffix_all = true;
        for t in (0..horizon).rev() {
            suffix_all &= masked[t];
            if suffix_all {
                all_masked_counts[t] += 1;
            } else {
                break;
            }
        }
    }
    let h = entropy_nats(p0);
    let decay: Vec<f64> =
        all_masked_counts.iter().map(|&c| c as f64 / n_samples as f64).collect();
    let suffix_mi_nats = decay.iter().map(|&d| h * (1.0 - d)).collect();
    Ok(MiProfile { decay, source_entropy_nats: h, suffix_mi_nats, degenerate: h == 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn linear_schedule_levels() {
        let s = NoiseSchedule::linear(4).unwrap();
        let expect = [0.5, 2.0 / 3.0, 0.75, 1.0];
        for (a, e) in s.alpha().iter().zip(expect) {
            assert!((a - e).abs() < TOL);
        }
    }

    #[test]
    fn linear_schedule_cumulative_is_t_over_horizon() {
        for horizon in [1usize, 4, 64] {
            let s = NoiseSchedule::linear(horizon).unwrap();
            for t in 1..=horizon {
                let expect = t as f64 / horizon as f64;
                assert!(
                    (s.alpha_star_at(t) - expect).abs() <= TOL,
                    "T={horizon} t={t}: {} vs {expect}",
                    s.alpha_star_at(t)
                );
            }
        }
    }

    #[test]
    fn linear_schedule_degenerate_horizon() {
        let s = NoiseSchedule::linear(1).unwrap();
        assert_eq!(s.alpha(), &[1.0]);
        assert_eq!(s.alpha_star(), &[1.0]);
        assert_eq!(s.beta(), &[1.0]);
    }

    #[test]
    fn zero_horizon_is_an_error() {
        assert!(NoiseSchedule::linear(0).is_err());
    }

    #[test]
    fn cumulative_suffix_product_example() {
        // α*_2 = (2/3)(3/4)(1) = 0.5.
        let star = cumulative_from_independent(&[0.5, 2.0 / 3.0, 0.75, 1.0]).unwrap();
        assert!((star[1] - 0.5).abs() < TOL);
    }

    #[test]
    fn cumulative_all_ones_and_zero() {
        assert_eq!(cumulative_from_independent(&[1.0, 1.0, 1.0]).unwrap(), vec![1.0, 1.0, 1.0]);
        let star = cumulative_from_independent(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(star[0], 0.0);
    }

    #[test]
    fn cumulative_rejects_out_of_range() {
        assert!(cumulative_from_independent(&[0.5, 1.5]).is_err());
        assert!(cumulative_from_independent(&[-0.1]).is_err());
    }

    #[test]
    fn stepwise_linear_examples() {
        let s = NoiseSchedule::linear(4).unwrap();
        // β_2 = 1 − (1−0.5)/(1−0.25) = 1/3.
        assert!((s.beta_at(2) - 1.0 / 3.0).abs() < TOL);
        // General linear form β_t = 1/(T−t+1).
        for t in 1..=4 {
            assert!((s.beta_at(t) - 1.0 / (4 - t + 1) as f64).abs() < TOL);
        }
    }

    #[test]
    fn stepwise_single_step() {
        assert_eq!(stepwise_from_cumulative(&[1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn stepwise_forces_one_after_absorption() {
        let beta = stepwise_from_cumulative(&[0.5, 1.0, 1.0]).unwrap();
        assert_eq!(beta[1], 1.0);
        assert_eq!(beta[2], 1.0);
    }

    #[test]
    fn stepwise_rejects_decreasing() {
        assert!(stepwise_from_cumulative(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn beta_round_trip_reconstructs_cumulative() {
        for horizon in [1usize, 4, 17, 64] {
            let s = NoiseSchedule::linear(horizon).unwrap();
            let mut survive = 1.0;
            for t in 1..=horizon {
                survive *= 1.0 - s.beta_at(t);
                assert!(
                    (1.0 - survive - s.alpha_star_at(t)).abs() <= TOL,
                    "T={horizon} t={t}"
                );
            }
        }
    }

    #[test]
    fn absorbing_rows_sum_to_one() {
        let k = MarginalKernel::absorbing(5);
        for a in [0.0, 0.3, 1.0] {
            let row = k.row(2, a).unwrap();
            assert!((row.iter().sum::<f64>() - 1.0).abs() < TOL);
            assert!((row[2] - (1.0 - a)).abs() < TOL);
            assert!((row[5] - a).abs() < TOL);
        }
    }

    #[test]
    fn uniform_rows_sum_to_one() {
        let k = MarginalKernel::uniform(4);
        let row = k.row(1, 0.8).unwrap();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < TOL);
        assert_eq!(row[4], 0.0, "uniform kernel has no mass on the mask");
        assert!((row[1] - (0.2 + 0.2)).abs() < TOL);
    }

    #[test]
    fn corrupt_token_level_zero_and_one() {
        let k = MarginalKernel::absorbing(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(k.corrupt_token(1, 0.0, &mut rng).unwrap(), 1);
            assert_eq!(k.corrupt_token(1, 1.0, &mut rng).unwrap(), 3);
        }
    }

    #[test]
    fn corrupt_token_rejects_mask_input() {
        let k = MarginalKernel::absorbing(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            k.corrupt_token(3, 0.5, &mut rng),
            Err(ScheduleError::CleanTokenIsMask { token: 3 })
        ));
    }

    #[test]
    fn corrupt_token_half_frequency() {
        let k = MarginalKernel::absorbing(3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let masked = (0..n)
            .filter(|_| k.corrupt_token(0, 0.5, &mut rng).unwrap() == 3)
            .count();
        let freq = masked as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.005, "mask frequency {freq}");
    }

    fn uniform_p0(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    #[test]
    fn analytic_nonmarkov_linear_profile() {
        let s = NoiseSchedule::linear(4).unwrap();
        let p = mi_decay_analytic(&s, ProcessKind::NonMarkov, &uniform_p0(8)).unwrap();
        assert!((p.decay[1] - 0.5).abs() < TOL, "D_2 = (2/3)(3/4)(1)");
        assert!((p.decay[3] - 1.0).abs() < TOL, "fully masked endpoint");
        assert!((p.source_entropy_nats - (8.0f64).ln()).abs() < TOL);
    }

    #[test]
    fn analytic_markov_matches_cumulative() {
        let s = NoiseSchedule::linear(4).unwrap();
        let p = mi_decay_analytic(&s, ProcessKind::Markov, &uniform_p0(8)).unwrap();
        assert!((p.decay[0] - 0.25).abs() < TOL, "D_1 = α*_1 = 1/4");
    }

    #[test]
    fn matched_profiles_are_identical() {
        for horizon in [4usize, 64] {
            let s = NoiseSchedule::linear(horizon).unwrap();
            let m = mi_decay_analytic(&s, ProcessKind::Markov, &uniform_p0(8)).unwrap();
            let nm = mi_decay_analytic(&s, ProcessKind::NonMarkov, &uniform_p0(8)).unwrap();
            for (a, b) in m.decay.iter().zip(&nm.decay) {
                assert!((a - b).abs() <= TOL);
            }
        }
    }

    #[test]
    fn montecarlo_matches_analytic_within_tolerance() {
        let s = NoiseSchedule::linear(4).unwrap();
        let p0 = uniform_p0(8);
        let mc = mi_decay_montecarlo(&s, ProcessKind::NonMarkov, &p0, 100_000, 7).unwrap();
        let exact = mi_decay_analytic(&s, ProcessKind::NonMarkov, &p0).unwrap();
        for (e, m) in exact.decay.iter().zip(&mc.decay) {
            assert!((e - m).abs() < 0.01, "analytic {e} vs mc {m}");
        }
    }

    #[test]
    fn montecarlo_all_ones_is_exact() {
        let s = NoiseSchedule::from_independent(vec![1.0, 1.0, 1.0], 0.0).unwrap();
        let mc = mi_decay_montecarlo(&s, ProcessKind::NonMarkov, &uniform_p0(4), 100, 0).unwrap();
        assert!(mc.decay.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn montecarlo_degenerate_source_is_flagged() {
        let s = NoiseSchedule::linear(4).unwrap();
        let p0 = vec![1.0, 0.0, 0.0];
        let mc = mi_decay_montecarlo(&s, ProcessKind::NonMarkov, &p0, 100, 0).unwrap();
        assert!(mc.degenerate);
        assert_eq!(mc.source_entropy_nats, 0.0);
    }

    #[test]
    fn montecarlo_needs_samples() {
        let s = NoiseSchedule::linear(4).unwrap();
        assert!(mi_decay_montecarlo(&s, ProcessKind::NonMarkov, &uniform_p0(4), 0, 0).is_err());
    }
}
