//! Synthetic sequence sources with known statistics, for calibration runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Order-1 Markov source over a small alphabet.
#[derive(Debug, Clone)]
pub struct MarkovSource {
    /// Row-stochastic transition matrix.
    pub transition: Vec<Vec<f64>>,
}

impl MarkovSource {
    /// A mildly correlated chain: each symbol favors its successor cyclically
    /// with probability `1 − spread` spread mass, the rest uniform. The
    /// stationary distribution is uniform (the matrix is doubly stochastic).
    pub fn cyclic(vocab: usize, favored: f64) -> Self {
        let rest = (1.0 - favored) / (vocab - 1) as f64;
        let transition = (0..vocab)
            .map(|i| {
                (0..vocab)
                    .map(|j| if j == (i + 1) % vocab { favored } else { rest })
                    .collect()
            })
            .collect();
        Self { transition }
    }

    pub fn vocab_size(&self) -> usize {
        self.transition.len()
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.vocab_size();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..500 {
            let mut next = vec![0.0; n];
            for (i, row) in self.transition.iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            pi = next;
        }
        pi
    }

    /// Entropy rate Σ_i π_i · H(row_i), nats per symbol.
    pub fn entropy_rate_nats(&self) -> f64 {
        let pi = self.stationary();
        pi.iter()
            .zip(&self.transition)
            .map(|(&p, row)| {
                p * row.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum::<f64>()
            })
            .sum()
    }

    /// Marginal (stationary) entropy, nats per symbol.
    pub fn marginal_entropy_nats(&self) -> f64 {
        self.stationary().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }

    /// One long sampled corpus, starting from the stationary distribution.
    pub fn sample_corpus(&self, len: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = self.stationary();
        let mut state = sample_index(&pi, &mut rng);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(state);
            state = sample_index(&self.transition[state], &mut rng);
        }
        out
    }
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
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
