//! 2D rotary encoding: token position and diffusion timestep rotate disjoint
//! subspaces of each head.
//!
//! The first `seq_dims` entries of a head vector are rotated pairwise by
//! angles i·θ_k (θ_k = base^(−2k/seq_dims)), the next `time_dims` entries by
//! t·θ'_k on the time ladder, and the remainder is untouched. When two
//! entries share a timestep the time rotations cancel inside a dot product,
//! so attention reduces to ordinary 1D rotary attention over positions.

/// Rotary subspace layout for one attention head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotaryDims {
    pub seq_dims: usize,
    pub time_dims: usize,
    pub seq_base: f64,
    pub time_base: f64,
}

impl RotaryDims {
    fn rotate_span(vec: &mut [f64], dims: usize, pos: f64, base: f64, sign: f64) {
        for k in 0..dims / 2 {
            let freq = base.powf(-2.0 * k as f64 / dims as f64);
            let angle = sign * pos * freq;
            let (sin, cos) = angle.sin_cos();
            let (a, b) = (vec[2 * k], vec[2 * k + 1]);
            vec[2 * k] = a * cos - b * sin;
            vec[2 * k + 1] = a * sin + b * cos;
        }
    }

    /// Rotates `vec` in place for sequence position `i` and timestep `t`.
    pub fn apply(&self, vec: &mut [f64], i: usize, t: usize) {
        Self::rotate_span(&mut vec[..self.seq_dims], self.seq_dims, i as f64, self.seq_base, 1.0);
        Self::rotate_span(
            &mut vec[self.seq_dims..self.seq_dims + self.time_dims],
            self.time_dims,
            t as f64,
            self.time_base,
            1.0,
        );
    }

    /// Inverse rotation; the Jacobian transpose of [`Self::apply`], used by
    /// the backward pass.
    pub fn apply_inverse(&self, vec: &mut [f64], i: usize, t: usize) {
        Self::rotate_span(&mut vec[..self.seq_dims], self.seq_dims, i as f64, self.seq_base, -1.0);
        Self::rotate_span(
            &mut vec[self.seq_dims..self.seq_dims + self.time_dims],
            self.time_dims,
            t as f64,
            self.time_base,
            -1.0,
        );
    }
}

/// Rotates a copy of a head vector for sequence position `i`, timestep `t`.
pub fn rotary_2d(vector: &[f64], i: usize, t: usize, dims: &RotaryDims) -> Vec<f64> {
    let mut out = vector.to_vec();
    dims.apply(&mut out, i, t);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> RotaryDims {
        RotaryDims { seq_dims: 8, time_dims: 4, seq_base: 10_000.0, time_base: 10_000.0 }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn zero_position_and_time_is_identity() {
        let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(rotary_2d(&v, 0, 0, &dims()), v);
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = random_vec(&mut rng, 16);
            let r = rotary_2d(&v, 13, 7, &dims());
            let n0: f64 = dot(&v, &v);
            let n1: f64 = dot(&r, &r);
            assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn unrotated_tail_is_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_vec(&mut rng, 16);
        let r = rotary_2d(&v, 5, 9, &dims());
        assert_eq!(&r[12..], &v[12..]);
    }

    #[test]
    fn inverse_undoes_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = dims();
        let v = random_vec(&mut rng, 16);
        let mut r = rotary_2d(&v, 21, 4, &d);
        d.apply_inverse(&mut r, 21, 4);
        for (a, b) in r.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_timestep_scores_reduce_to_1d_rotary() {
        // dot(rot2d(q, i, t), rot2d(k, j, t)) == dot(rot1d(q, i), rot1d(k, j)).
        let d = dims();
        let seq_only =
            RotaryDims { seq_dims: d.seq_dims, time_dims: 0, seq_base: d.seq_base, time_base: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let q = random_vec(&mut rng, 16);
            let k = random_vec(&mut rng, 16);
            let (i, j, t) = (rng.random_range(0..64), rng.random_range(0..64), rng.random_range(0..32));
            let lhs = dot(&rotary_2d(&q, i, t, &d), &rotary_2d(&k, j, t, &d));
            let rhs = dot(&rotary_2d(&q, i, 0, &seq_only), &rotary_2d(&k, j, 0, &seq_only));
            assert!((lhs - rhs).abs() < 1e-6, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn distinct_timesteps_change_scores() {
        let d = dims();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_vec(&mut rng, 16);
        let k = random_vec(&mut rng, 16);
        let same = dot(&rotary_2d(&q, 3, 5, &d), &rotary_2d(&k, 9, 5, &d));
        let diff = dot(&rotary_2d(&q, 3, 5, &d), &rotary_2d(&k, 9, 11, &d));
        assert!((same - diff).abs() > 1e-9);
    }
}
