//! Forward and reverse passes of the denoiser.
//!
//! Pre-norm blocks: x + Attn(LN(x)) then x + FFN(LN(x)), GELU feed-forward,
//! per-head 2D rotary on queries/keys, masked softmax that sums only over
//! allowed columns (disallowed entries contribute exactly zero, in fixed
//! index order, so causality probes can assert bit-identical logits).
//!
//! The backward pass is hand-rolled against a forward cache; `backward`
//! accumulates into a `Parameters`-shaped gradient buffer.

use ndarray::{s, Array1, Array2, Axis};

use super::{DenoiserOutput, LayerNormParams, ModelConfig, ModelError, Parameters};
use crate::trajectory::{AttentionMask, FlatContext};

const LN_EPS: f64 = 1e-5;

struct LnCache {
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    x_in: Array2<f64>,
    ln1: LnCache,
    h1: Array2<f64>,
    q_rot: Array2<f64>,
    k_rot: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    a_concat: Array2<f64>,
    x_mid: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

pub struct ForwardCache {
    layers: Vec<LayerCache>,
    x_final: Array2<f64>,
    ln_f: LnCache,
    hf: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    let mut mean = Vec::with_capacity(n);
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mu = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..d {
            out[[r, c]] = (x[[r, c]] - mu) * rs * p.gain[c] + p.bias[c];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (out, LnCache { mean, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    cache: &LnCache,
    p: &LayerNormParams,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut dx = Array2::zeros((n, d));
    for r in 0..n {
        let (mu, rs) = (cache.mean[r], cache.rstd[r]);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let xhat = (x[[r, c]] - mu) * rs;
            let dyv = dy[[r, c]];
            dgain[c] += dyv * xhat;
            dbias[c] += dyv;
            let dxhat = dyv * p.gain[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            let xhat = (x[[r, c]] - mu) * rs;
            let dxhat = dy[[r, c]] * p.gain[c];
            dx[[r, c]] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn validate_inputs(
    config: &ModelConfig,
    context: &FlatContext,
    mask: &AttentionMask,
) -> Result<(), ModelError> {
    let n = context.len();
    if n > config.max_positions {
        return Err(ModelError::ContextTooLong { n, max: config.max_positions });
    }
    if mask.len() != n {
        return Err(ModelError::MaskShapeMismatch { mask: mask.len(), n });
    }
    for &t in &context.time {
        if t > config.max_timesteps {
            return Err(ModelError::TimestepTooLarge { t, max: config.max_timesteps });
        }
    }
    for &tok in &context.tokens {
        if tok >= config.vocab_augmented {
            return Err(ModelError::TokenOutOfVocab { id: tok, vocab: config.vocab_augmented });
        }
    }
    Ok(())
}

/// Runs the denoiser and keeps every intermediate needed by [`backward`].
pub fn forward_cached(
    params: &Parameters,
    config: &ModelConfig,
    context: &FlatContext,
    mask: &AttentionMask,
) -> Result<(DenoiserOutput, ForwardCache), ModelError> {
    validate_inputs(config, context, mask)?;
    let n = context.len();
    let d = config.d_model;
    let dh = config.d_head();
    let rotary = config.rotary();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Array2::zeros((n, d));
    for (r, &tok) in context.tokens.iter().enumerate() {
        x.row_mut(r).assign(&params.embed.row(tok));
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    for lp in &params.layers {
        let x_in = x.clone();
        let (h1, ln1) = layer_norm(&x_in, &lp.ln1);
        let mut q = h1.dot(&lp.wq) + &lp.bq;
        let mut k = h1.dot(&lp.wk) + &lp.bk;
        let v = h1.dot(&lp.wv) + &lp.bv;
        for r in 0..n {
            let (i, t) = (context.seq_pos[r], context.time[r]);
            for h in 0..config.n_heads {
                let span = h * dh..(h + 1) * dh;
                rotary.apply(&mut q.row_mut(r).as_slice_mut().unwrap()[span.clone()], i, t);
                rotary.apply(&mut k.row_mut(r).as_slice_mut().unwrap()[span], i, t);
            }
        }

        let mut a_concat = Array2::zeros((n, d));
        let mut attn = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let span = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(span).to_owned();
            let kh = k.slice(span).to_owned();
            let vh = v.slice(span).to_owned();
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            let mut w = Array2::zeros((n, n));
            for r in 0..n {
                let mut max = f64::NEG_INFINITY;
                for c in 0..n {
                    if mask.allowed(r, c) && scores[[r, c]] > max {
                        max = scores[[r, c]];
                    }
                }
                let mut sum = 0.0;
                for c in 0..n {
                    if mask.allowed(r, c) {
                        let e = (scores[[r, c]] - max).exp();
                        w[[r, c]] = e;
                        sum += e;
                    }
                }
                for c in 0..n {
                    w[[r, c]] /= sum;
                }
            }
            let ctx_h = w.dot(&vh);
            a_concat.slice_mut(span).assign(&ctx_h);
            attn.push(w);
        }
        let att_out = a_concat.dot(&lp.wo) + &lp.bo;
        let x_mid = &x_in + &att_out;

        let (h2, ln2) = layer_norm(&x_mid, &lp.ln2);
        let u = h2.dot(&lp.w1) + &lp.b1;
        let g = u.mapv(gelu);
        let ffn_out = g.dot(&lp.w2) + &lp.b2;
        x = &x_mid + &ffn_out;

        layers.push(LayerCache {
            x_in,
            ln1,
            h1,
            q_rot: q,
            k_rot: k,
            v,
            attn,
            a_concat,
            x_mid,
            ln2,
            h2,
            u,
            g,
        });
    }

    let x_final = x;
    let (hf, ln_f) = layer_norm(&x_final, &params.ln_f);
    let logits = hf.dot(&params.w_out) + &params.b_out;
    Ok((DenoiserOutput { logits }, ForwardCache { layers, x_final, ln_f, hf }))
}

/// Denoiser forward pass: per-position logits over the augmented vocabulary.
pub fn forward(
    params: &Parameters,
    config: &ModelConfig,
    context: &FlatContext,
    mask: &AttentionMask,
) -> Result<DenoiserOutput, ModelError> {
    forward_cached(params, config, context, mask).map(|(out, _)| out)
}

/// One-shot x_0 prediction for the final (lowest-time) block of a flattened
/// window: one row of logits per sequence position.
///
/// Block-causal layouts read the final block's own rows. Token-causal
/// layouts first repeat the final block, then read through the next-token
/// shift (the last entry of the original block predicts position 0, repeat
/// entry j predicts position j+1), which gives every prediction bidirectional
/// visibility of the block.
pub fn predict_x0_logits(
    params: &Parameters,
    config: &ModelConfig,
    window: &FlatContext,
    mode: crate::trajectory::MaskMode,
) -> Result<Array2<f64>, ModelError> {
    use crate::trajectory::MaskMode;
    let l = window.block_len;
    let (ctx, rows): (FlatContext, Vec<usize>) = match mode {
        MaskMode::BlockCausal => {
            let n = window.len();
            (window.clone(), (n - l..n).collect())
        }
        MaskMode::TokenCausal => {
            let aug = window
                .bidir_augment()
                .map_err(|_| ModelError::BadConfig("empty context".into()))?;
            let n = aug.len();
            (aug, (n - l - 1..n - 1).collect())
        }
    };
    let mask = AttentionMask::build(&ctx, mode)
        .map_err(|e| ModelError::BadConfig(e.to_string()))?;
    let out = forward(params, config, &ctx, &mask)?;
    let mut logits = Array2::zeros((l, config.vocab_augmented));
    for (j, &r) in rows.iter().enumerate() {
        logits.row_mut(j).assign(&out.logits.row(r));
    }
    Ok(logits)
}

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
/// The cached attention weights already carry the mask (zeros at disallowed
/// columns), so no mask argument is needed.
pub fn backward(
    params: &Parameters,
    config: &ModelConfig,
    context: &FlatContext,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    grads: &mut Parameters,
) {
    let n = context.len();
    let d = config.d_model;
    let dh = config.d_head();
    let rotary = config.rotary();
    let scale = 1.0 / (dh as f64).sqrt();

    grads.w_out = &grads.w_out + &cache.hf.t().dot(dlogits);
    grads.b_out = &grads.b_out + &dlogits.sum_axis(Axis(0));
    let dhf = dlogits.dot(&params.w_out.t());
    let mut dx = layer_norm_backward(
        &dhf,
        &cache.x_final,
        &cache.ln_f,
        &params.ln_f,
        &mut grads.ln_f.gain,
        &mut grads.ln_f.bias,
    );

    for (lp, (lc, lg)) in params
        .layers
        .iter()
        .zip(cache.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
    {
        // FFN block backward: dx covers x = x_mid + gelu(LN(x_mid)·W1)·W2.
        let df = &dx;
        lg.w2 = &lg.w2 + &lc.g.t().dot(df);
        lg.b2 = &lg.b2 + &df.sum_axis(Axis(0));
        let dg = df.dot(&lp.w2.t());
        let du = &dg * &lc.u.mapv(gelu_grad);
        lg.w1 = &lg.w1 + &lc.h2.t().dot(&du);
        lg.b1 = &lg.b1 + &du.sum_axis(Axis(0));
        let dh2 = du.dot(&lp.w1.t());
        let dx_mid_ln = layer_norm_backward(
            &dh2,
            &lc.x_mid,
            &lc.ln2,
            &lp.ln2,
            &mut lg.ln2.gain,
            &mut lg.ln2.bias,
        );
        let dx_mid = &dx + &dx_mid_ln;

        // Attention block backward: x_mid = x_in + (heads(LN(x_in)))·Wo.
        lg.wo = &lg.wo + &lc.a_concat.t().dot(&dx_mid);
        lg.bo = &lg.bo + &dx_mid.sum_axis(Axis(0));
        let da = dx_mid.dot(&lp.wo.t());

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..config.n_heads {
            let span = s![.., h * dh..(h + 1) * dh];
            let qh = lc.q_rot.slice(span).to_owned();
            let kh = lc.k_rot.slice(span).to_owned();
            let vh = lc.v.slice(span).to_owned();
            let w = &lc.attn[h];
            let dctx = da.slice(span).to_owned();
            let dw = dctx.dot(&vh.t());
            dv.slice_mut(span).assign(&w.t().dot(&dctx));
            // Softmax backward; rows of w are zero at disallowed columns, so
            // those gradients vanish on their own.
            let mut ds = Array2::zeros((n, n));
            for r in 0..n {
                let row_dot: f64 = (0..n).map(|c| dw[[r, c]] * w[[r, c]]).sum();
                for c in 0..n {
                    ds[[r, c]] = w[[r, c]] * (dw[[r, c]] - row_dot);
                }
            }
            let mut dqh = ds.dot(&kh);
            dqh.mapv_inplace(|v| v * scale);
            let mut dkh = ds.t().dot(&qh);
            dkh.mapv_inplace(|v| v * scale);
            for r in 0..n {
                let (i, t) = (context.seq_pos[r], context.time[r]);
                rotary.apply_inverse(dqh.row_mut(r).as_slice_mut().unwrap(), i, t);
                rotary.apply_inverse(dkh.row_mut(r).as_slice_mut().unwrap(), i, t);
            }
            dq.slice_mut(span).assign(&dqh);
            dk.slice_mut(span).assign(&dkh);
        }

        lg.wq = &lg.wq + &lc.h1.t().dot(&dq);
        lg.bq = &lg.bq + &dq.sum_axis(Axis(0));
        lg.wk = &lg.wk + &lc.h1.t().dot(&dk);
        lg.bk = &lg.bk + &dk.sum_axis(Axis(0));
        lg.wv = &lg.wv + &lc.h1.t().dot(&dv);
        lg.bv = &lg.bv + &dv.sum_axis(Axis(0));
        let dh1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        let dx_in_ln = layer_norm_backward(
            &dh1,
            &lc.x_in,
            &lc.ln1,
            &lp.ln1,
            &mut lg.ln1.gain,
            &mut lg.ln1.bias,
        );
        dx = &dx_mid + &dx_in_ln;
    }

    for (r, &tok) in context.tokens.iter().enumerate() {
        let mut row = grads.embed.row_mut(tok);
        row += &dx.row(r);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{MaskMode, Trajectory};

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            seq_rotary_dims: 8,
            time_rotary_dims: 4,
            seq_rotary_base: 10_000.0,
            time_rotary_base: 10_000.0,
            vocab_augmented: 6,
            max_positions: 64,
            max_timesteps: 16,
        }
    }

    fn toy_trajectory(seed: u64) -> Trajectory {
        use crate::schedule::{MarginalKernel, NoiseSchedule};
        let s = NoiseSchedule::linear(4).unwrap();
        let k = MarginalKernel::absorbing(5);
        let x0 = vec![0, 1, 2, 3, 4, 0, 1, 2];
        Trajectory::forward_sample(&x0, &s, &k, seed).unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = config();
        let p = Parameters::init(&cfg, 0).unwrap();
        let ctx = toy_trajectory(1).truncate(2, 3).unwrap();
        let mask = AttentionMask::build(&ctx, MaskMode::BlockCausal).unwrap();
        let a = forward(&p, &cfg, &ctx, &mask).unwrap();
        let b = forward(&p, &cfg, &ctx, &mask).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn zero_output_projection_gives_uniform_probs() {
        let cfg = config();
        let mut p = Parameters::init(&cfg, 0).unwrap();
        p.w_out.fill(0.0);
        p.b_out.fill(0.0);
        let ctx = toy_trajectory(2).truncate(2, 2).unwrap();
        let mask = AttentionMask::build(&ctx, MaskMode::BlockCausal).unwrap();
        let out = forward(&p, &cfg, &ctx, &mask).unwrap();
        assert!(out.logits.iter().all(|&l| l == 0.0));
        let probs = out.probs_row(0);
        for pr in probs {
            assert!((pr - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn block_causal_logits_ignore_lower_time_blocks() {
        // Editing a block with a smaller time label must leave the logits of
        // higher blocks bit-identical.
        let cfg = config();
        let p = Parameters::init(&cfg, 7).unwrap();
        let traj = toy_trajectory(3);
        let mut ctx = traj.truncate(1, 4).unwrap();
        let mask = AttentionMask::build(&ctx, MaskMode::BlockCausal).unwrap();
        let base = forward(&p, &cfg, &ctx, &mask).unwrap();
        let l = ctx.block_len;
        let n = ctx.len();
        // Blocks are (x_4, x_3, x_2, x_1); edit the final (time-1) block.
        for tok in ctx.tokens[n - l..].iter_mut() {
            *tok = (*tok + 1) % 5;
        }
        let edited = forward(&p, &cfg, &ctx, &mask).unwrap();
        for r in 0..n - l {
            for c in 0..cfg.vocab_augmented {
                assert_eq!(base.logits[[r, c]], edited.logits[[r, c]], "row {r}");
            }
        }
    }

    #[test]
    fn permuting_different_time_blocks_changes_outputs() {
        let cfg = config();
        let p = Parameters::init(&cfg, 9).unwrap();
        let traj = toy_trajectory(4);
        let ctx = traj.truncate(2, 3).unwrap();
        let mask = AttentionMask::build(&ctx, MaskMode::BlockCausal).unwrap();
        let base = forward(&p, &cfg, &ctx, &mask).unwrap();

        // Swap the time labels of blocks x_4 and x_3 (tokens travel along).
        let l = ctx.block_len;
        let mut swapped = ctx.clone();
        for i in 0..l {
            swapped.tokens.swap(i, l + i);
        }
        let mask2 = AttentionMask::build(&swapped, MaskMode::BlockCausal).unwrap();
        let out = forward(&p, &cfg, &swapped, &mask2).unwrap();
        let delta = (&base.logits - &out.logits).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(delta > 1e-9, "mask/time sensitivity, max delta {delta}");
    }

    #[test]
    fn context_length_limit_enforced() {
        let mut cfg = config();
        cfg.max_positions = 4;
        let p = Parameters::init(&cfg, 0).unwrap();
        let ctx = toy_trajectory(5).truncate(2, 3).unwrap();
        let mask = AttentionMask::build(&ctx, MaskMode::BlockCausal).unwrap();
        assert!(matches!(
            forward(&p, &cfg, &ctx, &mask),
            Err(ModelError::ContextTooLong { .. })
        ));
    }

    #[test]
    fn timestep_limit_enforced() {
        let mut cfg = config();
        cfg.max_timesteps = 2;
        let p = Parameters::init(&cfg, 0).unwrap();
        let ctx = toy_trajectory(5).truncate(3, 2).unwrap();
        let mask = AttentionMask::build(&ctx, MaskMode::BlockCausal).unwrap();
        assert!(matches!(
            forward(&p, &cfg, &ctx, &mask),
            Err(ModelError::TimestepTooLarge { .. })
        ));
    }

    #[test]
    fn token_causal_logits_ignore_later_positions() {
        let cfg = config();
        let p = Parameters::init(&cfg, 11).unwrap();
        let traj = toy_trajectory(6);
        let mut ctx = traj.truncate(1, 4).unwrap();
        let mask = AttentionMask::build(&ctx, MaskMode::TokenCausal).unwrap();
        let base = forward(&p, &cfg, &ctx, &mask).unwrap();
        let n = ctx.len();
        let last = ctx.tokens[n - 1];
        ctx.tokens[n - 1] = (last + 1) % 5;
        let edited = forward(&p, &cfg, &ctx, &mask).unwrap();
        for r in 0..n - 1 {
            for c in 0..cfg.vocab_augmented {
                assert_eq!(base.logits[[r, c]], edited.logits[[r, c]]);
            }
        }
    }
}
