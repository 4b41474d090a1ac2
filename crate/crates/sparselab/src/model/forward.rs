//! Teacher-forced transformer forward pass.
//!
//! Pre-norm blocks with RMS normalization, learned absolute position
//! embeddings, causal multi-head attention, and a gated FFN whose neurons
//! can be skipped according to a [`MaskRule`]. Scoring is the only mode:
//! there is no generation loop and no KV cache.

use crate::error::{Error, Result};
use crate::mat::{dot, Matrix};
use crate::model::ffn::{ffn_col_norms, gate_coeffs, project_out, FfnRef};
use crate::model::{Activation, Checkpoint, RMS_EPS};

/// How to pick the weakly-contributed neuron set D for each (token, layer).
#[derive(Debug, Clone)]
pub enum MaskRule {
    /// D = {i : s_i = 0}; only meaningful for ReLU.
    ZeroGate,
    /// Keep the k largest |s_i| per layer; ties keep the lower index.
    TopK(usize),
    /// D = {i : |s_i| <= eps} with one global threshold.
    GateMagnitude(f32),
    /// D = {i : ||n_i|| < eps_layer} with one calibrated threshold per layer.
    NeuronNorm(Vec<f32>),
}

impl MaskRule {
    /// Neuron indices to skip, given the gate activations `s` and the
    /// coefficients `h = s ⊙ (W_in x)` of one (token, layer).
    pub fn weak_indices(
        &self,
        layer: usize,
        s: &[f32],
        h: &[f32],
        col_norms: &[f32],
        out: &mut Vec<usize>,
    ) {
        out.clear();
        match self {
            MaskRule::ZeroGate => {
                out.extend((0..s.len()).filter(|&i| s[i] == 0.0));
            }
            MaskRule::TopK(k) => {
                let k = (*k).min(s.len());
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.sort_unstable_by(|&a, &b| {
                    s[b].abs()
                        .partial_cmp(&s[a].abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                out.extend_from_slice(&idx[k..]);
                out.sort_unstable();
            }
            MaskRule::GateMagnitude(eps) => {
                out.extend((0..s.len()).filter(|&i| s[i].abs() <= *eps));
            }
            MaskRule::NeuronNorm(eps_per_layer) => {
                let eps = eps_per_layer[layer];
                out.extend((0..h.len()).filter(|&i| h[i].abs() * col_norms[i] < eps));
            }
        }
    }

    pub fn validate(&self, ckpt: &Checkpoint) -> Result<()> {
        match self {
            MaskRule::ZeroGate if ckpt.config.activation != Activation::ReLU => Err(
                Error::Config("zero-threshold recognition requires a ReLU model".into()),
            ),
            MaskRule::TopK(k) if *k > ckpt.config.d_f => Err(Error::Config(format!(
                "top-k {} exceeds d_f {}",
                k, ckpt.config.d_f
            ))),
            MaskRule::GateMagnitude(e) if *e < 0.0 => {
                Err(Error::Config("negative gate threshold".into()))
            }
            MaskRule::NeuronNorm(eps) if eps.len() != ckpt.config.n_layers => {
                Err(Error::Config(format!(
                    "need {} per-layer thresholds, got {}",
                    ckpt.config.n_layers,
                    eps.len()
                )))
            }
            MaskRule::NeuronNorm(eps) if eps.iter().any(|e| *e < 0.0) => {
                Err(Error::Config("negative neuron-norm threshold".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Observer invoked at every (layer, position) with the FFN-block input and
/// the per-neuron values actually computed there; lets calibration and
/// measurement piggyback on a single forward pass.
pub trait FfnTap {
    /// `x` is the normalized FFN input, `s` the gate activations,
    /// `h = s ⊙ (W_in x)` the coefficients as computed (before masking
    /// zeroes them), `weak` the set about to be skipped (empty when dense).
    fn ffn(&mut self, layer: usize, pos: usize, x: &[f32], s: &[f32], h: &[f32], weak: &[usize]);
}

/// `y[i] = gain[i] * x[i] / sqrt(mean(x^2) + eps)`; returns the reciprocal
/// of the RMS term for reuse in backprop.
pub(crate) fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) -> f32 {
    let ms: f32 = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = (ms + RMS_EPS).sqrt().recip();
    for ((o, &xi), &g) in out.iter_mut().zip(x.iter()).zip(gain.iter()) {
        *o = g * xi * inv;
    }
    inv
}

pub(crate) struct LayerWeights<'a> {
    pub attn_norm: &'a [f32],
    pub wq: &'a [f32],
    pub wk: &'a [f32],
    pub wv: &'a [f32],
    pub wo: &'a [f32],
    pub ffn_norm: &'a [f32],
    pub ffn: FfnRef<'a>,
}

pub(crate) fn layer_weights(ckpt: &Checkpoint, l: usize) -> LayerWeights<'_> {
    let cfg = &ckpt.config;
    let take = |suffix: &str| {
        let spec = ckpt
            .layout
            .find(&format!("layer{l}.{suffix}"))
            .expect("layout is canonical");
        ckpt.slice(spec)
    };
    LayerWeights {
        attn_norm: take("attn_norm"),
        wq: take("wq"),
        wk: take("wk"),
        wv: take("wv"),
        wo: take("wo"),
        ffn_norm: take("ffn_norm"),
        ffn: FfnRef {
            d_h: cfg.d_h,
            d_f: cfg.d_f,
            w_gate: take("w_gate"),
            w_in: take("w_in"),
            w_out: take("w_out"),
        },
    }
}

fn check_tokens(ckpt: &Checkpoint, tokens: &[u8]) -> Result<()> {
    if tokens.len() > ckpt.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: ckpt.config.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| (t as usize) >= ckpt.config.vocab_size) {
        return Err(Error::UnknownToken {
            id: t as usize,
            vocab: ckpt.config.vocab_size,
        });
    }
    Ok(())
}

/// Forward pass over one window; returns [T x vocab] logits.
///
/// With a mask rule, the FFN of every layer skips the induced weak set; the
/// rest of the computation is identical to the dense path, so a rule that
/// selects nothing reproduces dense logits exactly.
pub fn transformer_forward(
    ckpt: &Checkpoint,
    tokens: &[u8],
    mask: Option<&MaskRule>,
) -> Result<Matrix> {
    forward_with_tap(ckpt, tokens, mask, None)
}

/// [`transformer_forward`] with an optional per-FFN observer.
pub fn forward_with_tap(
    ckpt: &Checkpoint,
    tokens: &[u8],
    mask: Option<&MaskRule>,
    mut tap: Option<&mut dyn FfnTap>,
) -> Result<Matrix> {
    check_tokens(ckpt, tokens)?;
    if let Some(rule) = mask {
        rule.validate(ckpt)?;
    }
    let cfg = &ckpt.config;
    let (d_h, d_f, t_len) = (cfg.d_h, cfg.d_f, tokens.len());
    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f32).sqrt();

    let needs_col_norms = matches!(mask, Some(MaskRule::NeuronNorm(_))) || tap.is_some();
    let col_norms: Vec<Vec<f32>> = if needs_col_norms {
        (0..cfg.n_layers)
            .map(|l| ffn_col_norms(layer_weights(ckpt, l).ffn))
            .collect()
    } else {
        Vec::new()
    };
    let empty: Vec<f32> = Vec::new();

    let tok_emb = ckpt.tensor("tok_emb")?;
    let pos_emb = ckpt.tensor("pos_emb")?;

    // Residual stream, one row per position.
    let mut x = Matrix::zeros(t_len, d_h);
    for (t, &tok) in tokens.iter().enumerate() {
        let e = &tok_emb[tok as usize * d_h..(tok as usize + 1) * d_h];
        let p = &pos_emb[t * d_h..(t + 1) * d_h];
        for (o, (a, b)) in x.row_mut(t).iter_mut().zip(e.iter().zip(p.iter())) {
            *o = a + b;
        }
    }

    let mut xn = Matrix::zeros(t_len, d_h);
    let mut q = Matrix::zeros(t_len, d_h);
    let mut k = Matrix::zeros(t_len, d_h);
    let mut v = Matrix::zeros(t_len, d_h);
    let mut ctx = Matrix::zeros(t_len, d_h);
    let mut scores = vec![0.0f32; t_len];
    let mut s_buf = vec![0.0f32; d_f];
    let mut h_buf = vec![0.0f32; d_f];
    let mut weak = Vec::new();
    let mut y_buf = vec![0.0f32; d_h];

    for l in 0..cfg.n_layers {
        let lw = layer_weights(ckpt, l);

        // Attention sublayer.
        for t in 0..t_len {
            rms_norm(x.row(t), lw.attn_norm, xn.row_mut(t));
        }
        for t in 0..t_len {
            for (buf, w) in [(&mut q, lw.wq), (&mut k, lw.wk), (&mut v, lw.wv)] {
                let row = buf.row_mut(t);
                for r in 0..d_h {
                    row[r] = dot(&w[r * d_h..(r + 1) * d_h], xn.row(t));
                }
            }
        }
        for t in 0..t_len {
            let ctx_row = ctx.row_mut(t);
            ctx_row.fill(0.0);
            for hd in 0..n_heads {
                let hs = hd * head_dim;
                let qh = &q.row(t)[hs..hs + head_dim];
                let mut max = f32::NEG_INFINITY;
                for (u, sc) in scores.iter_mut().enumerate().take(t + 1) {
                    *sc = dot(qh, &k.row(u)[hs..hs + head_dim]) * scale;
                    max = max.max(*sc);
                }
                let mut denom = 0.0f32;
                for sc in scores.iter_mut().take(t + 1) {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                let inv = denom.recip();
                for u in 0..=t {
                    let a = scores[u] * inv;
                    let vh = &v.row(u)[hs..hs + head_dim];
                    for (c, &vv) in ctx_row[hs..hs + head_dim].iter_mut().zip(vh.iter()) {
                        *c += a * vv;
                    }
                }
            }
        }
        for t in 0..t_len {
            let x_row = x.row_mut(t);
            for r in 0..d_h {
                x_row[r] += dot(&lw.wo[r * d_h..(r + 1) * d_h], ctx.row(t));
            }
        }

        // FFN sublayer.
        let norms = if needs_col_norms { &col_norms[l] } else { &empty };
        for t in 0..t_len {
            rms_norm(x.row(t), lw.ffn_norm, xn.row_mut(t));
            gate_coeffs(xn.row(t), lw.ffn, cfg.activation, &mut s_buf, &mut h_buf);
            weak.clear();
            if let Some(rule) = mask {
                rule.weak_indices(l, &s_buf, &h_buf, norms, &mut weak);
            }
            if let Some(tap) = tap.as_deref_mut() {
                tap.ffn(l, t, xn.row(t), &s_buf, &h_buf, &weak);
            }
            for &i in &weak {
                h_buf[i] = 0.0;
            }
            project_out(lw.ffn, &h_buf, &mut y_buf);
            for (o, &yv) in x.row_mut(t).iter_mut().zip(y_buf.iter()) {
                *o += yv;
            }
        }
    }

    let final_norm = ckpt.tensor("final_norm")?;
    let lm_head = ckpt.tensor("lm_head")?;
    let mut logits = Matrix::zeros(t_len, cfg.vocab_size);
    for t in 0..t_len {
        rms_norm(x.row(t), final_norm, xn.row_mut(t));
        let row = logits.row_mut(t);
        for r in 0..cfg.vocab_size {
            row[r] = dot(&lm_head[r * d_h..(r + 1) * d_h], xn.row(t));
        }
    }
    Ok(logits)
}
