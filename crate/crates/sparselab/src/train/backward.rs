//! Cached forward pass and full analytic backpropagation for training.
//!
//! This path is dense-only and separate from the scoring forward in
//! `model::forward`; agreement between the two (and against an independent
//! f64 reference) is pinned by tests. Gradients for a whole batch are
//! accumulated into one flat buffer aligned with the parameter layout.

use crate::error::{Error, Result};
use crate::mat::{axpy, dot, Matrix};
use crate::model::eval::nll_of;
use crate::model::forward::{layer_weights, rms_norm};
use crate::model::Checkpoint;

/// Reusable activation caches for one sequence; sized once per run.
pub struct Workspace {
    t_len: usize,
    xs: Vec<Matrix>,      // residual stream entering each layer, plus final
    x_mid: Vec<Matrix>,   // post-attention residual per layer
    xn_attn: Vec<Matrix>, // normalized attention inputs per layer
    xn_ffn: Vec<Matrix>,  // normalized FFN inputs per layer
    inv_attn: Vec<Vec<f32>>,
    inv_ffn: Vec<Vec<f32>>,
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    ctx: Vec<Matrix>,
    aw: Vec<Vec<Matrix>>, // [layer][head] attention weights, rows t, cols u <= t
    g_pre: Vec<Matrix>,   // gate pre-activations [T x d_f]
    inner: Vec<Matrix>,   // W_in projections [T x d_f]
    s: Vec<Matrix>,       // gate activations [T x d_f]
    xn_fin: Matrix,
    inv_fin: Vec<f32>,
    // backward scratch
    d_x: Matrix,
    d_mid: Matrix,
    d_xn: Matrix,
    d_q: Matrix,
    d_k: Matrix,
    d_v: Matrix,
    d_ctx: Matrix,
    d_h: Vec<f32>,
    d_gpre: Vec<f32>,
    d_inner: Vec<f32>,
    logits_row: Vec<f32>,
    scores: Vec<f32>,
    d_score: Vec<f32>,
    d_aw_raw: Vec<f32>,
    d_ctxh: Vec<f32>,
    h_row: Vec<f32>,
}

impl Workspace {
    pub fn new(ckpt: &Checkpoint, t_len: usize) -> Self {
        let cfg = &ckpt.config;
        let (d_h, d_f, l) = (cfg.d_h, cfg.d_f, cfg.n_layers);
        let mat = || Matrix::zeros(t_len, d_h);
        let matf = || Matrix::zeros(t_len, d_f);
        Workspace {
            t_len,
            xs: (0..=l).map(|_| mat()).collect(),
            x_mid: (0..l).map(|_| mat()).collect(),
            xn_attn: (0..l).map(|_| mat()).collect(),
            xn_ffn: (0..l).map(|_| mat()).collect(),
            inv_attn: vec![vec![0.0; t_len]; l],
            inv_ffn: vec![vec![0.0; t_len]; l],
            q: (0..l).map(|_| mat()).collect(),
            k: (0..l).map(|_| mat()).collect(),
            v: (0..l).map(|_| mat()).collect(),
            ctx: (0..l).map(|_| mat()).collect(),
            aw: (0..l)
                .map(|_| (0..cfg.n_heads).map(|_| Matrix::zeros(t_len, t_len)).collect())
                .collect(),
            g_pre: (0..l).map(|_| matf()).collect(),
            inner: (0..l).map(|_| matf()).collect(),
            s: (0..l).map(|_| matf()).collect(),
            xn_fin: mat(),
            inv_fin: vec![0.0; t_len],
            d_x: mat(),
            d_mid: mat(),
            d_xn: mat(),
            d_q: mat(),
            d_k: mat(),
            d_v: mat(),
            d_ctx: mat(),
            d_h: vec![0.0; d_f],
            d_gpre: vec![0.0; d_f],
            d_inner: vec![0.0; d_f],
            logits_row: vec![0.0; cfg.vocab_size],
            scores: vec![0.0; t_len],
            d_score: vec![0.0; t_len],
            d_aw_raw: vec![0.0; t_len],
            d_ctxh: vec![0.0; cfg.head_dim()],
            h_row: vec![0.0; d_f],
        }
    }
}

/// Sum of next-token NLL over a batch of equal-length windows, with the
/// gradient of the *mean* NLL accumulated into `grads`.
///
/// `grads` must have the checkpoint's flat parameter length and is not
/// zeroed here, so multiple calls accumulate.
pub fn batch_loss_and_grads(
    ckpt: &Checkpoint,
    batch: &[&[u8]],
    ws: &mut Workspace,
    grads: &mut [f32],
) -> Result<f64> {
    if grads.len() != ckpt.params.len() {
        return Err(Error::ShapeMismatch {
            op: "batch_loss_and_grads",
            expected: format!("{} gradient elements", ckpt.params.len()),
            got: format!("{}", grads.len()),
        });
    }
    let total_pred: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if total_pred == 0 {
        return Err(Error::EmptyDataset("batch has no predictable tokens"));
    }
    let inv_pred = 1.0f32 / total_pred as f32;
    let mut nll_sum = 0.0f64;
    for seq in batch {
        nll_sum += sequence_pass(ckpt, seq, ws, grads, inv_pred)?;
    }
    Ok(nll_sum)
}

fn sequence_pass(
    ckpt: &Checkpoint,
    tokens: &[u8],
    ws: &mut Workspace,
    grads: &mut [f32],
    inv_pred: f32,
) -> Result<f64> {
    let cfg = &ckpt.config;
    let (d_h, d_f, t_len) = (cfg.d_h, cfg.d_f, tokens.len());
    if t_len != ws.t_len {
        return Err(Error::ShapeMismatch {
            op: "sequence_pass",
            expected: format!("sequence length {}", ws.t_len),
            got: format!("{t_len}"),
        });
    }
    if t_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: t_len,
            max: cfg.max_seq_len,
        });
    }
    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f32).sqrt();

    // ---- forward ----
    let tok_emb = ckpt.tensor("tok_emb")?;
    let pos_emb = ckpt.tensor("pos_emb")?;
    for (t, &tok) in tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::UnknownToken {
                id: tok as usize,
                vocab: cfg.vocab_size,
            });
        }
        let e = &tok_emb[tok as usize * d_h..(tok as usize + 1) * d_h];
        let p = &pos_emb[t * d_h..(t + 1) * d_h];
        for (o, (a, b)) in ws.xs[0].row_mut(t).iter_mut().zip(e.iter().zip(p.iter())) {
            *o = a + b;
        }
    }

    for l in 0..cfg.n_layers {
        let lw = layer_weights(ckpt, l);
        for t in 0..t_len {
            ws.inv_attn[l][t] = rms_norm(ws.xs[l].row(t), lw.attn_norm, ws.xn_attn[l].row_mut(t));
        }
        for t in 0..t_len {
            for (buf, w) in [(&mut ws.q[l], lw.wq), (&mut ws.k[l], lw.wk), (&mut ws.v[l], lw.wv)] {
                let row = buf.row_mut(t);
                for r in 0..d_h {
                    row[r] = dot(&w[r * d_h..(r + 1) * d_h], ws.xn_attn[l].row(t));
                }
            }
        }
        for t in 0..t_len {
            ws.ctx[l].row_mut(t).fill(0.0);
            for hd in 0..n_heads {
                let hs = hd * head_dim;
                let qh = &ws.q[l].row(t)[hs..hs + head_dim];
                let mut max = f32::NEG_INFINITY;
                for u in 0..=t {
                    ws.scores[u] = dot(qh, &ws.k[l].row(u)[hs..hs + head_dim]) * scale;
                    max = max.max(ws.scores[u]);
                }
                let mut denom = 0.0f32;
                for sc in ws.scores.iter_mut().take(t + 1) {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                let inv = denom.recip();
                let aw_row = ws.aw[l][hd].row_mut(t);
                for u in 0..=t {
                    aw_row[u] = ws.scores[u] * inv;
                }
                for u in 0..=t {
                    let a = aw_row[u];
                    let vh = &ws.v[l].row(u)[hs..hs + head_dim];
                    for (c, &vv) in ws.ctx[l].row_mut(t)[hs..hs + head_dim].iter_mut().zip(vh) {
                        *c += a * vv;
                    }
                }
            }
        }
        for t in 0..t_len {
            let (x_row, mid_row) = (ws.xs[l].row(t), ws.x_mid[l].row_mut(t));
            for r in 0..d_h {
                mid_row[r] = x_row[r] + dot(&lw.wo[r * d_h..(r + 1) * d_h], ws.ctx[l].row(t));
            }
        }
        for t in 0..t_len {
            ws.inv_ffn[l][t] = rms_norm(ws.x_mid[l].row(t), lw.ffn_norm, ws.xn_ffn[l].row_mut(t));
            let xn = ws.xn_ffn[l].row(t);
            for i in 0..d_f {
                let g = dot(&lw.ffn.w_gate[i * d_h..(i + 1) * d_h], xn);
                ws.g_pre[l].row_mut(t)[i] = g;
                ws.s[l].row_mut(t)[i] = cfg.activation.apply(g);
                ws.inner[l].row_mut(t)[i] = dot(&lw.ffn.w_in[i * d_h..(i + 1) * d_h], xn);
            }
            {
                let s_row = ws.s[l].row(t);
                let in_row = ws.inner[l].row(t);
                for i in 0..d_f {
                    ws.h_row[i] = s_row[i] * in_row[i];
                }
            }
            let (mid_row, out_row) = (ws.x_mid[l].row(t), ws.xs[l + 1].row_mut(t));
            for r in 0..d_h {
                out_row[r] = mid_row[r] + dot(&lw.ffn.w_out[r * d_f..(r + 1) * d_f], &ws.h_row);
            }
        }
    }

    let final_norm = ckpt.tensor("final_norm")?;
    let lm_head = ckpt.tensor("lm_head")?;
    let n_layers = cfg.n_layers;
    for t in 0..t_len {
        ws.inv_fin[t] = rms_norm(ws.xs[n_layers].row(t), final_norm, ws.xn_fin.row_mut(t));
    }

    // ---- loss and logits gradient, position by position ----
    // Positions 0..T-2 predict tokens 1..T-1; the last position is unused.
    let g = GradView::new(ckpt);
    let mut nll_sum = 0.0f64;
    ws.d_x.data.fill(0.0);
    for t in 0..t_len.saturating_sub(1) {
        let xn = ws.xn_fin.row(t);
        for (r, lr) in ws.logits_row.iter_mut().enumerate() {
            *lr = dot(&lm_head[r * d_h..(r + 1) * d_h], xn);
        }
        let target = tokens[t + 1] as usize;
        nll_sum += nll_of(&ws.logits_row, target);
        // softmax - onehot, scaled to the batch mean
        let max = ws.logits_row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for lr in ws.logits_row.iter_mut() {
            *lr = (*lr - max).exp();
            denom += *lr;
        }
        let inv = denom.recip();
        let d_xrow = ws.d_x.row_mut(t);
        for (r, &p) in ws.logits_row.iter().enumerate() {
            let mut d = p * inv;
            if r == target {
                d -= 1.0;
            }
            d *= inv_pred;
            if d != 0.0 {
                axpy(d, &lm_head[r * d_h..(r + 1) * d_h], d_xrow);
                axpy(d, xn, &mut grads[g.lm_head + r * d_h..g.lm_head + (r + 1) * d_h]);
            }
        }
    }

    // ---- backward through the final norm ----
    for t in 0..t_len {
        let (dst, src) = (ws.d_mid.row_mut(t), ws.d_x.row(t));
        rms_norm_backward(
            src,
            ws.xs[n_layers].row(t),
            final_norm,
            ws.inv_fin[t],
            dst,
            &mut grads[g.final_norm..g.final_norm + d_h],
        );
    }
    std::mem::swap(&mut ws.d_x, &mut ws.d_mid);

    // ---- backward through the layers ----
    for l in (0..n_layers).rev() {
        let lw = layer_weights(ckpt, l);
        let go = g.layer(l, ckpt);

        // FFN sublayer: d_x holds the gradient w.r.t. xs[l+1].
        ws.d_mid.data.clone_from(&ws.d_x.data); // residual passthrough
        let mut h_row = std::mem::take(&mut ws.h_row);
        for t in 0..t_len {
            let d_y = ws.d_x.row(t);
            let s_row = ws.s[l].row(t);
            let in_row = ws.inner[l].row(t);
            let gp_row = ws.g_pre[l].row(t);
            for i in 0..d_f {
                h_row[i] = s_row[i] * in_row[i];
            }
            // d_h[i] = sum_r d_y[r] * w_out[r, i]
            ws.d_h.fill(0.0);
            for (r, &dy) in d_y.iter().enumerate() {
                if dy != 0.0 {
                    axpy(dy, &lw.ffn.w_out[r * d_f..(r + 1) * d_f], &mut ws.d_h);
                    // d_w_out[r, i] += d_y[r] * h[i]
                    axpy(dy, &h_row, &mut grads[go.w_out + r * d_f..go.w_out + (r + 1) * d_f]);
                }
            }
            for i in 0..d_f {
                ws.d_gpre[i] = ws.d_h[i] * in_row[i] * cfg.activation.grad(gp_row[i]);
                ws.d_inner[i] = ws.d_h[i] * s_row[i];
            }
            let xn = ws.xn_ffn[l].row(t);
            ws.d_xn.row_mut(t).fill(0.0);
            for i in 0..d_f {
                let (dg, di) = (ws.d_gpre[i], ws.d_inner[i]);
                if dg != 0.0 {
                    axpy(dg, &lw.ffn.w_gate[i * d_h..(i + 1) * d_h], ws.d_xn.row_mut(t));
                    axpy(dg, xn, &mut grads[go.w_gate + i * d_h..go.w_gate + (i + 1) * d_h]);
                }
                if di != 0.0 {
                    axpy(di, &lw.ffn.w_in[i * d_h..(i + 1) * d_h], ws.d_xn.row_mut(t));
                    axpy(di, xn, &mut grads[go.w_in + i * d_h..go.w_in + (i + 1) * d_h]);
                }
            }
        }
        ws.h_row = h_row;
        for t in 0..t_len {
            rms_norm_backward_acc(
                ws.d_xn.row(t),
                ws.x_mid[l].row(t),
                lw.ffn_norm,
                ws.inv_ffn[l][t],
                ws.d_mid.row_mut(t),
                &mut grads[go.ffn_norm..go.ffn_norm + d_h],
            );
        }

        // Attention sublayer: d_mid holds the gradient w.r.t. x_mid[l].
        ws.d_x.data.clone_from(&ws.d_mid.data); // residual passthrough
        ws.d_q.data.fill(0.0);
        ws.d_k.data.fill(0.0);
        ws.d_v.data.fill(0.0);
        let mut d_ctxh = std::mem::take(&mut ws.d_ctxh);
        for t in 0..t_len {
            let d_out = ws.d_mid.row(t);
            // d_ctx = wo^T d_out; d_wo += d_out (x) ctx
            ws.d_ctx.row_mut(t).fill(0.0);
            for (r, &dy) in d_out.iter().enumerate() {
                if dy != 0.0 {
                    axpy(dy, &lw.wo[r * d_h..(r + 1) * d_h], ws.d_ctx.row_mut(t));
                    axpy(
                        dy,
                        ws.ctx[l].row(t),
                        &mut grads[go.wo + r * d_h..go.wo + (r + 1) * d_h],
                    );
                }
            }
            for hd in 0..n_heads {
                let hs = hd * head_dim;
                d_ctxh.copy_from_slice(&ws.d_ctx.row(t)[hs..hs + head_dim]);
                let aw_row = ws.aw[l][hd].row(t);
                let mut dot_aw = 0.0f32;
                for u in 0..=t {
                    let raw = dot(&d_ctxh, &ws.v[l].row(u)[hs..hs + head_dim]);
                    ws.d_aw_raw[u] = raw;
                    dot_aw += aw_row[u] * raw;
                }
                for u in 0..=t {
                    ws.d_score[u] = aw_row[u] * (ws.d_aw_raw[u] - dot_aw);
                }
                for u in 0..=t {
                    let a = aw_row[u];
                    let dsc = ws.d_score[u] * scale;
                    let vrow = ws.d_v.row_mut(u);
                    for (i, &dc) in d_ctxh.iter().enumerate() {
                        vrow[hs + i] += a * dc;
                    }
                    let krow = ws.k[l].row(u);
                    let qrow_d = ws.d_q.row_mut(t);
                    for i in 0..head_dim {
                        qrow_d[hs + i] += dsc * krow[hs + i];
                    }
                    let qrow = ws.q[l].row(t);
                    let krow_d = ws.d_k.row_mut(u);
                    for i in 0..head_dim {
                        krow_d[hs + i] += dsc * qrow[hs + i];
                    }
                }
            }
        }
        ws.d_ctxh = d_ctxh;
        for t in 0..t_len {
            let xn = ws.xn_attn[l].row(t);
            ws.d_xn.row_mut(t).fill(0.0);
            for (dvec, w, gw) in [
                (&ws.d_q, lw.wq, go.wq),
                (&ws.d_k, lw.wk, go.wk),
                (&ws.d_v, lw.wv, go.wv),
            ] {
                for (r, &d) in dvec.row(t).iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, &w[r * d_h..(r + 1) * d_h], ws.d_xn.row_mut(t));
                        axpy(d, xn, &mut grads[gw + r * d_h..gw + (r + 1) * d_h]);
                    }
                }
            }
        }
        for t in 0..t_len {
            rms_norm_backward_acc(
                ws.d_xn.row(t),
                ws.xs[l].row(t),
                lw.attn_norm,
                ws.inv_attn[l][t],
                ws.d_x.row_mut(t),
                &mut grads[go.attn_norm..go.attn_norm + d_h],
            );
        }
    }

    // ---- embeddings ----
    for (t, &tok) in tokens.iter().enumerate() {
        let d = ws.d_x.row(t);
        axpy(
            1.0,
            d,
            &mut grads[g.tok_emb + tok as usize * d_h..g.tok_emb + (tok as usize + 1) * d_h],
        );
        axpy(1.0, d, &mut grads[g.pos_emb + t * d_h..g.pos_emb + (t + 1) * d_h]);
    }
    Ok(nll_sum)
}

/// `d_x = rmsnorm_bwd(d_y)`, overwriting `d_x`; accumulates the gain grad.
fn rms_norm_backward(
    d_y: &[f32],
    x: &[f32],
    gain: &[f32],
    inv: f32,
    d_x: &mut [f32],
    d_gain: &mut [f32],
) {
    d_x.fill(0.0);
    rms_norm_backward_acc(d_y, x, gain, inv, d_x, d_gain);
}

/// Like [`rms_norm_backward`] but adds into `d_x` (residual streams).
fn rms_norm_backward_acc(
    d_y: &[f32],
    x: &[f32],
    gain: &[f32],
    inv: f32,
    d_x: &mut [f32],
    d_gain: &mut [f32],
) {
    let n = x.len() as f32;
    let mut dot_ux = 0.0f32;
    for ((dy, &xi), &g) in d_y.iter().zip(x.iter()).zip(gain.iter()) {
        dot_ux += dy * g * xi;
    }
    let k = inv * inv * inv / n * dot_ux;
    for i in 0..x.len() {
        d_gain[i] += d_y[i] * x[i] * inv;
        d_x[i] += inv * d_y[i] * gain[i] - k * x[i];
    }
}

/// Flat-buffer offsets of the frequently used tensors.
struct GradView {
    tok_emb: usize,
    pos_emb: usize,
    final_norm: usize,
    lm_head: usize,
}

struct LayerOffsets {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_norm: usize,
    w_gate: usize,
    w_in: usize,
    w_out: usize,
}

impl GradView {
    fn new(ckpt: &Checkpoint) -> Self {
        let off = |n: &str| ckpt.layout.find(n).expect("canonical layout").offset;
        GradView {
            tok_emb: off("tok_emb"),
            pos_emb: off("pos_emb"),
            final_norm: off("final_norm"),
            lm_head: off("lm_head"),
        }
    }

    fn layer(&self, l: usize, ckpt: &Checkpoint) -> LayerOffsets {
        let off = |n: String| ckpt.layout.find(&n).expect("canonical layout").offset;
        LayerOffsets {
            attn_norm: off(format!("layer{l}.attn_norm")),
            wq: off(format!("layer{l}.wq")),
            wk: off(format!("layer{l}.wk")),
            wv: off(format!("layer{l}.wv")),
            wo: off(format!("layer{l}.wo")),
            ffn_norm: off(format!("layer{l}.ffn_norm")),
            w_gate: off(format!("layer{l}.w_gate")),
            w_in: off(format!("layer{l}.w_in")),
            w_out: off(format!("layer{l}.w_out")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{evaluate_ppl, Activation, ModelConfig};

    fn tiny(act: Activation) -> Checkpoint {
        let mut cfg = ModelConfig::new(8, 2, 2, act, 99);
        cfg.vocab_size = 16;
        cfg.max_seq_len = 8;
        Checkpoint::init(cfg).unwrap()
    }

    #[test]
    fn training_loss_matches_eval_nll() {
        // The cached training forward and the scoring forward must agree.
        for act in [Activation::ReLU, Activation::SiLU] {
            let ckpt = tiny(act);
            let seq: Vec<u8> = vec![1, 5, 3, 9, 2, 7, 4, 8];
            let mut ws = Workspace::new(&ckpt, seq.len());
            let mut grads = vec![0.0f32; ckpt.params.len()];
            let nll = batch_loss_and_grads(&ckpt, &[&seq], &mut ws, &mut grads).unwrap();
            let report = evaluate_ppl(&ckpt, &seq, None).unwrap();
            let mean = nll / (seq.len() - 1) as f64;
            assert!(
                (mean - report.mean_nll).abs() < 1e-6,
                "train fwd {mean} vs eval fwd {}",
                report.mean_nll
            );
        }
    }

    #[test]
    fn loss_decreases_on_repeated_batch() {
        // Plain SGD on one batch must reduce the loss monotonically.
        let mut ckpt = tiny(Activation::ReLU);
        let seq: Vec<u8> = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let mut ws = Workspace::new(&ckpt, seq.len());
        let mut grads = vec![0.0f32; ckpt.params.len()];
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            grads.fill(0.0);
            let nll = batch_loss_and_grads(&ckpt, &[&seq], &mut ws, &mut grads).unwrap();
            let mean = nll / (seq.len() - 1) as f64;
            assert!(mean < prev + 1e-9, "loss rose at step {step}: {prev} -> {mean}");
            prev = mean;
            for (p, g) in ckpt.params.iter_mut().zip(&grads) {
                *p -= 1e-4 * g;
            }
        }
        assert!(prev < 2.5, "one-batch overfit should push NLL well down, got {prev}");
    }
}
