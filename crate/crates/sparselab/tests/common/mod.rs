//! Shared oracles for the integration suites.
//!
//! `reference` reimplements the model forward pass from scratch in f64 with
//! plain loops; it shares nothing with the crate's compute path except raw
//! tensor access, so it can arbitrate both the forward pass and, through
//! finite differences, the backward pass.

#![allow(dead_code)]

pub mod reference {
    use sparselab::model::{Activation, Checkpoint};

    const EPS: f64 = 1e-5;

    fn get2(ckpt: &Checkpoint, name: &str) -> (usize, usize, Vec<f64>) {
        let (r, c, data) = ckpt.tensor_2d(name).unwrap();
        (r, c, data.iter().map(|&v| v as f64).collect())
    }

    fn get1(ckpt: &Checkpoint, name: &str) -> Vec<f64> {
        ckpt.tensor(name).unwrap().iter().map(|&v| v as f64).collect()
    }

    fn act(a: Activation, x: f64) -> f64 {
        match a {
            Activation::ReLU => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::SiLU => x / (1.0 + (-x).exp()),
        }
    }

    fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + EPS).sqrt();
        (0..x.len()).map(|i| gain[i] * x[i] * inv).collect()
    }

    /// [T x vocab] logits computed independently of the crate's forward.
    pub fn logits_f64(ckpt: &Checkpoint, tokens: &[u8]) -> Vec<Vec<f64>> {
        let cfg = &ckpt.config;
        let (d_h, d_f, t_len) = (cfg.d_h, cfg.d_f, tokens.len());
        let head_dim = d_h / cfg.n_heads;
        let (_, _, tok_emb) = get2(ckpt, "tok_emb");
        let (_, _, pos_emb) = get2(ckpt, "pos_emb");

        let mut x: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                let tok = tokens[t] as usize;
                (0..d_h)
                    .map(|i| tok_emb[tok * d_h + i] + pos_emb[t * d_h + i])
                    .collect()
            })
            .collect();

        for l in 0..cfg.n_layers {
            let attn_gain = get1(ckpt, &format!("layer{l}.attn_norm"));
            let (_, _, wq) = get2(ckpt, &format!("layer{l}.wq"));
            let (_, _, wk) = get2(ckpt, &format!("layer{l}.wk"));
            let (_, _, wv) = get2(ckpt, &format!("layer{l}.wv"));
            let (_, _, wo) = get2(ckpt, &format!("layer{l}.wo"));
            let ffn_gain = get1(ckpt, &format!("layer{l}.ffn_norm"));
            let (_, _, w_gate) = get2(ckpt, &format!("layer{l}.w_gate"));
            let (_, _, w_in) = get2(ckpt, &format!("layer{l}.w_in"));
            let (_, _, w_out) = get2(ckpt, &format!("layer{l}.w_out"));

            let xn: Vec<Vec<f64>> = x.iter().map(|row| rmsnorm(row, &attn_gain)).collect();
            let proj = |w: &[f64], row: &[f64]| -> Vec<f64> {
                (0..d_h)
                    .map(|r| (0..d_h).map(|c| w[r * d_h + c] * row[c]).sum())
                    .collect()
            };
            let q: Vec<Vec<f64>> = xn.iter().map(|r| proj(&wq, r)).collect();
            let k: Vec<Vec<f64>> = xn.iter().map(|r| proj(&wk, r)).collect();
            let v: Vec<Vec<f64>> = xn.iter().map(|r| proj(&wv, r)).collect();

            for t in 0..t_len {
                let mut ctx = vec![0.0f64; d_h];
                for h in 0..cfg.n_heads {
                    let hs = h * head_dim;
                    let mut scores: Vec<f64> = (0..=t)
                        .map(|u| {
                            (0..head_dim).map(|i| q[t][hs + i] * k[u][hs + i]).sum::<f64>()
                                / (head_dim as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    for u in 0..=t {
                        let a = scores[u] / denom;
                        for i in 0..head_dim {
                            ctx[hs + i] += a * v[u][hs + i];
                        }
                    }
                }
                for r in 0..d_h {
                    let o: f64 = (0..d_h).map(|c| wo[r * d_h + c] * ctx[c]).sum();
                    x[t][r] += o;
                }
            }

            for t in 0..t_len {
                let xn = rmsnorm(&x[t], &ffn_gain);
                let mut h = vec![0.0f64; d_f];
                for i in 0..d_f {
                    let g: f64 = (0..d_h).map(|c| w_gate[i * d_h + c] * xn[c]).sum();
                    let inner: f64 = (0..d_h).map(|c| w_in[i * d_h + c] * xn[c]).sum();
                    h[i] = act(cfg.activation, g) * inner;
                }
                for r in 0..d_h {
                    let y: f64 = (0..d_f).map(|i| w_out[r * d_f + i] * h[i]).sum();
                    x[t][r] += y;
                }
            }
        }

        let fin_gain = get1(ckpt, "final_norm");
        let (_, _, lm_head) = get2(ckpt, "lm_head");
        (0..t_len)
            .map(|t| {
                let xn = rmsnorm(&x[t], &fin_gain);
                (0..cfg.vocab_size)
                    .map(|r| (0..d_h).map(|c| lm_head[r * d_h + c] * xn[c]).sum())
                    .collect()
            })
            .collect()
    }

    /// Mean next-token NLL of one window, in f64 end to end.
    pub fn mean_nll_f64(ckpt: &Checkpoint, tokens: &[u8]) -> f64 {
        let logits = logits_f64(ckpt, tokens);
        let mut sum = 0.0;
        for t in 0..tokens.len() - 1 {
            let row = &logits[t];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            sum += lse - row[tokens[t + 1] as usize];
        }
        sum / (tokens.len() - 1) as f64
    }
}

/// Unigram (order-0) perplexity of `data`, the baseline a trained model
/// must beat: counts byte frequencies and scores the same stream.
pub fn unigram_ppl(train: &[u8], eval: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &b in train {
        counts[b as usize] += 1;
    }
    let total = train.len() as f64 + 256.0; // add-one smoothing
    let mut nll = 0.0f64;
    for &b in eval {
        let p = (counts[b as usize] as f64 + 1.0) / total;
        nll -= p.ln();
    }
    (nll / eval.len() as f64).exp()
}

/// Spearman rank correlation of y against x.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &ix in &idx[i..=j] {
                r[ix] = avg;
            }
            i = j + 1;
        }
        r
    };
    pearson(&rank(x), &rank(y))
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt()).max(1e-300)
}
