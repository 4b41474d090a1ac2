//! Perplexity over a raw byte stream.
//!
//! The stream is cut into non-overlapping windows of `max_seq_len` tokens;
//! every token with a predecessor inside its window is scored. The reported
//! mean is token-weighted: one flat average of next-token NLL over all
//! predicted tokens, accumulated in f64.

use crate::error::{Error, Result};
use crate::model::{transformer_forward, Checkpoint, MaskRule};

#[derive(Debug, Clone, PartialEq)]
pub struct PplReport {
    pub ppl: f64,
    pub mean_nll: f64,
    pub token_count: u64,
}

/// Next-token perplexity of `ckpt` on `data`. `mask` absent is the dense
/// setting; present, the FFNs skip the rule-induced weak sets.
pub fn evaluate_ppl(ckpt: &Checkpoint, data: &[u8], mask: Option<&MaskRule>) -> Result<PplReport> {
    if data.len() < 2 {
        return Err(Error::EmptyDataset("need at least two tokens to score"));
    }
    let window = ckpt.config.max_seq_len;
    let mut nll_sum = 0.0f64;
    let mut count = 0u64;
    let mut start = 0usize;
    while start + 1 < data.len() {
        let end = (start + window).min(data.len());
        let tokens = &data[start..end];
        let logits = transformer_forward(ckpt, tokens, mask)?;
        for t in 0..tokens.len() - 1 {
            nll_sum += nll_of(logits.row(t), tokens[t + 1] as usize);
            count += 1;
        }
        start = end;
    }
    let mean_nll = nll_sum / count as f64;
    Ok(PplReport {
        ppl: mean_nll.exp(),
        mean_nll,
        token_count: count,
    })
}

/// -log softmax(logits)[target], computed stably in f64.
pub(crate) fn nll_of(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum_exp: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    max + sum_exp.ln() - logits[target] as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};
    use approx::assert_relative_eq;

    #[test]
    fn uniform_logits_ppl_is_vocab_size() {
        let mut cfg = ModelConfig::new(16, 1, 2, Activation::ReLU, 0);
        cfg.max_seq_len = 8;
        let mut ckpt = Checkpoint::init(cfg).unwrap();
        ckpt.params.iter_mut().for_each(|p| *p = 0.0);
        let data: Vec<u8> = (0..64).map(|i| (i * 7 % 256) as u8).collect();
        let r = evaluate_ppl(&ckpt, &data, None).unwrap();
        assert_relative_eq!(r.ppl, 256.0, max_relative = 1e-9);
        assert_relative_eq!(r.mean_nll.exp(), r.ppl, max_relative = 1e-12);
    }

    #[test]
    fn dense_equals_zero_cett_mask() {
        let mut cfg = ModelConfig::new(16, 2, 2, Activation::SiLU, 42);
        cfg.max_seq_len = 16;
        let ckpt = Checkpoint::init(cfg).unwrap();
        let data: Vec<u8> = (0..100).map(|i| (i * 31 % 256) as u8).collect();
        let dense = evaluate_ppl(&ckpt, &data, None).unwrap();
        let masked = evaluate_ppl(&ckpt, &data, Some(&MaskRule::NeuronNorm(vec![0.0; 2]))).unwrap();
        assert_relative_eq!(dense.ppl, masked.ppl, max_relative = 1e-6);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let ckpt = Checkpoint::init(ModelConfig::new(16, 1, 2, Activation::ReLU, 0)).unwrap();
        assert!(evaluate_ppl(&ckpt, &[], None).is_err());
        assert!(evaluate_ppl(&ckpt, &[1], None).is_err());
    }

    #[test]
    fn token_count_covers_all_window_interiors() {
        let mut cfg = ModelConfig::new(16, 1, 2, Activation::ReLU, 0);
        cfg.max_seq_len = 8;
        let ckpt = Checkpoint::init(cfg).unwrap();
        // 20 tokens -> windows of 8, 8, 4 -> 7 + 7 + 3 predictions
        let data = vec![5u8; 20];
        let r = evaluate_ppl(&ckpt, &data, None).unwrap();
        assert_eq!(r.token_count, 17);
    }
}
