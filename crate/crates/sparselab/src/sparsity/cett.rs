//! Layer-wise threshold calibration.
//!
//! For each layer, the threshold eps on ||n_i|| is binary-searched so the
//! token-averaged truncation error CETT(eps) on a calibration sample meets
//! a target. Because the weak set at any eps is a prefix of the neurons
//! sorted by norm, each token caches its sorted norms plus the running
//! vector-sum norms of that prefix once, and every probe afterwards costs
//! one binary search per token.

use crate::error::{Error, Result};
use crate::model::ffn::ffn_col_norms;
use crate::model::forward::layer_weights;
use crate::model::{forward_with_tap, Checkpoint, FfnTap};
use crate::sparsity::DENOM_FLOOR;

const CETT_TOL: f64 = 1e-3;
const BRACKET_TOL: f64 = 1e-9;
const MAX_ITERS: usize = 40;

/// Per-token truncation-error profile of one layer on a calibration sample.
#[derive(Debug, Clone, Default)]
pub struct LayerCalib {
    /// Sorted ||n_i|| per kept token, ascending.
    sorted_norms: Vec<Vec<f32>>,
    /// `cett_prefix[t][j]` = CETT when the j smallest-norm neurons are
    /// skipped; index d_f is exactly 1.
    cett_prefix: Vec<Vec<f64>>,
    /// Largest norm seen over the sample.
    max_norm: f32,
    /// Tokens dropped because the dense output norm was below the floor.
    pub degenerate_tokens: usize,
}

impl LayerCalib {
    /// Add one token given its coefficients `h = s ⊙ (W_in x)` and the
    /// layer's output matrix.
    pub fn add_token(&mut self, h: &[f32], w_out: &[f32], d_h: usize, col_norms: &[f32]) {
        let d_f = h.len();
        let mut order: Vec<usize> = (0..d_f).collect();
        let norms: Vec<f32> = (0..d_f).map(|i| h[i].abs() * col_norms[i]).collect();
        order.sort_unstable_by(|&a, &b| {
            norms[a]
                .partial_cmp(&norms[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        // running vector sum of neuron outputs in ascending norm order
        let mut acc = vec![0.0f64; d_h];
        let mut prefix_norm = Vec::with_capacity(d_f + 1);
        prefix_norm.push(0.0f64);
        for &i in &order {
            for (r, a) in acc.iter_mut().enumerate() {
                *a += (w_out[r * d_f + i] as f64) * (h[i] as f64);
            }
            prefix_norm.push(acc.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        let denom = prefix_norm[d_f];
        if denom < DENOM_FLOOR {
            self.degenerate_tokens += 1;
            return;
        }
        let sorted: Vec<f32> = order.iter().map(|&i| norms[i]).collect();
        if let Some(&m) = sorted.last() {
            self.max_norm = self.max_norm.max(m);
        }
        self.cett_prefix
            .push(prefix_norm.into_iter().map(|n| n / denom).collect());
        self.sorted_norms.push(sorted);
    }

    pub fn tokens(&self) -> usize {
        self.sorted_norms.len()
    }

    /// Token-averaged CETT at threshold `eps` (strict `||n_i|| < eps`).
    pub fn mean_cett(&self, eps: f64) -> f64 {
        if self.sorted_norms.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0f64;
        for (norms, prefix) in self.sorted_norms.iter().zip(&self.cett_prefix) {
            let j = norms.partition_point(|&n| (n as f64) < eps);
            sum += prefix[j];
        }
        sum / self.sorted_norms.len() as f64
    }

    /// Smallest threshold whose mean CETT meets `target` within tolerance.
    pub fn calibrate(&self, target: f64) -> Result<f64> {
        if self.sorted_norms.is_empty() {
            return Err(Error::EmptyDataset("calibration sample is empty"));
        }
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::Config(format!(
                "CETT target {target} outside [0, 1]"
            )));
        }
        if target == 0.0 {
            return Ok(0.0);
        }
        // an upper bound that captures every neuron under strict comparison
        let hi_cap = (self.max_norm as f64) * (1.0 + 1e-6) + 1e-12;
        if target >= 1.0 {
            return Ok(hi_cap);
        }
        let mut lo = 0.0f64;
        let mut hi = hi_cap;
        for _ in 0..MAX_ITERS {
            let mid = 0.5 * (lo + hi);
            let c = self.mean_cett(mid);
            if (c - target).abs() <= CETT_TOL {
                return Ok(mid);
            }
            if c < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < BRACKET_TOL {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Calibration profiles for every layer of one checkpoint, built from a
/// single dense forward pass over the calibration tokens.
pub struct CettCalibrator {
    layers: Vec<LayerCalib>,
}

struct CalibTap<'a> {
    layers: &'a mut [LayerCalib],
    w_outs: Vec<&'a [f32]>,
    col_norms: &'a [Vec<f32>],
    d_h: usize,
}

impl FfnTap for CalibTap<'_> {
    fn ffn(&mut self, layer: usize, _pos: usize, _x: &[f32], _s: &[f32], h: &[f32], _weak: &[usize]) {
        self.layers[layer].add_token(h, self.w_outs[layer], self.d_h, &self.col_norms[layer]);
    }
}

impl CettCalibrator {
    /// Run `calib_tokens` through `ckpt` densely and record every layer's
    /// truncation profile.
    pub fn build(ckpt: &Checkpoint, calib_tokens: &[u8]) -> Result<Self> {
        if calib_tokens.is_empty() {
            return Err(Error::EmptyDataset("calibration sample is empty"));
        }
        let n_layers = ckpt.config.n_layers;
        let mut layers = vec![LayerCalib::default(); n_layers];
        let col_norms: Vec<Vec<f32>> = (0..n_layers)
            .map(|l| ffn_col_norms(layer_weights(ckpt, l).ffn))
            .collect();
        let w_outs: Vec<&[f32]> = (0..n_layers)
            .map(|l| layer_weights(ckpt, l).ffn.w_out)
            .collect();
        let mut tap = CalibTap {
            layers: &mut layers,
            w_outs,
            col_norms: &col_norms,
            d_h: ckpt.config.d_h,
        };
        let window = ckpt.config.max_seq_len;
        let mut start = 0usize;
        while start < calib_tokens.len() {
            let end = (start + window).min(calib_tokens.len());
            forward_with_tap(ckpt, &calib_tokens[start..end], None, Some(&mut tap))?;
            start = end;
        }
        Ok(CettCalibrator { layers })
    }

    pub fn layer(&self, l: usize) -> &LayerCalib {
        &self.layers[l]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-layer thresholds meeting one shared CETT target.
    pub fn thresholds_for(&self, target: f64) -> Result<Vec<f32>> {
        self.layers
            .iter()
            .map(|l| l.calibrate(target).map(|e| e as f32))
            .collect()
    }
}

/// Binary-search the norm threshold of one layer profile to meet
/// `target_cett`; the standalone form of [`LayerCalib::calibrate`].
pub fn calibrate_layer_threshold(calib: &LayerCalib, target_cett: f64) -> Result<f64> {
    calib.calibrate(target_cett)
}
