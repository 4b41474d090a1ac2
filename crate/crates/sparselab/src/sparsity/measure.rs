//! Activation-ratio measurement and the stabilized per-run series.

use crate::error::{Error, Result};
use crate::mat::l2_norm;
use crate::model::forward::layer_weights;
use crate::model::{evaluate_ppl, forward_with_tap, Activation, Checkpoint, FfnTap, MaskRule};
use crate::sparsity::search::{search_cett_hyperparameter, CettSearchResult, CheckpointProbe};
use crate::sparsity::{CettCalibrator, MethodKind, DENOM_FLOOR};
use crate::train::RunManifest;
use serde::Serialize;
use std::path::Path;

/// Recognition method plus its scalar, as selected on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    Zero,
    TopK(usize),
    Fat(f32),
    /// CETT target in [0, 1]; per-layer thresholds are calibrated here.
    CettTarget(f64),
}

impl MethodSpec {
    pub fn kind(&self) -> MethodKind {
        match self {
            MethodSpec::Zero => MethodKind::ZeroReLU,
            MethodSpec::TopK(_) => MethodKind::TopK,
            MethodSpec::Fat(_) => MethodKind::Fat,
            MethodSpec::CettTarget(_) => MethodKind::Cett,
        }
    }

    pub fn param(&self) -> f64 {
        match self {
            MethodSpec::Zero => 0.0,
            MethodSpec::TopK(k) => *k as f64,
            MethodSpec::Fat(e) => *e as f64,
            MethodSpec::CettTarget(t) => *t,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MeasureOptions {
    /// Tokens from the head of the dataset used to calibrate CETT thresholds.
    pub calib_tokens: usize,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        MeasureOptions { calib_tokens: 4096 }
    }
}

/// Per-layer and aggregate activation ratios, thresholds, realized CETT,
/// and perplexity with and without masking, for one checkpoint.
#[derive(Debug, Clone, Serialize)]
pub struct SparsityReport {
    pub method: MethodKind,
    pub param: f64,
    pub per_layer_activation_ratio: Vec<f64>,
    /// Mean over layers of the per-layer ratios.
    pub aggregate_activation_ratio: f64,
    pub per_layer_threshold: Vec<f64>,
    pub per_layer_mean_cett: Vec<f64>,
    pub ppl_dense: f64,
    pub ppl_sparse: f64,
    pub tokens_evaluated: u64,
    /// Tokens excluded from CETT averaging because the dense FFN output
    /// norm fell below the floor.
    pub degenerate_tokens: u64,
    /// Tokens whose realized CETT exceeded 1 through cancellation.
    pub cett_above_one: u64,
}

struct LayerCounts {
    weak: u64,
    tokens: u64,
    cett_sum: f64,
    cett_tokens: u64,
    degenerate: u64,
    above_one: u64,
}

struct MeasureTap<'a> {
    w_outs: Vec<&'a [f32]>,
    d_h: usize,
    counts: Vec<LayerCounts>,
    y_full: Vec<f32>,
    y_weak: Vec<f32>,
    h_weak: Vec<f32>,
}

impl FfnTap for MeasureTap<'_> {
    fn ffn(&mut self, layer: usize, _pos: usize, _x: &[f32], s: &[f32], h: &[f32], weak: &[usize]) {
        let d_f = s.len();
        let c = &mut self.counts[layer];
        c.weak += weak.len() as u64;
        c.tokens += 1;
        // realized CETT of the emitted weak set
        let w_out = self.w_outs[layer];
        for r in 0..self.d_h {
            self.y_full[r] = crate::mat::dot(&w_out[r * d_f..(r + 1) * d_f], h);
        }
        let denom = l2_norm(&self.y_full);
        if denom < DENOM_FLOOR {
            c.degenerate += 1;
            return;
        }
        self.h_weak[..d_f].fill(0.0);
        for &i in weak {
            self.h_weak[i] = h[i];
        }
        for r in 0..self.d_h {
            self.y_weak[r] = crate::mat::dot(&w_out[r * d_f..(r + 1) * d_f], &self.h_weak[..d_f]);
        }
        let cett = l2_norm(&self.y_weak) / denom;
        if cett > 1.0 {
            c.above_one += 1;
        }
        c.cett_sum += cett;
        c.cett_tokens += 1;
    }
}

/// Measure the activation ratio of `ckpt` on `dataset` under one
/// recognition method, along with dense and masked perplexity.
pub fn measure_activation_ratio(
    ckpt: &Checkpoint,
    dataset: &[u8],
    method: &MethodSpec,
    opts: MeasureOptions,
) -> Result<SparsityReport> {
    if dataset.len() < 2 {
        return Err(Error::EmptyDataset("measurement dataset"));
    }
    let cfg = &ckpt.config;
    let (rule, thresholds) = match method {
        MethodSpec::Zero => {
            if cfg.activation != Activation::ReLU {
                return Err(Error::Config(
                    "zero-threshold recognition requires a ReLU model".into(),
                ));
            }
            (MaskRule::ZeroGate, vec![0.0; cfg.n_layers])
        }
        MethodSpec::TopK(k) => (MaskRule::TopK(*k), vec![*k as f64; cfg.n_layers]),
        MethodSpec::Fat(e) => (MaskRule::GateMagnitude(*e), vec![*e as f64; cfg.n_layers]),
        MethodSpec::CettTarget(t) => {
            let calib_len = opts.calib_tokens.min(dataset.len()).max(2);
            let calib = CettCalibrator::build(ckpt, &dataset[..calib_len])?;
            let eps = calib.thresholds_for(*t)?;
            let as_f64 = eps.iter().map(|&e| e as f64).collect();
            (MaskRule::NeuronNorm(eps), as_f64)
        }
    };
    rule.validate(ckpt)?;

    let mut tap = MeasureTap {
        w_outs: (0..cfg.n_layers)
            .map(|l| layer_weights(ckpt, l).ffn.w_out)
            .collect(),
        d_h: cfg.d_h,
        counts: (0..cfg.n_layers)
            .map(|_| LayerCounts {
                weak: 0,
                tokens: 0,
                cett_sum: 0.0,
                cett_tokens: 0,
                degenerate: 0,
                above_one: 0,
            })
            .collect(),
        y_full: vec![0.0; cfg.d_h],
        y_weak: vec![0.0; cfg.d_h],
        h_weak: vec![0.0; cfg.d_f],
    };

    // masked pass: counts via the tap, sparse NLL from the same logits
    let window = cfg.max_seq_len;
    let mut nll_sum = 0.0f64;
    let mut pred = 0u64;
    let mut start = 0usize;
    while start + 1 < dataset.len() {
        let end = (start + window).min(dataset.len());
        let tokens = &dataset[start..end];
        let logits = forward_with_tap(ckpt, tokens, Some(&rule), Some(&mut tap))?;
        for t in 0..tokens.len() - 1 {
            nll_sum += crate::model::eval::nll_of(logits.row(t), tokens[t + 1] as usize);
            pred += 1;
        }
        start = end;
    }
    let ppl_sparse = (nll_sum / pred as f64).exp();
    let ppl_dense = evaluate_ppl(ckpt, dataset, None)?.ppl;

    let per_layer_activation_ratio: Vec<f64> = tap
        .counts
        .iter()
        .map(|c| 1.0 - c.weak as f64 / (c.tokens * cfg.d_f as u64) as f64)
        .collect();
    let aggregate =
        per_layer_activation_ratio.iter().sum::<f64>() / per_layer_activation_ratio.len() as f64;
    Ok(SparsityReport {
        method: method.kind(),
        param: method.param(),
        aggregate_activation_ratio: aggregate,
        per_layer_activation_ratio,
        per_layer_threshold: thresholds,
        per_layer_mean_cett: tap
            .counts
            .iter()
            .map(|c| {
                if c.cett_tokens == 0 {
                    0.0
                } else {
                    c.cett_sum / c.cett_tokens as f64
                }
            })
            .collect(),
        ppl_dense,
        ppl_sparse,
        tokens_evaluated: tap.counts[0].tokens,
        degenerate_tokens: tap.counts.iter().map(|c| c.degenerate).sum(),
        cett_above_one: tap.counts.iter().map(|c| c.above_one).sum(),
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeriesPoint {
    pub tokens_seen: u64,
    pub activation_ratio: f64,
    pub cett: f64,
    pub ppl_dense: f64,
    pub ppl_sparse: f64,
}

#[derive(Debug, Serialize)]
pub struct StabilizedSeries {
    /// The shared CETT level found on the joint tail checkpoints.
    pub cett: f64,
    pub search: CettSearchResult,
    /// One point per post-warmup checkpoint, in training order.
    pub points: Vec<SeriesPoint>,
    /// True when fewer than `tail` post-warmup checkpoints existed and the
    /// search fell back to all of them.
    pub used_fallback: bool,
}

/// How many trailing checkpoints anchor the joint CETT search.
pub const STABILIZE_TAIL: usize = 5;

/// The stabilized activation-ratio series of one training run.
///
/// Warmup-stage checkpoints are dropped; the CETT level is searched once on
/// the last [`STABILIZE_TAIL`] checkpoints jointly (mean PPL ratio across
/// them), and that single level is then applied to every kept checkpoint.
pub fn stabilized_series(
    run_dir: &Path,
    manifest: &RunManifest,
    valid: &[u8],
    p_percent: f64,
    eps: f64,
    opts: MeasureOptions,
) -> Result<StabilizedSeries> {
    let kept: Vec<_> = manifest
        .checkpoints
        .iter()
        .filter(|c| c.tokens_seen > 0 && c.tokens_seen >= manifest.warmup_tokens)
        .collect();
    if kept.is_empty() {
        return Err(Error::Config(
            "no post-warmup checkpoints to stabilize".into(),
        ));
    }
    let ckpts: Vec<Checkpoint> = kept
        .iter()
        .map(|c| crate::splw::load_checkpoint(run_dir.join(&c.path)))
        .collect::<Result<_>>()?;

    let used_fallback = ckpts.len() < STABILIZE_TAIL;
    let tail_start = ckpts.len().saturating_sub(STABILIZE_TAIL);
    let calib_len = opts.calib_tokens.min(valid.len()).max(2);
    let mut probes: Vec<CheckpointProbe> = ckpts[tail_start..]
        .iter()
        .map(|c| CheckpointProbe::new(c, valid, &valid[..calib_len]))
        .collect::<Result<_>>()?;
    let search = search_cett_hyperparameter(&mut probes, p_percent, eps)?;
    drop(probes);

    let mut points = Vec::with_capacity(ckpts.len());
    for ckpt in &ckpts {
        let report =
            measure_activation_ratio(ckpt, valid, &MethodSpec::CettTarget(search.cett), opts)?;
        points.push(SeriesPoint {
            tokens_seen: ckpt.tokens_seen,
            activation_ratio: report.aggregate_activation_ratio,
            cett: search.cett,
            ppl_dense: report.ppl_dense,
            ppl_sparse: report.ppl_sparse,
        });
    }
    Ok(StabilizedSeries {
        cett: search.cett,
        search,
        points,
        used_fallback,
    })
}
