//! Binary search for the CETT level that spends a perplexity budget.
//!
//! Bracket [0, 1] over the CETT target. Each probe evaluates, for every
//! checkpoint, the validation loss dense and under CETT masking at the
//! midpoint, forms the per-checkpoint PPL ratio exp(loss_sparse -
//! loss_dense), and averages; the bracket halves toward the level where the
//! mean ratio meets 1 + p%. PPL rises monotonically with the CETT level,
//! which is what justifies bisection; any observed inversion across probes
//! is recorded as a warning rather than an error.

use crate::error::Result;
use crate::model::{evaluate_ppl, Checkpoint, MaskRule};
use crate::sparsity::CettCalibrator;
use serde::Serialize;

/// Loss oracle for one checkpoint; the real implementation evaluates the
/// model, test stubs return closed forms.
pub trait PplProbe {
    /// Mean validation NLL with every neuron active.
    fn dense_loss(&mut self) -> Result<f64>;
    /// Mean validation NLL with CETT-target masking at `cett`.
    fn sparse_loss(&mut self, cett: f64) -> Result<f64>;
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchStep {
    pub mid: f64,
    pub mean_ppl_ratio: f64,
    /// Bracket after the update.
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CettSearchResult {
    /// Final midpoint (lo + hi) / 2.
    pub cett: f64,
    /// Mean PPL ratio at the last evaluated midpoint.
    pub mean_ppl_ratio: f64,
    pub iterations: usize,
    pub eps: f64,
    pub trace: Vec<SearchStep>,
    pub warnings: Vec<String>,
}

/// Find the CETT level at which the mean validation PPL over `probes`
/// rises by `p_percent` percent over dense.
pub fn search_cett_hyperparameter<P: PplProbe>(
    probes: &mut [P],
    p_percent: f64,
    eps: f64,
) -> Result<CettSearchResult> {
    assert!(!probes.is_empty(), "need at least one checkpoint");
    assert!(p_percent >= 0.0, "PPL tolerance must be non-negative");
    assert!(eps > 0.0, "bracket tolerance must be positive");
    let target = 1.0 + p_percent / 100.0;

    let dense: Vec<f64> = probes
        .iter_mut()
        .map(|p| p.dense_loss())
        .collect::<Result<_>>()?;

    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut trace = Vec::new();
    let mut last_ratio = 1.0;
    while hi - lo > eps {
        let mid = 0.5 * (lo + hi);
        let mut sum = 0.0f64;
        for (probe, &d) in probes.iter_mut().zip(dense.iter()) {
            let s = probe.sparse_loss(mid)?;
            sum += (s - d).exp();
        }
        let mean_ratio = sum / probes.len() as f64;
        last_ratio = mean_ratio;
        if mean_ratio < target {
            lo = mid;
        } else {
            hi = mid;
        }
        trace.push(SearchStep {
            mid,
            mean_ppl_ratio: mean_ratio,
            lo,
            hi,
        });
    }

    let mut warnings = Vec::new();
    let mut by_mid: Vec<(f64, f64)> = trace.iter().map(|s| (s.mid, s.mean_ppl_ratio)).collect();
    by_mid.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in by_mid.windows(2) {
        if w[1].1 < w[0].1 - 1e-12 {
            warnings.push(format!(
                "PPL ratio not monotone: {:.6} at cett {:.6} but {:.6} at cett {:.6}",
                w[0].1, w[0].0, w[1].1, w[1].0
            ));
        }
    }

    Ok(CettSearchResult {
        cett: 0.5 * (lo + hi),
        mean_ppl_ratio: last_ratio,
        iterations: trace.len(),
        eps,
        trace,
        warnings,
    })
}

/// The real probe: one checkpoint, a validation stream, and a calibration
/// profile reused across all bisection midpoints.
pub struct CheckpointProbe<'a> {
    ckpt: &'a Checkpoint,
    valid: &'a [u8],
    calib: CettCalibrator,
    dense: Option<f64>,
}

impl<'a> CheckpointProbe<'a> {
    /// `calib_tokens` defaults to a prefix of the validation stream; see
    /// [`CettCalibrator::build`].
    pub fn new(ckpt: &'a Checkpoint, valid: &'a [u8], calib_tokens: &[u8]) -> Result<Self> {
        Ok(CheckpointProbe {
            ckpt,
            valid,
            calib: CettCalibrator::build(ckpt, calib_tokens)?,
            dense: None,
        })
    }

    pub fn calibrator(&self) -> &CettCalibrator {
        &self.calib
    }
}

impl PplProbe for CheckpointProbe<'_> {
    fn dense_loss(&mut self) -> Result<f64> {
        if let Some(d) = self.dense {
            return Ok(d);
        }
        let d = evaluate_ppl(self.ckpt, self.valid, None)?.mean_nll;
        self.dense = Some(d);
        Ok(d)
    }

    fn sparse_loss(&mut self, cett: f64) -> Result<f64> {
        let thresholds = self.calib.thresholds_for(cett)?;
        let rule = MaskRule::NeuronNorm(thresholds);
        Ok(evaluate_ppl(self.ckpt, self.valid, Some(&rule))?.mean_nll)
    }
}
