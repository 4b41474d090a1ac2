//! Weak-neuron recognition and sparsity measurement.
//!
//! Four rules decide which FFN neurons contribute weakly to a token:
//! the ReLU zero threshold, layer-wise top-k on |s_i|, a global magnitude
//! threshold on |s_i| (FAT), and a per-layer threshold on the neuron output
//! norm ||n_i|| calibrated so the relative truncation error (CETT) of each
//! layer meets a target. The activation ratio of a model on a dataset is
//! the mean kept fraction |D^c|/d_f over all (token, layer) pairs.

mod cett;
mod measure;
mod search;

pub use cett::{calibrate_layer_threshold, CettCalibrator, LayerCalib};
pub use measure::{
    measure_activation_ratio, stabilized_series, MeasureOptions, MethodSpec, SeriesPoint,
    SparsityReport, StabilizedSeries,
};
pub use search::{
    search_cett_hyperparameter, CettSearchResult, CheckpointProbe, PplProbe, SearchStep,
};

use crate::error::{Error, Result};
use crate::mat::l2_norm;
use crate::model::ffn::{gate_coeffs, project_out, FfnRef};
use crate::model::Activation;
use serde::{Deserialize, Serialize};

/// Tokens whose dense FFN output norm falls below this are excluded from
/// CETT averaging and counted as degenerate.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Which recognition rule produced a weak set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodKind {
    /// Zero threshold on ReLU activations.
    ZeroReLU,
    /// Keep the k strongest |s_i| per layer.
    TopK,
    /// Global threshold on |s_i|.
    Fat,
    /// Per-layer threshold on ||n_i|| meeting a CETT target.
    Cett,
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MethodKind::ZeroReLU => write!(f, "zero"),
            MethodKind::TopK => write!(f, "topk"),
            MethodKind::Fat => write!(f, "fat"),
            MethodKind::Cett => write!(f, "cett"),
        }
    }
}

/// Index set D of weakly-contributed neurons for one (token, layer), with
/// the rule and parameter that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakSet {
    pub layer: usize,
    pub token_position: usize,
    /// Sorted, unique neuron indices.
    pub indices: Vec<usize>,
    pub method: MethodKind,
    /// k, epsilon, or the CETT target, depending on the method.
    pub param: f64,
}

impl WeakSet {
    pub fn located(mut self, layer: usize, token_position: usize) -> Self {
        self.layer = layer;
        self.token_position = token_position;
        self
    }

    fn from_indices(indices: Vec<usize>, method: MethodKind, param: f64) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        WeakSet {
            layer: 0,
            token_position: 0,
            indices,
            method,
            param,
        }
    }
}

/// D = {i : s_i = 0}. Only defined for ReLU models.
pub fn recognize_zero(activation: Activation, s: &[f32]) -> Result<WeakSet> {
    if activation != Activation::ReLU {
        return Err(Error::Config(
            "zero-threshold recognition requires a ReLU model".into(),
        ));
    }
    let indices = (0..s.len()).filter(|&i| s[i] == 0.0).collect();
    Ok(WeakSet::from_indices(indices, MethodKind::ZeroReLU, 0.0))
}

/// Complement of the k largest |s_i|; ties keep the lower index active.
pub fn recognize_topk(s: &[f32], k: usize) -> Result<WeakSet> {
    if k > s.len() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: s.len(),
        });
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        s[b].abs()
            .partial_cmp(&s[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = order[k..].to_vec();
    indices.sort_unstable();
    Ok(WeakSet::from_indices(indices, MethodKind::TopK, k as f64))
}

/// D = {i : |s_i| <= eps}. The boundary is inclusive so that eps = 0
/// degenerates to the ReLU zero rule; for continuous activations the two
/// conventions differ only on a measure-zero set.
pub fn recognize_fat(s: &[f32], eps: f32) -> Result<WeakSet> {
    if eps < 0.0 {
        return Err(Error::Config("FAT threshold must be non-negative".into()));
    }
    let indices = (0..s.len()).filter(|&i| s[i].abs() <= eps).collect();
    Ok(WeakSet::from_indices(indices, MethodKind::Fat, eps as f64))
}

/// D = {i : ||n_i|| < eps} over precomputed neuron output norms.
pub fn recognize_cett(n_norms: &[f32], eps: f32) -> Result<WeakSet> {
    if eps < 0.0 {
        return Err(Error::Config("norm threshold must be non-negative".into()));
    }
    let indices = (0..n_norms.len()).filter(|&i| n_norms[i] < eps).collect();
    Ok(WeakSet::from_indices(indices, MethodKind::Cett, eps as f64))
}

/// Relative L2 error of skipping the neurons in `weak`:
/// `||sum_{i in D} n_i|| / ||FFN(x)||`.
///
/// Returns `Ok(None)` when the dense output norm is below [`DENOM_FLOOR`];
/// such tokens are skipped and counted by the measurement layer.
pub fn compute_cett(
    x: &[f32],
    w: FfnRef<'_>,
    activation: Activation,
    weak: &WeakSet,
) -> Result<Option<f64>> {
    if let Some(&bad) = weak.indices.iter().find(|&&i| i >= w.d_f) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: w.d_f,
        });
    }
    let mut s = vec![0.0f32; w.d_f];
    let mut h = vec![0.0f32; w.d_f];
    gate_coeffs(x, w, activation, &mut s, &mut h);
    let mut y = vec![0.0f32; w.d_h];
    project_out(w, &h, &mut y);
    let denom = l2_norm(&y);
    if denom < DENOM_FLOOR {
        return Ok(None);
    }
    // keep only the weak coefficients, then reuse the same projection
    let mut h_weak = vec![0.0f32; w.d_f];
    for &i in &weak.indices {
        h_weak[i] = h[i];
    }
    project_out(w, &h_weak, &mut y);
    Ok(Some(l2_norm(&y) / denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Matrix;
    use crate::model::ffn::random_ffn;
    use crate::model::FfnWeights;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_rule_definition() {
        let d = recognize_zero(Activation::ReLU, &[0.5, 0.0, 0.1, 0.0]).unwrap();
        assert_eq!(d.indices, vec![1, 3]);
        assert_eq!(d.method, MethodKind::ZeroReLU);
        let none = recognize_zero(Activation::ReLU, &[0.5, 0.2]).unwrap();
        assert!(none.indices.is_empty());
        assert!(recognize_zero(Activation::SiLU, &[0.0]).is_err());
    }

    #[test]
    fn zero_rule_near_half_at_init() {
        // symmetric pre-activations at initialization leave about half the
        // ReLU gates inactive
        let d_h = 16;
        let d_f = 40;
        let w = random_ffn(d_h, d_f, 40);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let mut weak = 0usize;
        let mut total = 0usize;
        let mut s = vec![0.0f32; d_f];
        let mut h = vec![0.0f32; d_f];
        for _ in 0..10_000 {
            let x: Vec<f32> = (0..d_h).map(|_| rng.random_range(-1.0..1.0f32)).collect();
            gate_coeffs(&x, w.view(), Activation::ReLU, &mut s, &mut h);
            weak += recognize_zero(Activation::ReLU, &s).unwrap().indices.len();
            total += d_f;
        }
        let ratio = weak as f64 / total as f64;
        assert!((ratio - 0.5).abs() < 0.05, "zero fraction {ratio}");
    }

    #[test]
    fn topk_definition_and_bounds() {
        let s = [0.5f32, -0.9, 0.1, 0.0];
        let d = recognize_topk(&s, 2).unwrap();
        assert_eq!(d.indices, vec![2, 3]);
        assert!(recognize_topk(&s, 4).unwrap().indices.is_empty());
        assert_eq!(recognize_topk(&s, 0).unwrap().indices, vec![0, 1, 2, 3]);
        assert!(recognize_topk(&s, 5).is_err());
    }

    #[test]
    fn fat_definition() {
        let s = [0.5f32, -0.9, 0.1, 0.0];
        assert_eq!(recognize_fat(&s, 0.2).unwrap().indices, vec![2, 3]);
        assert_eq!(
            recognize_fat(&s, f32::INFINITY).unwrap().indices,
            vec![0, 1, 2, 3]
        );
        assert!(recognize_fat(&s, -0.1).is_err());
        // eps = 0 degenerates to the zero rule on ReLU outputs
        let relu_s = [0.3f32, 0.0, 0.7, 0.0];
        assert_eq!(
            recognize_fat(&relu_s, 0.0).unwrap().indices,
            recognize_zero(Activation::ReLU, &relu_s).unwrap().indices
        );
    }

    #[test]
    fn cett_rule_strictness_and_nesting() {
        assert!(recognize_cett(&[0.0, 1.0], 0.0).unwrap().indices.is_empty());
        assert_eq!(recognize_cett(&[3.0, 4.0], 3.5).unwrap().indices, vec![0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let norms: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..2.0f32)).collect();
        let grid: Vec<f32> = (0..50).map(|i| i as f32 * 0.045).collect();
        let mut prev: Vec<usize> = Vec::new();
        for eps in grid {
            let d = recognize_cett(&norms, eps).unwrap().indices;
            assert!(prev.iter().all(|i| d.contains(i)), "nesting violated at {eps}");
            prev = d;
        }
    }

    #[test]
    fn cett_value_golden_cases() {
        let (w, x) = two_neuron_case();
        let empty = WeakSet::from_indices(vec![], MethodKind::Cett, 0.0);
        assert_eq!(
            compute_cett(&x, w.view(), Activation::ReLU, &empty).unwrap(),
            Some(0.0)
        );
        let all = WeakSet::from_indices(vec![0, 1], MethodKind::Cett, 9.0);
        assert_eq!(
            compute_cett(&x, w.view(), Activation::ReLU, &all).unwrap(),
            Some(1.0)
        );
        let first = WeakSet::from_indices(vec![0], MethodKind::Cett, 3.5);
        let c = compute_cett(&x, w.view(), Activation::ReLU, &first)
            .unwrap()
            .unwrap();
        assert_relative_eq!(c, 0.6, max_relative = 1e-6);
    }

    #[test]
    fn cett_degenerate_denominator() {
        let w = FfnWeights::new(
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
        )
        .unwrap();
        let d = WeakSet::from_indices(vec![0], MethodKind::Cett, 1.0);
        assert_eq!(
            compute_cett(&[1.0, 1.0], w.view(), Activation::ReLU, &d).unwrap(),
            None
        );
    }

    /// FFN whose two neuron outputs are (3,0) and (0,4) on x = (1,1).
    fn two_neuron_case() -> (FfnWeights, Vec<f32>) {
        let w = FfnWeights::new(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 4.0]).unwrap(),
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        (w, vec![1.0, 1.0])
    }
}
