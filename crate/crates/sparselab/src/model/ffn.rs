//! Gated FFN forward pass and its neuron-level decomposition.
//!
//! The block computes `W_out (sigma(W_gate x) ⊙ (W_in x))`. Splitting the
//! parameter matrices along the intermediate dimension yields `d_f` neurons
//! whose outputs `n_i = W_out[:,i] * (s_i * (W_in[i,:] x))` sum to the block
//! output, which is what makes skipping weakly-contributed neurons a
//! well-defined approximation.

use crate::error::{Error, Result};
use crate::mat::Matrix;
use crate::model::Activation;

/// Owned weights of one gated FFN block.
#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub w_gate: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

impl FfnWeights {
    pub fn new(w_gate: Matrix, w_in: Matrix, w_out: Matrix) -> Result<Self> {
        let (d_f, d_h) = (w_gate.rows, w_gate.cols);
        if w_in.rows != d_f || w_in.cols != d_h || w_out.rows != d_h || w_out.cols != d_f {
            return Err(Error::ShapeMismatch {
                op: "FfnWeights::new",
                expected: format!("gate/in {d_f}x{d_h}, out {d_h}x{d_f}"),
                got: format!(
                    "gate {}x{}, in {}x{}, out {}x{}",
                    w_gate.rows, w_gate.cols, w_in.rows, w_in.cols, w_out.rows, w_out.cols
                ),
            });
        }
        for m in [&w_gate, &w_in, &w_out] {
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("FFN weights must be finite".into()));
            }
        }
        Ok(FfnWeights { w_gate, w_in, w_out })
    }

    pub fn view(&self) -> FfnRef<'_> {
        FfnRef {
            d_h: self.w_gate.cols,
            d_f: self.w_gate.rows,
            w_gate: &self.w_gate.data,
            w_in: &self.w_in.data,
            w_out: &self.w_out.data,
        }
    }
}

/// Borrowed view of one FFN block's weights (row-major slices).
#[derive(Debug, Clone, Copy)]
pub struct FfnRef<'a> {
    pub d_h: usize,
    pub d_f: usize,
    /// [d_f x d_h]
    pub w_gate: &'a [f32],
    /// [d_f x d_h]
    pub w_in: &'a [f32],
    /// [d_h x d_f]
    pub w_out: &'a [f32],
}

impl<'a> FfnRef<'a> {
    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.d_h {
            return Err(Error::ShapeMismatch {
                op: "ffn input",
                expected: format!("{}", self.d_h),
                got: format!("{}", x.len()),
            });
        }
        Ok(())
    }

    #[inline]
    fn gate_row(&self, i: usize) -> &'a [f32] {
        &self.w_gate[i * self.d_h..(i + 1) * self.d_h]
    }

    #[inline]
    fn in_row(&self, i: usize) -> &'a [f32] {
        &self.w_in[i * self.d_h..(i + 1) * self.d_h]
    }
}

/// Per-neuron coefficients `h_i = s_i * (W_in[i,:] x)` plus the raw
/// activations; the shared first half of every FFN entry point.
pub(crate) fn gate_coeffs(x: &[f32], w: FfnRef<'_>, act: Activation, s: &mut [f32], h: &mut [f32]) {
    for i in 0..w.d_f {
        let g = crate::mat::dot(w.gate_row(i), x);
        let si = act.apply(g);
        s[i] = si;
        h[i] = si * crate::mat::dot(w.in_row(i), x);
    }
}

/// `y = W_out h`; the second half of every FFN entry point.
pub(crate) fn project_out(w: FfnRef<'_>, h: &[f32], y: &mut [f32]) {
    for (r, out) in y.iter_mut().enumerate() {
        *out = crate::mat::dot(&w.w_out[r * w.d_f..(r + 1) * w.d_f], h);
    }
}

/// Dense gated-FFN forward: `W_out (sigma(W_gate x) ⊙ (W_in x))`.
pub fn ffn_forward(x: &[f32], w: FfnRef<'_>, act: Activation) -> Result<Vec<f32>> {
    w.check_input(x)?;
    let mut s = vec![0.0f32; w.d_f];
    let mut h = vec![0.0f32; w.d_f];
    gate_coeffs(x, w, act, &mut s, &mut h);
    let mut y = vec![0.0f32; w.d_h];
    project_out(w, &h, &mut y);
    Ok(y)
}

/// Output of the `i`-th neuron alone: `W_out[:,i] * (s_i * (W_in[i,:] x))`.
pub fn neuron_output(i: usize, x: &[f32], w: FfnRef<'_>, act: Activation) -> Result<Vec<f32>> {
    w.check_input(x)?;
    if i >= w.d_f {
        return Err(Error::IndexOutOfRange { index: i, len: w.d_f });
    }
    let s_i = act.apply(crate::mat::dot(w.gate_row(i), x));
    let h_i = s_i * crate::mat::dot(w.in_row(i), x);
    let mut n = vec![0.0f32; w.d_h];
    for (r, out) in n.iter_mut().enumerate() {
        *out = w.w_out[r * w.d_f + i] * h_i;
    }
    Ok(n)
}

/// FFN forward with the neurons in `weak` (sorted or not) skipped.
///
/// Implemented by zeroing the skipped coefficients before the output
/// projection, so an empty set reproduces the dense result bit for bit and
/// the complement identity `dense - masked = sum of skipped neurons` holds
/// to rounding.
pub fn ffn_forward_masked(
    x: &[f32],
    w: FfnRef<'_>,
    act: Activation,
    weak: &[usize],
) -> Result<Vec<f32>> {
    w.check_input(x)?;
    let mut s = vec![0.0f32; w.d_f];
    let mut h = vec![0.0f32; w.d_f];
    gate_coeffs(x, w, act, &mut s, &mut h);
    for &i in weak {
        if i >= w.d_f {
            return Err(Error::IndexOutOfRange { index: i, len: w.d_f });
        }
        h[i] = 0.0;
    }
    let mut y = vec![0.0f32; w.d_h];
    project_out(w, &h, &mut y);
    Ok(y)
}

/// Activation value, inner projection, and norm factorization for one neuron.
#[derive(Debug, Clone, Copy)]
pub struct NeuronRecord {
    /// Gate activation s_i.
    pub s: f32,
    /// Inner projection `W_in[i,:] x`.
    pub inner: f32,
    /// Precomputed L2 norm of the output column `W_out[:,i]`.
    pub out_norm: f32,
    /// `|s_i| * |inner_i| * out_norm_i`, the exact L2 norm of n_i.
    pub n_norm: f32,
}

/// L2 norms of the `d_f` columns of `W_out`; computed once per layer and
/// reused by every norm-based recognition pass.
pub fn ffn_col_norms(w: FfnRef<'_>) -> Vec<f32> {
    let mut norms = vec![0.0f64; w.d_f];
    for r in 0..w.d_h {
        let row = &w.w_out[r * w.d_f..(r + 1) * w.d_f];
        for (n, &v) in norms.iter_mut().zip(row.iter()) {
            *n += (v as f64) * (v as f64);
        }
    }
    norms.into_iter().map(|n| n.sqrt() as f32).collect()
}

/// Per-neuron records for one input token. `col_norms` must come from
/// [`ffn_col_norms`] on the same weights.
pub fn neuron_records(
    x: &[f32],
    w: FfnRef<'_>,
    act: Activation,
    col_norms: &[f32],
) -> Result<Vec<NeuronRecord>> {
    w.check_input(x)?;
    if col_norms.len() != w.d_f {
        return Err(Error::ShapeMismatch {
            op: "neuron_records col_norms",
            expected: format!("{}", w.d_f),
            got: format!("{}", col_norms.len()),
        });
    }
    let mut records = Vec::with_capacity(w.d_f);
    for i in 0..w.d_f {
        let s = act.apply(crate::mat::dot(w.gate_row(i), x));
        let inner = crate::mat::dot(w.in_row(i), x);
        let out_norm = col_norms[i];
        records.push(NeuronRecord {
            s,
            inner,
            out_norm,
            n_norm: s.abs() * inner.abs() * out_norm,
        });
    }
    Ok(records)
}

#[cfg(test)]
pub(crate) fn random_ffn(d_h: usize, d_f: usize, seed: u64) -> FfnWeights {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut mk = |rows: usize, cols: usize| {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    FfnWeights::new(mk(d_f, d_h), mk(d_f, d_h), mk(d_h, d_f)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::{l2_norm, Matrix};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn scalar_ffn(gate: f32, win: f32, wout: f32) -> FfnWeights {
        FfnWeights::new(
            Matrix::from_vec(1, 1, vec![gate]).unwrap(),
            Matrix::from_vec(1, 1, vec![win]).unwrap(),
            Matrix::from_vec(1, 1, vec![wout]).unwrap(),
        )
        .unwrap()
    }

    /// Dense FFN with d_h=2, d_f=2 whose neuron outputs are (3,0) and (0,4).
    pub(crate) fn two_neuron_case() -> (FfnWeights, Vec<f32>) {
        let w = FfnWeights::new(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 4.0]).unwrap(),
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        (w, vec![1.0, 1.0])
    }

    #[test]
    fn zero_input_gives_zero_output() {
        for act in [Activation::ReLU, Activation::SiLU] {
            let w = random_ffn(4, 10, 7);
            let y = ffn_forward(&[0.0; 4], w.view(), act).unwrap();
            assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scalar_relu_case() {
        let w = scalar_ffn(2.0, 3.0, 0.5);
        let y = ffn_forward(&[1.0], w.view(), Activation::ReLU).unwrap();
        assert_relative_eq!(y[0], 3.0, max_relative = 1e-6);
        let n = neuron_output(0, &[1.0], w.view(), Activation::ReLU).unwrap();
        assert_relative_eq!(n[0], 3.0, max_relative = 1e-6);
    }

    #[test]
    fn scalar_silu_case() {
        let w = scalar_ffn(2.0, 3.0, 0.5);
        let y = ffn_forward(&[1.0], w.view(), Activation::SiLU).unwrap();
        // s = 2*sigmoid(2) = 1.761594, y = 0.5 * s * 3
        assert_relative_eq!(y[0], 2.642391, max_relative = 1e-5);
    }

    #[test]
    fn zero_gate_kills_neuron() {
        let w = scalar_ffn(-5.0, 3.0, 0.5);
        let n = neuron_output(0, &[1.0], w.view(), Activation::ReLU).unwrap();
        assert_eq!(n, vec![0.0]);
    }

    #[test]
    fn neuron_sum_reconstructs_forward() {
        for (seed, act) in [(1u64, Activation::ReLU), (2, Activation::SiLU)] {
            let w = random_ffn(4, 4, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
            let x: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dense = ffn_forward(&x, w.view(), act).unwrap();
            let mut sum = vec![0.0f32; 4];
            for i in 0..4 {
                let n = neuron_output(i, &x, w.view(), act).unwrap();
                for (a, b) in sum.iter_mut().zip(n) {
                    *a += b;
                }
            }
            let num: f64 = dense
                .iter()
                .zip(&sum)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let den = l2_norm(&dense).max(1e-12);
            assert!(num / den < 1e-6, "reconstruction error {}", num / den);
        }
    }

    #[test]
    fn masked_empty_equals_dense_bitwise() {
        let w = random_ffn(6, 15, 3);
        let x: Vec<f32> = (0..6).map(|i| (i as f32) * 0.3 - 1.0).collect();
        let dense = ffn_forward(&x, w.view(), Activation::SiLU).unwrap();
        let masked = ffn_forward_masked(&x, w.view(), Activation::SiLU, &[]).unwrap();
        assert_eq!(dense, masked);
    }

    #[test]
    fn masked_all_is_zero() {
        let w = random_ffn(6, 15, 4);
        let x = vec![0.5f32; 6];
        let all: Vec<usize> = (0..15).collect();
        let masked = ffn_forward_masked(&x, w.view(), Activation::ReLU, &all).unwrap();
        assert!(masked.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_two_neuron_case() {
        let (w, x) = two_neuron_case();
        let y = ffn_forward_masked(&x, w.view(), Activation::ReLU, &[0]).unwrap();
        assert_eq!(y, vec![0.0, 4.0]);
    }

    #[test]
    fn masked_complement_identity() {
        let w = random_ffn(8, 20, 9);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for act in [Activation::ReLU, Activation::SiLU] {
            let x: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let weak: Vec<usize> = (0..20).filter(|_| rng.random_bool(0.4)).collect();
            let dense = ffn_forward(&x, w.view(), act).unwrap();
            let masked = ffn_forward_masked(&x, w.view(), act, &weak).unwrap();
            let mut skipped = vec![0.0f32; 8];
            for &i in &weak {
                for (a, b) in skipped.iter_mut().zip(neuron_output(i, &x, w.view(), act).unwrap()) {
                    *a += b;
                }
            }
            for r in 0..8 {
                let lhs = dense[r] - masked[r];
                assert!((lhs - skipped[r]).abs() <= 1e-5 * dense[r].abs().max(1.0));
            }
        }
    }

    #[test]
    fn relu_zero_set_mask_is_exact() {
        let w = random_ffn(8, 20, 11);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = vec![0.0f32; 20];
        let mut h = vec![0.0f32; 20];
        gate_coeffs(&x, w.view(), Activation::ReLU, &mut s, &mut h);
        let zeros: Vec<usize> = (0..20).filter(|&i| s[i] == 0.0).collect();
        assert!(!zeros.is_empty(), "seed should yield some inactive neurons");
        let dense = ffn_forward(&x, w.view(), Activation::ReLU).unwrap();
        let masked = ffn_forward_masked(&x, w.view(), Activation::ReLU, &zeros).unwrap();
        assert_eq!(dense, masked);
    }

    #[test]
    fn neuron_record_factorization() {
        let w = random_ffn(5, 12, 21);
        let x: Vec<f32> = (0..5).map(|i| 0.2 * i as f32 - 0.5).collect();
        let norms = ffn_col_norms(w.view());
        let recs = neuron_records(&x, w.view(), Activation::SiLU, &norms).unwrap();
        for (i, rec) in recs.iter().enumerate() {
            let n = neuron_output(i, &x, w.view(), Activation::SiLU).unwrap();
            let direct = l2_norm(&n);
            assert!(
                (rec.n_norm as f64 - direct).abs() <= 1e-6 * direct.max(1e-12),
                "neuron {i}: factorized {} direct {}",
                rec.n_norm,
                direct
            );
        }
    }

    #[test]
    fn shape_and_index_errors() {
        let w = random_ffn(4, 10, 5);
        assert!(ffn_forward(&[0.0; 3], w.view(), Activation::ReLU).is_err());
        assert!(neuron_output(10, &[0.0; 4], w.view(), Activation::ReLU).is_err());
        assert!(ffn_forward_masked(&[0.0; 4], w.view(), Activation::ReLU, &[10]).is_err());
    }
}
