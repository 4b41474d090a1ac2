//! Sparse FFN execution kernels, their multiply-add cost model, and a
//! wall-clock benchmark of the win from skipping weakly-contributed
//! neurons.
//!
//! The output matrix is stored column-major so each neuron's output column
//! is contiguous: skipping a neuron skips a contiguous block of memory.
//! The dense baseline accumulates over the same columns, so the two paths
//! differ only in which neurons they touch.

use crate::error::{Error, Result};
use crate::mat::{dot, l2_norm};
use crate::model::{Activation, FfnWeights};
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExecMode {
    /// Decide from |s_i| right after the gate projection: skips the W_in
    /// row and the W_out column of every weak neuron.
    GateThreshold,
    /// Decide from ||n_i||: needs gate and in projections, skips only the
    /// W_out column.
    NormThreshold,
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExecMode::GateThreshold => write!(f, "gate"),
            ExecMode::NormThreshold => write!(f, "norm"),
        }
    }
}

/// Multiply-add counts of one FFN token at activation ratio `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopCount {
    pub dense: f64,
    pub sparse: f64,
}

/// Dense cost is the three full projections; the sparse cost always pays
/// for the projections needed to decide, plus the skipped-aware remainder.
pub fn flop_count(d_h: usize, d_f: usize, activation_ratio: f64, mode: ExecMode) -> Result<FlopCount> {
    if !(0.0..=1.0).contains(&activation_ratio) {
        return Err(Error::Config(format!(
            "activation ratio {activation_ratio} outside [0, 1]"
        )));
    }
    let base = (d_h * d_f) as f64;
    let sparse = match mode {
        ExecMode::GateThreshold => base * (1.0 + 2.0 * activation_ratio),
        ExecMode::NormThreshold => base * (2.0 + activation_ratio),
    };
    Ok(FlopCount {
        dense: 3.0 * base,
        sparse,
    })
}

/// One FFN layer packed for sparse execution; `w_out` transposed to
/// column-major at construction.
pub struct SparseKernel {
    pub d_h: usize,
    pub d_f: usize,
    activation: Activation,
    w_gate: Vec<f32>,
    w_in: Vec<f32>,
    /// Column-major: neuron i occupies `[i*d_h, (i+1)*d_h)`.
    w_out_cols: Vec<f32>,
    col_norms: Vec<f32>,
}

impl SparseKernel {
    pub fn new(w: &FfnWeights, activation: Activation) -> Self {
        let d_f = w.w_gate.rows;
        let d_h = w.w_gate.cols;
        let mut w_out_cols = vec![0.0f32; d_h * d_f];
        for r in 0..d_h {
            for i in 0..d_f {
                w_out_cols[i * d_h + r] = w.w_out.data[r * d_f + i];
            }
        }
        let col_norms = (0..d_f)
            .map(|i| l2_norm(&w_out_cols[i * d_h..(i + 1) * d_h]) as f32)
            .collect();
        SparseKernel {
            d_h,
            d_f,
            activation,
            w_gate: w.w_gate.data.clone(),
            w_in: w.w_in.data.clone(),
            w_out_cols,
            col_norms,
        }
    }

    /// Dense baseline over the same column-major layout.
    pub fn dense_ffn(&self, x: &[f32], y: &mut [f32]) {
        y.fill(0.0);
        for i in 0..self.d_f {
            let s = self
                .activation
                .apply(dot(&self.w_gate[i * self.d_h..(i + 1) * self.d_h], x));
            let h = s * dot(&self.w_in[i * self.d_h..(i + 1) * self.d_h], x);
            let col = &self.w_out_cols[i * self.d_h..(i + 1) * self.d_h];
            for (o, &c) in y.iter_mut().zip(col.iter()) {
                *o += h * c;
            }
        }
    }

    /// Sparse execution at threshold `eps`; returns the active neuron count.
    ///
    /// The output equals the masked dense computation with the weak set the
    /// mode induces: gate mode skips `|s_i| <= eps`, norm mode skips
    /// `||n_i|| < eps`.
    pub fn sparse_ffn(&self, x: &[f32], eps: f32, mode: ExecMode, y: &mut [f32]) -> usize {
        y.fill(0.0);
        let mut active = 0usize;
        match mode {
            ExecMode::GateThreshold => {
                for i in 0..self.d_f {
                    let s = self
                        .activation
                        .apply(dot(&self.w_gate[i * self.d_h..(i + 1) * self.d_h], x));
                    if s.abs() <= eps {
                        continue;
                    }
                    active += 1;
                    let h = s * dot(&self.w_in[i * self.d_h..(i + 1) * self.d_h], x);
                    let col = &self.w_out_cols[i * self.d_h..(i + 1) * self.d_h];
                    for (o, &c) in y.iter_mut().zip(col.iter()) {
                        *o += h * c;
                    }
                }
            }
            ExecMode::NormThreshold => {
                for i in 0..self.d_f {
                    let s = self
                        .activation
                        .apply(dot(&self.w_gate[i * self.d_h..(i + 1) * self.d_h], x));
                    let h = s * dot(&self.w_in[i * self.d_h..(i + 1) * self.d_h], x);
                    if h.abs() * self.col_norms[i] < eps {
                        continue;
                    }
                    active += 1;
                    let col = &self.w_out_cols[i * self.d_h..(i + 1) * self.d_h];
                    for (o, &c) in y.iter_mut().zip(col.iter()) {
                        *o += h * c;
                    }
                }
            }
        }
        active
    }

    /// [`Self::sparse_ffn`] with an explicit multiply-add counter; the slow
    /// instrumented twin used to pin the cost model.
    pub fn sparse_ffn_counted(
        &self,
        x: &[f32],
        eps: f32,
        mode: ExecMode,
        y: &mut [f32],
    ) -> (usize, u64) {
        y.fill(0.0);
        let mut active = 0usize;
        let mut macs = 0u64;
        let count_dot = |w: &[f32], x: &[f32], macs: &mut u64| -> f32 {
            let mut acc = 0.0f32;
            for (a, b) in w.iter().zip(x.iter()) {
                acc += a * b;
                *macs += 1;
            }
            acc
        };
        for i in 0..self.d_f {
            let s = self.activation.apply(count_dot(
                &self.w_gate[i * self.d_h..(i + 1) * self.d_h],
                x,
                &mut macs,
            ));
            let h = match mode {
                ExecMode::GateThreshold => {
                    if s.abs() <= eps {
                        continue;
                    }
                    s * count_dot(&self.w_in[i * self.d_h..(i + 1) * self.d_h], x, &mut macs)
                }
                ExecMode::NormThreshold => {
                    let h =
                        s * count_dot(&self.w_in[i * self.d_h..(i + 1) * self.d_h], x, &mut macs);
                    if h.abs() * self.col_norms[i] < eps {
                        continue;
                    }
                    h
                }
            };
            active += 1;
            let col = &self.w_out_cols[i * self.d_h..(i + 1) * self.d_h];
            for (o, &c) in y.iter_mut().zip(col.iter()) {
                *o += h * c;
                macs += 1;
            }
        }
        (active, macs)
    }

    /// Threshold whose induced weak set leaves about `ratio * d_f` neurons
    /// active, from pooled decision statistics over sample inputs.
    pub fn threshold_for_ratio(&self, xs: &[Vec<f32>], ratio: f64, mode: ExecMode) -> f32 {
        let mut stats = Vec::with_capacity(xs.len() * self.d_f);
        for x in xs {
            for i in 0..self.d_f {
                let s = self
                    .activation
                    .apply(dot(&self.w_gate[i * self.d_h..(i + 1) * self.d_h], x));
                match mode {
                    ExecMode::GateThreshold => stats.push(s.abs()),
                    ExecMode::NormThreshold => {
                        let h = s * dot(&self.w_in[i * self.d_h..(i + 1) * self.d_h], x);
                        stats.push(h.abs() * self.col_norms[i]);
                    }
                }
            }
        }
        stats.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let cut = ((1.0 - ratio) * stats.len() as f64) as usize;
        stats[cut.min(stats.len() - 1)]
    }
}

/// One row of the benchmark output.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub d_h: usize,
    pub d_f: usize,
    pub sparsity_ratio: f64,
    pub realized_activation_ratio: f64,
    pub mode: ExecMode,
    pub tokens: usize,
    pub threads: usize,
    pub ns_per_token_dense: f64,
    pub ns_per_token_sparse: f64,
    pub speedup: f64,
    pub flops_dense: f64,
    pub flops_sparse: f64,
    pub max_rel_error: f64,
}

/// Time dense against sparse execution over a sparsity grid.
///
/// Each grid entry calibrates its threshold on warmup inputs, times
/// `tokens` inputs `reps` times for both paths, and reports the median.
/// The error column checks the sparse output against an independently
/// masked dense reference on a sample of tokens.
pub fn bench(
    d_h: usize,
    d_f: usize,
    sparsity_grid: &[f64],
    mode: ExecMode,
    tokens: usize,
    threads: usize,
    seed: u64,
) -> Result<Vec<BenchReport>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut mk = |rows: usize, cols: usize, scale: f32| {
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        crate::mat::Matrix::from_vec(rows, cols, data).unwrap()
    };
    let scale = (1.0 / (d_h as f32).sqrt()) * 1.8;
    let weights = FfnWeights::new(
        mk(d_f, d_h, scale),
        mk(d_f, d_h, scale),
        mk(d_h, d_f, scale),
    )?;
    let kernel = SparseKernel::new(&weights, Activation::SiLU);
    let xs: Vec<Vec<f32>> = (0..tokens)
        .map(|_| (0..d_h).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let mut reports = Vec::new();
    for &sparsity in sparsity_grid {
        if !(0.0..=1.0).contains(&sparsity) {
            return Err(Error::Config(format!("sparsity {sparsity} outside [0, 1]")));
        }
        let ratio = 1.0 - sparsity;
        let eps = if sparsity == 0.0 {
            // keep everything; gate mode still skips exact zeros, which for
            // SiLU inputs essentially never occur
            -1.0
        } else {
            kernel.threshold_for_ratio(&xs[..tokens.min(32)], ratio, mode)
        };

        let mut y = vec![0.0f32; d_h];
        // warmup plus correctness sample
        let mut max_rel_error = 0.0f64;
        let mut active_sum = 0usize;
        let mut checked = 0usize;
        for x in xs.iter().take(16) {
            let active = kernel.sparse_ffn(x, eps, mode, &mut y);
            active_sum += active;
            checked += 1;
            let weak = induced_weak_set(&kernel, x, eps, mode);
            let reference =
                crate::model::ffn_forward_masked(x, weights.view(), Activation::SiLU, &weak)?;
            let num: f64 = y
                .iter()
                .zip(reference.iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let den = l2_norm(&reference).max(1e-12);
            max_rel_error = max_rel_error.max(num / den);
        }

        // one untimed pass warms caches
        for x in xs.iter().take(64) {
            kernel.dense_ffn(x, &mut y);
        }
        let dense_ns = median_ns_per_token(&kernel, &xs, eps, mode, false, threads);
        let sparse_ns = median_ns_per_token(&kernel, &xs, eps, mode, true, threads);

        let realized = active_sum as f64 / (checked * d_f) as f64;
        let flops = flop_count(d_h, d_f, realized, mode)?;
        reports.push(BenchReport {
            d_h,
            d_f,
            sparsity_ratio: sparsity,
            realized_activation_ratio: realized,
            mode,
            tokens,
            threads,
            ns_per_token_dense: dense_ns,
            ns_per_token_sparse: sparse_ns,
            speedup: dense_ns / sparse_ns,
            flops_dense: flops.dense,
            flops_sparse: flops.sparse,
            max_rel_error,
        });
    }
    Ok(reports)
}

/// Median-of-5 nanoseconds per token of one execution path.
fn median_ns_per_token(
    kernel: &SparseKernel,
    xs: &[Vec<f32>],
    eps: f32,
    mode: ExecMode,
    sparse: bool,
    threads: usize,
) -> f64 {
    let d_h = kernel.d_h;
    let mut runs: Vec<f64> = (0..5)
        .map(|_| {
            if threads <= 1 {
                let mut y = vec![0.0f32; d_h];
                let t0 = Instant::now();
                for x in xs {
                    if sparse {
                        kernel.sparse_ffn(x, eps, mode, &mut y);
                    } else {
                        kernel.dense_ffn(x, &mut y);
                    }
                }
                std::hint::black_box(&y);
                t0.elapsed().as_nanos() as f64 / xs.len() as f64
            } else {
                // wall-clock over equal shards; every thread runs the same
                // kernel on its own slice and output buffer
                let t0 = Instant::now();
                std::thread::scope(|scope| {
                    for chunk in xs.chunks(xs.len().div_ceil(threads)) {
                        scope.spawn(move || {
                            let mut y = vec![0.0f32; d_h];
                            for x in chunk {
                                if sparse {
                                    kernel.sparse_ffn(x, eps, mode, &mut y);
                                } else {
                                    kernel.dense_ffn(x, &mut y);
                                }
                            }
                            std::hint::black_box(&y);
                        });
                    }
                });
                t0.elapsed().as_nanos() as f64 / xs.len() as f64
            }
        })
        .collect();
    runs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    runs[runs.len() / 2]
}

/// The weak set the kernel's decision rule induces on `x`; shared by the
/// equivalence tests and the benchmark's correctness column.
pub fn induced_weak_set(kernel: &SparseKernel, x: &[f32], eps: f32, mode: ExecMode) -> Vec<usize> {
    let mut weak = Vec::new();
    for i in 0..kernel.d_f {
        let s = kernel
            .activation
            .apply(dot(&kernel.w_gate[i * kernel.d_h..(i + 1) * kernel.d_h], x));
        let skip = match mode {
            ExecMode::GateThreshold => s.abs() <= eps,
            ExecMode::NormThreshold => {
                let h = s * dot(&kernel.w_in[i * kernel.d_h..(i + 1) * kernel.d_h], x);
                h.abs() * kernel.col_norms[i] < eps
            }
        };
        if skip {
            weak.push(i);
        }
    }
    weak
}
