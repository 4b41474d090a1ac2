//! Activation-pattern analytics: per-neuron firing frequencies, per-token
//! mean activation ratios, cross-model comparison, and the combinatorial
//! size of the neuron-grouping space.

use crate::error::{Error, Result};
use crate::model::{forward_with_tap, Checkpoint, FfnTap, MaskRule};
use serde::{Deserialize, Serialize};

/// Firing statistics of one (checkpoint, dataset, mask) triple.
///
/// A neuron counts as activated on a token when the mask rule does not
/// place it in the weak set. Token ratios are layer-averaged per
/// occurrence, then averaged over occurrences.
#[derive(Debug, Clone, Serialize)]
pub struct ActivationStats {
    pub n_layers: usize,
    pub d_f: usize,
    /// Length `n_layers * d_f`: fraction of tokens each neuron fired on.
    pub per_neuron_frequency: Vec<f64>,
    /// Indexed by token id: summed per-occurrence activation ratios.
    token_ratio_sum: Vec<f64>,
    /// Indexed by token id: occurrence counts.
    pub token_counts: Vec<u64>,
    pub tokens_processed: u64,
}

impl ActivationStats {
    /// Mean over neurons; equals the sparsity module's aggregate
    /// activation ratio on the same inputs.
    pub fn mean_frequency(&self) -> f64 {
        self.per_neuron_frequency.iter().sum::<f64>() / self.per_neuron_frequency.len() as f64
    }

    /// Mean activation ratio of one token id, if it occurred.
    pub fn token_ratio(&self, token: usize) -> Option<f64> {
        (self.token_counts[token] > 0)
            .then(|| self.token_ratio_sum[token] / self.token_counts[token] as f64)
    }
}

struct StatsTap {
    n_layers: usize,
    d_f: usize,
    fired: Vec<u64>,
    tokens: u64,
    // per-position kept fractions of the current window, summed over layers
    window_kept: Vec<f64>,
}

impl FfnTap for StatsTap {
    fn ffn(&mut self, layer: usize, pos: usize, _x: &[f32], s: &[f32], _h: &[f32], weak: &[usize]) {
        if layer == 0 {
            self.tokens += 1;
        }
        let base = layer * self.d_f;
        let mut w = weak.iter().peekable();
        for i in 0..s.len() {
            if w.peek() == Some(&&i) {
                w.next();
            } else {
                self.fired[base + i] += 1;
            }
        }
        self.window_kept[pos] += (s.len() - weak.len()) as f64 / s.len() as f64;
    }
}

/// Stream `dataset` through `ckpt` under `rule` and count firing events.
pub fn collect_stats(ckpt: &Checkpoint, dataset: &[u8], rule: &MaskRule) -> Result<ActivationStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("analytics dataset"));
    }
    let cfg = &ckpt.config;
    let mut tap = StatsTap {
        n_layers: cfg.n_layers,
        d_f: cfg.d_f,
        fired: vec![0; cfg.n_layers * cfg.d_f],
        tokens: 0,
        window_kept: vec![0.0; cfg.max_seq_len],
    };
    let mut token_ratio_sum = vec![0.0f64; cfg.vocab_size];
    let mut token_counts = vec![0u64; cfg.vocab_size];
    let window = cfg.max_seq_len;
    let mut start = 0usize;
    while start < dataset.len() {
        let end = (start + window).min(dataset.len());
        let tokens = &dataset[start..end];
        tap.window_kept[..tokens.len()].fill(0.0);
        forward_with_tap(ckpt, tokens, Some(rule), Some(&mut tap))?;
        for (pos, &tok) in tokens.iter().enumerate() {
            token_ratio_sum[tok as usize] += tap.window_kept[pos] / cfg.n_layers as f64;
            token_counts[tok as usize] += 1;
        }
        start = end;
    }
    Ok(ActivationStats {
        n_layers: tap.n_layers,
        d_f: tap.d_f,
        per_neuron_frequency: tap
            .fired
            .iter()
            .map(|&f| f as f64 / tap.tokens as f64)
            .collect(),
        token_ratio_sum,
        token_counts,
        tokens_processed: tap.tokens,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    /// `bins + 1` uniform edges over [0, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn build(values: impl Iterator<Item = f64>, bins: usize) -> Histogram {
        let mut counts = vec![0u64; bins];
        for v in values {
            let idx = ((v * bins as f64) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Histogram {
            edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrequencyHistograms {
    pub aggregate: Histogram,
    /// (layer index, histogram) for the first, middle, and last layer.
    pub per_layer: Vec<(usize, Histogram)>,
}

/// Histograms of per-neuron activation frequencies: aggregate over all
/// layers plus separate views of the first, middle, and last layer.
pub fn frequency_histogram(
    ckpt: &Checkpoint,
    dataset: &[u8],
    rule: &MaskRule,
    bins: usize,
) -> Result<FrequencyHistograms> {
    let stats = collect_stats(ckpt, dataset, rule)?;
    Ok(histograms_from_stats(&stats, bins))
}

pub fn histograms_from_stats(stats: &ActivationStats, bins: usize) -> FrequencyHistograms {
    let n_layers = stats.n_layers;
    let d_f = stats.d_f;
    let mut layer_picks = vec![0usize, n_layers / 2, n_layers - 1];
    layer_picks.dedup();
    let per_layer = layer_picks
        .into_iter()
        .map(|l| {
            let slice = &stats.per_neuron_frequency[l * d_f..(l + 1) * d_f];
            (l, Histogram::build(slice.iter().cloned(), bins))
        })
        .collect();
    FrequencyHistograms {
        aggregate: Histogram::build(stats.per_neuron_frequency.iter().cloned(), bins),
        per_layer,
    }
}

/// Default occurrence floor for per-token statistics.
pub const MIN_OCCURRENCES: u64 = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenTable {
    /// (token id, occurrences, mean activation ratio), token-sorted.
    pub rows: Vec<(usize, u64, f64)>,
    /// Tokens dropped for falling under the occurrence floor.
    pub omitted: usize,
    pub min_occurrences: u64,
}

/// Per-token mean activation ratios over tokens meeting the occurrence
/// floor.
pub fn token_activation_table(stats: &ActivationStats, min_occurrences: u64) -> TokenTable {
    let mut rows = Vec::new();
    let mut omitted = 0usize;
    for token in 0..stats.token_counts.len() {
        let n = stats.token_counts[token];
        if n == 0 {
            continue;
        }
        if n < min_occurrences {
            omitted += 1;
            continue;
        }
        rows.push((token, n, stats.token_ratio(token).unwrap()));
    }
    TokenTable {
        rows,
        omitted,
        min_occurrences,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairwiseComparison {
    /// (token id, ratio under A, ratio under B).
    pub pairs: Vec<(usize, f64, f64)>,
    pub pearson_r: f64,
    pub mean_abs_diff: f64,
}

/// Join two token tables on token id and compare their activation ratios.
pub fn pairwise_compare(a: &TokenTable, b: &TokenTable) -> Result<PairwiseComparison> {
    let mut pairs = Vec::new();
    let mut bi = 0usize;
    for &(tok, _, ra) in &a.rows {
        while bi < b.rows.len() && b.rows[bi].0 < tok {
            bi += 1;
        }
        if bi < b.rows.len() && b.rows[bi].0 == tok {
            pairs.push((tok, ra, b.rows[bi].2));
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no shared tokens to compare"));
    }
    let n = pairs.len() as f64;
    let mean_abs_diff = pairs.iter().map(|(_, x, y)| (x - y).abs()).sum::<f64>() / n;
    let mx = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.2).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (_, x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let denom = (sxx * syy).sqrt();
    let pearson_r = if denom < 1e-300 { 1.0 } else { sxy / denom };
    Ok(PairwiseComparison {
        pairs,
        pearson_r,
        mean_abs_diff,
    })
}

/// Overlapping neuron groups that a layer of `d_f` neurons specializes
/// into; group i holds `group_sizes[i]` neurons.
#[derive(Debug, Clone, Serialize)]
pub struct GroupingSpec {
    pub d_f: usize,
    pub group_sizes: Vec<usize>,
}

impl GroupingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.group_sizes.iter().any(|&t| t == 0 || t > self.d_f) {
            return Err(Error::Config(format!(
                "group sizes must lie in [1, d_f = {}]",
                self.d_f
            )));
        }
        Ok(())
    }
}

/// ln of the number of possible grouping assignments: the product over
/// groups of C(d_f, t_i), computed in log space so counts stay finite for
/// d_f well past 10^7.
pub fn log_specialization_count(spec: &GroupingSpec) -> Result<f64> {
    spec.validate()?;
    let n = spec.d_f as f64;
    Ok(spec
        .group_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            ln_gamma(n + 1.0) - ln_gamma(t + 1.0) - ln_gamma(n - t + 1.0)
        })
        .sum())
}

/// Lanczos approximation (g = 7, 9 terms), accurate to ~1e-13 relative for
/// positive arguments.
fn ln_gamma(z: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    debug_assert!(z > 0.0);
    let z = z - 1.0;
    let mut x = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};
    use approx::assert_relative_eq;

    fn tiny_ckpt(seed: u64) -> Checkpoint {
        let mut cfg = ModelConfig::new(16, 2, 2, Activation::ReLU, seed);
        cfg.max_seq_len = 16;
        Checkpoint::init(cfg).unwrap()
    }

    #[test]
    fn ln_gamma_agrees_with_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20u32 {
            fact *= n as f64;
            assert_relative_eq!(ln_gamma(n as f64 + 1.0), fact.ln(), max_relative = 1e-12);
        }
    }

    #[test]
    fn specialization_count_golden_cases() {
        // one full group: a single possible assignment
        let full = GroupingSpec {
            d_f: 9,
            group_sizes: vec![9],
        };
        assert!(log_specialization_count(&full).unwrap().abs() < 1e-10);
        // C(5,2) * C(5,3) = 100
        let two = GroupingSpec {
            d_f: 5,
            group_sizes: vec![2, 3],
        };
        assert_relative_eq!(
            log_specialization_count(&two).unwrap(),
            100.0f64.ln(),
            max_relative = 1e-10
        );
        assert!((100.0f64.ln() - 4.605170).abs() < 1e-6);
        let bad = GroupingSpec {
            d_f: 5,
            group_sizes: vec![6],
        };
        assert!(log_specialization_count(&bad).is_err());
    }

    #[test]
    fn specialization_count_superlinear() {
        for d in [100usize, 200, 400] {
            let small = GroupingSpec {
                d_f: d,
                group_sizes: vec![d / 10, d / 4, d / 2],
            };
            let large = GroupingSpec {
                d_f: 2 * d,
                group_sizes: vec![d / 5, d / 2, d],
            };
            let ls = log_specialization_count(&small).unwrap();
            let ll = log_specialization_count(&large).unwrap();
            assert!(ll > 2.0 * ls, "d = {d}: {ll} <= 2 * {ls}");
        }
    }

    #[test]
    fn all_active_mask_gives_unit_frequencies() {
        let ckpt = tiny_ckpt(3);
        let data: Vec<u8> = (0..200).map(|i| (i % 256) as u8).collect();
        // threshold 0 keeps every neuron
        let stats = collect_stats(&ckpt, &data, &MaskRule::NeuronNorm(vec![0.0; 2])).unwrap();
        assert!(stats.per_neuron_frequency.iter().all(|&f| f == 1.0));
        let h = histograms_from_stats(&stats, 10);
        assert_eq!(h.aggregate.counts[9], h.aggregate.total());
        assert_eq!(h.per_layer.len(), 2); // first and last of 2 layers
    }

    #[test]
    fn no_active_mask_gives_zero_frequencies() {
        let ckpt = tiny_ckpt(4);
        let data: Vec<u8> = (0..100).map(|i| (i * 3 % 256) as u8).collect();
        let stats = collect_stats(&ckpt, &data, &MaskRule::TopK(0)).unwrap();
        assert!(stats.per_neuron_frequency.iter().all(|&f| f == 0.0));
        assert_eq!(stats.mean_frequency(), 0.0);
    }

    #[test]
    fn counting_matches_hand_trace() {
        // 8-token stream, recount activations with a second tapped pass
        let ckpt = tiny_ckpt(5);
        let data: Vec<u8> = vec![10, 20, 10, 30, 10, 20, 40, 50];
        let rule = MaskRule::TopK(7);
        let stats = collect_stats(&ckpt, &data, &rule).unwrap();
        struct Recount {
            fired: Vec<u64>,
            d_f: usize,
        }
        impl FfnTap for Recount {
            fn ffn(&mut self, l: usize, _p: usize, _x: &[f32], s: &[f32], _h: &[f32], w: &[usize]) {
                for i in 0..s.len() {
                    if !w.contains(&i) {
                        self.fired[l * self.d_f + i] += 1;
                    }
                }
            }
        }
        let mut tap = Recount {
            fired: vec![0; 2 * ckpt.config.d_f],
            d_f: ckpt.config.d_f,
        };
        forward_with_tap(&ckpt, &data, Some(&rule), Some(&mut tap)).unwrap();
        let want: Vec<f64> = tap.fired.iter().map(|&f| f as f64 / 8.0).collect();
        assert_eq!(stats.per_neuron_frequency, want);
        assert_eq!(stats.tokens_processed, 8);
    }

    #[test]
    fn single_token_stream_has_one_table_entry() {
        let ckpt = tiny_ckpt(6);
        let data = vec![42u8; 32];
        let stats = collect_stats(&ckpt, &data, &MaskRule::TopK(10)).unwrap();
        let table = token_activation_table(&stats, 8);
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].0, 42);
        assert_eq!(table.rows[0].1, 32);
        let expect = 10.0 / ckpt.config.d_f as f64;
        assert_relative_eq!(table.rows[0].2, expect, max_relative = 1e-12);
    }

    #[test]
    fn self_comparison_is_identity() {
        let ckpt = tiny_ckpt(7);
        let data: Vec<u8> = (0..400).map(|i| (i * 7 % 64) as u8).collect();
        let stats = collect_stats(&ckpt, &data, &MaskRule::TopK(12)).unwrap();
        let table = token_activation_table(&stats, 1);
        let cmp = pairwise_compare(&table, &table).unwrap();
        assert_eq!(cmp.mean_abs_diff, 0.0);
        assert!((cmp.pearson_r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_comparison_keeps_correlation() {
        let ckpt = tiny_ckpt(8);
        let data: Vec<u8> = (0..400).map(|i| (i * 11 % 32) as u8).collect();
        let stats = collect_stats(&ckpt, &data, &MaskRule::TopK(12)).unwrap();
        let table = token_activation_table(&stats, 1);
        let mut shifted = table.clone();
        for row in &mut shifted.rows {
            row.2 += 0.1;
        }
        let cmp = pairwise_compare(&table, &shifted).unwrap();
        assert_relative_eq!(cmp.mean_abs_diff, 0.1, max_relative = 1e-9);
        assert!((cmp.pearson_r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shuffled_ratios_decorrelate() {
        // independently permuted ratios should show little correlation
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = 1000usize;
        let base: Vec<f64> = (0..n).map(|i| (i as f64) / n as f64).collect();
        let mut shuffled = base.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12345);
        shuffled.shuffle(&mut rng);
        let a = TokenTable {
            rows: (0..n).map(|i| (i, 10, base[i])).collect(),
            omitted: 0,
            min_occurrences: 1,
        };
        let b = TokenTable {
            rows: (0..n).map(|i| (i, 10, shuffled[i])).collect(),
            omitted: 0,
            min_occurrences: 1,
        };
        let cmp = pairwise_compare(&a, &b).unwrap();
        assert!(cmp.pearson_r.abs() < 0.2, "r = {}", cmp.pearson_r);
    }

    #[test]
    fn empty_intersection_is_an_error() {
        let a = TokenTable {
            rows: vec![(1, 10, 0.5)],
            omitted: 0,
            min_occurrences: 1,
        };
        let b = TokenTable {
            rows: vec![(2, 10, 0.5)],
            omitted: 0,
            min_occurrences: 1,
        };
        assert!(pairwise_compare(&a, &b).is_err());
    }
}
