//! Training loop: AdamW on a byte corpus with periodic SPLW checkpoints.
//!
//! The schedule is linear warmup into a constant plateau with an optional
//! linear decay tail. Batches are sampled deterministically from the
//! training slice of the corpus, so a (config, seed) pair fixes the entire
//! run bit for bit.

mod backward;

pub use backward::{batch_loss_and_grads, Workspace};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig};
use crate::splw::save_checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub seq_len: usize,
    pub total_tokens: u64,
    pub peak_lr: f64,
    pub warmup_tokens: u64,
    /// Length of the linear decay tail in tokens; 0 keeps the plateau to the end.
    pub decay_tokens: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// 0 selects the default of 20 evenly spaced checkpoints.
    pub checkpoint_every_tokens: u64,
    pub corpus_path: PathBuf,
    pub valid_fraction: f64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, corpus_path: PathBuf, total_tokens: u64) -> Self {
        TrainConfig {
            model,
            batch_size: 16,
            seq_len: 64,
            total_tokens,
            peak_lr: 2e-3,
            warmup_tokens: total_tokens / 20,
            decay_tokens: 0,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            grad_clip: 1.0,
            checkpoint_every_tokens: 0,
            corpus_path,
            valid_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.total_tokens > 0 && self.warmup_tokens >= self.total_tokens {
            return Err(Error::Config(format!(
                "warmup_tokens {} must be below total_tokens {}",
                self.warmup_tokens, self.total_tokens
            )));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction <= 0.5) {
            return Err(Error::Config("valid_fraction must lie in (0, 0.5]".into()));
        }
        if self.seq_len < 2 || self.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} must lie in [2, max_seq_len={}]",
                self.seq_len, self.model.max_seq_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn checkpoint_interval(&self) -> u64 {
        if self.checkpoint_every_tokens > 0 {
            self.checkpoint_every_tokens
        } else {
            (self.total_tokens / 20).max(1)
        }
    }

    /// FNV-1a over the JSON form; a fingerprint for the manifest, not crypto.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// Piecewise-linear learning rate: 0 -> peak over the warmup, flat plateau,
/// then an optional linear tail down to zero at the token budget.
pub fn lr_at(tokens_seen: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_tokens > 0 && tokens_seen < cfg.warmup_tokens {
        return cfg.peak_lr * tokens_seen as f64 / cfg.warmup_tokens as f64;
    }
    let decay_start = cfg.total_tokens.saturating_sub(cfg.decay_tokens);
    if cfg.decay_tokens > 0 && tokens_seen > decay_start {
        let into = (tokens_seen - decay_start) as f64 / cfg.decay_tokens as f64;
        return cfg.peak_lr * (1.0 - into.min(1.0));
    }
    cfg.peak_lr
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub path: String,
    pub tokens_seen: u64,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub tokens_seen: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Record of one training run: checkpoints in order, the loss series, and
/// enough configuration echo to drive measurement downstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub warmup_tokens: u64,
    pub total_tokens: u64,
    pub checkpoints: Vec<CheckpointEntry>,
    pub loss: Vec<LossPoint>,
    /// Mean loss over the last tenth of steps was below the first tenth.
    pub loss_decreased: Option<bool>,
}

impl RunManifest {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::report::write_json_atomic(path, self)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<RunManifest> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Split a corpus into disjoint (train, validation) byte ranges; validation
/// is the tail `valid_fraction` of the file.
pub fn split_corpus(data: &[u8], valid_fraction: f64) -> (&[u8], &[u8]) {
    let valid_len = ((data.len() as f64 * valid_fraction) as usize)
        .max(1)
        .min(data.len() / 2);
    let split = data.len() - valid_len;
    (&data[..split], &data[split..])
}

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Decoupled weight decay; norm gains are excluded from decay.
    fn step(&mut self, ckpt: &mut Checkpoint, grads: &[f32], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.beta1 as f32;
        let b2 = cfg.beta2 as f32;
        let bias1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bias2 = 1.0 - cfg.beta2.powi(self.t as i32);
        // folds both bias corrections into the step size
        let lr_t = (lr * bias2.sqrt() / bias1) as f32;
        let eps = 1e-8f32;
        let wd = (lr * cfg.weight_decay) as f32;
        for spec in ckpt.layout.specs().to_vec() {
            let decays = !spec.name.ends_with("norm");
            let range = spec.offset..spec.offset + spec.len();
            for i in range {
                let g = grads[i];
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                let mut update = lr_t * self.m[i] / (self.v[i].sqrt() + eps);
                if decays {
                    update += wd * ckpt.params[i];
                }
                ckpt.params[i] -= update;
            }
        }
    }
}

fn clip_global_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = crate::mat::l2_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Progress callback invoked once per optimizer step.
pub type ProgressFn<'a> = dyn FnMut(&LossPoint) + 'a;

/// Train a model and write checkpoints plus `manifest.json` and `loss.csv`
/// into `out_dir`. A zero token budget emits only the initialization
/// checkpoint.
pub fn train(cfg: &TrainConfig, out_dir: &std::path::Path) -> Result<RunManifest> {
    train_with_progress(cfg, out_dir, &mut |_| {})
}

pub fn train_with_progress(
    cfg: &TrainConfig,
    out_dir: &std::path::Path,
    progress: &mut ProgressFn<'_>,
) -> Result<RunManifest> {
    cfg.validate()?;
    if !cfg.corpus_path.exists() {
        return Err(Error::MissingCorpus(cfg.corpus_path.clone()));
    }
    let corpus = std::fs::read(&cfg.corpus_path)?;
    if corpus.len() < 2 * (cfg.seq_len + 1) {
        return Err(Error::Config(format!(
            "corpus of {} bytes is too small for seq_len {}",
            corpus.len(),
            cfg.seq_len
        )));
    }
    let (train_slice, valid_slice) = split_corpus(&corpus, cfg.valid_fraction);
    std::fs::create_dir_all(out_dir)?;
    // the held-out slice rides along so measurement never touches training bytes
    crate::report::write_atomic(out_dir.join("valid.bin"), valid_slice)?;

    let mut ckpt = Checkpoint::init(cfg.model.clone())?;
    let mut manifest = RunManifest {
        config_hash: cfg.config_hash(),
        warmup_tokens: cfg.warmup_tokens,
        total_tokens: cfg.total_tokens,
        checkpoints: Vec::new(),
        loss: Vec::new(),
        loss_decreased: None,
    };
    let save = |ckpt: &Checkpoint, manifest: &mut RunManifest| -> Result<()> {
        let name = format!("ckpt_{:010}.splw", ckpt.tokens_seen);
        let path = out_dir.join(&name);
        save_checkpoint(&path, ckpt)?;
        manifest.checkpoints.push(CheckpointEntry {
            path: name,
            tokens_seen: ckpt.tokens_seen,
            step: ckpt.step,
        });
        Ok(())
    };
    save(&ckpt, &mut manifest)?;

    if cfg.total_tokens > 0 {
        let mut adam = AdamState::new(ckpt.params.len());
        let mut grads = vec![0.0f32; ckpt.params.len()];
        let mut ws = Workspace::new(&ckpt, cfg.seq_len);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed.wrapping_add(0x5eed_ba7c));
        let tokens_per_step = (cfg.batch_size * cfg.seq_len) as u64;
        let interval = cfg.checkpoint_interval();
        let mut next_save = interval;
        let max_start = train_slice.len() - cfg.seq_len;

        while ckpt.tokens_seen < cfg.total_tokens {
            let batch: Vec<&[u8]> = (0..cfg.batch_size)
                .map(|_| {
                    let start = rng.random_range(0..=max_start);
                    &train_slice[start..start + cfg.seq_len]
                })
                .collect();
            grads.fill(0.0);
            let nll = batch_loss_and_grads(&ckpt, &batch, &mut ws, &mut grads)?;
            let mean_loss = nll / (cfg.batch_size * (cfg.seq_len - 1)) as f64;
            if !mean_loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss",
                    step: ckpt.step,
                });
            }
            let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient norm",
                    step: ckpt.step,
                });
            }
            let lr = lr_at(ckpt.tokens_seen, cfg);
            adam.step(&mut ckpt, &grads, lr, cfg);
            ckpt.step += 1;
            ckpt.tokens_seen += tokens_per_step;
            let point = LossPoint {
                step: ckpt.step,
                tokens_seen: ckpt.tokens_seen,
                loss: mean_loss,
                lr,
            };
            manifest.loss.push(point);
            progress(&point);
            if ckpt.tokens_seen >= next_save && ckpt.tokens_seen < cfg.total_tokens {
                save(&ckpt, &mut manifest)?;
                while next_save <= ckpt.tokens_seen {
                    next_save += interval;
                }
            }
        }
        save(&ckpt, &mut manifest)?;

        let n = manifest.loss.len();
        let tenth = (n / 10).max(1);
        let head: f64 = manifest.loss[..tenth].iter().map(|p| p.loss).sum::<f64>() / tenth as f64;
        let tail: f64 =
            manifest.loss[n - tenth..].iter().map(|p| p.loss).sum::<f64>() / tenth as f64;
        manifest.loss_decreased = Some(tail < head);
    }

    manifest.save(out_dir.join("manifest.json"))?;
    let mut csv = String::from("step,tokens_seen,loss,lr\n");
    for p in &manifest.loss {
        csv.push_str(&format!("{},{},{},{}\n", p.step, p.tokens_seen, p.loss, p.lr));
    }
    crate::report::write_atomic(out_dir.join("loss.csv"), csv.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn cfg_for(dir: &std::path::Path, total: u64) -> TrainConfig {
        let mut model = ModelConfig::new(16, 1, 2, Activation::ReLU, 7);
        model.max_seq_len = 16;
        let mut cfg = TrainConfig::new(model, dir.join("corpus.bin"), total);
        cfg.batch_size = 2;
        cfg.seq_len = 16;
        cfg.warmup_tokens = total / 10;
        cfg
    }

    #[test]
    fn lr_schedule_shape() {
        let dir = std::env::temp_dir();
        let mut cfg = cfg_for(&dir, 10_000);
        cfg.warmup_tokens = 1000;
        cfg.peak_lr = 4e-3;
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(500, &cfg) - 2e-3).abs() < 1e-12);
        assert!((lr_at(1000, &cfg) - 4e-3).abs() < 1e-12);
        assert!((lr_at(7000, &cfg) - 4e-3).abs() < 1e-12);
        cfg.decay_tokens = 2000;
        assert!((lr_at(9000, &cfg) - 2e-3).abs() < 1e-12);
        assert!((lr_at(8000, &cfg) - 4e-3).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_emits_init_only() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("corpus.bin"), vec![7u8; 4096]).unwrap();
        let cfg = cfg_for(dir.path(), 0);
        let manifest = train(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.checkpoints.len(), 1);
        assert_eq!(manifest.checkpoints[0].tokens_seen, 0);
        assert!(manifest.loss.is_empty());
    }

    #[test]
    fn missing_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_for(dir.path(), 100);
        assert!(matches!(train(&cfg, dir.path()), Err(Error::MissingCorpus(_))));
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let data: Vec<u8> = (0..100).collect();
        let (train, valid) = split_corpus(&data, 0.2);
        assert_eq!(train.len() + valid.len(), 100);
        assert_eq!(train.len(), 80);
        assert_eq!(valid[0], 80);
    }

    #[test]
    fn tokens_seen_strictly_increasing() {
        let dir = tempfile::tempdir().unwrap();
        let corpus: Vec<u8> = (0..8192u32).map(|i| (i % 251) as u8).collect();
        std::fs::write(dir.path().join("corpus.bin"), &corpus).unwrap();
        let mut cfg = cfg_for(dir.path(), 2048);
        cfg.checkpoint_every_tokens = 512;
        let manifest = train(&cfg, dir.path()).unwrap();
        for pair in manifest.checkpoints.windows(2) {
            assert!(pair[0].tokens_seen < pair[1].tokens_seen);
        }
        assert_eq!(manifest.checkpoints.last().unwrap().tokens_seen, 2048);
        assert_eq!(manifest.loss.len(), 2048 / 32);
    }
}
