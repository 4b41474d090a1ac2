//! Experiment configuration files: TOML with one flat section per
//! subcommand. Command-line flags override file values field by field.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub measure: MeasureSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            kind: "config file",
            detail: e.to_string(),
        })
    }

    pub fn load_or_default(path: Option<&PathBuf>) -> Result<FileConfig> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(FileConfig::default()),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub corpus: Option<PathBuf>,
    pub d_h: Option<usize>,
    pub d_f: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub vocab_size: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub activation: Option<String>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub seq_len: Option<usize>,
    pub total_tokens: Option<u64>,
    pub peak_lr: Option<f64>,
    pub warmup_tokens: Option<u64>,
    pub decay_tokens: Option<u64>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub checkpoint_every_tokens: Option<u64>,
    pub valid_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSection {
    pub run_dir: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub method: Option<String>,
    pub p: Option<f64>,
    pub param: Option<f64>,
    pub eps: Option<f64>,
    pub calib_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub points: Option<PathBuf>,
    pub family: Option<String>,
    pub normalization: Option<f64>,
    pub curve_samples: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub d_h: Option<usize>,
    pub d_f: Option<usize>,
    pub mode: Option<String>,
    pub sparsity: Option<Vec<f64>>,
    pub tokens: Option<usize>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub method: Option<String>,
    pub p: Option<f64>,
    pub param: Option<f64>,
    pub bins: Option<usize>,
    pub min_occurrences: Option<u64>,
    pub compare: Option<PathBuf>,
    pub calib_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub ratios: Option<Vec<f64>>,
    pub p: Option<f64>,
}
