//! Width-depth-ratio sweep at a constant non-embedding parameter budget.
//!
//! Each requested ratio is turned into a (d_h, n_layers) pair whose exact
//! parameter count lands within 5% of the base model's budget, trained on
//! the same corpus and seed, measured with the stabilized series, and
//! summarized by its fitted limit activation ratio and final loss.

use crate::cli::config::FileConfig;
use crate::cli::Shared;
use crate::error::{Error, Result};
use crate::lawfit::{fit_law, LawFamily, SparsityPoint};
use crate::model::{default_d_f, Activation, ModelConfig};
use crate::report::{fnum, write_json_atomic, Csv};
use crate::sparsity::{stabilized_series, MeasureOptions};
use crate::train::train;

pub const BUDGET_TOLERANCE: f64 = 0.05;

/// Integer-feasible (d_h, n_layers) for one width-depth ratio within the
/// parameter budget; d_h is rounded to a multiple of n_heads.
pub fn solve_for_ratio(
    budget: usize,
    ratio: f64,
    n_heads: usize,
    activation: Activation,
    seed: u64,
) -> Option<ModelConfig> {
    // per layer: 4 d_h^2 + 3 d_f d_h + 2 d_h with d_f = 2.5 d_h, so the
    // budget is roughly 11.5 d_h^3 / ratio
    let d_h_guess = (budget as f64 * ratio / 11.5).cbrt();
    let mut best: Option<(f64, ModelConfig)> = None;
    for step in -3i64..=3 {
        let d_h = ((d_h_guess / n_heads as f64).round() as i64 + step) * n_heads as i64;
        if d_h < n_heads as i64 {
            continue;
        }
        let d_h = d_h as usize;
        let n_layers = ((d_h as f64 / ratio).round() as usize).max(1);
        let cfg = ModelConfig {
            d_h,
            d_f: default_d_f(d_h),
            n_layers,
            n_heads,
            vocab_size: 256,
            max_seq_len: 256,
            activation,
            seed,
        };
        let err = (cfg.non_embedding_params() as f64 - budget as f64).abs() / budget as f64;
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, cfg));
        }
    }
    best.and_then(|(err, cfg)| (err <= BUDGET_TOLERANCE).then_some(cfg))
}

pub fn cmd_sweep(shared: &Shared, ratios: Option<Vec<f64>>, p: Option<f64>) -> Result<()> {
    let file = FileConfig::load_or_default(shared.config.as_ref())?;
    let mut ratios = ratios
        .or(file.sweep.ratios.clone())
        .ok_or_else(|| Error::Config("sweep: ratios required".into()))?;
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ratios.dedup();
    let p = p.or(file.sweep.p).unwrap_or(1.0);

    let base = super::commands::resolve_train_config(shared, None, None, None, None, None)?;
    let budget = base.model.non_embedding_params();
    std::fs::create_dir_all(&shared.out_dir)?;
    write_json_atomic(
        shared.out_dir.join("run_record.json"),
        &serde_json::json!({
            "command": "sweep",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": base.model.seed,
            "budget_non_embedding": budget,
            "ratios": ratios,
            "p": p,
        }),
    )?;

    let family = match base.model.activation {
        Activation::ReLU => LawFamily::ReluLogspacePower,
        Activation::SiLU => LawFamily::SiluPower,
    };
    let mut csv = Csv::new(&[
        "width_depth_ratio",
        "d_h",
        "n_layers",
        "non_embedding_params",
        "limit_activation_ratio",
        "final_activation_ratio",
        "final_loss",
        "fit_converged",
    ]);
    for &ratio in &ratios {
        let Some(model) =
            solve_for_ratio(budget, ratio, base.model.n_heads, base.model.activation, base.model.seed)
        else {
            eprintln!("skipping ratio {ratio}: no (d_h, n_layers) within 5% of {budget} params");
            continue;
        };
        let run_dir = shared.out_dir.join(format!("ratio_{ratio:07.2}"));
        let mut cfg = base.clone();
        println!(
            "ratio {ratio}: d_h {} x {} layers ({} params)",
            model.d_h,
            model.n_layers,
            model.non_embedding_params()
        );
        cfg.model = model;
        let manifest = train(&cfg, &run_dir)?;
        let valid = std::fs::read(run_dir.join("valid.bin"))?;
        let series = stabilized_series(
            &run_dir,
            &manifest,
            &valid,
            p,
            1e-4,
            MeasureOptions::default(),
        )?;
        let points: Vec<SparsityPoint> = series
            .points
            .iter()
            .map(|pt| SparsityPoint {
                tokens_seen: pt.tokens_seen as f64,
                activation_ratio: pt.activation_ratio,
            })
            .collect();
        let fit = fit_law(&points, family);
        let (limit, converged) = match &fit {
            Ok(f) => (f.a0, f.converged),
            Err(_) => (f64::NAN, false),
        };
        let final_loss = manifest.loss.last().map(|l| l.loss).unwrap_or(f64::NAN);
        csv.row(&[
            fnum(ratio),
            cfg.model.d_h.to_string(),
            cfg.model.n_layers.to_string(),
            cfg.model.non_embedding_params().to_string(),
            fnum(limit),
            fnum(series.points.last().map(|pt| pt.activation_ratio).unwrap_or(f64::NAN)),
            fnum(final_loss),
            converged.to_string(),
        ]);
    }
    csv.save(shared.out_dir.join("sweep.csv"))?;
    println!("sweep table -> {}", shared.out_dir.join("sweep.csv").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solved_configs_stay_inside_budget() {
        let base = ModelConfig::new(64, 2, 4, Activation::ReLU, 0);
        let budget = base.non_embedding_params();
        for ratio in [8.0, 16.0, 32.0, 64.0] {
            let cfg = solve_for_ratio(budget, ratio, 4, Activation::ReLU, 0)
                .unwrap_or_else(|| panic!("ratio {ratio} should be feasible"));
            let got = cfg.non_embedding_params() as f64;
            assert!(
                (got - budget as f64).abs() / budget as f64 <= BUDGET_TOLERANCE,
                "ratio {ratio}: {got} vs budget {budget}"
            );
            assert_eq!(cfg.d_h % cfg.n_heads, 0);
            assert!(cfg.n_layers >= 1);
        }
    }

    #[test]
    fn infeasible_ratio_is_rejected() {
        // a tiny budget cannot host a very wide shallow model
        let budget = ModelConfig::new(16, 2, 4, Activation::ReLU, 0).non_embedding_params();
        assert!(solve_for_ratio(budget, 4096.0, 4, Activation::ReLU, 0).is_none());
    }
}
