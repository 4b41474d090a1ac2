//! Subcommand bodies: resolve config, run the module, write artifacts.

use crate::cli::config::FileConfig;
use crate::cli::Shared;
use crate::error::{Error, Result};
use crate::lawfit::{
    eval_law, fit_law_normalized, parse_points_csv, LawFamily, DEFAULT_NORMALIZATION,
};
use crate::model::{Activation, MaskRule, ModelConfig};
use crate::report::{fnum, write_json_atomic, Csv};
use crate::sparsity::{
    measure_activation_ratio, stabilized_series, CettCalibrator, MeasureOptions, MethodSpec,
};
use crate::train::{train_with_progress, RunManifest, TrainConfig};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Every command drops (resolved command record, seed, crate version) next
/// to its outputs.
#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    resolved: T,
}

fn write_record<T: Serialize>(out_dir: &Path, command: &str, seed: u64, resolved: T) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_json_atomic(
        out_dir.join("run_record.json"),
        &RunRecord {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            resolved,
        },
    )
}

pub fn cmd_gen_corpus(shared: &Shared, out: &Path, bytes: usize) -> Result<()> {
    let seed = shared.seed.unwrap_or(7);
    let data = crate::textgen::generate_corpus(bytes, seed);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    crate::report::write_atomic(out, &data)?;
    println!("wrote {} bytes to {}", data.len(), out.display());
    Ok(())
}

/// Resolve a [`TrainConfig`] from file section plus flag overrides.
pub fn resolve_train_config(
    shared: &Shared,
    corpus: Option<PathBuf>,
    activation: Option<String>,
    total_tokens: Option<u64>,
    d_h: Option<usize>,
    n_layers: Option<usize>,
) -> Result<TrainConfig> {
    let file = FileConfig::load_or_default(shared.config.as_ref())?;
    let t = file.train;
    let corpus = corpus
        .or(t.corpus)
        .ok_or_else(|| Error::Config("train: corpus path required".into()))?;
    let activation: Activation = activation
        .or(t.activation)
        .unwrap_or_else(|| "relu".into())
        .parse()?;
    let seed = shared.seed.or(t.seed).unwrap_or(0);
    let d_h = d_h.or(t.d_h).unwrap_or(64);
    let n_layers = n_layers.or(t.n_layers).unwrap_or(2);
    let n_heads = t.n_heads.unwrap_or(4);
    let mut model = ModelConfig::new(d_h, n_layers, n_heads, activation, seed);
    if let Some(d_f) = t.d_f {
        model.d_f = d_f;
    }
    if let Some(v) = t.vocab_size {
        model.vocab_size = v;
    }
    if let Some(m) = t.max_seq_len {
        model.max_seq_len = m;
    }
    let total = total_tokens.or(t.total_tokens).unwrap_or(2_000_000);
    let mut cfg = TrainConfig::new(model, corpus, total);
    if let Some(b) = t.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = t.seq_len {
        cfg.seq_len = s;
    }
    if let Some(lr) = t.peak_lr {
        cfg.peak_lr = lr;
    }
    if let Some(w) = t.warmup_tokens {
        cfg.warmup_tokens = w;
    }
    if let Some(d) = t.decay_tokens {
        cfg.decay_tokens = d;
    }
    if let Some(wd) = t.weight_decay {
        cfg.weight_decay = wd;
    }
    if let Some(gc) = t.grad_clip {
        cfg.grad_clip = gc;
    }
    if let Some(ce) = t.checkpoint_every_tokens {
        cfg.checkpoint_every_tokens = ce;
    }
    if let Some(vf) = t.valid_fraction {
        cfg.valid_fraction = vf;
    }
    Ok(cfg)
}

pub fn cmd_train(
    shared: &Shared,
    corpus: Option<PathBuf>,
    activation: Option<String>,
    total_tokens: Option<u64>,
    d_h: Option<usize>,
    n_layers: Option<usize>,
) -> Result<RunManifest> {
    let cfg = resolve_train_config(shared, corpus, activation, total_tokens, d_h, n_layers)?;
    write_record(&shared.out_dir, "train", cfg.model.seed, &cfg)?;
    let mut last_log = 0u64;
    let manifest = train_with_progress(&cfg, &shared.out_dir, &mut |p| {
        if p.tokens_seen >= last_log + cfg.total_tokens / 20 {
            println!(
                "step {:>6}  tokens {:>10}  loss {:.4}  lr {:.2e}",
                p.step, p.tokens_seen, p.loss, p.lr
            );
            last_log = p.tokens_seen;
        }
    })?;
    if manifest.loss_decreased == Some(false) {
        eprintln!("warning: training loss did not decrease over the run");
    }
    println!(
        "trained {} checkpoints into {}",
        manifest.checkpoints.len(),
        shared.out_dir.display()
    );
    Ok(manifest)
}

fn parse_method(method: Option<String>, param: Option<f64>) -> Result<MethodSpec> {
    let name = method.unwrap_or_else(|| "cett".into());
    Ok(match name.as_str() {
        "zero" => MethodSpec::Zero,
        "topk" => MethodSpec::TopK(param.ok_or_else(|| {
            Error::Config("topk needs --param <k>".into())
        })? as usize),
        "fat" => MethodSpec::Fat(
            param.ok_or_else(|| Error::Config("fat needs --param <eps>".into()))? as f32,
        ),
        "cett" => {
            // explicit target wins; otherwise the p% budget drives a search
            match param {
                Some(t) => MethodSpec::CettTarget(t),
                None => MethodSpec::CettTarget(f64::NAN), // resolved by the caller via p
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown method '{other}' (zero, topk, fat, cett)"
            )))
        }
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_measure(
    shared: &Shared,
    run_dir: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    method: Option<String>,
    p: Option<f64>,
    param: Option<f64>,
    calib_tokens: Option<usize>,
) -> Result<()> {
    let file = FileConfig::load_or_default(shared.config.as_ref())?;
    let m = file.measure;
    let run_dir = run_dir.or(m.run_dir);
    let ckpt_path = ckpt.or(m.ckpt);
    let p = p.or(m.p).unwrap_or(1.0);
    let eps = m.eps.unwrap_or(1e-4);
    let opts = MeasureOptions {
        calib_tokens: calib_tokens.or(m.calib_tokens).unwrap_or(4096),
    };
    let method = parse_method(method.or(m.method), param.or(m.param))?;
    let data_path = data.or(m.data);
    std::fs::create_dir_all(&shared.out_dir)?;

    match (run_dir, ckpt_path) {
        (Some(run_dir), None) => {
            let manifest = RunManifest::load(run_dir.join("manifest.json"))?;
            let data_path = data_path.unwrap_or_else(|| run_dir.join("valid.bin"));
            let valid = std::fs::read(&data_path)?;
            write_record(
                &shared.out_dir,
                "measure",
                0,
                serde_json::json!({
                    "run_dir": run_dir, "data": data_path, "p": p, "eps": eps,
                    "calib_tokens": opts.calib_tokens,
                }),
            )?;
            let series = stabilized_series(&run_dir, &manifest, &valid, p, eps, opts)?;
            let mut csv = Csv::new(&[
                "tokens_seen",
                "activation_ratio",
                "cett",
                "ppl_dense",
                "ppl_sparse",
            ]);
            for pt in &series.points {
                csv.row(&[
                    pt.tokens_seen.to_string(),
                    fnum(pt.activation_ratio),
                    fnum(pt.cett),
                    fnum(pt.ppl_dense),
                    fnum(pt.ppl_sparse),
                ]);
            }
            csv.save(shared.out_dir.join("series.csv"))?;
            write_json_atomic(shared.out_dir.join("stabilized.json"), &series)?;
            for w in &series.search.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "cett level {:.6} over {} checkpoints -> {}",
                series.cett,
                series.points.len(),
                shared.out_dir.join("series.csv").display()
            );
        }
        (None, Some(ckpt_path)) => {
            let ckpt = crate::splw::load_checkpoint(&ckpt_path)?;
            let data_path = data_path
                .ok_or_else(|| Error::Config("measure --ckpt needs --data <bytes>".into()))?;
            let valid = std::fs::read(&data_path)?;
            write_record(
                &shared.out_dir,
                "measure",
                ckpt.config.seed,
                serde_json::json!({
                    "ckpt": ckpt_path, "data": data_path, "p": p,
                    "calib_tokens": opts.calib_tokens,
                }),
            )?;
            // a NaN target means "search the level for this p% first"
            let method = match method {
                MethodSpec::CettTarget(t) if t.is_nan() => {
                    let calib_len = opts.calib_tokens.min(valid.len());
                    let mut probes = vec![crate::sparsity::CheckpointProbe::new(
                        &ckpt,
                        &valid,
                        &valid[..calib_len],
                    )?];
                    let search =
                        crate::sparsity::search_cett_hyperparameter(&mut probes, p, eps)?;
                    write_json_atomic(shared.out_dir.join("search.json"), &search)?;
                    MethodSpec::CettTarget(search.cett)
                }
                other => other,
            };
            let report = measure_activation_ratio(&ckpt, &valid, &method, opts)?;
            write_json_atomic(shared.out_dir.join("sparsity_report.json"), &report)?;
            println!(
                "activation ratio {:.4} (ppl dense {:.4}, sparse {:.4}) -> {}",
                report.aggregate_activation_ratio,
                report.ppl_dense,
                report.ppl_sparse,
                shared.out_dir.join("sparsity_report.json").display()
            );
        }
        _ => {
            return Err(Error::Config(
                "measure needs exactly one of --run-dir or --ckpt".into(),
            ))
        }
    }
    Ok(())
}

pub fn cmd_fit(
    shared: &Shared,
    points: Option<PathBuf>,
    family: Option<String>,
    normalization: Option<f64>,
) -> Result<crate::lawfit::LawFitResult> {
    let file = FileConfig::load_or_default(shared.config.as_ref())?;
    let f = file.fit;
    let points_path = points
        .or(f.points)
        .ok_or_else(|| Error::Config("fit: points CSV required".into()))?;
    let family = match family.or(f.family).unwrap_or_else(|| "relu".into()).as_str() {
        "relu" => LawFamily::ReluLogspacePower,
        "silu" => LawFamily::SiluPower,
        other => {
            return Err(Error::Config(format!(
                "unknown family '{other}' (relu or silu)"
            )))
        }
    };
    let normalization = normalization
        .or(f.normalization)
        .unwrap_or(DEFAULT_NORMALIZATION);
    let curve_samples = f.curve_samples.unwrap_or(64);

    let text = std::fs::read_to_string(&points_path)?;
    let pts = parse_points_csv(&text)?;
    let fit = fit_law_normalized(&pts, family, normalization)?;
    write_record(
        &shared.out_dir,
        "fit",
        0,
        serde_json::json!({
            "points": points_path, "family": format!("{family}"),
            "normalization": normalization,
        }),
    )?;

    let mut coeffs = Csv::new(&[
        "family",
        "alpha",
        "b",
        "c",
        "a0",
        "rss",
        "normalization",
        "iterations",
        "converged",
    ]);
    coeffs.row(&[
        format!("{family}"),
        fnum(fit.alpha),
        fit.b.map(fnum).unwrap_or_default(),
        fnum(fit.c),
        fnum(fit.a0),
        fnum(fit.rss),
        fnum(fit.normalization),
        fit.iterations.to_string(),
        fit.converged.to_string(),
    ]);
    coeffs.save(shared.out_dir.join("coefficients.csv"))?;

    let mut curve = Csv::new(&["tokens_seen", "fitted_activation_ratio"]);
    if let (Some(first), Some(last)) = (pts.first(), pts.last()) {
        let (lo, hi) = (first.tokens_seen.ln(), (last.tokens_seen * 2.0).ln());
        for i in 0..curve_samples {
            let d = (lo + (hi - lo) * i as f64 / (curve_samples - 1) as f64).exp();
            curve.row(&[fnum(d), fnum(eval_law(&fit, d)?)]);
        }
    }
    curve.save(shared.out_dir.join("curve.csv"))?;
    write_json_atomic(shared.out_dir.join("fit.json"), &fit)?;
    if !fit.converged {
        eprintln!("warning: fit did not converge; coefficients are best-effort");
    }
    println!(
        "{family}: alpha {:.4} c {:.4} a0 {:.4}{} rss {:.3e} -> {}",
        fit.alpha,
        fit.c,
        fit.a0,
        fit.b.map(|b| format!(" b {b:.4}")).unwrap_or_default(),
        fit.rss,
        shared.out_dir.join("coefficients.csv").display()
    );
    Ok(fit)
}

pub fn cmd_bench(
    shared: &Shared,
    d_h: Option<usize>,
    d_f: Option<usize>,
    mode: Option<String>,
    sparsity: Option<Vec<f64>>,
    tokens: Option<usize>,
) -> Result<()> {
    let file = FileConfig::load_or_default(shared.config.as_ref())?;
    let b = file.bench;
    let d_h = d_h.or(b.d_h).unwrap_or(1024);
    let d_f = d_f.or(b.d_f).unwrap_or_else(|| crate::model::default_d_f(d_h));
    let mode = match mode.or(b.mode).unwrap_or_else(|| "gate".into()).as_str() {
        "gate" => crate::sparse_exec::ExecMode::GateThreshold,
        "norm" => crate::sparse_exec::ExecMode::NormThreshold,
        other => {
            return Err(Error::Config(format!(
                "unknown mode '{other}' (gate or norm)"
            )))
        }
    };
    let grid = sparsity.or(b.sparsity).unwrap_or_else(|| vec![0.0, 0.5, 0.9]);
    let tokens = tokens.or(b.tokens).unwrap_or(256);
    let threads = shared.threads.or(b.threads).unwrap_or(1);
    let seed = shared.seed.or(b.seed).unwrap_or(11);
    write_record(
        &shared.out_dir,
        "bench",
        seed,
        serde_json::json!({
            "d_h": d_h, "d_f": d_f, "mode": format!("{mode}"),
            "sparsity": grid, "tokens": tokens, "threads": threads,
        }),
    )?;
    let reports = crate::sparse_exec::bench(d_h, d_f, &grid, mode, tokens, threads, seed)?;
    let mut csv = Csv::new(&[
        "d_h",
        "d_f",
        "sparsity_ratio",
        "realized_activation_ratio",
        "mode",
        "tokens",
        "threads",
        "ns_per_token_dense",
        "ns_per_token_sparse",
        "speedup",
        "flops_dense",
        "flops_sparse",
        "max_rel_error",
    ]);
    for r in &reports {
        csv.row(&[
            r.d_h.to_string(),
            r.d_f.to_string(),
            fnum(r.sparsity_ratio),
            fnum(r.realized_activation_ratio),
            format!("{}", r.mode),
            r.tokens.to_string(),
            r.threads.to_string(),
            fnum(r.ns_per_token_dense),
            fnum(r.ns_per_token_sparse),
            fnum(r.speedup),
            fnum(r.flops_dense),
            fnum(r.flops_sparse),
            fnum(r.max_rel_error),
        ]);
        println!(
            "sparsity {:.2}  dense {:>9.0} ns/tok  sparse {:>9.0} ns/tok  speedup {:.2}x  err {:.2e}",
            r.sparsity_ratio, r.ns_per_token_dense, r.ns_per_token_sparse, r.speedup, r.max_rel_error
        );
    }
    csv.save(shared.out_dir.join("bench.csv"))?;
    write_json_atomic(shared.out_dir.join("bench.json"), &reports)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze(
    shared: &Shared,
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    method: Option<String>,
    p: Option<f64>,
    param: Option<f64>,
    bins: Option<usize>,
    compare: Option<PathBuf>,
) -> Result<()> {
    let file = FileConfig::load_or_default(shared.config.as_ref())?;
    let a = file.analyze;
    let ckpt_path = ckpt
        .or(a.ckpt)
        .ok_or_else(|| Error::Config("analyze: checkpoint required".into()))?;
    let data_path = data
        .or(a.data)
        .ok_or_else(|| Error::Config("analyze: data required".into()))?;
    let bins = bins.or(a.bins).unwrap_or(20);
    let min_occ = a.min_occurrences.unwrap_or(crate::analytics::MIN_OCCURRENCES);
    let p = p.or(a.p).unwrap_or(1.0);
    let calib_tokens = a.calib_tokens.unwrap_or(4096);
    let compare = compare.or(a.compare);

    let ckpt = crate::splw::load_checkpoint(&ckpt_path)?;
    let bytes = std::fs::read(&data_path)?;
    write_record(
        &shared.out_dir,
        "analyze",
        ckpt.config.seed,
        serde_json::json!({
            "ckpt": ckpt_path, "data": data_path, "p": p, "bins": bins,
            "min_occurrences": min_occ,
        }),
    )?;

    // "activated" defaults to the CETT mask at the p% PPL budget
    let method = parse_method(method.or(a.method), param.or(a.param))?;
    let rule = match method {
        MethodSpec::Zero => MaskRule::ZeroGate,
        MethodSpec::TopK(k) => MaskRule::TopK(k),
        MethodSpec::Fat(e) => MaskRule::GateMagnitude(e),
        MethodSpec::CettTarget(t) => {
            let target = if t.is_nan() {
                let calib_len = calib_tokens.min(bytes.len());
                let mut probes = vec![crate::sparsity::CheckpointProbe::new(
                    &ckpt,
                    &bytes,
                    &bytes[..calib_len],
                )?];
                let search = crate::sparsity::search_cett_hyperparameter(&mut probes, p, 1e-4)?;
                search.cett
            } else {
                t
            };
            let calib_len = calib_tokens.min(bytes.len());
            let calib = CettCalibrator::build(&ckpt, &bytes[..calib_len])?;
            MaskRule::NeuronNorm(calib.thresholds_for(target)?)
        }
    };

    let stats = crate::analytics::collect_stats(&ckpt, &bytes, &rule)?;
    let hist = crate::analytics::histograms_from_stats(&stats, bins);
    let table = crate::analytics::token_activation_table(&stats, min_occ);

    let mut hist_csv = Csv::new(&["scope", "bin_lo", "bin_hi", "count"]);
    let mut emit = |scope: String, h: &crate::analytics::Histogram| {
        for (i, &c) in h.counts.iter().enumerate() {
            hist_csv.row(&[
                scope.clone(),
                fnum(h.edges[i]),
                fnum(h.edges[i + 1]),
                c.to_string(),
            ]);
        }
    };
    emit("aggregate".into(), &hist.aggregate);
    for (l, h) in &hist.per_layer {
        emit(format!("layer{l}"), h);
    }
    hist_csv.save(shared.out_dir.join("histogram.csv"))?;

    let mut tok_csv = Csv::new(&["token", "occurrences", "mean_activation_ratio"]);
    for &(tok, n, ratio) in &table.rows {
        tok_csv.row(&[tok.to_string(), n.to_string(), fnum(ratio)]);
    }
    tok_csv.save(shared.out_dir.join("tokens.csv"))?;
    write_json_atomic(shared.out_dir.join("stats.json"), &table)?;
    println!(
        "mean neuron frequency {:.4}; {} tokens tabulated ({} under the occurrence floor)",
        stats.mean_frequency(),
        table.rows.len(),
        table.omitted
    );

    if let Some(other_path) = compare {
        let other: crate::analytics::TokenTable =
            serde_json::from_slice(&std::fs::read(&other_path)?)?;
        let cmp = crate::analytics::pairwise_compare(&table, &other)?;
        let mut pair_csv = Csv::new(&["token", "ratio_a", "ratio_b"]);
        for &(tok, ra, rb) in &cmp.pairs {
            pair_csv.row(&[tok.to_string(), fnum(ra), fnum(rb)]);
        }
        pair_csv.save(shared.out_dir.join("pairs.csv"))?;
        write_json_atomic(
            shared.out_dir.join("compare.json"),
            &serde_json::json!({
                "pairs": cmp.pairs.len(),
                "pearson_r": cmp.pearson_r,
                "mean_abs_diff": cmp.mean_abs_diff,
                "other": other_path,
            }),
        )?;
        println!(
            "pairwise vs {}: r = {:.4}, mean |diff| = {:.4} over {} tokens",
            other_path.display(),
            cmp.pearson_r,
            cmp.mean_abs_diff,
            cmp.pairs.len()
        );
    }
    Ok(())
}
