//! Golden round trips: regenerate samples from each published coefficient
//! row, refit, and require every coefficient back within 1% relative.

use sparselab::lawfit::{
    self, fit_law_normalized, generate_samples, golden_coefficient_rows, LawFamily,
};

#[test]
fn all_golden_rows_round_trip_within_one_percent() {
    for (name, truth) in golden_coefficient_rows() {
        let pts = generate_samples(&truth, 20);
        let fit = fit_law_normalized(&pts, truth.family, truth.normalization).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        assert!(fit.converged, "{name} did not converge");
        assert!(
            rel(fit.alpha, truth.alpha) < 0.01,
            "{name} alpha {} vs {} (rss {})",
            fit.alpha,
            truth.alpha,
            fit.rss
        );
        assert!(
            rel(fit.c, truth.c) < 0.01,
            "{name} c {} vs {} (rss {})",
            fit.c,
            truth.c,
            fit.rss
        );
        assert!(
            rel(fit.a0, truth.a0) < 0.01,
            "{name} a0 {} vs {} (rss {})",
            fit.a0,
            truth.a0,
            fit.rss
        );
        if truth.family == LawFamily::ReluLogspacePower {
            assert!(
                rel(fit.b.unwrap(), truth.b.unwrap()) < 0.01,
                "{name} b {} vs {} (rss {})",
                fit.b.unwrap(),
                truth.b.unwrap(),
                fit.rss
            );
        }
        // positivity invariants of the family
        assert!(fit.alpha > 0.0 && fit.c > 0.0 && fit.a0 > 0.0);
        // the fitted curve stays inside (0, 1) over the data range
        for p in &pts {
            let v = lawfit::eval_law(&fit, p.tokens_seen).unwrap();
            assert!(v > 0.0 && v < 1.0, "{name} predicts {v} outside (0,1)");
        }
    }
}
