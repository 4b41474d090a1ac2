//! Power-law models of activation ratio against training-data volume, and
//! the Levenberg-Marquardt fitter that estimates their coefficients.
//!
//! Two families: a decreasing logspace power law for ReLU models,
//! `A(D) = exp(b - c D^alpha) + A0`, and an increasing plain power law for
//! SiLU models, `A(D) = A0 - c / D^alpha`, with `c, alpha, A0 > 0` and `D`
//! normalized by a recorded constant before fitting. Both converge to the
//! limit ratio `A0` as data grows without bound.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One activation-ratio observation at a training-data volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityPoint {
    pub tokens_seen: f64,
    pub activation_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LawFamily {
    /// `A(D) = exp(b - c D^alpha) + A0`, decreasing.
    ReluLogspacePower,
    /// `A(D) = A0 - c / D^alpha`, increasing.
    SiluPower,
}

impl LawFamily {
    pub fn n_params(&self) -> usize {
        match self {
            LawFamily::ReluLogspacePower => 4,
            LawFamily::SiluPower => 3,
        }
    }

    /// Minimum point count: parameters plus two degrees of freedom.
    pub fn min_points(&self) -> usize {
        self.n_params() + 2
    }
}

impl std::fmt::Display for LawFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LawFamily::ReluLogspacePower => write!(f, "relu_logspace_power"),
            LawFamily::SiluPower => write!(f, "silu_power"),
        }
    }
}

/// Tokens are divided by this before fitting unless a caller overrides it;
/// suited to million-token desk runs.
pub const DEFAULT_NORMALIZATION: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LawFitResult {
    pub family: LawFamily,
    pub alpha: f64,
    /// Only the ReLU family has the logspace intercept.
    pub b: Option<f64>,
    pub c: f64,
    pub a0: f64,
    pub rss: f64,
    /// Token normalization constant applied to D.
    pub normalization: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Raw-token range of the fitted points.
    pub data_min: f64,
    pub data_max: f64,
}

impl LawFitResult {
    /// Hand-built fit, mainly for closed-form evaluation and tests.
    pub fn manual(
        family: LawFamily,
        alpha: f64,
        b: Option<f64>,
        c: f64,
        a0: f64,
        normalization: f64,
    ) -> Self {
        LawFitResult {
            family,
            alpha,
            b,
            c,
            a0,
            rss: 0.0,
            normalization,
            iterations: 0,
            converged: true,
            data_min: 0.0,
            data_max: f64::INFINITY,
        }
    }
}

/// Closed-form law evaluation at `d_tokens` raw tokens.
pub fn eval_law(fit: &LawFitResult, d_tokens: f64) -> Result<f64> {
    if d_tokens <= 0.0 {
        return Err(Error::Config(format!(
            "token count must be positive, got {d_tokens}"
        )));
    }
    let u = d_tokens / fit.normalization;
    Ok(match fit.family {
        LawFamily::ReluLogspacePower => {
            (fit.b.unwrap_or(0.0) - fit.c * u.powf(fit.alpha)).exp() + fit.a0
        }
        LawFamily::SiluPower => fit.a0 - fit.c * u.powf(-fit.alpha),
    })
}

/// dA/dD at `d_tokens` raw tokens (chain rule through the normalization).
pub fn law_derivative(fit: &LawFitResult, d_tokens: f64) -> Result<f64> {
    if d_tokens <= 0.0 {
        return Err(Error::Config(format!(
            "token count must be positive, got {d_tokens}"
        )));
    }
    let n = fit.normalization;
    let u = d_tokens / n;
    Ok(match fit.family {
        LawFamily::ReluLogspacePower => {
            let e = (fit.b.unwrap_or(0.0) - fit.c * u.powf(fit.alpha)).exp();
            -e * fit.c * fit.alpha * u.powf(fit.alpha - 1.0) / n
        }
        LawFamily::SiluPower => fit.c * fit.alpha * u.powf(-fit.alpha - 1.0) / n,
    })
}

/// Outcome of inverting a law for a target activation ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TokensForTarget {
    /// Raw tokens at which the fitted law crosses the target.
    Tokens(f64),
    /// The target lies at or past the asymptote A0; no finite data reaches it.
    BeyondLimit,
    /// The target sits on the wrong side of the fitted trend: it would need
    /// less data than the trend covers (or none at all).
    BehindTrend,
}

/// Closed-form inversion: the training-data volume at which the law
/// predicts `target_ratio`.
pub fn tokens_for_target(fit: &LawFitResult, target_ratio: f64) -> TokensForTarget {
    match fit.family {
        LawFamily::ReluLogspacePower => {
            if target_ratio <= fit.a0 {
                return TokensForTarget::BeyondLimit;
            }
            let inner = fit.b.unwrap_or(0.0) - (target_ratio - fit.a0).ln();
            if inner <= 0.0 {
                // above the D -> 0 value exp(b) + A0
                return TokensForTarget::BehindTrend;
            }
            TokensForTarget::Tokens((inner / fit.c).powf(1.0 / fit.alpha) * fit.normalization)
        }
        LawFamily::SiluPower => {
            if target_ratio >= fit.a0 {
                return TokensForTarget::BeyondLimit;
            }
            let u = (fit.c / (fit.a0 - target_ratio)).powf(1.0 / fit.alpha);
            let d = u * fit.normalization;
            if d < fit.data_min {
                // increasing law: the trend already passed this ratio
                return TokensForTarget::BehindTrend;
            }
            TokensForTarget::Tokens(d)
        }
    }
}

// ---- Levenberg-Marquardt ----

/// Internal optimization vector: [ln alpha, ln c, ln A0, b?]. Optimizing
/// logs keeps alpha, c, A0 positive without constraints.
#[derive(Clone, Copy)]
struct Theta {
    ln_alpha: f64,
    ln_c: f64,
    ln_a0: f64,
    b: f64,
}

impl Theta {
    fn as_vec(&self, family: LawFamily) -> Vec<f64> {
        match family {
            LawFamily::ReluLogspacePower => vec![self.ln_alpha, self.ln_c, self.ln_a0, self.b],
            LawFamily::SiluPower => vec![self.ln_alpha, self.ln_c, self.ln_a0],
        }
    }

    fn from_vec(v: &[f64], family: LawFamily) -> Theta {
        Theta {
            ln_alpha: v[0],
            ln_c: v[1],
            ln_a0: v[2],
            b: if family == LawFamily::ReluLogspacePower {
                v[3]
            } else {
                0.0
            },
        }
    }
}

/// Residuals and Jacobian w.r.t. the internal parameter vector.
fn residuals_jacobian(
    family: LawFamily,
    th: &Theta,
    us: &[f64],
    ys: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (alpha, c, a0) = (th.ln_alpha.exp(), th.ln_c.exp(), th.ln_a0.exp());
    let mut r = Vec::with_capacity(us.len());
    let mut jac = Vec::with_capacity(us.len());
    for (&u, &y) in us.iter().zip(ys.iter()) {
        match family {
            LawFamily::ReluLogspacePower => {
                let ua = u.powf(alpha);
                let e = (th.b - c * ua).exp();
                r.push(e + a0 - y);
                jac.push(vec![
                    -e * c * alpha * ua * u.ln(), // d/d ln(alpha)
                    -e * c * ua,                  // d/d ln(c)
                    a0,                           // d/d ln(A0)
                    e,                            // d/d b
                ]);
            }
            LawFamily::SiluPower => {
                let um = u.powf(-alpha);
                r.push(a0 - c * um - y);
                jac.push(vec![
                    c * alpha * um * u.ln(), // d/d ln(alpha)
                    -c * um,                 // d/d ln(c)
                    a0,                      // d/d ln(A0)
                ]);
            }
        }
    }
    (r, jac)
}

fn rss_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Solve (H + lambda diag(H)) x = -g in place; n <= 4.
fn solve_damped(h: &[Vec<f64>], g: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let n = g.len();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = h[i].clone();
            row[i] += lambda * h[i][i].max(1e-12);
            row.push(-g[i]);
            row
        })
        .collect();
    // gaussian elimination with partial pivoting
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..=n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = a[row][n];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

fn lm_minimize(
    family: LawFamily,
    start: Theta,
    us: &[f64],
    ys: &[f64],
) -> (Theta, f64, usize, bool) {
    let n = family.n_params();
    let mut theta = start.as_vec(family);
    let (mut r, mut jac) = residuals_jacobian(family, &Theta::from_vec(&theta, family), us, ys);
    let mut rss = rss_of(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iters = 0;
    for _ in 0..200 {
        iters += 1;
        // normal equations
        let mut h = vec![vec![0.0f64; n]; n];
        let mut g = vec![0.0f64; n];
        for (row, &ri) in jac.iter().zip(r.iter()) {
            for i in 0..n {
                g[i] += row[i] * ri;
                for j in 0..n {
                    h[i][j] += row[i] * row[j];
                }
            }
        }
        let mut accepted = false;
        for _ in 0..24 {
            let Some(delta) = solve_damped(&h, &g, lambda) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + d).collect();
            if trial.iter().any(|v| !v.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let th = Theta::from_vec(&trial, family);
            let (tr, tj) = residuals_jacobian(family, &th, us, ys);
            let trss = rss_of(&tr);
            if trss.is_finite() && trss < rss {
                let improvement = rss - trss;
                theta = trial;
                r = tr;
                jac = tj;
                rss = trss;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if improvement <= 1e-15 * rss.max(1e-30) + 1e-300 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if !accepted {
            // no downhill step found at any damping: local optimum
            converged = true;
            break;
        }
        if converged || rss < 1e-28 {
            converged = true;
            break;
        }
    }
    (Theta::from_vec(&theta, family), rss, iters, converged)
}

/// Log-linear pre-fit of (b, c) for the ReLU family given A0 and alpha:
/// regress ln(y - A0) on -u^alpha.
fn prefit_relu(us: &[f64], ys: &[f64], a0: f64, alpha: f64) -> (f64, f64) {
    let mut sx = 0.0;
    let mut sz = 0.0;
    let mut sxx = 0.0;
    let mut sxz = 0.0;
    let n = us.len() as f64;
    for (&u, &y) in us.iter().zip(ys.iter()) {
        let x = -u.powf(alpha);
        let z = (y - a0).max(1e-12).ln();
        sx += x;
        sz += z;
        sxx += x * x;
        sxz += x * z;
    }
    let denom = n * sxx - sx * sx;
    let (c, b) = if denom.abs() < 1e-300 {
        (1.0, sz / n)
    } else {
        let slope = (n * sxz - sx * sz) / denom;
        let intercept = (sz - slope * sx) / n;
        (slope, intercept)
    };
    (b, c.max(1e-9))
}

/// Pre-fit of c for the SiLU family given A0 and alpha:
/// ln(A0 - y) = ln c - alpha ln u.
fn prefit_silu(us: &[f64], ys: &[f64], a0: f64, alpha: f64) -> f64 {
    let mean: f64 = us
        .iter()
        .zip(ys.iter())
        .map(|(&u, &y)| (a0 - y).max(1e-12).ln() + alpha * u.ln())
        .sum::<f64>()
        / us.len() as f64;
    mean.exp()
}

/// Fit one family to the points with the default normalization.
pub fn fit_law(points: &[SparsityPoint], family: LawFamily) -> Result<LawFitResult> {
    fit_law_normalized(points, family, DEFAULT_NORMALIZATION)
}

/// Fit one family with an explicit token normalization constant.
///
/// Multi-start over the documented initialization grid; the lowest-RSS
/// local optimum wins. `converged = false` flags a best-effort result.
pub fn fit_law_normalized(
    points: &[SparsityPoint],
    family: LawFamily,
    normalization: f64,
) -> Result<LawFitResult> {
    if points.len() < family.min_points() {
        return Err(Error::InsufficientPoints {
            family: match family {
                LawFamily::ReluLogspacePower => "relu_logspace_power",
                LawFamily::SiluPower => "silu_power",
            },
            needed: family.min_points(),
            got: points.len(),
        });
    }
    if points
        .iter()
        .any(|p| p.tokens_seen <= 0.0 || p.activation_ratio <= 0.0)
    {
        return Err(Error::Config(
            "fitted points need positive tokens and ratios".into(),
        ));
    }
    let mut sorted: Vec<SparsityPoint> = points.to_vec();
    sorted.sort_by(|a, b| a.tokens_seen.partial_cmp(&b.tokens_seen).unwrap());
    let us: Vec<f64> = sorted.iter().map(|p| p.tokens_seen / normalization).collect();
    let ys: Vec<f64> = sorted.iter().map(|p| p.activation_ratio).collect();
    let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let a0_grid: Vec<f64> = match family {
        LawFamily::ReluLogspacePower => vec![0.5 * y_min, 0.9 * y_min],
        LawFamily::SiluPower => vec![1.05 * y_max, 1.5 * y_max],
    };
    let alpha_grid = [0.3, 1.0];

    let mut best: Option<(Theta, f64, usize, bool)> = None;
    for &a0 in &a0_grid {
        for &alpha in &alpha_grid {
            let start = match family {
                LawFamily::ReluLogspacePower => {
                    let (b, c) = prefit_relu(&us, &ys, a0, alpha);
                    Theta {
                        ln_alpha: alpha.ln(),
                        ln_c: c.ln(),
                        ln_a0: a0.ln(),
                        b,
                    }
                }
                LawFamily::SiluPower => Theta {
                    ln_alpha: alpha.ln(),
                    ln_c: prefit_silu(&us, &ys, a0, alpha).ln(),
                    ln_a0: a0.ln(),
                    b: 0.0,
                },
            };
            let run = lm_minimize(family, start, &us, &ys);
            if best.as_ref().is_none_or(|b| run.1 < b.1) {
                best = Some(run);
            }
        }
    }
    let (theta, rss, iterations, converged) = best.expect("non-empty grid");
    Ok(LawFitResult {
        family,
        alpha: theta.ln_alpha.exp(),
        b: (family == LawFamily::ReluLogspacePower).then_some(theta.b),
        c: theta.ln_c.exp(),
        a0: theta.ln_a0.exp(),
        rss,
        normalization,
        iterations,
        converged,
        data_min: sorted.first().map(|p| p.tokens_seen).unwrap_or(0.0),
        data_max: sorted.last().map(|p| p.tokens_seen).unwrap_or(0.0),
    })
}

/// Generate `n` noiseless log-spaced samples of a law across the span
/// where its varying term decays from 90% to 1% of its head value; the
/// canonical round-trip fixture.
pub fn generate_samples(fit: &LawFitResult, n: usize) -> Vec<SparsityPoint> {
    let (u_lo, u_hi) = match fit.family {
        LawFamily::ReluLogspacePower => (
            ((1.0f64 / 0.9).ln() / fit.c).powf(1.0 / fit.alpha),
            ((1.0f64 / 0.01).ln() / fit.c).powf(1.0 / fit.alpha),
        ),
        LawFamily::SiluPower => (
            (fit.c / (0.9 * fit.a0)).powf(1.0 / fit.alpha),
            (fit.c / (0.01 * fit.a0)).powf(1.0 / fit.alpha),
        ),
    };
    let (l_lo, l_hi) = (u_lo.ln(), u_hi.ln());
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            let u = (l_lo + f * (l_hi - l_lo)).exp();
            let d = u * fit.normalization;
            SparsityPoint {
                tokens_seen: d,
                activation_ratio: eval_law(fit, d).unwrap(),
            }
        })
        .collect()
}

/// The eleven published coefficient rows used as golden round-trip targets:
/// (family, alpha, b, c, A0) per model scale.
pub fn golden_coefficient_rows() -> Vec<(&'static str, LawFitResult)> {
    let relu = |alpha: f64, b: f64, c: f64, a0: f64| {
        LawFitResult::manual(LawFamily::ReluLogspacePower, alpha, Some(b), c, a0, 1e9)
    };
    let silu =
        |alpha: f64, c: f64, a0: f64| LawFitResult::manual(LawFamily::SiluPower, alpha, None, c, a0, 1e9);
    vec![
        ("relu-0.1b", relu(1.01e-1, -1.51e-2, 3.20, 6.14e-2)),
        ("relu-0.2b", relu(4.49e-1, -3.05, 2.86e-1, 6.74e-2)),
        ("relu-0.4b", relu(6.83e-1, -3.46, 7.90e-2, 6.90e-2)),
        ("relu-0.8b", relu(1.01, -3.49, 7.97e-3, 7.21e-2)),
        ("relu-1.2b", relu(1.33, -3.89, 9.03e-4, 7.82e-2)),
        ("relu-2.4b", relu(1.53, -3.46, 1.56e-4, 6.48e-2)),
        ("silu-0.1b", silu(4.79e-1, 1.02e-1, 4.09e-1)),
        ("silu-0.2b", silu(8.44e-1, 2.08e-1, 3.90e-1)),
        ("silu-0.4b", silu(1.03, 4.20e-1, 3.85e-1)),
        ("silu-0.8b", silu(9.95e-1, 5.62e-1, 3.83e-1)),
        ("silu-1.2b", silu(9.67e-1, 5.38e-1, 3.82e-1)),
    ]
}

/// Parse a points CSV with named `tokens_seen` and `activation_ratio`
/// columns (extra columns ignored).
pub fn parse_points_csv(text: &str) -> Result<Vec<SparsityPoint>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyDataset("points csv"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let t_idx = cols.iter().position(|c| *c == "tokens_seen");
    let a_idx = cols.iter().position(|c| *c == "activation_ratio");
    let (Some(t_idx), Some(a_idx)) = (t_idx, a_idx) else {
        return Err(Error::Parse {
            kind: "points csv",
            detail: "need tokens_seen and activation_ratio columns".into(),
        });
    };
    let mut points = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let parse = |idx: usize| -> Result<f64> {
            cells
                .get(idx)
                .and_then(|c| c.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    kind: "points csv",
                    detail: format!("line {}: bad number", lineno + 2),
                })
        };
        points.push(SparsityPoint {
            tokens_seen: parse(t_idx)?,
            activation_ratio: parse(a_idx)?,
        });
    }
    Ok(points)
}
