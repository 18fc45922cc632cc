//! Population risks of hierarchical models and the closed-form bounds.
//!
//! Expectations over the power law are computed per band and per sign,
//! either by midpoint quadrature on panels uniform in `log|x|` (each panel
//! weighted by its exact probability mass) or by Monte Carlo. Quadrature
//! doubles the panel count until successive estimates agree; when the panel
//! budget runs out it falls back to Monte Carlo and says so in the result.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{scale_of, Labeler, PowerLaw, ScaleLadder};
use crate::error::{Error, Result};
use crate::io::{fmt17, write_csv};
use crate::model::{heaviside_net_eval, HierarchicalModel, ModelTemplate, WeightVector};
use crate::rng::{stream_id, Purpose};

/// Panels per band and sign used by default.
pub const DEFAULT_PANELS: usize = 2048;

/// Largest panel count per band and sign before quadrature gives up.
pub const MAX_PANELS: usize = 1 << 19;

/// Quadrature stops once successive doublings agree within
/// `QUAD_RTOL * scale + QUAD_ATOL`, where `scale` is the largest component.
pub const QUAD_RTOL: f64 = 1e-6;
pub const QUAD_ATOL: f64 = 1e-13;

/// Draws used when quadrature falls back to Monte Carlo.
pub const FALLBACK_DRAWS: usize = 100_000;

/// How an expectation is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    Quadrature { panels: usize },
    MonteCarlo { n_mc: usize, seed: u64 },
}

impl Default for Method {
    fn default() -> Self {
        Method::Quadrature { panels: DEFAULT_PANELS }
    }
}

/// A finite measure given by weighted atoms, used in place of the power law
/// when an exact discrete expectation is wanted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::InvalidDistribution("atoms and weights must be non-empty and equally long".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!("weights must be non-negative and sum to 1, got {total}")));
        }
        Ok(Self { points, weights })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Measure<'a> {
    PowerLaw(&'a PowerLaw),
    Atoms(&'a DiscreteMeasure),
}

/// How an estimate was actually obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MethodReport {
    Quadrature { panels: usize, error_estimate: f64 },
    MonteCarlo { n_mc: usize, seed: u64, stream: u64 },
    Exact { atoms: usize },
}

/// Component-wise expectations with their uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Integral {
    pub values: Vec<f64>,
    /// Monte Carlo standard errors; zero for quadrature and exact sums.
    pub std_errs: Vec<f64>,
    pub method: MethodReport,
    /// Quadrature did not converge within [`MAX_PANELS`] and Monte Carlo was used.
    pub fell_back: bool,
}

type Integrand<'a> = dyn Fn(f64) -> Result<Vec<f64>> + Sync + 'a;

/// `E[f(X)]` for a vector-valued `f` with `dim` components.
pub fn integrate(measure: Measure<'_>, method: Method, dim: usize, f: &Integrand<'_>) -> Result<Integral> {
    match measure {
        Measure::Atoms(m) => {
            let mut values = vec![0.0; dim];
            for (&x, &w) in m.points.iter().zip(&m.weights) {
                if w == 0.0 {
                    continue;
                }
                for (acc, v) in values.iter_mut().zip(f(x)?) {
                    *acc += w * v;
                }
            }
            Ok(Integral {
                values,
                std_errs: vec![0.0; dim],
                method: MethodReport::Exact { atoms: m.points.len() },
                fell_back: false,
            })
        }
        Measure::PowerLaw(law) => match method {
            Method::MonteCarlo { n_mc, seed } => monte_carlo(law, n_mc, seed, dim, f),
            Method::Quadrature { panels } => quadrature(law, panels, dim, f),
        },
    }
}

fn monte_carlo(law: &PowerLaw, n_mc: usize, seed: u64, dim: usize, f: &Integrand<'_>) -> Result<Integral> {
    if n_mc < 2 {
        return Err(Error::OutOfRange(format!("Monte Carlo needs at least 2 draws, got {n_mc}")));
    }
    let xs = sample_power_law_stream(law, n_mc, seed);
    let evals = xs.par_iter().map(|&x| f(x)).collect::<Result<Vec<_>>>()?;
    let n = n_mc as f64;
    let mut values = vec![0.0; dim];
    for e in &evals {
        for (acc, v) in values.iter_mut().zip(e) {
            *acc += v;
        }
    }
    values.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; dim];
    for e in &evals {
        for ((acc, v), m) in var.iter_mut().zip(e).zip(&values) {
            *acc += (v - m) * (v - m);
        }
    }
    let std_errs = var.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect();
    Ok(Integral {
        values,
        std_errs,
        method: MethodReport::MonteCarlo {
            n_mc,
            seed,
            stream: stream_id(Purpose::Evaluation, 0),
        },
        fell_back: false,
    })
}

/// Evaluation draws: the sampler's inverse-CDF scheme on the evaluation substream.
fn sample_power_law_stream(law: &PowerLaw, n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = crate::rng::substream(seed, Purpose::Evaluation, 0);
    (0..n)
        .map(|_| {
            let negative: bool = rng.gen();
            let m = law.magnitude_quantile(rng.gen());
            if negative {
                -m
            } else {
                m
            }
        })
        .collect()
}

fn quadrature_pass(law: &PowerLaw, panels: usize, dim: usize, f: &Integrand<'_>) -> Result<Vec<f64>> {
    let ladder = law.ladder();
    let mut total = vec![0.0; dim];
    for k in 1..=ladder.d() {
        let (lo, hi) = ladder.band(k)?;
        let (tlo, thi) = (lo.ln(), hi.ln());
        let step = (thi - tlo) / panels as f64;
        let edge = |i: usize| match i {
            0 => lo,
            i if i == panels => hi,
            i => (tlo + step * i as f64).exp(),
        };
        let parts = (0..panels)
            .into_par_iter()
            .map(|i| {
                let (a, b) = (edge(i), edge(i + 1));
                let half_mass = law.magnitude_mass(a, b) / 2.0;
                let mid = (tlo + step * (i as f64 + 0.5)).exp();
                let pos = f(mid)?;
                let neg = f(-mid)?;
                Ok(pos.iter().zip(&neg).map(|(p, n)| half_mass * (p + n)).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        for part in parts {
            for (acc, v) in total.iter_mut().zip(part) {
                *acc += v;
            }
        }
    }
    Ok(total)
}

fn quadrature(law: &PowerLaw, panels: usize, dim: usize, f: &Integrand<'_>) -> Result<Integral> {
    if panels == 0 {
        return Err(Error::OutOfRange("quadrature needs at least one panel".into()));
    }
    let mut p = panels;
    let mut prev = quadrature_pass(law, p, dim, f)?;
    while p * 2 <= MAX_PANELS {
        p *= 2;
        let next = quadrature_pass(law, p, dim, f)?;
        let scale = next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = next.iter().zip(&prev).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if diff <= QUAD_RTOL * scale + QUAD_ATOL {
            return Ok(Integral {
                values: next,
                std_errs: vec![0.0; dim],
                method: MethodReport::Quadrature {
                    panels: p,
                    error_estimate: diff,
                },
                fell_back: false,
            });
        }
        prev = next;
    }
    let mut mc = monte_carlo(law, FALLBACK_DRAWS, 0, dim, f)?;
    mc.fell_back = true;
    Ok(mc)
}

/// A risk with its per-band parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub std_err: f64,
    /// Contribution of band `k` at index `k - 1`.
    pub per_level: Vec<f64>,
    pub method: MethodReport,
    pub fell_back: bool,
}

impl RiskEstimate {
    fn from_integral(i: Integral) -> Self {
        let d = i.values.len() - 1;
        RiskEstimate {
            value: i.values[d],
            std_err: i.std_errs[d],
            per_level: i.values[..d].to_vec(),
            method: i.method,
            fell_back: i.fell_back,
        }
    }
}

/// `E|model(X) - reference(X)|`, split by band.
pub fn statistical_risk(model: &HierarchicalModel, reference: &dyn Labeler, measure: Measure<'_>, method: Method) -> Result<RiskEstimate> {
    check_measure(model.ladder(), measure)?;
    let d = model.ladder().d();
    let f = |x: f64| -> Result<Vec<f64>> {
        let k = scale_of(x, model.ladder())?;
        let dev = (model.output(x)? - reference.label(x)?).abs();
        let mut v = vec![0.0; d + 1];
        v[k - 1] = dev;
        v[d] = dev;
        Ok(v)
    };
    Ok(RiskEstimate::from_integral(integrate(measure, method, d + 1, &f)?))
}

fn check_measure(ladder: &ScaleLadder, measure: Measure<'_>) -> Result<()> {
    if let Measure::PowerLaw(law) = measure {
        if law.ladder() != ladder {
            return Err(Error::ModelMismatch("the measure and the model use different ladders".into()));
        }
    }
    Ok(())
}

/// `sum_k (E l_k(w_1^k, X) - E l_k(w_1^{k-1} w_hat_k, X))`, split by level.
pub fn chained_risk(
    w: &HierarchicalModel,
    w_hat: &HierarchicalModel,
    reference: &dyn Labeler,
    measure: Measure<'_>,
    method: Method,
) -> Result<RiskEstimate> {
    let template = w.template();
    if template != w_hat.template() {
        return Err(Error::ModelMismatch("w and w_hat must share ladder, base map and level specs".into()));
    }
    if !w.is_complete() || !w_hat.is_complete() {
        return Err(Error::ModelMismatch("chained risk needs weights at every level".into()));
    }
    check_measure(&template.ladder, measure)?;
    let d = template.d();
    let f = |x: f64| -> Result<Vec<f64>> {
        let dev = chained_deviation(template, w.weights(), w_hat.weights(), reference, x)?;
        let k = scale_of(x, &template.ladder)?;
        let mut v = vec![0.0; d + 1];
        v[k - 1] = dev;
        v[d] = dev;
        Ok(v)
    };
    Ok(RiskEstimate::from_integral(integrate(measure, method, d + 1, &f)?))
}

/// `l_k(w_1^k, x) - l_k(w_1^{k-1} w_hat_k, x)` for the band `k` of `x`.
fn chained_deviation(template: &ModelTemplate, w: &[WeightVector], w_hat: &[WeightVector], reference: &dyn Labeler, x: f64) -> Result<f64> {
    let k = scale_of(x, &template.ladder)?;
    let g = template.ladder.gamma()[k];
    let u = x / g;
    let h = template.forward(w, k - 1, u)?;
    let spec = &template.specs[k - 1];
    let y = reference.label(x)?;
    let own = (g * (h + heaviside_net_eval(spec, &w[k - 1], h)) - y).abs();
    let swapped = (g * (h + heaviside_net_eval(spec, &w_hat[k - 1], h)) - y).abs();
    Ok(own - swapped)
}

fn check_lengths(names: &[(&str, usize)]) -> Result<usize> {
    let d = names[0].1;
    if d == 0 {
        return Err(Error::Empty(format!("{} is empty", names[0].0)));
    }
    if let Some((name, len)) = names.iter().find(|(_, l)| *l != d) {
        return Err(Error::ModelMismatch(format!("{name} has {len} entries, expected {d}")));
    }
    Ok(d)
}

fn cumulative(log_sizes: &[f64]) -> Vec<f64> {
    log_sizes
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

/// Both expressions of the average chained-risk bound for given temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm3Bound {
    /// `sum_k (2 lambda_bar_k S_k + rho_k^2 / (2 n lambda_bar_k))`.
    pub statement_form: f64,
    /// `sum_k (2 lambda_bar_k S_k + 8 gamma_k^2 rho_k^2 / (n lambda_bar_k))`.
    pub proof_form: f64,
}

/// `S_k = sum_{m <= k} log|W_m|`; `gamma` holds `gamma_1..gamma_d`.
pub fn thm3_bound(lambda_bar: &[f64], log_sizes: &[f64], rho: &[f64], gamma: &[f64], n: usize) -> Result<Thm3Bound> {
    check_lengths(&[("lambda_bar", lambda_bar.len()), ("log_sizes", log_sizes.len()), ("rho", rho.len()), ("gamma", gamma.len())])?;
    if let Some(l) = lambda_bar.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::OutOfRange(format!("lambda_bar entry {l} must be positive")));
    }
    let n = n as f64;
    let s = cumulative(log_sizes);
    let mut statement_form = 0.0;
    let mut proof_form = 0.0;
    for k in 0..rho.len() {
        let entropy = 2.0 * lambda_bar[k] * s[k];
        statement_form += entropy + rho[k] * rho[k] / (2.0 * n * lambda_bar[k]);
        proof_form += entropy + 8.0 * gamma[k] * gamma[k] * rho[k] * rho[k] / (n * lambda_bar[k]);
    }
    Ok(Thm3Bound {
        statement_form,
        proof_form,
    })
}

/// `(4 / sqrt n) sum_k gamma_k rho_k sqrt(S_k)`.
pub fn cor2_bound(ladder: &ScaleLadder, rho: &[f64], log_sizes: &[f64], n: usize) -> Result<f64> {
    check_lengths(&[("rho", rho.len()), ("log_sizes", log_sizes.len()), ("ladder levels", ladder.d())])?;
    let gamma = &ladder.gamma()[1..];
    let s = cumulative(log_sizes);
    let sum: f64 = (0..rho.len()).map(|k| gamma[k] * rho[k] * s[k].sqrt()).sum();
    Ok(4.0 / (n as f64).sqrt() * sum)
}

/// `1 - beta^(1 - alpha) (1 + C1 R (1 - 1 / beta))`; may be non-positive.
pub fn powerlaw_factor(alpha: f64, beta: f64, c1: f64, radius: f64) -> f64 {
    1.0 - beta.powf(1.0 - alpha) * (1.0 + c1 * radius * (1.0 - 1.0 / beta))
}

/// `cor2_bound / powerlaw_factor`, defined only for a positive factor.
pub fn risk_bound(ladder: &ScaleLadder, rho: &[f64], log_sizes: &[f64], n: usize, alpha: f64, c1: f64) -> Result<f64> {
    let factor = powerlaw_factor(alpha, ladder.beta(), c1, ladder.radius());
    if !(factor > 0.0) {
        return Err(Error::BoundInapplicable(format!(
            "power-law factor {factor} is not positive (alpha = {alpha}, beta = {}, C1 R = {})",
            ladder.beta(),
            c1 * ladder.radius()
        )));
    }
    Ok(cor2_bound(ladder, rho, log_sizes, n)? / factor)
}

/// `(sum_k rho_k / sqrt n) sqrt(sum_m log|W_m|)`.
pub fn erm_bound(rho: &[f64], log_sizes: &[f64], n: usize) -> Result<f64> {
    check_lengths(&[("rho", rho.len()), ("log_sizes", log_sizes.len())])?;
    let total: f64 = log_sizes.iter().sum();
    Ok(rho.iter().sum::<f64>() / (n as f64).sqrt() * total.sqrt())
}

/// `(sum_k beta^(2k - d) sqrt k / sum_k beta^k sqrt d)^2` over `k = 1..=d`,
/// with `beta = R_bar^(1/d)`.
pub fn lambda_ratio(r_bar: f64, d: usize) -> Result<f64> {
    if !(r_bar > 1.0 && r_bar.is_finite()) {
        return Err(Error::OutOfRange(format!("R_bar = {r_bar} must exceed 1")));
    }
    if d == 0 {
        return Err(Error::OutOfRange("d must be at least 1".into()));
    }
    let beta = r_bar.powf(1.0 / d as f64);
    let di = d as i32;
    let num: f64 = (1..=di).map(|k| beta.powi(2 * k - di) * (k as f64).sqrt()).sum();
    let den: f64 = (1..=di).map(|k| beta.powi(k) * (d as f64).sqrt()).sum();
    Ok((num / den).powi(2))
}

/// Both sides of `factor L(w) <= L_chained(w) + slack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Check {
    pub factor: f64,
    pub statistical_risk: f64,
    pub chained_risk: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    /// `rhs - lhs`.
    pub margin: f64,
    pub pass: bool,
}

/// Evaluates the power-law comparison between statistical and chained risk.
#[allow(clippy::too_many_arguments)]
pub fn theorem4_check(
    w: &HierarchicalModel,
    w_hat: &HierarchicalModel,
    reference: &dyn Labeler,
    law: &PowerLaw,
    method: Method,
    c1: f64,
    slack: f64,
) -> Result<Theorem4Check> {
    let ladder = law.ladder();
    let factor = powerlaw_factor(law.alpha(), ladder.beta(), c1, ladder.radius());
    if !(factor > 0.0) {
        return Err(Error::BoundInapplicable(format!("power-law factor {factor} is not positive")));
    }
    let stat = statistical_risk(w, reference, Measure::PowerLaw(law), method)?;
    let chained = chained_risk(w, w_hat, reference, Measure::PowerLaw(law), method)?;
    let lhs = factor * stat.value;
    let rhs = chained.value + slack;
    Ok(Theorem4Check {
        factor,
        statistical_risk: stat.value,
        chained_risk: chained.value,
        lhs,
        rhs,
        slack,
        margin: rhs - lhs,
        pass: lhs <= rhs,
    })
}

/// Every closed-form bound for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSet {
    pub thm3_statement: f64,
    pub thm3_proof_form: f64,
    pub cor2: f64,
    pub powerlaw_factor: f64,
    /// `None` when the power-law factor is not positive; see `risk_bound_error`.
    pub risk_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk_bound_error: Option<String>,
    pub erm_bound: f64,
}

/// Bounds for `lambda_bar`, budgets `rho`, set sizes and `n` samples.
pub fn bound_set(
    ladder: &ScaleLadder,
    lambda_bar: &[f64],
    rho: &[f64],
    log_sizes: &[f64],
    n: usize,
    alpha: f64,
    c1: f64,
) -> Result<BoundSet> {
    let thm3 = thm3_bound(lambda_bar, log_sizes, rho, &ladder.gamma()[1..], n)?;
    let (risk_bound, risk_bound_error) = match risk_bound(ladder, rho, log_sizes, n, alpha, c1) {
        Ok(v) => (Some(v), None),
        Err(e @ Error::BoundInapplicable(_)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(BoundSet {
        thm3_statement: thm3.statement_form,
        thm3_proof_form: thm3.proof_form,
        cor2: cor2_bound(ladder, rho, log_sizes, n)?,
        powerlaw_factor: powerlaw_factor(alpha, ladder.beta(), c1, ladder.radius()),
        risk_bound,
        risk_bound_error,
        erm_bound: erm_bound(rho, log_sizes, n)?,
    })
}

/// Risks, bounds and diagnostics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub statistical_risk: f64,
    pub statistical_std_err: f64,
    pub per_level_statistical: Vec<f64>,
    pub chained_risk: f64,
    pub chained_std_err: f64,
    pub per_level_chained: Vec<f64>,
    pub bounds: BoundSet,
    pub lambda_ratio: f64,
    pub method: MethodReport,
    pub fell_back: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theorem4: Option<Theorem4Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theorem4_error: Option<String>,
}

/// One row of a bound sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSweepRow {
    pub n: usize,
    pub d: usize,
    pub beta: f64,
    pub alpha: f64,
    pub cor2: f64,
    pub erm: f64,
    pub risk_bound: Option<f64>,
    pub lambda_ratio: f64,
}

/// CSV with columns `n,d,beta,alpha,cor2,erm,risk_bound,lambda_ratio`; an
/// inapplicable risk bound is written as `inf`.
pub fn write_bound_sweep_csv(path: &Path, rows: &[BoundSweepRow]) -> Result<()> {
    write_csv(
        path,
        &["n", "d", "beta", "alpha", "cor2", "erm", "risk_bound", "lambda_ratio"],
        rows.iter().map(|r| {
            vec![
                r.n.to_string(),
                r.d.to_string(),
                fmt17(r.beta),
                fmt17(r.alpha),
                fmt17(r.cor2),
                fmt17(r.erm),
                r.risk_bound.map_or("inf".to_string(), fmt17),
                fmt17(r.lambda_ratio),
            ]
        }),
    )
}
