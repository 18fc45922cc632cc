//! Finite-support distributions and the information measures built on them.
//!
//! Everything is in nats. Infinite divergences are returned as
//! `f64::INFINITY` rather than as errors so that bound formulas can carry
//! them through; structural problems (mismatched supports, bad parameters)
//! are errors.

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A probability vector over an ordered list of distinct labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawDistribution<L>",
    bound(
        serialize = "L: Serialize",
        deserialize = "L: Deserialize<'de> + Clone + Eq + Hash"
    )
)]
pub struct DiscreteDistribution<L = usize> {
    support: Vec<L>,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDistribution<L> {
    support: Vec<L>,
    probs: Vec<f64>,
}

impl<L: Clone + Eq + Hash> TryFrom<RawDistribution<L>> for DiscreteDistribution<L> {
    type Error = Error;

    fn try_from(raw: RawDistribution<L>) -> Result<Self> {
        DiscreteDistribution::new(raw.support, raw.probs)
    }
}

fn sum_tolerance(n: usize) -> f64 {
    1e-12_f64.max(n as f64 * f64::EPSILON)
}

impl<L: Clone + Eq + Hash> DiscreteDistribution<L> {
    /// Validates labels and probabilities; probabilities must already sum to one.
    pub fn new(support: Vec<L>, probs: Vec<f64>) -> Result<Self> {
        check_support(&support, probs.len())?;
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("probability {p} is not a finite non-negative number")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > sum_tolerance(probs.len()) {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { support, probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(support: Vec<L>, weights: Vec<f64>) -> Result<Self> {
        check_support(&support, weights.len())?;
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidDistribution(format!("weight {w} is not a finite non-negative number")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { support, probs })
    }

    pub fn uniform(support: Vec<L>) -> Result<Self> {
        let n = support.len();
        Self::from_weights(support, vec![1.0; n])
    }

    /// All mass on `support[at]`.
    pub fn dirac(support: Vec<L>, at: usize) -> Result<Self> {
        if at >= support.len() {
            return Err(Error::OutOfRange(format!("dirac index {at} outside support of size {}", support.len())));
        }
        let mut probs = vec![0.0; support.len()];
        probs[at] = 1.0;
        Self::new(support, probs)
    }
}

impl DiscreteDistribution<usize> {
    /// Distribution over the labels `0..weights.len()`.
    pub fn indexed(weights: Vec<f64>) -> Result<Self> {
        Self::from_weights((0..weights.len()).collect(), weights)
    }
}

impl<L> DiscreteDistribution<L> {
    pub fn support(&self) -> &[L] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&L, f64)> {
        self.support.iter().zip(self.probs.iter().copied())
    }

    /// Index of the label whose cumulative mass first exceeds `u` in `[0, 1)`.
    ///
    /// Walks the support in order, so the result only depends on the
    /// ordering of the support and on `u`.
    pub fn inverse_cdf(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap above the final partial sum
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(self.probs.len() - 1)
    }
}

fn check_support<L: Eq + Hash>(support: &[L], n_probs: usize) -> Result<()> {
    if support.is_empty() {
        return Err(Error::Empty("distribution support".into()));
    }
    if support.len() != n_probs {
        return Err(Error::InvalidDistribution(format!(
            "{} labels but {} probabilities",
            support.len(),
            n_probs
        )));
    }
    let mut seen = HashSet::with_capacity(support.len());
    if !support.iter().all(|l| seen.insert(l)) {
        return Err(Error::InvalidDistribution("support labels are not unique".into()));
    }
    Ok(())
}

fn same_support<L: PartialEq>(p: &DiscreteDistribution<L>, q: &DiscreteDistribution<L>) -> Result<()> {
    if p.support != q.support {
        return Err(Error::SupportMismatch(format!(
            "supports differ (sizes {} and {})",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Conditional distribution: one row per conditioning label, all rows over
/// a shared output support.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDistribution<X, Y = usize> {
    given: Vec<X>,
    rows: Vec<DiscreteDistribution<Y>>,
}

impl<X: Clone + Eq + Hash, Y: Clone + PartialEq> ConditionalDistribution<X, Y> {
    pub fn new(given: Vec<X>, rows: Vec<DiscreteDistribution<Y>>) -> Result<Self> {
        check_support(&given, rows.len())?;
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.support != first.support) {
                return Err(Error::SupportMismatch("conditional rows use different output supports".into()));
            }
        }
        Ok(Self { given, rows })
    }

    pub fn given(&self) -> &[X] {
        &self.given
    }

    pub fn rows(&self) -> &[DiscreteDistribution<Y>] {
        &self.rows
    }
}

/// Shannon entropy `-sum p ln p`, with `0 ln 0 = 0`.
pub fn entropy<L>(p: &DiscreteDistribution<L>) -> f64 {
    entropy_of_probs(&p.probs)
}

pub(crate) fn entropy_of_probs(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `D(P||Q)`; `+inf` when `P` is not absolutely continuous w.r.t. `Q`.
pub fn relative_entropy<L: PartialEq>(p: &DiscreteDistribution<L>, q: &DiscreteDistribution<L>) -> Result<f64> {
    same_support(p, q)?;
    Ok(relative_entropy_of_probs(&p.probs, &q.probs))
}

pub(crate) fn relative_entropy_of_probs(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            total += pi * (pi / qi).ln();
        }
    }
    total.max(0.0)
}

/// `D(P_{Y|X} || Q_{Y|X} | P_X)`. Rows with zero `P_X` mass are skipped even
/// when their divergence is infinite.
pub fn conditional_relative_entropy<X: PartialEq, Y: PartialEq>(
    p: &ConditionalDistribution<X, Y>,
    q: &ConditionalDistribution<X, Y>,
    px: &DiscreteDistribution<X>,
) -> Result<f64> {
    if p.given != q.given || p.given != px.support {
        return Err(Error::SupportMismatch("conditioning supports differ".into()));
    }
    let mut total = 0.0;
    for ((prow, qrow), &w) in p.rows.iter().zip(&q.rows).zip(&px.probs) {
        same_support(prow, qrow)?;
        if w > 0.0 {
            total += w * relative_entropy_of_probs(&prow.probs, &qrow.probs);
        }
    }
    Ok(total)
}

fn check_unit_interval(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange(format!("lambda = {lambda} must lie in [0, 1]")));
    }
    Ok(())
}

/// Scaled distribution `(P)^lambda`, proportional to `p^lambda`.
///
/// At `lambda = 0` every label of the declared support gets equal mass,
/// including labels where `P` is zero.
pub fn scaled_distribution<L: Clone>(p: &DiscreteDistribution<L>, lambda: f64) -> Result<DiscreteDistribution<L>> {
    check_unit_interval(lambda)?;
    let weights: Vec<f64> = if lambda == 0.0 {
        vec![1.0; p.len()]
    } else {
        p.probs.iter().map(|x| x.powf(lambda)).collect()
    };
    normalized(p.support.clone(), weights)
}

/// Tilted distribution `(P,Q)^lambda`, proportional to `p^lambda q^(1-lambda)`.
pub fn tilted_distribution<L: Clone + PartialEq>(
    p: &DiscreteDistribution<L>,
    q: &DiscreteDistribution<L>,
    lambda: f64,
) -> Result<DiscreteDistribution<L>> {
    check_unit_interval(lambda)?;
    same_support(p, q)?;
    let weights: Vec<f64> = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| a.powf(lambda) * b.powf(1.0 - lambda))
        .collect();
    if weights.iter().all(|w| *w == 0.0) {
        return Err(Error::DegenerateTilt);
    }
    normalized(p.support.clone(), weights)
}

fn normalized<L>(support: Vec<L>, weights: Vec<f64>) -> Result<DiscreteDistribution<L>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::InvalidDistribution(format!("cannot normalize weights with total {total}")));
    }
    Ok(DiscreteDistribution {
        support,
        probs: weights.into_iter().map(|w| w / total).collect(),
    })
}

/// Rényi divergence of order `lambda > 0`; order 1 is the relative entropy.
pub fn renyi_divergence<L: PartialEq>(
    p: &DiscreteDistribution<L>,
    q: &DiscreteDistribution<L>,
    lambda: f64,
) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::OutOfRange(format!("Rényi order {lambda} must be positive and finite")));
    }
    same_support(p, q)?;
    if lambda == 1.0 {
        return Ok(relative_entropy_of_probs(&p.probs, &q.probs));
    }
    let mut sum = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            if lambda > 1.0 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        sum += pi.powf(lambda) * qi.powf(1.0 - lambda);
    }
    if sum == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((sum.ln() / (lambda - 1.0)).max(0.0))
}

fn check_temperature(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::OutOfRange(format!("temperature {lambda} must be positive and finite")));
    }
    Ok(())
}

/// `ln sum_w exp(-f(w)/lambda)`, evaluated with a max shift.
pub fn log_partition(energies: &[f64], lambda: f64) -> Result<f64> {
    check_temperature(lambda)?;
    if energies.is_empty() {
        return Err(Error::Empty("energy vector".into()));
    }
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: f64 = energies.iter().map(|e| (-(e - min) / lambda).exp()).sum();
    Ok(-min / lambda + shifted.ln())
}

/// Gibbs measure with probabilities proportional to `exp(-f(w)/lambda)`.
pub fn gibbs_measure<L>(support: Vec<L>, energies: &[f64], lambda: f64) -> Result<DiscreteDistribution<L>> {
    check_temperature(lambda)?;
    if energies.is_empty() || support.is_empty() {
        return Err(Error::Empty("energy map".into()));
    }
    if support.len() != energies.len() {
        return Err(Error::InvalidDistribution(format!(
            "{} labels but {} energies",
            support.len(),
            energies.len()
        )));
    }
    if let Some(e) = energies.iter().find(|e| !e.is_finite()) {
        return Err(Error::OutOfRange(format!("energy {e} is not finite")));
    }
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let weights = energies.iter().map(|e| (-(e - min) / lambda).exp()).collect();
    normalized(support, weights)
}

/// Soft minimum `-lambda ln((1/N) sum exp(-z_j/lambda))`.
///
/// Lies in `[min z, min z + lambda ln N]` and never exceeds the arithmetic mean.
pub fn kolmogorov_mean(z: &[f64], lambda: f64) -> Result<f64> {
    check_temperature(lambda)?;
    if z.is_empty() {
        return Err(Error::Empty("Kolmogorov mean input".into()));
    }
    let n = z.len() as f64;
    let min = z.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_shifted: f64 = z.iter().map(|v| (-(v - min) / lambda).exp()).sum::<f64>() / n;
    Ok(min - lambda * mean_shifted.ln())
}
