//! Multiscale entropic training.
//!
//! Levels are trained in order. Given the sampled prefix `w_1..w_{k-1}`, every
//! candidate `w` in the level set `W_k` gets the empirical scale-`k` loss
//! `l_k(w_1^{k-1} w)` and `w_k` is drawn exactly from the Gibbs measure
//! `exp(-l_k / lambda_k)` over the enumerated set, where `lambda_k` is the
//! cumulative temperature `sum_{j >= k} lambda_bar_j`.
//!
//! Losses use the total sample count `n` as denominator at every level, so a
//! band that holds few samples contributes a proportionally small loss.
//!
//! Each level draws from its own random substream, so the level-`k` draw is
//! the same whether training stops at `k`, continues, or resumes from a trace.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{scale_of, Dataset, LadderParams};
use crate::entropy::{entropy_of_probs, gibbs_measure, kolmogorov_mean, log_partition, relative_entropy_of_probs, DiscreteDistribution};
use crate::error::{Error, Result};
use crate::model::{HierarchicalModel, LevelWeightSet, ModelTemplate, WeightVector};
use crate::rng::{stream_id, substream, Purpose};

/// Largest product set searched by global ERM.
pub const GLOBAL_ERM_CAP: u128 = 10_000_000;

/// Largest joint support accepted by the objective and congruency oracles.
pub const JOINT_CAP: usize = 10_000;

/// Per-level temperatures: `lambda_bar_k > 0` and their suffix sums `lambda_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub lambda_bar: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl TemperatureSchedule {
    pub fn from_lambda_bar(lambda_bar: Vec<f64>) -> Result<Self> {
        if lambda_bar.is_empty() {
            return Err(Error::Empty("temperature schedule".into()));
        }
        if let Some(v) = lambda_bar.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::OutOfRange(format!("lambda_bar entry {v} must be positive and finite")));
        }
        let mut lambda = vec![0.0; lambda_bar.len()];
        let mut acc = 0.0;
        for k in (0..lambda_bar.len()).rev() {
            acc += lambda_bar[k];
            lambda[k] = acc;
        }
        Ok(Self { lambda_bar, lambda })
    }

    pub fn d(&self) -> usize {
        self.lambda_bar.len()
    }
}

/// `lambda_bar_k = 2 gamma_k rho_k / sqrt(n sum_{m <= k} log|W_m|)` from log set sizes.
pub fn lambda_schedule_from_logs(gamma: &[f64], rho: &[f64], n: usize, log_sizes: &[f64]) -> Result<TemperatureSchedule> {
    let d = rho.len();
    if gamma.len() != d || log_sizes.len() != d {
        return Err(Error::ModelMismatch(format!(
            "schedule inputs disagree on d: {} scales, {} budgets, {} set sizes",
            gamma.len(),
            d,
            log_sizes.len()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("n must be at least 1".into()));
    }
    if let Some(v) = log_sizes.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::OutOfRange(format!("log set size {v} must be positive")));
    }
    let mut cumulative = 0.0;
    let lambda_bar = (0..d)
        .map(|k| {
            cumulative += log_sizes[k];
            2.0 * gamma[k] * rho[k] / (n as f64 * cumulative).sqrt()
        })
        .collect();
    TemperatureSchedule::from_lambda_bar(lambda_bar)
}

/// The schedule for a ladder (`gamma_1..gamma_d`) and integer set sizes, each at least 2.
pub fn lambda_schedule(gamma: &[f64], rho: &[f64], n: usize, set_sizes: &[u128]) -> Result<TemperatureSchedule> {
    if let Some(s) = set_sizes.iter().find(|s| **s < 2) {
        return Err(Error::OutOfRange(format!("weight set of size {s}: every level needs at least 2 candidates")));
    }
    let logs: Vec<f64> = set_sizes.iter().map(|&s| (s as f64).ln()).collect();
    lambda_schedule_from_logs(gamma, rho, n, &logs)
}

/// Template, candidate sets and temperatures for one training run.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub template: ModelTemplate,
    pub sets: Vec<LevelWeightSet>,
    pub schedule: TemperatureSchedule,
}

impl TrainSetup {
    pub fn new(template: ModelTemplate, sets: Vec<LevelWeightSet>, schedule: TemperatureSchedule) -> Result<Self> {
        let d = template.d();
        if sets.len() != d || schedule.d() != d {
            return Err(Error::ModelMismatch(format!(
                "d = {d} but {} weight sets and {} temperatures",
                sets.len(),
                schedule.d()
            )));
        }
        for (i, s) in sets.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Empty(format!("weight set of level {}", i + 1)));
            }
            if s.spec != template.specs[i] {
                return Err(Error::ModelMismatch(format!("weight set {} was built for another level spec", i + 1)));
            }
        }
        Ok(Self { template, sets, schedule })
    }

    /// Uses the default schedule for `n` training samples.
    pub fn with_default_schedule(template: ModelTemplate, sets: Vec<LevelWeightSet>, n: usize) -> Result<Self> {
        let gamma = &template.ladder.gamma()[1..];
        let rho: Vec<f64> = template.specs.iter().map(|s| s.rho).collect();
        let sizes: Vec<u128> = sets.iter().map(|s| s.len() as u128).collect();
        let schedule = lambda_schedule(gamma, &rho, n, &sizes)?;
        Self::new(template, sets, schedule)
    }

    pub fn d(&self) -> usize {
        self.template.d()
    }

    pub fn set_sizes(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.len()).collect()
    }
}

fn check_dataset(template: &ModelTemplate, data: &Dataset) -> Result<()> {
    if data.n() == 0 {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    if LadderParams::from(data.ladder().clone()) != LadderParams::from(template.ladder.clone()) {
        return Err(Error::ModelMismatch("dataset and model use different ladders".into()));
    }
    Ok(())
}

/// Samples of band `k` as `(x / gamma_k, y)`.
fn band_samples(template: &ModelTemplate, data: &Dataset, k: usize) -> Result<Vec<(f64, f64)>> {
    let g = template.ladder.gamma()[k];
    let mut out = Vec::new();
    for (&x, &y) in data.instances.iter().zip(&data.labels) {
        if scale_of(x, &template.ladder)? == k {
            out.push((x / g, y));
        }
    }
    Ok(out)
}

/// `l_k` of every candidate in `set`, for the level after `prefix`, in set order.
pub fn level_losses(template: &ModelTemplate, prefix: &[WeightVector], set: &LevelWeightSet, data: &Dataset) -> Result<Vec<f64>> {
    check_dataset(template, data)?;
    template.check_prefix(prefix)?;
    let k = prefix.len() + 1;
    if k > template.d() {
        return Err(Error::ModelMismatch(format!("prefix already covers all {} levels", template.d())));
    }
    if set.spec != template.specs[k - 1] {
        return Err(Error::ModelMismatch(format!("weight set does not belong to level {k}")));
    }
    let g = template.ladder.gamma()[k];
    let n = data.n() as f64;
    let inputs = band_samples(template, data, k)?
        .into_iter()
        .map(|(u, y)| Ok((template.forward(prefix, k - 1, u)?, y)))
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let spec = &template.specs[k - 1];
    Ok(set
        .vectors()
        .par_iter()
        .map(|w| {
            inputs
                .iter()
                .map(|&(h, y)| (g * (h + crate::model::heaviside_net_eval(spec, w, h)) - y).abs())
                .sum::<f64>()
                / n
        })
        .collect())
}

/// `(1/n) sum_{x_i in band k} |gamma_k h_k(x_i / gamma_k) - y_i|` with `k = prefix.len()`.
pub fn level_empirical_loss(template: &ModelTemplate, prefix: &[WeightVector], data: &Dataset) -> Result<f64> {
    check_dataset(template, data)?;
    template.check_prefix(prefix)?;
    let k = prefix.len();
    if k == 0 {
        return Err(Error::ModelMismatch("level losses start at k = 1".into()));
    }
    let g = template.ladder.gamma()[k];
    let mut total = 0.0;
    for (u, y) in band_samples(template, data, k)? {
        total += (g * template.forward(prefix, k, u)? - y).abs();
    }
    Ok(total / data.n() as f64)
}

/// Soft minimum of the candidate losses at temperature `lambda`.
pub fn kolmogorov_level_loss(
    template: &ModelTemplate,
    prefix: &[WeightVector],
    data: &Dataset,
    lambda: f64,
    set: &LevelWeightSet,
) -> Result<f64> {
    kolmogorov_mean(&level_losses(template, prefix, set, data)?, lambda)
}

/// Gibbs measure over set indices with weights `exp(-l_k / lambda)`.
pub fn gibbs_level_distribution(
    template: &ModelTemplate,
    prefix: &[WeightVector],
    data: &Dataset,
    lambda: f64,
    set: &LevelWeightSet,
) -> Result<DiscreteDistribution> {
    let losses = level_losses(template, prefix, set, data)?;
    gibbs_measure((0..losses.len()).collect(), &losses, lambda)
}

/// What happened at one level of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: usize,
    pub lambda: f64,
    pub lambda_bar: f64,
    pub log_partition: f64,
    pub chosen_index: usize,
    pub chosen_weights: Vec<i64>,
    pub chosen_loss: f64,
    pub min_loss: f64,
    pub set_size: usize,
    pub stream_id: u64,
    /// Gibbs probabilities in set order; kept in memory only.
    #[serde(skip)]
    pub distribution: Option<Vec<f64>>,
}

/// The sampled prefix and its per-level trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub levels: Vec<LevelTrace>,
}

impl TrainState {
    pub fn prefix_len(&self) -> usize {
        self.levels.len()
    }
}

/// Draws `w_1`, then `w_2 | w_1`, and so on up to level `min(d, stop_after)`.
///
/// With `resume`, the levels already in the trace are reused (after checking
/// they match the setup) and sampling continues from the next level.
pub fn train_multiscale_entropic(
    setup: &TrainSetup,
    data: &Dataset,
    seed: u64,
    stop_after: Option<usize>,
    resume: Option<&TrainState>,
) -> Result<(HierarchicalModel, TrainState)> {
    let template = &setup.template;
    check_dataset(template, data)?;
    let d = setup.d();
    let last = stop_after.map_or(d, |s| s.min(d));
    let mut state = TrainState {
        seed,
        levels: Vec::new(),
    };
    let mut prefix: Vec<WeightVector> = Vec::new();
    if let Some(prev) = resume {
        if prev.seed != seed {
            return Err(Error::ModelMismatch(format!("trace was sampled with seed {} but seed {seed} was given", prev.seed)));
        }
        if prev.levels.len() > last {
            return Err(Error::ModelMismatch(format!(
                "trace already holds {} levels, more than the requested {last}",
                prev.levels.len()
            )));
        }
        for (i, t) in prev.levels.iter().enumerate() {
            let set = &setup.sets[i];
            let w = set.get(t.chosen_index).filter(|w| w.flat() == t.chosen_weights).ok_or_else(|| {
                Error::ModelMismatch(format!("trace level {} does not match the weight set", i + 1))
            })?;
            if t.level != i + 1 || t.set_size != set.len() || t.lambda != setup.schedule.lambda[i] {
                return Err(Error::ModelMismatch(format!("trace level {} was produced by a different setup", i + 1)));
            }
            prefix.push(w.clone());
        }
        state.levels = prev.levels.clone();
    }
    for k in prefix.len() + 1..=last {
        let set = &setup.sets[k - 1];
        let lambda = setup.schedule.lambda[k - 1];
        let losses = level_losses(template, &prefix, set, data)?;
        let dist = gibbs_measure((0..losses.len()).collect(), &losses, lambda)?;
        let mut rng = substream(seed, Purpose::Training, k as u64);
        let u: f64 = rng.gen();
        let idx = dist.inverse_cdf(u);
        let w = set.vectors()[idx].clone();
        state.levels.push(LevelTrace {
            level: k,
            lambda,
            lambda_bar: setup.schedule.lambda_bar[k - 1],
            log_partition: log_partition(&losses, lambda)?,
            chosen_index: idx,
            chosen_weights: w.flat(),
            chosen_loss: losses[idx],
            min_loss: losses.iter().copied().fold(f64::INFINITY, f64::min),
            set_size: set.len(),
            stream_id: stream_id(Purpose::Training, k as u64),
            distribution: Some(dist.probs().to_vec()),
        });
        prefix.push(w);
    }
    Ok((HierarchicalModel::new(template.clone(), prefix)?, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErmMode {
    GreedyPerLevel,
    Global,
}

/// Empirical risk minimization over the product of the level sets.
///
/// Greedy mode fixes the best `w_k` level by level; global mode minimizes
/// `sum_k l_k` over all tuples. Ties go to the earliest candidate in
/// enumeration (lexicographic tuple) order. Returns the model and its
/// summed empirical loss.
pub fn train_erm(template: &ModelTemplate, sets: &[LevelWeightSet], data: &Dataset, mode: ErmMode) -> Result<(HierarchicalModel, f64)> {
    check_dataset(template, data)?;
    if sets.len() != template.d() {
        return Err(Error::ModelMismatch(format!("{} weight sets for d = {}", sets.len(), template.d())));
    }
    match mode {
        ErmMode::GreedyPerLevel => {
            let mut prefix = Vec::new();
            let mut total = 0.0;
            for set in sets {
                let losses = level_losses(template, &prefix, set, data)?;
                let (idx, loss) = argmin(&losses).ok_or_else(|| Error::Empty(format!("weight set {}", set.level)))?;
                total += loss;
                prefix.push(set.vectors()[idx].clone());
            }
            Ok((HierarchicalModel::new(template.clone(), prefix)?, total))
        }
        ErmMode::Global => {
            let product = sets.iter().try_fold(1u128, |acc, s| acc.checked_mul(s.len() as u128));
            match product {
                Some(p) if p <= GLOBAL_ERM_CAP => {}
                _ => {
                    return Err(Error::TooLarge(format!(
                        "global ERM over {} tuples exceeds the cap {GLOBAL_ERM_CAP}",
                        product.map_or("more than 2^128".to_string(), |p| p.to_string())
                    )))
                }
            }
            let mut best: Option<(f64, Vec<WeightVector>)> = None;
            let mut prefix = Vec::new();
            global_search(template, sets, data, &mut prefix, 0.0, &mut best)?;
            let (loss, weights) = best.ok_or_else(|| Error::Empty("no candidate tuples".into()))?;
            Ok((HierarchicalModel::new(template.clone(), weights)?, loss))
        }
    }
}

fn argmin(v: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|(_, b)| x < b) {
            best = Some((i, x));
        }
    }
    best
}

fn global_search(
    template: &ModelTemplate,
    sets: &[LevelWeightSet],
    data: &Dataset,
    prefix: &mut Vec<WeightVector>,
    acc: f64,
    best: &mut Option<(f64, Vec<WeightVector>)>,
) -> Result<()> {
    let k = prefix.len();
    if k == sets.len() {
        if best.as_ref().is_none_or(|(b, _)| acc < *b) {
            *best = Some((acc, prefix.clone()));
        }
        return Ok(());
    }
    let losses = level_losses(template, prefix, &sets[k], data)?;
    for (w, loss) in sets[k].vectors().iter().zip(losses) {
        prefix.push(w.clone());
        global_search(template, sets, data, prefix, acc + loss, best)?;
        prefix.pop();
    }
    Ok(())
}

/// Level losses for every prefix of the product of the level sets.
///
/// `levels[k-1]` holds `l_k` indexed by the row-major index of
/// `(i_1, ..., i_k)`, so the children of a prefix are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    sizes: Vec<usize>,
    levels: Vec<Vec<f64>>,
}

impl LossTable {
    pub fn from_levels(sizes: Vec<usize>, levels: Vec<Vec<f64>>) -> Result<Self> {
        if sizes.is_empty() || sizes.len() != levels.len() {
            return Err(Error::ModelMismatch("loss table needs one level per set size".into()));
        }
        let mut expected = 1usize;
        for (k, &s) in sizes.iter().enumerate() {
            if s == 0 {
                return Err(Error::Empty(format!("weight set {}", k + 1)));
            }
            expected = expected
                .checked_mul(s)
                .filter(|&e| e <= JOINT_CAP)
                .ok_or_else(|| Error::TooLarge(format!("joint support exceeds {JOINT_CAP} atoms")))?;
            if levels[k].len() != expected {
                return Err(Error::ModelMismatch(format!("level {} table has {} entries, expected {expected}", k + 1, levels[k].len())));
            }
        }
        Ok(Self { sizes, levels })
    }

    /// Evaluates every prefix of `sets` on `data`.
    pub fn build(template: &ModelTemplate, sets: &[LevelWeightSet], data: &Dataset) -> Result<Self> {
        let sizes: Vec<usize> = sets.iter().map(|s| s.len()).collect();
        let atoms = sizes.iter().try_fold(1usize, |a, &s| a.checked_mul(s).filter(|&v| v <= JOINT_CAP));
        if atoms.is_none() {
            return Err(Error::TooLarge(format!("joint support exceeds {JOINT_CAP} atoms")));
        }
        let mut levels: Vec<Vec<f64>> = vec![Vec::new(); sets.len()];
        let mut prefix = Vec::new();
        fill_table(template, sets, data, &mut prefix, &mut levels)?;
        Self::from_levels(sizes, levels)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn d(&self) -> usize {
        self.sizes.len()
    }

    pub fn atoms(&self) -> usize {
        self.sizes.iter().product()
    }

    /// `l_k` for the children of a length-`(k-1)` prefix with row-major index `parent`.
    pub fn children(&self, k: usize, parent: usize) -> &[f64] {
        let s = self.sizes[k - 1];
        &self.levels[k - 1][parent * s..(parent + 1) * s]
    }

    /// Index tuples of every atom, lexicographic.
    pub fn tuples(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for &s in &self.sizes {
            out = out
                .into_iter()
                .flat_map(|t| {
                    (0..s).map(move |i| {
                        let mut t = t.clone();
                        t.push(i);
                        t
                    })
                })
                .collect();
        }
        out
    }

    fn check_tuple(&self, t: &[usize]) -> Result<()> {
        if t.len() != self.d() || t.iter().zip(&self.sizes).any(|(i, s)| i >= s) {
            return Err(Error::SupportMismatch(format!("tuple {t:?} is not in the product of sets with sizes {:?}", self.sizes)));
        }
        Ok(())
    }

    /// Row-major indices of the prefixes of `t` of lengths `0..=d`.
    fn prefix_indices(&self, t: &[usize]) -> Vec<usize> {
        let mut idx = vec![0usize; t.len() + 1];
        for k in 0..t.len() {
            idx[k + 1] = idx[k] * self.sizes[k] + t[k];
        }
        idx
    }
}

fn fill_table(
    template: &ModelTemplate,
    sets: &[LevelWeightSet],
    data: &Dataset,
    prefix: &mut Vec<WeightVector>,
    levels: &mut [Vec<f64>],
) -> Result<()> {
    let k = prefix.len();
    if k == sets.len() {
        return Ok(());
    }
    let losses = level_losses(template, prefix, &sets[k], data)?;
    levels[k].extend_from_slice(&losses);
    for w in sets[k].vectors() {
        prefix.push(w.clone());
        fill_table(template, sets, data, prefix, levels)?;
        prefix.pop();
    }
    Ok(())
}

fn check_schedule(table: &LossTable, schedule: &TemperatureSchedule) -> Result<()> {
    if schedule.d() != table.d() {
        return Err(Error::ModelMismatch(format!("{} temperatures for d = {}", schedule.d(), table.d())));
    }
    Ok(())
}

/// Conditional Gibbs probabilities `P*(w_k | prefix)` for the children of `parent`.
fn optimal_conditional(table: &LossTable, schedule: &TemperatureSchedule, k: usize, parent: usize) -> Result<Vec<f64>> {
    let losses = table.children(k, parent);
    Ok(gibbs_measure((0..losses.len()).collect(), losses, schedule.lambda[k - 1])?.probs().to_vec())
}

/// The sequential Gibbs joint `P*_{W_1} P*_{W_2|W_1} ...` over all tuples.
pub fn optimal_joint(table: &LossTable, schedule: &TemperatureSchedule) -> Result<DiscreteDistribution<Vec<usize>>> {
    check_schedule(table, schedule)?;
    let tuples = table.tuples();
    let mut probs = Vec::with_capacity(tuples.len());
    for t in &tuples {
        let idx = table.prefix_indices(t);
        let mut p = 1.0;
        for k in 1..=table.d() {
            p *= optimal_conditional(table, schedule, k, idx[k - 1])?[t[k - 1]];
        }
        probs.push(p);
    }
    DiscreteDistribution::from_weights(tuples, probs)
}

/// Marginal probabilities of length-`k` prefixes, by row-major index.
fn prefix_marginals(table: &LossTable, p: &DiscreteDistribution<Vec<usize>>) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(table.d() + 1);
    let mut len = 1usize;
    out.push(vec![0.0; 1]);
    for &s in table.sizes() {
        len *= s;
        out.push(vec![0.0; len]);
    }
    for (t, q) in p.iter() {
        table.check_tuple(t)?;
        let idx = table.prefix_indices(t);
        for (k, &i) in idx.iter().enumerate() {
            out[k][i] += q;
        }
    }
    Ok(out)
}

/// `E_P[sum_k (l_k - lbar_k)] - sum_k lambda_bar_k H(W_1^k)`, where `lbar_k`
/// is the soft-min of the sibling losses at temperature `lambda_k`.
pub fn multiscale_objective(table: &LossTable, p: &DiscreteDistribution<Vec<usize>>, schedule: &TemperatureSchedule) -> Result<f64> {
    check_schedule(table, schedule)?;
    let marginals = prefix_marginals(table, p)?;
    let mut expected = 0.0;
    for (t, q) in p.iter() {
        if q == 0.0 {
            continue;
        }
        let idx = table.prefix_indices(t);
        let mut acc = 0.0;
        for k in 1..=table.d() {
            let siblings = table.children(k, idx[k - 1]);
            acc += siblings[t[k - 1]] - kolmogorov_mean(siblings, schedule.lambda[k - 1])?;
        }
        expected += q * acc;
    }
    let entropy_terms: f64 = (1..=table.d())
        .map(|k| schedule.lambda_bar[k - 1] * entropy_of_probs(&marginals[k]))
        .sum();
    Ok(expected - entropy_terms)
}

/// `sum_k lambda_k D(P_{W_k | W_1^{k-1}} || P*_{W_k | W_1^{k-1}} | P_{W_1^{k-1}})`.
pub fn chained_divergence(table: &LossTable, p: &DiscreteDistribution<Vec<usize>>, schedule: &TemperatureSchedule) -> Result<f64> {
    check_schedule(table, schedule)?;
    let marginals = prefix_marginals(table, p)?;
    let mut total = 0.0;
    for k in 1..=table.d() {
        let s = table.sizes()[k - 1];
        let mut level = 0.0;
        for (parent, &mass) in marginals[k - 1].iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let cond: Vec<f64> = marginals[k][parent * s..(parent + 1) * s].iter().map(|q| q / mass).collect();
            let star = optimal_conditional(table, schedule, k, parent)?;
            level += mass * relative_entropy_of_probs(&cond, &star);
        }
        total += schedule.lambda[k - 1] * level;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongruencyReport {
    pub trials: usize,
    pub atoms: usize,
    /// Largest `|(L(P) - R(P)) - (L(P*) - R(P*))|` over the sampled `P`.
    pub max_gap: f64,
    pub objective_at_optimum: f64,
    /// Smallest `L(P) - L(P*)`; non-negative when `P*` is the minimizer.
    pub min_margin: f64,
    /// Number of point masses among the sampled `P`.
    pub diracs: usize,
}

/// Random joints on the product set: every fourth is a point mass, the rest
/// have exponential weights on a random subset of atoms.
pub fn random_joints(table: &LossTable, trials: usize, seed: u64) -> Result<Vec<DiscreteDistribution<Vec<usize>>>> {
    let tuples = table.tuples();
    let mut rng = substream(seed, Purpose::Evaluation, 0);
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let weights: Vec<f64> = if t % 4 == 0 {
            let at = rng.gen_range(0..tuples.len());
            (0..tuples.len()).map(|i| if i == at { 1.0 } else { 0.0 }).collect()
        } else {
            let keep: f64 = rng.gen_range(0.3..1.0);
            let mut w: Vec<f64> = (0..tuples.len())
                .map(|_| {
                    let on = rng.gen::<f64>() < keep;
                    let e = -(1.0 - rng.gen::<f64>()).ln();
                    if on {
                        e
                    } else {
                        0.0
                    }
                })
                .collect();
            if w.iter().all(|v| *v == 0.0) {
                w[rng.gen_range(0..tuples.len())] = 1.0;
            }
            w
        };
        out.push(DiscreteDistribution::from_weights(tuples.clone(), weights)?);
    }
    Ok(out)
}

/// Checks that `L(P) - R(P)` does not depend on `P` and that `P*` minimizes `L`.
pub fn congruency_gap(table: &LossTable, schedule: &TemperatureSchedule, trials: usize, seed: u64) -> Result<CongruencyReport> {
    let star = optimal_joint(table, schedule)?;
    let l_star = multiscale_objective(table, &star, schedule)?;
    let reference = l_star - chained_divergence(table, &star, schedule)?;
    let mut max_gap: f64 = 0.0;
    let mut min_margin = f64::INFINITY;
    let mut diracs = 0;
    for p in random_joints(table, trials, seed)? {
        if p.probs().iter().filter(|q| **q > 0.0).count() == 1 {
            diracs += 1;
        }
        let l = multiscale_objective(table, &p, schedule)?;
        let r = chained_divergence(table, &p, schedule)?;
        max_gap = max_gap.max(((l - r) - reference).abs());
        min_margin = min_margin.min(l - l_star);
    }
    Ok(CongruencyReport {
        trials,
        atoms: table.atoms(),
        max_gap,
        objective_at_optimum: l_star,
        min_margin,
        diracs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_ladder, generate_dataset, DatasetMode, PowerLaw};
    use crate::model::{BaseMap, LevelSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn dataset(points: &[(f64, f64)], d: usize) -> Dataset {
        let ladder = build_ladder(0.25, 2.0, d).unwrap();
        Dataset {
            instances: points.iter().map(|p| p.0).collect(),
            labels: points.iter().map(|p| p.1).collect(),
            seed: 0,
            mode: DatasetMode::PlantedTeacher,
            target: "manual".into(),
            law: PowerLaw::new(1.0, ladder).unwrap(),
        }
    }

    fn template(d: usize, eta: f64, rho: f64) -> ModelTemplate {
        let ladder = build_ladder(0.25, 2.0, d).unwrap();
        let specs = vec![LevelSpec::new(2, eta, rho, 2.0).unwrap(); d];
        ModelTemplate::new(ladder, BaseMap::Linear { slope: 1.0 }, specs).unwrap()
    }

    fn teacher_setup(d: usize, n: usize, seed: u64) -> (TrainSetup, HierarchicalModel, Dataset) {
        let t = template(d, 0.1, 0.2);
        let sets = t.weight_sets(1000).unwrap();
        let teacher = HierarchicalModel::random_from_sets(t.clone(), &sets, seed).unwrap();
        let law = PowerLaw::new(1.0, t.ladder.clone()).unwrap();
        let data = generate_dataset(&teacher, &law, n, seed).unwrap();
        (TrainSetup::with_default_schedule(t, sets, n).unwrap(), teacher, data)
    }

    #[test]
    fn schedule_examples() {
        let s = lambda_schedule_from_logs(&[0.5, 1.0], &[1.0, 2.0], 100, &[1.0, 1.0]).unwrap();
        assert!((s.lambda_bar[0] - 0.1).abs() < 1e-15);
        assert!((s.lambda_bar[1] - 0.4 / 2f64.sqrt()).abs() < 1e-15);
        assert!((s.lambda[0] - 0.382842712474619).abs() < 1e-12);
        let one = lambda_schedule(&[1.0], &[3.0], 16, &[10]).unwrap();
        assert!((one.lambda[0] - 2.0 * 3.0 / (16.0 * 10f64.ln()).sqrt()).abs() < 1e-15);
        let big = lambda_schedule(&[0.5, 1.0], &[1.0, 2.0], 1 << 40, &[3, 3]).unwrap();
        assert!(big.lambda.iter().all(|l| *l < 1e-5));
        assert!(lambda_schedule(&[0.5, 1.0], &[1.0, 2.0], 10, &[3, 1]).is_err());
        assert!(TemperatureSchedule::from_lambda_bar(vec![0.1, 0.0]).is_err());
    }

    #[test]
    fn empirical_loss_examples() {
        let t = template(1, 0.1, 1.0);
        let data = dataset(&[(0.3, 0.6)], 1);
        let zero = WeightVector::zeros(2, 0.1);
        assert!((level_empirical_loss(&t, std::slice::from_ref(&zero), &data).unwrap() - 0.3).abs() < 1e-15);
        let t2 = template(2, 0.1, 1.0);
        let far = dataset(&[(0.9, 0.9), (-0.6, 0.0)], 2);
        assert_eq!(level_empirical_loss(&t2, std::slice::from_ref(&zero), &far).unwrap(), 0.0);
        assert!((level_empirical_loss(&t2, &[zero.clone(), zero.clone()], &far).unwrap() - 0.3).abs() < 1e-15);
        assert!(level_empirical_loss(&t2, &[], &far).is_err());
    }

    #[test]
    fn teacher_has_zero_loss() {
        let (setup, teacher, data) = teacher_setup(3, 60, 4);
        for k in 1..=3 {
            assert_eq!(level_empirical_loss(&setup.template, &teacher.weights()[..k], &data).unwrap(), 0.0);
        }
    }

    #[test]
    fn candidate_losses_match_direct_evaluation() {
        let (setup, teacher, data) = teacher_setup(3, 40, 9);
        let prefix = &teacher.weights()[..1];
        let losses = level_losses(&setup.template, prefix, &setup.sets[1], &data).unwrap();
        for (w, l) in setup.sets[1].vectors().iter().zip(&losses) {
            let mut full = prefix.to_vec();
            full.push(w.clone());
            assert!((level_empirical_loss(&setup.template, &full, &data).unwrap() - l).abs() < 1e-14);
        }
    }

    #[test]
    fn kolmogorov_and_gibbs_examples() {
        let t = template(1, 1.0, 1.0);
        let spec = t.specs[0].clone();
        let zero = WeightVector::zeros(2, 1.0);
        let plus = WeightVector::from_flat(&[0, 0, 1], 1.0).unwrap();
        let set = LevelWeightSet::from_vectors(1, &spec, vec![zero, plus]).unwrap();
        // one sample with y = x, so the losses are (0, 1)
        let data = dataset(&[(0.3, 0.3)], 1);
        let g = kolmogorov_level_loss(&t, &[], &data, 1.0, &set).unwrap();
        assert!((g - 0.3798854930417224).abs() < 1e-12);
        let dist = gibbs_level_distribution(&t, &[], &data, 1.0 / 2f64.ln(), &set).unwrap();
        assert!((dist.probs()[0] - 2.0 / 3.0).abs() < 1e-12);
        let cold = gibbs_level_distribution(&t, &[], &data, 1e-3, &set).unwrap();
        assert!(cold.probs()[0] >= 0.999999);
        let flat = dataset(&[(0.3, 0.3), (-0.3, -0.3)], 1);
        let minus = WeightVector::from_flat(&[0, 0, -1], 1.0).unwrap();
        let pm = LevelWeightSet::from_vectors(1, &spec, vec![minus, WeightVector::from_flat(&[0, 0, 1], 1.0).unwrap()]).unwrap();
        let uni = gibbs_level_distribution(&t, &[], &flat, 0.7, &pm).unwrap();
        assert!((uni.probs()[0] - 0.5).abs() < 1e-15);
        assert!((kolmogorov_level_loss(&t, &[], &flat, 0.7, &pm).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn training_is_deterministic_and_prefix_stable() {
        let (setup, _, data) = teacher_setup(4, 50, 2);
        let (full, trace) = train_multiscale_entropic(&setup, &data, 77, None, None).unwrap();
        let (again, _) = train_multiscale_entropic(&setup, &data, 77, None, None).unwrap();
        assert_eq!(full, again);
        assert_eq!(trace.levels.len(), 4);
        for k in 1..=3 {
            let (part, partial) = train_multiscale_entropic(&setup, &data, 77, Some(k), None).unwrap();
            assert_eq!(part.weights(), &full.weights()[..k]);
            let (resumed, state) = train_multiscale_entropic(&setup, &data, 77, None, Some(&partial)).unwrap();
            assert_eq!(resumed, full);
            assert_eq!(state.levels.iter().map(|l| l.chosen_index).collect::<Vec<_>>(),
                       trace.levels.iter().map(|l| l.chosen_index).collect::<Vec<_>>());
        }
        let (_, partial) = train_multiscale_entropic(&setup, &data, 77, Some(2), None).unwrap();
        assert!(train_multiscale_entropic(&setup, &data, 78, None, Some(&partial)).is_err());
    }

    #[test]
    fn trace_round_trips_without_snapshots() {
        let (setup, _, data) = teacher_setup(2, 30, 5);
        let (_, trace) = train_multiscale_entropic(&setup, &data, 3, Some(1), None).unwrap();
        let text = serde_json::to_string(&trace).unwrap();
        assert!(!text.contains("distribution"));
        let back: TrainState = serde_json::from_str(&text).unwrap();
        let (a, _) = train_multiscale_entropic(&setup, &data, 3, None, Some(&back)).unwrap();
        let (b, _) = train_multiscale_entropic(&setup, &data, 3, None, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cold_training_recovers_the_teacher() {
        let (setup, teacher, data) = teacher_setup(3, 200, 12);
        let cold = TrainSetup::new(
            setup.template.clone(),
            setup.sets.clone(),
            TemperatureSchedule::from_lambda_bar(vec![1e-9; 3]).unwrap(),
        )
        .unwrap();
        let (greedy, loss) = train_erm(&setup.template, &setup.sets, &data, ErmMode::GreedyPerLevel).unwrap();
        assert_eq!(loss, 0.0);
        let (global, gloss) = train_erm(&setup.template, &setup.sets, &data, ErmMode::Global).unwrap();
        assert_eq!(gloss, 0.0);
        // near-zero temperature only ever picks a per-level minimizer; exact
        // ties are split evenly, so the pick need not be the first one
        let (model, trace) = train_multiscale_entropic(&cold, &data, 1, None, None).unwrap();
        for l in &trace.levels {
            assert_eq!(l.chosen_loss, l.min_loss);
        }
        for k in 1..=3 {
            assert_eq!(level_empirical_loss(&setup.template, &global.weights()[..k], &data).unwrap(), 0.0);
            assert_eq!(level_empirical_loss(&setup.template, &greedy.weights()[..k], &data).unwrap(), 0.0);
            assert_eq!(level_empirical_loss(&setup.template, &model.weights()[..k], &data).unwrap(), 0.0);
            assert_eq!(level_empirical_loss(&setup.template, &teacher.weights()[..k], &data).unwrap(), 0.0);
        }
    }

    #[test]
    fn greedy_and_global_can_differ() {
        // Level 1 prefers +1; level 2 can then only add 0 or +1, while the
        // level-1 runner-up lets level 2 fit exactly.
        let ladder = build_ladder(0.25, 2.0, 2).unwrap();
        let spec = LevelSpec::new(2, 1.0, 2.0, 2.0).unwrap();
        let t = ModelTemplate::new(ladder, BaseMap::Linear { slope: 1.0 }, vec![spec.clone(), spec.clone()]).unwrap();
        let w = |f: &[i64]| WeightVector::from_flat(f, 1.0).unwrap();
        let s1 = LevelWeightSet::from_vectors(1, &spec, vec![w(&[0, 0, 0]), w(&[0, 0, 1])]).unwrap();
        let s2 = LevelWeightSet::from_vectors(2, &spec, vec![w(&[0, 0, 0]), w(&[0, 0, 1])]).unwrap();
        // band 1 is [0.25, 0.5); band 2 is [0.5, 1) with gamma_2 = 1
        let data = dataset(&[(0.3, 0.8), (0.3, 0.3), (0.3, 0.8), (0.6, 0.6), (0.7, 0.7)], 2);
        let (g, gl) = train_erm(&t, &[s1.clone(), s2.clone()], &data, ErmMode::GreedyPerLevel).unwrap();
        let (b, bl) = train_erm(&t, &[s1, s2], &data, ErmMode::Global).unwrap();
        assert!(bl < gl);
        assert_ne!(g, b);
    }

    #[test]
    fn global_erm_cap() {
        let t = template(3, 0.01, 0.2);
        let sets = t.weight_sets(u128::MAX).unwrap();
        let data = dataset(&[(0.3, 0.3)], 3);
        assert!(matches!(train_erm(&t, &sets, &data, ErmMode::Global), Err(Error::TooLarge(_))));
    }

    fn random_table(seed: u64, sizes: &[usize]) -> LossTable {
        let mut rng = substream(seed, Purpose::Evaluation, 9);
        let mut levels = Vec::new();
        let mut len = 1;
        for &s in sizes {
            len *= s;
            levels.push((0..len).map(|_| rng.gen_range(0.0..2.0)).collect());
        }
        LossTable::from_levels(sizes.to_vec(), levels).unwrap()
    }

    #[test]
    fn objective_examples() {
        let table = random_table(1, &[3, 3]);
        let sched = TemperatureSchedule::from_lambda_bar(vec![0.3, 0.5]).unwrap();
        // Dirac: entropies vanish and the objective is the sum of l_k - lbar_k
        let dirac = DiscreteDistribution::dirac(table.tuples(), 5).unwrap();
        let t = &table.tuples()[5];
        let expected = table.children(1, 0)[t[0]] - kolmogorov_mean(table.children(1, 0), 0.8).unwrap()
            + table.children(2, t[0])[t[1]]
            - kolmogorov_mean(table.children(2, t[0]), 0.5).unwrap();
        assert!((multiscale_objective(&table, &dirac, &sched).unwrap() - expected).abs() < 1e-14);
        // uniform joint: each prefix entropy is sum of log sizes
        let uniform = DiscreteDistribution::uniform(table.tuples()).unwrap();
        let marg = prefix_marginals(&table, &uniform).unwrap();
        assert!((entropy_of_probs(&marg[1]) - 3f64.ln()).abs() < 1e-14);
        assert!((entropy_of_probs(&marg[2]) - 9f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn congruency_on_random_tables() {
        for seed in 0..5 {
            let table = random_table(seed, &[3, 3]);
            let sched = TemperatureSchedule::from_lambda_bar(vec![0.2 + 0.1 * seed as f64, 0.4]).unwrap();
            let report = congruency_gap(&table, &sched, 100, seed).unwrap();
            assert!(report.max_gap < 1e-9, "{report:?}");
            assert!(report.min_margin >= -1e-10, "{report:?}");
            assert!(report.diracs >= 25);
        }
        let one = random_table(3, &[6]);
        let sched = TemperatureSchedule::from_lambda_bar(vec![0.3]).unwrap();
        assert!(congruency_gap(&one, &sched, 50, 1).unwrap().max_gap < 1e-12);
        let three = random_table(4, &[2, 3, 2]);
        let sched = TemperatureSchedule::from_lambda_bar(vec![0.3, 0.2, 0.6]).unwrap();
        assert!(congruency_gap(&three, &sched, 50, 1).unwrap().max_gap < 1e-9);
    }

    #[test]
    fn table_from_model_matches_losses() {
        let (setup, _, data) = teacher_setup(2, 16, 3);
        let t = setup.template.clone();
        let small: Vec<LevelWeightSet> = setup
            .sets
            .iter()
            .map(|s| LevelWeightSet::from_vectors(s.level, &s.spec, s.vectors()[..3].to_vec()).unwrap())
            .collect();
        let table = LossTable::build(&t, &small, &data).unwrap();
        assert_eq!(table.atoms(), 9);
        let prefix = vec![small[0].vectors()[2].clone()];
        assert_eq!(table.children(2, 2), level_losses(&t, &prefix, &small[1], &data).unwrap().as_slice());
        assert!(LossTable::build(&t, &setup.sets, &data).is_ok());
        let big = template(2, 0.01, 0.2);
        assert!(matches!(LossTable::build(&big, &big.weight_sets(u128::MAX).unwrap(), &data), Err(Error::TooLarge(_))));
    }

    proptest! {
        #[test]
        fn schedule_is_decreasing(lb in proptest::collection::vec(1e-6f64..10.0, 1..8)) {
            let s = TemperatureSchedule::from_lambda_bar(lb).unwrap();
            prop_assert!(s.lambda.windows(2).all(|w| w[0] > w[1]));
            prop_assert_eq!(*s.lambda.last().unwrap(), *s.lambda_bar.last().unwrap());
        }

        #[test]
        fn gibbs_is_shift_invariant(shift in -50.0f64..50.0, seed in 0u64..1000) {
            let (setup, _, data) = teacher_setup(1, 12, seed);
            let losses = level_losses(&setup.template, &[], &setup.sets[0], &data).unwrap();
            let shifted: Vec<f64> = losses.iter().map(|l| l + shift).collect();
            let a = gibbs_measure((0..losses.len()).collect(), &losses, 0.05).unwrap();
            let b = gibbs_measure((0..losses.len()).collect(), &shifted, 0.05).unwrap();
            prop_assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
