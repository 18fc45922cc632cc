//! Discretized two-layer Heaviside networks and the hierarchical model.
//!
//! Level `k` of the model maps `h_{k-1}` to
//! `h_k(x) = h_{k-1}(x) + F(h_{k-1}(x), w_k)` where
//! `F(u, w) = sum_j w_j H(u - b_j) + w_c` and `H(0) = 1`. The model output at
//! `x` in band `k` is `gamma_k h_k(x / gamma_k)`; higher levels are never
//! touched.
//!
//! Weights are integer multiples of the level step `eta` and are stored as
//! those integers, so a level's weight set is a lattice l1-ball.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{scale_of, DatasetMode, Labeler, ScaleLadder};
use crate::error::{Error, Result};
use crate::io::write_json;
use crate::ladder::{psi_domain, psi_k, psi_k_prime, DiffeoBundle, Diffeomorphism, TargetKind};
use crate::rng::{substream, Purpose};

/// Default cap on the number of vectors enumerated for one level.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Largest integer `m` with `m eta <= rho`, treating a quotient within a
/// relative `1e-9` of the next integer as that integer.
pub fn max_units(rho: f64, eta: f64) -> Result<u64> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::OutOfRange(format!("eta = {eta} must be positive")));
    }
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::OutOfRange(format!("rho = {rho} must be non-negative")));
    }
    let q = rho / eta;
    if q >= u64::MAX as f64 {
        return Err(Error::TooLarge(format!("rho / eta = {q} does not fit in an integer radius")));
    }
    let m = q.floor();
    Ok(if (m + 1.0 - q) <= 1e-9 * (m + 1.0) { m as u64 + 1 } else { m as u64 })
}

/// Shape, step and norm budget of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub tau: usize,
    pub eta: f64,
    pub rho: f64,
    /// `M1 R`, the half-width of the breakpoint span.
    pub m1r: f64,
}

impl LevelSpec {
    pub fn new(tau: usize, eta: f64, rho: f64, m1r: f64) -> Result<Self> {
        if tau == 0 {
            return Err(Error::OutOfRange("tau must be at least 1".into()));
        }
        if !(m1r > 0.0 && m1r.is_finite()) {
            return Err(Error::OutOfRange(format!("M1 R = {m1r} must be positive")));
        }
        max_units(rho, eta)?;
        Ok(Self { tau, eta, rho, m1r })
    }

    pub fn dim(&self) -> usize {
        self.tau + 1
    }

    /// `b_j = (-1 + 2j / tau) M1 R` for `j = 1..=tau`.
    pub fn breakpoints(&self) -> Vec<f64> {
        (1..=self.tau).map(|j| self.breakpoint(j)).collect()
    }

    fn breakpoint(&self, j: usize) -> f64 {
        (-1.0 + 2.0 * j as f64 / self.tau as f64) * self.m1r
    }

    /// Integer l1 radius of the weight lattice.
    pub fn max_units(&self) -> u64 {
        max_units(self.rho, self.eta).expect("validated at construction")
    }

    /// `|W|` from the closed form.
    pub fn set_size(&self) -> u128 {
        lattice_ball_count(self.dim(), self.max_units())
    }

    /// Whether `w` has this level's shape and step and lies in its l1 ball.
    pub fn admits(&self, w: &WeightVector) -> bool {
        w.taps.len() == self.tau && w.eta == self.eta && w.l1_units() <= self.max_units() as u128
    }
}

/// Level weights stored as integer multiples of `eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub taps: Vec<i64>,
    pub constant: i64,
    pub eta: f64,
}

impl WeightVector {
    pub fn zeros(tau: usize, eta: f64) -> Self {
        Self {
            taps: vec![0; tau],
            constant: 0,
            eta,
        }
    }

    /// From the flat layout `(taps..., constant)`.
    pub fn from_flat(flat: &[i64], eta: f64) -> Result<Self> {
        let (constant, taps) = flat
            .split_last()
            .ok_or_else(|| Error::Format("weight vector needs at least the constant".into()))?;
        Ok(Self {
            taps: taps.to_vec(),
            constant: *constant,
            eta,
        })
    }

    pub fn flat(&self) -> Vec<i64> {
        let mut v = self.taps.clone();
        v.push(self.constant);
        v
    }

    pub fn tap_values(&self) -> Vec<f64> {
        self.taps.iter().map(|&t| t as f64 * self.eta).collect()
    }

    pub fn constant_value(&self) -> f64 {
        self.constant as f64 * self.eta
    }

    pub fn l1_units(&self) -> u128 {
        self.taps.iter().chain(std::iter::once(&self.constant)).map(|v| v.unsigned_abs() as u128).sum()
    }

    pub fn l1(&self) -> f64 {
        self.l1_units() as f64 * self.eta
    }

    /// `sum_j |w_j|`, the largest possible plateau contribution.
    pub fn tap_l1(&self) -> f64 {
        self.taps.iter().map(|v| v.unsigned_abs() as f64).sum::<f64>() * self.eta
    }
}

/// Real-valued weights before discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousWeights {
    pub taps: Vec<f64>,
    pub constant: f64,
}

impl ContinuousWeights {
    pub fn l1(&self) -> f64 {
        self.taps.iter().map(|v| v.abs()).sum::<f64>() + self.constant.abs()
    }
}

/// `sum_j w_j H(x - b_j) + w_c` with `H(0) = 1`.
pub fn heaviside_net_eval(spec: &LevelSpec, w: &WeightVector, x: f64) -> f64 {
    let mut units = w.constant;
    for (j, &t) in w.taps.iter().enumerate() {
        if x >= spec.breakpoint(j + 1) {
            units += t;
        }
    }
    units as f64 * w.eta
}

pub fn continuous_net_eval(spec: &LevelSpec, w: &ContinuousWeights, x: f64) -> f64 {
    let mut acc = w.constant;
    for (j, &t) in w.taps.iter().enumerate() {
        if x >= spec.breakpoint(j + 1) {
            acc += t;
        }
    }
    acc
}

/// Riemann-sum network of `Psi` on `(a1, a2)`: taps `2 M1 R Psi'(b_j) / tau`
/// at breakpoints inside the interval, constant `Psi(a1)`.
pub fn riemann_network_from<P>(psi_prime: P, psi_at_a1: f64, domain: (f64, f64), spec: &LevelSpec) -> Result<ContinuousWeights>
where
    P: Fn(f64) -> f64,
{
    let (a1, a2) = domain;
    if !(a1 < 0.0 && 0.0 < a2) {
        return Err(Error::OutOfDomain {
            x: 0.0,
            domain: format!("({a1}, {a2}) must contain 0"),
        });
    }
    if a1 < -spec.m1r || a2 > spec.m1r {
        return Err(Error::OutOfDomain {
            x: if a1 < -spec.m1r { a1 } else { a2 },
            domain: format!("(-{m}, {m})", m = spec.m1r),
        });
    }
    let step = 2.0 * spec.m1r / spec.tau as f64;
    let taps = spec
        .breakpoints()
        .into_iter()
        .map(|b| if a1 < b && b < a2 { step * psi_prime(b) } else { 0.0 })
        .collect();
    Ok(ContinuousWeights {
        taps,
        constant: psi_at_a1,
    })
}

/// Rounds each coordinate to the nearest multiple of `eta`, ties away from zero.
pub fn discretize_weights(w: &ContinuousWeights, eta: f64) -> Result<WeightVector> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::OutOfRange(format!("eta = {eta} must be positive")));
    }
    let round = |v: f64| -> Result<i64> {
        let q = (v / eta).round();
        if !(q.abs() < i64::MAX as f64) {
            return Err(Error::TooLarge(format!("{v} / {eta} does not fit in an integer weight")));
        }
        Ok(q as i64)
    };
    Ok(WeightVector {
        taps: w.taps.iter().map(|&v| round(v)).collect::<Result<_>>()?,
        constant: round(w.constant)?,
        eta,
    })
}

fn binomial(n: u128, k: u128) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// Number of integer points in the `dim`-dimensional l1 ball of radius `m`:
/// `sum_k 2^k C(dim, k) C(m, k)`. Saturates at `u128::MAX`.
pub fn lattice_ball_count(dim: usize, m: u64) -> u128 {
    let (dim, m) = (dim as u128, m as u128);
    let mut total: u128 = 0;
    for k in 0..=dim.min(m) {
        let term = binomial(dim, k)
            .and_then(|a| binomial(m, k).and_then(|b| a.checked_mul(b)))
            .and_then(|t| if k < 128 { t.checked_mul(1u128 << k) } else { None });
        match term.and_then(|t| total.checked_add(t)) {
            Some(v) => total = v,
            None => return u128::MAX,
        }
    }
    total
}

/// All integer vectors of length `dim` with l1 norm at most `m`, in
/// lexicographic order.
pub fn enumerate_lattice_ball(dim: usize, m: u64, cap: u128) -> Result<Vec<Vec<i64>>> {
    let count = lattice_ball_count(dim, m);
    if count > cap {
        return Err(Error::EnumerationTooLarge {
            level: 0,
            count,
            dim,
            radius: m,
            cap,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current = vec![0i64; dim];
    fill(&mut current, 0, m as i64, &mut out);
    debug_assert_eq!(out.len() as u128, count);
    Ok(out)
}

fn fill(current: &mut Vec<i64>, pos: usize, budget: i64, out: &mut Vec<Vec<i64>>) {
    if pos == current.len() {
        out.push(current.clone());
        return;
    }
    for v in -budget..=budget {
        current[pos] = v;
        fill(current, pos + 1, budget - v.abs(), out);
    }
    current[pos] = 0;
}

/// The ordered candidate set of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelWeightSet {
    pub level: usize,
    pub spec: LevelSpec,
    vectors: Vec<WeightVector>,
}

impl LevelWeightSet {
    /// Every admissible vector of `spec`, lexicographic in `(taps..., constant)`.
    pub fn enumerate(level: usize, spec: &LevelSpec, cap: u128) -> Result<Self> {
        let flats = enumerate_lattice_ball(spec.dim(), spec.max_units(), cap).map_err(|e| match e {
            Error::EnumerationTooLarge {
                count, dim, radius, cap, ..
            } => Error::EnumerationTooLarge {
                level,
                count,
                dim,
                radius,
                cap,
            },
            other => other,
        })?;
        let vectors = flats
            .iter()
            .map(|f| WeightVector::from_flat(f, spec.eta))
            .collect::<Result<_>>()?;
        Ok(Self {
            level,
            spec: spec.clone(),
            vectors,
        })
    }

    /// A hand-picked subset of the level's lattice ball, kept in the given order.
    pub fn from_vectors(level: usize, spec: &LevelSpec, vectors: Vec<WeightVector>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Empty(format!("weight set for level {level}")));
        }
        for (i, w) in vectors.iter().enumerate() {
            if !spec.admits(w) {
                return Err(Error::ModelMismatch(format!("vector {i} is not admissible at level {level}")));
            }
            if vectors[..i].contains(w) {
                return Err(Error::ModelMismatch(format!("vector {i} repeats at level {level}")));
            }
        }
        Ok(Self {
            level,
            spec: spec.clone(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[WeightVector] {
        &self.vectors
    }

    pub fn get(&self, i: usize) -> Option<&WeightVector> {
        self.vectors.get(i)
    }

    pub fn index_of(&self, w: &WeightVector) -> Option<usize> {
        self.vectors.iter().position(|v| v == w)
    }

    pub fn log_size(&self) -> f64 {
        (self.vectors.len() as f64).ln()
    }
}

pub fn enumerate_weight_set(spec: &LevelSpec, cap: u128) -> Result<LevelWeightSet> {
    LevelWeightSet::enumerate(0, spec, cap)
}

fn broadcast<T: Copy>(name: &str, values: &[T], d: usize) -> Result<Vec<T>> {
    match values.len() {
        1 => Ok(vec![values[0]; d]),
        n if n == d => Ok(values.to_vec()),
        n => Err(Error::OutOfRange(format!("{name} has {n} entries; expected 1 or {d}"))),
    }
}

/// `3 M1 R phi1 + 4 M1^2 R^2 phi2 / tau + (tau + 1) eta / 2`, the l1 budget
/// of a discretized Riemann network of a `phi1`-Lipschitz, `phi2`-smooth map.
pub fn bounded_norm_bound(tau: usize, eta: f64, m1r: f64, phi1: f64, phi2: f64) -> f64 {
    3.0 * m1r * phi1 + 4.0 * m1r * m1r * phi2 / tau as f64 + (tau as f64 + 1.0) * eta / 2.0
}

/// `rho_k = 3 M1 C1 R^2 beta^(k-d-1) (beta - 1) + 4 M1^2 R^2 C2 / tau_k + (tau_k + 1) eta_k / 2`.
///
/// `tau` and `eta` hold either one value for every level or one per level.
pub fn rho_schedule(ladder: &ScaleLadder, m1: f64, c1: f64, c2: f64, tau: &[usize], eta: &[f64]) -> Result<Vec<f64>> {
    let d = ladder.d();
    let tau = broadcast("tau", tau, d)?;
    let eta = broadcast("eta", eta, d)?;
    let (r, beta) = (ladder.radius(), ladder.beta());
    Ok((1..=d)
        .map(|k| {
            let phi1 = c1 * r * beta.powi(k as i32 - d as i32 - 1) * (beta - 1.0);
            bounded_norm_bound(tau[k - 1], eta[k - 1], m1 * r, phi1, c2)
        })
        .collect())
}

/// `(tau + 1) eta / 2 + 2 (M1 R)^2 phi2 / tau`.
pub fn approx_error_bound(tau: usize, eta: f64, m1r: f64, phi2: f64) -> Result<f64> {
    if tau < 2 {
        return Err(Error::OutOfRange(format!("tau = {tau} must be at least 2")));
    }
    if !(eta >= 0.0) {
        return Err(Error::OutOfRange(format!("eta = {eta} must be non-negative")));
    }
    Ok((tau as f64 + 1.0) * eta / 2.0 + 2.0 * m1r * m1r * phi2 / tau as f64)
}

/// How level steps are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaRule {
    /// One step for all levels or one per level.
    Fixed(Vec<f64>),
    /// Per level, the smallest step whose weight set has at most this many vectors.
    MaxSetSize { max_set_size: u128 },
}

/// Level specs for a target bundle on `ladder`.
///
/// Under [`EtaRule::MaxSetSize`] the integer radius `m` is the largest with
/// `|W| <= max_set_size`, and `eta_k` solves `rho_k(eta_k) = m eta_k`, so the
/// lattice radius is exactly `m` at every level.
pub fn level_specs_for(ladder: &ScaleLadder, bundle: &DiffeoBundle, tau: &[usize], eta: &EtaRule) -> Result<Vec<LevelSpec>> {
    let d = ladder.d();
    let tau = broadcast("tau", tau, d)?;
    let (m1, c1, c2) = (bundle.m1(), bundle.c1(), bundle.c2());
    let m1r = m1 * ladder.radius();
    let etas = match eta {
        EtaRule::Fixed(values) => broadcast("eta", values, d)?,
        EtaRule::MaxSetSize { max_set_size } => {
            let base = rho_schedule(ladder, m1, c1, c2, &tau, &[0.0])?;
            let mut out = Vec::with_capacity(d);
            for k in 0..d {
                let dim = tau[k] + 1;
                let mut m: u64 = 0;
                while lattice_ball_count(dim, m + 1) <= *max_set_size {
                    m += 1;
                }
                let half = (tau[k] as f64 + 1.0) / 2.0;
                if !(m as f64 > half) {
                    return Err(Error::TooLarge(format!(
                        "level {}: a set of at most {max_set_size} vectors allows l1 radius {m}, which must exceed (tau + 1) / 2 = {half}",
                        k + 1
                    )));
                }
                out.push(base[k] / (m as f64 - half));
            }
            out
        }
    };
    let rho = rho_schedule(ladder, m1, c1, c2, &tau, &etas)?;
    (0..d).map(|k| LevelSpec::new(tau[k], etas[k], rho[k], m1r)).collect()
}

/// The map `h_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaseMap {
    /// `h_0(x) = slope x`.
    Linear { slope: f64 },
    /// `h_0 = f_[gamma_0]` for a closed-form target.
    Dilation { target: TargetKind },
}

impl BaseMap {
    pub fn eval(&self, gamma0: f64, x: f64) -> f64 {
        match self {
            BaseMap::Linear { slope } => slope * x,
            BaseMap::Dilation { target } => target.f(gamma0 * x) / gamma0,
        }
    }
}

/// Ladder, base map and level specs; everything but the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTemplate {
    pub ladder: ScaleLadder,
    pub base: BaseMap,
    pub specs: Vec<LevelSpec>,
}

impl ModelTemplate {
    pub fn new(ladder: ScaleLadder, base: BaseMap, specs: Vec<LevelSpec>) -> Result<Self> {
        if specs.len() != ladder.d() {
            return Err(Error::ModelMismatch(format!(
                "{} level specs for a ladder with d = {}",
                specs.len(),
                ladder.d()
            )));
        }
        Ok(Self { ladder, base, specs })
    }

    pub fn d(&self) -> usize {
        self.ladder.d()
    }

    pub fn base_eval(&self, x: f64) -> f64 {
        self.base.eval(self.ladder.gamma()[0], x)
    }

    /// Checks that `prefix` are admissible weights for levels `1..=prefix.len()`.
    pub fn check_prefix(&self, prefix: &[WeightVector]) -> Result<()> {
        if prefix.len() > self.d() {
            return Err(Error::ModelMismatch(format!("{} levels of weights for d = {}", prefix.len(), self.d())));
        }
        for (i, w) in prefix.iter().enumerate() {
            if !self.specs[i].admits(w) {
                return Err(Error::ModelMismatch(format!("weights at level {} violate the level spec", i + 1)));
            }
        }
        Ok(())
    }

    /// `h_k(x)` with levels taken from `prefix`, which must hold at least `k` entries.
    pub fn forward(&self, prefix: &[WeightVector], k: usize, x: f64) -> Result<f64> {
        Ok(self.forward_counted(prefix, k, x)?.0)
    }

    fn forward_counted(&self, prefix: &[WeightVector], k: usize, x: f64) -> Result<(f64, usize)> {
        if k > self.d() {
            return Err(Error::OutOfRange(format!("level {k} outside 0..={}", self.d())));
        }
        if k > prefix.len() {
            return Err(Error::LevelNotTrained {
                level: k,
                trained: prefix.len(),
            });
        }
        let mut h = self.base_eval(x);
        let mut evaluated = 0;
        for (spec, w) in self.specs.iter().zip(prefix).take(k) {
            h += heaviside_net_eval(spec, w, h);
            evaluated += 1;
        }
        Ok((h, evaluated))
    }

    /// `gamma_k h_k(x / gamma_k)` for `x` in band `k`, with the number of
    /// level networks evaluated.
    pub fn output_counted(&self, prefix: &[WeightVector], x: f64) -> Result<(f64, usize)> {
        let k = scale_of(x, &self.ladder)?;
        let g = self.ladder.gamma()[k];
        let (h, count) = self.forward_counted(prefix, k, x / g)?;
        Ok((g * h, count))
    }

    pub fn output(&self, prefix: &[WeightVector], x: f64) -> Result<f64> {
        Ok(self.output_counted(prefix, x)?.0)
    }

    pub fn weight_sets(&self, cap: u128) -> Result<Vec<LevelWeightSet>> {
        self.specs
            .iter()
            .enumerate()
            .map(|(i, s)| LevelWeightSet::enumerate(i + 1, s, cap))
            .collect()
    }
}

/// A template with weights for its first `levels()` levels (all `d` once fully trained).
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalModel {
    template: ModelTemplate,
    weights: Vec<WeightVector>,
}

impl HierarchicalModel {
    pub fn new(template: ModelTemplate, weights: Vec<WeightVector>) -> Result<Self> {
        template.check_prefix(&weights)?;
        Ok(Self { template, weights })
    }

    /// All levels zero, so `h_k = h_0` for every `k`.
    pub fn zeros(template: ModelTemplate) -> Self {
        let weights = template.specs.iter().map(|s| WeightVector::zeros(s.tau, s.eta)).collect();
        Self { template, weights }
    }

    /// One uniformly drawn member of each weight set, from the teacher substream.
    pub fn random_from_sets(template: ModelTemplate, sets: &[LevelWeightSet], seed: u64) -> Result<Self> {
        if sets.len() != template.d() {
            return Err(Error::ModelMismatch(format!("{} weight sets for d = {}", sets.len(), template.d())));
        }
        let mut rng = substream(seed, Purpose::Teacher, 0);
        let weights = sets
            .iter()
            .map(|s| {
                if s.is_empty() {
                    return Err(Error::Empty(format!("weight set {}", s.level)));
                }
                Ok(s.vectors()[rng.gen_range(0..s.len())].clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(template, weights)
    }

    /// Each level set to the discretized Riemann network of `psi_k` of `bundle`.
    pub fn riemann(template: ModelTemplate, bundle: &DiffeoBundle) -> Result<Self> {
        let weights = (1..=template.d())
            .map(|k| riemann_level_weights(bundle, &template.ladder, &template.specs[k - 1], k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(template, weights)
    }

    pub fn template(&self) -> &ModelTemplate {
        &self.template
    }

    pub fn ladder(&self) -> &ScaleLadder {
        &self.template.ladder
    }

    pub fn weights(&self) -> &[WeightVector] {
        &self.weights
    }

    /// Number of trained levels.
    pub fn levels(&self) -> usize {
        self.weights.len()
    }

    pub fn is_complete(&self) -> bool {
        self.weights.len() == self.template.d()
    }

    pub fn forward_level(&self, k: usize, x: f64) -> Result<f64> {
        self.template.forward(&self.weights, k, x)
    }

    pub fn output(&self, x: f64) -> Result<f64> {
        self.template.output(&self.weights, x)
    }

    pub fn to_file(&self) -> ModelFile {
        let base = &self.template.base;
        ModelFile {
            ladder: self.template.ladder.clone(),
            base_slope: match base {
                BaseMap::Linear { slope } => Some(*slope),
                BaseMap::Dilation { .. } => None,
            },
            base_dilation: match base {
                BaseMap::Dilation { target } => Some(*target),
                BaseMap::Linear { .. } => None,
            },
            levels: self
                .template
                .specs
                .iter()
                .enumerate()
                .map(|(i, s)| LevelFile {
                    tau: s.tau,
                    eta: s.eta,
                    rho: s.rho,
                    m1r: s.m1r,
                    weights: self.weights.get(i).map(|w| w.flat()),
                })
                .collect(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        let base = match (file.base_slope, file.base_dilation) {
            (Some(slope), None) => BaseMap::Linear { slope },
            (None, Some(target)) => BaseMap::Dilation { target },
            _ => return Err(Error::Format("exactly one of base_slope and base_dilation must be given".into())),
        };
        let specs = file
            .levels
            .iter()
            .map(|l| LevelSpec::new(l.tau, l.eta, l.rho, l.m1r))
            .collect::<Result<Vec<_>>>()?;
        let template = ModelTemplate::new(file.ladder, base, specs)?;
        let mut weights = Vec::new();
        let mut ended = false;
        for (i, l) in file.levels.iter().enumerate() {
            match (&l.weights, ended) {
                (Some(flat), false) => {
                    if flat.len() != l.tau + 1 {
                        return Err(Error::Format(format!("level {} has {} weights, expected {}", i + 1, flat.len(), l.tau + 1)));
                    }
                    weights.push(WeightVector::from_flat(flat, l.eta)?);
                }
                (Some(_), true) => {
                    return Err(Error::Format(format!("level {} has weights but an earlier level does not", i + 1)));
                }
                (None, _) => ended = true,
            }
        }
        Self::new(template, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(file)
    }
}

impl Labeler for HierarchicalModel {
    fn mode(&self) -> DatasetMode {
        DatasetMode::PlantedTeacher
    }

    fn description(&self) -> String {
        "planted-teacher".into()
    }

    fn label(&self, x: f64) -> Result<f64> {
        self.output(x)
    }
}

/// On-disk model layout. Weights are integers in units of the level's `eta`,
/// ordered `(taps..., constant)`; untrained levels omit them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub ladder: ScaleLadder,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_dilation: Option<TargetKind>,
    pub levels: Vec<LevelFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelFile {
    pub tau: usize,
    pub eta: f64,
    pub rho: f64,
    pub m1r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<i64>>,
}

/// Continuous Riemann network of `psi_k` on its domain.
pub fn riemann_level_continuous(bundle: &DiffeoBundle, ladder: &ScaleLadder, spec: &LevelSpec, k: usize) -> Result<ContinuousWeights> {
    ladder.check_level(k)?;
    let (gp, gn) = (ladder.gamma()[k - 1], ladder.gamma()[k]);
    let domain = psi_domain(bundle, gp)?;
    let at_a1 = psi_k(bundle, gp, gn, domain.0)?;
    let prime = |x: f64| psi_k_prime(bundle, gp, gn, x).unwrap_or(f64::NAN);
    let w = riemann_network_from(prime, at_a1, domain, spec)?;
    if w.taps.iter().any(|t| !t.is_finite()) {
        return Err(Error::OutOfDomain {
            x: f64::NAN,
            domain: format!("psi_{k} derivative undefined at a breakpoint"),
        });
    }
    Ok(w)
}

/// Discretized Riemann network of `psi_k`; errors if it leaves the level's l1 ball.
pub fn riemann_level_weights(bundle: &DiffeoBundle, ladder: &ScaleLadder, spec: &LevelSpec, k: usize) -> Result<WeightVector> {
    let w = discretize_weights(&riemann_level_continuous(bundle, ladder, spec, k)?, spec.eta)?;
    if !spec.admits(&w) {
        return Err(Error::ModelMismatch(format!(
            "Riemann network of level {k} has l1 norm {} above rho = {}",
            w.l1(),
            spec.rho
        )));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_ladder;
    use proptest::prelude::*;

    fn spec(tau: usize, eta: f64, rho: f64, m1r: f64) -> LevelSpec {
        LevelSpec::new(tau, eta, rho, m1r).unwrap()
    }

    fn wv(taps: &[f64], c: f64, eta: f64) -> WeightVector {
        discretize_weights(
            &ContinuousWeights {
                taps: taps.to_vec(),
                constant: c,
            },
            eta,
        )
        .unwrap()
    }

    #[test]
    fn net_examples() {
        let s = spec(2, 0.05, 10.0, 1.0);
        assert_eq!(s.breakpoints(), vec![0.0, 1.0]);
        let zero = WeightVector::zeros(2, 0.05);
        for x in [-3.0, 0.0, 0.7, 5.0] {
            assert_eq!(heaviside_net_eval(&s, &zero, x), 0.0);
        }
        let w = wv(&[0.5, 0.25], -0.1, 0.05);
        assert!((heaviside_net_eval(&s, &w, 0.5) - 0.4).abs() < 1e-15);
        assert!((heaviside_net_eval(&s, &w, -0.5) + 0.1).abs() < 1e-15);
        // H(0) = 1
        assert!((heaviside_net_eval(&s, &w, 0.0) - 0.4).abs() < 1e-15);
        assert!((heaviside_net_eval(&s, &w, 1.0) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn breakpoints_span() {
        let s = spec(5, 0.1, 1.0, 2.0);
        let b = s.breakpoints();
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert!(b[0] > -2.0);
        assert_eq!(*b.last().unwrap(), 2.0);
    }

    #[test]
    fn riemann_examples() {
        let s = spec(4, 0.1, 10.0, 1.0);
        let zero = riemann_network_from(|_| 0.0, 0.0, (-0.9, 0.9), &s).unwrap();
        assert!(zero.taps.iter().all(|&t| t == 0.0) && zero.constant == 0.0);
        let id = riemann_network_from(|_| 1.0, -1.0, (-1.0, 1.0), &s).unwrap();
        assert_eq!(id.taps, vec![0.5, 0.5, 0.5, 0.0]);
        assert_eq!(id.constant, -1.0);
        assert!(riemann_network_from(|_| 1.0, 0.1, (0.1, 0.9), &s).is_err());
        assert!(riemann_network_from(|_| 1.0, -2.0, (-2.0, 0.9), &s).is_err());
    }

    #[test]
    fn discretize_examples() {
        let d = |v: f64, eta: f64| wv(&[], v, eta).constant_value();
        assert_eq!(d(0.3, 0.1), 0.30000000000000004);
        assert_eq!(wv(&[], 0.3, 0.1).constant, 3);
        assert_eq!(wv(&[], 0.26, 0.1).constant, 3);
        assert_eq!(d(0.25, 0.5), 0.5);
        assert_eq!(d(-0.25, 0.5), -0.5);
        assert!(discretize_weights(&ContinuousWeights { taps: vec![], constant: 1.0 }, 0.0).is_err());
    }

    #[test]
    fn enumeration_examples() {
        let five = enumerate_lattice_ball(2, 1, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(five, vec![vec![-1, 0], vec![0, -1], vec![0, 0], vec![0, 1], vec![1, 0]]);
        let s = spec(1, 1.0, 1.0, 1.0);
        assert_eq!(enumerate_weight_set(&s, 10).unwrap().len(), 5);
        let tiny = spec(3, 1.0, 0.5, 1.0);
        let set = enumerate_weight_set(&tiny, 10).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.vectors()[0], WeightVector::zeros(3, 1.0));
        assert_eq!(enumerate_weight_set(&spec(2, 1.0, 1.0, 1.0), 10).unwrap().len(), 7);
    }

    #[test]
    fn enumeration_cap() {
        let s = spec(4, 0.01, 1.0, 1.0);
        let err = LevelWeightSet::enumerate(3, &s, 1000).unwrap_err();
        match err {
            Error::EnumerationTooLarge { level, count, dim, radius, .. } => {
                assert_eq!((level, dim, radius), (3, 5, 100));
                assert_eq!(count, lattice_ball_count(5, 100));
            }
            other => panic!("{other:?}"),
        }
        assert!(err_message_names_formula(&LevelWeightSet::enumerate(3, &s, 1000).unwrap_err()));
    }

    fn err_message_names_formula(e: &Error) -> bool {
        e.to_string().contains("2^k C(5,k) C(100,k)")
    }

    #[test]
    fn max_units_is_robust() {
        assert_eq!(max_units(1.0, 0.1).unwrap(), 10);
        assert_eq!(max_units(0.3, 0.1).unwrap(), 3);
        assert_eq!(max_units(0.29, 0.1).unwrap(), 2);
        assert_eq!(max_units(0.0, 0.1).unwrap(), 0);
        assert!(max_units(1.0, 0.0).is_err());
    }

    #[test]
    fn rho_examples() {
        let l = build_ladder(0.5, 2.0, 1).unwrap();
        let rho = rho_schedule(&l, 1.0, 1.0, 1.0, &[2], &[0.1]).unwrap();
        assert!((rho[0] - 3.65).abs() < 1e-12);
        let l = build_ladder(0.1, 2.0, 6).unwrap();
        let rho = rho_schedule(&l, 1.3, 2.0, 1.5, &[1_000_000_000], &[0.0]).unwrap();
        for w in rho.windows(2) {
            assert!((w[1] / w[0] - 2.0).abs() < 1e-6);
        }
        assert!(rho_schedule(&l, 1.3, 2.0, 1.5, &[2, 3], &[0.1]).is_err());
        let per_level = rho_schedule(&l, 1.0, 1.0, 1.0, &[2, 2, 2, 4, 4, 4], &[0.1, 0.1, 0.1, 0.1, 0.1, 0.2]).unwrap();
        assert_eq!(per_level.len(), 6);
    }

    #[test]
    fn approx_bound_examples() {
        assert!((approx_error_bound(4, 0.1, 1.0, 2.0).unwrap() - 1.25).abs() < 1e-12);
        assert_eq!(approx_error_bound(4, 0.0, 2.0, 1.0).unwrap(), 2.0);
        assert!((approx_error_bound(9, 0.2, 3.0, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(approx_error_bound(1, 0.1, 1.0, 1.0).is_err());
    }

    fn small_template(d: usize, slope: f64) -> ModelTemplate {
        let ladder = build_ladder(0.25, 2.0, d).unwrap();
        let specs = vec![spec(2, 0.1, 1.0, 2.0); d];
        ModelTemplate::new(ladder, BaseMap::Linear { slope }, specs).unwrap()
    }

    #[test]
    fn forward_examples() {
        let m = HierarchicalModel::zeros(small_template(3, 1.5));
        for k in 0..=3 {
            assert_eq!(m.forward_level(k, 0.7).unwrap(), 1.5 * 0.7);
        }
        assert!(m.forward_level(4, 0.7).is_err());

        let t = small_template(1, 1.0);
        let w = wv(&[0.0, 0.0], 0.2, 0.1);
        let m = HierarchicalModel::new(t, vec![w]).unwrap();
        assert!((m.forward_level(1, 0.3).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(m.forward_level(0, 0.3).unwrap(), 0.3);
    }

    #[test]
    fn output_examples() {
        let m = HierarchicalModel::zeros(small_template(3, 1.0));
        for x in [0.25, -0.3, 0.6, 1.1, -1.99] {
            assert!((m.output(x).unwrap() - x).abs() < 1e-15);
        }
        assert!(m.output(2.0).is_err());
        assert!(m.output(0.1).is_err());
        let t = small_template(3, 1.0);
        let w = vec![wv(&[0.1, 0.0], 0.0, 0.1), wv(&[0.0, 0.0], -0.2, 0.1), wv(&[0.3, 0.0], 0.1, 0.1)];
        let m = HierarchicalModel::new(t.clone(), w.clone()).unwrap();
        let x = 1.5;
        assert_eq!(m.output(x).unwrap(), m.forward_level(3, x).unwrap());
    }

    #[test]
    fn lazy_evaluation_counts() {
        let t = small_template(4, 1.0);
        let weights = vec![wv(&[0.1, 0.0], 0.0, 0.1); 4];
        let l = t.ladder.clone();
        for k in 1..=4 {
            let (lo, hi) = l.band(k).unwrap();
            for x in [lo, (lo + hi) / 2.0, -lo] {
                assert_eq!(t.output_counted(&weights, x).unwrap().1, k);
            }
        }
        // a prefix model still answers on the bands it covers
        assert_eq!(t.output_counted(&weights[..2], 0.3).unwrap().1, 1);
        assert!(matches!(t.output(&weights[..2], 3.9), Err(Error::LevelNotTrained { level: 4, trained: 2 })));
    }

    #[test]
    fn model_file_round_trip() {
        let t = small_template(3, 1.0);
        let w = vec![wv(&[0.1, -0.2], 0.3, 0.1), wv(&[0.0, 0.0], -0.2, 0.1)];
        let m = HierarchicalModel::new(t, w).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let back = HierarchicalModel::load(&path).unwrap();
        assert_eq!(back, m);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["base_slope"], 1.0);
        assert_eq!(v["levels"][0]["weights"], serde_json::json!([1, -2, 3]));
        assert!(v["levels"][2].get("weights").is_none());
    }

    #[test]
    fn rejects_inadmissible_weights() {
        let t = small_template(1, 1.0);
        assert!(HierarchicalModel::new(t.clone(), vec![wv(&[0.6, 0.5], 0.0, 0.1)]).is_err());
        assert!(HierarchicalModel::new(t.clone(), vec![wv(&[0.1], 0.0, 0.1)]).is_err());
        assert!(HierarchicalModel::new(t, vec![wv(&[0.1, 0.0], 0.0, 0.05)]).is_err());
    }

    #[test]
    fn auto_eta_hits_the_set_size() {
        let ladder = build_ladder(0.25, 2.0, 3).unwrap();
        let bundle = TargetKind::Tanh.bundle(ladder.radius()).unwrap();
        let specs = level_specs_for(&ladder, &bundle, &[2], &EtaRule::MaxSetSize { max_set_size: 200 }).unwrap();
        for s in &specs {
            assert_eq!(s.max_units(), 4);
            assert_eq!(s.set_size(), 129);
            assert!((s.rho / s.eta - 4.0).abs() < 1e-9);
        }
        let fixed = level_specs_for(&ladder, &bundle, &[2], &EtaRule::Fixed(vec![specs[0].eta])).unwrap();
        assert_eq!(fixed[0].rho, specs[0].rho);
        assert!(level_specs_for(&ladder, &bundle, &[8], &EtaRule::MaxSetSize { max_set_size: 20 }).is_err());
    }

    #[test]
    fn riemann_teacher_tracks_the_target() {
        let ladder = build_ladder(1.0 / 32.0, 2.0, 5).unwrap();
        let bundle = TargetKind::Tanh.bundle(1.0).unwrap();
        let specs = level_specs_for(&ladder, &bundle, &[64], &EtaRule::Fixed(vec![1e-4])).unwrap();
        let base = BaseMap::Dilation { target: TargetKind::Tanh };
        let t = ModelTemplate::new(ladder, base, specs).unwrap();
        let m = HierarchicalModel::riemann(t, &bundle).unwrap();
        assert!(m.is_complete());
        for x in [0.05, 0.2, -0.4, 0.9] {
            assert!((m.output(x).unwrap() - x.tanh()).abs() < 0.1, "{x}");
        }
    }

    proptest! {
        #[test]
        fn count_matches_enumeration(dim in 1usize..5, m in 0u64..6) {
            let all = enumerate_lattice_ball(dim, m, DEFAULT_ENUMERATION_CAP).unwrap();
            prop_assert_eq!(all.len() as u128, lattice_ball_count(dim, m));
            prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(all.iter().all(|v| v.iter().map(|x| x.unsigned_abs()).sum::<u64>() <= m));
        }

        #[test]
        fn plateau_sum_is_bounded(taps in proptest::collection::vec(-20i64..=20, 6), c in -20i64..=20, x in -3.0f64..3.0) {
            let s = spec(6, 0.05, 10.0, 2.0);
            let w = WeightVector { taps, constant: c, eta: 0.05 };
            let plateau = heaviside_net_eval(&s, &w, x) - w.constant_value();
            prop_assert!(plateau.abs() <= w.tap_l1() + 1e-12);
        }

        #[test]
        fn discretization_error_is_half_a_step(v in -50.0f64..50.0, eta in 0.001f64..2.0) {
            let w = discretize_weights(&ContinuousWeights { taps: vec![v], constant: -v }, eta).unwrap();
            prop_assert!((w.tap_values()[0] - v).abs() <= eta / 2.0 * (1.0 + 1e-9));
            prop_assert_eq!(w.taps[0], -w.constant);
        }
    }
}
