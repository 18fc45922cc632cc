//! Scale-ladder geometry, the power-law instance distribution and datasets.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt17, parse_f64, write_csv, write_json};
use crate::ladder::{DiffeoBundle, LadderSpec};
use crate::rng::{stream_id, substream, Purpose};

pub const DATASET_FILE: &str = "dataset.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Magnitude bands `[eps beta^(k-1), eps beta^k)`, `k = 1..=d`, covering
/// `eps <= |x| < R` with `R = eps beta^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LadderParams", into = "LadderParams")]
pub struct ScaleLadder {
    epsilon: f64,
    beta: f64,
    d: usize,
    radius: f64,
    gamma: Vec<f64>,
    edges: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderParams {
    pub epsilon: f64,
    pub beta: f64,
    pub d: usize,
}

impl TryFrom<LadderParams> for ScaleLadder {
    type Error = Error;

    fn try_from(p: LadderParams) -> Result<Self> {
        build_ladder(p.epsilon, p.beta, p.d)
    }
}

impl From<ScaleLadder> for LadderParams {
    fn from(l: ScaleLadder) -> Self {
        LadderParams {
            epsilon: l.epsilon,
            beta: l.beta,
            d: l.d,
        }
    }
}

pub fn build_ladder(epsilon: f64, beta: f64, d: usize) -> Result<ScaleLadder> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidLadder(format!("epsilon = {epsilon} must be positive")));
    }
    if !(beta > 1.0 && beta.is_finite()) {
        return Err(Error::InvalidLadder(format!("beta = {beta} must exceed 1")));
    }
    if d == 0 {
        return Err(Error::InvalidLadder("d must be at least 1".into()));
    }
    if d > i32::MAX as usize {
        return Err(Error::InvalidLadder(format!("d = {d} is too large")));
    }
    let radius = epsilon * beta.powi(d as i32);
    if !(radius.is_finite()) {
        return Err(Error::InvalidLadder("R = eps beta^d overflows".into()));
    }
    let gamma = (0..=d).map(|k| beta.powi(k as i32 - d as i32)).collect();
    let mut edges: Vec<f64> = (0..=d).map(|k| epsilon * beta.powi(k as i32)).collect();
    edges[0] = epsilon;
    edges[d] = radius;
    Ok(ScaleLadder {
        epsilon,
        beta,
        d,
        radius,
        gamma,
        edges,
    })
}

impl ScaleLadder {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// `gamma_k = beta^(k - d)` for `k = 0..=d`.
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Band edges `eps beta^k` for `k = 0..=d`; the last one is exactly `R`.
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// `(lo, hi)` magnitudes of band `k`.
    pub fn band(&self, k: usize) -> Result<(f64, f64)> {
        self.check_level(k)?;
        Ok((self.edges[k - 1], self.edges[k]))
    }

    pub fn check_level(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.d {
            return Err(Error::OutOfRange(format!("level {k} outside 1..={}", self.d)));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64) -> bool {
        let a = x.abs();
        a >= self.epsilon && a < self.radius
    }

    pub fn ladder_spec(&self) -> Result<LadderSpec> {
        LadderSpec::new(self.gamma.clone())
    }
}

/// The unique `k` with `eps beta^(k-1) <= |x| < eps beta^k`.
pub fn scale_of(x: f64, ladder: &ScaleLadder) -> Result<usize> {
    let a = x.abs();
    if !ladder.contains(x) {
        return Err(Error::OutOfDomain {
            x,
            domain: format!("{} <= |x| < {}", ladder.epsilon, ladder.radius),
        });
    }
    Ok(ladder.edges.partition_point(|&e| e <= a))
}

/// Per-band counts of a sample, index `k - 1` for band `k`.
pub fn scale_counts(xs: &[f64], ladder: &ScaleLadder) -> Result<Vec<usize>> {
    let mut counts = vec![0; ladder.d];
    for &x in xs {
        counts[scale_of(x, ladder)? - 1] += 1;
    }
    Ok(counts)
}

/// Density `q(x) = 1 / (C' |x|^alpha)` on the ladder domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PowerLawParams", into = "PowerLawParams")]
pub struct PowerLaw {
    alpha: f64,
    ladder: ScaleLadder,
    normalizer: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PowerLawParams {
    alpha: f64,
    ladder: ScaleLadder,
}

impl TryFrom<PowerLawParams> for PowerLaw {
    type Error = Error;

    fn try_from(p: PowerLawParams) -> Result<Self> {
        PowerLaw::new(p.alpha, p.ladder)
    }
}

impl From<PowerLaw> for PowerLawParams {
    fn from(l: PowerLaw) -> Self {
        PowerLawParams {
            alpha: l.alpha,
            ladder: l.ladder,
        }
    }
}

impl PowerLaw {
    pub fn new(alpha: f64, ladder: ScaleLadder) -> Result<Self> {
        if !(alpha >= 1.0 && alpha.is_finite()) {
            return Err(Error::OutOfRange(format!("alpha = {alpha} must be at least 1")));
        }
        let normalizer = 2.0 * magnitude_integral(alpha, ladder.epsilon, ladder.radius);
        if !(normalizer > 0.0 && normalizer.is_finite()) {
            return Err(Error::OutOfRange(format!("normalizer {normalizer} is not positive")));
        }
        Ok(Self {
            alpha,
            ladder,
            normalizer,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn ladder(&self) -> &ScaleLadder {
        &self.ladder
    }

    /// `C' = integral of |x|^-alpha over the domain`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// Density at `x`; zero outside the domain.
    pub fn density(&self, x: f64) -> f64 {
        if self.ladder.contains(x) {
            1.0 / (self.normalizer * x.abs().powf(self.alpha))
        } else {
            0.0
        }
    }

    /// Probability of `lo <= |X| < hi` for `eps <= lo <= hi <= R`.
    pub fn magnitude_mass(&self, lo: f64, hi: f64) -> f64 {
        let lo = lo.max(self.ladder.epsilon);
        let hi = hi.min(self.ladder.radius);
        if hi <= lo {
            return 0.0;
        }
        2.0 * magnitude_integral(self.alpha, lo, hi) / self.normalizer
    }

    /// Magnitude with CDF value `u` on `[eps, R)`, clamped into that interval.
    pub fn magnitude_quantile(&self, u: f64) -> f64 {
        let (eps, r, a) = (self.ladder.epsilon, self.ladder.radius, self.alpha);
        let m = if a == 1.0 {
            eps * (r / eps).powf(u)
        } else {
            let e = eps.powf(1.0 - a);
            (e - u * (e - r.powf(1.0 - a))).powf(1.0 / (1.0 - a))
        };
        if m < eps {
            eps
        } else if m >= r {
            f64::from_bits(r.to_bits() - 1)
        } else {
            m
        }
    }
}

/// `integral_lo^hi r^-alpha dr`.
fn magnitude_integral(alpha: f64, lo: f64, hi: f64) -> f64 {
    if alpha == 1.0 {
        (hi / lo).ln()
    } else {
        (lo.powf(1.0 - alpha) - hi.powf(1.0 - alpha)) / (alpha - 1.0)
    }
}

/// Analytic `P(X in band k)`.
pub fn scale_mass(law: &PowerLaw, k: usize) -> Result<f64> {
    let (lo, hi) = law.ladder.band(k)?;
    Ok(law.magnitude_mass(lo, hi))
}

/// `n` i.i.d. draws. Each draw consumes a sign bit and then a uniform for the
/// magnitude, from the sampling substream of `seed`.
pub fn sample_power_law(law: &PowerLaw, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, Purpose::Sampling, 0);
    (0..n)
        .map(|_| {
            let negative: bool = rng.gen();
            let u: f64 = rng.gen();
            let m = law.magnitude_quantile(u);
            if negative {
                -m
            } else {
                m
            }
        })
        .collect()
}

/// Largest `|q(x / beta) - beta^alpha q(x)| / q(x)` over a log-spaced grid of
/// `grid_n` points in `[eps beta, R)`.
pub fn scale_invariance_check(law: &PowerLaw, grid_n: usize) -> f64 {
    let l = &law.ladder;
    let lo = l.epsilon * l.beta;
    if grid_n == 0 || lo >= l.radius {
        return 0.0;
    }
    let span = (l.radius / lo).ln();
    let scale = l.beta.powf(law.alpha);
    (0..grid_n)
        .map(|i| {
            let x = lo * (span * i as f64 / grid_n as f64).exp();
            let q = law.density(x);
            (law.density(x / l.beta) - scale * q).abs() / q
        })
        .fold(0.0, f64::max)
}

/// How labels were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    TanhTarget,
    PlantedTeacher,
}

/// Something that can label instances from the ladder domain.
pub trait Labeler: Sync {
    fn mode(&self) -> DatasetMode;
    fn description(&self) -> String;
    fn label(&self, x: f64) -> Result<f64>;
}

impl Labeler for DiffeoBundle {
    fn mode(&self) -> DatasetMode {
        DatasetMode::TanhTarget
    }

    fn description(&self) -> String {
        self.name().to_string()
    }

    fn label(&self, x: f64) -> Result<f64> {
        self.eval(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<f64>,
    pub labels: Vec<f64>,
    pub seed: u64,
    pub mode: DatasetMode,
    pub target: String,
    pub law: PowerLaw,
}

/// Sidecar describing how a dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub alpha: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub mode: DatasetMode,
    pub target: String,
    pub radius: f64,
    pub sampling_stream: u64,
}

pub fn generate_dataset(target: &dyn Labeler, law: &PowerLaw, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("a dataset needs n >= 1".into()));
    }
    let instances = sample_power_law(law, n, seed);
    let labels = instances.iter().map(|&x| target.label(x)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        instances,
        labels,
        seed,
        mode: target.mode(),
        target: target.description(),
        law: law.clone(),
    })
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.instances.len()
    }

    pub fn ladder(&self) -> &ScaleLadder {
        self.law.ladder()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let l = self.ladder();
        DatasetManifest {
            alpha: self.law.alpha,
            epsilon: l.epsilon,
            beta: l.beta,
            d: l.d,
            n: self.n(),
            seed: self.seed,
            mode: self.mode,
            target: self.target.clone(),
            radius: l.radius,
            sampling_stream: stream_id(Purpose::Sampling, 0),
        }
    }

    /// Writes `dataset.csv` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_csv(
            &dir.join(DATASET_FILE),
            &["x", "y"],
            self.instances.iter().zip(&self.labels).map(|(x, y)| vec![fmt17(*x), fmt17(*y)]),
        )?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let ladder = build_ladder(manifest.epsilon, manifest.beta, manifest.d)?;
        let law = PowerLaw::new(manifest.alpha, ladder)?;
        let mut reader = csv::Reader::from_path(dir.join(DATASET_FILE))?;
        let header = reader.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["x", "y"] {
            return Err(Error::Format(format!("dataset header must be x,y, found {header:?}")));
        }
        let (mut instances, mut labels) = (Vec::new(), Vec::new());
        for record in reader.records() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::Format(format!("dataset row has {} fields", record.len())));
            }
            instances.push(parse_f64(&record[0])?);
            labels.push(parse_f64(&record[1])?);
        }
        if instances.len() != manifest.n {
            return Err(Error::Format(format!(
                "manifest declares n = {} but the file has {} rows",
                manifest.n,
                instances.len()
            )));
        }
        let data = Dataset {
            instances,
            labels,
            seed: manifest.seed,
            mode: manifest.mode,
            target: manifest.target,
            law,
        };
        data.validate()?;
        Ok(data)
    }

    /// Checks that every instance lies in the ladder domain.
    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::Empty("dataset has no samples".into()));
        }
        if self.instances.len() != self.labels.len() {
            return Err(Error::Format("instances and labels differ in length".into()));
        }
        for &x in &self.instances {
            scale_of(x, self.ladder())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladder::TargetKind;
    use proptest::prelude::*;

    #[test]
    fn ladder_examples() {
        let l = build_ladder(0.1, 10f64.powf(0.05), 20).unwrap();
        assert!((l.radius() - 1.0).abs() < 1e-12);
        assert!((l.gamma()[0] - 0.1).abs() < 1e-12);
        assert_eq!(l.gamma()[20], 1.0);
        for w in l.gamma().windows(2) {
            assert!((w[1] / w[0] - l.beta()).abs() < 1e-12);
        }
        let l = build_ladder(1.0, 2.0, 1).unwrap();
        assert_eq!(l.radius(), 2.0);
        assert_eq!(l.gamma(), &[0.5, 1.0]);
        assert!(build_ladder(1.0, 2.0, 0).is_err());
        assert!(build_ladder(0.0, 2.0, 3).is_err());
        assert!(build_ladder(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn scale_of_examples() {
        let l = build_ladder(1.0, 2.0, 3).unwrap();
        assert_eq!(scale_of(1.0, &l).unwrap(), 1);
        assert_eq!(scale_of(-(2f64.powf(1.5)), &l).unwrap(), 2);
        assert_eq!(scale_of(2.0, &l).unwrap(), 2);
        assert_eq!(scale_of(-7.999, &l).unwrap(), 3);
        assert!(scale_of(8.0, &l).is_err());
        assert!(scale_of(0.999, &l).is_err());
        assert!(scale_of(f64::NAN, &l).is_err());
    }

    #[test]
    fn scale_mass_examples() {
        let l = build_ladder(0.01, 3.0, 4).unwrap();
        let uniform = PowerLaw::new(1.0, l.clone()).unwrap();
        for k in 1..=4 {
            assert!((scale_mass(&uniform, k).unwrap() - 0.25).abs() < 1e-12);
        }
        let sq = PowerLaw::new(2.0, l.clone()).unwrap();
        for k in 2..=4 {
            let ratio = scale_mass(&sq, k).unwrap() / scale_mass(&sq, k - 1).unwrap();
            assert!((ratio - 1.0 / 3.0).abs() < 1e-12);
        }
        let single = PowerLaw::new(2.7, build_ladder(0.5, 2.0, 1).unwrap()).unwrap();
        assert!((scale_mass(&single, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!(scale_mass(&sq, 0).is_err());
        assert!(scale_mass(&sq, 5).is_err());
        assert!(PowerLaw::new(0.5, l).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        for alpha in [1.0, 1.5, 2.0, 4.0] {
            let law = PowerLaw::new(alpha, build_ladder(0.05, 2.0, 5).unwrap()).unwrap();
            // composite Simpson in t = log|x|, integrand 2 q(e^t) e^t
            let (lo, hi) = (0.05f64.ln(), law.ladder().radius().ln());
            let panels = 20_000;
            let h = (hi - lo) / panels as f64;
            let g = |i: usize| {
                let x = if i == panels { law.ladder().radius() * (1.0 - 1e-16) } else { (lo + h * i as f64).exp() };
                2.0 * law.density(x) * x
            };
            let total: f64 = (0..=panels)
                .map(|i| {
                    let w = if i == 0 || i == panels { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    w * g(i)
                })
                .sum::<f64>()
                * h
                / 3.0;
            assert!((total - 1.0).abs() < 1e-10, "alpha {alpha}: {total}");
        }
    }

    #[test]
    fn quantile_endpoints() {
        let law = PowerLaw::new(1.0, build_ladder(0.25, 2.0, 3).unwrap()).unwrap();
        assert_eq!(law.magnitude_quantile(0.0), 0.25);
        assert!(law.magnitude_quantile(1.0) < 2.0);
        assert!(law.magnitude_quantile(1.0 - 1e-12) > 1.99);
        let law = PowerLaw::new(3.0, build_ladder(0.25, 2.0, 3).unwrap()).unwrap();
        assert_eq!(law.magnitude_quantile(0.0), 0.25);
        assert!(law.magnitude_quantile(1.0) < 2.0);
    }

    #[test]
    fn sampler_matches_masses() {
        let n = 100_000;
        for (alpha, d) in [(1.0, 3), (1.0, 5), (2.0, 3), (2.0, 5)] {
            let law = PowerLaw::new(alpha, build_ladder(0.1, 2.0, d).unwrap()).unwrap();
            let xs = sample_power_law(&law, n, 7);
            let counts = scale_counts(&xs, law.ladder()).unwrap();
            for k in 1..=d {
                let p = scale_mass(&law, k).unwrap();
                let freq = counts[k - 1] as f64 / n as f64;
                let tol = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
                assert!((freq - p).abs() <= tol, "alpha {alpha} d {d} k {k}: {freq} vs {p}");
            }
        }
    }

    #[test]
    fn sampler_is_deterministic_and_symmetric() {
        let law = PowerLaw::new(1.5, build_ladder(0.1, 2.0, 4).unwrap()).unwrap();
        let a = sample_power_law(&law, 5000, 11);
        assert_eq!(a, sample_power_law(&law, 5000, 11));
        assert_ne!(a, sample_power_law(&law, 5000, 12));
        let neg = a.iter().filter(|x| **x < 0.0).count() as f64 / 5000.0;
        assert!((neg - 0.5).abs() < 0.03);
        assert!(a.iter().all(|&x| law.ladder().contains(x)));
    }

    #[test]
    fn scale_invariance() {
        for alpha in [1.0, 2.5] {
            let law = PowerLaw::new(alpha, build_ladder(0.125, 2.0, 6).unwrap()).unwrap();
            assert!(scale_invariance_check(&law, 1000) < 1e-12);
        }
    }

    #[test]
    fn dataset_generation_and_round_trip() {
        let law = PowerLaw::new(1.0, build_ladder(0.25, 2.0, 3).unwrap()).unwrap();
        let tanh = TargetKind::Tanh.bundle(2.0).unwrap();
        assert!(generate_dataset(&tanh, &law, 0, 1).is_err());
        assert!((tanh.label(0.5).unwrap() - 0.46211715726000974).abs() < 1e-15);
        let data = generate_dataset(&tanh, &law, 300, 5).unwrap();
        assert_eq!(data.mode, DatasetMode::TanhTarget);
        for (x, y) in data.instances.iter().zip(&data.labels) {
            assert!((x.tanh() - y).abs() < 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, data);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        for key in ["alpha", "epsilon", "beta", "d", "n", "seed", "mode"] {
            assert!(manifest.get(key).is_some(), "{key}");
        }
        assert_eq!(manifest["mode"], "tanh-target");

        let again = tempfile::tempdir().unwrap();
        generate_dataset(&tanh, &law, 300, 5).unwrap().save(again.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join(DATASET_FILE)).unwrap(),
            fs::read(again.path().join(DATASET_FILE)).unwrap()
        );
    }

    #[test]
    fn labels_outside_target_domain_fail() {
        let law = PowerLaw::new(1.0, build_ladder(0.25, 2.0, 3).unwrap()).unwrap();
        let small = TargetKind::Tanh.bundle(1.0).unwrap();
        assert!(generate_dataset(&small, &law, 200, 3).is_err());
    }

    #[test]
    fn ladder_serde() {
        let l = build_ladder(0.1, 1.5, 7).unwrap();
        let text = serde_json::to_string(&l).unwrap();
        assert_eq!(serde_json::from_str::<ScaleLadder>(&text).unwrap(), l);
        assert!(serde_json::from_str::<ScaleLadder>(r#"{"epsilon":1,"beta":0.5,"d":2}"#).is_err());
    }

    proptest! {
        #[test]
        fn bands_partition_the_domain(eps in 0.01f64..1.0, beta in 1.1f64..4.0, d in 1usize..8, u in 0.0f64..1.0, neg: bool) {
            let l = build_ladder(eps, beta, d).unwrap();
            let x = eps * (l.radius() / eps).powf(u);
            prop_assume!(x < l.radius());
            let x = if neg { -x } else { x };
            let k = scale_of(x, &l).unwrap();
            let (lo, hi) = l.band(k).unwrap();
            prop_assert!(lo <= x.abs() && x.abs() < hi);
        }

        #[test]
        fn masses_sum_to_one(alpha in 1.0f64..6.0, beta in 1.1f64..4.0, d in 1usize..10) {
            let law = PowerLaw::new(alpha, build_ladder(0.3, beta, d).unwrap()).unwrap();
            let total: f64 = (1..=d).map(|k| scale_mass(&law, k).unwrap()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
