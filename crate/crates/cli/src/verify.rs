//! Property suites run by `verify`. Every check records the measured value,
//! its threshold and the margin between them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use scaleladder::data::{build_ladder, generate_dataset, PowerLaw};
use scaleladder::entropy::{
    conditional_relative_entropy, gibbs_measure, kolmogorov_mean, relative_entropy, renyi_divergence, tilted_distribution,
    ConditionalDistribution, DiscreteDistribution,
};
use scaleladder::ladder::{psi_domain, psi_k, tanh_psi_closed_form, verify_prop1, verify_theorem1, TargetKind, CONSTANT_GRID};
use scaleladder::model::{BaseMap, LevelSpec, LevelWeightSet, ModelTemplate};
use scaleladder::risk::{chained_risk, cor2_bound, erm_bound, lambda_ratio, powerlaw_factor, risk_bound, thm3_bound, Measure};
use scaleladder::rng::{substream, Purpose};
use scaleladder::train::{congruency_gap, train_multiscale_entropic, LossTable, TrainSetup};

use crate::commands::Context;
use crate::config::{ExperimentConfig, TeacherKind};
use crate::Suite;

pub const VERIFY_REPORT: &str = "verify_report.json";

/// Random instances per entropy identity.
pub const ENTROPY_INSTANCES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub suite: String,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `threshold - value` for upper limits, `value - threshold` for lower ones.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suites: Vec<String>,
    pub checks: Vec<CheckRecord>,
    pub pass: bool,
}

struct Recorder {
    suite: &'static str,
    checks: Vec<CheckRecord>,
}

impl Recorder {
    fn new(suite: &'static str) -> Self {
        Recorder { suite, checks: Vec::new() }
    }

    fn at_most(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        self.push(name.into(), value, threshold, threshold - value);
    }

    fn at_least(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        self.push(name.into(), value, threshold, value - threshold);
    }

    fn close(&mut self, name: impl Into<String>, value: f64, expected: f64, tol: f64) {
        self.at_most(format!("{} (expected {expected})", name.into()), (value - expected).abs(), tol);
    }

    fn push(&mut self, name: String, value: f64, threshold: f64, margin: f64) {
        let pass = margin >= 0.0;
        println!(
            "[{}] {name}: {value:.6e} vs {threshold:.6e}, margin {margin:.3e} {}",
            self.suite,
            if pass { "ok" } else { "FAILED" }
        );
        self.checks.push(CheckRecord {
            suite: self.suite.into(),
            name,
            value,
            threshold,
            margin,
            pass,
        });
    }
}

pub fn run_suites(ctx: &Context, suite: Suite) -> anyhow::Result<VerifyReport> {
    let selected: Vec<Suite> = match suite {
        Suite::All => vec![Suite::Entropy, Suite::Ladder, Suite::Congruency, Suite::Bounds],
        s => vec![s],
    };
    let mut checks = Vec::new();
    for s in &selected {
        let found = match s {
            Suite::Entropy => entropy_suite(ctx.seed()),
            Suite::Ladder => ladder_suite(ctx)?,
            Suite::Congruency => congruency_suite(ctx)?,
            Suite::Bounds => bounds_suite(ctx)?,
            Suite::All => unreachable!(),
        };
        checks.extend(found);
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport {
        suites: selected.iter().map(|s| s.name().to_string()).collect(),
        checks,
        pass,
    })
}

fn random_dist(rng: &mut impl Rng, n: usize) -> DiscreteDistribution {
    DiscreteDistribution::indexed((0..n).map(|_| 0.05 + rng.gen::<f64>()).collect()).unwrap()
}

fn entropy_suite(seed: u64) -> Vec<CheckRecord> {
    let mut rec = Recorder::new("entropy");
    let mut rng = substream(seed, Purpose::Evaluation, 1);

    let mut chain: f64 = 0.0;
    for _ in 0..ENTROPY_INSTANCES {
        let (nx, ny) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let p = random_dist(&mut rng, nx * ny);
        let q = random_dist(&mut rng, nx * ny);
        let labels: Vec<(usize, usize)> = (0..nx).flat_map(|x| (0..ny).map(move |y| (x, y))).collect();
        let joint = |d: &DiscreteDistribution| DiscreteDistribution::new(labels.clone(), d.probs().to_vec()).unwrap();
        let marginal = |d: &DiscreteDistribution| {
            DiscreteDistribution::indexed((0..nx).map(|x| d.probs()[x * ny..(x + 1) * ny].iter().sum()).collect()).unwrap()
        };
        let conditional = |d: &DiscreteDistribution| {
            let rows = (0..nx)
                .map(|x| DiscreteDistribution::from_weights((0..ny).collect(), d.probs()[x * ny..(x + 1) * ny].to_vec()).unwrap())
                .collect();
            ConditionalDistribution::new((0..nx).collect(), rows).unwrap()
        };
        let px = marginal(&p);
        let lhs = relative_entropy(&joint(&p), &joint(&q)).unwrap();
        let rhs = relative_entropy(&px, &marginal(&q)).unwrap() + conditional_relative_entropy(&conditional(&p), &conditional(&q), &px).unwrap();
        chain = chain.max((lhs - rhs).abs());
    }
    rec.at_most("chain rule max deviation", chain, 1e-12);

    let mut combo: f64 = 0.0;
    for _ in 0..ENTROPY_INSTANCES {
        let n = rng.gen_range(2..=6);
        let (p, q, r) = (random_dist(&mut rng, n), random_dist(&mut rng, n), random_dist(&mut rng, n));
        for l in [0.25, 0.5, 0.75] {
            let lhs = l * relative_entropy(&p, &q).unwrap() + (1.0 - l) * relative_entropy(&p, &r).unwrap();
            let rhs = relative_entropy(&p, &tilted_distribution(&q, &r, l).unwrap()).unwrap() + (1.0 - l) * renyi_divergence(&q, &r, l).unwrap();
            combo = combo.max((lhs - rhs).abs());
        }
    }
    rec.at_most("divergence combination max deviation", combo, 1e-12);

    let mut gibbs: f64 = 0.0;
    for _ in 0..ENTROPY_INSTANCES {
        let n = rng.gen_range(2..=8);
        let lambda = rng.gen_range(0.05..3.0);
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = gibbs_measure((0..n).collect(), &f, lambda).unwrap();
        let u = DiscreteDistribution::uniform((0..n).collect()).unwrap();
        let value = |p: &DiscreteDistribution| {
            let ef: f64 = p.probs().iter().zip(&f).map(|(a, b)| a * b).sum();
            ef + lambda * relative_entropy(p, &u).unwrap() - lambda * relative_entropy(p, &g).unwrap()
        };
        let base = value(&g);
        for _ in 0..50 {
            gibbs = gibbs.max((value(&random_dist(&mut rng, n)) - base).abs());
        }
    }
    rec.at_most("Gibbs variational constancy", gibbs, 1e-10);

    // the soft minimum lies in [min z, min z + lambda ln N]
    let mut below: f64 = f64::NEG_INFINITY;
    let mut above: f64 = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=10);
        let lambda = rng.gen_range(0.01..5.0);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let g = kolmogorov_mean(&z, lambda).unwrap();
        let min = z.iter().copied().fold(f64::INFINITY, f64::min);
        below = below.max(min - g);
        above = above.max(g - min - lambda * (n as f64).ln());
    }
    rec.at_most("soft minimum below min (max excess)", below, 1e-12);
    rec.at_most("soft minimum above min + lambda ln N (max excess)", above, 1e-12);
    rec.checks
}

fn ladder_suite(ctx: &Context) -> anyhow::Result<Vec<CheckRecord>> {
    let mut rec = Recorder::new("ladder");
    let spec = ctx.ladder.ladder_spec()?;
    let cert = verify_theorem1(&ctx.bundle, &spec, CONSTANT_GRID)?;
    for l in &cert.levels {
        rec.at_most(format!("rung {} Lipschitz estimate", l.k), l.lip_est, l.lip_bound);
        rec.at_most(format!("rung {} second-difference estimate", l.k), l.smooth_est, l.smooth_bound);
    }
    for &g in &ctx.ladder.gamma()[..ctx.ladder.d()] {
        let c = verify_prop1(&ctx.bundle, g, CONSTANT_GRID)?;
        rec.at_most(format!("dilation gamma = {g} Lipschitz estimate"), c.lip_est, c.bound);
    }
    if ctx.config.target == TargetKind::Tanh && ctx.ladder.beta() == 2.0 {
        let mut worst: f64 = 0.0;
        for k in 1..=spec.d() {
            let (gp, gn) = spec.rung(k);
            let (lo, hi) = psi_domain(&ctx.bundle, gp)?;
            for i in 0..1000 {
                let x = lo + (hi - lo) * (i as f64 + 0.5) / 1000.0;
                worst = worst.max((psi_k(&ctx.bundle, gp, gn, x)? - tanh_psi_closed_form(gp, x)).abs());
            }
        }
        rec.at_most("tanh rung residual vs closed form", worst, 1e-10);
    }
    Ok(rec.checks)
}

fn congruency_suite(ctx: &Context) -> anyhow::Result<Vec<CheckRecord>> {
    let mut rec = Recorder::new("congruency");
    let ladder = build_ladder(0.25, 2.0, 2)?;
    let bundle = ctx.config.target.bundle(ladder.radius())?;
    let specs = vec![LevelSpec::new(2, 0.1, 0.3, 2.0)?; 2];
    let template = ModelTemplate::new(ladder.clone(), BaseMap::Linear { slope: 1.0 }, specs)?;
    let sets = template
        .weight_sets(10_000)?
        .into_iter()
        .map(|s| {
            let picks = [0, s.len() / 2, s.len() - 1].map(|i| s.vectors()[i].clone()).to_vec();
            LevelWeightSet::from_vectors(s.level, &s.spec, picks)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let law = PowerLaw::new(1.0, ladder)?;
    let data = generate_dataset(&bundle, &law, 8, ctx.seed())?;
    let table = LossTable::build(&template, &sets, &data)?;
    let setup = TrainSetup::with_default_schedule(template, sets, data.n())?;
    let report = congruency_gap(&table, &setup.schedule, 100, ctx.seed())?;
    rec.at_most("max congruency gap", report.max_gap, 1e-9);
    rec.at_least("min objective margin over the optimum", report.min_margin, -1e-10);
    Ok(rec.checks)
}

fn bounds_suite(ctx: &Context) -> anyhow::Result<Vec<CheckRecord>> {
    let mut rec = Recorder::new("bounds");
    let t = thm3_bound(&[1.0], &[1.0], &[1.0], &[1.0], 1)?;
    rec.close("average bound, single level, stated form", t.statement_form, 2.5, 1e-12);
    rec.close("average bound, single level, proof form", t.proof_form, 10.0, 1e-12);
    let two = build_ladder(0.25, 2.0, 2)?;
    rec.close("corollary bound example", cor2_bound(&two, &[1.0, 2.0], &[1.0, 1.0], 100)?, 1.331371, 1e-6);
    rec.close("power-law factor example", powerlaw_factor(5.0, 2.0, 1.0, 1.0), 0.90625, 1e-12);
    rec.close("risk bound example", risk_bound(&two, &[1.0, 2.0], &[1.0, 1.0], 100, 5.0, 1.0)?, 1.469098, 1e-6);
    rec.close("erm bound example", erm_bound(&[1.0, 2.0], &[1.0, 1.0], 100)?, 0.424264, 1e-6);
    rec.close("lambda ratio with one level", lambda_ratio(10.0, 1)?, 1.0, 1e-12);

    // mean chained risk of planted runs against the corollary bound
    let mut planted: ExperimentConfig = ctx.config.clone();
    planted.model.mode = scaleladder::data::DatasetMode::PlantedTeacher;
    planted.model.teacher = TeacherKind::Random;
    let pctx = Context::new(planted)?;
    let sets = pctx.sets()?;
    let teacher = pctx.teacher(Some(&sets))?;
    let logs: Vec<f64> = sets.iter().map(|s| s.log_size()).collect();
    let setup = TrainSetup::new(pctx.template.clone(), sets, pctx.schedule(&logs)?)?;
    let trials = pctx.config.eval.trials;
    let method = pctx.config.eval.method(pctx.seed());
    let mut total = 0.0;
    for t in 0..trials as u64 {
        let data = generate_dataset(&teacher, &pctx.law, pctx.config.train.n, pctx.seed().wrapping_add(1 + t))?;
        let (model, _) = train_multiscale_entropic(&setup, &data, pctx.seed().wrapping_add(t), None, None)?;
        total += chained_risk(&model, &teacher, &teacher, Measure::PowerLaw(&pctx.law), method)?.value;
    }
    let rho: Vec<f64> = pctx.template.specs.iter().map(|s| s.rho).collect();
    let bound = cor2_bound(&pctx.ladder, &rho, &logs, pctx.config.train.n)?;
    rec.at_most(format!("mean chained risk over {trials} planted runs"), total / trials as f64, bound);
    Ok(rec.checks)
}
