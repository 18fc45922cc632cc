//! One function per subcommand. Each returns whether every checked
//! property held; errors are configuration or resource problems.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use serde::{Deserialize, Serialize};

use scaleladder::data::{build_ladder, generate_dataset, Dataset, DatasetMode, Labeler, PowerLaw, ScaleLadder};
use scaleladder::io::{fmt17, write_csv, write_json};
use scaleladder::ladder::{psi_curves, verify_theorem1, write_psi_curves_csv, DiffeoBundle, CONSTANT_GRID};
use scaleladder::model::{approx_error_bound, level_specs_for, BaseMap, HierarchicalModel, LevelWeightSet, ModelTemplate};
use scaleladder::risk::{
    bound_set, chained_risk, lambda_ratio, statistical_risk, theorem4_check, write_bound_sweep_csv, BoundSweepRow, Measure, RiskReport,
};
use scaleladder::train::{lambda_schedule_from_logs, train_multiscale_entropic, TemperatureSchedule, TrainSetup, TrainState};
use scaleladder::Error;

use crate::config::{BaseSlope, ExperimentConfig, LambdaConfig, TeacherKind};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const SCHEDULES: &str = "schedules.csv";
pub const PSI_CURVES: &str = "psi_curves.csv";
pub const THEOREM1_REPORT: &str = "theorem1_report.json";
pub const MODEL: &str = "model.json";
pub const TEACHER: &str = "teacher.json";
pub const TRACE: &str = "trace.json";
pub const RISK_REPORT: &str = "risk_report.json";
pub const RATIO: &str = "ratio.json";
pub const BOUND_SWEEP: &str = "bound_sweep.csv";

/// Points per curve in the rung-residual dump.
pub const CURVE_POINTS: usize = 400;

/// Everything derived from a configuration before any data is drawn.
pub struct Context {
    pub config: ExperimentConfig,
    pub ladder: ScaleLadder,
    pub bundle: DiffeoBundle,
    pub law: PowerLaw,
    pub template: ModelTemplate,
}

impl Context {
    pub fn new(config: ExperimentConfig) -> anyhow::Result<Self> {
        let c = &config.ladder;
        let ladder = build_ladder(c.epsilon, c.beta, c.d)?;
        let bundle = config.target.bundle(ladder.radius())?;
        let law = PowerLaw::new(config.law.alpha, ladder.clone())?;
        let specs = level_specs_for(&ladder, &bundle, &config.model.tau.to_vec(), &config.model.eta.rule())?;
        let slope = match &config.model.base_slope {
            BaseSlope::Value(s) => *s,
            BaseSlope::Named(_) => bundle.map().df(0.0),
        };
        let template = ModelTemplate::new(ladder.clone(), BaseMap::Linear { slope }, specs)?;
        Ok(Self {
            config,
            ladder,
            bundle,
            law,
            template,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out.directory
    }

    pub fn seed(&self) -> u64 {
        self.config.train.seed
    }

    pub fn planted(&self) -> bool {
        self.config.model.mode == DatasetMode::PlantedTeacher
    }

    /// Closed-form set sizes, refusing any level above the enumeration cap.
    pub fn set_sizes(&self) -> anyhow::Result<Vec<u128>> {
        let cap = self.config.model.enumeration_cap;
        self.template
            .specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let count = s.set_size();
                if count > cap {
                    return Err(Error::EnumerationTooLarge {
                        level: i + 1,
                        count,
                        dim: s.dim(),
                        radius: s.max_units(),
                        cap,
                    }
                    .into());
                }
                Ok(count)
            })
            .collect()
    }

    pub fn sets(&self) -> anyhow::Result<Vec<LevelWeightSet>> {
        self.set_sizes()?;
        Ok(self.template.weight_sets(self.config.model.enumeration_cap)?)
    }

    /// Temperatures for sets of the given log-sizes.
    pub fn schedule(&self, log_sizes: &[f64]) -> anyhow::Result<TemperatureSchedule> {
        self.schedule_for(log_sizes, self.config.train.n)
    }

    pub fn schedule_for(&self, log_sizes: &[f64], n: usize) -> anyhow::Result<TemperatureSchedule> {
        match &self.config.train.lambda {
            LambdaConfig::Named(_) => {
                let rho: Vec<f64> = self.template.specs.iter().map(|s| s.rho).collect();
                Ok(lambda_schedule_from_logs(&self.ladder.gamma()[1..], &rho, n, log_sizes)?)
            }
            LambdaConfig::LambdaBar(v) => {
                if v.len() != self.ladder.d() {
                    bail!("train.lambda has {} entries but d = {}", v.len(), self.ladder.d());
                }
                Ok(TemperatureSchedule::from_lambda_bar(v.clone())?)
            }
        }
    }

    /// The planted teacher, drawn from the teacher stream of the run seed.
    pub fn teacher(&self, sets: Option<&[LevelWeightSet]>) -> anyhow::Result<HierarchicalModel> {
        Ok(match self.config.model.teacher {
            TeacherKind::Riemann => HierarchicalModel::riemann(self.template.clone(), &self.bundle)?,
            TeacherKind::Random => {
                let owned;
                let sets = match sets {
                    Some(s) => s,
                    None => {
                        owned = self.sets()?;
                        &owned
                    }
                };
                HierarchicalModel::random_from_sets(self.template.clone(), sets, self.seed())?
            }
        })
    }

    pub fn dataset(&self, teacher: Option<&HierarchicalModel>) -> anyhow::Result<Dataset> {
        let labeler: &dyn Labeler = match teacher {
            Some(t) => t,
            None => &self.bundle,
        };
        Ok(generate_dataset(labeler, &self.law, self.config.train.n, self.seed())?)
    }

    pub fn write_manifest(&self, command: &str, extra: serde_json::Value) -> anyhow::Result<()> {
        let manifest = RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.config.clone(),
            extra,
        };
        write_json(&self.out_dir().join(RUN_MANIFEST), &manifest)?;
        Ok(())
    }
}

/// Resolved configuration and invocation details written beside every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn log_sizes(sizes: &[u128]) -> Vec<f64> {
    sizes.iter().map(|&s| (s as f64).ln()).collect()
}

pub fn cmd_ladder(ctx: &Context) -> anyhow::Result<bool> {
    let sizes = ctx.set_sizes()?;
    let schedule = ctx.schedule(&log_sizes(&sizes))?;
    let gamma = ctx.ladder.gamma();
    let rows = (1..=ctx.ladder.d()).map(|k| {
        vec![
            k.to_string(),
            fmt17(gamma[k]),
            fmt17(ctx.template.specs[k - 1].rho),
            fmt17(schedule.lambda_bar[k - 1]),
            fmt17(schedule.lambda[k - 1]),
            sizes[k - 1].to_string(),
        ]
    });
    write_csv(
        &ctx.out_dir().join(SCHEDULES),
        &["k", "gamma_k", "rho_k", "lambda_bar_k", "lambda_k", "W_k_size"],
        rows,
    )?;
    ctx.write_manifest("ladder", serde_json::Value::Null)?;
    println!("wrote {} levels to {}", ctx.ladder.d(), ctx.out_dir().join(SCHEDULES).display());
    Ok(true)
}

pub fn cmd_decompose(ctx: &Context) -> anyhow::Result<bool> {
    let spec = ctx.ladder.ladder_spec()?;
    let curves = psi_curves(&ctx.bundle, &spec, CURVE_POINTS)?;
    write_psi_curves_csv(&ctx.out_dir().join(PSI_CURVES), &curves)?;
    let cert = verify_theorem1(&ctx.bundle, &spec, CONSTANT_GRID)?;
    write_json(&ctx.out_dir().join(THEOREM1_REPORT), &cert)?;
    ctx.write_manifest("decompose", serde_json::Value::Null)?;
    for l in &cert.levels {
        println!(
            "k={} lipschitz {:.6e} <= {:.6e}, smoothness {:.6e} <= {:.6e}: {}",
            l.k,
            l.lip_est,
            l.lip_bound,
            l.smooth_est,
            l.smooth_bound,
            if l.pass { "ok" } else { "FAILED" }
        );
    }
    Ok(cert.pass)
}

pub fn cmd_sample(ctx: &Context) -> anyhow::Result<bool> {
    let teacher = if ctx.planted() { Some(ctx.teacher(None)?) } else { None };
    let data = ctx.dataset(teacher.as_ref())?;
    data.save(ctx.out_dir())?;
    if let Some(t) = &teacher {
        t.save(&ctx.out_dir().join(TEACHER))?;
    }
    ctx.write_manifest("sample", serde_json::Value::Null)?;
    println!("wrote {} samples to {}", data.n(), ctx.out_dir().display());
    Ok(true)
}

/// What `train` records about a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub state: TrainState,
    pub lambda_bar: Vec<f64>,
    pub lambda: Vec<f64>,
    pub set_sizes: Vec<usize>,
    /// Planted mode: teacher weights per level and whether training chose them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<Vec<TeacherLevel>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherLevel {
    pub level: usize,
    pub weights: Vec<i64>,
    pub recovered: bool,
}

pub fn cmd_train(ctx: &Context, resume: Option<&Path>) -> anyhow::Result<bool> {
    let sets = ctx.sets()?;
    let teacher = if ctx.planted() { Some(ctx.teacher(Some(&sets))?) } else { None };
    let data = ctx.dataset(teacher.as_ref())?;
    let logs: Vec<f64> = sets.iter().map(|s| s.log_size()).collect();
    let schedule = ctx.schedule(&logs)?;
    let setup = TrainSetup::new(ctx.template.clone(), sets, schedule)?;
    let previous = match resume {
        Some(dir) => {
            let path = dir.join(TRACE);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let trace: TraceFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            Some(trace.state)
        }
        None => None,
    };
    let (model, state) = train_multiscale_entropic(&setup, &data, ctx.seed(), ctx.config.train.stop_after, previous.as_ref())?;

    let out = ctx.out_dir();
    data.save(out)?;
    model.save(&out.join(MODEL))?;
    let teacher_levels = teacher.as_ref().map(|t| {
        t.weights()
            .iter()
            .enumerate()
            .map(|(i, w)| TeacherLevel {
                level: i + 1,
                weights: w.flat(),
                recovered: model.weights().get(i) == Some(w),
            })
            .collect::<Vec<_>>()
    });
    if let Some(t) = &teacher {
        t.save(&out.join(TEACHER))?;
    }
    let trace = TraceFile {
        state: state.clone(),
        lambda_bar: setup.schedule.lambda_bar.clone(),
        lambda: setup.schedule.lambda.clone(),
        set_sizes: setup.set_sizes(),
        teacher: teacher_levels.clone(),
    };
    write_json(&out.join(TRACE), &trace)?;
    ctx.write_manifest(
        "train",
        serde_json::json!({ "resume": resume.map(|p| p.display().to_string()) }),
    )?;
    for l in &state.levels {
        let recovered = teacher_levels
            .as_ref()
            .map(|t| format!(", teacher recovered: {}", t[l.level - 1].recovered))
            .unwrap_or_default();
        println!(
            "level {}: lambda {:.6e}, chose #{} of {} with loss {:.6e} (min {:.6e}){recovered}",
            l.level, l.lambda, l.chosen_index, l.set_size, l.chosen_loss, l.min_loss
        );
    }
    Ok(true)
}

pub fn cmd_evaluate(ctx: &Context, model_path: Option<&Path>) -> anyhow::Result<bool> {
    let path: PathBuf = model_path.map_or_else(|| ctx.out_dir().join(MODEL), Path::to_path_buf);
    let model = HierarchicalModel::load(&path).with_context(|| format!("loading model {}", path.display()))?;
    if model.ladder() != &ctx.ladder {
        bail!("the model's ladder differs from the configured one");
    }
    if !model.is_complete() {
        return Err(Error::LevelNotTrained {
            level: model.levels() + 1,
            trained: model.levels(),
        })
        .context("evaluation needs a fully trained model");
    }
    let template = model.template().clone();
    let teacher = if ctx.planted() {
        let beside = path.parent().map(|p| p.join(TEACHER)).filter(|p| p.exists());
        Some(match beside {
            Some(p) => HierarchicalModel::load(&p)?,
            None => ctx.teacher(None)?,
        })
    } else {
        None
    };
    let w_hat = match &teacher {
        Some(t) => t.clone(),
        None => HierarchicalModel::riemann(template.clone(), &ctx.bundle).context("building the reference network")?,
    };
    let reference: &dyn Labeler = match &teacher {
        Some(t) => t,
        None => &ctx.bundle,
    };
    let method = ctx.config.eval.method(ctx.seed());
    let measure = Measure::PowerLaw(&ctx.law);
    let stat = statistical_risk(&model, reference, measure, method)?;
    let chained = chained_risk(&model, &w_hat, reference, measure, method)?;

    let sizes: Vec<u128> = template.specs.iter().map(|s| s.set_size()).collect();
    let logs = log_sizes(&sizes);
    let schedule = ctx.schedule(&logs)?;
    let rho: Vec<f64> = template.specs.iter().map(|s| s.rho).collect();
    let c1 = ctx.bundle.c1();
    let bounds = bound_set(&ctx.ladder, &schedule.lambda_bar, &rho, &logs, ctx.config.train.n, ctx.law.alpha(), c1)?;
    let ratio = lambda_ratio(ctx.ladder.radius() / ctx.ladder.epsilon(), ctx.ladder.d())?;

    let slack = match (ctx.config.eval.slack, ctx.planted()) {
        (Some(s), _) => Ok(s),
        (None, true) => Ok(0.0),
        (None, false) => template
            .specs
            .iter()
            .map(|s| approx_error_bound(s.tau, s.eta, s.m1r, ctx.bundle.c2()))
            .sum::<Result<f64, Error>>(),
    };
    let (theorem4, theorem4_error) = match slack.and_then(|s| theorem4_check(&model, &w_hat, reference, &ctx.law, method, c1, s)) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let report = RiskReport {
        statistical_risk: stat.value,
        statistical_std_err: stat.std_err,
        per_level_statistical: stat.per_level,
        chained_risk: chained.value,
        chained_std_err: chained.std_err,
        per_level_chained: chained.per_level,
        bounds,
        lambda_ratio: ratio,
        method: stat.method,
        fell_back: stat.fell_back || chained.fell_back,
        theorem4,
        theorem4_error,
    };
    write_json(&ctx.out_dir().join(RISK_REPORT), &report)?;
    ctx.write_manifest("evaluate", serde_json::json!({ "model": path.display().to_string() }))?;
    println!(
        "statistical risk {:.6e}, chained risk {:.6e}, corollary bound {:.6e}, erm bound {:.6e}",
        report.statistical_risk, report.chained_risk, report.bounds.cor2, report.bounds.erm_bound
    );
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub r_bar: f64,
    pub d: usize,
    pub beta: f64,
    pub lambda_ratio: f64,
}

/// Sample sizes in the bound sweep, as multiples of `train.n`.
pub const SWEEP_MULTIPLES: [usize; 4] = [1, 4, 16, 64];

pub fn cmd_ratio(ctx: &Context, r_bar: Option<f64>, d: Option<usize>) -> anyhow::Result<bool> {
    let d = d.unwrap_or(ctx.ladder.d());
    let r_bar = r_bar.unwrap_or(ctx.ladder.radius() / ctx.ladder.epsilon());
    let value = lambda_ratio(r_bar, d)?;
    let report = RatioReport {
        r_bar,
        d,
        beta: r_bar.powf(1.0 / d as f64),
        lambda_ratio: value,
    };
    write_json(&ctx.out_dir().join(RATIO), &report)?;

    let sizes = ctx.set_sizes()?;
    let logs = log_sizes(&sizes);
    let rho: Vec<f64> = ctx.template.specs.iter().map(|s| s.rho).collect();
    let own_ratio = lambda_ratio(ctx.ladder.radius() / ctx.ladder.epsilon(), ctx.ladder.d())?;
    let rows = SWEEP_MULTIPLES
        .iter()
        .map(|m| {
            let n = m * ctx.config.train.n;
            let schedule = ctx.schedule_for(&logs, n)?;
            let b = bound_set(&ctx.ladder, &schedule.lambda_bar, &rho, &logs, n, ctx.law.alpha(), ctx.bundle.c1())?;
            Ok(BoundSweepRow {
                n,
                d: ctx.ladder.d(),
                beta: ctx.ladder.beta(),
                alpha: ctx.law.alpha(),
                cor2: b.cor2,
                erm: b.erm_bound,
                risk_bound: b.risk_bound,
                lambda_ratio: own_ratio,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_bound_sweep_csv(&ctx.out_dir().join(BOUND_SWEEP), &rows)?;
    ctx.write_manifest("ratio", serde_json::json!({ "r_bar": r_bar, "d": d }))?;
    println!("lambda_ratio(R_bar = {r_bar}, d = {d}) = {value:.6}");
    Ok(true)
}
