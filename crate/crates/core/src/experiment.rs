//! Runners behind the command-line tool: analytic reports, single runs, rate
//! sweeps and the approximation-error table.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::analytics::{
    capacity, capacity_blocking_bounds, capacity_blocking_estimate, capacity_nonblocking, good_code_curve,
    layer_constant, optimal_queue_length, service_delay, total_delay_estimate, usage, AnalyticsError, ClassParams,
    Policy, SystemParams,
};
use crate::delay_model::ShiftedExp;
use crate::metrics::{code_composition, compute_stats, CodeComposition, MetricsError, StatsRow, Summary};
use crate::schedulers::{SchedulerKind, ThresholdTable};
use crate::sim::{detect_stability, run_simulation, SimConfig, SimError, SimOutput, Stability};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Scheduler(#[from] crate::schedulers::SchedulerError),
    #[error("{0}")]
    Invalid(String),
}

/// Capacity with every class on its shortest code, the scale for sweep
/// multipliers: `L / alpha^T U(K)` for non-blocking pools and
/// `(L - (alpha^T K - 1) / 2) / alpha^T U(K)` for blocking ones.
pub fn reference_capacity(
    classes: &[ClassParams],
    alpha: &[f64],
    sys: &SystemParams,
    policy: Policy,
) -> Result<f64, AnalyticsError> {
    if classes.len() != alpha.len() {
        return Err(AnalyticsError::DimensionMismatch {
            expected: classes.len(),
            got: alpha.len(),
        });
    }
    let mut mean_usage = 0.0;
    let mut mean_k = 0.0;
    for (c, a) in classes.iter().zip(alpha) {
        mean_usage += a * usage(c.k as f64, c)?;
        mean_k += a * c.k as f64;
    }
    let l = sys.threads as f64;
    Ok(match policy {
        Policy::NonBlocking => l / mean_usage,
        Policy::Blocking => (l - (mean_k - 1.0) / 2.0) / mean_usage,
    })
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq)]
pub struct CodeReport {
    pub class_id: usize,
    pub n: u32,
    pub k: u32,
    pub usage: f64,
    /// Blocking lower/upper bounds and midpoint estimate.
    pub blocking: (f64, f64, f64),
    pub nonblocking: f64,
    pub service_delay: f64,
    /// Crossover towards `n + 1`; absent for `n = n_max`.
    pub crossover: Option<CrossoverReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossoverReport {
    pub lambda: Option<f64>,
    pub backlog: f64,
    /// `D(n, lambda_n) - D(n + 1, lambda_n)` relative to `D(n, lambda_n)`.
    pub residual: Option<f64>,
}

impl CrossoverReport {
    fn describe(&self) -> &'static str {
        match self.lambda {
            Some(_) => "yes",
            None if self.backlog.is_infinite() => "no crossover (longer code always better)",
            None => "no crossover (shorter code always better)",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub codes: Vec<f64>,
    pub constant: f64,
    pub q_opt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeReport {
    pub policy: Policy,
    pub codes: Vec<CodeReport>,
    /// Good code vectors sampled along class 0's range; multi-class only.
    pub curve: Result<Vec<CurvePoint>, String>,
}

const CURVE_STEP: f64 = 0.25;

pub fn analyze(classes: &[ClassParams], sys: &SystemParams, policy: Policy) -> Result<AnalyzeReport, ExperimentError> {
    let table = ThresholdTable::compute(classes, sys, policy)?;
    let mut codes = Vec::new();
    for (i, c) in classes.iter().enumerate() {
        for n in c.k..=c.n_max.min(sys.threads) {
            let crossover = table.row(i).iter().find(|t| t.n == n).map(|t| {
                let residual = t.lambda.map(|lam| {
                    let short = total_delay_estimate(n, c, sys, lam, policy);
                    let long = total_delay_estimate(n + 1, c, sys, lam, policy);
                    match (short, long) {
                        (Ok(s), Ok(l)) => (s - l) / s,
                        _ => f64::NAN,
                    }
                });
                CrossoverReport {
                    lambda: t.lambda,
                    backlog: t.backlog,
                    residual,
                }
            });
            let (lo, hi) = capacity_blocking_bounds(n, c, sys)?;
            codes.push(CodeReport {
                class_id: i,
                n,
                k: c.k,
                usage: usage(n as f64, c)?,
                blocking: (lo, hi, capacity_blocking_estimate(n, c, sys)?),
                nonblocking: capacity_nonblocking(n, c, sys)?,
                service_delay: service_delay(n, c)?,
                crossover,
            });
        }
    }
    let curve = if classes.len() < 2 {
        Err("single class".to_string())
    } else {
        curve_samples(classes, sys).map_err(|e| e.to_string())
    };
    Ok(AnalyzeReport { policy, codes, curve })
}

fn curve_samples(classes: &[ClassParams], sys: &SystemParams) -> Result<Vec<CurvePoint>, AnalyticsError> {
    let c0 = &classes[0];
    let steps = ((c0.n_max - c0.k) as f64 / CURVE_STEP).round() as usize;
    (0..=steps)
        .map(|i| {
            let anchor = c0.k as f64 + i as f64 * CURVE_STEP;
            let codes = good_code_curve(0, anchor, classes)?.0;
            Ok(CurvePoint {
                constant: layer_constant(&codes, classes, sys)?,
                q_opt: optimal_queue_length(&codes, classes, sys)?,
                codes,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AnalyzeReport {
    pub fn write_codes_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "class_id,n,k,usage,C_blocking_lo,C_blocking_hi,C_blocking_est,C_nonblocking,D_s,policy,lambda_n,Q_n,crossover,residual"
        )?;
        for r in &self.codes {
            let (lambda, backlog, note, residual) = match &r.crossover {
                Some(x) => (opt(x.lambda), x.backlog.to_string(), x.describe(), opt(x.residual)),
                None => (String::new(), String::new(), "", String::new()),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.class_id,
                r.n,
                r.k,
                r.usage,
                r.blocking.0,
                r.blocking.1,
                r.blocking.2,
                r.nonblocking,
                r.service_delay,
                self.policy,
                lambda,
                backlog,
                note,
                residual
            )?;
        }
        Ok(())
    }

    pub fn write_curve_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let Ok(points) = &self.curve else {
            return Ok(());
        };
        let m = points.first().map(|p| p.codes.len()).unwrap_or(0);
        let mut header: Vec<String> = (0..m).map(|i| format!("n_{i}")).collect();
        header.extend(["const".to_string(), "Q_opt".to_string()]);
        writeln!(out, "{}", header.join(","))?;
        for p in points {
            let mut cells: Vec<String> = p.codes.iter().map(f64::to_string).collect();
            cells.push(p.constant.to_string());
            cells.push(p.q_opt.to_string());
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- simulate

/// Outcome of one simulation run with its statistics.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub row: StatsRow,
    pub per_class: Vec<Option<Summary>>,
    pub composition: CodeComposition,
    pub stability: Stability,
    pub output: SimOutput,
}

pub fn simulate(cfg: &SimConfig) -> Result<RunReport, ExperimentError> {
    let output = run_simulation(cfg)?;
    let stats = compute_stats(&output.records, output.warmup)?;
    let total = cfg.total_rate();
    let row = StatsRow {
        scheduler: cfg.scheduler.to_string(),
        policy: cfg.policy,
        lambda_total: total,
        alpha: cfg.rates.iter().map(|r| r / total).collect(),
        stats: stats.overall,
        mean_backlog: output.mean_backlog,
        tags: Vec::new(),
    };
    Ok(RunReport {
        row,
        per_class: stats.per_class,
        composition: code_composition(output.measured()),
        stability: detect_stability(&output.records, output.records.len() / 5),
        output,
    })
}

// ---------------------------------------------------------------- sweep

/// Rate multipliers (of `capacity`) × schedulers × seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub multipliers: Vec<f64>,
    pub schedulers: Vec<SchedulerKind>,
    pub seeds: Vec<u64>,
    pub capacity: f64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.multipliers.is_empty() || self.multipliers.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err("multipliers must be positive and non-empty".into());
        }
        if self.schedulers.is_empty() {
            return Err("at least one scheduler is required".into());
        }
        if self.seeds.is_empty() {
            return Err("at least one seed is required".into());
        }
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return Err(format!("reference capacity {} is not positive", self.capacity));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub point: usize,
    pub multiplier: f64,
    pub scheduler: SchedulerKind,
    pub seed: u64,
    pub row: StatsRow,
    pub per_class: Vec<Option<Summary>>,
    pub composition: CodeComposition,
    pub stability: Stability,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub policy: Policy,
    pub alpha: Vec<f64>,
    /// Ordered by point, then scheduler (as listed), then seed.
    pub runs: Vec<SweepRun>,
    /// Per point, the per-metric minimum of seed-averaged fixed schemes and
    /// the matching minimum mean backlog.
    pub envelope: Vec<Option<(Summary, f64)>>,
}

impl SweepResult {
    pub fn runs_for<'a>(&'a self, point: usize, scheduler: &'a SchedulerKind) -> impl Iterator<Item = &'a SweepRun> + 'a {
        self.runs
            .iter()
            .filter(move |r| r.point == point && &r.scheduler == scheduler)
    }

    /// Seed-averaged summary of one scheduler at one point.
    pub fn averaged(&self, point: usize, scheduler: &SchedulerKind) -> Option<Summary> {
        let items: Vec<Summary> = self.runs_for(point, scheduler).map(|r| r.row.stats).collect();
        Summary::average(&items)
    }

    pub fn lambda(&self, point: usize) -> f64 {
        self.spec.multipliers[point] * self.spec.capacity
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut rows: Vec<StatsRow> = self.runs.iter().map(|r| r.row.clone()).collect();
        for (point, env) in self.envelope.iter().enumerate() {
            if let Some((stats, backlog)) = env {
                rows.push(StatsRow {
                    scheduler: "envelope".into(),
                    policy: self.policy,
                    lambda_total: self.lambda(point),
                    alpha: self.alpha.clone(),
                    stats: *stats,
                    mean_backlog: *backlog,
                    tags: vec![point.to_string(), self.spec.multipliers[point].to_string(), "all".into(), String::new()],
                });
            }
        }
        crate::metrics::write_stats_csv(&rows, &["point", "multiplier", "seed", "stable"], out)
    }
}

pub fn run_sweep(base: &SimConfig, alpha: &[f64], spec: &SweepSpec) -> Result<SweepResult, ExperimentError> {
    spec.validate().map_err(ExperimentError::Invalid)?;
    if alpha.len() != base.classes.len() {
        return Err(ExperimentError::Invalid(format!(
            "{} composition weights for {} classes",
            alpha.len(),
            base.classes.len()
        )));
    }
    let mut jobs = Vec::new();
    for (point, &m) in spec.multipliers.iter().enumerate() {
        for scheduler in &spec.schedulers {
            for &seed in &spec.seeds {
                jobs.push((point, m, scheduler.clone(), seed));
            }
        }
    }
    let runs = jobs
        .into_par_iter()
        .map(|(point, multiplier, scheduler, seed)| {
            let lambda = multiplier * spec.capacity;
            let mut cfg = base.clone().with_seed(seed);
            cfg.rates = alpha.iter().map(|a| a * lambda).collect();
            cfg.scheduler = scheduler.clone();
            let mut report = simulate(&cfg)?;
            let stable = report.stability == Stability::Stable;
            report.row.lambda_total = lambda;
            report.row.alpha = alpha.to_vec();
            report.row.tags = vec![point.to_string(), multiplier.to_string(), seed.to_string(), stable.to_string()];
            Ok(SweepRun {
                point,
                multiplier,
                scheduler,
                seed,
                row: report.row,
                per_class: report.per_class,
                composition: report.composition,
                stability: report.stability,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;

    let mut result = SweepResult {
        spec: spec.clone(),
        policy: base.policy,
        alpha: alpha.to_vec(),
        runs,
        envelope: Vec::new(),
    };
    result.envelope = (0..spec.multipliers.len())
        .map(|point| {
            let fixed: Vec<(Summary, f64)> = spec
                .schedulers
                .iter()
                .filter(|s| s.is_fixed())
                .filter_map(|s| {
                    let runs: Vec<&SweepRun> = result.runs_for(point, s).collect();
                    let avg = result.averaged(point, s)?;
                    let backlog = runs.iter().map(|r| r.row.mean_backlog).sum::<f64>() / runs.len() as f64;
                    Some((avg, backlog))
                })
                .collect();
            let stats: Vec<Summary> = fixed.iter().map(|f| f.0).collect();
            let env = Summary::envelope(&stats)?;
            let backlog = fixed.iter().map(|f| f.1).fold(f64::INFINITY, f64::min);
            Some((env, backlog))
        })
        .collect();
    Ok(result)
}

// ---------------------------------------------------------------- table1

/// Grid for the approximation-error table. Task delays have unit mean with
/// `delta = fraction`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1Params {
    pub fractions: Vec<f64>,
    pub codes: Vec<u32>,
    pub threads: Vec<u32>,
    pub policies: Vec<Policy>,
    pub k: u32,
    /// Arrival rates as multiples of the code's estimated capacity.
    pub multipliers: Vec<f64>,
    pub requests: usize,
    pub seed: u64,
}

impl Default for Table1Params {
    fn default() -> Self {
        Self {
            fractions: vec![0.2, 0.4, 0.6, 0.8],
            codes: vec![3, 6],
            threads: vec![16, 64],
            policies: vec![Policy::Blocking, Policy::NonBlocking],
            k: 3,
            multipliers: (1..=9).map(|i| i as f64 / 10.0).collect(),
            requests: crate::sim::DEFAULT_HORIZON,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Cell {
    pub policy: Policy,
    pub threads: u32,
    pub n: u32,
    pub k: u32,
    pub fraction: f64,
    /// Per multiplier: `(simulated mean delay, estimate, |error| in percent)`.
    pub points: Vec<(f64, f64, f64)>,
}

impl Table1Cell {
    pub fn min_error(&self) -> f64 {
        self.points.iter().map(|p| p.2).fold(f64::INFINITY, f64::min)
    }

    pub fn max_error(&self) -> f64 {
        self.points.iter().map(|p| p.2).fold(0.0, f64::max)
    }
}

pub fn run_table1(params: &Table1Params) -> Result<Vec<Table1Cell>, ExperimentError> {
    let mut cells = Vec::new();
    for &policy in &params.policies {
        for &threads in &params.threads {
            for &n in &params.codes {
                for &fraction in &params.fractions {
                    cells.push((policy, threads, n, fraction));
                }
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..params.multipliers.len()).map(move |p| (c, p)))
        .collect();
    let results = jobs
        .into_par_iter()
        .map(|(c, p)| {
            let (policy, threads, n, fraction) = cells[c];
            let delay = ShiftedExp::from_mean_and_fraction(1.0, fraction)
                .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
            let class = ClassParams::from_delay(params.k, &delay, n)?;
            let sys = SystemParams::with_threads(threads)?;
            let lambda = params.multipliers[p] * capacity(n, &class, &sys, policy)?;
            let estimate = total_delay_estimate(n, &class, &sys, lambda, policy)?;
            let cfg = SimConfig::new(vec![class], vec![lambda], sys, policy, SchedulerKind::Fixed(vec![n]))
                .with_horizon(params.requests)
                .with_seed(params.seed);
            let out = run_simulation(&cfg)?;
            let sim = compute_stats(&out.records, out.warmup)?.overall.mean_d;
            Ok((sim, estimate, (sim - estimate).abs() / estimate * 100.0))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let per_cell = params.multipliers.len();
    Ok(cells
        .iter()
        .zip(results.chunks(per_cell))
        .map(|(&(policy, threads, n, fraction), pts)| Table1Cell {
            policy,
            threads,
            n,
            k: params.k,
            fraction,
            points: pts.to_vec(),
        })
        .collect())
}

pub fn write_table1_csv<W: Write>(cells: &[Table1Cell], multipliers: &[f64], mut out: W) -> std::io::Result<()> {
    let mut header: Vec<String> = ["policy", "L", "n", "k", "delta_fraction", "min_err_pct", "max_err_pct"]
        .map(String::from)
        .to_vec();
    header.extend(multipliers.iter().map(|m| format!("err_pct@{m}")));
    writeln!(out, "{}", header.join(","))?;
    for c in cells {
        let mut cells = vec![
            c.policy.to_string(),
            c.threads.to_string(),
            c.n.to_string(),
            c.k.to_string(),
            c.fraction.to_string(),
            c.min_error().to_string(),
            c.max_error().to_string(),
        ];
        cells.extend(c.points.iter().map(|p| p.2.to_string()));
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}
