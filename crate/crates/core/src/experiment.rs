//! Replication orchestration: marginal and conditional centile experiments,
//! true-centile tables, drift and screening reports, and their CSV/JSON
//! writers.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cohort::{generate_cohort, Cohort, VisitSchedule};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::lms::{fit_ar1_z, fit_lms, lms_conditional_centile, ZScorePair};
use crate::model::{LognormalAR1Model, PercentilePath};
use crate::mvn::fit_mvn;
use crate::numerics::{Probability, RngStream, PRNG_ALGORITHM};
use crate::qr::{count_crossings, fit_conditional_qr, fit_marginal_qr, LagPair};
use crate::screening::{screening_report, ScreeningReport, ShiftMode};
use crate::spline::SplineSpec;

/// Failed replications tolerated per method, as a fraction of `n_reps`.
pub const FAILURE_BUDGET: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    QR,
    LMS,
    MVN,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::QR => "QR",
            Method::LMS => "LMS",
            Method::MVN => "MVN",
        })
    }
}

/// Which earlier reading the conditional QR model conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QrHistory {
    /// The subject's previous observed reading, across missed visits.
    PreviousObserved,
    /// Only readings in the immediately preceding interval.
    Adjacent,
}

/// A hypothetical subject whose prior reading sits on a marginal percentile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorPath {
    pub name: String,
    pub prior_tau: Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_reps: usize,
    pub n_subjects: usize,
    pub master_seed: u64,
    pub tau_grid: Vec<Probability>,
    pub eval_weeks_marginal: Vec<f64>,
    pub eval_week_conditional: f64,
    pub prior_week: f64,
    pub paths: Vec<PriorPath>,
    pub methods: Vec<Method>,
    pub qr_history: QrHistory,
    pub n_basis: usize,
    pub model: LognormalAR1Model,
    pub schedule: VisitSchedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = |x: f64| Probability::new(x).expect("constant in (0, 1)");
        Self {
            n_reps: 500,
            n_subjects: 1000,
            master_seed: 20_050_101,
            tau_grid: [0.03, 0.10, 0.50, 0.90, 0.97].into_iter().map(p).collect(),
            eval_weeks_marginal: vec![20.0, 24.0, 28.0, 32.0],
            eval_week_conditional: 26.0,
            prior_week: 22.0,
            paths: vec![
                PriorPath {
                    name: "A".into(),
                    prior_tau: p(0.03),
                },
                PriorPath {
                    name: "B".into(),
                    prior_tau: p(0.97),
                },
            ],
            methods: vec![Method::QR, Method::LMS, Method::MVN],
            qr_history: QrHistory::PreviousObserved,
            n_basis: 5,
            model: LognormalAR1Model::default(),
            schedule: VisitSchedule::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_reps == 0 || self.n_subjects == 0 {
            return Err(Error::InvalidParameter(
                "n_reps and n_subjects must be positive".into(),
            ));
        }
        if self.tau_grid.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidParameter(
                "tau_grid and methods must be non-empty".into(),
            ));
        }
        self.model.validate()?;
        self.schedule.validate()?;
        let (lo, hi) = (
            self.schedule.windows[0].0,
            self.schedule.windows.last().expect("validated").1,
        );
        for &w in self
            .eval_weeks_marginal
            .iter()
            .chain([&self.prior_week, &self.eval_week_conditional])
        {
            if !(w >= lo && w <= hi) {
                return Err(Error::OutOfWindow { t: w, lo, hi });
            }
        }
        crate::model::check_consecutive(self.prior_week, self.eval_week_conditional)?;
        self.spline_spec()?;
        Ok(())
    }

    /// Cubic B-spline basis on the schedule's span with uniform interior knots.
    pub fn spline_spec(&self) -> Result<SplineSpec> {
        let lo = self.schedule.windows.first().map_or(16.0, |w| w.0);
        let hi = self.schedule.windows.last().map_or(36.0, |w| w.1);
        SplineSpec::uniform(3, (lo, hi), self.n_basis)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn prior_value(&self, path: &PriorPath) -> Result<f64> {
        self.model
            .marginal_percentile(self.prior_week, path.prior_tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    Marginal,
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub week: f64,
    pub tau: f64,
    pub path: Option<String>,
    pub mean_mmhg: f64,
    pub sd_mmhg: f64,
    pub n_reps: usize,
    /// Per-replication estimates in replication order.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRecord {
    pub method: Method,
    pub replication: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QrChecks {
    pub fits: usize,
    /// Fits violating n₋ ≤ τn or n₊ ≤ (1 − τ)n.
    pub subgradient_violations: usize,
    /// Replications whose marginal QR curves cross somewhere on the grid.
    pub replications_with_crossings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationSummary {
    pub kind: ExperimentKind,
    pub n_reps_requested: usize,
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<FailureRecord>,
    pub qr_checks: Option<QrChecks>,
}

impl ReplicationSummary {
    pub fn row(
        &self,
        method: Method,
        week: f64,
        tau: f64,
        path: Option<&str>,
    ) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| {
            r.method == method
                && (r.week - week).abs() < 1e-9
                && (r.tau - tau).abs() < 1e-9
                && r.path.as_deref() == path
        })
    }
}

/// Both summaries from one pass over the replications; each cohort is fitted
/// once per method and evaluated for both tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResults {
    pub marginal: ReplicationSummary,
    pub conditional: ReplicationSummary,
}

#[derive(Debug, Default)]
struct MethodOutput {
    marginal: Vec<f64>,
    conditional: Vec<f64>,
    qr_fits: usize,
    qr_violations: usize,
    crossings: bool,
}

struct Plan<'a> {
    cfg: &'a ExperimentConfig,
    spec: SplineSpec,
    priors: Vec<f64>,
    marginal: bool,
    conditional: bool,
}

impl Plan<'_> {
    fn run_method(&self, method: Method, cohort: &Cohort) -> Result<MethodOutput> {
        match method {
            Method::QR => self.run_qr(cohort),
            Method::LMS => self.run_lms(cohort),
            Method::MVN => self.run_mvn(cohort),
        }
    }

    /// Conditional cells in (path, tau) order.
    fn conditional_cells(
        &self,
        mut f: impl FnMut(f64, Probability) -> Result<f64>,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.priors.len() * self.cfg.tau_grid.len());
        for &y_prev in &self.priors {
            for &tau in &self.cfg.tau_grid {
                out.push(f(y_prev, tau)?);
            }
        }
        Ok(out)
    }

    fn run_qr(&self, cohort: &Cohort) -> Result<MethodOutput> {
        let cfg = self.cfg;
        let mut out = MethodOutput::default();
        if self.marginal {
            let data = cohort.observed_points();
            let fits = cfg
                .tau_grid
                .iter()
                .map(|&tau| fit_marginal_qr(&data, tau, &self.spec))
                .collect::<Result<Vec<_>>>()?;
            for &w in &cfg.eval_weeks_marginal {
                for fit in &fits {
                    out.marginal.push(fit.predict_centile(w, None, None)?);
                }
            }
            out.qr_fits += fits.len();
            out.qr_violations += fits
                .iter()
                .filter(|f| !f.satisfies_subgradient_bounds())
                .count();
            out.crossings = count_crossings(&fits)? > 0;
        }
        if self.conditional {
            let pairs = match cfg.qr_history {
                QrHistory::PreviousObserved => cohort.previous_observed_pairs(),
                QrHistory::Adjacent => cohort.lag1_pairs(),
            };
            let pairs: Vec<LagPair> = pairs.iter().map(LagPair::from).collect();
            let fits = cfg
                .tau_grid
                .iter()
                .map(|&tau| fit_conditional_qr(&pairs, tau, &self.spec))
                .collect::<Result<Vec<_>>>()?;
            let dt = cfg.eval_week_conditional - cfg.prior_week;
            for &y_prev in &self.priors {
                for fit in &fits {
                    out.conditional.push(fit.predict_centile(
                        cfg.eval_week_conditional,
                        Some(y_prev),
                        Some(dt),
                    )?);
                }
            }
            out.qr_fits += fits.len();
            out.qr_violations += fits
                .iter()
                .filter(|f| !f.satisfies_subgradient_bounds())
                .count();
        }
        Ok(out)
    }

    fn run_lms(&self, cohort: &Cohort) -> Result<MethodOutput> {
        let cfg = self.cfg;
        let mut out = MethodOutput::default();
        let fit = fit_lms(&cohort.observed_points(), &self.spec)?;
        if self.marginal {
            for &w in &cfg.eval_weeks_marginal {
                for &tau in &cfg.tau_grid {
                    out.marginal.push(fit.marginal_centile(w, tau)?);
                }
            }
        }
        if self.conditional {
            let pairs = cohort
                .lag1_pairs()
                .iter()
                .map(|(a, b)| {
                    Ok(ZScorePair {
                        z_prev: fit.zscore(a.time, a.value)?,
                        z_cur: fit.zscore(b.time, b.value)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let rho = fit_ar1_z(&pairs)?;
            out.conditional = self.conditional_cells(|y_prev, tau| {
                lms_conditional_centile(
                    &fit,
                    rho,
                    cfg.prior_week,
                    y_prev,
                    cfg.eval_week_conditional,
                    tau,
                )
            })?;
        }
        Ok(out)
    }

    fn run_mvn(&self, cohort: &Cohort) -> Result<MethodOutput> {
        let cfg = self.cfg;
        let mut out = MethodOutput::default();
        let fit = fit_mvn(cohort, &self.spec)?;
        if self.marginal {
            for &w in &cfg.eval_weeks_marginal {
                for &tau in &cfg.tau_grid {
                    out.marginal.push(fit.marginal_centile(w, tau)?);
                }
            }
        }
        if self.conditional {
            out.conditional = self.conditional_cells(|y_prev, tau| {
                fit.conditional_centile(cfg.prior_week, y_prev, cfg.eval_week_conditional, tau)
            })?;
        }
        Ok(out)
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn run(
    cfg: &ExperimentConfig,
    marginal: bool,
    conditional: bool,
    par: Parallelism,
) -> Result<ExperimentResults> {
    cfg.validate()?;
    let plan = Plan {
        cfg,
        spec: cfg.spline_spec()?,
        priors: cfg
            .paths
            .iter()
            .map(|p| cfg.prior_value(p))
            .collect::<Result<_>>()?,
        marginal,
        conditional,
    };
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();

    let per_rep: Vec<Result<Vec<Result<MethodOutput>>>> = map_indexed(cfg.n_reps, par, |r| {
        let stream = RngStream::with_path(cfg.master_seed, &[r as u64]);
        let cohort = generate_cohort(&cfg.model, &cfg.schedule, cfg.n_subjects, &stream)?;
        Ok(methods
            .iter()
            .map(|&m| plan.run_method(m, &cohort))
            .collect())
    });

    let mut failures = Vec::new();
    let mut by_method: Vec<Vec<MethodOutput>> = methods.iter().map(|_| Vec::new()).collect();
    for (r, rep) in per_rep.into_iter().enumerate() {
        for (k, out) in rep?.into_iter().enumerate() {
            match out {
                Ok(o) => by_method[k].push(o),
                Err(e) => failures.push(FailureRecord {
                    method: methods[k],
                    replication: r,
                    error: e.to_string(),
                }),
            }
        }
    }
    let budget = (FAILURE_BUDGET * cfg.n_reps as f64).floor() as usize;
    for &m in &methods {
        let failed = failures.iter().filter(|f| f.method == m).count();
        if failed > budget {
            return Err(Error::TooManyFailures {
                method: m.to_string(),
                failed,
                total: cfg.n_reps,
            });
        }
    }

    let qr_checks = methods
        .iter()
        .position(|&m| m == Method::QR)
        .map(|k| QrChecks {
            fits: by_method[k].iter().map(|o| o.qr_fits).sum(),
            subgradient_violations: by_method[k].iter().map(|o| o.qr_violations).sum(),
            replications_with_crossings: by_method[k].iter().filter(|o| o.crossings).count(),
        });

    let mut marginal_rows = Vec::new();
    let mut conditional_rows = Vec::new();
    for (k, &method) in methods.iter().enumerate() {
        let outs = &by_method[k];
        let mut cell = 0;
        for &w in &cfg.eval_weeks_marginal {
            for &tau in &cfg.tau_grid {
                if marginal {
                    let samples: Vec<f64> = outs.iter().map(|o| o.marginal[cell]).collect();
                    let (mean, sd) = mean_sd(&samples);
                    marginal_rows.push(SummaryRow {
                        method,
                        week: w,
                        tau: tau.value(),
                        path: None,
                        mean_mmhg: mean,
                        sd_mmhg: sd,
                        n_reps: samples.len(),
                        samples,
                    });
                }
                cell += 1;
            }
        }
        let mut cell = 0;
        for path in &cfg.paths {
            for &tau in &cfg.tau_grid {
                if conditional {
                    let samples: Vec<f64> = outs.iter().map(|o| o.conditional[cell]).collect();
                    let (mean, sd) = mean_sd(&samples);
                    conditional_rows.push(SummaryRow {
                        method,
                        week: cfg.eval_week_conditional,
                        tau: tau.value(),
                        path: Some(path.name.clone()),
                        mean_mmhg: mean,
                        sd_mmhg: sd,
                        n_reps: samples.len(),
                        samples,
                    });
                }
                cell += 1;
            }
        }
    }
    let summary = |kind, rows| ReplicationSummary {
        kind,
        n_reps_requested: cfg.n_reps,
        rows,
        failures: failures.clone(),
        qr_checks: qr_checks.clone(),
    };
    Ok(ExperimentResults {
        marginal: summary(ExperimentKind::Marginal, marginal_rows),
        conditional: summary(ExperimentKind::Conditional, conditional_rows),
    })
}

/// Marginal centiles at `eval_weeks_marginal × tau_grid` per method.
pub fn run_marginal_experiment(
    cfg: &ExperimentConfig,
    par: Parallelism,
) -> Result<ReplicationSummary> {
    Ok(run(cfg, true, false, par)?.marginal)
}

/// Conditional centiles at `eval_week_conditional` given each prior path.
pub fn run_conditional_experiment(
    cfg: &ExperimentConfig,
    par: Parallelism,
) -> Result<ReplicationSummary> {
    Ok(run(cfg, false, true, par)?.conditional)
}

/// Marginal and conditional summaries from shared per-replication fits.
pub fn run_full_experiment(cfg: &ExperimentConfig, par: Parallelism) -> Result<ExperimentResults> {
    run(cfg, true, true, par)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CentileRow {
    pub week: f64,
    pub tau: f64,
    pub mmhg: f64,
}

/// True marginal centiles over the model window by `week_step`.
pub fn emit_true_centiles(
    model: &LognormalAR1Model,
    tau_grid: &[Probability],
    week_step: f64,
) -> Result<Vec<CentileRow>> {
    if !(week_step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "week_step must be > 0, got {week_step}"
        )));
    }
    let (lo, hi) = crate::model::WINDOW;
    let n = ((hi - lo) / week_step + 1e-9).floor() as usize;
    let mut rows = Vec::new();
    for k in 0..=n {
        let week = lo + week_step * k as f64;
        for &tau in tau_grid {
            rows.push(CentileRow {
                week,
                tau: tau.value(),
                mmhg: model.marginal_percentile(week, tau)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckedValue {
    pub name: String,
    pub computed: f64,
    pub published: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckedValue {
    fn new(name: impl Into<String>, computed: f64, published: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            computed,
            published,
            tolerance,
            pass: (computed - published).abs() <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftScenario {
    pub name: String,
    pub weeks: Vec<f64>,
    pub marginal_ranks: Vec<f64>,
    pub checks: Vec<CheckedValue>,
}

/// Conditional ranks of the two drift scenarios under the default model.
pub fn run_drift_report(model: &LognormalAR1Model) -> Result<Vec<DriftScenario>> {
    type Scenario<'a> = (&'a str, &'a [f64], &'a [f64], &'a [f64]);
    let scenarios: [Scenario; 2] = [
        (
            "C",
            &[18.0, 22.0, 26.0, 30.0],
            &[0.60, 0.70, 0.80, 0.90],
            &[0.68, 0.74, 0.83],
        ),
        (
            "D",
            &[18.0, 22.0, 26.0, 30.0, 34.0],
            &[0.50, 0.50, 0.80, 0.80, 0.80],
            &[0.50, 0.85, 0.66, 0.66],
        ),
    ];
    scenarios
        .iter()
        .map(|&(name, weeks, ranks, published)| {
            let path = PercentilePath {
                times: weeks.to_vec(),
                marginal_ranks: ranks
                    .iter()
                    .map(|&r| Probability::new(r))
                    .collect::<Result<_>>()?,
            };
            let got = model.drift_conditional_ranks(&path)?;
            let checks = got
                .iter()
                .zip(published)
                .zip(&weeks[1..])
                .map(|((g, &p), w)| {
                    CheckedValue::new(format!("{name} week {w}"), g.value(), p, 0.005)
                })
                .collect();
            Ok(DriftScenario {
                name: name.into(),
                weeks: weeks.to_vec(),
                marginal_ranks: ranks.to_vec(),
                checks,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreeningSummary {
    pub reports: Vec<ScreeningReport>,
    pub checks: Vec<CheckedValue>,
}

/// Required mean shifts for 90% sensitivity at 90% specificity at week 26.
pub fn run_screening_report(model: &LognormalAR1Model) -> Result<ScreeningSummary> {
    let target = Probability::new(0.9)?;
    let onset = screening_report(model, 26.0, target, ShiftMode::OnsetAtScreen)?;
    let constant = screening_report(model, 26.0, target, ShiftMode::ConstantShift)?;
    let checks = vec![
        CheckedValue::new("onset d", onset.d, 0.2276, 0.001),
        CheckedValue::new("onset abs_diff_mmhg", onset.abs_diff_mmhg, 15.6, 0.1),
        CheckedValue::new("onset sd_units", onset.sd_units, 2.3, 0.05),
        CheckedValue::new("constant d", constant.d, 0.6696, 0.002),
    ];
    Ok(ScreeningSummary {
        reports: vec![onset, constant],
        checks,
    })
}

/// Header attached to every output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub software: String,
    pub version: String,
    pub command: String,
    pub prng: String,
    pub knots: Vec<f64>,
    pub config: serde_json::Value,
}

impl Metadata {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            prng: PRNG_ALGORITHM.into(),
            knots: cfg.spline_spec()?.knots().to_vec(),
            config: serde_json::to_value(cfg)?,
        })
    }

    /// `# key: value` comment lines preceding CSV data.
    pub fn write_csv_header<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "# software: {} {}", self.software, self.version)?;
        writeln!(out, "# command: {}", self.command)?;
        writeln!(out, "# prng: {}", self.prng)?;
        writeln!(out, "# knots: {}", serde_json::to_string(&self.knots)?)?;
        writeln!(out, "# config: {}", serde_json::to_string(&self.config)?)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct JsonDocument<'a, T: Serialize> {
    metadata: &'a Metadata,
    #[serde(flatten)]
    body: T,
}

/// Pretty JSON object `{metadata, ...body}`; `body` must serialize to a map.
pub fn write_json<W: Write, T: Serialize>(out: &mut W, meta: &Metadata, body: T) -> Result<()> {
    serde_json::to_writer_pretty(
        &mut *out,
        &JsonDocument {
            metadata: meta,
            body,
        },
    )?;
    writeln!(out)?;
    Ok(())
}

/// Table CSV: method, week, tau, path, mean_mmhg, sd_mmhg, n_reps.
pub fn write_summary_csv<W: Write>(
    out: &mut W,
    meta: &Metadata,
    rows: &[SummaryRow],
) -> Result<()> {
    meta.write_csv_header(out)?;
    let mut w = csv::Writer::from_writer(&mut *out);
    w.write_record([
        "method",
        "week",
        "tau",
        "path",
        "mean_mmhg",
        "sd_mmhg",
        "n_reps",
    ])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            format!("{}", r.week),
            format!("{}", r.tau),
            r.path.clone().unwrap_or_default(),
            format!("{:.6}", r.mean_mmhg),
            format!("{:.6}", r.sd_mmhg),
            r.n_reps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_centiles_csv<W: Write>(
    out: &mut W,
    meta: &Metadata,
    rows: &[CentileRow],
) -> Result<()> {
    meta.write_csv_header(out)?;
    let mut w = csv::Writer::from_writer(&mut *out);
    w.write_record(["week", "tau", "mmhg"])?;
    for r in rows {
        w.write_record([
            format!("{}", r.week),
            format!("{}", r.tau),
            format!("{:.6}", r.mmhg),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_checks_csv<W: Write>(
    out: &mut W,
    meta: &Metadata,
    checks: &[CheckedValue],
) -> Result<()> {
    meta.write_csv_header(out)?;
    let mut w = csv::Writer::from_writer(&mut *out);
    w.write_record(["name", "computed", "published", "tolerance", "pass"])?;
    for c in checks {
        w.write_record([
            c.name.clone(),
            format!("{:.6}", c.computed),
            format!("{}", c.published),
            format!("{}", c.tolerance),
            c.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_reps: usize, n_subjects: usize) -> ExperimentConfig {
        ExperimentConfig {
            n_reps,
            n_subjects,
            master_seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_match_design() {
        let c = ExperimentConfig::default();
        assert_eq!((c.n_reps, c.n_subjects), (500, 1000));
        let taus: Vec<f64> = c.tau_grid.iter().map(|t| t.value()).collect();
        assert_eq!(taus, vec![0.03, 0.10, 0.50, 0.90, 0.97]);
        assert_eq!(c.eval_weeks_marginal, vec![20.0, 24.0, 28.0, 32.0]);
        assert_eq!((c.prior_week, c.eval_week_conditional), (22.0, 26.0));
        assert_eq!(
            c.spline_spec().unwrap().knots(),
            &[16.0, 16.0, 16.0, 16.0, 26.0, 36.0, 36.0, 36.0, 36.0]
        );
        let prior_a = c.prior_value(&c.paths[0]).unwrap();
        assert!((prior_a - 56.3).abs() < 0.05);
    }

    #[test]
    fn config_round_trip_and_partial_json() {
        let c = ExperimentConfig::from_json_str(
            r#"{"n_reps": 3, "methods": ["MVN"], "tau_grid": [0.5]}"#,
        )
        .unwrap();
        assert_eq!(c.n_reps, 3);
        assert_eq!(c.methods, vec![Method::MVN]);
        assert_eq!(c.n_subjects, 1000);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&s).unwrap(), c);
        assert!(ExperimentConfig::from_json_str(r#"{"n_rep": 3}"#).is_err());
        let adj = ExperimentConfig::from_json_str(r#"{"qr_history": "adjacent"}"#).unwrap();
        assert_eq!(adj.qr_history, QrHistory::Adjacent);
        assert!(ExperimentConfig::from_json_str(r#"{"tau_grid": [1.5]}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"prior_week": 40}"#).is_err());
    }

    #[test]
    fn shared_run_matches_separate_runs() {
        let cfg = small(3, 200);
        let full = run_full_experiment(&cfg, Parallelism::Sequential).unwrap();
        let m = run_marginal_experiment(&cfg, Parallelism::Sequential).unwrap();
        let c = run_conditional_experiment(&cfg, Parallelism::Sequential).unwrap();
        assert_eq!(full.marginal.rows, m.rows);
        assert_eq!(full.conditional.rows, c.rows);
        assert_eq!(m.rows.len(), 3 * 4 * 5);
        assert_eq!(c.rows.len(), 3 * 2 * 5);
        assert!(m
            .rows
            .iter()
            .chain(&c.rows)
            .all(|r| r.sd_mmhg >= 0.0 && r.n_reps == 3));
    }

    #[test]
    fn dropping_a_method_leaves_others_unchanged() {
        let cfg = small(2, 200);
        let all = run_full_experiment(&cfg, Parallelism::Sequential).unwrap();
        let cfg2 = ExperimentConfig {
            methods: vec![Method::MVN, Method::LMS],
            ..cfg
        };
        let some = run_full_experiment(&cfg2, Parallelism::Threads(2)).unwrap();
        for r in &some.conditional.rows {
            let other = all
                .conditional
                .row(r.method, r.week, r.tau, r.path.as_deref())
                .unwrap();
            assert_eq!(r, other);
        }
        assert!(some.marginal.qr_checks.is_none());
    }

    #[test]
    fn replication_order_independent_of_threads() {
        let cfg = small(4, 150);
        let a = run_full_experiment(&cfg, Parallelism::Sequential).unwrap();
        let b = run_full_experiment(&cfg, Parallelism::Threads(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn qr_history_only_affects_conditional_qr() {
        let cfg = small(2, 200);
        let prev = run_full_experiment(&cfg, Parallelism::Sequential).unwrap();
        let adj = run_full_experiment(
            &ExperimentConfig {
                qr_history: QrHistory::Adjacent,
                ..cfg
            },
            Parallelism::Sequential,
        )
        .unwrap();
        assert_eq!(prev.marginal.rows, adj.marginal.rows);
        for (a, b) in prev.conditional.rows.iter().zip(&adj.conditional.rows) {
            assert_eq!(a.method == Method::QR, a.mean_mmhg != b.mean_mmhg);
        }
    }

    #[test]
    fn failure_budget() {
        // one subject is too few observations for every estimator
        let cfg = small(2, 1);
        match run_marginal_experiment(&cfg, Parallelism::Sequential) {
            Err(Error::TooManyFailures { failed, total, .. }) => {
                assert_eq!((failed, total), (2, 2))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mean_sd_oracle() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn true_centiles_table() {
        let cfg = ExperimentConfig::default();
        let rows = emit_true_centiles(&cfg.model, &cfg.tau_grid, 0.5).unwrap();
        assert_eq!(rows.len(), 41 * 5);
        let r = rows
            .iter()
            .find(|r| r.week == 22.0 && r.tau == 0.03)
            .unwrap();
        assert!((r.mmhg - 56.3).abs() < 0.05);
        for chunk in rows.chunks(5) {
            assert!(chunk.windows(2).all(|w| w[1].mmhg > w[0].mmhg));
            let med = chunk[2].mmhg;
            assert!((med - cfg.model.log_mean(chunk[2].week).unwrap().exp()).abs() < 1e-9);
        }
        assert!(emit_true_centiles(&cfg.model, &cfg.tau_grid, 0.0).is_err());
    }

    #[test]
    fn drift_and_screening_reports_pass() {
        let m = LognormalAR1Model::default();
        let drift = run_drift_report(&m).unwrap();
        assert_eq!(drift.len(), 2);
        assert!(
            drift.iter().flat_map(|d| &d.checks).all(|c| c.pass),
            "{drift:?}"
        );
        let s = run_screening_report(&m).unwrap();
        assert!(s.checks.iter().all(|c| c.pass), "{s:?}");
    }

    #[test]
    fn csv_output_has_header_and_columns() {
        let cfg = small(2, 150);
        let summary = run_conditional_experiment(&cfg, Parallelism::Sequential).unwrap();
        let meta = Metadata::new("table2", &cfg).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &meta, &summary.rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# software: condcentile"));
        assert!(lines.iter().any(|l| l.starts_with("# prng: ChaCha8")));
        assert!(lines
            .iter()
            .any(|l| l.starts_with("# knots: [16.0,16.0,16.0,16.0,26.0")));
        assert_eq!(lines[5], "method,week,tau,path,mean_mmhg,sd_mmhg,n_reps");
        assert!(lines[6].starts_with("QR,26,0.03,A,"));

        let mut buf = Vec::new();
        write_json(&mut buf, &meta, &summary).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["metadata"]["config"]["n_reps"], 2);
        assert_eq!(v["rows"].as_array().unwrap().len(), 30);
    }
}
