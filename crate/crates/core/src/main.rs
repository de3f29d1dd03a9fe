use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use condcentile::cohort::generate_cohort_with;
use condcentile::exec::Parallelism;
use condcentile::experiment::{
    emit_true_centiles, run_conditional_experiment, run_drift_report, run_marginal_experiment,
    run_screening_report, write_centiles_csv, write_checks_csv, write_json, write_summary_csv,
    ExperimentConfig, Metadata, QrHistory,
};
use condcentile::lms::{fit_ar1_z, fit_lms, ZScorePair};
use condcentile::mvn::fit_mvn;
use condcentile::numerics::RngStream;
use condcentile::qr::{fit_conditional_qr, fit_marginal_qr, LagPair};

#[derive(Parser)]
#[command(
    name = "condcentile",
    version,
    about = "Marginal and conditional reference centile simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one cohort (replication 0) and optionally export fits to it.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Directory for QR, LMS and MVN fit exports.
        #[arg(long)]
        fits: Option<PathBuf>,
    },
    /// Replication SDs of marginal centile estimates.
    Table1(Common),
    /// Replication means and SDs of conditional centile estimates.
    Table2(Common),
    /// Conditional ranks of the drift scenarios.
    Drift(Common),
    /// Required mean shifts for 90% sensitivity at 90% specificity.
    Screening(Common),
    /// True marginal centiles over the gestational window.
    TrueCentiles {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.5)]
        week_step: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    subjects: Option<usize>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// JSON file with ExperimentConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially. Does not affect results.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_json_str(&text)
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(r) = self.reps {
            cfg.n_reps = r;
        }
        if let Some(n) = self.subjects {
            cfg.n_subjects = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn parallelism(&self) -> Parallelism {
        Parallelism::from_threads(self.threads)
    }

    fn writer(&self) -> anyhow::Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            )),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }
}

#[derive(Serialize)]
struct Rows<T> {
    rows: T,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common, fits } => simulate(&common, fits.as_deref()),
        Command::Table1(common) => {
            let cfg = common.config()?;
            let summary = run_marginal_experiment(&cfg, common.parallelism())?;
            let meta = Metadata::new("table1", &cfg)?;
            let mut out = common.writer()?;
            match common.format {
                Format::Csv => write_summary_csv(&mut out, &meta, &summary.rows)?,
                Format::Json => write_json(&mut out, &meta, &summary)?,
            }
            report_failures(&summary.failures);
            out.flush()?;
            Ok(())
        }
        Command::Table2(common) => {
            let cfg = common.config()?;
            let summary = run_conditional_experiment(&cfg, common.parallelism())?;
            let meta = Metadata::new("table2", &cfg)?;
            let mut out = common.writer()?;
            match common.format {
                Format::Csv => write_summary_csv(&mut out, &meta, &summary.rows)?,
                Format::Json => write_json(&mut out, &meta, &summary)?,
            }
            report_failures(&summary.failures);
            out.flush()?;
            Ok(())
        }
        Command::Drift(common) => {
            let cfg = common.config()?;
            let report = run_drift_report(&cfg.model)?;
            let meta = Metadata::new("drift", &cfg)?;
            let mut out = common.writer()?;
            match common.format {
                Format::Csv => {
                    let checks: Vec<_> = report.iter().flat_map(|s| s.checks.clone()).collect();
                    write_checks_csv(&mut out, &meta, &checks)?
                }
                Format::Json => write_json(&mut out, &meta, Rows { rows: &report })?,
            }
            out.flush()?;
            Ok(())
        }
        Command::Screening(common) => {
            let cfg = common.config()?;
            let report = run_screening_report(&cfg.model)?;
            let meta = Metadata::new("screening", &cfg)?;
            let mut out = common.writer()?;
            match common.format {
                Format::Csv => write_checks_csv(&mut out, &meta, &report.checks)?,
                Format::Json => write_json(&mut out, &meta, &report)?,
            }
            out.flush()?;
            Ok(())
        }
        Command::TrueCentiles { common, week_step } => {
            let cfg = common.config()?;
            let rows = emit_true_centiles(&cfg.model, &cfg.tau_grid, week_step)?;
            let meta = Metadata::new("true-centiles", &cfg)?;
            let mut out = common.writer()?;
            match common.format {
                Format::Csv => write_centiles_csv(&mut out, &meta, &rows)?,
                Format::Json => write_json(&mut out, &meta, Rows { rows: &rows })?,
            }
            out.flush()?;
            Ok(())
        }
    }
}

fn report_failures(failures: &[condcentile::experiment::FailureRecord]) {
    for f in failures {
        eprintln!(
            "excluded: {} replication {}: {}",
            f.method, f.replication, f.error
        );
    }
}

fn simulate(common: &Common, fits: Option<&Path>) -> anyhow::Result<()> {
    let cfg = common.config()?;
    let stream = RngStream::with_path(cfg.master_seed, &[0]);
    let cohort = generate_cohort_with(
        &cfg.model,
        &cfg.schedule,
        cfg.n_subjects,
        &stream,
        common.parallelism(),
    )?;
    let meta = Metadata::new("simulate", &cfg)?;
    let mut out = common.writer()?;
    match common.format {
        Format::Csv => {
            meta.write_csv_header(&mut out)?;
            cohort.write_csv(&mut out)?;
        }
        Format::Json => write_json(
            &mut out,
            &meta,
            Rows {
                rows: &cohort.measurements,
            },
        )?,
    }
    out.flush()?;

    let Some(dir) = fits else { return Ok(()) };
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let spec = cfg.spline_spec()?;
    let points = cohort.observed_points();
    let history = match cfg.qr_history {
        QrHistory::PreviousObserved => cohort.previous_observed_pairs(),
        QrHistory::Adjacent => cohort.lag1_pairs(),
    };
    let pairs: Vec<LagPair> = history.iter().map(LagPair::from).collect();
    for &tau in &cfg.tau_grid {
        let m = fit_marginal_qr(&points, tau, &spec)?;
        std::fs::write(
            dir.join(format!("qr_marginal_tau{:.2}.json", tau.value())),
            m.to_json()?,
        )?;
        let c = fit_conditional_qr(&pairs, tau, &spec)?;
        std::fs::write(
            dir.join(format!("qr_conditional_tau{:.2}.json", tau.value())),
            c.to_json()?,
        )?;
    }
    let lms = fit_lms(&points, &spec)?;
    let z: Vec<ZScorePair> = cohort
        .lag1_pairs()
        .iter()
        .map(|(a, b)| {
            Ok(ZScorePair {
                z_prev: lms.zscore(a.time, a.value)?,
                z_cur: lms.zscore(b.time, b.value)?,
            })
        })
        .collect::<condcentile::Result<_>>()?;
    std::fs::write(dir.join("lms.json"), lms.to_json(Some(fit_ar1_z(&z)?))?)?;
    std::fs::write(dir.join("mvn.json"), fit_mvn(&cohort, &spec)?.to_json()?)?;
    Ok(())
}
