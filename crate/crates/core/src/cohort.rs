//! Simulated longitudinal cohorts: one visit per window, uniform visit times,
//! latent AR(1) log-values, attendance masked afterwards.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::model::LognormalAR1Model;
use crate::numerics::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSchedule {
    pub windows: Vec<(f64, f64)>,
    pub attendance_prob: f64,
}

impl Default for VisitSchedule {
    fn default() -> Self {
        Self {
            windows: vec![
                (16.0, 20.0),
                (20.0, 24.0),
                (24.0, 28.0),
                (28.0, 32.0),
                (32.0, 36.0),
            ],
            attendance_prob: 0.8,
        }
    }
}

impl VisitSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::InvalidParameter("schedule has no windows".into()));
        }
        if self.windows.iter().any(|w| !(w.0 < w.1)) {
            return Err(Error::InvalidParameter("empty visit window".into()));
        }
        if self.windows.windows(2).any(|w| w[0].1 != w[1].0) {
            return Err(Error::InvalidParameter(
                "visit windows must be ordered and contiguous".into(),
            ));
        }
        if !(self.attendance_prob > 0.0 && self.attendance_prob <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "attendance probability must be in (0, 1], got {}",
                self.attendance_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub subject_id: usize,
    pub interval_index: usize,
    pub time: f64,
    pub value: f64,
    pub observed: bool,
    /// Latent standardized score; kept for oracle checks, never used by estimators.
    #[serde(skip)]
    pub latent_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cohort {
    pub model: LognormalAR1Model,
    pub schedule: VisitSchedule,
    pub n_subjects: usize,
    /// Subject-major: slot `s * n_intervals + j`.
    pub measurements: Vec<Measurement>,
}

/// Draw order per subject: all visit times, then all innovations, then all
/// attendance flags, each in interval order.
pub fn generate_cohort(
    model: &LognormalAR1Model,
    schedule: &VisitSchedule,
    n_subjects: usize,
    stream: &RngStream,
) -> Result<Cohort> {
    generate_cohort_with(model, schedule, n_subjects, stream, Parallelism::Sequential)
}

pub fn generate_cohort_with(
    model: &LognormalAR1Model,
    schedule: &VisitSchedule,
    n_subjects: usize,
    stream: &RngStream,
    par: Parallelism,
) -> Result<Cohort> {
    model.validate()?;
    schedule.validate()?;
    if n_subjects == 0 {
        return Err(Error::InvalidParameter(
            "n_subjects must be at least 1".into(),
        ));
    }
    let k = schedule.windows.len();
    let innov = (1.0 - model.rho * model.rho).sqrt();
    let per_subject = map_indexed(n_subjects, par, |s| {
        let mut rng = stream.child(s as u64).sampler();
        let times: Vec<f64> = schedule
            .windows
            .iter()
            .map(|&(lo, hi)| rng.uniform_in(lo, hi))
            .collect();
        let mut z = Vec::with_capacity(k);
        for j in 0..k {
            let e = rng.normal();
            z.push(if j == 0 {
                e
            } else {
                model.rho * z[j - 1] + innov * e
            });
        }
        (0..k)
            .map(|j| {
                let observed = rng.bernoulli(schedule.attendance_prob);
                Measurement {
                    subject_id: s,
                    interval_index: j,
                    time: times[j],
                    value: (model.log_mean_unchecked(times[j]) + model.sigma * z[j]).exp(),
                    observed,
                    latent_z: z[j],
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(Cohort {
        model: *model,
        schedule: schedule.clone(),
        n_subjects,
        measurements: per_subject.into_iter().flatten().collect(),
    })
}

impl Cohort {
    pub fn n_intervals(&self) -> usize {
        self.schedule.windows.len()
    }

    pub fn subject(&self, s: usize) -> &[Measurement] {
        let k = self.n_intervals();
        &self.measurements[s * k..(s + 1) * k]
    }

    pub fn subjects(&self) -> impl Iterator<Item = &[Measurement]> {
        self.measurements.chunks_exact(self.n_intervals())
    }

    pub fn observed(&self) -> impl Iterator<Item = &Measurement> {
        self.measurements.iter().filter(|m| m.observed)
    }

    /// Observed `(time, value)` pairs, the input of marginal estimators.
    pub fn observed_points(&self) -> Vec<(f64, f64)> {
        self.observed().map(|m| (m.time, m.value)).collect()
    }

    /// Pairs of observed measurements on the same subject in adjacent
    /// intervals; pairs spanning a missed visit are excluded.
    pub fn lag1_pairs(&self) -> Vec<(Measurement, Measurement)> {
        self.subjects()
            .flat_map(|subj| {
                subj.windows(2)
                    .filter(|w| w[0].observed && w[1].observed)
                    .map(|w| (w[0], w[1]))
            })
            .collect()
    }

    /// Each observed measurement paired with the same subject's previous
    /// observed measurement, whatever the number of missed visits between.
    pub fn previous_observed_pairs(&self) -> Vec<(Measurement, Measurement)> {
        self.subjects()
            .flat_map(|subj| {
                let obs: Vec<Measurement> = subj.iter().filter(|m| m.observed).copied().collect();
                obs.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
            })
            .collect()
    }

    /// Observed pairs exactly two intervals apart with the middle visit missed.
    pub fn gap_pair_count(&self) -> usize {
        self.subjects()
            .map(|subj| {
                subj.windows(3)
                    .filter(|w| w[0].observed && !w[1].observed && w[2].observed)
                    .count()
            })
            .sum()
    }

    /// CSV with columns subject_id, interval_index, time_weeks, value_mmhg, observed.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "subject_id",
            "interval_index",
            "time_weeks",
            "value_mmhg",
            "observed",
        ])?;
        for m in &self.measurements {
            w.write_record([
                m.subject_id.to_string(),
                m.interval_index.to_string(),
                format!("{:.6}", m.time),
                format!("{:.6}", m.value),
                u8::from(m.observed).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
