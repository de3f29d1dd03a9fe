//! Conditional centile charts as a screen: closed-form sensitivity at a
//! given specificity, the mean shift needed for a target accuracy, and a
//! Monte Carlo evaluator for single and repeated screens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::model::LognormalAR1Model;
use crate::numerics::{cdf_unchecked, quantile_unchecked, Probability, RngStream};

/// Weeks at which the Monte Carlo screen places visits (window midpoints).
pub const SCREEN_VISIT_WEEKS: [f64; 5] = [18.0, 22.0, 26.0, 30.0, 34.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftMode {
    /// Diseased and normal groups agree before the screen week and differ in
    /// mean from it onward.
    OnsetAtScreen,
    /// Diseased means exceed normal means by the same fraction at all ages.
    ConstantShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningConfig {
    /// Fractional difference between diseased and normal means.
    pub d: f64,
    pub sigma: f64,
    pub rho: f64,
    pub specificity: Probability,
    pub mode: ShiftMode,
}

impl ScreeningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d >= 0.0 && self.d.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "d must be >= 0, got {}",
                self.d
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "|rho| must be < 1, got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub sensitivity: f64,
    pub specificity: f64,
    pub n_diseased: usize,
    pub n_normal: usize,
    /// Larger of the two 95% binomial half-widths.
    pub ci_halfwidth: f64,
}

/// Log-scale SD of the screening statistic's shift per unit ln(1 + d).
fn shift_scale(sigma: f64, rho: f64, mode: ShiftMode) -> f64 {
    match mode {
        ShiftMode::OnsetAtScreen => sigma * (1.0 - rho * rho).sqrt(),
        ShiftMode::ConstantShift => sigma * ((1.0 + rho) / (1.0 - rho)).sqrt(),
    }
}

/// Φ(ln(1 + d)/k − Φ⁻¹(x)) with k = σ√(1 − ρ²) for onset at the screen and
/// k = σ√((1 + ρ)/(1 − ρ)) for a constant shift.
pub fn sensitivity_closed_form(cfg: &ScreeningConfig) -> Result<f64> {
    cfg.validate()?;
    let k = shift_scale(cfg.sigma, cfg.rho, cfg.mode);
    Ok(cdf_unchecked(
        (1.0 + cfg.d).ln() / k - quantile_unchecked(cfg.specificity.value()),
    ))
}

/// Smallest fractional mean difference giving the target accuracy.
pub fn required_difference(
    target_sens: Probability,
    target_spec: Probability,
    sigma: f64,
    rho: f64,
    mode: ShiftMode,
) -> Result<f64> {
    if !(sigma > 0.0) || !(rho.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma = {sigma}, rho = {rho}"
        )));
    }
    let k = shift_scale(sigma, rho, mode);
    Ok(
        (k * (quantile_unchecked(target_sens.value()) + quantile_unchecked(target_spec.value())))
            .exp_m1(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub abs_diff_mmhg: f64,
    pub sd_units: f64,
}

/// Fractional shift `d` at week `t` as an absolute difference of lognormal
/// means and in units of the lognormal SD.
pub fn absolute_shift_report(model: &LognormalAR1Model, t: f64, d: f64) -> Result<ShiftReport> {
    let mu = model.log_mean(t)?;
    let s2 = model.sigma * model.sigma;
    let mean = (mu + 0.5 * s2).exp();
    let sd = mean * s2.exp_m1().sqrt();
    Ok(ShiftReport {
        abs_diff_mmhg: d * mean,
        sd_units: d * mean / sd,
    })
}

/// Simulates normal and diseased arms at [`SCREEN_VISIT_WEEKS`] and flags a
/// subject when any screened reading's true conditional rank (given the
/// previous visit) exceeds `x`.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_screen(
    model: &LognormalAR1Model,
    d: f64,
    mode: ShiftMode,
    screen_weeks: &[f64],
    x: Probability,
    n_per_arm: usize,
    stream: &RngStream,
) -> Result<ScreeningResult> {
    monte_carlo_screen_with(
        model,
        d,
        mode,
        screen_weeks,
        x,
        n_per_arm,
        stream,
        Parallelism::Auto,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_screen_with(
    model: &LognormalAR1Model,
    d: f64,
    mode: ShiftMode,
    screen_weeks: &[f64],
    x: Probability,
    n_per_arm: usize,
    stream: &RngStream,
    par: Parallelism,
) -> Result<ScreeningResult> {
    model.validate()?;
    if !(d >= 0.0 && d.is_finite()) {
        return Err(Error::InvalidParameter(format!("d must be >= 0, got {d}")));
    }
    if n_per_arm < 1000 {
        return Err(Error::InvalidParameter(format!(
            "n_per_arm must be at least 1000, got {n_per_arm}"
        )));
    }
    if screen_weeks.is_empty() {
        return Err(Error::InvalidParameter("no screen weeks".into()));
    }
    let mut screened = [false; 5];
    for &w in screen_weeks {
        let idx = SCREEN_VISIT_WEEKS
            .iter()
            .position(|&v| (v - w).abs() < 1e-9)
            .filter(|&i| i >= 1)
            .ok_or_else(|| {
                Error::InvalidParameter(format!("screen week {w} is not one of 22, 26, 30, 34"))
            })?;
        screened[idx] = true;
    }
    let first = screened.iter().position(|&s| s).expect("non-empty");
    let log_shift = (1.0 + d).ln();
    let shift: Vec<f64> = (0..5)
        .map(|j| match mode {
            ShiftMode::ConstantShift => log_shift,
            ShiftMode::OnsetAtScreen if j >= first => log_shift,
            ShiftMode::OnsetAtScreen => 0.0,
        })
        .collect();
    let mu: Vec<f64> = SCREEN_VISIT_WEEKS
        .iter()
        .map(|&w| model.log_mean_unchecked(w))
        .collect();
    let threshold = quantile_unchecked(x.value());
    let rho = model.rho;
    let innov = (1.0 - rho * rho).sqrt();

    let screen_positive = |arm: u64, i: usize| -> bool {
        let mut rng = stream.child(arm).child(i as u64).sampler();
        let mut z_prev = 0.0;
        let mut score_prev = 0.0;
        let mut positive = false;
        for j in 0..5 {
            let e = rng.normal();
            let z = if j == 0 { e } else { rho * z_prev + innov * e };
            let extra = if arm == 1 { shift[j] } else { 0.0 };
            let log_y = mu[j] + model.sigma * z + extra;
            // standardized under the true normal-arm model
            let score = (log_y - mu[j]) / model.sigma;
            if screened[j] && (score - rho * score_prev) / innov > threshold {
                positive = true;
            }
            z_prev = z;
            score_prev = score;
        }
        positive
    };

    let normal = map_indexed(n_per_arm, par, |i| screen_positive(0, i));
    let diseased = map_indexed(n_per_arm, par, |i| screen_positive(1, i));
    let n = n_per_arm as f64;
    let sensitivity = diseased.iter().filter(|&&p| p).count() as f64 / n;
    let specificity = normal.iter().filter(|&&p| !p).count() as f64 / n;
    let hw = |p: f64| 1.96 * (p * (1.0 - p) / n).sqrt();
    Ok(ScreeningResult {
        sensitivity,
        specificity,
        n_diseased: n_per_arm,
        n_normal: n_per_arm,
        ci_halfwidth: hw(sensitivity).max(hw(specificity)),
    })
}

/// Report structure for the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub mode: ShiftMode,
    pub d: f64,
    pub sigma: f64,
    pub rho: f64,
    pub specificity: f64,
    pub sensitivity: f64,
    pub abs_diff_mmhg: f64,
    pub sd_units: f64,
}

/// Required shift for a target sensitivity = specificity at week `t`,
/// with the absolute and SD-unit translations.
pub fn screening_report(
    model: &LognormalAR1Model,
    t: f64,
    target: Probability,
    mode: ShiftMode,
) -> Result<ScreeningReport> {
    let d = required_difference(target, target, model.sigma, model.rho, mode)?;
    let cfg = ScreeningConfig {
        d,
        sigma: model.sigma,
        rho: model.rho,
        specificity: target,
        mode,
    };
    let shift = absolute_shift_report(model, t, d)?;
    Ok(ScreeningReport {
        mode,
        d,
        sigma: model.sigma,
        rho: model.rho,
        specificity: target.value(),
        sensitivity: sensitivity_closed_form(&cfg)?,
        abs_diff_mmhg: shift.abs_diff_mmhg,
        sd_units: shift.sd_units,
    })
}
