//! Gaussian maximum likelihood on log-measurements: spline mean, constant
//! variance, AR(1) correlation indexed by visit interval.
//!
//! For fixed ρ the mean coefficients and σ² have closed forms (GLS), so the
//! likelihood is profiled down to ρ alone. A subject's observed intervals
//! form a Markov chain with lag ρ^gap, which lets every quadratic form and
//! determinant be computed from sequential innovations.

use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::lms::least_squares;
use crate::model::check_consecutive;
use crate::numerics::{quantile_unchecked, Probability};
use crate::optim::grid_golden_max;
use crate::spline::{dot, SplineSpec};

const RHO_LIMIT: f64 = 0.995;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvnFit {
    pub spec: SplineSpec,
    /// Coefficients of the log-scale mean curve.
    pub mean_coefs: Vec<f64>,
    pub sigma_hat: f64,
    pub rho_hat: f64,
    pub log_likelihood: f64,
    pub n_obs: usize,
}

#[derive(Serialize)]
struct MvnExport<'a> {
    knots: &'a [f64],
    mean_coefficients: &'a [f64],
    sigma_hat: f64,
    rho_hat: f64,
}

/// One subject's observed visits: interval index, basis row, log value.
struct Track {
    interval: Vec<usize>,
    basis: Vec<f64>,
    log_y: Vec<f64>,
}

fn tracks(cohort: &Cohort, spec: &SplineSpec) -> Result<Vec<Track>> {
    let nb = spec.n_basis;
    let mut out = Vec::with_capacity(cohort.n_subjects);
    for subj in cohort.subjects() {
        let obs: Vec<_> = subj.iter().filter(|m| m.observed).collect();
        if obs.is_empty() {
            continue;
        }
        let mut basis = vec![0.0; obs.len() * nb];
        for (k, m) in obs.iter().enumerate() {
            if !(m.value > 0.0) {
                return Err(Error::NonPositiveMeasurement(m.value));
            }
            let row = spec.basis_row(m.time)?;
            basis[k * nb..(k + 1) * nb].copy_from_slice(&row);
        }
        out.push(Track {
            interval: obs.iter().map(|m| m.interval_index).collect(),
            basis,
            log_y: obs.iter().map(|m| m.value.ln()).collect(),
        });
    }
    Ok(out)
}

/// Whitening weights for observation k of a track: (lag coefficient on the
/// previous observation, innovation SD in units of σ).
#[inline]
fn innovation(track: &Track, k: usize, rho: f64) -> (f64, f64) {
    if k == 0 {
        (0.0, 1.0)
    } else {
        let gap = (track.interval[k] - track.interval[k - 1]) as i32;
        let a = rho.powi(gap);
        (a, (1.0 - a * a).sqrt())
    }
}

struct Profile {
    beta: Vec<f64>,
    sigma2: f64,
    log_lik: f64,
}

fn profile(tracks: &[Track], nb: usize, n_obs: usize, rho: f64) -> Result<Profile> {
    let mut wx = vec![0.0; n_obs * nb];
    let mut wy = vec![0.0; n_obs];
    let mut log_det = 0.0;
    let mut row = 0;
    for tr in tracks {
        for k in 0..tr.log_y.len() {
            let (a, sd) = innovation(tr, k, rho);
            log_det += 2.0 * sd.ln();
            let dst = &mut wx[row * nb..(row + 1) * nb];
            for j in 0..nb {
                let prev = if k > 0 {
                    tr.basis[(k - 1) * nb + j]
                } else {
                    0.0
                };
                dst[j] = (tr.basis[k * nb + j] - a * prev) / sd;
            }
            let prev_y = if k > 0 { tr.log_y[k - 1] } else { 0.0 };
            wy[row] = (tr.log_y[k] - a * prev_y) / sd;
            row += 1;
        }
    }
    let beta = least_squares(&wx, n_obs, nb, &wy)?;
    let q: f64 = (0..n_obs)
        .map(|i| (wy[i] - dot(&wx[i * nb..(i + 1) * nb], &beta)).powi(2))
        .sum();
    let n = n_obs as f64;
    let sigma2 = q / n;
    let log_lik = -0.5 * n * (LN_2PI + sigma2.ln() + 1.0) - 0.5 * log_det;
    Ok(Profile {
        beta,
        sigma2,
        log_lik,
    })
}

/// Joint Gaussian log-likelihood of all observed log-values (log-scale
/// density, without the −Σ ln y Jacobian).
pub fn mvn_log_likelihood(
    cohort: &Cohort,
    spec: &SplineSpec,
    mean_coefs: &[f64],
    sigma: f64,
    rho: f64,
) -> Result<f64> {
    if !(sigma > 0.0) || !(rho.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma = {sigma}, rho = {rho}"
        )));
    }
    let nb = spec.n_basis;
    let mut ll = 0.0;
    for tr in tracks(cohort, spec)? {
        for k in 0..tr.log_y.len() {
            let (a, sd) = innovation(&tr, k, rho);
            let mean = dot(&tr.basis[k * nb..(k + 1) * nb], mean_coefs);
            let e = tr.log_y[k] - mean;
            let e_prev = if k > 0 {
                tr.log_y[k - 1] - dot(&tr.basis[(k - 1) * nb..k * nb], mean_coefs)
            } else {
                0.0
            };
            let s = sigma * sd;
            let innov = e - a * e_prev;
            ll += -0.5 * LN_2PI - s.ln() - 0.5 * (innov / s).powi(2);
        }
    }
    Ok(ll)
}

/// Maximize the profile likelihood over ρ; β and σ follow in closed form.
pub fn fit_mvn(cohort: &Cohort, spec: &SplineSpec) -> Result<MvnFit> {
    let nb = spec.n_basis;
    let tracks = tracks(cohort, spec)?;
    let n_obs: usize = tracks.iter().map(|t| t.log_y.len()).sum();
    if n_obs <= nb {
        return Err(Error::TooFewObservations {
            needed: nb + 1,
            got: n_obs,
        });
    }
    let mut failure = None;
    let (rho, _) = grid_golden_max(
        |r| match profile(&tracks, nb, n_obs, r) {
            Ok(p) => p.log_lik,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NEG_INFINITY
            }
        },
        -RHO_LIMIT,
        RHO_LIMIT,
        40,
        1e-9,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let best = profile(&tracks, nb, n_obs, rho)?;
    if !best.log_lik.is_finite() || !(best.sigma2 > 0.0) {
        return Err(Error::NonConvergence {
            iterations: 0,
            detail: format!(
                "degenerate profile at rho = {rho}: sigma2 = {}",
                best.sigma2
            ),
        });
    }
    Ok(MvnFit {
        spec: spec.clone(),
        mean_coefs: best.beta,
        sigma_hat: best.sigma2.sqrt(),
        rho_hat: rho,
        log_likelihood: best.log_lik,
        n_obs,
    })
}

impl MvnFit {
    pub fn log_mean(&self, t: f64) -> Result<f64> {
        self.spec.eval(&self.mean_coefs, t)
    }

    pub fn marginal_centile(&self, t: f64, tau: Probability) -> Result<f64> {
        Ok((self.log_mean(t)? + quantile_unchecked(tau.value()) * self.sigma_hat).exp())
    }

    pub fn conditional_centile(
        &self,
        t_prev: f64,
        y_prev: f64,
        t_cur: f64,
        tau: Probability,
    ) -> Result<f64> {
        mvn_conditional_centile(self, t_prev, y_prev, t_cur, tau)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MvnExport {
            knots: self.spec.knots(),
            mean_coefficients: &self.mean_coefs,
            sigma_hat: self.sigma_hat,
            rho_hat: self.rho_hat,
        })?)
    }
}

pub fn mvn_marginal_centile(fit: &MvnFit, t: f64, tau: Probability) -> Result<f64> {
    fit.marginal_centile(t, tau)
}

/// exp(μ̂(t_cur) + ρ̂(ln y_prev − μ̂(t_prev)) + Φ⁻¹(τ)·σ̂·√(1 − ρ̂²)).
pub fn mvn_conditional_centile(
    fit: &MvnFit,
    t_prev: f64,
    y_prev: f64,
    t_cur: f64,
    tau: Probability,
) -> Result<f64> {
    check_consecutive(t_prev, t_cur)?;
    if !(y_prev > 0.0) {
        return Err(Error::NonPositiveMeasurement(y_prev));
    }
    let mu_prev = fit.log_mean(t_prev)?;
    let mu_cur = fit.log_mean(t_cur)?;
    let r = fit.rho_hat;
    Ok((mu_cur
        + r * (y_prev.ln() - mu_prev)
        + quantile_unchecked(tau.value()) * fit.sigma_hat * (1.0 - r * r).sqrt())
    .exp())
}
