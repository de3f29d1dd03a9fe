//! LMS (Box-Cox power, median, coefficient of variation) centiles with
//! spline-smooth L(t), log M(t) and log S(t), fitted by maximum likelihood,
//! plus an AR(1) on lag-1 z-scores for conditional centiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{quantile_unchecked, Probability};
use crate::optim::{bfgs, BfgsOptions};
use crate::spline::{dot, SplineSpec};

/// Bound on the Box-Cox power.
pub const L_BOUND: f64 = 3.0;
/// Below this |L| the log form of the transform is used.
pub const L_LOG_THRESHOLD: f64 = 1e-4;
const RHO_CLAMP: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmsDiagnostics {
    pub n_obs: usize,
    /// Mean log-likelihood per observation, without the −ln y − ln√(2π) terms.
    pub mean_log_likelihood: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmsFit {
    pub spec: SplineSpec,
    pub l_coefs: Vec<f64>,
    /// Coefficients of ln M(t).
    pub m_coefs: Vec<f64>,
    /// Coefficients of ln S(t).
    pub s_coefs: Vec<f64>,
    pub diagnostics: LmsDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScorePair {
    pub z_prev: f64,
    pub z_cur: f64,
}

#[derive(Serialize)]
struct LmsExport<'a> {
    knots: &'a [f64],
    l_coefficients: &'a [f64],
    log_m_coefficients: &'a [f64],
    log_s_coefficients: &'a [f64],
    rho_hat: Option<f64>,
}

impl LmsFit {
    /// Build a fit from known coefficient vectors (for oracle checks).
    pub fn from_coefficients(
        spec: SplineSpec,
        l: Vec<f64>,
        log_m: Vec<f64>,
        log_s: Vec<f64>,
    ) -> Result<Self> {
        if [&l, &log_m, &log_s].iter().any(|c| c.len() != spec.n_basis) {
            return Err(Error::InvalidParameter(
                "coefficient length differs from n_basis".into(),
            ));
        }
        Ok(Self {
            spec,
            l_coefs: l,
            m_coefs: log_m,
            s_coefs: log_s,
            diagnostics: LmsDiagnostics {
                n_obs: 0,
                mean_log_likelihood: f64::NAN,
                iterations: 0,
            },
        })
    }

    /// (L, M, S) at week `t`.
    pub fn lms_at(&self, t: f64) -> Result<(f64, f64, f64)> {
        let b = self.spec.basis_row(t)?;
        Ok((
            dot(&b, &self.l_coefs).clamp(-L_BOUND, L_BOUND),
            dot(&b, &self.m_coefs).exp(),
            dot(&b, &self.s_coefs).exp(),
        ))
    }

    pub fn zscore(&self, t: f64, y: f64) -> Result<f64> {
        lms_zscore(self, t, y)
    }

    /// Measurement at z-score `z` and week `t`.
    pub fn inverse(&self, t: f64, z: f64) -> Result<f64> {
        let (l, m, s) = self.lms_at(t)?;
        box_cox_inverse(l, m, s, z)
    }

    pub fn marginal_centile(&self, t: f64, tau: Probability) -> Result<f64> {
        self.inverse(t, quantile_unchecked(tau.value()))
    }

    pub fn to_json(&self, rho_hat: Option<f64>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LmsExport {
            knots: self.spec.knots(),
            l_coefficients: &self.l_coefs,
            log_m_coefficients: &self.m_coefs,
            log_s_coefficients: &self.s_coefs,
            rho_hat,
        })?)
    }
}

/// Box-Cox z-score `((y/M)^L − 1)/(L·S)`, or `ln(y/M)/S` when |L| is tiny.
pub fn lms_zscore(fit: &LmsFit, t: f64, y: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::NonPositiveMeasurement(y));
    }
    let (l, m, s) = fit.lms_at(t)?;
    Ok(box_cox_z(l, m, s, y))
}

#[inline]
pub fn box_cox_z(l: f64, m: f64, s: f64, y: f64) -> f64 {
    let u = (y / m).ln();
    if l.abs() > L_LOG_THRESHOLD {
        (l * u).exp_m1() / (l * s)
    } else {
        u / s
    }
}

pub fn box_cox_inverse(l: f64, m: f64, s: f64, z: f64) -> Result<f64> {
    if l.abs() > L_LOG_THRESHOLD {
        let arg = 1.0 + l * s * z;
        if arg <= 0.0 {
            return Err(Error::BoxCoxDomain(arg));
        }
        Ok(m * (arg.ln() / l).exp())
    } else {
        Ok(m * (s * z).exp())
    }
}

/// Pearson correlation of lag-1 z-score pairs, clamped to ±0.999.
pub fn fit_ar1_z(pairs: &[ZScorePair]) -> Result<f64> {
    if pairs.len() < 10 {
        return Err(Error::TooFewObservations {
            needed: 10,
            got: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.z_prev).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.z_cur).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for p in pairs {
        let (a, b) = (p.z_prev - mx, p.z_cur - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("z_prev"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("z_cur"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-RHO_CLAMP, RHO_CLAMP))
}

/// Conditional centile at `t_cur` from an AR(1) on z-scores:
/// z_c = ρ̂·z_prev + Φ⁻¹(τ)·√(1 − ρ̂²), mapped back through the LMS curves.
pub fn lms_conditional_centile(
    fit: &LmsFit,
    rho_hat: f64,
    t_prev: f64,
    y_prev: f64,
    t_cur: f64,
    tau: Probability,
) -> Result<f64> {
    crate::model::check_consecutive(t_prev, t_cur)?;
    let z_prev = lms_zscore(fit, t_prev, y_prev)?;
    let zc = rho_hat * z_prev + quantile_unchecked(tau.value()) * (1.0 - rho_hat * rho_hat).sqrt();
    fit.inverse(t_cur, zc)
}

/// Maximum-likelihood LMS fit with unpenalized spline curves.
///
/// Start: L ≡ 0, ln M from least squares of ln y on the basis, S the SD of
/// the log residuals. Parameters are rescaled by their approximate Fisher
/// information before BFGS so the three curves are comparably conditioned.
pub fn fit_lms(data: &[(f64, f64)], spec: &SplineSpec) -> Result<LmsFit> {
    let nb = spec.n_basis;
    if data.len() < 3 * nb {
        return Err(Error::TooFewObservations {
            needed: 3 * nb,
            got: data.len(),
        });
    }
    if let Some(&(_, y)) = data.iter().find(|d| !(d.1 > 0.0)) {
        return Err(Error::NonPositiveMeasurement(y));
    }
    let times: Vec<f64> = data.iter().map(|d| d.0).collect();
    let basis = spec.design_matrix(&times)?;
    let log_y: Vec<f64> = data.iter().map(|d| d.1.ln()).collect();
    let n = data.len();

    let m0 = least_squares(&basis.data, n, nb, &log_y)?;
    let ss: f64 = (0..n)
        .map(|i| (log_y[i] - dot(basis.row(i), &m0)).powi(2))
        .sum();
    let s0 = (ss / (n - nb) as f64).sqrt();
    if !(s0 > 0.0) {
        return Err(Error::ZeroVariance("log measurements"));
    }

    // θ = coefficient / scale, ordered [L | ln M | ln S]
    let l_scale = 1.0 / (s0 * 1.75f64.sqrt());
    let mut scale = vec![l_scale; nb];
    scale.extend(std::iter::repeat_n(s0, nb));
    scale.extend(std::iter::repeat_n(std::f64::consts::FRAC_1_SQRT_2, nb));
    let mut start = vec![0.0; nb];
    start.extend(m0.iter().map(|v| v / s0));
    start.extend(std::iter::repeat_n(s0.ln() * std::f64::consts::SQRT_2, nb));

    let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
        let coef: Vec<f64> = theta.iter().zip(&scale).map(|(t, s)| t * s).collect();
        let (lc, rest) = coef.split_at(nb);
        let (mc, sc) = rest.split_at(nb);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for i in 0..n {
            let b = basis.row(i);
            let l_raw = dot(b, lc);
            let l = l_raw.clamp(-L_BOUND, L_BOUND);
            let eta_s = dot(b, sc);
            let s = eta_s.exp();
            let u = log_y[i] - dot(b, mc);
            let a = l * u;
            let (z, dz_dl) = if a.abs() < 1e-2 {
                let e1 = 1.0 + a * (0.5 + a * (1.0 / 6.0 + a * (1.0 / 24.0 + a / 120.0)));
                let d = 0.5 + a * (1.0 / 3.0 + a * (0.125 + a * (1.0 / 30.0 + a / 144.0)));
                (u * e1 / s, u * u * d / s)
            } else {
                let em1 = a.exp_m1();
                (em1 / (l * s), (a * (em1 + 1.0) - em1) / (l * l * s))
            };
            total += a - eta_s - 0.5 * z * z;
            let d_l = if l_raw.abs() < L_BOUND {
                u - z * dz_dl
            } else {
                0.0
            };
            let d_m = -(l - z * a.exp() / s);
            let d_s = z * z - 1.0;
            for k in 0..nb {
                grad[k] -= d_l * b[k];
                grad[nb + k] -= d_m * b[k];
                grad[2 * nb + k] -= d_s * b[k];
            }
        }
        let inv_n = 1.0 / n as f64;
        for (g, s) in grad.iter_mut().zip(&scale) {
            *g *= inv_n * s;
        }
        -total * inv_n
    };

    let opts = BfgsOptions {
        max_iter: 1000,
        f_rel_tol: 1e-9,
        grad_tol: 1e-9,
    };
    let min = bfgs(objective, &start, &opts)?;
    let coef: Vec<f64> = min.x.iter().zip(&scale).map(|(t, s)| t * s).collect();
    Ok(LmsFit {
        spec: spec.clone(),
        l_coefs: coef[..nb].to_vec(),
        m_coefs: coef[nb..2 * nb].to_vec(),
        s_coefs: coef[2 * nb..].to_vec(),
        diagnostics: LmsDiagnostics {
            n_obs: n,
            mean_log_likelihood: -min.f,
            iterations: min.iterations,
        },
    })
}

pub(crate) fn least_squares(x: &[f64], n: usize, p: usize, y: &[f64]) -> Result<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for i in 0..n {
        let xi = &x[i * p..(i + 1) * p];
        for a in 0..p {
            xty[a] += xi[a] * y[i];
            for b in 0..p {
                xtx[(a, b)] += xi[a] * xi[b];
            }
        }
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("least-squares design is singular".into()))?;
    Ok(chol.solve(&xty).as_slice().to_vec())
}
