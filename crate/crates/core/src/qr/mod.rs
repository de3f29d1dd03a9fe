//! Marginal and conditional quantile regression with a B-spline intercept.
//!
//! The conditional model for the reading at visit j given visit j − 1 is
//!
//! ```text
//! Q_τ(y_j) = B(t_j)·c + (β0 + β1·(t_j − t_{j−1}))·y_{j−1}
//! ```

mod simplex;

use serde::{Deserialize, Serialize};

use crate::cohort::Measurement;
use crate::error::{Error, Result};
use crate::numerics::Probability;
use crate::spline::{dot, SplineSpec};

use simplex::{Design, Solution};

/// Simplex iterations allowed per observation.
const ITERATIONS_PER_OBS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagPair {
    pub t_prev: f64,
    pub y_prev: f64,
    pub t_cur: f64,
    pub y_cur: f64,
}

impl From<&(Measurement, Measurement)> for LagPair {
    fn from((a, b): &(Measurement, Measurement)) -> Self {
        LagPair {
            t_prev: a.time,
            y_prev: a.value,
            t_cur: b.time,
            y_cur: b.value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QrDiagnostics {
    pub n_obs: usize,
    pub n_negative: usize,
    pub n_positive: usize,
    pub n_zero: usize,
    pub objective: f64,
    pub iterations: usize,
    /// History columns dropped because they were collinear with the spline.
    pub aliased: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub tau: Probability,
    pub spec: SplineSpec,
    pub spline_coefs: Vec<f64>,
    pub beta0: f64,
    pub beta1: f64,
    pub conditional: bool,
    pub diagnostics: QrDiagnostics,
}

#[derive(Serialize)]
struct QuantileFitExport<'a> {
    tau: f64,
    conditional: bool,
    knots: &'a [f64],
    coefficients: &'a [f64],
    beta0: f64,
    beta1: f64,
}

impl QuantileFit {
    /// `B(t)·c + (β0 + β1·dt)·y_prev`; the history term only for conditional fits.
    pub fn predict_centile(&self, t: f64, y_prev: Option<f64>, dt: Option<f64>) -> Result<f64> {
        let base = self.spec.eval(&self.spline_coefs, t)?;
        if !self.conditional {
            return Ok(base);
        }
        let y_prev = y_prev.ok_or(Error::MissingConditioning("y_prev"))?;
        let dt = dt.ok_or(Error::MissingConditioning("dt"))?;
        Ok(base + (self.beta0 + self.beta1 * dt) * y_prev)
    }

    /// Subgradient condition at an optimum when the intercept lies in the
    /// column span: at most τn negative and (1 − τ)n positive residuals.
    pub fn satisfies_subgradient_bounds(&self) -> bool {
        let n = self.diagnostics.n_obs as f64;
        let tau = self.tau.value();
        self.diagnostics.n_negative as f64 <= tau * n + 1e-9
            && self.diagnostics.n_positive as f64 <= (1.0 - tau) * n + 1e-9
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&QuantileFitExport {
            tau: self.tau.value(),
            conditional: self.conditional,
            knots: self.spec.knots(),
            coefficients: &self.spline_coefs,
            beta0: self.beta0,
            beta1: self.beta1,
        })?)
    }
}

/// Fit `Q_τ(y | t) = B(t)·c` to cross-sectional `(t, y)` data.
pub fn fit_marginal_qr(
    data: &[(f64, f64)],
    tau: Probability,
    spec: &SplineSpec,
) -> Result<QuantileFit> {
    let p = spec.n_basis;
    if data.len() < p + 1 {
        return Err(Error::TooFewObservations {
            needed: p + 1,
            got: data.len(),
        });
    }
    let times: Vec<f64> = data.iter().map(|d| d.0).collect();
    let y: Vec<f64> = data.iter().map(|d| d.1).collect();
    let basis = spec.design_matrix(&times)?;
    let keep = independent_columns(&basis.data, data.len(), p);
    if keep.len() < p {
        return Err(Error::RankDeficient(format!(
            "spline basis has rank {} < {p} on the observed times",
            keep.len()
        )));
    }
    let sol = run_solver(&basis.data, data.len(), p, &y, tau)?;
    Ok(QuantileFit {
        tau,
        spec: spec.clone(),
        diagnostics: diagnostics(&basis.data, p, &y, &sol, 0),
        spline_coefs: sol.coef,
        beta0: 0.0,
        beta1: 0.0,
        conditional: false,
    })
}

/// Fit the conditional model to adjacent-visit pairs.
pub fn fit_conditional_qr(
    pairs: &[LagPair],
    tau: Probability,
    spec: &SplineSpec,
) -> Result<QuantileFit> {
    let nb = spec.n_basis;
    let p = nb + 2;
    let n = pairs.len();
    if n < nb + 3 {
        return Err(Error::TooFewObservations {
            needed: nb + 3,
            got: n,
        });
    }
    let mut x = vec![0.0; n * p];
    for (i, pair) in pairs.iter().enumerate() {
        if !(pair.t_cur >= spec.boundary.0 && pair.t_cur <= spec.boundary.1) {
            return Err(Error::OutOfWindow {
                t: pair.t_cur,
                lo: spec.boundary.0,
                hi: spec.boundary.1,
            });
        }
        let row = &mut x[i * p..(i + 1) * p];
        spec.fill_row(pair.t_cur, &mut row[..nb]);
        row[nb] = pair.y_prev;
        row[nb + 1] = (pair.t_cur - pair.t_prev) * pair.y_prev;
    }
    let y: Vec<f64> = pairs.iter().map(|p| p.y_cur).collect();

    let keep = independent_columns(&x, n, p);
    if keep.iter().filter(|&&c| c < nb).count() < nb {
        return Err(Error::RankDeficient(
            "spline basis is rank deficient on the observed times".into(),
        ));
    }
    let aliased = p - keep.len();
    let sol = if aliased == 0 {
        run_solver(&x, n, p, &y, tau)?
    } else {
        let q = keep.len();
        let reduced: Vec<f64> = (0..n)
            .flat_map(|i| keep.iter().map(move |&c| (i, c)))
            .map(|(i, c)| x[i * p + c])
            .collect();
        let mut sol = run_solver(&reduced, n, q, &y, tau)?;
        let mut full = vec![0.0; p];
        for (v, &c) in sol.coef.iter().zip(&keep) {
            full[c] = *v;
        }
        sol.coef = full;
        sol
    };
    Ok(QuantileFit {
        tau,
        spec: spec.clone(),
        diagnostics: diagnostics(&x, p, &y, &sol, aliased),
        spline_coefs: sol.coef[..nb].to_vec(),
        beta0: sol.coef[nb],
        beta1: sol.coef[nb + 1],
        conditional: true,
    })
}

fn run_solver(x: &[f64], n: usize, p: usize, y: &[f64], tau: Probability) -> Result<Solution> {
    simplex::solve(
        &Design { x, n, p },
        y,
        tau.value(),
        ITERATIONS_PER_OBS * n + 100,
    )
}

/// Indices of columns not in the span of the columns before them.
fn independent_columns(x: &[f64], n: usize, p: usize) -> Vec<usize> {
    let mut kept: Vec<Vec<f64>> = Vec::new();
    let mut idx = Vec::new();
    for c in 0..p {
        let mut v: Vec<f64> = (0..n).map(|i| x[i * p + c]).collect();
        let norm0 = dot(&v, &v).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for q in &kept {
                let d = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-9 * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            kept.push(v);
            idx.push(c);
        }
    }
    idx
}

fn diagnostics(x: &[f64], p: usize, y: &[f64], sol: &Solution, aliased: usize) -> QrDiagnostics {
    let scale = 1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale;
    let (mut neg, mut pos, mut zero) = (0, 0, 0);
    for (i, yi) in y.iter().enumerate() {
        let r = yi - dot(&x[i * p..(i + 1) * p], &sol.coef);
        if r < -tol {
            neg += 1;
        } else if r > tol {
            pos += 1;
        } else {
            zero += 1;
        }
    }
    QrDiagnostics {
        n_obs: y.len(),
        n_negative: neg,
        n_positive: pos,
        n_zero: zero,
        objective: sol.objective,
        iterations: sol.iterations,
        aliased,
    }
}

/// Number of (grid point, adjacent τ pair) combinations where a higher-τ
/// curve lies below a lower-τ one, over weeks 16–36 in steps of 0.5.
pub fn count_crossings(fits: &[QuantileFit]) -> Result<usize> {
    let mut sorted: Vec<&QuantileFit> = fits.iter().collect();
    sorted.sort_by(|a, b| a.tau.value().total_cmp(&b.tau.value()));
    let mut count = 0;
    for k in 0..=40 {
        let t = 16.0 + 0.5 * k as f64;
        let vals: Vec<f64> = sorted
            .iter()
            .map(|f| f.spec.eval(&f.spline_coefs, t))
            .collect::<Result<_>>()?;
        count += vals.windows(2).filter(|w| w[1] < w[0]).count();
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, VisitSchedule};
    use crate::model::LognormalAR1Model;
    use crate::numerics::RngStream;

    fn p(x: f64) -> Probability {
        Probability::new(x).unwrap()
    }

    fn intercept_only() -> SplineSpec {
        SplineSpec::uniform(0, (16.0, 36.0), 1).unwrap()
    }

    #[test]
    fn intercept_median() {
        let data: Vec<(f64, f64)> = [1.0, 2.0, 3.0, 4.0, 5.0]
            .iter()
            .map(|&y| (20.0, y))
            .collect();
        let fit = fit_marginal_qr(&data, p(0.5), &intercept_only()).unwrap();
        assert!((fit.predict_centile(20.0, None, None).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn intercept_lower_quartile() {
        let mut rng = RngStream::new(5).sampler();
        for n in [11usize, 25, 101] {
            let ys: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let data: Vec<(f64, f64)> = ys.iter().map(|&y| (30.0, y)).collect();
            let tau = 0.25;
            let fit = fit_marginal_qr(&data, p(tau), &intercept_only()).unwrap();
            let q = fit.spline_coefs[0];
            let below = ys.iter().filter(|&&y| y < q).count() as f64;
            let above = ys.iter().filter(|&&y| y > q).count() as f64;
            assert!(below <= (tau * n as f64).ceil());
            assert!(above <= ((1.0 - tau) * n as f64).ceil());
            assert!(ys.contains(&q), "vertex solution is a sample point");
        }
    }

    fn default_cohort(n: usize, seed: u64, model: LognormalAR1Model) -> crate::cohort::Cohort {
        generate_cohort(
            &model,
            &VisitSchedule::default(),
            n,
            &RngStream::with_path(seed, &[0]),
        )
        .unwrap()
    }

    #[test]
    fn marginal_median_recovers_truth() {
        let model = LognormalAR1Model::default();
        let c = default_cohort(5000, 21, model);
        let data: Vec<(f64, f64)> = c.observed_points().into_iter().take(4000).collect();
        let fit = fit_marginal_qr(&data, p(0.5), &SplineSpec::default()).unwrap();
        assert!(fit.satisfies_subgradient_bounds());
        for k in 0..=12 {
            let t = 20.0 + k as f64;
            let est = fit.predict_centile(t, None, None).unwrap();
            let truth = model.marginal_percentile(t, p(0.5)).unwrap();
            assert!((est - truth).abs() < 0.6, "t={t}: {est} vs {truth}");
        }
    }

    #[test]
    fn objective_not_above_truth_coefficients() {
        let model = LognormalAR1Model::default();
        let c = default_cohort(1000, 22, model);
        let data = c.observed_points();
        let spec = SplineSpec::default();
        for tau in [0.03, 0.5, 0.97] {
            let fit = fit_marginal_qr(&data, p(tau), &spec).unwrap();
            // truth-derived coefficients: spline interpolating the true quantile
            // curve at five well-spread ages
            let nodes = [16.0, 20.0, 26.0, 32.0, 36.0];
            let b = spec.design_matrix(&nodes).unwrap();
            let bm = nalgebra::DMatrix::from_row_slice(5, 5, &b.data);
            let rhs = nalgebra::DVector::from_iterator(
                5,
                nodes
                    .iter()
                    .map(|&t| model.marginal_percentile(t, p(tau)).unwrap()),
            );
            let truth_coef = bm.lu().solve(&rhs).unwrap();
            let obj_truth: f64 = data
                .iter()
                .map(|&(t, y)| {
                    crate::numerics::pinball_loss(
                        y - spec.eval(truth_coef.as_slice(), t).unwrap(),
                        p(tau),
                    )
                })
                .sum();
            assert!(fit.diagnostics.objective <= obj_truth + 1e-9);
            assert!(
                fit.satisfies_subgradient_bounds(),
                "τ={tau}: {:?}",
                fit.diagnostics
            );
        }
    }

    #[test]
    fn degenerate_history_reduces_to_marginal() {
        let mut rng = RngStream::new(8).sampler();
        let pairs: Vec<LagPair> = (0..400)
            .map(|_| {
                let t_cur = rng.uniform_in(20.0, 36.0);
                LagPair {
                    t_prev: t_cur - 4.0,
                    y_prev: 70.0,
                    t_cur,
                    y_cur: 60.0 + 5.0 * rng.normal(),
                }
            })
            .collect();
        let spec = SplineSpec::default();
        let cond = fit_conditional_qr(&pairs, p(0.3), &spec).unwrap();
        let marg_data: Vec<(f64, f64)> = pairs.iter().map(|q| (q.t_cur, q.y_cur)).collect();
        let marg = fit_marginal_qr(&marg_data, p(0.3), &spec).unwrap();
        assert_eq!(cond.diagnostics.aliased, 2);
        assert!((cond.diagnostics.objective - marg.diagnostics.objective).abs() < 1e-8);
        for q in &pairs {
            let a = cond
                .predict_centile(q.t_cur, Some(q.y_prev), Some(4.0))
                .unwrap();
            let b = marg.predict_centile(q.t_cur, None, None).unwrap();
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn independent_history_has_no_slope() {
        let model = LognormalAR1Model::default().with_rho(0.0);
        let sched = VisitSchedule {
            attendance_prob: 1.0,
            ..Default::default()
        };
        let c = generate_cohort(&model, &sched, 25_000, &RngStream::with_path(31, &[0])).unwrap();
        let pairs: Vec<LagPair> = c.lag1_pairs().iter().map(LagPair::from).collect();
        assert_eq!(pairs.len(), 100_000);
        let fit = fit_conditional_qr(&pairs, p(0.5), &SplineSpec::default()).unwrap();
        assert!(fit.beta0.abs() < 0.02, "beta0 = {}", fit.beta0);
        for t in [22.0, 26.0, 30.0] {
            let y_prev = model.marginal_percentile(t - 4.0, p(0.5)).unwrap();
            let est = fit.predict_centile(t, Some(y_prev), Some(4.0)).unwrap();
            let truth = model.marginal_percentile(t, p(0.5)).unwrap();
            assert!((est - truth).abs() < 0.5, "t={t}: {est} vs {truth}");
        }
    }

    #[test]
    fn prediction_forms() {
        let spec = SplineSpec::default();
        let fit = QuantileFit {
            tau: p(0.5),
            spec: spec.clone(),
            spline_coefs: vec![10.0, 11.0, 12.0, 13.0, 14.0],
            beta0: 0.4,
            beta1: 0.0,
            conditional: true,
            diagnostics: QrDiagnostics {
                n_obs: 0,
                n_negative: 0,
                n_positive: 0,
                n_zero: 0,
                objective: 0.0,
                iterations: 0,
                aliased: 0,
            },
        };
        let a = fit.predict_centile(26.0, Some(60.0), Some(3.0)).unwrap();
        let b = fit.predict_centile(26.0, Some(60.0), Some(5.0)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            fit.predict_centile(26.0, None, Some(4.0)),
            Err(Error::MissingConditioning(_))
        ));

        let mut f2 = fit.clone();
        f2.beta1 = 0.01;
        let (x, y, dt) = (55.0, 7.0, 4.0);
        let lhs = f2.predict_centile(26.0, Some(x + y), Some(dt)).unwrap();
        let rhs = f2.predict_centile(26.0, Some(x), Some(dt)).unwrap() + (0.4 + 0.01 * dt) * y;
        assert!((lhs - rhs).abs() < 1e-10);

        let mut marg = fit.clone();
        marg.conditional = false;
        assert_eq!(
            marg.predict_centile(26.0, None, None).unwrap(),
            spec.eval(&fit.spline_coefs, 26.0).unwrap()
        );
    }

    #[test]
    fn rank_deficient_and_too_few() {
        let spec = SplineSpec::default();
        let same_t: Vec<(f64, f64)> = (0..50).map(|i| (24.0, i as f64)).collect();
        assert!(matches!(
            fit_marginal_qr(&same_t, p(0.5), &spec),
            Err(Error::RankDeficient(_))
        ));
        let few: Vec<(f64, f64)> = (0..5).map(|i| (20.0 + i as f64, 1.0)).collect();
        assert!(matches!(
            fit_marginal_qr(&few, p(0.5), &spec),
            Err(Error::TooFewObservations { .. })
        ));
    }

    #[test]
    fn json_export_fields() {
        let data: Vec<(f64, f64)> = (0..40)
            .map(|i| (16.0 + 0.5 * i as f64, (i % 7) as f64))
            .collect();
        let fit = fit_marginal_qr(&data, p(0.9), &SplineSpec::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fit.to_json().unwrap()).unwrap();
        assert_eq!(v["tau"], 0.9);
        assert_eq!(v["knots"].as_array().unwrap().len(), 9);
        assert_eq!(v["coefficients"].as_array().unwrap().len(), 5);
        assert_eq!(v["beta0"], 0.0);
    }

    #[test]
    fn crossings_are_counted() {
        let c = default_cohort(1000, 40, LognormalAR1Model::default());
        let data = c.observed_points();
        let spec = SplineSpec::default();
        let fits: Vec<QuantileFit> = [0.03, 0.1, 0.5, 0.9, 0.97]
            .iter()
            .map(|&t| fit_marginal_qr(&data, p(t), &spec).unwrap())
            .collect();
        // well separated quantiles on a large sample do not cross
        assert_eq!(count_crossings(&fits).unwrap(), 0);
        let mut swapped = fits.clone();
        swapped[0].spline_coefs = fits[4].spline_coefs.clone();
        assert!(count_crossings(&swapped).unwrap() > 0);
    }
}
