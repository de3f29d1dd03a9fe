//! Exact minimizer of Σ ρ_τ(y_i − x_i·β) over β.
//!
//! Works on the primal: a vertex is fixed by `p` observations with zero
//! residual (the basis). At each step every edge leaving the vertex (one basis
//! observation released above or below its fit) is priced by its directional
//! derivative, the steepest descending edge is taken, and the step length is
//! the weighted-median breakpoint of the piecewise-linear objective along that
//! edge, so each step may pass many breakpoints at once. The objective
//! strictly decreases, so the method terminates at a vertex optimum.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-major `n × p` design.
pub(crate) struct Design<'a> {
    pub x: &'a [f64],
    pub n: usize,
    pub p: usize,
}

impl Design<'_> {
    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub coef: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

pub(crate) fn check_loss_objective(design: &Design, y: &[f64], coef: &[f64], tau: f64) -> f64 {
    (0..design.n)
        .map(|i| {
            let r = y[i] - dot(design.row(i), coef);
            if r < 0.0 {
                r * (tau - 1.0)
            } else {
                r * tau
            }
        })
        .sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn solve(design: &Design, y: &[f64], tau: f64, max_iter: usize) -> Result<Solution> {
    let (n, p) = (design.n, design.p);
    debug_assert_eq!(y.len(), n);
    if n < p {
        return Err(Error::TooFewObservations { needed: p, got: n });
    }
    let mut basis = initial_basis(design, y, tau)?;
    let mut in_basis = vec![false; n];
    let scale = 1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let zero_tol = 1e-10 * scale;
    let mut resid = vec![0.0; n];
    let mut kinks: Vec<(f64, f64, usize)> = Vec::with_capacity(n);
    let mut zeros: Vec<usize> = Vec::new();

    for iter in 0..max_iter {
        let xh = DMatrix::from_fn(p, p, |i, j| design.row(basis[i])[j]);
        let inv = xh.try_inverse().ok_or_else(|| {
            Error::RankDeficient(format!("singular basis at simplex iteration {iter}"))
        })?;
        let yh = DVector::from_iterator(p, basis.iter().map(|&i| y[i]));
        let beta = &inv * yh;
        let beta = beta.as_slice();

        in_basis.iter_mut().for_each(|b| *b = false);
        for &i in &basis {
            in_basis[i] = true;
        }
        let mut g = vec![0.0; p];
        zeros.clear();
        for i in 0..n {
            let xi = design.row(i);
            let r = if in_basis[i] {
                0.0
            } else {
                y[i] - dot(xi, beta)
            };
            resid[i] = r;
            if in_basis[i] {
                continue;
            }
            let w = if r > zero_tol {
                tau
            } else if r < -zero_tol {
                tau - 1.0
            } else {
                zeros.push(i);
                continue;
            };
            for (gj, xj) in g.iter_mut().zip(xi) {
                *gj += w * xj;
            }
        }

        // Price each edge: release basis point k upward (s = +1) or downward.
        let mut best: Option<(f64, usize, f64)> = None;
        for k in 0..p {
            let u: Vec<f64> = inv.column(k).iter().copied().collect();
            let gu = dot(&g, &u);
            for s in [1.0, -1.0] {
                let mut deriv = -s * gu + if s > 0.0 { 1.0 - tau } else { tau };
                for &i in &zeros {
                    let c = -s * dot(design.row(i), &u);
                    deriv += if c > 0.0 { tau * c } else { (tau - 1.0) * c };
                }
                if best.is_none_or(|(d, _, _)| deriv < d) {
                    best = Some((deriv, k, s));
                }
            }
        }
        let (deriv, k, s) = best.expect("p >= 1");
        if deriv >= -1e-9 {
            let coef = beta.to_vec();
            let objective = check_loss_objective(design, y, &coef, tau);
            return Ok(Solution {
                coef,
                objective,
                iterations: iter,
            });
        }

        let dir: Vec<f64> = inv.column(k).iter().map(|v| s * v).collect();
        kinks.clear();
        for i in 0..n {
            if in_basis[i] || resid[i].abs() <= zero_tol {
                continue;
            }
            let c = -dot(design.row(i), &dir);
            if resid[i] * c < 0.0 {
                kinks.push((-resid[i] / c, c.abs(), i));
            }
        }
        kinks.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let mut slope = deriv;
        let mut entering = None;
        for &(_, a, i) in &kinks {
            slope += a;
            if slope >= 0.0 {
                entering = Some(i);
                break;
            }
        }
        match entering {
            Some(i) => basis[k] = i,
            None => {
                return Err(Error::NonConvergence {
                    iterations: iter,
                    detail: "objective unbounded along a descent edge".into(),
                })
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        detail: "simplex iteration limit reached".into(),
    })
}

/// Start near the optimum: least-squares fit shifted to the τ-quantile of its
/// residuals, then the `p` observations closest to that shifted fit that
/// form a nonsingular basis.
fn initial_basis(design: &Design, y: &[f64], tau: f64) -> Result<Vec<usize>> {
    let (n, p) = (design.n, design.p);
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for i in 0..n {
        let xi = design.row(i);
        for a in 0..p {
            xty[a] += xi[a] * y[i];
            for b in 0..p {
                xtx[(a, b)] += xi[a] * xi[b];
            }
        }
    }
    let ls = xtx
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("design columns are linearly dependent".into()))?
        .solve(&xty);
    let mut r: Vec<f64> = (0..n)
        .map(|i| y[i] - dot(design.row(i), ls.as_slice()))
        .collect();
    let mut sorted = r.clone();
    let q_idx = ((tau * n as f64) as usize).min(n - 1);
    let (_, q, _) = sorted.select_nth_unstable_by(q_idx, f64::total_cmp);
    let q = *q;
    r.iter_mut().for_each(|v| *v = (*v - q).abs());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| r[a].total_cmp(&r[b]));

    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut basis = Vec::with_capacity(p);
    for &i in &order {
        let xi = design.row(i);
        let norm0 = dot(xi, xi).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = xi.to_vec();
        for qv in &ortho {
            let c = dot(qv, &v);
            v.iter_mut().zip(qv).for_each(|(a, b)| *a -= c * b);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            ortho.push(v);
            basis.push(i);
            if basis.len() == p {
                return Ok(basis);
            }
        }
    }
    Err(Error::RankDeficient(format!(
        "only {} linearly independent observations for {p} coefficients",
        basis.len()
    )))
}
