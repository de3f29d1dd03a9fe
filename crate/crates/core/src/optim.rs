//! Small unconstrained optimizers used by the likelihood-based estimators.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
}

pub(crate) struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the relative change in f stays below this for two iterations.
    pub f_rel_tol: f64,
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            f_rel_tol: 1e-9,
            grad_tol: 1e-8,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS with an inverse-Hessian approximation and Armijo backtracking.
/// `f` writes the gradient into its second argument and returns the value.
pub(crate) fn bfgs<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return Err(Error::NonConvergence {
            iterations: 0,
            detail: "objective not finite at the starting point".into(),
        });
    }
    let mut h = identity(n);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut small_steps = 0;

    for iter in 0..opts.max_iter {
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm < opts.grad_tol {
            return Ok(Minimum {
                x,
                f: fx,
                iterations: iter,
            });
        }
        for i in 0..n {
            dir[i] = -dot(&h[i * n..(i + 1) * n], &g);
        }
        let mut slope = dot(&dir, &g);
        if slope >= 0.0 {
            // lost positive definiteness: restart along steepest descent
            h = identity(n);
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
            slope = dot(&dir, &g);
        }

        let mut step = 1.0;
        let mut accepted = false;
        let mut f_new = f64::INFINITY;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if gnorm < opts.grad_tol.sqrt() {
                return Ok(Minimum {
                    x,
                    f: fx,
                    iterations: iter,
                });
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                detail: format!("line search failed; best f = {fx:.12e}, |grad|_inf = {gnorm:.3e}"),
            });
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 {
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            let c = (1.0 + yhy * rho) * rho;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += c * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }

        let change = (fx - f_new).abs() / fx.abs().max(1e-12);
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if change < opts.f_rel_tol {
            small_steps += 1;
            if small_steps >= 2 {
                return Ok(Minimum {
                    x,
                    f: fx,
                    iterations: iter + 1,
                });
            }
        } else {
            small_steps = 0;
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        detail: format!("iteration limit; best f = {fx:.12e}"),
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// Maximize a univariate function on `[lo, hi]`: coarse grid to locate the
/// best cell, then golden-section search inside the neighbouring cells.
pub(crate) fn grid_golden_max<F>(mut f: F, lo: f64, hi: f64, grid: usize, tol: f64) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let h = (hi - lo) / grid as f64;
    let (mut best_i, mut best_v) = (0, f64::NEG_INFINITY);
    for i in 0..=grid {
        let v = f(lo + h * i as f64);
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    let mut a = lo + h * best_i.saturating_sub(1) as f64;
    let mut b = (lo + h * (best_i + 1) as f64).min(hi);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    if fx >= best_v {
        (x, fx)
    } else {
        (lo + h * best_i as f64, best_v)
    }
}
