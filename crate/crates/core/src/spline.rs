//! Clamped B-spline basis over gestational age.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub degree: usize,
    pub boundary: (f64, f64),
    pub n_basis: usize,
    knots: Vec<f64>,
}

impl Default for SplineSpec {
    /// Five cubic B-splines on [16, 36] with one interior knot at 26.
    fn default() -> Self {
        Self::uniform(3, (16.0, 36.0), 5).expect("valid default spline")
    }
}

impl SplineSpec {
    /// Clamped spline with evenly spaced interior knots.
    pub fn uniform(degree: usize, boundary: (f64, f64), n_basis: usize) -> Result<Self> {
        if n_basis < degree + 1 {
            return Err(Error::InvalidParameter(format!(
                "n_basis ({n_basis}) must be at least degree + 1 ({})",
                degree + 1
            )));
        }
        let n_interior = n_basis - degree - 1;
        let interior: Vec<f64> = (1..=n_interior)
            .map(|i| boundary.0 + (boundary.1 - boundary.0) * i as f64 / (n_interior + 1) as f64)
            .collect();
        Self::with_interior_knots(degree, boundary, &interior)
    }

    pub fn with_interior_knots(
        degree: usize,
        boundary: (f64, f64),
        interior: &[f64],
    ) -> Result<Self> {
        if !(boundary.0 < boundary.1) {
            return Err(Error::InvalidParameter(
                "spline boundary must be increasing".into(),
            ));
        }
        if interior
            .iter()
            .any(|&k| !(k > boundary.0 && k < boundary.1))
            || interior.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::InvalidParameter(
                "interior knots must be nondecreasing and strictly inside the boundary".into(),
            ));
        }
        let mut knots = vec![boundary.0; degree + 1];
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(boundary.1, degree + 1));
        Ok(Self {
            degree,
            boundary,
            n_basis: interior.len() + degree + 1,
            knots,
        })
    }

    /// Full knot vector including repeated boundary knots.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check(&self, t: f64) -> Result<()> {
        if !(t >= self.boundary.0 && t <= self.boundary.1) {
            return Err(Error::OutOfWindow {
                t,
                lo: self.boundary.0,
                hi: self.boundary.1,
            });
        }
        Ok(())
    }

    /// Knot span containing `t`; the right endpoint belongs to the last span.
    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.n_basis - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        let mut lo = p;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Values of all basis functions at `t` (Cox–de Boor recursion).
    pub fn basis_row(&self, t: f64) -> Result<Vec<f64>> {
        self.check(t)?;
        let mut row = vec![0.0; self.n_basis];
        self.fill_row(t, &mut row);
        Ok(row)
    }

    pub(crate) fn fill_row(&self, t: f64, row: &mut [f64]) {
        let p = self.degree;
        let span = self.span(t);
        let k = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - k[span + 1 - j];
            right[j] = k[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        row.iter_mut().for_each(|v| *v = 0.0);
        for (j, v) in n.into_iter().enumerate() {
            row[span - p + j] = v;
        }
    }

    /// Spline value `B(t)·coefs`.
    pub fn eval(&self, coefs: &[f64], t: f64) -> Result<f64> {
        let row = self.basis_row(t)?;
        Ok(dot(&row, coefs))
    }

    pub fn design_matrix(&self, times: &[f64]) -> Result<BasisMatrix> {
        let mut data = vec![0.0; times.len() * self.n_basis];
        for (i, &t) in times.iter().enumerate() {
            self.check(t)?;
            self.fill_row(t, &mut data[i * self.n_basis..(i + 1) * self.n_basis]);
        }
        Ok(BasisMatrix {
            n_rows: times.len(),
            n_cols: self.n_basis,
            data,
        })
    }
}

/// Row-major basis evaluations, one row per time.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl BasisMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_cols.max(1)).take(self.n_rows)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
