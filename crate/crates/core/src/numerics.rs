//! Standard normal functions, the check loss, and reproducible random streams.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Description of the random generator, recorded in every output header.
pub const PRNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.3); key = SplitMix64 expansion of a \
SplitMix64 fold over (master_seed, path); uniforms use the top 53 bits; normals by inverse CDF";

/// A probability strictly inside (0, 1): centile levels, specificities.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidProbability(value))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// 1 - p.
    pub fn complement(self) -> Self {
        Self(1.0 - self.0)
    }
}

impl TryFrom<f64> for Probability {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Φ(z). Computed as erfc(-z/√2)/2, which keeps full relative precision in
/// the lower tail.
pub fn std_normal_cdf(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::NonFinite("std_normal_cdf"));
    }
    Ok(cdf_unchecked(z))
}

#[inline]
pub(crate) fn cdf_unchecked(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// Φ⁻¹(p) by Wichura's AS 241 (PPND16), relative accuracy about 1e-16.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    Ok(quantile_unchecked(p))
}

#[allow(clippy::excessive_precision, clippy::inconsistent_digit_grouping)]
pub(crate) fn quantile_unchecked(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2509.080_928_730_122_7 * r + 33_430.575_583_588_128) * r
            + 67_265.770_927_008_7)
            * r
            + 45_921.953_931_549_87)
            * r
            + 13_731.693_765_509_461)
            * r
            + 1971.590_950_306_551_4)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_6;
        let den = ((((((5226.495_278_852_546 * r + 28_729.085_735_721_943) * r
            + 39_307.895_800_092_71)
            * r
            + 21_213.794_301_586_596)
            * r
            + 5394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r
            + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_07)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 0.014_875_361_290_850_615)
            * r
            + 0.136_929_880_922_735_8)
            * r
            + 0.599_832_206_555_887_9)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Check (pinball) loss ρ_τ(r) = r·(τ − 1{r < 0}).
#[inline]
pub fn pinball_loss(residual: f64, tau: Probability) -> f64 {
    let t = tau.value();
    if residual < 0.0 {
        residual * (t - 1.0)
    } else {
        residual * t
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Immutable descriptor of a random stream: a master seed, a hierarchical
/// path (replication, subject, ...) and a position within the stream.
///
/// The same `(master_seed, path)` always produces the same sequence and
/// distinct paths give independent keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<u64>,
    #[serde(default)]
    position: u128,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            path: Vec::new(),
            position: 0,
        }
    }

    pub fn with_path(master_seed: u64, path: &[u64]) -> Self {
        Self {
            master_seed,
            path: path.to_vec(),
            position: 0,
        }
    }

    /// Sub-stream at `path ++ [index]`, positioned at its start.
    pub fn child(&self, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push(index);
        Self {
            master_seed: self.master_seed,
            path,
            position: 0,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    fn key(&self) -> [u8; 32] {
        let mut h = splitmix64(self.master_seed ^ GOLDEN_GAMMA);
        for &p in &self.path {
            h = splitmix64(h ^ splitmix64(p.wrapping_add(GOLDEN_GAMMA)));
        }
        let mut key = [0u8; 32];
        let mut state = h;
        for chunk in key.chunks_exact_mut(8) {
            state = state.wrapping_add(GOLDEN_GAMMA);
            chunk.copy_from_slice(&splitmix64(state).to_le_bytes());
        }
        key
    }

    /// Stateful sampler starting at this descriptor's position.
    pub fn sampler(&self) -> Sampler {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_word_pos(self.position);
        Sampler { rng }
    }

    /// One uniform draw on [0, 1) and the advanced descriptor.
    pub fn draw_uniform(&self) -> (f64, RngStream) {
        let mut s = self.sampler();
        let u = s.uniform();
        (u, self.advanced_to(s.rng.get_word_pos()))
    }

    /// One standard normal draw and the advanced descriptor.
    pub fn draw_normal(&self) -> (f64, RngStream) {
        let mut s = self.sampler();
        let z = s.normal();
        (z, self.advanced_to(s.rng.get_word_pos()))
    }

    fn advanced_to(&self, position: u128) -> RngStream {
        RngStream {
            master_seed: self.master_seed,
            path: self.path.clone(),
            position,
        }
    }
}

/// Sequential sampler over one [`RngStream`].
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    /// Uniform on [0, 1) with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    fn uniform_open(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by inverse-CDF transform of one open uniform.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        quantile_unchecked(self.uniform_open())
    }

    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: Φ(z) = 1/2 + ∫₀^z φ by composite Simpson with a
    /// fine grid (error well under 1e-12 for |z| ≤ 8).
    fn simpson_cdf(z: f64) -> f64 {
        let n = 20_000;
        let h = z / n as f64;
        let mut s = std_normal_pdf(0.0) + std_normal_pdf(z);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * std_normal_pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    fn bisect_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if simpson_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(std_normal_cdf(0.0).unwrap(), 0.5);
        assert!((std_normal_cdf(1.2816).unwrap() - 0.9000).abs() < 1e-4);
        assert!((std_normal_cdf(-1.8808).unwrap() - 0.0300).abs() < 1e-4);
        assert!(std_normal_cdf(f64::NAN).is_err());
        assert!(std_normal_cdf(f64::INFINITY).is_err());
    }

    #[test]
    fn cdf_matches_quadrature_oracle() {
        for i in -60..=60 {
            let z = i as f64 * 0.1;
            let got = std_normal_cdf(z).unwrap();
            assert!((got - simpson_cdf(z)).abs() < 1e-12, "z={z}");
        }
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(std_normal_quantile(0.5).unwrap(), 0.0);
        let q97 = std_normal_quantile(0.97).unwrap();
        assert!((q97 - bisect_quantile(0.97)).abs() < 1e-9);
        assert!((q97 - 1.8808).abs() < 1e-4);
        assert!((std_normal_quantile(0.03).unwrap() + q97).abs() < 1e-12);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(std_normal_quantile(bad).is_err());
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let z = std_normal_quantile(p).unwrap();
            assert!((std_normal_cdf(z).unwrap() - p).abs() <= 1e-9);
        }
        for p in [1e-10, 1e-6, 1e-3, 1.0 - 1e-6] {
            let z = std_normal_quantile(p).unwrap();
            assert!(((std_normal_cdf(z).unwrap() - p) / p).abs() < 1e-9);
        }
    }

    #[test]
    fn pinball_examples() {
        let half = Probability::new(0.5).unwrap();
        assert_eq!(pinball_loss(1.0, half), 0.5);
        assert_eq!(pinball_loss(-1.0, half), 0.5);
        let p90 = Probability::new(0.9).unwrap();
        assert!((pinball_loss(-2.0, p90) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn probability_rejects_endpoints() {
        assert!(Probability::new(0.0).is_err());
        assert!(Probability::new(1.0).is_err());
        assert!(Probability::new(0.3).is_ok());
        assert!(serde_json::from_str::<Probability>("1.2").is_err());
    }

    #[test]
    fn streams_are_deterministic() {
        let s = RngStream::with_path(7, &[3, 11]);
        let a: Vec<f64> = {
            let mut r = s.sampler();
            (0..100).map(|_| r.normal()).collect()
        };
        let b: Vec<f64> = {
            let mut r = s.sampler();
            (0..100).map(|_| r.normal()).collect()
        };
        assert_eq!(a, b);

        // Functional draws walk the same sequence as the sampler.
        let mut r = s.sampler();
        let mut d = s.clone();
        for _ in 0..10 {
            let (u, next) = d.draw_uniform();
            assert_eq!(u, r.uniform());
            d = next;
        }
        assert_ne!(
            RngStream::with_path(7, &[3]).sampler().uniform(),
            s.sampler().uniform()
        );
    }

    #[test]
    fn uniform_and_normal_moments() {
        let n = 1_000_000;
        let mut r = RngStream::with_path(2024, &[0]).sampler();
        let mean_u = (0..n).map(|_| r.uniform()).sum::<f64>() / n as f64;
        // 3σ bound: 3·sqrt(1/12/n) ≈ 0.00087
        assert!((mean_u - 0.5).abs() < 0.002);

        let zs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let m = zs.iter().sum::<f64>() / n as f64;
        let v = zs.iter().map(|z| (z - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((v - 1.0).abs() < 0.01);
    }

    #[test]
    fn distinct_paths_are_uncorrelated() {
        let n = 100_000;
        let mut a = RngStream::with_path(1, &[0, 1]).sampler();
        let mut b = RngStream::with_path(1, &[0, 2]).sampler();
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..n).map(|_| (a.normal(), b.normal())).unzip();
        let r = pearson(&xs, &ys);
        assert!(r.abs() < 3.0 / (n as f64).sqrt(), "r = {r}");
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx).powi(2);
            syy += (b - my).powi(2);
        }
        sxy / (sxx * syy).sqrt()
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cdf_symmetry(z in -8.0f64..8.0) {
                let s = std_normal_cdf(z).unwrap() + std_normal_cdf(-z).unwrap();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn quantile_round_trip(z in -6.0f64..6.0) {
                let p = std_normal_cdf(z).unwrap();
                prop_assert!((std_normal_quantile(p).unwrap() - z).abs() <= 1e-8);
            }

            #[test]
            fn pinball_convex(r1 in -50.0f64..50.0, r2 in -50.0f64..50.0,
                              lam in 0.0f64..1.0, tau in 0.01f64..0.99) {
                let t = Probability::new(tau).unwrap();
                let lhs = pinball_loss(lam * r1 + (1.0 - lam) * r2, t);
                let rhs = lam * pinball_loss(r1, t) + (1.0 - lam) * pinball_loss(r2, t);
                prop_assert!(lhs <= rhs + 1e-9);
                prop_assert!(pinball_loss(r1, t) >= 0.0);
            }
        }
    }
}
