//! Gaussian kernel density estimate in `log1p` space.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bandwidth used when the data has no spread at all.
pub const MIN_BANDWIDTH: f64 = 1e-3;

/// Kernel centres are `log1p` of the fitted values; samples are mapped back
/// with `expm1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Kde<S: Scalar> {
    pub points: Vec<S>,
    pub bandwidth: S,
}

/// Silverman's rule of thumb, `0.9 min(sd, iqr / 1.34) n^(-1/5)`, falling
/// back to the standard deviation alone and then to [`MIN_BANDWIDTH`].
pub fn silverman<S: Scalar>(points: &[S]) -> S {
    let n = points.len();
    if n < 2 {
        return S::of(MIN_BANDWIDTH);
    }
    let nf = S::of_usize(n);
    let mean = points.iter().copied().sum::<S>() / nf;
    let var = points.iter().map(|&p| (p - mean) * (p - mean)).sum::<S>() / S::of_usize(n - 1);
    let sd = var.sqrt();
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite kernel centres"));
    let q = |f: f64| {
        let pos = f * (n - 1) as f64;
        let (lo, frac) = (pos.floor() as usize, pos - pos.floor());
        let hi = (lo + 1).min(n - 1);
        sorted[lo] + (sorted[hi] - sorted[lo]) * S::of(frac)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > S::zero() { sd.min(iqr / S::of(1.34)) } else { sd };
    let h = S::of(0.9) * spread * nf.powf(S::of(-0.2));
    if h > S::zero() {
        h
    } else {
        S::of(MIN_BANDWIDTH)
    }
}

impl<S: Scalar> Kde<S> {
    /// Fits on raw non-negative values. Negative values are clipped to 0.
    pub fn fit(values: &[S]) -> Result<Self> {
        let points: Vec<S> = values.iter().map(|&v| v.max(S::zero()).ln_1p()).collect();
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite value in KDE input".into()));
        }
        let bandwidth = silverman(&points);
        Self::from_log_points(points, bandwidth)
    }

    pub fn from_log_points(points: Vec<S>, bandwidth: S) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("KDE needs at least one value".into()));
        }
        if !(bandwidth > S::zero()) {
            return Err(Error::Config(format!("KDE bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Kde { points, bandwidth })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smallest and largest kernel centre.
    pub fn log_range(&self) -> (S, S) {
        self.points
            .iter()
            .fold((S::infinity(), S::neg_infinity()), |(lo, hi), &p| (lo.min(p), hi.max(p)))
    }

    /// A draw in `log1p` space: a uniformly chosen centre plus Gaussian noise.
    pub fn sample_log<R: Rng + ?Sized>(&self, rng: &mut R) -> S {
        let c = self.points[rng.gen_range(0..self.points.len())];
        let z: f64 = rng.sample(StandardNormal);
        c + self.bandwidth * S::of(z)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> S {
        self.sample_log(rng).exp_m1()
    }

    /// A draw kept within the observed range, so it never leaves the
    /// support of the data it was fit on.
    pub fn sample_clipped<R: Rng + ?Sized>(&self, rng: &mut R) -> S {
        let (lo, hi) = self.log_range();
        self.sample_log(rng).max(lo).min(hi).exp_m1().max(S::zero())
    }

    /// Density of the `log1p` value `x`.
    pub fn log_space_density(&self, x: S) -> S {
        let h = self.bandwidth;
        let norm = S::one() / (h * S::of((2.0 * std::f64::consts::PI).sqrt()) * S::of_usize(self.points.len()));
        self.points
            .iter()
            .map(|&c| {
                let u = (x - c) / h;
                (-(u * u) / S::of(2.0)).exp()
            })
            .sum::<S>()
            * norm
    }
}
