//! Time-warping augmentation of certain-set instances.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TimeSeriesDataset;
use crate::rng::{self, rng_from};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("warp magnitude sigma must be >= 0, got {0}")]
    NegativeSigma(f64),
    #[error("warping needs at least 2 knots, got {0}")]
    TooFewKnots(usize),
    #[error("warping needs a series of length >= 2, got {0}")]
    TooShort(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub n_knots: usize,
    /// Standard deviation of the knot speeds (mean 1).
    pub sigma: f64,
    pub seed: u64,
}

impl Default for WarpSpec {
    fn default() -> Self {
        Self {
            n_knots: 4,
            sigma: 0.2,
            seed: 0,
        }
    }
}

impl WarpSpec {
    fn validate(&self) -> Result<(), AugmentError> {
        if !(self.sigma >= 0.0) {
            return Err(AugmentError::NegativeSigma(self.sigma));
        }
        if self.n_knots < 2 {
            return Err(AugmentError::TooFewKnots(self.n_knots));
        }
        Ok(())
    }
}

/// Monotone piecewise-cubic Hermite (Fritsch-Carlson) interpolant through
/// `(xs, ys)` evaluated at `at`. Values stay within the range of the two
/// neighbouring knots.
fn pchip(xs: &[f64], ys: &[f64], at: f64) -> f64 {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
    let mut m = vec![0.0; n];
    if n == 2 {
        m[0] = delta[0];
        m[1] = delta[0];
    } else {
        m[0] = delta[0];
        m[n - 1] = delta[n - 2];
        for k in 1..n - 1 {
            if delta[k - 1] * delta[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                m[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
            }
        }
        // Endpoint slopes limited so the end intervals stay monotone.
        for (end, d) in [(0, delta[0]), (n - 1, delta[n - 2])] {
            if m[end] * d <= 0.0 || d == 0.0 {
                m[end] = 0.0;
            } else if m[end].abs() > 3.0 * d.abs() {
                m[end] = 3.0 * d;
            }
        }
    }
    let k = match xs.iter().rposition(|&x| x <= at) {
        Some(k) if k >= n - 1 => n - 2,
        Some(k) => k,
        None => 0,
    };
    let s = ((at - xs[k]) / h[k]).clamp(0.0, 1.0);
    let (s2, s3) = (s * s, s * s * s);
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * ys[k] + h10 * h[k] * m[k] + h01 * ys[k + 1] + h11 * h[k] * m[k + 1]
}

/// The warped sampling times `tau(0..T)` for a spec: strictly increasing,
/// `tau(0) = 0`, `tau(T-1) = T-1`.
pub fn warp_path(len: usize, spec: &WarpSpec) -> Result<Vec<f64>, AugmentError> {
    spec.validate()?;
    if len < 2 {
        return Err(AugmentError::TooShort(len));
    }
    let identity: Vec<f64> = (0..len).map(|t| t as f64).collect();
    if spec.sigma == 0.0 {
        return Ok(identity);
    }
    let mut rng = rng_from(spec.seed, &[rng::STREAM_WARP]);
    let var = spec.sigma * spec.sigma;
    let gamma = Gamma::new(1.0 / var, var).expect("positive shape and scale");
    let last = (len - 1) as f64;
    let knots_x: Vec<f64> = (0..spec.n_knots)
        .map(|k| last * k as f64 / (spec.n_knots - 1) as f64)
        .collect();
    let knots_speed: Vec<f64> = (0..spec.n_knots)
        .map(|_| gamma.sample(&mut rng).max(1e-3))
        .collect();
    let speed: Vec<f64> = identity
        .iter()
        .map(|&t| pchip(&knots_x, &knots_speed, t).max(1e-3))
        .collect();
    let mut tau = vec![0.0; len];
    for t in 1..len {
        tau[t] = tau[t - 1] + 0.5 * (speed[t - 1] + speed[t]);
    }
    let scale = last / tau[len - 1];
    for v in tau.iter_mut() {
        *v = (*v * scale).min(last);
    }
    tau[len - 1] = last;
    Ok(tau)
}

/// Resamples `x` (`T x F`) by linear interpolation at a random smooth
/// monotone re-timing shared by all channels. Endpoints are preserved and
/// `sigma = 0` returns the input unchanged.
pub fn time_warp(x: ArrayView2<'_, f64>, spec: &WarpSpec) -> Result<Array2<f64>, AugmentError> {
    let (len, n_features) = x.dim();
    let tau = warp_path(len, spec)?;
    if spec.sigma == 0.0 {
        return Ok(x.to_owned());
    }
    let mut out = Array2::zeros((len, n_features));
    for (t, &at) in tau.iter().enumerate() {
        let lo = (at.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        let w = at - lo as f64;
        for f in 0..n_features {
            out[[t, f]] = if w == 0.0 {
                x[[lo, f]]
            } else {
                (1.0 - w) * x[[lo, f]] + w * x[[hi, f]]
            };
        }
    }
    Ok(out)
}

/// `multiplier` warped copies of every listed instance, labelled with its
/// observed label. Each copy's warp seed is derived from `spec.seed`, the
/// instance id and the copy number.
pub fn build_aug_set(
    ds: &TimeSeriesDataset,
    certain_ids: &[usize],
    spec: &WarpSpec,
    multiplier: usize,
) -> Result<Vec<(Array2<f64>, usize)>, AugmentError> {
    let mut out = Vec::with_capacity(certain_ids.len() * multiplier);
    for &i in certain_ids {
        for copy in 0..multiplier {
            let sample_spec = WarpSpec {
                seed: rng::derive_seed(spec.seed, &[ds.ids[i], copy as u64]),
                ..*spec
            };
            out.push((time_warp(ds.instance(i), &sample_spec)?, ds.noisy_labels[i]));
        }
    }
    Ok(out)
}
