//! Label-noise injection with a recorded ground-truth flip mask.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TimeSeriesDataset;
use crate::rng::{self, rng_from};

pub const NOISE_FILE: &str = "noise.json";
pub const SYMMETRIC_PROTOCOL: &str = "symmetric-other-class/v1";
pub const IDN_PROTOCOL: &str = "idn-random-projection-margin/v1";

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("noise rate tau must lie in [0, 1], got {0}")]
    TauOutOfRange(f64),
    #[error("noise injection needs at least 2 classes")]
    TooFewClasses,
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Instance,
}

impl NoiseKind {
    pub fn short(self) -> &'static str {
        match self {
            NoiseKind::Symmetric => "sym",
            NoiseKind::Instance => "idn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub tau: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, tau: f64, seed: u64) -> Result<Self, NoiseError> {
        check_tau(tau)?;
        Ok(Self { kind, tau, seed })
    }

    pub fn label(&self) -> String {
        format!("{}-{:.0}%", self.kind.short(), self.tau * 100.0)
    }
}

/// `flipped[i]` is true exactly when the observed label differs from the true
/// label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipMask {
    pub flipped: Vec<bool>,
}

impl FlipMask {
    pub fn from_labels(true_labels: &[usize], noisy_labels: &[usize]) -> Self {
        Self {
            flipped: true_labels
                .iter()
                .zip(noisy_labels)
                .map(|(a, b)| a != b)
                .collect(),
        }
    }

    pub fn of(ds: &TimeSeriesDataset) -> Self {
        Self::from_labels(&ds.true_labels, &ds.noisy_labels)
    }

    pub fn rate(&self) -> f64 {
        if self.flipped.is_empty() {
            return 0.0;
        }
        self.flipped.iter().filter(|&&f| f).count() as f64 / self.flipped.len() as f64
    }
}

/// Contents of `noise.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub kind: NoiseKind,
    pub tau: f64,
    pub seed: u64,
    pub achieved_rate: f64,
    /// Mean per-instance flip probability after any clipping.
    pub expected_rate: f64,
    /// Instances whose flip probability was clipped at 1 (IDN only).
    pub n_clipped: usize,
    pub protocol_version: String,
}

impl NoiseReport {
    pub fn write(&self, dir: &Path) -> Result<(), NoiseError> {
        let path = dir.join(NOISE_FILE);
        let text = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(&path, text + "\n").map_err(|e| NoiseError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn read(dir: &Path) -> Option<Self> {
        let text = fs::read_to_string(dir.join(NOISE_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }
}

fn check_tau(tau: f64) -> Result<(), NoiseError> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(NoiseError::TauOutOfRange(tau))
    }
}

/// Applies `spec` to the true labels of `ds`. Existing noisy labels are
/// discarded.
pub fn inject(
    ds: &TimeSeriesDataset,
    spec: &NoiseSpec,
) -> Result<(TimeSeriesDataset, FlipMask, NoiseReport), NoiseError> {
    match spec.kind {
        NoiseKind::Symmetric => {
            let (out, mask) = inject_symmetric(ds, spec.tau, spec.seed)?;
            let report = NoiseReport {
                kind: spec.kind,
                tau: spec.tau,
                seed: spec.seed,
                achieved_rate: mask.rate(),
                expected_rate: spec.tau,
                n_clipped: 0,
                protocol_version: SYMMETRIC_PROTOCOL.into(),
            };
            Ok((out, mask, report))
        }
        NoiseKind::Instance => {
            let probs = idn_flip_probabilities(ds, spec.tau, spec.seed)?;
            let (out, mask) = apply_idn(ds, &probs, spec.seed);
            let report = NoiseReport {
                kind: spec.kind,
                tau: spec.tau,
                seed: spec.seed,
                achieved_rate: mask.rate(),
                expected_rate: probs.probabilities.iter().sum::<f64>() / ds.len() as f64,
                n_clipped: probs.n_clipped,
                protocol_version: IDN_PROTOCOL.into(),
            };
            Ok((out, mask, report))
        }
    }
}

/// Symmetric class-conditional noise: each label independently moves, with
/// probability `tau`, to a uniformly chosen *different* class.
pub fn inject_symmetric(
    ds: &TimeSeriesDataset,
    tau: f64,
    seed: u64,
) -> Result<(TimeSeriesDataset, FlipMask), NoiseError> {
    check_tau(tau)?;
    let c = ds.n_classes();
    if c < 2 {
        return Err(NoiseError::TooFewClasses);
    }
    let mut rng = rng_from(seed, &[rng::STREAM_NOISE, 0]);
    let mut out = ds.clone();
    for (noisy, &y) in out.noisy_labels.iter_mut().zip(&ds.true_labels) {
        // Both draws happen for every instance so the stream position of
        // instance i does not depend on earlier outcomes.
        let u: f64 = rng.random();
        let r = rng.random_range(0..c - 1);
        *noisy = if u < tau {
            if r < y {
                r
            } else {
                r + 1
            }
        } else {
            y
        };
    }
    let mask = FlipMask::of(&out);
    Ok((out, mask))
}

pub struct IdnProbabilities {
    pub probabilities: Vec<f64>,
    /// Highest-scoring class other than the true one, per instance.
    pub destinations: Vec<usize>,
    pub n_clipped: usize,
}

/// Instance-dependent flip probabilities from a seeded random projection of
/// the flattened series onto `C` class scores.
///
/// The corruption score of an instance is `sigmoid(-margin / sd(margin))`,
/// where the margin is its true-class score minus the best other score.
/// Probabilities are proportional to the corruption score, scaled so their
/// mean is `tau`, then clipped at 1.
pub fn idn_flip_probabilities(
    ds: &TimeSeriesDataset,
    tau: f64,
    seed: u64,
) -> Result<IdnProbabilities, NoiseError> {
    check_tau(tau)?;
    let c = ds.n_classes();
    if c < 2 {
        return Err(NoiseError::TooFewClasses);
    }
    let n = ds.len();
    let d = ds.meta.series_length * ds.meta.n_features;
    let mut rng = rng_from(seed, &[rng::STREAM_NOISE, 1]);
    let projection = Array2::from_shape_fn((d, c), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z / (d as f64).sqrt()
    });
    let flat = ds
        .instances
        .view()
        .into_shape_with_order((n, d))
        .expect("standard layout");
    let scores = flat.dot(&projection);

    let mut margins = Vec::with_capacity(n);
    let mut destinations = Vec::with_capacity(n);
    for (row, &y) in scores.axis_iter(Axis(0)).zip(&ds.true_labels) {
        let (best, best_score) = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != y)
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (k, &s)| {
                if s > acc.1 {
                    (k, s)
                } else {
                    acc
                }
            });
        margins.push(row[y] - best_score);
        destinations.push(best);
    }
    let mean_m = margins.iter().sum::<f64>() / n as f64;
    let sd = (margins.iter().map(|m| (m - mean_m).powi(2)).sum::<f64>() / n as f64).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let corruption: Vec<f64> = margins
        .iter()
        .map(|m| 1.0 / (1.0 + (m / sd).exp()))
        .collect();
    let mean_q = corruption.iter().sum::<f64>() / n as f64;
    let mut n_clipped = 0;
    let probabilities = corruption
        .iter()
        .map(|q| {
            let p = if tau == 0.0 { 0.0 } else { tau * q / mean_q };
            if p > 1.0 {
                n_clipped += 1;
                1.0
            } else {
                p
            }
        })
        .collect();
    Ok(IdnProbabilities {
        probabilities,
        destinations,
        n_clipped,
    })
}

fn apply_idn(
    ds: &TimeSeriesDataset,
    probs: &IdnProbabilities,
    seed: u64,
) -> (TimeSeriesDataset, FlipMask) {
    let mut rng = rng_from(seed, &[rng::STREAM_NOISE, 2]);
    let mut out = ds.clone();
    for i in 0..ds.len() {
        let u: f64 = rng.random();
        out.noisy_labels[i] = if u < probs.probabilities[i] {
            probs.destinations[i]
        } else {
            ds.true_labels[i]
        };
    }
    let mask = FlipMask::of(&out);
    (out, mask)
}

/// Instance-dependent noise; see [`idn_flip_probabilities`].
pub fn inject_idn(
    ds: &TimeSeriesDataset,
    tau: f64,
    seed: u64,
) -> Result<(TimeSeriesDataset, FlipMask), NoiseError> {
    let probs = idn_flip_probabilities(ds, tau, seed)?;
    Ok(apply_idn(ds, &probs, seed))
}
