//! Loss terms, the correction schedule and the per-batch composite
//! objective with its gradients.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::model::Scalar;
use crate::select::per_sample_ce;

/// Floor applied inside the logarithm of the uncertain-set loss.
pub const LOG_FLOOR: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-6;

/// Sigmoid ramp of the uncertain-set weight:
/// `eps_maxcorr / (1 + exp(-k ((n - t_corr) - t_temp)))`.
pub fn lambda_unce(n: usize, cfg: &TrainConfig) -> f64 {
    let x = (n as f64 - cfg.t_corr as f64) - cfg.t_temp;
    cfg.eps_maxcorr / (1.0 + (-cfg.k * x).exp())
}

/// The uncertain-set weight actually applied at epoch `n`: zero until the
/// correction phase starts or when correction is disabled.
pub fn scheduled_lambda_unce(n: usize, cfg: &TrainConfig) -> f64 {
    if cfg.disable_corr || n <= cfg.t_corr {
        0.0
    } else {
        lambda_unce(n, cfg)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn one_hot(label: usize, n_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_classes];
    v[label] = 1.0;
    v
}

/// Sum (not mean) of per-sample cross-entropy over `ids`.
pub fn loss_certain<S: Scalar>(logits: &Array2<S>, labels: &[usize], ids: &[usize]) -> f64 {
    let ce = per_sample_ce(logits, labels);
    ids.iter().map(|&i| ce[i]).sum()
}

/// Sum of cross-entropy over every augmented row.
pub fn loss_aug<S: Scalar>(logits: &Array2<S>, labels: &[usize]) -> f64 {
    per_sample_ce(logits, labels).iter().sum()
}

fn check_distribution(v: &[f64], what: &str) -> Result<(), TrainError> {
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || v.iter().any(|&p| p < -NORMALIZATION_TOL) {
        return Err(TrainError::NotNormalized(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// `p_clean * noisy_onehot + (1 - p_clean) * pred_soft`.
pub fn corrected_target(
    p_clean: f64,
    noisy_onehot: &[f64],
    pred_soft: &[f64],
) -> Result<Vec<f64>, TrainError> {
    if !(0.0..=1.0).contains(&p_clean) {
        return Err(TrainError::NotNormalized(format!("p_clean = {p_clean}")));
    }
    check_distribution(noisy_onehot, "observed label vector")?;
    check_distribution(pred_soft, "soft prediction")?;
    Ok(noisy_onehot
        .iter()
        .zip(pred_soft)
        .map(|(y, p)| p_clean * y + (1.0 - p_clean) * p)
        .collect())
}

/// `-(1/m) sum_i h_corr_i . log(max(h_pred_i, 1e-12))` over the `m` aligned
/// uncertain samples; 0 for an empty set.
pub fn loss_uncertain(h_corr: &[Vec<f64>], h_pred: &[Vec<f64>]) -> f64 {
    assert_eq!(h_corr.len(), h_pred.len());
    if h_corr.is_empty() {
        return 0.0;
    }
    let total: f64 = h_corr
        .iter()
        .zip(h_pred)
        .map(|(t, p)| {
            -t.iter()
                .zip(p)
                .map(|(ti, pi)| ti * pi.max(LOG_FLOOR).ln())
                .sum::<f64>()
        })
        .sum();
    total / h_corr.len() as f64
}

/// Cross-entropy summed over the whole batch plus the reconstruction term.
pub fn warmup_loss<S: Scalar>(
    logits: &Array2<S>,
    labels: &[usize],
    x: &Array3<S>,
    x_hat: &Array3<S>,
) -> Result<f64, TrainError> {
    let all: Vec<usize> = (0..labels.len()).collect();
    let enc = crate::model::reconstruction_loss(x, x_hat)?;
    Ok(loss_certain(logits, labels, &all) + enc.to_f64().unwrap())
}

/// Per-batch values of the individual terms. `None` marks a term that the
/// current phase and configuration do not include.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: Option<f64>,
    pub enc: Option<f64>,
    pub aug: Option<f64>,
    pub unce: Option<f64>,
}

/// `L_ce + lambda_enc L_enc + lambda_unce(n) L_unce + lambda_aug L_aug`.
/// Absent terms contribute nothing; the uncertain term is also dropped
/// before the correction phase and when correction is disabled.
pub fn total_loss(c: &LossComponents, cfg: &TrainConfig, n: usize) -> f64 {
    let aug = if cfg.disable_aug { 0.0 } else { c.aug.unwrap_or(0.0) };
    c.ce.unwrap_or(0.0)
        + cfg.lambda_enc * c.enc.unwrap_or(0.0)
        + scheduled_lambda_unce(n, cfg) * c.unce.unwrap_or(0.0)
        + cfg.lambda_aug * aug
}

/// What a single batch row contributes to the classification terms.
#[derive(Clone, Debug, PartialEq)]
pub enum RowTarget {
    /// Cross-entropy against the observed label (certain set, warmup, baseline).
    Label(usize),
    /// Cross-entropy of an augmented copy.
    Augmented(usize),
    /// Soft corrected target (uncertain set).
    Soft(Vec<f64>),
    /// No classification loss (hard set, or a set the phase ignores).
    Ignore,
}

/// Term weights and which terms are present for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda_enc: Option<f64>,
    pub lambda_aug: Option<f64>,
    pub lambda_unce: Option<f64>,
}

pub struct BatchLoss<S> {
    pub components: LossComponents,
    pub total: f64,
    pub d_logits: Array2<S>,
    pub d_recon: Option<Array3<S>>,
}

/// Evaluates the composite objective on one batch and its gradient with
/// respect to logits and reconstruction. `recon` pairs the decoded inputs
/// with their reconstructions (the first rows of the batch).
pub fn batch_objective<S: Scalar>(
    logits: &Array2<S>,
    targets: &[RowTarget],
    recon: Option<(&Array3<S>, &Array3<S>)>,
    weights: &ObjectiveWeights,
) -> Result<BatchLoss<S>, TrainError> {
    assert_eq!(logits.nrows(), targets.len(), "one target per batch row");
    let c = logits.ncols();
    let mut d_logits = Array2::<S>::zeros(logits.raw_dim());
    let (mut ce, mut aug, mut unce) = (0.0, 0.0, 0.0);
    let n_soft = targets
        .iter()
        .filter(|t| matches!(t, RowTarget::Soft(_)))
        .count();
    let lam_aug = weights.lambda_aug.unwrap_or(0.0);
    let lam_unce = weights.lambda_unce.unwrap_or(0.0);
    for (r, target) in targets.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.to_f64().unwrap()).collect();
        let p = softmax(&row);
        let mut write = |grad: Vec<f64>| {
            for (k, g) in grad.into_iter().enumerate() {
                d_logits[[r, k]] = S::of(g);
            }
        };
        match target {
            RowTarget::Label(y) | RowTarget::Augmented(y) => {
                let y = *y;
                let l = per_sample_ce(&Array2::from_shape_vec((1, c), row).unwrap(), &[y])[0];
                let scale = if matches!(target, RowTarget::Label(_)) {
                    ce += l;
                    1.0
                } else {
                    if weights.lambda_aug.is_none() {
                        continue;
                    }
                    aug += l;
                    lam_aug
                };
                write(
                    p.iter()
                        .enumerate()
                        .map(|(k, &pk)| scale * (pk - if k == y { 1.0 } else { 0.0 }))
                        .collect(),
                );
            }
            RowTarget::Soft(h) => {
                if weights.lambda_unce.is_none() {
                    continue;
                }
                unce += -h
                    .iter()
                    .zip(&p)
                    .map(|(hk, pk)| hk * pk.max(LOG_FLOOR).ln())
                    .sum::<f64>();
                // d/dz of -sum_k h_k log p_k, skipping floored components.
                let active: f64 = h
                    .iter()
                    .zip(&p)
                    .filter(|(_, &pk)| pk > LOG_FLOOR)
                    .map(|(hk, _)| hk)
                    .sum();
                let scale = lam_unce / n_soft as f64;
                write(
                    p.iter()
                        .zip(h)
                        .map(|(&pk, &hk)| {
                            let own = if pk > LOG_FLOOR { hk } else { 0.0 };
                            scale * (active * pk - own)
                        })
                        .collect(),
                );
            }
            RowTarget::Ignore => {}
        }
    }
    if n_soft > 0 {
        unce /= n_soft as f64;
    }

    let (enc, d_recon) = match (recon, weights.lambda_enc) {
        (Some((x, x_hat)), Some(lam)) => {
            let enc = crate::model::reconstruction_loss(x, x_hat)?
                .to_f64()
                .unwrap();
            let k = S::of(2.0 * lam / x.dim().0 as f64);
            let d = (x_hat - x).mapv(|v| v * k);
            (Some(enc), Some(d))
        }
        _ => (None, None),
    };
    let components = LossComponents {
        ce: Some(ce),
        enc,
        aug: weights.lambda_aug.map(|_| aug),
        unce: weights.lambda_unce.map(|_| unce),
    };
    let total = ce
        + weights.lambda_enc.unwrap_or(0.0) * enc.unwrap_or(0.0)
        + lam_aug * aug
        + lam_unce * unce;
    Ok(BatchLoss {
        components,
        total,
        d_logits,
        d_recon,
    })
}
