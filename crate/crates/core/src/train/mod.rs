//! Training configuration and the three-phase training loop: warmup on all
//! observed labels, then per-epoch selection with certain-set training and
//! augmentation, then additionally soft correction of the uncertain set.

pub mod loss;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{build_aug_set, AugmentError, WarpSpec};
use crate::data::TimeSeriesDataset;
use crate::eval::{selection_metrics, weighted_f1};
use crate::model::{Adam, LocalGlobalNet, ModelError, Scalar};
use crate::noise::FlipMask;
use crate::rng::{self, rng_from};
use crate::select::{per_sample_ce, select, Selection, SelectError, Selector};

pub use crate::model::{EncoderConfig, EncoderVariant};
pub use loss::{
    batch_objective, corrected_target, lambda_unce, loss_aug, loss_certain, loss_uncertain,
    one_hot, scheduled_lambda_unce, softmax, total_loss, warmup_loss, LossComponents,
    ObjectiveWeights, RowTarget,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("not a probability vector: {0}")]
    NotNormalized(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Selection, augmentation and correction.
    Actll,
    /// Plain summed cross-entropy on every observed label.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub max_epochs: usize,
    pub t_warmup: usize,
    pub t_corr: usize,
    /// Steepness of the correction ramp.
    pub k: f64,
    /// Epoch offset of the ramp midpoint after `t_corr`.
    pub t_temp: f64,
    pub eps_maxcorr: f64,
    pub lambda_enc: f64,
    pub lambda_aug: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub selector: Selector,
    pub encoder: EncoderConfig,
    pub disable_aug: bool,
    pub disable_corr: bool,
    pub warp_knots: usize,
    pub warp_sigma: f64,
    /// Augmented copies per certain sample per epoch.
    pub aug_multiplier: usize,
    /// Keep every epoch's selection in the output (for diagnostic dumps).
    pub keep_selections: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Actll,
            max_epochs: 300,
            t_warmup: 30,
            t_corr: 200,
            k: 0.1,
            t_temp: 10.0,
            eps_maxcorr: 1.0,
            lambda_enc: 1.0,
            lambda_aug: 1.0,
            learning_rate: 1e-3,
            batch_size: 32,
            eval_batch_size: 128,
            seed: 0,
            selector: Selector::Bmm,
            encoder: EncoderConfig::default(),
            disable_aug: false,
            disable_corr: false,
            warp_knots: 4,
            warp_sigma: 0.2,
            aug_multiplier: 1,
            keep_selections: false,
        }
    }
}

impl TrainConfig {
    /// The plain cross-entropy baseline: CNN-only encoder, no selection,
    /// augmentation, correction or reconstruction.
    pub fn vanilla(&self) -> Self {
        let mut cfg = self.clone();
        cfg.method = Method::Vanilla;
        cfg.encoder.variant = EncoderVariant::CnnOnly;
        cfg
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.method == Method::Actll
            && !(self.t_warmup < self.t_corr && self.t_corr < self.max_epochs)
        {
            return bad(format!(
                "need t_warmup < t_corr < max_epochs, got {} / {} / {}",
                self.t_warmup, self.t_corr, self.max_epochs
            ));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if !(self.k > 0.0) {
            return bad(format!("k must be positive, got {}", self.k));
        }
        if !(self.eps_maxcorr > 0.0 && self.eps_maxcorr <= 1.0) {
            return bad(format!("eps_maxcorr must lie in (0, 1], got {}", self.eps_maxcorr));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.lambda_enc < 0.0 || self.lambda_aug < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        self.encoder.validate()?;
        Ok(())
    }

    /// Records how this configuration interprets points the method leaves
    /// open, for inclusion in run reports.
    pub fn deviation_notes(&self) -> Vec<String> {
        vec![
            "per-class losses are z-scored then min-max rescaled to [1e-4, 1-1e-4] before the Beta fit".into(),
            "classes are grouped by observed (noisy) label".into(),
            "uncertain-set loss is averaged over uncertain samples in the batch".into(),
            "corrected targets are recomputed every epoch from the current fit; observed labels are never overwritten".into(),
            "clean posterior is the per-sample responsibility under the class mixture".into(),
            "augmentation grows implicitly with the certain set (fixed multiplier)".into(),
            "noise is injected into training folds only; test folds are scored on true labels".into(),
            "folds are stratified by true label".into(),
        ]
    }

    fn warp_spec(&self, epoch: usize) -> WarpSpec {
        WarpSpec {
            n_knots: self.warp_knots,
            sigma: self.warp_sigma,
            seed: rng::derive_seed(self.seed, &[rng::STREAM_WARP, epoch as u64]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Select,
    Correct,
    Vanilla,
}

impl Phase {
    pub fn of(epoch: usize, cfg: &TrainConfig) -> Phase {
        match cfg.method {
            Method::Vanilla => Phase::Vanilla,
            Method::Actll if epoch <= cfg.t_warmup => Phase::Warmup,
            Method::Actll if epoch <= cfg.t_corr => Phase::Select,
            Method::Actll => Phase::Correct,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Select => "select",
            Phase::Correct => "correct",
            Phase::Vanilla => "vanilla",
        }
    }
}

/// One row of `history.csv`. Loss terms are per-batch means; `None` marks a
/// term the epoch's recipe does not contain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lambda_unce: f64,
    pub l_ce: Option<f64>,
    pub l_enc: Option<f64>,
    pub l_aug: Option<f64>,
    pub l_unce: Option<f64>,
    pub total: f64,
    pub n_certain: Option<usize>,
    pub n_uncertain: Option<usize>,
    pub n_hard: Option<usize>,
    pub n_aug: usize,
    /// Weighted F1 against observed labels, from the selection pass.
    pub train_f1: Option<f64>,
    pub test_f1: Option<f64>,
    pub certain_purity: Option<f64>,
    pub hard_noise_recall: Option<f64>,
}

pub struct TrainOutput {
    pub model: LocalGlobalNet<f32>,
    pub history: Vec<EpochRecord>,
    /// `(epoch, selection)` for every selection epoch when
    /// `keep_selections` is set.
    pub selections: Vec<(usize, Selection)>,
}

fn batch_tensor<S: Scalar>(rows: &[ndarray::ArrayView2<'_, f64>]) -> Array3<S> {
    let (t, f) = rows[0].dim();
    let mut out = Array3::zeros((rows.len(), t, f));
    for (mut dst, src) in out.outer_iter_mut().zip(rows) {
        dst.zip_mut_with(src, |d, &s| *d = S::of(s));
    }
    out
}

/// Evaluation-mode logits for every instance, in order.
pub fn predict<S: Scalar>(
    net: &LocalGlobalNet<S>,
    ds: &TimeSeriesDataset,
    batch_size: usize,
) -> Result<Array2<S>, ModelError> {
    let mut out = Array2::zeros((ds.len(), net.n_classes));
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let views: Vec<_> = chunk.iter().map(|&i| ds.instance(i)).collect();
        let logits = net.predict_logits(&batch_tensor::<S>(&views))?;
        out.slice_mut(ndarray::s![chunk[0]..chunk[0] + chunk.len(), ..])
            .assign(&logits);
    }
    Ok(out)
}

pub fn argmax_rows<S: Scalar>(logits: &Array2<S>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(0)
        })
        .collect()
}

#[derive(Default)]
struct TermAccumulator {
    sums: [f64; 4],
    present: [bool; 4],
    total: f64,
    batches: usize,
}

impl TermAccumulator {
    fn add(&mut self, c: &LossComponents, total: f64) {
        for (k, v) in [c.ce, c.enc, c.aug, c.unce].into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[k] += v;
                self.present[k] = true;
            }
        }
        self.total += total;
        self.batches += 1;
    }

    fn mean(&self, k: usize) -> Option<f64> {
        self.present[k].then(|| self.sums[k] / self.batches.max(1) as f64)
    }
}

/// Trains on `train_set` (using its observed labels) per the configured
/// method. `test_set`, when given, is scored on true labels after every
/// epoch; `flip_mask` enables selection-quality diagnostics.
pub fn train(
    train_set: &TimeSeriesDataset,
    test_set: Option<&TimeSeriesDataset>,
    flip_mask: Option<&FlipMask>,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let n = train_set.len();
    let n_classes = train_set.n_classes();
    let mut init_rng = rng_from(cfg.seed, &[rng::STREAM_INIT]);
    let mut net: LocalGlobalNet<f32> = LocalGlobalNet::new(
        cfg.encoder.clone(),
        train_set.meta.n_features,
        n_classes,
        &mut init_rng,
    )?;
    let mut optimizer = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut selections = Vec::new();
    let labels = &train_set.noisy_labels;

    for epoch in 1..=cfg.max_epochs {
        let phase = Phase::of(epoch, cfg);
        let lam_unce = scheduled_lambda_unce(epoch, cfg);

        let mut selection = None;
        let mut train_f1 = None;
        let mut quality = (None, None);
        let mut aug_set = Vec::new();
        if matches!(phase, Phase::Select | Phase::Correct) {
            let logits = predict(&net, train_set, cfg.eval_batch_size)?;
            let losses = per_sample_ce(&logits, labels);
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(TrainError::Diverged { epoch });
            }
            train_f1 = weighted_f1(&argmax_rows(&logits), labels, n_classes).ok();
            let sel = select(&losses, labels, n_classes, cfg.selector);
            if let Some(mask) = flip_mask {
                let q = selection_metrics(&sel.partition, mask);
                quality = (q.certain_purity, q.hard_noise_recall);
            }
            if !cfg.disable_aug {
                aug_set = build_aug_set(
                    train_set,
                    &sel.partition.certain_ids,
                    &cfg.warp_spec(epoch),
                    cfg.aug_multiplier,
                )?;
            }
            selection = Some(sel);
        }
        let membership = selection.as_ref().map(|s| s.partition.membership());

        let mut shuffle_rng = rng_from(cfg.seed, &[rng::STREAM_SHUFFLE, epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut aug_order: Vec<usize> = (0..aug_set.len()).collect();
        aug_order.shuffle(&mut shuffle_rng);
        let n_batches = n.div_ceil(cfg.batch_size);
        let mut dropout_rng = rng_from(cfg.seed, &[rng::STREAM_DROPOUT, epoch as u64]);

        let weights = ObjectiveWeights {
            lambda_enc: (phase != Phase::Vanilla).then_some(cfg.lambda_enc),
            lambda_aug: (matches!(phase, Phase::Select | Phase::Correct) && !cfg.disable_aug)
                .then_some(cfg.lambda_aug),
            lambda_unce: (phase == Phase::Correct && !cfg.disable_corr).then_some(lam_unce),
        };
        let mut acc = TermAccumulator::default();
        for b in 0..n_batches {
            let batch = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let aug_lo = b * aug_order.len() / n_batches;
            let aug_hi = (b + 1) * aug_order.len() / n_batches;
            let aug_batch = &aug_order[aug_lo..aug_hi];

            let mut views: Vec<_> = batch.iter().map(|&i| train_set.instance(i)).collect();
            views.extend(aug_batch.iter().map(|&a| aug_set[a].0.view()));
            let x: Array3<f32> = batch_tensor(&views);
            let n_decode = if weights.lambda_enc.is_some() { batch.len() } else { 0 };
            let fwd = net.forward(&x, n_decode, Some(&mut dropout_rng))?;

            let mut targets = Vec::with_capacity(views.len());
            for (r, &i) in batch.iter().enumerate() {
                let set = membership.as_ref().map(|m| m[i]);
                targets.push(match (phase, set) {
                    (Phase::Warmup | Phase::Vanilla, _) => RowTarget::Label(labels[i]),
                    (_, Some(crate::select::SampleSet::Certain)) => RowTarget::Label(labels[i]),
                    (Phase::Correct, Some(crate::select::SampleSet::Uncertain))
                        if weights.lambda_unce.is_some() =>
                    {
                        let row: Vec<f64> =
                            fwd.logits.row(r).iter().map(|&v| v as f64).collect();
                        let p_clean = selection.as_ref().unwrap().partition.p_clean[i];
                        RowTarget::Soft(corrected_target(
                            p_clean,
                            &one_hot(labels[i], n_classes),
                            &softmax(&row),
                        )?)
                    }
                    _ => RowTarget::Ignore,
                });
            }
            targets.extend(aug_batch.iter().map(|&a| RowTarget::Augmented(aug_set[a].1)));

            let x_dec;
            let recon = match &fwd.reconstruction {
                Some(r) => {
                    x_dec = x.slice(ndarray::s![..batch.len(), .., ..]).to_owned();
                    Some((&x_dec, r))
                }
                None => None,
            };
            let out = batch_objective(&fwd.logits, &targets, recon, &weights)?;
            if !out.total.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            net.backward(&fwd, &out.d_logits, out.d_recon.as_ref())?;
            optimizer.step(&mut net);
            acc.add(&out.components, out.total);
        }

        let test_f1 = match test_set {
            Some(ts) => {
                let logits = predict(&net, ts, cfg.eval_batch_size)?;
                weighted_f1(&argmax_rows(&logits), &ts.true_labels, n_classes).ok()
            }
            None => None,
        };
        let sizes = selection.as_ref().map(|s| s.partition.sizes());
        history.push(EpochRecord {
            epoch,
            phase,
            lambda_unce: lam_unce,
            l_ce: acc.mean(0),
            l_enc: acc.mean(1),
            l_aug: acc.mean(2),
            l_unce: acc.mean(3),
            total: acc.total / acc.batches.max(1) as f64,
            n_certain: sizes.map(|s| s.0),
            n_uncertain: sizes.map(|s| s.1),
            n_hard: sizes.map(|s| s.2),
            n_aug: aug_set.len(),
            train_f1,
            test_f1,
            certain_purity: quality.0,
            hard_noise_recall: quality.1,
        });
        if cfg.keep_selections {
            if let Some(sel) = selection {
                selections.push((epoch, sel));
            }
        }
    }
    Ok(TrainOutput {
        model: net,
        history,
        selections,
    })
}
