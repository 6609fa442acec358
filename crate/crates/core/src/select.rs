//! Per-class loss normalization, two-component mixture fitting by EM, the
//! clean posterior and the certain / uncertain / hard partition.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::model::Scalar;

/// Rescaled losses live in `[NORMALIZE_EPS, 1 - NORMALIZE_EPS]`.
pub const NORMALIZE_EPS: f64 = 1e-4;
pub const EM_MAX_ITERATIONS: usize = 50;
/// Stop once the mean absolute change in responsibilities drops below this.
pub const EM_TOLERANCE: f64 = 1e-4;
/// Allowed decrease of the observed-data log-likelihood per EM step.
pub const EM_LIKELIHOOD_SLACK: f64 = 1e-8;
pub const GAUSSIAN_VARIANCE_FLOOR: f64 = 1e-6;
const BETA_VARIANCE_FLOOR: f64 = 1e-8;
/// Classes with fewer members are not fitted.
pub const MIN_CLASS_MEMBERS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("mixture fitting needs at least {MIN_CLASS_MEMBERS} samples, got {0}")]
    TooFewSamples(usize),
    #[error("beta mixture needs values strictly inside (0, 1), got {0}")]
    OutOfSupport(f64),
    #[error("non-finite loss value {0}")]
    NonFinite(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    /// Per-class Beta mixture on rescaled losses.
    Bmm,
    /// Per-class Gaussian mixture on z-scored losses.
    Gmm,
    /// Single global small-loss threshold at the mean loss.
    Sloss,
}

/// `-log softmax(logits)[label]` per row, computed in f64 with the max
/// subtracted first.
pub fn per_sample_ce<S: Scalar>(logits: &Array2<S>, labels: &[usize]) -> Vec<f64> {
    assert_eq!(logits.nrows(), labels.len(), "one label per logit row");
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
            let arg = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            let max = row[arg];
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != arg)
                .map(|(_, v)| (v - max).exp())
                .sum();
            ((max - row[y]) + rest.ln_1p()).max(0.0)
        })
        .collect()
}

/// Loss statistics of the samples carrying one observed label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLossStats {
    pub class: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Indices into the loss vector, ascending.
    pub member_ids: Vec<usize>,
    pub raw_losses: Vec<f64>,
    /// `(l - mean) / std`; zero for a degenerate class.
    pub z_scores: Vec<f64>,
    /// z-scores min-max rescaled into `[eps, 1 - eps]`.
    pub normalized_losses: Vec<f64>,
    /// Zero spread or fewer than [`MIN_CLASS_MEMBERS`] members.
    pub degenerate: bool,
}

/// Groups losses by observed label, z-scores each class, then rescales each
/// class's z-scores onto `[eps, 1 - eps]`. Classes without members are
/// omitted.
pub fn normalize_losses_per_class(
    losses: &[f64],
    labels: &[usize],
    n_classes: usize,
    eps: f64,
) -> Vec<ClassLossStats> {
    assert_eq!(losses.len(), labels.len());
    let mut members = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(class, member_ids)| {
            let raw: Vec<f64> = member_ids.iter().map(|&i| losses[i]).collect();
            let n = raw.len() as f64;
            let mean = raw.iter().sum::<f64>() / n;
            let std = (raw.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
            let degenerate = std <= 0.0 || !std.is_finite() || raw.len() < MIN_CLASS_MEMBERS;
            let z: Vec<f64> = if std > 0.0 && std.is_finite() {
                raw.iter().map(|l| (l - mean) / std).collect()
            } else {
                vec![0.0; raw.len()]
            };
            let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let normalized = if hi > lo {
                z.iter()
                    .map(|v| eps + (v - lo) / (hi - lo) * (1.0 - 2.0 * eps))
                    .collect()
            } else {
                vec![0.5; z.len()]
            };
            ClassLossStats {
                class,
                mean,
                std,
                member_ids,
                raw_losses: raw,
                z_scores: z,
                normalized_losses: normalized,
                degenerate,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Component {
    Beta { alpha: f64, beta: f64 },
    Gaussian { mean: f64, variance: f64 },
}

impl Component {
    pub fn mean(&self) -> f64 {
        match *self {
            Component::Beta { alpha, beta } => alpha / (alpha + beta),
            Component::Gaussian { mean, .. } => mean,
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Component::Beta { alpha, beta } => {
                if x <= 0.0 || x >= 1.0 {
                    return f64::NEG_INFINITY;
                }
                let ln_b = ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta);
                (alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() - ln_b
            }
            Component::Gaussian { mean, variance } => {
                -0.5 * (2.0 * std::f64::consts::PI * variance).ln()
                    - (x - mean).powi(2) / (2.0 * variance)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Beta,
    Gaussian,
}

/// A fitted two-component mixture. Index 0 is the clean component and always
/// has the smaller mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub weights: [f64; 2],
    pub components: [Component; 2],
    pub n_iterations: usize,
    pub converged: bool,
    /// An EM step lowered the likelihood beyond the slack and was discarded.
    pub likelihood_guard_tripped: bool,
    pub log_likelihood: f64,
}

impl MixtureFit {
    pub const CLEAN: usize = 0;
    pub const NOISY: usize = 1;

    pub fn family(&self) -> Family {
        match self.components[0] {
            Component::Beta { .. } => Family::Beta,
            Component::Gaussian { .. } => Family::Gaussian,
        }
    }

    pub fn component_means(&self) -> [f64; 2] {
        [self.components[0].mean(), self.components[1].mean()]
    }

    pub fn clean_mean(&self) -> f64 {
        self.components[Self::CLEAN].mean()
    }

    pub fn noisy_mean(&self) -> f64 {
        self.components[Self::NOISY].mean()
    }

    fn weighted_ln_pdf(&self, j: usize, x: f64) -> f64 {
        self.weights[j].ln() + self.components[j].ln_pdf(x)
    }

    pub fn log_likelihood_of(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| log_add(self.weighted_ln_pdf(0, x), self.weighted_ln_pdf(1, x)))
            .sum()
    }

    fn ordered(mut self) -> Self {
        if self.components[0].mean() > self.components[1].mean() {
            self.weights.swap(0, 1);
            self.components.swap(0, 1);
        }
        self
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// Responsibility of the clean component at `value`:
/// `w_clean f_clean(v) / sum_j w_j f_j(v)`, or 0.5 when both weighted
/// densities vanish.
pub fn posterior_clean(value: f64, fit: &MixtureFit) -> f64 {
    let lc = fit.weighted_ln_pdf(MixtureFit::CLEAN, value);
    let ln = fit.weighted_ln_pdf(MixtureFit::NOISY, value);
    match (lc == f64::NEG_INFINITY || lc.is_nan(), ln == f64::NEG_INFINITY || ln.is_nan()) {
        (true, true) => 0.5,
        (false, true) => 1.0,
        (true, false) => 0.0,
        (false, false) => 1.0 / (1.0 + (ln - lc).exp()),
    }
}

fn responsibilities(fit: &MixtureFit, xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| posterior_clean(x, fit)).collect()
}

fn weighted_moments(xs: &[f64], w: &[f64]) -> Option<(f64, f64, f64)> {
    let total: f64 = w.iter().sum();
    if total <= 1e-12 {
        return None;
    }
    let mean = xs.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / total;
    let var = xs
        .iter()
        .zip(w)
        .map(|(x, w)| w * (x - mean).powi(2))
        .sum::<f64>()
        / total;
    Some((total, mean, var))
}

fn beta_from_moments(mean: f64, var: f64) -> Component {
    let mean = mean.clamp(1e-6, 1.0 - 1e-6);
    let cap = mean * (1.0 - mean);
    let var = var.clamp(BETA_VARIANCE_FLOOR, cap * (1.0 - 1e-6));
    let common = cap / var - 1.0;
    Component::Beta {
        alpha: mean * common,
        beta: (1.0 - mean) * common,
    }
}

/// M-step. A component with (numerically) no responsibility mass keeps its
/// previous parameters.
fn maximize(
    xs: &[f64],
    clean_resp: &[f64],
    family: Family,
    previous: Option<&MixtureFit>,
) -> MixtureFit {
    let noisy_resp: Vec<f64> = clean_resp.iter().map(|r| 1.0 - r).collect();
    let n = xs.len() as f64;
    let mut weights = [0.0; 2];
    let fallback = |j: usize| match (previous, family) {
        (Some(p), _) => p.components[j],
        (None, Family::Beta) => Component::Beta {
            alpha: 1.0,
            beta: 1.0,
        },
        (None, Family::Gaussian) => Component::Gaussian {
            mean: 0.0,
            variance: 1.0,
        },
    };
    let mut components = [fallback(0), fallback(1)];
    for (j, resp) in [clean_resp, noisy_resp.as_slice()].into_iter().enumerate() {
        let Some((total, mean, var)) = weighted_moments(xs, resp) else {
            weights[j] = 0.0;
            continue;
        };
        weights[j] = total / n;
        components[j] = match family {
            Family::Beta => beta_from_moments(mean, var),
            Family::Gaussian => Component::Gaussian {
                mean,
                variance: var.max(GAUSSIAN_VARIANCE_FLOOR),
            },
        };
    }
    let sum = weights[0] + weights[1];
    MixtureFit {
        weights: [weights[0] / sum, weights[1] / sum],
        components,
        n_iterations: 0,
        converged: false,
        likelihood_guard_tripped: false,
        log_likelihood: f64::NAN,
    }
}

fn fit_mixture(xs: &[f64], family: Family) -> Result<MixtureFit, SelectError> {
    if xs.len() < MIN_CLASS_MEMBERS {
        return Err(SelectError::TooFewSamples(xs.len()));
    }
    for &x in xs {
        if !x.is_finite() {
            return Err(SelectError::NonFinite(x));
        }
        if family == Family::Beta && (x <= 0.0 || x >= 1.0) {
            return Err(SelectError::OutOfSupport(x));
        }
    }
    // Lower half by value seeds the clean component.
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut resp = vec![0.0; xs.len()];
    for &i in &order[..xs.len() / 2] {
        resp[i] = 1.0;
    }
    let mut fit = maximize(xs, &resp, family, None);
    let mut ll = fit.log_likelihood_of(xs);
    let mut iterations = 0;
    let mut converged = false;
    let mut guard = false;
    for it in 1..=EM_MAX_ITERATIONS {
        iterations = it;
        let next = responsibilities(&fit, xs);
        let change = next
            .iter()
            .zip(&resp)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / xs.len() as f64;
        resp = next;
        let candidate = maximize(xs, &resp, family, Some(&fit));
        let candidate_ll = candidate.log_likelihood_of(xs);
        if !(candidate_ll >= ll - EM_LIKELIHOOD_SLACK) {
            guard = true;
            break;
        }
        fit = candidate;
        ll = candidate_ll;
        if change < EM_TOLERANCE {
            converged = true;
            break;
        }
    }
    fit.n_iterations = iterations;
    fit.converged = converged;
    fit.likelihood_guard_tripped = guard;
    fit.log_likelihood = ll;
    Ok(fit.ordered())
}

/// Two-component Beta mixture by EM with a responsibility-weighted
/// moment-matching M-step, median-split initialization, at most
/// [`EM_MAX_ITERATIONS`] iterations.
pub fn fit_bmm(normalized_losses: &[f64]) -> Result<MixtureFit, SelectError> {
    fit_mixture(normalized_losses, Family::Beta)
}

/// Two-component Gaussian mixture by EM on z-scored losses.
pub fn fit_gmm(z_scores: &[f64]) -> Result<MixtureFit, SelectError> {
    fit_mixture(z_scores, Family::Gaussian)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSet {
    Certain,
    Uncertain,
    Hard,
}

/// Three-way split of the training indices plus a clean posterior per
/// sample. Index lists are ascending and pairwise disjoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplePartition {
    pub certain_ids: Vec<usize>,
    pub uncertain_ids: Vec<usize>,
    pub hard_ids: Vec<usize>,
    pub p_clean: Vec<f64>,
}

impl SamplePartition {
    pub fn len(&self) -> usize {
        self.p_clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_clean.is_empty()
    }

    pub fn membership(&self) -> Vec<SampleSet> {
        let mut out = vec![SampleSet::Certain; self.len()];
        for &i in &self.uncertain_ids {
            out[i] = SampleSet::Uncertain;
        }
        for &i in &self.hard_ids {
            out[i] = SampleSet::Hard;
        }
        out
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (
            self.certain_ids.len(),
            self.uncertain_ids.len(),
            self.hard_ids.len(),
        )
    }
}

/// The value a fit of this family is compared against.
fn fit_value(stats: &ClassLossStats, k: usize, family: Family) -> f64 {
    match family {
        Family::Beta => stats.normalized_losses[k],
        Family::Gaussian => stats.z_scores[k],
    }
}

/// Threshold rule per class: certain if `v <= mean_clean`, hard if
/// `v >= mean_noisy`, uncertain otherwise. Classes with no fit (degenerate)
/// go entirely to the certain set with posterior 1.
pub fn partition(stats: &[ClassLossStats], fits: &[Option<MixtureFit>], n: usize) -> SamplePartition {
    assert_eq!(stats.len(), fits.len(), "one fit slot per class");
    let mut sets = vec![SampleSet::Certain; n];
    let mut p_clean = vec![1.0; n];
    for (s, fit) in stats.iter().zip(fits) {
        let Some(fit) = fit else { continue };
        let family = fit.family();
        let (mc, mn) = (fit.clean_mean(), fit.noisy_mean());
        for (k, &i) in s.member_ids.iter().enumerate() {
            let v = fit_value(s, k, family);
            p_clean[i] = posterior_clean(v, fit);
            sets[i] = if v <= mc {
                SampleSet::Certain
            } else if v >= mn {
                SampleSet::Hard
            } else {
                SampleSet::Uncertain
            };
        }
    }
    from_sets(&sets, p_clean)
}

fn from_sets(sets: &[SampleSet], p_clean: Vec<f64>) -> SamplePartition {
    let pick = |want: SampleSet| {
        sets.iter()
            .enumerate()
            .filter(|(_, &s)| s == want)
            .map(|(i, _)| i)
            .collect()
    };
    SamplePartition {
        certain_ids: pick(SampleSet::Certain),
        uncertain_ids: pick(SampleSet::Uncertain),
        hard_ids: pick(SampleSet::Hard),
        p_clean,
    }
}

/// Global small-loss rule: raw loss at or below the overall mean is certain,
/// above is hard; nothing is uncertain.
pub fn sloss_partition(stats: &[ClassLossStats]) -> SamplePartition {
    let n: usize = stats.iter().map(|s| s.member_ids.len()).sum();
    let total: f64 = stats.iter().flat_map(|s| &s.raw_losses).sum();
    let threshold = total / n.max(1) as f64;
    let mut sets = vec![SampleSet::Certain; n];
    let mut p_clean = vec![1.0; n];
    for s in stats {
        for (&i, &l) in s.member_ids.iter().zip(&s.raw_losses) {
            if l > threshold {
                sets[i] = SampleSet::Hard;
                p_clean[i] = 0.0;
            }
        }
    }
    from_sets(&sets, p_clean)
}

/// Diagnostics for one class in one selection round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class: usize,
    pub n_members: usize,
    pub degenerate: bool,
    pub fit: Option<MixtureFit>,
    pub n_certain: usize,
    pub n_uncertain: usize,
    pub n_hard: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selector: Selector,
    pub partition: SamplePartition,
    pub classes: Vec<ClassSelection>,
}

/// Runs one full selection round over per-sample losses.
pub fn select(losses: &[f64], labels: &[usize], n_classes: usize, selector: Selector) -> Selection {
    let stats = normalize_losses_per_class(losses, labels, n_classes, NORMALIZE_EPS);
    let fits: Vec<Option<MixtureFit>> = match selector {
        Selector::Sloss => vec![None; stats.len()],
        Selector::Bmm | Selector::Gmm => stats
            .iter()
            .map(|s| {
                if s.degenerate {
                    return None;
                }
                let fit = match selector {
                    Selector::Bmm => fit_bmm(&s.normalized_losses),
                    _ => fit_gmm(&s.z_scores),
                };
                fit.ok()
            })
            .collect(),
    };
    let partition = match selector {
        Selector::Sloss => sloss_partition(&stats),
        _ => partition(&stats, &fits, losses.len()),
    };
    let membership = partition.membership();
    let classes = stats
        .iter()
        .zip(fits)
        .map(|(s, fit)| {
            let count = |want| s.member_ids.iter().filter(|&&i| membership[i] == want).count();
            ClassSelection {
                class: s.class,
                n_members: s.member_ids.len(),
                degenerate: s.degenerate,
                fit,
                n_certain: count(SampleSet::Certain),
                n_uncertain: count(SampleSet::Uncertain),
                n_hard: count(SampleSet::Hard),
            }
        })
        .collect();
    Selection {
        selector,
        partition,
        classes,
    }
}
