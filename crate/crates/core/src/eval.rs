//! Metrics, cross-validation orchestration and report emission.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{kfold_split, DataError, TimeSeriesDataset};
use crate::model::save_checkpoint;
use crate::noise::{inject, FlipMask, NoiseError, NoiseReport, NoiseSpec};
use crate::rng::derive_seed;
use crate::select::SamplePartition;
use crate::train::{train, EpochRecord, Method, Phase, TrainConfig, TrainError};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric needs at least one prediction")]
    EmptyInput,
    #[error("predictions ({0}) and truths ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error("label {label} outside 0..{n_classes}")]
    LabelRange { label: usize, n_classes: usize },
    #[error("invalid evaluation plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Support-weighted mean of per-class F1. A class with no predicted and no
/// actual members scores 0 and has weight 0.
pub fn weighted_f1(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<f64, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), truths.len()));
    }
    if truths.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        for label in [p, t] {
            if label >= n_classes {
                return Err(EvalError::LabelRange { label, n_classes });
            }
        }
        predicted[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let n = truths.len() as f64;
    let score = (0..n_classes)
        .filter(|&c| actual[c] > 0)
        .map(|c| {
            let f1 = 2.0 * tp[c] as f64 / (predicted[c] + actual[c]) as f64;
            f1 * actual[c] as f64 / n
        })
        .sum();
    Ok(score)
}

/// Selection quality against the known flips. Either metric is `None` when
/// its denominator set is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionQuality {
    /// Fraction of the certain set whose label is unflipped.
    pub certain_purity: Option<f64>,
    /// Fraction of all flipped samples that landed in the hard set.
    pub hard_noise_recall: Option<f64>,
}

pub fn selection_metrics(partition: &SamplePartition, mask: &FlipMask) -> SelectionQuality {
    let flipped = |i: &&usize| mask.flipped[**i];
    let certain_purity = (!partition.certain_ids.is_empty()).then(|| {
        let clean = partition.certain_ids.len() - partition.certain_ids.iter().filter(flipped).count();
        clean as f64 / partition.certain_ids.len() as f64
    });
    let n_flipped = mask.flipped.iter().filter(|&&f| f).count();
    let hard_noise_recall = (n_flipped > 0).then(|| {
        partition.hard_ids.iter().filter(flipped).count() as f64 / n_flipped as f64
    });
    SelectionQuality {
        certain_purity,
        hard_noise_recall,
    }
}

/// Which folds and seeds to run. Each seed draws its own stratified split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Fold indices to run; empty means all `k`.
    pub folds: Vec<usize>,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            k: 5,
            seeds: vec![0],
            folds: Vec::new(),
        }
    }
}

impl CvPlan {
    fn fold_indices(&self) -> Result<Vec<usize>, EvalError> {
        if self.seeds.is_empty() {
            return Err(EvalError::Plan("at least one seed is required".into()));
        }
        if self.folds.is_empty() {
            return Ok((0..self.k).collect());
        }
        if let Some(&f) = self.folds.iter().find(|&&f| f >= self.k) {
            return Err(EvalError::Plan(format!("fold {f} out of range for k = {}", self.k)));
        }
        Ok(self.folds.clone())
    }
}

/// Everything needed to reproduce a run. Written as `config.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset directory, when the run was started from one.
    pub dataset: Option<PathBuf>,
    /// Noise injected into each training fold. `None` trains on the
    /// dataset's observed labels as loaded.
    pub noise: Option<NoiseSpec>,
    pub plan: CvPlan,
    pub train: TrainConfig,
    /// Written for readers; ignored on input.
    #[serde(skip_deserializing)]
    pub deviation_notes: Vec<String>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: Self = serde_json::from_str(&text).map_err(|e| EvalError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.deviation_notes = config.train.deviation_notes();
        Ok(config)
    }

    pub fn noise_label(&self) -> String {
        self.noise.map_or_else(|| "observed".to_string(), |n| n.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub seed: u64,
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Final-epoch weighted F1 on the held-out fold's true labels.
    pub test_f1: f64,
    pub noise: Option<NoiseReport>,
    /// Mean over selection epochs; absent when never defined.
    pub certain_purity: Option<f64>,
    pub hard_noise_recall: Option<f64>,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub noise_label: String,
    pub folds: Vec<FoldResult>,
    pub mean_f1: f64,
    /// Sample standard deviation (n - 1); 0 for a single fold.
    pub std_f1: f64,
    pub certain_purity: Option<f64>,
    pub hard_noise_recall: Option<f64>,
    pub config: RunConfig,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn mean_of_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn method_name(method: Method) -> &'static str {
    match method {
        Method::Actll => "ACTLL",
        Method::Vanilla => "Vanilla",
    }
}

/// Cross-validated training. For every seed and selected fold, noise (if
/// any) is injected into the training split only, the model is trained for
/// the full schedule, and the final model is scored on the held-out split's
/// true labels. With `out_dir`, writes `config.json`, `report.json`,
/// `report.md` and per-fold `seed_<s>/fold_<f>/` directories.
pub fn run_cv(
    ds: &TimeSeriesDataset,
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<RunReport, EvalError> {
    let folds_to_run = config.plan.fold_indices()?;
    let mut config = config.clone();
    config.deviation_notes = config.train.deviation_notes();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join(CONFIG_FILE), &config)?;
    }

    let mut results = Vec::new();
    for &seed in &config.plan.seeds {
        let splits = kfold_split(ds, config.plan.k, seed)?;
        for &f in &folds_to_run {
            let split = &splits[f];
            let test = ds.subset(&split.test);
            let clean_train = ds.subset(&split.train);
            let (train_set, noise_report) = match &config.noise {
                Some(spec) => {
                    let fold_spec = NoiseSpec {
                        seed: derive_seed(spec.seed, &[seed, f as u64]),
                        ..*spec
                    };
                    let (noisy, _, report) = inject(&clean_train, &fold_spec)?;
                    (noisy, Some(report))
                }
                None => (clean_train, None),
            };
            assert_eq!(
                test.noisy_labels,
                ds.subset(&split.test).noisy_labels,
                "held-out labels must not be touched by injection"
            );
            // Diagnostics only where labels can be wrong; a clean run would
            // report a trivial purity of 1.
            let mask = (config.noise.is_some() || train_set.noisy_labels != train_set.true_labels)
                .then(|| FlipMask::of(&train_set));
            let train_cfg = TrainConfig {
                seed: derive_seed(seed, &[f as u64]),
                ..config.train.clone()
            };
            let mut output = train(&train_set, Some(&test), mask.as_ref(), &train_cfg)?;
            let last = output.history.last().expect("at least one epoch");
            let test_f1 = last.test_f1.expect("test set supplied");
            let selecting = |r: &&EpochRecord| matches!(r.phase, Phase::Select | Phase::Correct);
            let result = FoldResult {
                seed,
                fold: f,
                train_size: train_set.len(),
                test_size: test.len(),
                test_f1,
                noise: noise_report,
                certain_purity: mean_of_present(
                    output.history.iter().filter(selecting).map(|r| r.certain_purity),
                ),
                hard_noise_recall: mean_of_present(
                    output.history.iter().filter(selecting).map(|r| r.hard_noise_recall),
                ),
                history: output.history.clone(),
            };
            if let Some(dir) = out_dir {
                let fold_dir = dir.join(format!("seed_{seed}")).join(format!("fold_{f}"));
                fs::create_dir_all(&fold_dir).map_err(io_err(&fold_dir))?;
                write_history(&fold_dir.join(HISTORY_FILE), &output.history)?;
                save_checkpoint(&mut output.model, fold_dir.join(CHECKPOINT_FILE))
                    .map_err(TrainError::from)?;
                if let Some(r) = &result.noise {
                    r.write(&fold_dir)?;
                }
                for (epoch, sel) in &output.selections {
                    write_json(&fold_dir.join(format!("selection_epoch_{epoch}.json")), sel)?;
                }
            }
            results.push(result);
        }
    }

    let scores: Vec<f64> = results.iter().map(|r| r.test_f1).collect();
    let (mean_f1, std_f1) = mean_std(&scores);
    let report = RunReport {
        method: config.train.method,
        noise_label: config.noise_label(),
        certain_purity: mean_of_present(results.iter().map(|r| r.certain_purity)),
        hard_noise_recall: mean_of_present(results.iter().map(|r| r.hard_noise_recall)),
        folds: results,
        mean_f1,
        std_f1,
        config,
    };
    if let Some(dir) = out_dir {
        write_report(dir, &report)?;
    }
    Ok(report)
}

/// `run_cv` with the plain cross-entropy CNN baseline.
pub fn run_baseline_vanilla(
    ds: &TimeSeriesDataset,
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<RunReport, EvalError> {
    let config = RunConfig {
        train: config.train.vanilla(),
        ..config.clone()
    };
    run_cv(ds, &config, out_dir)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), EvalError> {
    let csv_err = |e: csv::Error| EvalError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in history {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>, EvalError> {
    let csv_err = |e: csv::Error| EvalError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn read_report(dir: &Path) -> Result<RunReport, EvalError> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut report: RunReport = serde_json::from_str(&text).map_err(|e| EvalError::Format {
        path,
        message: e.to_string(),
    })?;
    report.config.deviation_notes = report.config.train.deviation_notes();
    Ok(report)
}

fn write_report(dir: &Path, report: &RunReport) -> Result<(), EvalError> {
    write_json(&dir.join(REPORT_JSON), report)?;
    let path = dir.join(REPORT_MD);
    fs::write(&path, render_run_markdown(report)).map_err(io_err(&path))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

pub fn render_run_markdown(report: &RunReport) -> String {
    let mut md = format!(
        "# {} on {}\n\nWeighted F1: **{:.3}({:.3})** over {} fold run(s).\n\n",
        method_name(report.method),
        report.noise_label,
        report.mean_f1,
        report.std_f1,
        report.folds.len()
    );
    let with_quality = report.folds.iter().any(|f| f.certain_purity.is_some() || f.hard_noise_recall.is_some());
    if with_quality {
        md += "| seed | fold | test F1 | certain purity | hard noise recall |\n|---|---|---|---|---|\n";
    } else {
        md += "| seed | fold | test F1 |\n|---|---|---|\n";
    }
    for f in &report.folds {
        md += &format!("| {} | {} | {:.3} |", f.seed, f.fold, f.test_f1);
        if with_quality {
            md += &format!(" {} | {} |", fmt_opt(f.certain_purity), fmt_opt(f.hard_noise_recall));
        }
        md.push('\n');
    }
    if !report.config.deviation_notes.is_empty() {
        md += "\n## Notes\n\n";
        for n in &report.config.deviation_notes {
            md += &format!("- {n}\n");
        }
    }
    md
}

/// One cell of a noise-setting by method grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub noise_label: String,
    pub method: String,
    /// `Ok((mean, std))` or the failure message.
    pub result: Result<(f64, f64), String>,
}

/// Rows are noise settings in first-seen order, columns are methods; each
/// cell reads `mean(std)` or `ERR`.
pub fn render_sweep_table(cells: &[SweepCell]) -> String {
    let mut rows: Vec<&str> = Vec::new();
    let mut cols: Vec<&str> = Vec::new();
    for c in cells {
        if !rows.contains(&c.noise_label.as_str()) {
            rows.push(&c.noise_label);
        }
        if !cols.contains(&c.method.as_str()) {
            cols.push(&c.method);
        }
    }
    let mut md = format!("| noise | {} |\n|---|{}\n", cols.join(" | "), "---|".repeat(cols.len()));
    for row in rows {
        md += &format!("| {row} |");
        for col in &cols {
            let cell = cells
                .iter()
                .find(|c| c.noise_label == row && c.method == *col)
                .map_or_else(
                    || " |".to_string(),
                    |c| match &c.result {
                        Ok((m, s)) => format!(" {m:.3}({s:.3}) |"),
                        Err(_) => " ERR |".to_string(),
                    },
                );
            md += &cell;
        }
        md.push('\n');
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_inverted_predictions() {
        assert_eq!(weighted_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        assert_eq!(weighted_f1(&[0, 1], &[1, 0], 2).unwrap(), 0.0);
    }

    #[test]
    fn majority_predictor_score() {
        let truths: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let preds = vec![0; 100];
        let expected = 0.9 * (2.0 * 0.9 * 1.0 / 1.9);
        assert!((weighted_f1(&preds, &truths, 2).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_support_class_has_no_weight() {
        // Class 2 is never present nor predicted.
        assert_eq!(weighted_f1(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn bad_metric_inputs() {
        assert!(matches!(weighted_f1(&[], &[], 2), Err(EvalError::EmptyInput)));
        assert!(matches!(weighted_f1(&[0], &[0, 1], 2), Err(EvalError::LengthMismatch(1, 2))));
        assert!(matches!(weighted_f1(&[3], &[0], 2), Err(EvalError::LabelRange { .. })));
    }

    #[test]
    fn selection_metric_definitions() {
        let mask = FlipMask { flipped: vec![false, true, false, true, true] };
        let partition = SamplePartition {
            certain_ids: vec![0, 2],
            uncertain_ids: vec![1],
            hard_ids: vec![3, 4],
            p_clean: vec![1.0; 5],
        };
        let q = selection_metrics(&partition, &mask);
        assert_eq!(q.certain_purity, Some(1.0));
        assert_eq!(q.hard_noise_recall, Some(2.0 / 3.0));
    }

    #[test]
    fn empty_sets_report_absent_metrics() {
        let mask = FlipMask { flipped: vec![false; 3] };
        let partition = SamplePartition {
            certain_ids: vec![],
            uncertain_ids: vec![],
            hard_ids: vec![0, 1, 2],
            p_clean: vec![0.0; 3],
        };
        let q = selection_metrics(&partition, &mask);
        assert_eq!(q.certain_purity, None);
        assert_eq!(q.hard_noise_recall, None);
    }

    #[test]
    fn sample_standard_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn sweep_table_marks_failures() {
        let cells = vec![
            SweepCell { noise_label: "sym-10%".into(), method: "ACTLL".into(), result: Ok((0.8, 0.01)) },
            SweepCell { noise_label: "sym-10%".into(), method: "Vanilla".into(), result: Err("boom".into()) },
            SweepCell { noise_label: "idn-30%".into(), method: "ACTLL".into(), result: Ok((0.7, 0.02)) },
        ];
        let md = render_sweep_table(&cells);
        assert!(md.contains("| sym-10% | 0.800(0.010) | ERR |"));
        assert!(md.contains("| idn-30% | 0.700(0.020) | |"));
    }
}
