//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero on any failure that is not listed in `KNOWN_UNATTAINABLE`.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tsnl_core::data::synth_dataset;
use tsnl_core::eval::{read_history, run_baseline_vanilla, run_cv, CvPlan, RunConfig, RunReport};
use tsnl_core::model::{EncoderConfig, EncoderVariant, LocalGlobalNet};
use tsnl_core::noise::inject_symmetric;
use tsnl_core::rng::rng_from;
use tsnl_core::select::{
    fit_bmm, normalize_losses_per_class, partition, Component, MixtureFit, SampleSet, NORMALIZE_EPS,
};
use tsnl_core::train::loss::{batch_objective, ObjectiveWeights, RowTarget};
use tsnl_core::train::{corrected_target, lambda_unce, one_hot, softmax, Phase, TrainConfig};
use tsnl_core::{NoiseKind, NoiseSpec};

// Tolerances and thresholds.
const MIX_MEAN_TOL: f64 = 0.05;
const MIX_WEIGHT_TOL: f64 = 0.07;
const MIX_MIN_SEEDS: usize = 9;
const MIX_MAX_RUNTIME: Duration = Duration::from_secs(5);
const PARTITION_FIXTURES: usize = 100;
const MIDPOINT_TOL: f64 = 0.0;
const ONSET_TOL: f64 = 1e-9;
const LIMIT_TOL: f64 = 1e-4;
const LIMIT_OFFSET: usize = 100;
const PROB_SUM_TOL: f64 = 1e-12;
const NOISE_N: usize = 5000;
const NOISE_SD: f64 = 3.0;
const CHI_P_MIN: f64 = 0.01;
const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;
const GAP_MIN: f64 = 0.03;
const TREND_MAX_RUNTIME: Duration = Duration::from_secs(15 * 60);
const PURITY_BASE: f64 = 0.6;
const PURITY_MARGIN: f64 = 0.1;

/// Criteria whose stated bound cannot hold for the stated formula and
/// constants. They still print FAIL; the process exits zero only if the
/// measured miss equals the analytic one.
const KNOWN_UNATTAINABLE: &[u32] = &[3];

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
    /// For a known-unattainable criterion: whether the miss is exactly the
    /// predicted one.
    explained: bool,
}

fn judge(ok: bool, detail: String) -> Outcome {
    Outcome { pass: ok, detail, explained: false }
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "mixture recovery", c1_mixture_recovery),
        (2, "partition vs brute force", c2_partition),
        (3, "schedule arithmetic", c3_schedule),
        (4, "correction rule", c4_correction),
        (5, "noise statistics", c5_noise),
        (6, "gradient check", c6_gradient),
        (7, "robustness trend", c7_trend),
        (8, "selection quality", c8_selection),
        (9, "ablation wiring", c9_ablations),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        let started = Instant::now();
        let o = run();
        println!(
            "criterion {id} ({name}): {} [{:.1}s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass && !(KNOWN_UNATTAINABLE.contains(&id) && o.explained) {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

fn c1_mixture_recovery() -> Outcome {
    let started = Instant::now();
    let clean = Beta::new(2.0, 8.0).unwrap();
    let noisy = Beta::new(8.0, 2.0).unwrap();
    let mut hits = 0;
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let mut rng = rng_from(seed, &[]);
        let xs: Vec<f64> = (0..2000)
            .map(|_| {
                let v: f64 = if rng.random::<f64>() < 0.6 { clean.sample(&mut rng) } else { noisy.sample(&mut rng) };
                v.clamp(1e-6, 1.0 - 1e-6)
            })
            .collect();
        let fit = fit_bmm(&xs).unwrap();
        let [mc, mn] = fit.component_means();
        let dm = (mc - 0.2).abs().max((mn - 0.8).abs());
        let dw = (fit.weights[MixtureFit::CLEAN] - 0.6).abs();
        worst = (worst.0.max(dm), worst.1.max(dw));
        hits += usize::from(dm <= MIX_MEAN_TOL && dw <= MIX_WEIGHT_TOL);
    }
    let elapsed = started.elapsed();
    judge(
        hits >= MIX_MIN_SEEDS && elapsed < MIX_MAX_RUNTIME,
        format!(
            "{hits}/10 seeds within tolerance (worst mean error {:.4}, worst weight error {:.4}); {:.2}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

/// Threshold rule re-derived from raw losses without library normalisation.
fn brute_force(losses: &[f64], labels: &[usize], fits: &[(usize, MixtureFit)]) -> Vec<SampleSet> {
    (0..losses.len())
        .map(|i| {
            let y = labels[i];
            let Some((_, fit)) = fits.iter().find(|(c, _)| *c == y) else {
                return SampleSet::Certain;
            };
            let members: Vec<f64> = (0..losses.len()).filter(|&j| labels[j] == y).map(|j| losses[j]).collect();
            let n = members.len() as f64;
            let mean = members.iter().sum::<f64>() / n;
            let sd = (members.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
            let z = |l: f64| (l - mean) / sd;
            let v = match fit.components[0] {
                Component::Gaussian { .. } => z(losses[i]),
                Component::Beta { .. } => {
                    let lo = members.iter().map(|&l| z(l)).fold(f64::INFINITY, f64::min);
                    let hi = members.iter().map(|&l| z(l)).fold(f64::NEG_INFINITY, f64::max);
                    NORMALIZE_EPS + (z(losses[i]) - lo) / (hi - lo) * (1.0 - 2.0 * NORMALIZE_EPS)
                }
            };
            if v <= fit.clean_mean() {
                SampleSet::Certain
            } else if v >= fit.noisy_mean() {
                SampleSet::Hard
            } else {
                SampleSet::Uncertain
            }
        })
        .collect()
}

fn random_fit(rng: &mut impl rand::Rng, gaussian: bool) -> MixtureFit {
    let components = if gaussian {
        let a = rng.random_range(-1.5..0.5);
        let b = a + rng.random_range(0.1..2.0);
        [
            Component::Gaussian { mean: a, variance: rng.random_range(0.1..1.0) },
            Component::Gaussian { mean: b, variance: rng.random_range(0.1..1.0) },
        ]
    } else {
        let m1: f64 = rng.random_range(0.05..0.6);
        let m2 = (m1 + rng.random_range(0.05..0.5)).min(0.97);
        let (s1, s2) = (rng.random_range(2.0..20.0), rng.random_range(2.0..20.0));
        [
            Component::Beta { alpha: m1 * s1, beta: (1.0 - m1) * s1 },
            Component::Beta { alpha: m2 * s2, beta: (1.0 - m2) * s2 },
        ]
    };
    let w = rng.random_range(0.2..0.8);
    MixtureFit {
        weights: [w, 1.0 - w],
        components,
        n_iterations: 0,
        converged: true,
        likelihood_guard_tripped: false,
        log_likelihood: 0.0,
    }
}

fn c2_partition() -> Outcome {
    let mut rng = rng_from(7, &[2]);
    let mut mismatches = Vec::new();
    for fixture in 0..PARTITION_FIXTURES {
        let n = rng.random_range(8..80);
        let n_classes = rng.random_range(2..5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
        let losses: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-9).ln() * 2.0).collect();
        let stats = normalize_losses_per_class(&losses, &labels, n_classes, NORMALIZE_EPS);
        let mut fits = Vec::new();
        let slots: Vec<Option<MixtureFit>> = stats
            .iter()
            .map(|s| {
                let fit = (!s.degenerate).then(|| random_fit(&mut rng, fixture % 2 == 1));
                if let Some(f) = &fit {
                    fits.push((s.class, f.clone()));
                }
                fit
            })
            .collect();
        let got = partition(&stats, &slots, n);
        let want = brute_force(&losses, &labels, &fits);
        let pick = |s: SampleSet| -> Vec<usize> { (0..n).filter(|&i| want[i] == s).collect() };
        if got.certain_ids != pick(SampleSet::Certain)
            || got.uncertain_ids != pick(SampleSet::Uncertain)
            || got.hard_ids != pick(SampleSet::Hard)
        {
            mismatches.push(fixture);
        }
    }
    judge(
        mismatches.is_empty(),
        format!("{}/{PARTITION_FIXTURES} fixtures identical (Beta and Gaussian fits alternate); mismatches {mismatches:?}", PARTITION_FIXTURES - mismatches.len()),
    )
}

fn c3_schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let t_corr = cfg.t_corr;
    let mid = lambda_unce(t_corr + cfg.t_temp as usize, &cfg);
    let onset = lambda_unce(t_corr, &cfg);
    let onset_want = 1.0 / (1.0 + std::f64::consts::E);
    let gap = cfg.eps_maxcorr - lambda_unce(t_corr + LIMIT_OFFSET, &cfg);
    // exp(-(k * LIMIT_OFFSET - k * T_temp)) / (1 + ...) in closed form.
    let e = (-(cfg.k * (LIMIT_OFFSET as f64 - cfg.t_temp))).exp();
    let gap_analytic = cfg.eps_maxcorr * e / (1.0 + e);
    let first_within = (t_corr..)
        .find(|&n| cfg.eps_maxcorr - lambda_unce(n, &cfg) <= LIMIT_TOL)
        .unwrap();

    let mid_ok = (mid - 0.5).abs() <= MIDPOINT_TOL;
    let onset_ok = (onset - onset_want).abs() <= ONSET_TOL;
    let limit_ok = gap <= LIMIT_TOL;
    let explained = mid_ok && onset_ok && !limit_ok && (gap - gap_analytic).abs() <= 1e-15;
    Outcome {
        pass: mid_ok && onset_ok && limit_ok,
        detail: format!(
            "midpoint {mid} ({}); onset {onset:.12} vs 1/(1+e) ({}); gap at T_corr+{LIMIT_OFFSET} = {gap:.6e} vs bound {LIMIT_TOL:e} ({}): \
             with k={}, T_temp={} the gap is e^-{x}/(1+e^-{x}) = {gap_analytic:.6e}, first epoch within bound is T_corr+{}",
            ok_str(mid_ok),
            ok_str(onset_ok),
            ok_str(limit_ok),
            cfg.k,
            cfg.t_temp,
            first_within - t_corr,
            x = cfg.k * (LIMIT_OFFSET as f64 - cfg.t_temp)
        ),
        explained,
    }
}

fn ok_str(b: bool) -> &'static str {
    if b { "ok" } else { "miss" }
}

fn c4_correction() -> Outcome {
    let mut rng = rng_from(4, &[]);
    let c = 4;
    let mut worst_sum: f64 = 0.0;
    let mut endpoints_exact = true;
    let mut nonneg = true;
    for _ in 0..50 {
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let pred = softmax(&logits);
        let label = rng.random_range(0..c);
        let noisy = one_hot(label, c);
        for p in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let h = corrected_target(p, &noisy, &pred).unwrap();
            nonneg &= h.iter().all(|&v| v >= 0.0);
            worst_sum = worst_sum.max((h.iter().sum::<f64>() - 1.0).abs());
            if p == 1.0 {
                endpoints_exact &= h == noisy;
            }
            if p == 0.0 {
                endpoints_exact &= h == pred;
            }
        }
    }
    judge(
        nonneg && worst_sum <= PROB_SUM_TOL && endpoints_exact,
        format!("250 targets non-negative: {nonneg}; worst |sum-1| {worst_sum:.1e}; endpoints exact: {endpoints_exact}"),
    )
}

fn c5_noise() -> Outcome {
    let n_classes = 5;
    let ds = synth_dataset(NOISE_N / n_classes, n_classes, 4, 1, 3).unwrap();
    let n = ds.len() as f64;
    let chi = ChiSquared::new((n_classes - 2) as f64).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for tau in [0.1, 0.4] {
        let (noisy, mask) = inject_symmetric(&ds, tau, 77).unwrap();
        let rate = mask.rate();
        let z = (rate - tau) / (tau * (1.0 - tau) / n).sqrt();
        let mut counts = vec![0.0; n_classes - 1];
        for i in 0..ds.len() {
            if mask.flipped[i] {
                counts[(noisy.noisy_labels[i] + n_classes - ds.true_labels[i]) % n_classes - 1] += 1.0;
            }
        }
        let expected = counts.iter().sum::<f64>() / counts.len() as f64;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - chi.cdf(stat);
        ok &= z.abs() <= NOISE_SD && p > CHI_P_MIN;
        parts.push(format!("tau {tau}: rate {rate:.4} ({z:+.2} sd), chi-square p {p:.3}"));
    }
    judge(ok, format!("N={}; {}", ds.len(), parts.join("; ")))
}

struct GradProblem {
    x: Array3<f64>,
    targets: Vec<RowTarget>,
    weights: ObjectiveWeights,
}

impl GradProblem {
    fn loss(&self, net: &LocalGlobalNet<f64>) -> f64 {
        let n = self.x.dim().0;
        let fwd = net.forward(&self.x, n, None).unwrap();
        batch_objective(&fwd.logits, &self.targets, Some((&self.x, fwd.reconstruction.as_ref().unwrap())), &self.weights)
            .unwrap()
            .total
    }

    /// Worst norm-relative error over parameter tensors.
    fn worst_error(&self, net: &mut LocalGlobalNet<f64>) -> f64 {
        net.zero_grad();
        let n = self.x.dim().0;
        let fwd = net.forward(&self.x, n, None).unwrap();
        let out = batch_objective(&fwd.logits, &self.targets, Some((&self.x, fwd.reconstruction.as_ref().unwrap())), &self.weights).unwrap();
        net.backward(&fwd, &out.d_logits, out.d_recon.as_ref()).unwrap();
        let mut analytic = Vec::new();
        net.visit_params(&mut |_, _, g| analytic.push(g.to_vec()));

        let mut worst: f64 = 0.0;
        for (group, a) in analytic.iter().enumerate() {
            let mut numeric = Vec::with_capacity(a.len());
            for i in 0..a.len() {
                nudge(net, group, i, FD_STEP);
                let up = self.loss(net);
                nudge(net, group, i, -2.0 * FD_STEP);
                let down = self.loss(net);
                nudge(net, group, i, FD_STEP);
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
            let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
            let diff = norm(&mut a.iter().zip(&numeric).map(|(a, n)| a - n));
            let scale = norm(&mut a.iter().copied()) + norm(&mut numeric.iter().copied());
            worst = worst.max(if scale < 1e-10 { diff } else { diff / scale });
        }
        worst
    }
}

fn nudge(net: &mut LocalGlobalNet<f64>, group: usize, index: usize, delta: f64) {
    let mut g = 0;
    net.visit_params(&mut |_, v, _| {
        if g == group {
            v[index] += delta;
        }
        g += 1;
    });
}

fn c6_gradient() -> Outcome {
    let config = EncoderConfig {
        conv_channels: vec![4, 8],
        kernel_size: 3,
        d_model: 8,
        n_heads: 2,
        dropout: 0.0,
        variant: EncoderVariant::LocalGlobal,
    };
    let mut net = LocalGlobalNet::<f64>::new(config, 2, 3, &mut rng_from(5, &[])).unwrap();
    let mut rng = rng_from(6, &[]);
    let x = Array3::from_shape_fn((2, 6, 2), |_| rng.random_range(-1.5..1.5));
    let weights = ObjectiveWeights { lambda_enc: Some(1.0), lambda_aug: Some(1.0), lambda_unce: Some(0.7) };
    // Both samples feed the reconstruction term; between the two batches
    // every classification row kind is exercised.
    let batches = [
        vec![RowTarget::Label(1), RowTarget::Soft(vec![0.6, 0.3, 0.1])],
        vec![RowTarget::Soft(vec![0.2, 0.2, 0.6]), RowTarget::Augmented(0)],
    ];
    let errors: Vec<f64> = batches
        .into_iter()
        .map(|targets| GradProblem { x: x.clone(), targets, weights }.worst_error(&mut net))
        .collect();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let per_batch: Vec<String> = errors.iter().map(|e| format!("{e:.2e}")).collect();
    judge(
        worst < FD_TOL,
        format!("worst relative error {worst:.2e} (per batch {}); step {FD_STEP:e}, f64", per_batch.join(", ")),
    )
}

/// Shared run for criteria 7 and 8.
struct Trend {
    actll: Result<RunReport, String>,
    vanilla: Result<RunReport, String>,
    elapsed: Duration,
}

fn trend() -> &'static Trend {
    static TREND: OnceLock<Trend> = OnceLock::new();
    TREND.get_or_init(|| {
        let started = Instant::now();
        let ds = synth_dataset(200, 3, 50, 1, 0).expect("benchmark");
        // Schedule rescaled from 300 epochs to 120; k * T_temp kept at 1.
        let train = TrainConfig {
            max_epochs: 120,
            t_warmup: 15,
            t_corr: 80,
            t_temp: 4.0,
            k: 0.25,
            learning_rate: 2.5e-3,
            ..TrainConfig::default()
        };
        let config = RunConfig {
            noise: Some(NoiseSpec::new(NoiseKind::Symmetric, 0.4, 0).unwrap()),
            plan: CvPlan { k: 5, seeds: vec![0, 1, 2], folds: vec![0] },
            train,
            ..RunConfig::default()
        };
        let actll = run_cv(&ds, &config, None).map_err(|e| e.to_string());
        let vanilla = run_baseline_vanilla(&ds, &config, None).map_err(|e| e.to_string());
        Trend { actll, vanilla, elapsed: started.elapsed() }
    })
}

fn scores(r: &RunReport) -> String {
    r.folds.iter().map(|f| format!("{:.3}", f.test_f1)).collect::<Vec<_>>().join("/")
}

fn c7_trend() -> Outcome {
    let t = trend();
    let (a, v) = match (&t.actll, &t.vanilla) {
        (Ok(a), Ok(v)) => (a, v),
        (a, v) => return judge(false, format!("run failed: actll {:?}, vanilla {:?}", a.as_ref().err(), v.as_ref().err())),
    };
    let gap = a.mean_f1 - v.mean_f1;
    judge(
        gap >= GAP_MIN && t.elapsed < TREND_MAX_RUNTIME,
        format!(
            "sym 40%, 3 seeds: ACTLL {:.3} ({}) vs vanilla {:.3} ({}), gap {gap:+.3} (need >= {GAP_MIN}); both methods {:.0}s",
            a.mean_f1,
            scores(a),
            v.mean_f1,
            scores(v),
            t.elapsed.as_secs_f64()
        ),
    )
}

fn c8_selection() -> Outcome {
    let Ok(a) = &trend().actll else {
        return judge(false, "run failed".into());
    };
    let per_seed: Vec<f64> = a.folds.iter().filter_map(|f| f.certain_purity).collect();
    if per_seed.len() != a.folds.len() {
        return judge(false, "purity missing for some seeds".into());
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    judge(
        mean >= PURITY_BASE + PURITY_MARGIN,
        format!(
            "mean certain-set purity over selection epochs {mean:.3} (per seed {per_seed:.3?}) vs base rate {PURITY_BASE} + {PURITY_MARGIN}"
        ),
    )
}

fn c9_ablations() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let bin = env!("CARGO_BIN_EXE_tsnl");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).current_dir(root).args(args).output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
        }
    };
    if let Err(e) = run(&["synth", "--classes", "3", "--per-class", "200", "--length", "50", "--features", "1", "--seed", "0", "--out", "bench"]) {
        return judge(false, format!("synth failed: {e}"));
    }
    let common = [
        "train", "--data", "bench", "--noise", "sym", "--tau", "0.4", "--epochs", "8", "--t-warmup", "2",
        "--t-corr", "5", "--t-temp", "1", "--folds", "5", "--fold", "0",
    ];
    let variants: [(&str, &[&str], bool, bool); 6] = [
        ("default", &[], true, true),
        ("no-aug", &["--no-aug"], false, true),
        ("no-corr", &["--no-corr"], true, false),
        ("gmm", &["--selector", "gmm"], true, true),
        ("sloss", &["--selector", "sloss"], true, true),
        ("cnn", &["--encoder", "cnn"], true, true),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, extra, aug, corr) in variants {
        let out_dir = format!("runs/{name}");
        let mut args: Vec<&str> = common.to_vec();
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", &out_dir]);
        if let Err(e) = run(&args) {
            ok = false;
            parts.push(format!("{name}: failed ({e})"));
            continue;
        }
        match check_terms(&root.join(&out_dir).join("seed_0/fold_0/history.csv"), aug, corr) {
            Ok(()) => parts.push(format!("{name}: ok")),
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    judge(ok, parts.join(", "))
}

/// Each term is present in an epoch exactly when the configuration and the
/// phase permit it.
fn check_terms(history: &Path, aug: bool, corr: bool) -> Result<(), String> {
    let rows = read_history(history).map_err(|e| e.to_string())?;
    if rows.is_empty() {
        return Err("empty history".into());
    }
    for r in &rows {
        let selecting = matches!(r.phase, Phase::Select | Phase::Correct);
        let expect = [
            ("L_ce", r.l_ce, true),
            ("L_enc", r.l_enc, true),
            ("L_aug", r.l_aug, aug && selecting),
            ("L_unce", r.l_unce, corr && r.phase == Phase::Correct),
        ];
        for (term, value, permitted) in expect {
            if value.is_some() != permitted {
                return Err(format!("epoch {}: {term} present={} expected={permitted}", r.epoch, value.is_some()));
            }
        }
    }
    if !rows.iter().any(|r| r.phase == Phase::Correct) {
        return Err("correction phase never reached".into());
    }
    Ok(())
}
