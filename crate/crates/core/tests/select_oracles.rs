use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use tsnl_core::rng::rng_from;
use tsnl_core::select::{
    fit_bmm, fit_gmm, normalize_losses_per_class, partition, posterior_clean, select,
    Component, MixtureFit, SampleSet, Selector, MIN_CLASS_MEMBERS, NORMALIZE_EPS,
};

fn beta_mixture_draws(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed, &[]);
    let clean = Beta::new(2.0, 8.0).unwrap();
    let noisy = Beta::new(8.0, 2.0).unwrap();
    (0..n)
        .map(|_| {
            let v: f64 = if rng.random::<f64>() < 0.6 {
                clean.sample(&mut rng)
            } else {
                noisy.sample(&mut rng)
            };
            v.clamp(1e-6, 1.0 - 1e-6)
        })
        .collect()
}

#[test]
fn beta_mixture_parameter_recovery() {
    let mut hits = 0;
    for seed in 0..10 {
        let fit = fit_bmm(&beta_mixture_draws(2000, seed)).unwrap();
        let [mc, mn] = fit.component_means();
        let ok = (mc - 0.2).abs() <= 0.05
            && (mn - 0.8).abs() <= 0.05
            && (fit.weights[MixtureFit::CLEAN] - 0.6).abs() <= 0.07;
        hits += usize::from(ok);
    }
    assert!(hits >= 9, "recovered on {hits}/10 seeds");
}

#[test]
fn gaussian_mixture_recovers_separated_modes() {
    let mut rng = rng_from(4, &[]);
    let normal_lo = rand_distr::Normal::new(-2.0, 0.5).unwrap();
    let normal_hi = rand_distr::Normal::new(2.0, 0.5).unwrap();
    let xs: Vec<f64> = (0..1000)
        .map(|i| if i % 3 == 0 { normal_hi.sample(&mut rng) } else { normal_lo.sample(&mut rng) })
        .collect();
    let fit = fit_gmm(&xs).unwrap();
    let [lo, hi] = fit.component_means();
    assert!((lo + 2.0).abs() < 0.1 && (hi - 2.0).abs() < 0.1, "{lo} {hi}");
    assert!((fit.weights[0] - 2.0 / 3.0).abs() < 0.03);
}

#[test]
fn densities_match_reference_values() {
    // scipy.stats reference log-densities.
    let cases = [
        (Component::Beta { alpha: 2.0, beta: 8.0 }, 0.3, 0.575_968_707_118_993_2),
        (Component::Beta { alpha: 0.5, beta: 0.7 }, 0.01, 1.386_993_914_290_413_5),
        (Component::Beta { alpha: 8.0, beta: 2.0 }, 0.95, 0.921_880_784_749_211_2),
        (Component::Gaussian { mean: 0.5, variance: 2.0 }, -1.0, -1.828_012_123_484_645_4),
    ];
    for (c, x, want) in cases {
        assert!((c.ln_pdf(x) - want).abs() < 1e-12, "{c:?} at {x}");
    }
}

#[test]
fn em_never_lowers_likelihood_of_initial_split() {
    for seed in 0..5 {
        let xs = beta_mixture_draws(500, 100 + seed);
        let fit = fit_bmm(&xs).unwrap();
        assert!(fit.log_likelihood.is_finite());
        assert!((fit.log_likelihood - fit.log_likelihood_of(&xs)).abs() < 1e-6 * fit.log_likelihood.abs().max(1.0));
        assert!(fit.clean_mean() <= fit.noisy_mean());
    }
}

/// Straight re-derivation of the threshold rule from raw losses, sharing no
/// code with the library's normalisation.
fn brute_force_sets(losses: &[f64], labels: &[usize], fits: &[(usize, MixtureFit)]) -> Vec<SampleSet> {
    let mut out = Vec::with_capacity(losses.len());
    for i in 0..losses.len() {
        let y = labels[i];
        let members: Vec<f64> = (0..losses.len()).filter(|&j| labels[j] == y).map(|j| losses[j]).collect();
        let Some((_, fit)) = fits.iter().find(|(c, _)| *c == y) else {
            out.push(SampleSet::Certain);
            continue;
        };
        let n = members.len() as f64;
        let mean = members.iter().sum::<f64>() / n;
        let sd = (members.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n).sqrt();
        let z = |l: f64| (l - mean) / sd;
        let value = match fit.components[0] {
            Component::Gaussian { .. } => z(losses[i]),
            Component::Beta { .. } => {
                let lo = members.iter().map(|&l| z(l)).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|&l| z(l)).fold(f64::NEG_INFINITY, f64::max);
                NORMALIZE_EPS + (z(losses[i]) - lo) / (hi - lo) * (1.0 - 2.0 * NORMALIZE_EPS)
            }
        };
        out.push(if value <= fit.clean_mean() {
            SampleSet::Certain
        } else if value >= fit.noisy_mean() {
            SampleSet::Hard
        } else {
            SampleSet::Uncertain
        });
    }
    out
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
        let s1 = rng.random_range(2.0..20.0);
        let s2 = rng.random_range(2.0..20.0);
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

#[test]
fn partition_matches_brute_force_on_random_fixtures() {
    let mut rng = rng_from(2024, &[]);
    for fixture in 0..100 {
        let n = rng.random_range(8..80);
        let n_classes = rng.random_range(2..5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
        let losses: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-9).ln() * 2.0).collect();
        let gaussian = fixture % 2 == 1;
        let stats = normalize_losses_per_class(&losses, &labels, n_classes, NORMALIZE_EPS);
        let mut fits = Vec::new();
        let mut fit_slots = Vec::new();
        for s in &stats {
            let fit = (!s.degenerate).then(|| random_fit(&mut rng, gaussian));
            if let Some(f) = &fit {
                fits.push((s.class, f.clone()));
            }
            fit_slots.push(fit);
        }
        let got = partition(&stats, &fit_slots, n);
        let want = brute_force_sets(&losses, &labels, &fits);
        let pick = |s: SampleSet| -> Vec<usize> { (0..n).filter(|&i| want[i] == s).collect() };
        assert_eq!(got.certain_ids, pick(SampleSet::Certain), "fixture {fixture}");
        assert_eq!(got.uncertain_ids, pick(SampleSet::Uncertain), "fixture {fixture}");
        assert_eq!(got.hard_ids, pick(SampleSet::Hard), "fixture {fixture}");
    }
}

#[test]
fn degenerate_classes_are_certain() {
    let losses = [0.5, 0.5, 0.5, 0.5, 0.1, 2.0, 0.3];
    let labels = [0, 0, 0, 0, 1, 1, 1];
    let sel = select(&losses, &labels, 2, Selector::Bmm);
    // Class 0 has zero spread, class 1 has fewer than the minimum members.
    const { assert!(MIN_CLASS_MEMBERS > 3) };
    assert_eq!(sel.partition.certain_ids, (0..7).collect::<Vec<_>>());
    assert!(sel.partition.p_clean.iter().all(|&p| p == 1.0));
}

#[test]
fn small_loss_selector_has_no_uncertain_set() {
    let losses: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin().abs() * 3.0).collect();
    let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
    let sel = select(&losses, &labels, 3, Selector::Sloss);
    assert!(sel.partition.uncertain_ids.is_empty());
    let mean = losses.iter().sum::<f64>() / 40.0;
    for &i in &sel.partition.certain_ids {
        assert!(losses[i] <= mean);
    }
    for &i in &sel.partition.hard_ids {
        assert!(losses[i] > mean);
    }
}

fn loss_fixture() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (6usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..8.0, n),
            prop::collection::vec(0usize..3, n),
        )
    })
}

fn selectors() -> impl Strategy<Value = Selector> {
    prop_oneof![Just(Selector::Bmm), Just(Selector::Gmm), Just(Selector::Sloss)]
}

proptest! {
    #[test]
    fn partition_covers_every_sample_once((losses, labels) in loss_fixture(), selector in selectors()) {
        let sel = select(&losses, &labels, 3, selector);
        let p = &sel.partition;
        let mut all: Vec<usize> = p.certain_ids.iter().chain(&p.uncertain_ids).chain(&p.hard_ids).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..losses.len()).collect::<Vec<_>>());
        prop_assert!(p.p_clean.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn per_class_selection_ignores_affine_loss_rescaling(
        (losses, labels) in loss_fixture(),
        scale in 0.1f64..10.0,
        shift in 0.0f64..5.0,
    ) {
        let moved: Vec<f64> = losses.iter().map(|l| l * scale + shift).collect();
        let a = normalize_losses_per_class(&losses, &labels, 3, NORMALIZE_EPS);
        let b = normalize_losses_per_class(&moved, &labels, 3, NORMALIZE_EPS);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.degenerate, y.degenerate);
            for (u, v) in x.normalized_losses.iter().zip(&y.normalized_losses) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalized_losses_stay_inside_support((losses, labels) in loss_fixture()) {
        for s in normalize_losses_per_class(&losses, &labels, 3, NORMALIZE_EPS) {
            for v in &s.normalized_losses {
                prop_assert!(*v >= NORMALIZE_EPS - 1e-15 && *v <= 1.0 - NORMALIZE_EPS + 1e-15);
            }
        }
    }

    #[test]
    fn clean_posterior_is_a_probability(v in 0.0001f64..0.9999, a in 0.2f64..20.0, b in 0.2f64..20.0, w in 0.05f64..0.95) {
        let fit = MixtureFit {
            weights: [w, 1.0 - w],
            components: [Component::Beta { alpha: a, beta: b }, Component::Beta { alpha: b, beta: a }],
            n_iterations: 0,
            converged: true,
            likelihood_guard_tripped: false,
            log_likelihood: 0.0,
        };
        let p = posterior_clean(v, &fit);
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
