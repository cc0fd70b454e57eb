mod common;

use common::rng;
use dtpp::event_data::{Event, EventSequence};
use dtpp::lognorm_mix::{fit_group, time_loglik, EmOptions, LogNormalMixture, MixtureParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

fn random_mixture(r: &mut ChaCha8Rng) -> LogNormalMixture {
    let m = r.random_range(1..=4);
    let raw: Vec<f64> = (0..m).map(|_| 0.1 + r.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    LogNormalMixture::new(
        raw.iter().map(|w| w / total).collect(),
        (0..m).map(|_| r.random_range(-2.0..2.0)).collect(),
        (0..m).map(|_| r.random_range(0.05..1.5)).collect(),
    )
    .unwrap()
}

/// Composite Simpson on `[a, b]` in log-time.
fn simpson_pdf(mix: &LogNormalMixture, a: f64, b: f64, n: usize) -> f64 {
    let (lo, hi) = (a.ln(), b.ln());
    let h = (hi - lo) / n as f64;
    let f = |x: f64| (mix.log_pdf(x.exp()) + x).exp();
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn pdf_normalizes_and_cdf_matches_quadrature() {
    let mut r = rng(11);
    for _ in 0..30 {
        let mix = random_mixture(&mut r);
        let lo = mix.means().iter().zip(mix.scales()).map(|(m, s)| m - 12.0 * s).fold(f64::INFINITY, f64::min);
        let hi = mix.means().iter().zip(mix.scales()).map(|(m, s)| m + 12.0 * s).fold(f64::NEG_INFINITY, f64::max);
        let total = simpson_pdf(&mix, lo.exp(), hi.exp(), 4000);
        assert!((total - 1.0).abs() < 1e-4, "{total}");
        let (a, b) = (r.random_range(0.05..1.0), r.random_range(1.0..8.0));
        let q = simpson_pdf(&mix, a, b, 20_000);
        assert!((mix.cdf(b) - mix.cdf(a) - q).abs() < 1e-6);
    }
}

#[test]
fn mean_agrees_with_monte_carlo() {
    let mut r = rng(12);
    for _ in 0..5 {
        let mix = random_mixture(&mut r);
        let n = 200_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = r.random();
                let mut acc = 0.0;
                let mut c = mix.num_components() - 1;
                for (i, w) in mix.weights().iter().enumerate() {
                    acc += w;
                    if u < acc {
                        c = i;
                        break;
                    }
                }
                LogNormal::new(mix.means()[c], mix.scales()[c]).unwrap().sample(&mut r)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let z = (mix.mean().unwrap() - mean).abs() / (var / n as f64).sqrt();
        assert!(z < 4.0, "z = {z}");
    }
}

#[test]
fn em_objective_never_decreases() {
    let mut r = rng(13);
    for seed in 0..5 {
        let truth = random_mixture(&mut r);
        let taus: Vec<f64> = (0..2000).map(|_| truth.sample(&mut r)).collect();
        let opts = EmOptions {
            components: 3,
            seed,
            ..Default::default()
        };
        let (_, trace) = fit_group(&taus, &opts).unwrap();
        for w in trace.objective.windows(2) {
            assert!(w[1] - w[0] >= -1e-9, "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn time_loglik_depends_only_on_gap_pairs() {
    let k = 2;
    let mut r = rng(14);
    let slots = (0..=k)
        .map(|_| {
            let w = r.random_range(0.1..0.9);
            let mu = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let sc = vec![r.random_range(0.2..1.0), r.random_range(0.2..1.0)];
            LogNormalMixture::new(vec![w, 1.0 - w], mu, sc).unwrap()
        })
        .collect();
    let params = MixtureParams::new(k, 2, slots).unwrap();
    // Swapping the gaps 0.5 and 0.3, both preceded by mark 0, keeps every
    // (tau, prev) pair and the censored tail.
    let build = |gaps: &[(f64, usize)]| {
        let mut t = 0.0;
        let ev: Vec<Event> = gaps
            .iter()
            .map(|&(g, k)| {
                t += g;
                Event::new(t, k)
            })
            .collect();
        EventSequence::new(ev, t + 0.7).unwrap()
    };
    let a = build(&[(1.0, 0), (0.5, 1), (2.0, 0), (0.3, 1)]);
    let b = build(&[(1.0, 0), (0.3, 1), (2.0, 0), (0.5, 1)]);
    let (la, lb) = (time_loglik(&params, &a), time_loglik(&params, &b));
    assert!((la - lb).abs() < 1e-12, "{la} vs {lb}");
}
