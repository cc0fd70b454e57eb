use dtpp::ctx_attention::{EncoderConfig, MarkModel};
use dtpp::event_data::Event;
use dtpp::generative::{
    dtpp_intensity, make_synthetic, stream_rng, thinning_sample, ConstantIntensity, Horizon, IntensityModel,
    SplitCounts, SyntheticKind,
};
use dtpp::lognorm_mix::{fit_group, EmOptions, LogNormalMixture, MixtureParams};
use rand_distr::{Distribution, Exp};

#[test]
fn hawkes1_full_split_sizes() {
    let counts = SplitCounts {
        train: 1024,
        dev: 256,
        test: 512,
    };
    let ds = make_synthetic(SyntheticKind::Hawkes1, counts, 64, 0).unwrap();
    assert_eq!(
        (ds.token_count("train"), ds.token_count("dev"), ds.token_count("test")),
        (65_536, 16_384, 32_768)
    );
    assert_eq!(ds.num_marks(), 1);
}

#[test]
fn poisson_mean_gap_is_one() {
    let counts = SplitCounts {
        train: 100,
        dev: 1,
        test: 1,
    };
    let ds = make_synthetic(SyntheticKind::Poisson { rate: 1.0 }, counts, 64, 3).unwrap();
    let mut gaps = Vec::new();
    for s in ds.split("train").unwrap() {
        let mut prev = 0.0;
        for e in s.events() {
            gaps.push(e.time - prev);
            prev = e.time;
        }
    }
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * sd / n.sqrt(), "mean gap {mean}");
}

#[test]
fn constant_rate_counts_are_poisson() {
    let (rate, window, reps) = (3.0, 2.0, 4000);
    let counts: Vec<f64> = (0..reps)
        .map(|i| {
            let ev = thinning_sample(&ConstantIntensity::new(rate, 1), &[], Horizon::Time(window), &mut stream_rng(17, i))
                .unwrap();
            ev.len() as f64
        })
        .collect();
    let n = reps as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let lam = rate * window;
    // Standard errors of the sample mean and variance of a Poisson(lam) sample.
    let se_mean = (lam / n).sqrt();
    let se_var = ((lam + 2.0 * lam * lam) / n).sqrt();
    assert!((mean - lam).abs() < 3.0 * se_mean, "mean {mean}");
    assert!((var - lam).abs() < 3.0 * se_var, "var {var}");
}

#[test]
fn hazard_integrates_to_survival() {
    let mix = LogNormalMixture::new(vec![0.3, 0.7], vec![-0.8, 0.4], vec![0.5, 0.3]).unwrap();
    let params = MixtureParams::shared(1, mix.clone());
    let marks = MarkModel::init(EncoderConfig::new(1, 1, 2)).unwrap();
    let model = dtpp_intensity(&params, &marks);
    // Trapezoid rule on a fine grid from 0 up to the 99th percentile.
    let h = 1e-4;
    let mut integral = 0.0;
    let mut tau: f64 = 0.0;
    let mut prev = 0.0;
    while mix.cdf(tau) < 0.99 {
        tau += h;
        let cur = model.hazard(tau, None);
        integral += 0.5 * h * (prev + cur);
        prev = cur;
        if ((tau * 1e3).round() as u64).is_multiple_of(250) {
            let surv = 1.0 - mix.cdf(tau);
            assert!(((-integral).exp() - surv).abs() < 1e-3, "tau {tau}");
        }
    }
}

#[test]
fn exponential_fit_has_nearly_constant_hazard() {
    let lambda = 1.5;
    let mut r = stream_rng(21, 0);
    let exp = Exp::new(lambda).unwrap();
    let taus: Vec<f64> = (0..20_000).map(|_| exp.sample(&mut r)).collect();
    let opts = EmOptions {
        components: 8,
        ..Default::default()
    };
    let (mix, _) = fit_group(&taus, &opts).unwrap();
    let params = MixtureParams::shared(1, mix);
    let marks = MarkModel::init(EncoderConfig::new(1, 1, 2)).unwrap();
    let model = dtpp_intensity(&params, &marks);
    // Between the 10th and 90th percentiles of Exp(1.5).
    for i in 0..=20 {
        let t = 0.07 + i as f64 * (1.53 - 0.07) / 20.0;
        let h = model.hazard(t, None);
        assert!((h - lambda).abs() / lambda < 0.10, "hazard {h} at {t}");
    }
}

#[test]
fn dtpp_thinning_respects_its_bound() {
    let mix = LogNormalMixture::new(vec![0.5, 0.5], vec![-1.5, 0.5], vec![0.2, 0.6]).unwrap();
    let params = MixtureParams::shared(2, mix);
    let marks = MarkModel::init(EncoderConfig::new(2, 1, 4)).unwrap();
    let model = dtpp_intensity(&params, &marks);
    let mut r = stream_rng(22, 0);
    let hist = [Event::new(0.3, 1)];
    let out = thinning_sample(&model, &hist, Horizon::Events(200), &mut r).unwrap();
    assert_eq!(out.len(), 200);
    assert!(out[0].time > 0.3);
    assert!(out.windows(2).all(|w| w[0].time < w[1].time));
    let state = model.start(&hist).unwrap();
    let p = model.mark_probs(&state, 1.0).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
