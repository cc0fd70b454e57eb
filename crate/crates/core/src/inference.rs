//! Next-event prediction, deterministic long-horizon rollout and the
//! thinning-based rollout baseline.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctx_attention::{EncoderState, MarkModel};
use crate::error::{Error, Result};
use crate::event_data::Event;
use crate::generative::{stream_rng, thinning_sample, Horizon, IntensityModel};
use crate::lognorm_mix::MixtureParams;

/// A block of predicted events following a history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionHorizon {
    pub events: Vec<Event>,
    pub base_history_len: usize,
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicts from an encoder state that already holds the history.
/// Returns `(t_hat, k_hat)` with `k_hat` evaluated at `true_next_time`
/// when supplied, otherwise at `t_hat`.
pub fn predict_from_state(
    mixture: &MixtureParams,
    state: &EncoderState<'_>,
    true_next_time: Option<f64>,
) -> Result<(f64, usize)> {
    let last = state.last_time().unwrap_or(0.0);
    let t_hat = last + mixture.mean(state.last_mark())?;
    let at = match true_next_time {
        Some(t) if t <= last => {
            return Err(Error::Masking {
                event_time: last,
                query_time: t,
            })
        }
        Some(t) => t,
        None => t_hat,
    };
    if state.model().num_marks() == 1 {
        return Ok((t_hat, 0));
    }
    Ok((t_hat, argmax(&state.pmf(at)?)))
}

pub fn predict_next(
    mixture: &MixtureParams,
    marks: &MarkModel,
    history: &[Event],
    true_next_time: Option<f64>,
) -> Result<(f64, usize)> {
    let state = EncoderState::from_history(marks, history)?;
    predict_from_state(mixture, &state, true_next_time)
}

/// Autoregressive rollout of `p` events, feeding each prediction back as history.
pub fn rollout(
    mixture: &MixtureParams,
    marks: &MarkModel,
    history: &[Event],
    p: usize,
) -> Result<PredictionHorizon> {
    if p == 0 {
        return Err(Error::Inference("rollout needs P >= 1".into()));
    }
    let mut state = EncoderState::from_history(marks, history)?;
    let mut events = Vec::with_capacity(p);
    for _ in 0..p {
        let (t, k) = predict_from_state(mixture, &state, None)?;
        let e = Event::new(t, k);
        state.observe(e)?;
        events.push(e);
    }
    Ok(PredictionHorizon {
        events,
        base_history_len: history.len(),
    })
}

/// [`rollout`] over many histories in parallel; output order follows input order.
pub fn rollout_batch<H: AsRef<[Event]> + Sync>(
    mixture: &MixtureParams,
    marks: &MarkModel,
    histories: &[H],
    p: usize,
) -> Result<Vec<PredictionHorizon>> {
    histories
        .par_iter()
        .map(|h| rollout(mixture, marks, h.as_ref(), p))
        .collect()
}

/// Draws `n_samples` thinning continuations of length `p` and aggregates them
/// into per-position mean times and modal marks.
pub fn rollout_thinning<M: IntensityModel, R: Rng + ?Sized>(
    model: &M,
    history: &[Event],
    p: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<PredictionHorizon> {
    if p == 0 || n_samples == 0 {
        return Err(Error::Inference("thinning rollout needs P >= 1 and n_samples >= 1".into()));
    }
    let mut draws = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        draws.push(thinning_sample(model, history, Horizon::Events(p), rng)?);
    }
    if n_samples == 1 {
        return Ok(PredictionHorizon {
            events: draws.pop().unwrap_or_default(),
            base_history_len: history.len(),
        });
    }
    let k = model.num_marks();
    let events = (0..p)
        .map(|i| {
            let time = draws.iter().map(|d| d[i].time).sum::<f64>() / n_samples as f64;
            let mut counts = vec![0.0; k];
            for d in &draws {
                counts[d[i].mark] += 1.0;
            }
            Event::new(time, argmax(&counts))
        })
        .collect();
    Ok(PredictionHorizon {
        events,
        base_history_len: history.len(),
    })
}

/// Sequential thinning rollouts; history `i` uses RNG stream `i`.
pub fn rollout_thinning_batch<M: IntensityModel, H: AsRef<[Event]>>(
    model: &M,
    histories: &[H],
    p: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PredictionHorizon>> {
    histories
        .iter()
        .enumerate()
        .map(|(i, h)| rollout_thinning(model, h.as_ref(), p, n_samples, &mut stream_rng(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    pub repeats: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            repeats: 5,
            n_samples: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub sequences: usize,
    pub horizon: usize,
    pub repeats: usize,
    pub rollout_secs: Vec<f64>,
    pub thinning_secs: Vec<f64>,
    pub rollout_mean: f64,
    pub rollout_std: f64,
    pub thinning_mean: f64,
    pub thinning_std: f64,
    /// `thinning_mean / rollout_mean`; absent when nothing was timed.
    pub speedup: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Times batched rollout against sequential thinning rollout on the same histories.
pub fn benchmark_inference<M: IntensityModel, H: AsRef<[Event]> + Sync>(
    mixture: &MixtureParams,
    marks: &MarkModel,
    thinning_model: &M,
    histories: &[H],
    p: usize,
    opts: &BenchmarkOptions,
) -> Result<BenchmarkReport> {
    let mut report = BenchmarkReport {
        sequences: histories.len(),
        horizon: p,
        repeats: opts.repeats,
        rollout_secs: Vec::new(),
        thinning_secs: Vec::new(),
        rollout_mean: 0.0,
        rollout_std: 0.0,
        thinning_mean: 0.0,
        thinning_std: 0.0,
        speedup: None,
    };
    if histories.is_empty() {
        return Ok(report);
    }
    for r in 0..opts.repeats {
        let start = Instant::now();
        let out = rollout_batch(mixture, marks, histories, p)?;
        report.rollout_secs.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);

        let start = Instant::now();
        let seed = opts.seed.wrapping_add(r as u64);
        let out = rollout_thinning_batch(thinning_model, histories, p, opts.n_samples, seed)?;
        report.thinning_secs.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    (report.rollout_mean, report.rollout_std) = mean_std(&report.rollout_secs);
    (report.thinning_mean, report.thinning_std) = mean_std(&report.thinning_secs);
    if report.rollout_mean > 0.0 {
        report.speedup = Some(report.thinning_mean / report.rollout_mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctx_attention::EncoderConfig;
    use crate::generative::ConstantIntensity;
    use crate::lognorm_mix::LogNormalMixture;

    fn std_mix(k: usize) -> MixtureParams {
        MixtureParams::shared(k, LogNormalMixture::new(vec![1.0], vec![0.0], vec![1.0]).unwrap())
    }

    #[test]
    fn closed_form_time_and_single_mark() {
        let marks = MarkModel::init(EncoderConfig::new(1, 1, 2)).unwrap();
        let (t, k) = predict_next(&std_mix(1), &marks, &[Event::new(2.0, 0)], None).unwrap();
        assert!((t - (2.0 + 0.5f64.exp())).abs() < 1e-12);
        assert_eq!(k, 0);
    }

    #[test]
    fn uniform_pmf_picks_first_mark() {
        let mut marks = MarkModel::init(EncoderConfig::new(3, 1, 2)).unwrap();
        marks.params.classifier.data.iter_mut().for_each(|w| *w = 0.0);
        let (_, k) = predict_next(&std_mix(3), &marks, &[Event::new(1.0, 2)], Some(1.5)).unwrap();
        assert_eq!(k, 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn rollout_base_case_and_determinism() {
        let marks = MarkModel::init(EncoderConfig::new(3, 2, 4)).unwrap();
        let mix = std_mix(3);
        let hist = [Event::new(0.5, 1), Event::new(1.2, 0)];
        let one = rollout(&mix, &marks, &hist, 1).unwrap();
        let next = predict_next(&mix, &marks, &hist, None).unwrap();
        assert_eq!(one.events, vec![Event::new(next.0, next.1)]);
        let a = rollout(&mix, &marks, &hist, 10).unwrap();
        let b = rollout(&mix, &marks, &hist, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.events.windows(2).all(|w| w[0].time < w[1].time));
        assert_eq!(a.base_history_len, 2);
        assert!(rollout(&mix, &marks, &hist, 0).is_err());
    }

    #[test]
    fn thinning_rollout_reproducible_and_mean_times() {
        let model = ConstantIntensity::new(2.0, 1);
        let hist = [Event::new(1.0, 0)];
        let a = rollout_thinning(&model, &hist, 3, 1, &mut stream_rng(5, 0)).unwrap();
        let b = rollout_thinning(&model, &hist, 3, 1, &mut stream_rng(5, 0)).unwrap();
        assert_eq!(a, b);
        let agg = rollout_thinning(&model, &hist, 3, 4000, &mut stream_rng(5, 1)).unwrap();
        for (p, e) in agg.events.iter().enumerate() {
            let expect = 1.0 + (p + 1) as f64 / 2.0;
            // sd of the position-p arrival is sqrt(p)/rate.
            let se = ((p + 1) as f64).sqrt() / 2.0 / 4000f64.sqrt();
            assert!((e.time - expect).abs() < 4.0 * se, "{} vs {expect}", e.time);
        }
    }

    #[test]
    fn empty_benchmark_is_zero() {
        let marks = MarkModel::init(EncoderConfig::new(1, 1, 2)).unwrap();
        let hs: Vec<Vec<Event>> = Vec::new();
        let r = benchmark_inference(&std_mix(1), &marks, &ConstantIntensity::new(1.0, 1), &hs, 20, &Default::default())
            .unwrap();
        assert_eq!(r.rollout_mean, 0.0);
        assert_eq!(r.thinning_mean, 0.0);
        assert_eq!(r.speedup, None);
    }
}
