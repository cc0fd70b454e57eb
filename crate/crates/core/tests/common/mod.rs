//! Test-only oracles shared by the integration suites. Nothing here calls into
//! the code path it checks.
#![allow(dead_code)]

use dtpp::ctx_attention::{mark_loglik_and_grad, EncoderConfig, MarkModel};
use dtpp::event_data::{Event, EventSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random sequence of `n` events with Exp-like gaps.
pub fn random_sequence(rng: &mut ChaCha8Rng, n: usize, k: usize) -> EventSequence {
    let mut t = 0.0;
    let ev: Vec<Event> = (0..n)
        .map(|_| {
            t += 0.05 + rng.random::<f64>() * 1.5;
            Event::new(t, rng.random_range(0..k))
        })
        .collect();
    EventSequence::new(ev, t + 0.05 + rng.random::<f64>()).unwrap()
}

/// Encoder with every parameter drawn from `U(-scale, scale)`.
pub fn random_model(rng: &mut ChaCha8Rng, cfg: EncoderConfig, scale: f64) -> MarkModel {
    let mut m = MarkModel::init(cfg).unwrap();
    for t in m.params.tensors_mut() {
        t.iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
    }
    m
}

/// Max relative error between the analytic gradient and central differences.
/// Entries whose magnitude is below `floor` are compared on an absolute scale.
pub fn gradient_check(model: &MarkModel, batch: &[EventSequence], step: f64, floor: f64) -> (f64, String) {
    let (_, grad) = mark_loglik_and_grad(model, batch).unwrap();
    let objective = |m: &MarkModel| -> f64 {
        batch
            .iter()
            .map(|s| dtpp::ctx_attention::sequence_mark_loglik(m, s).unwrap())
            .sum()
    };
    let names: Vec<String> = model.params.tensors().iter().map(|(n, _)| n.clone()).collect();
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let mut worst = (0.0, String::new());
    let mut probe = model.clone();
    for (ti, name) in names.iter().enumerate() {
        for idx in 0..analytic[ti].len() {
            let orig = probe.params.tensors_mut()[ti][idx];
            probe.params.tensors_mut()[ti][idx] = orig + step;
            let up = objective(&probe);
            probe.params.tensors_mut()[ti][idx] = orig - step;
            let down = objective(&probe);
            probe.params.tensors_mut()[ti][idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{idx}]: analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
