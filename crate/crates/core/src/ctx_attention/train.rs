use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mark_loglik, mark_loglik_and_grad, EncoderParams, MarkModel};
use crate::error::{Error, Result};
use crate::event_data::EventSequence;

/// Adam with the usual defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: EncoderParams,
    v: EncoderParams,
}

impl Adam {
    pub fn new(params: &EncoderParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One descent step on `loss_grad`.
    pub fn step(&mut self, params: &mut EncoderParams, loss_grad: &EncoderParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(loss_grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                let gi = g.1[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Best-dev snapshot.
    pub model: MarkModel,
    /// Dev mark log-likelihood per event; entry 0 is the initialization.
    pub dev_curve: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub diverged: bool,
}

fn event_count(seqs: &[EventSequence]) -> usize {
    seqs.iter().map(EventSequence::len).sum::<usize>().max(1)
}

/// Maximizes the mark objective with Adam over shuffled mini-batches, keeping
/// the snapshot with the best dev log-likelihood.
pub fn train_marks(
    init: MarkModel,
    train: &[EventSequence],
    dev: &[EventSequence],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("training needs non-empty train and dev splits".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let dev_events = event_count(dev) as f64;
    let mut model = init;
    let mut best = model.clone();
    let mut best_dev = mark_loglik(&model, dev)? / dev_events;
    let mut dev_curve = vec![best_dev];
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut adam = Adam::new(&model.params, opts.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<EventSequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (value, mut grad) = match mark_loglik_and_grad(&model, &batch) {
                Ok(r) => r,
                Err(Error::NonFiniteLoss { sequence }) => {
                    log::error!("training diverged at epoch {epoch} (batch sequence {sequence})");
                    return Ok(TrainReport {
                        model: best,
                        dev_curve,
                        best_epoch,
                        epochs_run,
                        diverged: true,
                    });
                }
                Err(e) => return Err(e),
            };
            debug_assert!(value.is_finite());
            // Descend on the negative mean objective of the batch.
            let scale = -1.0 / event_count(&batch) as f64;
            for t in grad.tensors_mut() {
                t.iter_mut().for_each(|g| *g *= scale);
            }
            adam.step(&mut model.params, &grad);
        }
        epochs_run = epoch;

        let dev_ll = match mark_loglik(&model, dev) {
            Ok(v) => v / dev_events,
            Err(_) => f64::NAN,
        };
        if !dev_ll.is_finite() || !model.params.is_finite() {
            log::error!("training diverged at epoch {epoch}: dev log-likelihood {dev_ll}");
            return Ok(TrainReport {
                model: best,
                dev_curve,
                best_epoch,
                epochs_run,
                diverged: true,
            });
        }
        dev_curve.push(dev_ll);
        log::debug!("epoch {epoch}: dev mark log-likelihood/event {dev_ll:.6}");
        if dev_ll > best_dev {
            best_dev = dev_ll;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }

    Ok(TrainReport {
        model: best,
        dev_curve,
        best_epoch,
        epochs_run,
        diverged: false,
    })
}
