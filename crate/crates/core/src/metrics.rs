//! Held-out likelihood, next-event scores, OTD, RMSE* and bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctx_attention::{sequence_mark_loglik, EncoderState, MarkModel};
use crate::error::{Error, Result};
use crate::event_data::{inter_event_times, Event, EventSequence};
use crate::inference::predict_from_state;
use crate::lognorm_mix::{time_loglik, InterEventModel, MixtureParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub n_resamples: usize,
    pub values: Vec<f64>,
}

/// `ln p(H)`: time log-likelihood (with survival) plus mark log-likelihood.
pub fn loglik_decomposed<T: InterEventModel + ?Sized>(
    times: &T,
    marks: &MarkModel,
    seq: &EventSequence,
) -> Result<f64> {
    Ok(time_loglik(times, seq) + sequence_mark_loglik(marks, seq)?)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

struct Quadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Quadrature {
    fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_legendre(n);
        Self { nodes, weights }
    }

    /// `int_a^b f` with `panels` equal Gauss–Legendre panels.
    fn integrate(&self, f: &impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let h = (b - a) / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let mid = a + h * (p as f64 + 0.5);
            let mut s = 0.0;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                s += w * f(mid + 0.5 * h * x);
            }
            total += 0.5 * h * s;
        }
        total
    }
}

/// `int_0^tau hazard(u) du` by quadrature in `x = ln u`.
fn compensator<T: InterEventModel + ?Sized>(
    times: &T,
    tau: f64,
    prev: Option<usize>,
    quad: &Quadrature,
) -> f64 {
    let hi = tau.ln();
    let (lo, width) = times.log_support(prev).unwrap_or((hi - 50.0, 0.5));
    let lo = lo.min(hi - 1.0);
    let width = width.clamp(1e-3, 0.5);
    let panels = (((hi - lo) / width).ceil() as usize).clamp(1, 20_000);
    let f = |x: f64| {
        let u = x.exp();
        (times.log_pdf(u, prev) - times.log_survival(u, prev) + x).exp()
    };
    quad.integrate(&f, lo, hi, panels)
}

/// Intensity-form log-likelihood `sum_i ln lambda_{k_i}(t_i) - int_0^T sum_k lambda_k`,
/// with `lambda_k = g p_k / (1 - G)` and the compensator by Gauss–Legendre
/// quadrature. `n_quad` nodes per panel are doubled until two successive
/// estimates agree within `1e-4` per event.
pub fn loglik_intensity_check<T: InterEventModel + ?Sized>(
    times: &T,
    marks: &MarkModel,
    seq: &EventSequence,
    n_quad: usize,
) -> Result<f64> {
    if n_quad < 100 {
        return Err(Error::Metric(format!("n_quad must be >= 100, got {n_quad}")));
    }
    let gaps = inter_event_times(seq);
    let mut state = EncoderState::new(marks);
    let mut log_intensity = 0.0;
    for (e, g) in seq.events().iter().zip(&gaps) {
        let p = state.pmf(e.time)?;
        let log_hazard = times.log_pdf(g.tau, g.prev_mark) - times.log_survival(g.tau, g.prev_mark);
        log_intensity += log_hazard + p[e.mark].ln();
        state.observe(*e)?;
    }
    let mut intervals: Vec<(f64, Option<usize>)> = gaps.iter().map(|g| (g.tau, g.prev_mark)).collect();
    let tail = crate::event_data::censored_tail(seq);
    intervals.push((tail, seq.events().last().map(|e| e.mark)));

    let tol = 1e-4 * seq.len().max(1) as f64;
    let eval = |n: usize| {
        let quad = Quadrature::new(n);
        intervals
            .iter()
            .map(|&(tau, prev)| compensator(times, tau, prev, &quad))
            .sum::<f64>()
    };
    let mut n = n_quad;
    let mut prev = eval(n);
    for _ in 0..4 {
        n *= 2;
        let next = eval(n);
        let converged = (next - prev).abs() <= tol;
        prev = next;
        if converged {
            return Ok(log_intensity - prev);
        }
    }
    Err(Error::Metric(format!(
        "compensator quadrature did not stabilise at {n} nodes per panel"
    )))
}

/// Aligned next-event predictions for events `2..N` of every sequence,
/// as `(predicted, true)` pairs.
pub fn next_event_predictions(
    mixture: &MixtureParams,
    marks: &MarkModel,
    sequences: &[EventSequence],
) -> Result<Vec<(Event, Event)>> {
    let per_seq: Vec<Vec<(Event, Event)>> = sequences
        .par_iter()
        .map(|seq| {
            let mut state = EncoderState::new(marks);
            let mut out = Vec::with_capacity(seq.len().saturating_sub(1));
            for (i, e) in seq.events().iter().enumerate() {
                if i > 0 {
                    let (t, k) = predict_from_state(mixture, &state, Some(e.time))?;
                    out.push((Event::new(t, k), *e));
                }
                state.observe(*e)?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_seq.concat())
}

/// `(rmse, error_rate_percent)`.
pub fn next_event_scores(predictions: &[Event], truths: &[Event]) -> Result<(f64, f64)> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Metric("no events to score".into()));
    }
    let n = predictions.len() as f64;
    let mse = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p.time - t.time).powi(2))
        .sum::<f64>()
        / n;
    let wrong = predictions.iter().zip(truths).filter(|(p, t)| p.mark != t.mark).count();
    Ok((mse.sqrt(), 100.0 * wrong as f64 / n))
}

fn align_cost(a: &[f64], b: &[f64], c_del: f64) -> f64 {
    let mut prev: Vec<f64> = (0..=b.len()).map(|j| j as f64 * c_del).collect();
    let mut cur = vec![0.0; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = (i + 1) as f64 * c_del;
        for (j, tb) in b.iter().enumerate() {
            let matched = prev[j] + (ta - tb).abs();
            let skip = (prev[j + 1] + c_del).min(cur[j] + c_del);
            cur[j + 1] = matched.min(skip);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Optimal transport distance: order-preserving same-mark matching with cost
/// `|t - t'|` per matched pair and `c_del` per unmatched event.
pub fn otd(a: &[Event], b: &[Event], c_del: f64) -> f64 {
    let k = a.iter().chain(b).map(|e| e.mark + 1).max().unwrap_or(0);
    (0..k)
        .map(|m| {
            let ta: Vec<f64> = a.iter().filter(|e| e.mark == m).map(|e| e.time).collect();
            let tb: Vec<f64> = b.iter().filter(|e| e.mark == m).map(|e| e.time).collect();
            align_cost(&ta, &tb, c_del)
        })
        .sum()
}

/// Mean OTD over sequence pairs, averaged over a grid of deletion costs.
pub fn avg_otd<P: AsRef<[Event]>, Q: AsRef<[Event]>>(predicted: &[P], truth: &[Q], c_dels: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if predicted.is_empty() || c_dels.is_empty() {
        return Err(Error::Metric("avg OTD needs sequences and deletion costs".into()));
    }
    let n = predicted.len() as f64;
    let per_cost: Vec<f64> = c_dels
        .iter()
        .map(|&c| {
            predicted
                .iter()
                .zip(truth)
                .map(|(p, t)| otd(p.as_ref(), t.as_ref(), c))
                .sum::<f64>()
                / n
        })
        .collect();
    Ok(per_cost.iter().sum::<f64>() / c_dels.len() as f64)
}

/// Counting window for [`rmse_star`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountWindow {
    /// `[first, last]` time of the true horizon, applied to both sides.
    #[default]
    TrueSpan,
    /// Every event of each horizon.
    Whole,
}

/// RMSE of per-mark event counts over all `(sequence, mark)` pairs.
pub fn rmse_star<P: AsRef<[Event]>, Q: AsRef<[Event]>>(
    predicted: &[P],
    truth: &[Q],
    num_marks: usize,
    window: CountWindow,
) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if predicted.is_empty() || num_marks == 0 {
        return Err(Error::Metric("RMSE* needs at least one sequence and mark".into()));
    }
    let mut sq = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        let (p, t) = (p.as_ref(), t.as_ref());
        let inside = |e: &Event| match window {
            CountWindow::Whole => true,
            CountWindow::TrueSpan => match (t.first(), t.last()) {
                (Some(a), Some(b)) => e.time >= a.time && e.time <= b.time,
                _ => false,
            },
        };
        let mut diff = vec![0.0f64; num_marks];
        for e in p.iter().filter(|e| inside(e)) {
            diff[e.mark] += 1.0;
        }
        for e in t.iter().filter(|e| inside(e)) {
            diff[e.mark] -= 1.0;
        }
        sq += diff.iter().map(|d| d * d).sum::<f64>();
    }
    Ok((sq / (predicted.len() * num_marks) as f64).sqrt())
}

/// Percentile bootstrap of an arbitrary statistic over resampled indices.
/// The interval is widened if needed so that it contains the point estimate.
pub fn bootstrap_ci_with<F>(
    name: &str,
    values: &[f64],
    statistic: F,
    level: f64,
    n_resamples: usize,
    seed: u64,
) -> Result<MetricReport>
where
    F: Fn(&[usize]) -> f64,
{
    if values.is_empty() {
        return Err(Error::Metric("bootstrap needs at least one value".into()));
    }
    if !(level > 0.0 && level < 1.0) || n_resamples == 0 {
        return Err(Error::Metric(format!(
            "bootstrap needs level in (0,1) and n_resamples >= 1 (got {level}, {n_resamples})"
        )));
    }
    let n = values.len();
    let all: Vec<usize> = (0..n).collect();
    let point = statistic(&all);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut stats: Vec<f64> = (0..n_resamples)
        .map(|_| {
            idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
            statistic(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n_resamples - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        stats[lo] + (stats[hi] - stats[lo]) * (pos - lo as f64)
    };
    let alpha = 0.5 * (1.0 - level);
    Ok(MetricReport {
        name: name.to_string(),
        point,
        ci_low: q(alpha).min(point),
        ci_high: q(1.0 - alpha).max(point),
        level,
        n_resamples,
        values: values.to_vec(),
    })
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_ci(name: &str, values: &[f64], level: f64, n_resamples: usize, seed: u64) -> Result<MetricReport> {
    let mean = |idx: &[usize]| idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64;
    bootstrap_ci_with(name, values, mean, level, n_resamples, seed)
}
