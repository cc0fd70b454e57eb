//! Log-normal mixtures over inter-event times, one mixture per previous mark.
//!
//! Slot 0 holds the distribution of the first gap of a sequence (no previous
//! mark); slot `k + 1` holds the distribution of gaps that follow an event of
//! 0-based mark `k`.

use std::f64::consts::{LN_2, PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_data::{censored_tail, inter_event_times, EventSequence, Gap};

/// Lower bound on every component scale.
pub const S_MIN: f64 = 1e-3;

/// Exponent above which `exp(mu + s^2 / 2)` is treated as an overflow.
const MEAN_EXPONENT_LIMIT: f64 = 700.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln Phi(-z)`, the log upper tail of the standard normal, accurate far into the tail.
pub(crate) fn log_normal_sf(z: f64) -> f64 {
    if z < 25.0 {
        (0.5 * libm::erfc(z / SQRT_2)).ln()
    } else {
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        -0.5 * z2 - z.ln() - HALF_LN_2PI + series.ln()
    }
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// One mixture: weights on the simplex, means and scales in log-time units.
#[derive(Debug, Clone, PartialEq)]
pub struct LogNormalMixture {
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl LogNormalMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.len() != m || scales.len() != m {
            return Err(Error::Domain(format!(
                "mixture arrays must be non-empty and equal length (got {}, {}, {})",
                weights.len(),
                means.len(),
                scales.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Domain("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("mixture weights sum to {total}, not 1")));
        }
        if means.iter().any(|mu| !mu.is_finite()) {
            return Err(Error::Domain("mixture means must be finite".into()));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s >= S_MIN)) {
            return Err(Error::Domain(format!("mixture scales must be >= {S_MIN}")));
        }
        Ok(Self {
            weights,
            means,
            scales,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    fn active(&self) -> impl Iterator<Item = (f64, f64, f64)> + Clone + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, mu), s)| (*w, *mu, *s))
    }

    /// `ln g(tau)`; `tau` must be positive.
    pub fn log_pdf(&self, tau: f64) -> f64 {
        let x = tau.ln();
        log_sum_exp(self.active().map(|(w, mu, s)| {
            let z = (x - mu) / s;
            w.ln() - x - s.ln() - HALF_LN_2PI - 0.5 * z * z
        }))
    }

    pub fn cdf(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let x = tau.ln();
        let c: f64 = self
            .active()
            .map(|(w, mu, s)| w * normal_cdf((x - mu) / s))
            .sum();
        c.clamp(0.0, 1.0)
    }

    /// `ln(1 - G(tau))`, summed component-wise so it stays finite in the far tail.
    pub fn log_survival(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let x = tau.ln();
        log_sum_exp(
            self.active()
                .map(|(w, mu, s)| w.ln() + log_normal_sf((x - mu) / s)),
        )
        .min(0.0)
    }

    pub fn mean(&self) -> Result<f64> {
        let mut total = 0.0;
        for (w, mu, s) in self.active() {
            let exponent = mu + 0.5 * s * s;
            if exponent > MEAN_EXPONENT_LIMIT {
                return Err(Error::Overflow(format!(
                    "component mean exponent {exponent} exceeds {MEAN_EXPONENT_LIMIT}"
                )));
            }
            total += w * exponent.exp();
        }
        Ok(total)
    }

    /// Draws one inter-event time.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        (self.means[idx] + self.scales[idx] * z).exp()
    }
}

/// Inter-event time model conditioned on the previous mark.
pub trait InterEventModel: Sync {
    fn log_pdf(&self, tau: f64, prev_mark: Option<usize>) -> f64;
    fn log_survival(&self, tau: f64, prev_mark: Option<usize>) -> f64;

    /// `(lower, width)` in log-time: the density is negligible below `lower`
    /// and varies on scales no finer than `width`. Used to lay out quadrature.
    fn log_support(&self, _prev_mark: Option<usize>) -> Option<(f64, f64)> {
        None
    }
}

/// Per-previous-mark log-normal mixtures (`K + 1` slots).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureDoc", into = "MixtureDoc")]
pub struct MixtureParams {
    num_marks: usize,
    components: usize,
    slots: Vec<LogNormalMixture>,
}

impl MixtureParams {
    /// `slots[0]` is the no-previous-mark slot; `slots.len()` must be `num_marks + 1`.
    pub fn new(num_marks: usize, components: usize, slots: Vec<LogNormalMixture>) -> Result<Self> {
        if slots.len() != num_marks + 1 {
            return Err(Error::Domain(format!(
                "expected {} slots for K={num_marks}, got {}",
                num_marks + 1,
                slots.len()
            )));
        }
        Ok(Self {
            num_marks,
            components,
            slots,
        })
    }

    /// Same mixture in every slot.
    pub fn shared(num_marks: usize, mixture: LogNormalMixture) -> Self {
        let components = mixture.num_components();
        Self {
            num_marks,
            components,
            slots: vec![mixture; num_marks + 1],
        }
    }

    pub fn num_marks(&self) -> usize {
        self.num_marks
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn slots(&self) -> &[LogNormalMixture] {
        &self.slots
    }

    pub fn slot(&self, prev_mark: Option<usize>) -> &LogNormalMixture {
        &self.slots[prev_mark.map_or(0, |k| k + 1)]
    }

    pub fn log_pdf(&self, tau: f64, prev_mark: Option<usize>) -> Result<f64> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Domain(format!("log_pdf needs tau > 0, got {tau}")));
        }
        Ok(self.slot(prev_mark).log_pdf(tau))
    }

    pub fn cdf(&self, tau: f64, prev_mark: Option<usize>) -> f64 {
        self.slot(prev_mark).cdf(tau)
    }

    pub fn log_survival(&self, tau: f64, prev_mark: Option<usize>) -> f64 {
        self.slot(prev_mark).log_survival(tau)
    }

    /// `g / (1 - G)` evaluated in log space.
    pub fn hazard(&self, tau: f64, prev_mark: Option<usize>) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        let slot = self.slot(prev_mark);
        (slot.log_pdf(tau) - slot.log_survival(tau)).exp()
    }

    pub fn mean(&self, prev_mark: Option<usize>) -> Result<f64> {
        self.slot(prev_mark).mean()
    }
}

impl InterEventModel for MixtureParams {
    fn log_pdf(&self, tau: f64, prev_mark: Option<usize>) -> f64 {
        self.slot(prev_mark).log_pdf(tau)
    }

    fn log_survival(&self, tau: f64, prev_mark: Option<usize>) -> f64 {
        self.slot(prev_mark).log_survival(tau)
    }

    fn log_support(&self, prev_mark: Option<usize>) -> Option<(f64, f64)> {
        let slot = self.slot(prev_mark);
        let (mut lo, mut width) = (f64::INFINITY, f64::INFINITY);
        for m in 0..slot.num_components() {
            if slot.weights()[m] > 0.0 {
                lo = lo.min(slot.means()[m] - 12.0 * slot.scales()[m]);
                width = width.min(slot.scales()[m]);
            }
        }
        Some((lo, width))
    }
}

#[derive(Serialize, Deserialize)]
struct MixtureDoc {
    #[serde(rename = "K")]
    num_marks: usize,
    #[serde(rename = "M")]
    components: usize,
    weights: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    scales: Vec<Vec<f64>>,
}

impl TryFrom<MixtureDoc> for MixtureParams {
    type Error = Error;

    fn try_from(doc: MixtureDoc) -> Result<Self> {
        if doc.weights.len() != doc.means.len() || doc.weights.len() != doc.scales.len() {
            return Err(Error::Domain("per-mark arrays differ in length".into()));
        }
        let slots = doc
            .weights
            .into_iter()
            .zip(doc.means)
            .zip(doc.scales)
            .map(|((w, mu), s)| LogNormalMixture::new(w, mu, s))
            .collect::<Result<Vec<_>>>()?;
        MixtureParams::new(doc.num_marks, doc.components, slots)
    }
}

impl From<MixtureParams> for MixtureDoc {
    fn from(p: MixtureParams) -> Self {
        let (mut weights, mut means, mut scales) = (Vec::new(), Vec::new(), Vec::new());
        for slot in p.slots {
            weights.push(slot.weights);
            means.push(slot.means);
            scales.push(slot.scales);
        }
        MixtureDoc {
            num_marks: p.num_marks,
            components: p.components,
            weights,
            means,
            scales,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub components: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            components: 16,
            seed: 0,
            max_iter: 500,
            tol: 1e-8,
        }
    }
}

/// Per-iteration EM objective (mean log-likelihood of `ln tau`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// k-means++ seeding on a 1-d sample.
fn seed_centers(x: &[f64], m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = vec![x[rng.random_range(0..x.len())]];
    let mut dist: Vec<f64> = x.iter().map(|v| (v - centers[0]).powi(2)).collect();
    while centers.len() < m {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = x.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            x[pick]
        } else {
            x[rng.random_range(0..x.len())]
        };
        for (d, v) in dist.iter_mut().zip(x) {
            *d = d.min((v - next).powi(2));
        }
        centers.push(next);
    }
    centers
}

struct Gmm1d {
    weights: Vec<f64>,
    means: Vec<f64>,
    vars: Vec<f64>,
}

impl Gmm1d {
    fn m_step(x: &[f64], resp: &[f64], m: usize, prev: Option<&Gmm1d>) -> Gmm1d {
        let n = x.len();
        let var_floor = S_MIN * S_MIN;
        let mut weights = vec![0.0; m];
        let mut means = vec![0.0; m];
        let mut vars = vec![0.0; m];
        for c in 0..m {
            let nk: f64 = (0..n).map(|i| resp[i * m + c]).sum();
            if nk <= 1e-300 {
                // Dead component: keep its location, it carries no weight.
                weights[c] = 0.0;
                means[c] = prev.map_or(0.0, |p| p.means[c]);
                vars[c] = prev.map_or(var_floor, |p| p.vars[c]);
                continue;
            }
            let mu = (0..n).map(|i| resp[i * m + c] * x[i]).sum::<f64>() / nk;
            let var = (0..n)
                .map(|i| resp[i * m + c] * (x[i] - mu).powi(2))
                .sum::<f64>()
                / nk;
            weights[c] = nk / n as f64;
            means[c] = mu;
            vars[c] = var.max(var_floor);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Gmm1d {
            weights,
            means,
            vars,
        }
    }

    /// Fills responsibilities and returns the mean log-likelihood.
    fn e_step(&self, x: &[f64], resp: &mut [f64]) -> f64 {
        let m = self.weights.len();
        let mut total = 0.0;
        let mut logp = vec![0.0; m];
        for (i, &xi) in x.iter().enumerate() {
            for c in 0..m {
                logp[c] = if self.weights[c] > 0.0 {
                    let d = xi - self.means[c];
                    self.weights[c].ln()
                        - 0.5 * (LN_2 + PI.ln() + self.vars[c].ln())
                        - 0.5 * d * d / self.vars[c]
                } else {
                    f64::NEG_INFINITY
                };
            }
            let lse = log_sum_exp(logp.iter().copied());
            for c in 0..m {
                resp[i * m + c] = (logp[c] - lse).exp();
            }
            total += lse;
        }
        total / x.len() as f64
    }
}

/// Gaussian-mixture EM on `ln tau` for a single group.
///
/// Uses `min(components, n)` components when the group is small.
pub fn fit_group(taus: &[f64], opts: &EmOptions) -> Result<(LogNormalMixture, EmTrace)> {
    if taus.is_empty() {
        return Err(Error::Fit("cannot fit an empty group".into()));
    }
    if opts.components == 0 {
        return Err(Error::Fit("need at least one component".into()));
    }
    if let Some(bad) = taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Domain(format!("inter-event time {bad} is not positive")));
    }
    let x: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let m = opts.components.min(x.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let centers = seed_centers(&x, m, &mut rng);

    let mut resp = vec![0.0; x.len() * m];
    for (i, xi) in x.iter().enumerate() {
        let nearest = (0..m)
            .min_by(|&a, &b| {
                (xi - centers[a])
                    .abs()
                    .partial_cmp(&(xi - centers[b]).abs())
                    .unwrap()
            })
            .unwrap();
        resp[i * m + nearest] = 1.0;
    }
    let mut model = Gmm1d::m_step(&x, &resp, m, None);

    let mut trace = EmTrace::default();
    for _ in 0..opts.max_iter {
        let obj = model.e_step(&x, &mut resp);
        if let Some(&last) = trace.objective.last() {
            trace.objective.push(obj);
            if obj - last < opts.tol {
                trace.converged = true;
                break;
            }
        } else {
            trace.objective.push(obj);
        }
        model = Gmm1d::m_step(&x, &resp, m, Some(&model));
    }

    let mixture = LogNormalMixture::new(
        model.weights,
        model.means,
        model.vars.into_iter().map(f64::sqrt).map(|s| s.max(S_MIN)).collect(),
    )?;
    Ok((mixture, trace))
}

/// Fits one mixture per previous-mark slot. Slots with no observations inherit
/// the pooled fit over all gaps.
pub fn fit_em(data: &[Gap], num_marks: usize, opts: &EmOptions) -> Result<MixtureParams> {
    if data.is_empty() {
        return Err(Error::Fit("no inter-event times to fit".into()));
    }
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); num_marks + 1];
    for gap in data {
        let slot = match gap.prev_mark {
            None => 0,
            Some(k) if k < num_marks => k + 1,
            Some(k) => {
                return Err(Error::Fit(format!(
                    "previous mark {k} outside alphabet of size {num_marks}"
                )))
            }
        };
        groups[slot].push(gap.tau);
    }
    let all: Vec<f64> = data.iter().map(|g| g.tau).collect();
    let pooled = fit_group(&all, opts)?.0;

    let slots = groups
        .par_iter()
        .enumerate()
        .map(|(slot, taus)| {
            if taus.is_empty() {
                Ok(pooled.clone())
            } else {
                let slot_opts = EmOptions {
                    seed: opts.seed.wrapping_add(1 + slot as u64),
                    ..*opts
                };
                fit_group(taus, &slot_opts).map(|(mix, _)| mix)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureParams::new(num_marks, opts.components, slots)
}

/// Gathers every inter-event time of a collection of sequences.
pub fn collect_gaps(sequences: &[EventSequence]) -> Vec<Gap> {
    sequences.iter().flat_map(inter_event_times).collect()
}

/// `sum_i ln g(tau_i | k_{i-1}) + ln(1 - G(T - t_N | k_N))`.
pub fn time_loglik<M: InterEventModel + ?Sized>(model: &M, seq: &EventSequence) -> f64 {
    let gaps = inter_event_times(seq);
    let observed: f64 = gaps.iter().map(|g| model.log_pdf(g.tau, g.prev_mark)).sum();
    let last_mark = seq.events().last().map(|e| e.mark);
    observed + model.log_survival(censored_tail(seq), last_mark)
}
