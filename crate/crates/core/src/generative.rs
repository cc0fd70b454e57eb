//! Ground-truth generators and Ogata thinning over any intensity model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::ctx_attention::{EncoderState, MarkModel};
use crate::error::{Error, Result};
use crate::event_data::{Dataset, Event, EventSequence, TAU_MIN};
use crate::lognorm_mix::MixtureParams;

/// Hazards above this rate (per time unit) are clamped.
pub const HAZARD_CAP: f64 = 1e6;

/// Safety factor applied to the grid maximum of a mixture hazard.
pub const BOUND_SAFETY: f64 = 1.2;

/// Exponential-kernel Hawkes process
/// `lambda(t) = mu + sum_{t_i < t} sum_j alpha_j beta_j exp(-beta_j (t - t_i))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub mu: f64,
    /// `(alpha_j, beta_j)` pairs.
    pub kernels: Vec<(f64, f64)>,
}

impl HawkesParams {
    pub fn new(mu: f64, kernels: Vec<(f64, f64)>) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::Sampler(format!("baseline rate must be >= 0, got {mu}")));
        }
        if kernels.iter().any(|&(a, b)| !(a >= 0.0 && b > 0.0)) {
            return Err(Error::Sampler("kernels need alpha >= 0 and beta > 0".into()));
        }
        let p = Self { mu, kernels };
        if p.branching_ratio() >= 1.0 {
            log::warn!(
                "Hawkes branching ratio {} >= 1: the process is not stationary",
                p.branching_ratio()
            );
        }
        Ok(p)
    }

    pub fn hawkes1() -> Self {
        Self {
            mu: 1.0,
            kernels: vec![(0.8, 1.0)],
        }
    }

    pub fn hawkes2() -> Self {
        Self {
            mu: 0.2,
            kernels: vec![(0.4, 1.0), (0.4, 20.0)],
        }
    }

    pub fn branching_ratio(&self) -> f64 {
        self.kernels.iter().map(|k| k.0).sum()
    }

    /// Long-run event rate `mu / (1 - sum alpha)`.
    pub fn stationary_rate(&self) -> f64 {
        self.mu / (1.0 - self.branching_ratio())
    }
}

/// Recursive Hawkes state: per-kernel excitation just after the last event.
#[derive(Debug, Clone, PartialEq)]
pub struct HawkesState {
    last_time: f64,
    excitation: Vec<f64>,
}

impl HawkesState {
    pub fn new(params: &HawkesParams) -> Self {
        Self {
            last_time: 0.0,
            excitation: vec![0.0; params.kernels.len()],
        }
    }

    fn decay_to(&mut self, params: &HawkesParams, t: f64) {
        let dt = t - self.last_time;
        for (e, &(_, beta)) in self.excitation.iter_mut().zip(&params.kernels) {
            *e *= (-beta * dt).exp();
        }
        self.last_time = t;
    }

    fn observe(&mut self, params: &HawkesParams, t: f64) {
        self.decay_to(params, t);
        for (e, &(alpha, beta)) in self.excitation.iter_mut().zip(&params.kernels) {
            *e += alpha * beta;
        }
    }

    /// Intensity at `t >= last_time`, counting every observed event.
    fn intensity(&self, params: &HawkesParams, t: f64) -> f64 {
        let dt = t - self.last_time;
        params.mu
            + self
                .excitation
                .iter()
                .zip(&params.kernels)
                .map(|(e, &(_, beta))| e * (-beta * dt).exp())
                .sum::<f64>()
    }
}

/// Hawkes intensity at `t` given the events of `history` strictly before `t`.
pub fn hawkes_intensity(params: &HawkesParams, t: f64, history: &[Event]) -> f64 {
    let mut state = HawkesState::new(params);
    for e in history.iter().take_while(|e| e.time < t) {
        state.observe(params, e.time);
    }
    state.intensity(params, t)
}

/// Exact Hawkes log-likelihood `sum ln lambda(t_i) - int_0^T lambda`.
pub fn hawkes_loglik(params: &HawkesParams, seq: &EventSequence) -> f64 {
    let mut state = HawkesState::new(params);
    let mut ll = 0.0;
    for e in seq.events() {
        ll += state.intensity(params, e.time).ln();
        state.observe(params, e.time);
    }
    let big_t = seq.window_end();
    let mut compensator = params.mu * big_t;
    for e in seq.events() {
        for &(alpha, beta) in &params.kernels {
            compensator += alpha * (1.0 - (-beta * (big_t - e.time)).exp());
        }
    }
    ll - compensator
}

/// A marked intensity model usable by the thinning sampler.
///
/// `upper_bound(state, from)` must dominate `total_intensity(state, t)` for
/// every `t > from` as long as no further event is observed.
pub trait IntensityModel {
    type State: Clone;

    fn num_marks(&self) -> usize;
    fn start(&self, history: &[Event]) -> Result<Self::State>;
    fn observe(&self, state: &mut Self::State, event: Event) -> Result<()>;
    fn total_intensity(&self, state: &Self::State, t: f64) -> f64;
    fn mark_probs(&self, state: &Self::State, t: f64) -> Result<Vec<f64>>;
    fn upper_bound(&self, state: &Self::State, from_t: f64) -> f64;
}

#[derive(Debug, Clone)]
pub struct HawkesModel {
    pub params: HawkesParams,
}

impl IntensityModel for HawkesModel {
    type State = HawkesState;

    fn num_marks(&self) -> usize {
        1
    }

    fn start(&self, history: &[Event]) -> Result<HawkesState> {
        let mut s = HawkesState::new(&self.params);
        for e in history {
            s.observe(&self.params, e.time);
        }
        Ok(s)
    }

    fn observe(&self, state: &mut HawkesState, event: Event) -> Result<()> {
        state.observe(&self.params, event.time);
        Ok(())
    }

    fn total_intensity(&self, state: &HawkesState, t: f64) -> f64 {
        state.intensity(&self.params, t)
    }

    fn mark_probs(&self, _state: &HawkesState, _t: f64) -> Result<Vec<f64>> {
        Ok(vec![1.0])
    }

    fn upper_bound(&self, state: &HawkesState, from_t: f64) -> f64 {
        // Non-increasing between events.
        state.intensity(&self.params, from_t.max(state.last_time))
    }
}

/// Homogeneous Poisson process with a fixed mark distribution.
#[derive(Debug, Clone)]
pub struct ConstantIntensity {
    pub rate: f64,
    pub mark_probs: Vec<f64>,
}

impl ConstantIntensity {
    pub fn new(rate: f64, num_marks: usize) -> Self {
        Self {
            rate,
            mark_probs: vec![1.0 / num_marks as f64; num_marks],
        }
    }
}

impl IntensityModel for ConstantIntensity {
    type State = ();

    fn num_marks(&self) -> usize {
        self.mark_probs.len()
    }

    fn start(&self, _history: &[Event]) -> Result<()> {
        Ok(())
    }

    fn observe(&self, _state: &mut (), _event: Event) -> Result<()> {
        Ok(())
    }

    fn total_intensity(&self, _state: &(), _t: f64) -> f64 {
        self.rate
    }

    fn mark_probs(&self, _state: &(), _t: f64) -> Result<Vec<f64>> {
        Ok(self.mark_probs.clone())
    }

    fn upper_bound(&self, _state: &(), _from_t: f64) -> f64 {
        self.rate
    }
}

/// Intensity implied by a fitted mixture and mark classifier:
/// `lambda_k(t) = g(tau | k_last) p(k | t) / (1 - G(tau | k_last))`.
#[derive(Debug, Clone, Copy)]
pub struct DtppIntensity<'a> {
    pub mixture: &'a MixtureParams,
    pub marks: &'a MarkModel,
}

#[derive(Debug, Clone)]
pub struct DtppState<'a> {
    encoder: EncoderState<'a>,
}

impl<'a> DtppState<'a> {
    fn last_time(&self) -> f64 {
        self.encoder.last_time().unwrap_or(0.0)
    }
}

pub fn dtpp_intensity<'a>(mixture: &'a MixtureParams, marks: &'a MarkModel) -> DtppIntensity<'a> {
    DtppIntensity { mixture, marks }
}

impl DtppIntensity<'_> {
    /// Hazard of the gap distribution after `prev_mark`, clamped at [`HAZARD_CAP`].
    pub fn hazard(&self, tau: f64, prev_mark: Option<usize>) -> f64 {
        let h = self.mixture.hazard(tau, prev_mark);
        if h > HAZARD_CAP || h.is_nan() {
            log::debug!("hazard {h} at tau={tau} clamped to {HAZARD_CAP}");
            HAZARD_CAP
        } else {
            h
        }
    }

    /// Grid maximum of the hazard over `[tau0, inf)` times [`BOUND_SAFETY`].
    pub fn hazard_bound(&self, tau0: f64, prev_mark: Option<usize>) -> f64 {
        let slot = self.mixture.slot(prev_mark);
        let active = slot
            .weights()
            .iter()
            .zip(slot.means().iter().zip(slot.scales()))
            .filter(|(w, _)| **w > 0.0)
            .map(|(_, (mu, s))| (*mu, *s));
        let (mut lo, mut hi, mut s_min) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
        for (mu, s) in active {
            lo = lo.min(mu - 10.0 * s);
            // Far-tail hazard of a narrow component peaks near ln tau = mu + 1.
            hi = hi.max(mu + (10.0 * s).max(3.0));
            s_min = s_min.min(s);
        }
        let tau0 = tau0.max(f64::MIN_POSITIVE);
        let start = tau0.ln().max(lo);
        let mut best = self.hazard(tau0, prev_mark);
        let mut best_x = tau0.ln();
        if start < hi {
            let n = (((hi - start) / (0.25 * s_min)).ceil() as usize).clamp(64, 512);
            let step = (hi - start) / n as f64;
            for i in 0..=n {
                let x = start + step * i as f64;
                let h = self.hazard(x.exp(), prev_mark);
                if h > best {
                    best = h;
                    best_x = x;
                }
            }
            // Local refinement around the coarse maximum.
            let (a, b) = ((best_x - step).max(start), (best_x + step).min(hi));
            for i in 0..=32 {
                let x = a + (b - a) * i as f64 / 32.0;
                best = best.max(self.hazard(x.exp(), prev_mark));
            }
        }
        (best * BOUND_SAFETY).min(HAZARD_CAP)
    }
}

impl<'a> IntensityModel for DtppIntensity<'a> {
    type State = DtppState<'a>;

    fn num_marks(&self) -> usize {
        self.marks.num_marks()
    }

    fn start(&self, history: &[Event]) -> Result<DtppState<'a>> {
        Ok(DtppState {
            encoder: EncoderState::from_history(self.marks, history)?,
        })
    }

    fn observe(&self, state: &mut DtppState<'a>, event: Event) -> Result<()> {
        state.encoder.observe(event)
    }

    fn total_intensity(&self, state: &DtppState<'a>, t: f64) -> f64 {
        self.hazard(t - state.last_time(), state.encoder.last_mark())
    }

    fn mark_probs(&self, state: &DtppState<'a>, t: f64) -> Result<Vec<f64>> {
        state.encoder.pmf(t)
    }

    fn upper_bound(&self, state: &DtppState<'a>, from_t: f64) -> f64 {
        self.hazard_bound(from_t - state.last_time(), state.encoder.last_mark())
    }
}

/// Stopping rule for the thinning sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Events(usize),
    Time(f64),
}

fn sample_mark<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Continues `history` with Ogata thinning until the horizon is reached.
///
/// The proposal bound is recomputed after every accepted and every rejected
/// proposal. An intensity above the bound aborts with [`Error::BoundViolation`].
pub fn thinning_sample<M: IntensityModel, R: Rng + ?Sized>(
    model: &M,
    history: &[Event],
    horizon: Horizon,
    rng: &mut R,
) -> Result<Vec<Event>> {
    let mut state = model.start(history)?;
    let mut t = history.last().map_or(0.0, |e| e.time);
    let mut out = Vec::new();
    let target = match horizon {
        Horizon::Events(p) => p,
        Horizon::Time(_) => usize::MAX,
    };
    while out.len() < target {
        let bound = model.upper_bound(&state, t);
        if !bound.is_finite() || bound < 0.0 {
            return Err(Error::Sampler(format!("invalid intensity bound {bound} at t={t}")));
        }
        if bound == 0.0 {
            if matches!(horizon, Horizon::Time(_)) {
                break;
            }
            return Err(Error::Sampler(format!("intensity vanished at t={t}")));
        }
        let wait = Exp::new(bound)
            .map_err(|e| Error::Sampler(e.to_string()))?
            .sample(rng);
        let proposal = t + wait;
        if let Horizon::Time(end) = horizon {
            if proposal >= end {
                break;
            }
        }
        if proposal <= t {
            // The wait underflowed relative to t; skip the zero-length step.
            t = f64::from_bits(t.to_bits() + 1);
            continue;
        }
        t = proposal;
        let lambda = model.total_intensity(&state, t);
        if lambda > bound * (1.0 + 1e-12) {
            return Err(Error::BoundViolation {
                time: t,
                intensity: lambda,
                bound,
            });
        }
        if rng.random::<f64>() * bound <= lambda {
            let probs = model.mark_probs(&state, t)?;
            let event = Event::new(t, sample_mark(&probs, rng));
            model.observe(&mut state, event)?;
            out.push(event);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    Hawkes1,
    Hawkes2,
    Poisson { rate: f64 },
    CyclicMarks { num_marks: usize },
}

impl SyntheticKind {
    pub fn num_marks(&self) -> usize {
        match self {
            SyntheticKind::CyclicMarks { num_marks } => *num_marks,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// RNG for sequence number `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const MAX_REDRAWS: usize = 100;

/// Samples `len` events; the window ends at the time the next event would occur.
/// Draws containing a gap below [`TAU_MIN`] are discarded and redrawn from
/// the same stream.
fn sample_one<M: IntensityModel>(model: &M, len: usize, rng: &mut ChaCha8Rng) -> Result<EventSequence> {
    for _ in 0..MAX_REDRAWS {
        let mut events = thinning_sample(model, &[], Horizon::Events(len + 1), rng)?;
        let first_ok = events.first().is_none_or(|e| e.time >= TAU_MIN);
        if first_ok && events.windows(2).all(|w| w[1].time - w[0].time >= TAU_MIN) {
            let end = events.pop().map(|e| e.time).unwrap_or(1.0);
            return EventSequence::new(events, end);
        }
    }
    Err(Error::Sampler(format!(
        "{MAX_REDRAWS} draws in a row contained an inter-event time below {TAU_MIN:e}"
    )))
}

fn cyclic_one(num_marks: usize, len: usize, rng: &mut ChaCha8Rng) -> Result<EventSequence> {
    let exp = Exp::new(1.0).expect("unit rate");
    let mut t = 0.0;
    let mut events = Vec::with_capacity(len);
    for i in 0..=len {
        t += exp.sample(rng);
        if i < len {
            events.push(Event::new(t, i % num_marks));
        }
    }
    EventSequence::new(events, t)
}

/// Generates train/dev/test splits of fixed-length sequences. Sequence `i`
/// (counted across splits in train, dev, test order) uses RNG stream `i`.
pub fn make_synthetic(
    kind: SyntheticKind,
    counts: SplitCounts,
    seq_len: usize,
    seed: u64,
) -> Result<Dataset> {
    if counts.train + counts.dev + counts.test == 0 {
        return Err(Error::Sampler("at least one sequence must be requested".into()));
    }
    if let SyntheticKind::CyclicMarks { num_marks: 0 } = kind {
        return Err(Error::Sampler("cyclic marks need K >= 1".into()));
    }
    let gen = |stream: u64| -> Result<EventSequence> {
        let mut rng = stream_rng(seed, stream);
        match kind {
            SyntheticKind::Hawkes1 => sample_one(&HawkesModel { params: HawkesParams::hawkes1() }, seq_len, &mut rng),
            SyntheticKind::Hawkes2 => sample_one(&HawkesModel { params: HawkesParams::hawkes2() }, seq_len, &mut rng),
            SyntheticKind::Poisson { rate } => sample_one(&ConstantIntensity::new(rate, 1), seq_len, &mut rng),
            SyntheticKind::CyclicMarks { num_marks } => cyclic_one(num_marks, seq_len, &mut rng),
        }
    };
    let mut ds = Dataset::new(kind.num_marks())?;
    let mut offset = 0u64;
    for (name, n) in [("train", counts.train), ("dev", counts.dev), ("test", counts.test)] {
        let seqs = (0..n as u64)
            .map(|i| gen(offset + i))
            .collect::<Result<Vec<_>>>()?;
        offset += n as u64;
        ds.add_split(name, seqs)?;
    }
    Ok(ds)
}
