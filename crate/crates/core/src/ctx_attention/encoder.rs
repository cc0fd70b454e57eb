use super::{attention_score, dot, fill_temporal_embedding, softmax, MarkModel};
use crate::error::{Error, Result};
use crate::event_data::Event;

/// Per-layer embeddings `h^(0)(t) .. h^(L)(t)` of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStack {
    layers: Vec<Vec<f64>>,
}

impl EmbeddingStack {
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `[h^(0); h^(1); ...; h^(L)]`.
    pub fn concat(&self) -> Vec<f64> {
        self.layers.concat()
    }

    pub fn width(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    fn logit(&self, weights: &[f64]) -> f64 {
        let mut off = 0;
        let mut total = 0.0;
        for layer in &self.layers {
            total += dot(layer, &weights[off..off + layer.len()]);
            off += layer.len();
        }
        total
    }
}

/// Encoder evaluated incrementally over a growing history.
///
/// Keys and values of every history event are cached per layer, so a query
/// costs `O(L * N)` and appending an event costs one query.
#[derive(Debug, Clone)]
pub struct EncoderState<'m> {
    model: &'m MarkModel,
    times: Vec<f64>,
    marks: Vec<usize>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl<'m> EncoderState<'m> {
    pub fn new(model: &'m MarkModel) -> Self {
        let l = model.config.layers;
        Self {
            model,
            times: Vec::new(),
            marks: Vec::new(),
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
        }
    }

    pub fn from_history(model: &'m MarkModel, history: &[Event]) -> Result<Self> {
        let mut state = Self::new(model);
        for e in history {
            state.observe(*e)?;
        }
        Ok(state)
    }

    pub fn model(&self) -> &'m MarkModel {
        self.model
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    pub fn last_mark(&self) -> Option<usize> {
        self.marks.last().copied()
    }

    fn check_mask(&self, t: f64) -> Result<()> {
        match self.last_time() {
            Some(last) if last >= t => Err(Error::Masking {
                event_time: last,
                query_time: t,
            }),
            _ => Ok(()),
        }
    }

    fn query_unchecked(&self, z: &[f64], mark: usize) -> EmbeddingStack {
        let cfg = &self.model.config;
        let params = &self.model.params;
        let (dh, dv) = (cfg.head_qk(), cfg.head_value());
        let d_scale = cfg.total_width() as f64;
        let n = self.times.len();

        let mut layers = Vec::with_capacity(cfg.layers + 1);
        layers.push(params.base.row(mark).to_vec());
        let mut x = Vec::with_capacity(cfg.input_width());
        for (l, lp) in params.layers.iter().enumerate() {
            let prev = &layers[l];
            x.clear();
            x.extend_from_slice(z);
            x.extend_from_slice(prev);
            let q = lp.query.matvec(&x);
            let mut update = vec![0.0; cfg.d_model];
            for h in 0..cfg.n_heads {
                let qh = &q[h * dh..(h + 1) * dh];
                let mut c = 0.0;
                let out = &mut update[h * dv..(h + 1) * dv];
                for i in 0..n {
                    let key = &self.keys[l][i * cfg.d_qk + h * dh..i * cfg.d_qk + (h + 1) * dh];
                    let alpha = attention_score(key, qh, d_scale).0.exp();
                    c += alpha;
                    let val = &self.values[l][i * cfg.d_model + h * dv..i * cfg.d_model + (h + 1) * dv];
                    for (o, v) in out.iter_mut().zip(val) {
                        *o += alpha * v;
                    }
                }
                let norm = 1.0 + c;
                out.iter_mut().for_each(|o| *o = (*o / norm).tanh());
            }
            let next: Vec<f64> = prev.iter().zip(&update).map(|(a, b)| a + b).collect();
            layers.push(next);
        }
        EmbeddingStack { layers }
    }

    fn embed_time(&self, t: f64) -> Vec<f64> {
        let mut z = vec![0.0; self.model.config.total_width()];
        fill_temporal_embedding(t, &mut z);
        z
    }

    /// Embedding stack of `(t, mark)` given the current history.
    pub fn query(&self, t: f64, mark: usize) -> Result<EmbeddingStack> {
        self.check_mask(t)?;
        if mark >= self.model.config.num_marks {
            return Err(Error::Shape(format!("mark {mark} out of range")));
        }
        Ok(self.query_unchecked(&self.embed_time(t), mark))
    }

    /// Stacks for every mark at time `t`.
    pub fn query_all(&self, t: f64) -> Result<Vec<EmbeddingStack>> {
        self.check_mask(t)?;
        let z = self.embed_time(t);
        Ok((0..self.model.config.num_marks)
            .map(|k| self.query_unchecked(&z, k))
            .collect())
    }

    /// `p(k | t)` for all marks, together with the per-mark stacks.
    pub fn pmf_with_stacks(&self, t: f64) -> Result<(Vec<f64>, Vec<EmbeddingStack>)> {
        let stacks = self.query_all(t)?;
        let cls = &self.model.params.classifier;
        let logits: Vec<f64> = stacks
            .iter()
            .enumerate()
            .map(|(k, s)| s.logit(cls.row(k)))
            .collect();
        Ok((softmax(&logits), stacks))
    }

    pub fn pmf(&self, t: f64) -> Result<Vec<f64>> {
        Ok(self.pmf_with_stacks(t)?.0)
    }

    /// Appends an event whose stack was already computed by [`Self::query`].
    pub fn push(&mut self, event: Event, stack: &EmbeddingStack) -> Result<()> {
        self.check_mask(event.time)?;
        let z = self.embed_time(event.time);
        let mut x = Vec::with_capacity(self.model.config.input_width());
        for (l, lp) in self.model.params.layers.iter().enumerate() {
            x.clear();
            x.extend_from_slice(&z);
            x.extend_from_slice(stack.layer(l));
            self.keys[l].extend(lp.key.matvec(&x));
            self.values[l].extend(lp.value.matvec(&x));
        }
        self.times.push(event.time);
        self.marks.push(event.mark);
        Ok(())
    }

    pub fn observe(&mut self, event: Event) -> Result<()> {
        let stack = self.query(event.time, event.mark)?;
        self.push(event, &stack)
    }
}

/// `p(. | t)` given `history`; every history event must precede `t`.
pub fn mark_pmf(model: &MarkModel, history: &[Event], t: f64) -> Result<Vec<f64>> {
    EncoderState::from_history(model, history)?.pmf(t)
}
