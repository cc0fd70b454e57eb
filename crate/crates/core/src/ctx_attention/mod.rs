//! Continuous-time attention encoder and the softmax mark classifier.
//!
//! For a query `(t, k)` the encoder builds one embedding per layer: the base
//! layer is a learned vector per mark, and every further layer adds
//! `tanh(sum_i v_i alpha_i / (1 + C))` over the history strictly before `t`.
//! Keys, queries and values are linear maps of `[z(t); h^(l-1)]` where `z` is
//! the sinusoidal temporal embedding. All layers share the width `d_model`;
//! the temporal embedding and the attention scale use the concatenated width
//! `D = (L + 1) * d_model`.

mod encoder;
mod grad;
mod train;

pub use encoder::{mark_pmf, EmbeddingStack, EncoderState};
pub use grad::{mark_loglik, mark_loglik_and_grad, sequence_mark_loglik};
pub use train::{train_marks, Adam, TrainOptions, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scaled attention scores are clamped to this magnitude before `exp`.
pub const SCORE_CLAMP: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_marks: usize,
    pub layers: usize,
    pub d_model: usize,
    pub d_qk: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(num_marks: usize, layers: usize, d_model: usize) -> Self {
        Self {
            num_marks,
            layers,
            d_model,
            d_qk: d_model,
            n_heads: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.num_marks == 0 {
            return fail("K must be >= 1");
        }
        if self.layers == 0 {
            return fail("L must be >= 1");
        }
        if self.d_model == 0 || self.d_qk == 0 || self.n_heads == 0 {
            return fail("d_model, d_qk and n_heads must be >= 1");
        }
        if !self.d_qk.is_multiple_of(self.n_heads) {
            return fail("d_qk must be divisible by n_heads");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be divisible by n_heads");
        }
        Ok(())
    }

    /// Concatenated embedding width `(L + 1) * d_model`; also the temporal embedding width.
    pub fn total_width(&self) -> usize {
        (self.layers + 1) * self.d_model
    }

    /// Width of `[z(t); h^(l-1)]`.
    pub fn input_width(&self) -> usize {
        self.total_width() + self.d_model
    }

    pub(crate) fn head_qk(&self) -> usize {
        self.d_qk / self.n_heads
    }

    pub(crate) fn head_value(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x`.
    pub(crate) fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `out += self^T * y`.
    pub(crate) fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                for (o, w) in out.iter_mut().zip(self.row(r)) {
                    *o += yr * w;
                }
            }
        }
    }

    /// `self += a b^T`.
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            if ar != 0.0 {
                for (g, bc) in self.row_mut(r).iter_mut().zip(b) {
                    *g += ar * bc;
                }
            }
        }
    }

    fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Self { rows, cols, data }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `d_qk x (D + d_model)`
    pub query: Matrix,
    /// `d_qk x (D + d_model)`
    pub key: Matrix,
    /// `d_model x (D + d_model)`
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// Base embeddings, `K x d_model`.
    pub base: Matrix,
    pub layers: Vec<LayerParams>,
    /// Classifier weights, `K x D`.
    pub classifier: Matrix,
}

impl EncoderParams {
    /// Uniform `+-1/sqrt(fan_in)` weights and `0.01 * N(0, 1)` base embeddings.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (k, d, dw, din) = (
            config.num_marks,
            config.d_model,
            config.total_width(),
            config.input_width(),
        );
        let base_data = (0..k * d)
            .map(|_| 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let base = Matrix {
            rows: k,
            cols: d,
            data: base_data,
        };
        let scale = 1.0 / (din as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                query: Matrix::uniform(config.d_qk, din, scale, &mut rng),
                key: Matrix::uniform(config.d_qk, din, scale, &mut rng),
                value: Matrix::uniform(d, din, scale, &mut rng),
            })
            .collect();
        let classifier = Matrix::uniform(k, dw, 1.0 / (dw as f64).sqrt(), &mut rng);
        Ok(Self {
            base,
            layers,
            classifier,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        Self {
            base: z(&self.base),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    query: z(&l.query),
                    key: z(&l.key),
                    value: z(&l.value),
                })
                .collect(),
            classifier: z(&self.classifier),
        }
    }

    /// Named flat tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![("base".to_string(), self.base.data.as_slice())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{}.query", i + 1), &l.query.data));
            out.push((format!("layer{}.key", i + 1), &l.key.data));
            out.push((format!("layer{}.value", i + 1), &l.value.data));
        }
        out.push(("classifier".to_string(), &self.classifier.data));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.base.data];
        for l in &mut self.layers {
            out.push(&mut l.query.data);
            out.push(&mut l.key.data);
            out.push(&mut l.value.data);
        }
        out.push(&mut self.classifier.data);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Checks tensor shapes against `config`.
    pub fn check_shapes(&self, config: &EncoderConfig) -> Result<()> {
        config.validate()?;
        let (k, d, dw, din) = (
            config.num_marks,
            config.d_model,
            config.total_width(),
            config.input_width(),
        );
        let ok = |m: &Matrix, r: usize, c: usize| m.rows == r && m.cols == c && m.data.len() == r * c;
        let mut good = ok(&self.base, k, d)
            && ok(&self.classifier, k, dw)
            && self.layers.len() == config.layers;
        for l in &self.layers {
            good &= ok(&l.query, config.d_qk, din)
                && ok(&l.key, config.d_qk, din)
                && ok(&l.value, d, din);
        }
        if !good {
            return Err(Error::Shape("parameter shapes do not match encoder config".into()));
        }
        if !self.is_finite() {
            return Err(Error::Shape("parameters contain non-finite entries".into()));
        }
        Ok(())
    }
}

/// A trained encoder together with its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkModel {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl MarkModel {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: EncoderConfig) -> Result<Self> {
        let params = EncoderParams::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn num_marks(&self) -> usize {
        self.config.num_marks
    }
}

/// Sinusoidal embedding: even `d` gets `sin(t / 10^(4d/width))`, odd `d` gets
/// `cos(t / 10^(4(d-1)/width))`.
pub fn temporal_embedding(t: f64, width: usize) -> Vec<f64> {
    let mut z = vec![0.0; width];
    fill_temporal_embedding(t, &mut z);
    z
}

pub(crate) fn fill_temporal_embedding(t: f64, z: &mut [f64]) {
    let width = z.len() as f64;
    for (d, slot) in z.iter_mut().enumerate() {
        *slot = if d % 2 == 0 {
            (t / 10f64.powf(4.0 * d as f64 / width)).sin()
        } else {
            (t / 10f64.powf(4.0 * (d - 1) as f64 / width)).cos()
        };
    }
}

/// Scaled score `key . query / sqrt(d_scale)` clamped to `+-SCORE_CLAMP`, and
/// whether the clamp fired.
pub(crate) fn attention_score(key: &[f64], query: &[f64], d_scale: f64) -> (f64, bool) {
    let s = dot(key, query) / d_scale.sqrt();
    if s.abs() > SCORE_CLAMP {
        log::debug!("attention score {s} clamped to +-{SCORE_CLAMP}");
        (s.clamp(-SCORE_CLAMP, SCORE_CLAMP), true)
    } else {
        (s, false)
    }
}

/// Unnormalized attention weight `exp(key . query / sqrt(d_scale))`.
pub fn attention_weight(key: &[f64], query: &[f64], d_scale: f64) -> f64 {
    attention_score(key, query, d_scale).0.exp()
}

/// Softmax with max subtraction.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
