//! Byte-level MLP language model with hand-written backpropagation.
//!
//! Each position `p ≥ 1` of a record is predicted from the `context` tokens
//! before it (left-padded with the separator): embeddings are concatenated,
//! passed through one tanh hidden layer and a softmax output layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::corpus::{Record, SEPARATOR, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::mechanisms::GradientVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharLmConfig {
    pub vocab: usize,
    pub d_emb: usize,
    pub context: usize,
    pub d_hidden: usize,
}

impl Default for CharLmConfig {
    fn default() -> Self {
        Self { vocab: VOCAB_SIZE, d_emb: 16, context: 8, d_hidden: 64 }
    }
}

impl CharLmConfig {
    pub fn new(d_emb: usize, context: usize, d_hidden: usize) -> Self {
        Self { vocab: VOCAB_SIZE, d_emb, context, d_hidden }
    }

    pub fn n_params(&self) -> usize {
        let l = Layout::new(self);
        l.b2 + self.vocab
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.context == 0 || self.d_hidden == 0 {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if self.vocab < VOCAB_SIZE {
            return Err(Error::Config(format!("vocab must be at least {VOCAB_SIZE}, got {}", self.vocab)));
        }
        Ok(())
    }
}

/// Offsets of each block in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Layout {
    fn new(c: &CharLmConfig) -> Self {
        let emb = 0;
        let w1 = emb + c.vocab * c.d_emb;
        let b1 = w1 + c.context * c.d_emb * c.d_hidden;
        let w2 = b1 + c.d_hidden;
        let b2 = w2 + c.d_hidden * c.vocab;
        Self { emb, w1, b1, w2, b2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharLm {
    config: CharLmConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Per-position activations kept for the backward pass.
struct Scratch {
    ctx: Vec<usize>,
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    dh: Vec<f64>,
    dx: Vec<f64>,
}

impl Scratch {
    fn new(c: &CharLmConfig) -> Self {
        Self {
            ctx: vec![0; c.context],
            x: vec![0.0; c.context * c.d_emb],
            h: vec![0.0; c.d_hidden],
            z: vec![0.0; c.vocab],
            dh: vec![0.0; c.d_hidden],
            dx: vec![0.0; c.context * c.d_emb],
        }
    }
}

impl CharLm {
    /// Scaled-uniform initialisation: embeddings in ±0.1, weight matrices in
    /// ±1/√fan_in, biases zero.
    pub fn init(config: CharLmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = vec![0.0; config.n_params()];
        let fan1 = 1.0 / ((config.context * config.d_emb) as f64).sqrt();
        let fan2 = 1.0 / (config.d_hidden as f64).sqrt();
        for (i, p) in params.iter_mut().enumerate() {
            let scale = if i < layout.w1 {
                0.1
            } else if i < layout.b1 {
                fan1
            } else if i < layout.w2 {
                0.0
            } else if i < layout.b2 {
                fan2 * 0.1
            } else {
                0.0
            };
            if scale > 0.0 {
                *p = rng.random_range(-scale..scale);
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: CharLmConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.n_params() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, model needs {}",
                params.len(),
                config.n_params()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        Ok(Self { config, layout: Layout::new(&config), params })
    }

    pub fn config(&self) -> &CharLmConfig {
        &self.config
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Summed negative log-likelihood and number of predicted tokens.
    pub fn nll(&self, record: &Record) -> Result<(f64, usize)> {
        let tokens = check_record(record)?;
        let mut s = Scratch::new(&self.config);
        let mut total = 0.0;
        for p in 1..tokens.len() {
            total += self.forward(tokens, p, &mut s);
        }
        Ok((total, tokens.len() - 1))
    }

    /// exp of the record's mean cross-entropy.
    pub fn record_perplexity(&self, record: &Record) -> Result<f64> {
        let (nll, n) = self.nll(record)?;
        Ok((nll / n as f64).exp())
    }

    fn fill_context(&self, tokens: &[u16], p: usize, ctx: &mut [usize]) {
        let c = self.config.context;
        for (j, slot) in ctx.iter_mut().enumerate() {
            let back = c - j;
            *slot = if back > p { SEPARATOR as usize } else { tokens[p - back] as usize };
        }
    }

    /// Runs one position forward, leaving activations in `s`; returns the
    /// cross-entropy and turns `s.z` into the softmax probabilities.
    fn forward(&self, tokens: &[u16], p: usize, s: &mut Scratch) -> f64 {
        let CharLmConfig { vocab, d_emb, d_hidden, .. } = self.config;
        let l = self.layout;
        let w = &self.params;
        self.fill_context(tokens, p, &mut s.ctx);
        for (j, &t) in s.ctx.iter().enumerate() {
            s.x[j * d_emb..(j + 1) * d_emb].copy_from_slice(&w[l.emb + t * d_emb..l.emb + (t + 1) * d_emb]);
        }
        s.h.copy_from_slice(&w[l.b1..l.b1 + d_hidden]);
        for (i, &xi) in s.x.iter().enumerate() {
            let row = &w[l.w1 + i * d_hidden..l.w1 + (i + 1) * d_hidden];
            for (a, &wij) in s.h.iter_mut().zip(row) {
                *a += xi * wij;
            }
        }
        for a in s.h.iter_mut() {
            *a = a.tanh();
        }
        s.z.copy_from_slice(&w[l.b2..l.b2 + vocab]);
        for (j, &hj) in s.h.iter().enumerate() {
            let row = &w[l.w2 + j * vocab..l.w2 + (j + 1) * vocab];
            for (z, &wjv) in s.z.iter_mut().zip(row) {
                *z += hj * wjv;
            }
        }
        let target = tokens[p] as usize;
        let max = s.z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let target_logit = s.z[target] - max;
        let mut sum = 0.0;
        for z in s.z.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        for z in s.z.iter_mut() {
            *z /= sum;
        }
        sum.ln() - target_logit
    }

    /// Accumulates `scale · ∂loss/∂θ` of the position held in `s` into `grad`.
    fn backward(&self, target: usize, scale: f64, s: &mut Scratch, grad: &mut [f64]) {
        let CharLmConfig { vocab, d_emb, d_hidden, .. } = self.config;
        let l = self.layout;
        let w = &self.params;
        // s.z now holds dL/dz.
        s.z[target] -= 1.0;
        for z in s.z.iter_mut() {
            *z *= scale;
        }
        for (g, &dz) in grad[l.b2..l.b2 + vocab].iter_mut().zip(&s.z) {
            *g += dz;
        }
        for j in 0..d_hidden {
            let hj = s.h[j];
            let row = &w[l.w2 + j * vocab..l.w2 + (j + 1) * vocab];
            let grow = &mut grad[l.w2 + j * vocab..l.w2 + (j + 1) * vocab];
            let mut acc = 0.0;
            for ((g, &wjv), &dz) in grow.iter_mut().zip(row).zip(&s.z) {
                *g += hj * dz;
                acc += wjv * dz;
            }
            s.dh[j] = acc * (1.0 - hj * hj);
        }
        for (g, &da) in grad[l.b1..l.b1 + d_hidden].iter_mut().zip(&s.dh) {
            *g += da;
        }
        for (i, &xi) in s.x.iter().enumerate() {
            let row = &w[l.w1 + i * d_hidden..l.w1 + (i + 1) * d_hidden];
            let grow = &mut grad[l.w1 + i * d_hidden..l.w1 + (i + 1) * d_hidden];
            let mut acc = 0.0;
            for ((g, &wih), &da) in grow.iter_mut().zip(row).zip(&s.dh) {
                *g += xi * da;
                acc += wih * da;
            }
            s.dx[i] = acc;
        }
        for (j, &t) in s.ctx.iter().enumerate() {
            let gemb = &mut grad[l.emb + t * d_emb..l.emb + (t + 1) * d_emb];
            for (g, &d) in gemb.iter_mut().zip(&s.dx[j * d_emb..(j + 1) * d_emb]) {
                *g += d;
            }
        }
    }
}

fn check_record(record: &Record) -> Result<&[u16]> {
    if record.len() < 2 {
        return Err(Error::RecordTooShort(record.len()));
    }
    Ok(record.tokens())
}

impl Model for CharLm {
    type Example = Record;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mean next-token cross-entropy over the record.
    fn loss(&self, record: &Record) -> Result<f64> {
        let (nll, n) = self.nll(record)?;
        Ok(nll / n as f64)
    }

    fn loss_and_grad(&self, record: &Record) -> Result<(f64, GradientVector)> {
        let tokens = check_record(record)?;
        let n = tokens.len() - 1;
        let scale = 1.0 / n as f64;
        let mut s = Scratch::new(&self.config);
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for p in 1..tokens.len() {
            total += self.forward(tokens, p, &mut s);
            self.backward(tokens[p] as usize, scale, &mut s, &mut grad);
        }
        Ok((total * scale, GradientVector::from(grad)))
    }
}
