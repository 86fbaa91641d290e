//! Per-step DP-SGD variants and their training loops.
//!
//! * Group privacy: record-level DP-SGD on a corpus preprocessed to `k`
//!   records per user, accounted with the mixture-of-Gaussians mechanism.
//! * User-wise DP-SGD: users are sampled, their `k` sampled records are
//!   averaged into one gradient which is clipped and noised.
//! * Filtered user-wise DP-SGD: full participation, gated by an
//!   AboveThreshold test on gradient concentration, outliers dropped.
//!
//! Per-example gradients may be computed in parallel but are always reduced
//! sequentially in batch order, so a step is bit-reproducible for a seed.

mod asi;
mod svt;
mod train;

pub use asi::{asi_noise_std, asi_step, AsiStep};
pub use svt::{
    above_threshold, concentration_score, filter_outliers, keep_probability, pairwise_distances, AboveThreshold,
    CONCENTRATION_SENSITIVITY,
};
pub use train::{
    noise_multiplier, run_asi, run_group_privacy, run_userwise, train, AsiSettings, Evaluator, GroupAccounting,
    HistoryRow, LoopSettings, Mechanism, TrainConfig, TrainHistory,
};

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::corpus::{sample_user_records, Record, Scorer, SelectionStrategy, UserCorpus};
use crate::error::{Error, Result};
use crate::models::Model;

/// Examples whose gradients are held in memory at once.
const GRADIENT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl From<Vec<f64>> for GradientVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl GradientVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn div_assign(&mut self, by: f64) {
        for a in &mut self.0 {
            *a /= by;
        }
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// Rescales `g` to norm at most `c`: `g / max(1, ‖g‖/c)`.
pub fn clip(g: &GradientVector, c: f64) -> Result<GradientVector> {
    let mut out = g.clone();
    clip_in_place(&mut out, c)?;
    Ok(out)
}

/// Clips in place; returns whether the vector was rescaled.
fn clip_in_place(g: &mut GradientVector, c: f64) -> Result<bool> {
    if !(c > 0.0) {
        return Err(Error::Domain(format!("clipping norm must be positive, got {c}")));
    }
    if !g.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let norm = g.norm();
    if norm <= c {
        return Ok(false);
    }
    g.div_assign(norm / c);
    Ok(true)
}

/// How clipped gradients are combined into the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    /// Clip at `clip`, sum, add `N(0, σ²C²)` per coordinate and divide by the
    /// expected batch size.
    Private { clip: f64, sigma: f64 },
    /// No clipping and no noise; mean over the realised batch.
    NonPrivate,
}

impl Aggregation {
    fn validate(&self) -> Result<()> {
        match *self {
            Self::Private { clip, sigma } if !(clip > 0.0 && sigma >= 0.0 && sigma.is_finite()) => Err(
                Error::Domain(format!("need clip > 0 and finite sigma >= 0, got clip {clip}, sigma {sigma}")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Absent when the step halted.
    pub noised_gradient: Option<GradientVector>,
    pub clipped_fraction: f64,
    pub batch_size_realized: usize,
    pub halted: bool,
    pub included_users: usize,
    /// Mean training loss over the examples the step touched.
    pub loss: Option<f64>,
}

/// A population of users from which a step draws `k` examples per user.
pub trait UserPool: Sync {
    type Example: Clone + Send + Sync;

    fn n_users(&self) -> usize;

    fn sample_user(&self, user: usize, k: usize, rng: &mut dyn RngCore) -> Result<Vec<Self::Example>>;
}

/// A corpus whose users are sampled with a selection strategy.
#[derive(Clone, Copy)]
pub struct CorpusPool<'a> {
    corpus: &'a UserCorpus,
    strategy: SelectionStrategy,
    scorer: Option<Scorer<'a>>,
}

impl<'a> CorpusPool<'a> {
    pub fn new(corpus: &'a UserCorpus, strategy: SelectionStrategy, scorer: Option<Scorer<'a>>) -> Self {
        Self { corpus, strategy, scorer }
    }
}

impl UserPool for CorpusPool<'_> {
    type Example = Record;

    fn n_users(&self) -> usize {
        self.corpus.n_units()
    }

    fn sample_user(&self, user: usize, k: usize, rng: &mut dyn RngCore) -> Result<Vec<Record>> {
        let (id, _) = self
            .corpus
            .unit_at(user)
            .ok_or_else(|| Error::UnknownUser(user.to_string()))?;
        sample_user_records(self.corpus, id, k, self.strategy, self.scorer, rng)
    }
}

/// Running sum of (possibly clipped) contributions.
struct Accumulator {
    sum: GradientVector,
    clipped: usize,
    count: usize,
    loss: f64,
    loss_terms: usize,
}

impl Accumulator {
    fn new(dim: usize) -> Self {
        Self { sum: GradientVector::zeros(dim), clipped: 0, count: 0, loss: 0.0, loss_terms: 0 }
    }

    fn push(&mut self, mut g: GradientVector, aggregation: Aggregation) -> Result<()> {
        if let Aggregation::Private { clip, .. } = aggregation {
            if clip_in_place(&mut g, clip)? {
                self.clipped += 1;
            }
        } else if !g.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.sum.add_assign(&g);
        self.count += 1;
        Ok(())
    }

    fn record_loss(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss is {loss}")));
        }
        self.loss += loss;
        self.loss_terms += 1;
        Ok(())
    }

    fn mean_loss(&self) -> Option<f64> {
        (self.loss_terms > 0).then(|| self.loss / self.loss_terms as f64)
    }

    fn clipped_fraction(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.clipped as f64 / self.count as f64
        }
    }

    /// Adds noise and normalises: by `expected` when private, by the realised
    /// count otherwise.
    fn finish(self, aggregation: Aggregation, expected: f64, noise_rng: &mut dyn RngCore) -> GradientVector {
        let mut g = self.sum;
        match aggregation {
            Aggregation::Private { clip, sigma } => {
                if sigma > 0.0 {
                    add_gaussian_noise(&mut g, sigma * clip, noise_rng);
                }
                g.div_assign(expected);
            }
            Aggregation::NonPrivate => {
                if self.count > 0 {
                    g.div_assign(self.count as f64);
                }
            }
        }
        g
    }
}

fn add_gaussian_noise(g: &mut GradientVector, std: f64, rng: &mut dyn RngCore) {
    for x in &mut g.0 {
        let z: f64 = StandardNormal.sample(rng);
        *x += std * z;
    }
}

/// One group-privacy step on a Poisson batch of records.
pub fn gp_step<M: Model>(
    model: &mut M,
    batch: &[M::Example],
    aggregation: Aggregation,
    b_expected: f64,
    eta: f64,
    noise_rng: &mut dyn RngCore,
) -> Result<StepOutcome> {
    aggregation.validate()?;
    check_expected(b_expected)?;
    let mut acc = Accumulator::new(model.dim());
    for chunk in batch.chunks(GRADIENT_CHUNK) {
        let m = &*model;
        let results: Vec<_> = chunk.par_iter().map(|ex| m.loss_and_grad(ex)).collect();
        for r in results {
            let (loss, g) = r?;
            acc.record_loss(loss)?;
            acc.push(g, aggregation)?;
        }
    }
    let clipped_fraction = acc.clipped_fraction();
    let loss = acc.mean_loss();
    let g = acc.finish(aggregation, b_expected, noise_rng);
    model.apply_update(&g, eta);
    Ok(StepOutcome {
        noised_gradient: Some(g),
        clipped_fraction,
        batch_size_realized: batch.len(),
        halted: false,
        included_users: batch.len(),
        loss,
    })
}

fn check_expected(expected: f64) -> Result<()> {
    if !(expected > 0.0 && expected.is_finite()) {
        return Err(Error::Domain(format!("expected batch size must be positive, got {expected}")));
    }
    Ok(())
}

/// Draws `k` examples for each listed user, in list order.
fn sample_users<P: UserPool>(
    pool: &P,
    users: &[usize],
    k: usize,
    record_rng: &mut dyn RngCore,
) -> Result<Vec<Vec<P::Example>>> {
    users.iter().map(|&u| pool.sample_user(u, k, record_rng)).collect()
}

/// Mean loss and averaged gradient of one user's sampled examples.
fn user_gradient<M: Model>(model: &M, examples: &[M::Example]) -> Result<(f64, GradientVector)> {
    let mut iter = examples.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Domain("user contributed no examples".into()))?;
    let (mut loss, mut sum) = model.loss_and_grad(first)?;
    for ex in iter {
        let (l, g) = model.loss_and_grad(ex)?;
        loss += l;
        sum.add_assign(&g);
    }
    let n = examples.len() as f64;
    if examples.len() > 1 {
        sum.div_assign(n);
    }
    Ok((loss / n, sum))
}

/// Per-user averaged gradients of the given examples, in user order.
fn user_gradients<M: Model>(model: &M, per_user: &[Vec<M::Example>]) -> Result<Vec<(f64, GradientVector)>> {
    per_user.par_iter().map(|ex| user_gradient(model, ex)).collect()
}

/// One user-wise DP-SGD step on the given user batch.
#[allow(clippy::too_many_arguments)]
pub fn udpsgd_step<M, P>(
    model: &mut M,
    pool: &P,
    user_batch: &[usize],
    k: usize,
    aggregation: Aggregation,
    n_expected: f64,
    eta: f64,
    record_rng: &mut dyn RngCore,
    noise_rng: &mut dyn RngCore,
) -> Result<StepOutcome>
where
    M: Model,
    P: UserPool<Example = M::Example>,
{
    aggregation.validate()?;
    check_expected(n_expected)?;
    let per_user = sample_users(pool, user_batch, k, record_rng)?;
    let mut acc = Accumulator::new(model.dim());
    for chunk in per_user.chunks(GRADIENT_CHUNK) {
        for (loss, g) in user_gradients(&*model, chunk)? {
            acc.record_loss(loss)?;
            acc.push(g, aggregation)?;
        }
    }
    let clipped_fraction = acc.clipped_fraction();
    let loss = acc.mean_loss();
    let g = acc.finish(aggregation, n_expected, noise_rng);
    model.apply_update(&g, eta);
    Ok(StepOutcome {
        noised_gradient: Some(g),
        clipped_fraction,
        batch_size_realized: user_batch.len(),
        halted: false,
        included_users: user_batch.len(),
        loss,
    })
}
