//! Differentiable models trained by the mechanisms.

mod char_lm;
mod checkpoint;
mod mean;

pub use char_lm::{CharLm, CharLmConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use mean::{MeanEstimationProblem, MeanModel};

use crate::corpus::Record;
use crate::error::{Error, Result};
use crate::mechanisms::GradientVector;

/// A model with a flat parameter vector and a per-example loss.
///
/// Implementations must be pure: `loss` and `loss_and_grad` read the
/// parameters only, so they may run concurrently on shared state.
pub trait Model: Sync {
    type Example: Clone + Send + Sync;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn loss(&self, example: &Self::Example) -> Result<f64>;

    fn loss_and_grad(&self, example: &Self::Example) -> Result<(f64, GradientVector)>;

    fn dim(&self) -> usize {
        self.params().len()
    }

    /// θ ← θ − η·g.
    fn apply_update(&mut self, gradient: &GradientVector, eta: f64) {
        for (p, g) in self.params_mut().iter_mut().zip(gradient.as_slice()) {
            *p -= eta * g;
        }
    }
}

/// exp of the token-weighted mean cross-entropy over all records.
///
/// Records too short to contain a prediction target carry no tokens and are
/// skipped.
pub fn perplexity<'a, I>(model: &CharLm, records: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Record>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for record in records {
        if record.len() < 2 {
            continue;
        }
        let (nll, n) = model.nll(record)?;
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok((total / count as f64).exp())
}
