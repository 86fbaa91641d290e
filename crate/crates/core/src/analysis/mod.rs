//! Mechanism-comparison analytics: effective noise of standard vs filtered
//! user-wise DP-SGD, gradient concentration, and hyperparameter sweeps.
//!
//! Effective noise is the per-coordinate standard deviation of the noise
//! added to the averaged gradient.

use std::io::Write;

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::accountant::calibrate_noise;
use crate::corpus::{SelectionStrategy, UserCorpus};
use crate::error::{Error, Result};
use crate::mechanisms::{asi_noise_std, pairwise_distances, train, TrainConfig, UserPool};
use crate::models::{perplexity, CharLm, CharLmConfig, Model};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseComparison {
    pub ratios: Vec<f64>,
    pub standard: Vec<f64>,
    pub asi: Vec<f64>,
    pub sigma_std: f64,
    pub sigma_asi: f64,
    /// τ/C at which the filtered mechanism's noise reaches the standard one.
    pub crossover: Option<f64>,
}

/// Noise of both mechanisms with full participation over `n_users` users
/// for `steps` steps, across the τ/C values in `ratios`.
///
/// The standard mechanism is calibrated on the full `(ε, δ)` budget, the
/// filtered one on `(ε/2, δ/2)`. Neither depends on the per-user record
/// count once gradients are averaged per user.
pub fn effective_noise_curves(
    epsilon: f64,
    delta: f64,
    steps: u64,
    n_users: u64,
    clip: f64,
    ratios: &[f64],
) -> Result<NoiseComparison> {
    let n = n_users as f64;
    let sigma_std = calibrate_noise(epsilon, delta, n_users, n, steps)?;
    let sigma_asi = calibrate_noise(epsilon / 2.0, delta / 2.0, n_users, n, steps)?;
    noise_curves_with(epsilon, delta, steps, n_users, clip, ratios, sigma_std, sigma_asi)
}

/// As [`effective_noise_curves`] with both noise multipliers given.
#[allow(clippy::too_many_arguments)]
pub fn noise_curves_with(
    epsilon: f64,
    delta: f64,
    steps: u64,
    n_users: u64,
    clip: f64,
    ratios: &[f64],
    sigma_std: f64,
    sigma_asi: f64,
) -> Result<NoiseComparison> {
    if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Domain("ratio grid must be nonempty and positive".into()));
    }
    if !(clip > 0.0) || n_users == 0 {
        return Err(Error::Domain("need clip > 0 and at least one user".into()));
    }
    let n = n_users as usize;
    let standard_level = standard_noise_std(sigma_std, clip, n as f64);
    let standard = vec![standard_level; ratios.len()];
    let asi: Vec<f64> = ratios
        .iter()
        .map(|r| asi_noise_std(r * clip, epsilon, delta, steps, n, sigma_asi))
        .collect();
    let crossover = crossing(ratios, &standard, &asi);
    Ok(NoiseComparison { ratios: ratios.to_vec(), standard, asi, sigma_std, sigma_asi, crossover })
}

/// Per-coordinate std of user-wise DP-SGD noise on the averaged gradient.
pub fn standard_noise_std(sigma: f64, clip: f64, n_expected: f64) -> f64 {
    sigma * clip / n_expected
}

/// First grid interval where `b − a` turns nonnegative, linearly
/// interpolated.
fn crossing(x: &[f64], a: &[f64], b: &[f64]) -> Option<f64> {
    let diff: Vec<f64> = a.iter().zip(b).map(|(a, b)| b - a).collect();
    if diff[0] >= 0.0 {
        return (diff[0] == 0.0).then_some(x[0]);
    }
    for i in 1..x.len() {
        if diff[i] >= 0.0 {
            let t = -diff[i - 1] / (diff[i] - diff[i - 1]);
            return Some(x[i - 1] + t * (x[i] - x[i - 1]));
        }
    }
    None
}

/// Quantiles of pairwise distances between per-user gradients, divided by
/// the median gradient norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSummary {
    pub n_users: usize,
    pub median_norm: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub max: f64,
}

/// Probes `n_probe_users` users (without replacement), averages each one's
/// `k` sampled gradients and summarises their normalised pairwise distances.
pub fn measure_concentration<M, P>(
    model: &M,
    pool: &P,
    k: usize,
    n_probe_users: usize,
    rng: &mut dyn RngCore,
) -> Result<ConcentrationSummary>
where
    M: Model,
    P: UserPool<Example = M::Example>,
{
    if n_probe_users < 2 || n_probe_users > pool.n_users() {
        return Err(Error::Domain(format!(
            "probe size must lie in [2, {}], got {n_probe_users}",
            pool.n_users()
        )));
    }
    let mut users = index::sample(rng, pool.n_users(), n_probe_users).into_vec();
    users.sort_unstable();
    let mut grads = Vec::with_capacity(users.len());
    for &u in &users {
        let examples = pool.sample_user(u, k, rng)?;
        let mut sum = model.loss_and_grad(&examples[0])?.1;
        for ex in &examples[1..] {
            sum.add_assign(&model.loss_and_grad(ex)?.1);
        }
        sum.div_assign(examples.len() as f64);
        grads.push(sum);
    }
    let norms: Vec<f64> = grads.iter().map(|g| g.norm()).collect();
    let median_norm = quantile(&norms, 0.5);
    let n = grads.len();
    let d = pairwise_distances(&grads);
    let scale = if median_norm > 0.0 { median_norm } else { 1.0 };
    let pairs: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d[i * n + j] / scale)
        .collect();
    Ok(ConcentrationSummary {
        n_users: n,
        median_norm,
        q10: quantile(&pairs, 0.1),
        q50: quantile(&pairs, 0.5),
        q90: quantile(&pairs, 0.9),
        max: pairs.iter().copied().fold(0.0, f64::max),
    })
}

/// Linear-interpolation quantile of unsorted data.
fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Values swept over; an empty axis keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub clip: Vec<f64>,
    #[serde(default)]
    pub batch_size: Vec<f64>,
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub strategy: Vec<SelectionStrategy>,
}

impl SweepGrid {
    /// Cartesian product of the axes applied to `base`, in axis order.
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        fn axis<T: Clone>(values: &[T], default: T) -> Vec<T> {
            if values.is_empty() {
                vec![default]
            } else {
                values.to_vec()
            }
        }
        let mut out = Vec::new();
        for clip in axis(&self.clip, base.clip) {
            for batch_size in axis(&self.batch_size, base.batch_size) {
                for k in axis(&self.k, base.k) {
                    for epsilon in axis(&self.epsilon, base.epsilon) {
                        for strategy in axis(&self.strategy, base.strategy) {
                            out.push(TrainConfig { clip, batch_size, k, epsilon, strategy, ..base.clone() });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub seed: u64,
    pub clip: f64,
    pub batch_size: f64,
    pub k: usize,
    pub epsilon: f64,
    pub strategy: String,
    pub sigma: Option<f64>,
    pub final_ppl: Option<f64>,
    pub error: Option<String>,
}

/// Trains every grid cell once per seed. A failing cell is recorded with its
/// error and the sweep carries on.
pub fn sweep(
    base: &TrainConfig,
    grid: &SweepGrid,
    model_config: CharLmConfig,
    corpus: &UserCorpus,
    eval_corpus: Option<&UserCorpus>,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(base);
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let eval = eval_corpus.unwrap_or(corpus);
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for (cell, config) in cells.iter().enumerate() {
        for &seed in seeds {
            let outcome = CharLm::init(model_config, seed).and_then(|m| train(m, corpus, Some(eval), config, seed));
            let (sigma, final_ppl, error) = match outcome {
                Ok((model, history)) => {
                    let ppl = match history.final_eval_ppl() {
                        Some(p) => Ok(p),
                        None => perplexity(&model, eval.flatten()),
                    };
                    let sigma = history.rows().first().map(|r| r.sigma);
                    match ppl {
                        Ok(p) => (sigma, Some(p), None),
                        Err(e) => (sigma, None, Some(e.to_string())),
                    }
                }
                Err(e) => (None, None, Some(e.to_string())),
            };
            rows.push(SweepRow {
                cell,
                seed,
                clip: config.clip,
                batch_size: config.batch_size,
                k: config.k,
                epsilon: config.epsilon,
                strategy: strategy_name(&config.strategy),
                sigma,
                final_ppl,
                error,
            });
        }
    }
    Ok(rows)
}

fn strategy_name(s: &SelectionStrategy) -> String {
    match s {
        SelectionStrategy::RandomChunk { max_seq_len } => format!("random_chunk:{max_seq_len}"),
        other => serde_json::to_value(other)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
    }
}

/// Mean final perplexity per cell over the seeds that succeeded.
pub fn mean_by_cell(rows: &[SweepRow]) -> Vec<(usize, Option<f64>)> {
    let n_cells = rows.iter().map(|r| r.cell + 1).max().unwrap_or(0);
    (0..n_cells)
        .map(|cell| {
            let ppl: Vec<f64> = rows.iter().filter(|r| r.cell == cell).filter_map(|r| r.final_ppl).collect();
            (cell, (!ppl.is_empty()).then(|| ppl.iter().sum::<f64>() / ppl.len() as f64))
        })
        .collect()
}

/// `kind,ratio,standard_noise,asi_noise`; one `curve` row per grid point and a
/// final `crossover` row (empty ratio when the curves do not meet).
pub fn write_noise_curves<W: Write>(cmp: &NoiseComparison, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "ratio", "standard_noise", "asi_noise"])?;
    for ((r, s), a) in cmp.ratios.iter().zip(&cmp.standard).zip(&cmp.asi) {
        w.write_record(["curve".to_string(), r.to_string(), s.to_string(), a.to_string()])?;
    }
    let level = cmp.standard[0].to_string();
    match cmp.crossover {
        Some(x) => w.write_record(["crossover".to_string(), x.to_string(), level.clone(), level])?,
        None => w.write_record(["crossover", "", &level, ""])?,
    }
    w.flush()?;
    Ok(())
}

pub fn write_concentration<W: Write>(summaries: &[ConcentrationSummary], writer: W) -> Result<()> {
    write_rows(summaries, &["n_users", "median_norm", "q10", "q50", "q90", "max"], writer)
}

pub fn write_sweep<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    write_rows(
        rows,
        &["cell", "seed", "clip", "batch_size", "k", "epsilon", "strategy", "sigma", "final_ppl", "error"],
        writer,
    )
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], header: &[&str], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
