//! Training loops and their history.

use std::io::Write;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::asi::{asi_noise_std, asi_step, AsiStep};
use super::{gp_step, udpsgd_step, AboveThreshold, Aggregation, CorpusPool, StepOutcome, UserPool};
use crate::accountant::{calibrate_noise, calibrate_noise_group, calibrate_noise_naive_group, GroupConversion};
use crate::corpus::{poisson_subsample, select_records, Record, Scorer, SelectionStrategy, UserCorpus};
use crate::error::{Error, Result};
use crate::models::{perplexity, CharLm, Model};
use crate::rng::{derived_seed, stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    GroupPrivacy,
    UserWise,
    AsiFiltered,
}

/// How group privacy calibrates its noise multiplier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAccounting {
    /// Tight mixture-of-Gaussians accounting.
    #[default]
    Mog,
    /// Record-level accounting followed by the generic group conversion.
    Naive,
    /// As `Naive`, with the conversion's alternative δ factor.
    NaiveLiteral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mechanism: Mechanism,
    /// `f64::INFINITY` selects the non-private path.
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    pub eta: f64,
    pub steps: u64,
    /// Expected records per step for group privacy, users per step for
    /// user-wise DP-SGD. Ignored by the filtered variant.
    pub batch_size: f64,
    pub k: usize,
    pub strategy: SelectionStrategy,
    pub tau: f64,
    pub svt_sensitivity: f64,
    /// Skips calibration when set.
    pub sigma: Option<f64>,
    pub group_accounting: GroupAccounting,
    /// Evaluate every this many steps and at the last step; 0 disables.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::GroupPrivacy,
            epsilon: 8.0,
            delta: 1e-5,
            clip: 1.0,
            eta: 0.5,
            steps: 100,
            batch_size: 32.0,
            k: 1,
            strategy: SelectionStrategy::Random,
            tau: 0.1,
            svt_sensitivity: super::CONCENTRATION_SENSITIVITY,
            sigma: None,
            group_accounting: GroupAccounting::Mog,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn is_private(&self) -> bool {
        self.epsilon.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, value: f64| Err(Error::Config(format!("invalid {field}: {value}")));
        if !(self.epsilon > 0.0) {
            return bad("epsilon", self.epsilon);
        }
        if self.is_private() && !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta", self.delta);
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad("clip", self.clip);
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", self.eta);
        }
        if !(self.batch_size > 0.0 && self.batch_size.is_finite()) {
            return bad("batch_size", self.batch_size);
        }
        if self.k == 0 {
            return Err(Error::Config("invalid k: 0".into()));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad("tau", self.tau);
        }
        if !(self.svt_sensitivity > 0.0) {
            return bad("svt_sensitivity", self.svt_sensitivity);
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("sigma", s);
            }
        }
        if self.mechanism == Mechanism::AsiFiltered && !self.is_private() {
            return Err(Error::Config("asi_filtered requires a finite epsilon".into()));
        }
        Ok(())
    }
}

/// The noise multiplier each mechanism's accounting assigns to a corpus of
/// `n_units` users; zero on the non-private path.
pub fn noise_multiplier(config: &TrainConfig, n_units: usize) -> Result<f64> {
    if let Some(sigma) = config.sigma {
        return Ok(sigma);
    }
    if !config.is_private() || config.steps == 0 {
        return Ok(0.0);
    }
    let (eps, delta, steps) = (config.epsilon, config.delta, config.steps);
    let n = n_units as u64;
    match config.mechanism {
        Mechanism::GroupPrivacy => {
            let k = config.k as u64;
            let m = n * k;
            match config.group_accounting {
                GroupAccounting::Mog => calibrate_noise_group(k, eps, delta, m, config.batch_size, steps),
                GroupAccounting::Naive => {
                    calibrate_noise_naive_group(k, eps, delta, m, config.batch_size, steps, GroupConversion::Standard)
                }
                GroupAccounting::NaiveLiteral => {
                    calibrate_noise_naive_group(k, eps, delta, m, config.batch_size, steps, GroupConversion::Literal)
                }
            }
        }
        Mechanism::UserWise => calibrate_noise(eps, delta, n, config.batch_size, steps),
        Mechanism::AsiFiltered => calibrate_noise(eps / 2.0, delta / 2.0, n, n as f64, steps),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub loss: Option<f64>,
    pub eval_ppl: Option<f64>,
    pub clipped_fraction: f64,
    pub realized_batch: usize,
    pub halted: bool,
    pub included_users: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn rows(&self) -> &[HistoryRow] {
        &self.rows
    }

    /// Step at which the filtered variant halted.
    pub fn halted_at(&self) -> Option<u64> {
        self.rows.iter().find(|r| r.halted).map(|r| r.step)
    }

    pub fn final_eval_ppl(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_ppl)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.rows.is_empty() {
            w.write_record([
                "step",
                "loss",
                "eval_ppl",
                "clipped_fraction",
                "realized_batch",
                "halted",
                "included_users",
                "sigma",
            ])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn push(&mut self, step: u64, out: &StepOutcome, eval_ppl: Option<f64>, sigma: f64) {
        self.rows.push(HistoryRow {
            step,
            loss: out.loss,
            eval_ppl,
            clipped_fraction: out.clipped_fraction,
            realized_batch: out.batch_size_realized,
            halted: out.halted,
            included_users: out.included_users,
            sigma,
        });
    }
}

/// Loop parameters shared by group privacy and user-wise DP-SGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings {
    pub aggregation: Aggregation,
    pub steps: u64,
    pub eta: f64,
    /// Expected records (group privacy) or users (user-wise) per step.
    pub expected_batch: f64,
    pub k: usize,
    pub eval_every: u64,
}

impl LoopSettings {
    fn sigma(&self) -> f64 {
        match self.aggregation {
            Aggregation::Private { sigma, .. } => sigma,
            Aggregation::NonPrivate => 0.0,
        }
    }

    fn wants_eval(&self, step: u64) -> bool {
        self.eval_every > 0 && (step.is_multiple_of(self.eval_every) || step == self.steps)
    }
}

pub type Evaluator<'a, M> = &'a mut dyn FnMut(&M) -> Result<f64>;

fn at_step(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
        other => other,
    }
}

fn sampling_rate(expected: f64, population: usize) -> Result<f64> {
    if population == 0 {
        return Err(Error::EmptyCorpus);
    }
    let q = expected / population as f64;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!(
            "expected batch {expected} must lie in (0, {population}]"
        )));
    }
    Ok(q)
}

/// DP-SGD over a fixed list of records with Poisson batches.
pub fn run_group_privacy<M: Model>(
    model: &mut M,
    records: &[M::Example],
    settings: &LoopSettings,
    seed: u64,
    eval: Evaluator<'_, M>,
) -> Result<TrainHistory> {
    let q = sampling_rate(settings.expected_batch, records.len())?;
    let mut batch_rng = stream(seed, Stream::Batch);
    let mut noise_rng = stream(seed, Stream::Noise);
    let mut history = TrainHistory::default();
    for t in 1..=settings.steps {
        let idx = poisson_subsample(records.len(), q, &mut batch_rng)?;
        let batch: Vec<M::Example> = idx.iter().map(|&i| records[i].clone()).collect();
        let out = gp_step(model, &batch, settings.aggregation, settings.expected_batch, settings.eta, &mut noise_rng)
            .map_err(at_step(t))?;
        let ppl = if settings.wants_eval(t) { Some(eval(model)?) } else { None };
        history.push(t, &out, ppl, settings.sigma());
    }
    Ok(history)
}

/// User-wise DP-SGD with Poisson-sampled users.
pub fn run_userwise<M, P>(
    model: &mut M,
    pool: &P,
    settings: &LoopSettings,
    seed: u64,
    eval: Evaluator<'_, M>,
) -> Result<TrainHistory>
where
    M: Model,
    P: UserPool<Example = M::Example>,
{
    let n = pool.n_users();
    let q = sampling_rate(settings.expected_batch, n)?;
    let mut batch_rng = stream(seed, Stream::Batch);
    let mut record_rng = stream(seed, Stream::Records);
    let mut noise_rng = stream(seed, Stream::Noise);
    let mut history = TrainHistory::default();
    for t in 1..=settings.steps {
        let users = poisson_subsample(n, q, &mut batch_rng)?;
        let out = udpsgd_step(
            model,
            pool,
            &users,
            settings.k,
            settings.aggregation,
            settings.expected_batch,
            settings.eta,
            &mut record_rng,
            &mut noise_rng,
        )
        .map_err(at_step(t))?;
        let ppl = if settings.wants_eval(t) { Some(eval(model)?) } else { None };
        history.push(t, &out, ppl, settings.sigma());
    }
    Ok(history)
}

/// Filtered user-wise DP-SGD settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsiSettings {
    pub step: AsiStep,
    pub steps: u64,
    /// Budget of the AboveThreshold test.
    pub svt_epsilon: f64,
    pub svt_sensitivity: f64,
    pub sigma: f64,
    pub eval_every: u64,
}

/// Filtered user-wise DP-SGD; stops at the first failed concentration test.
pub fn run_asi<M, P>(
    model: &mut M,
    pool: &P,
    settings: &AsiSettings,
    seed: u64,
    eval: Evaluator<'_, M>,
) -> Result<TrainHistory>
where
    M: Model,
    P: UserPool<Example = M::Example>,
{
    let n = pool.n_users();
    let mut record_rng = stream(seed, Stream::Records);
    let mut filter_rng = stream(seed, Stream::Filter);
    let mut noise_rng = stream(seed, Stream::Noise);
    let threshold = 4.0 * n as f64 / 5.0;
    let svt = AboveThreshold::new(settings.svt_epsilon, threshold, settings.svt_sensitivity, &mut filter_rng)?;
    let mut history = TrainHistory::default();
    for t in 1..=settings.steps {
        let out = asi_step(
            model,
            pool,
            &settings.step,
            &svt,
            &mut record_rng as &mut dyn RngCore,
            &mut filter_rng,
            &mut noise_rng,
        )
        .map_err(at_step(t))?;
        let wants = settings.eval_every > 0 && (t % settings.eval_every == 0 || t == settings.steps || out.halted);
        let ppl = if wants { Some(eval(model)?) } else { None };
        history.push(t, &out, ppl, settings.sigma);
        if out.halted {
            break;
        }
    }
    Ok(history)
}

/// Trains the character model on `corpus` with the configured mechanism.
///
/// Group privacy first reduces every user to exactly `k` records (once, before
/// the loop) and then runs record-level DP-SGD on the reduced corpus.
/// Evaluation perplexity is measured on `eval_corpus`, or on the training
/// corpus when none is given.
pub fn train(
    model: CharLm,
    corpus: &UserCorpus,
    eval_corpus: Option<&UserCorpus>,
    config: &TrainConfig,
    seed: u64,
) -> Result<(CharLm, TrainHistory)> {
    config.validate()?;
    let mut model = model;
    let eval_records = eval_corpus.unwrap_or(corpus).flatten();
    let mut eval = |m: &CharLm| perplexity(m, eval_records.iter().copied());
    let reference = model.clone();
    let score = move |r: &Record| reference.record_perplexity(r).unwrap_or(f64::INFINITY);
    let scorer: Option<Scorer<'_>> = if config.strategy.needs_scorer() { Some(&score) } else { None };
    let sigma = noise_multiplier(config, corpus.n_units())?;
    let aggregation = if config.is_private() {
        Aggregation::Private { clip: config.clip, sigma }
    } else {
        Aggregation::NonPrivate
    };
    let settings = LoopSettings {
        aggregation,
        steps: config.steps,
        eta: config.eta,
        expected_batch: config.batch_size,
        k: config.k,
        eval_every: config.eval_every,
    };
    let history = match config.mechanism {
        Mechanism::GroupPrivacy => {
            let preprocess_seed = derived_seed(seed, Stream::Preprocess);
            let selected = select_records(corpus, config.strategy, config.k, scorer, preprocess_seed)?;
            let records: Vec<Record> = selected.flatten().into_iter().cloned().collect();
            run_group_privacy(&mut model, &records, &settings, seed, &mut eval)?
        }
        Mechanism::UserWise => {
            let pool = CorpusPool::new(corpus, config.strategy, scorer);
            run_userwise(&mut model, &pool, &settings, seed, &mut eval)?
        }
        Mechanism::AsiFiltered => {
            let pool = CorpusPool::new(corpus, config.strategy, scorer);
            let n = pool.n_users();
            let noise_std = asi_noise_std(config.tau, config.epsilon, config.delta, config.steps, n, sigma);
            let asi = AsiSettings {
                step: AsiStep { k: config.k, clip: config.clip, tau: config.tau, noise_std, eta: config.eta },
                steps: config.steps,
                svt_epsilon: config.epsilon / 2.0,
                svt_sensitivity: config.svt_sensitivity,
                sigma,
                eval_every: config.eval_every,
            };
            run_asi(&mut model, &pool, &asi, seed, &mut eval)?
        }
    };
    Ok((model, history))
}
