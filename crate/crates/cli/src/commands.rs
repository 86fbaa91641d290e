//! Subcommand implementations. Every file output lands in the run's
//! `out_dir`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;
use userdp::accountant::{AccountingReport, Discretization};
use userdp::analysis::{
    effective_noise_curves, measure_concentration, sweep, write_concentration, write_noise_curves, write_sweep,
};
use userdp::corpus::{corpus_stats, select_records, write_corpus_jsonl, Record, Scorer, UnitStats};
use userdp::mechanisms::{noise_multiplier, train, CorpusPool, GroupAccounting, Mechanism, TrainConfig};
use userdp::models::{save_checkpoint, CharLm};
use userdp::rng::{derived_seed, stream, Stream};
use userdp::Error;

use crate::config::{AnalysisMode, RunConfig};

/// How a successful command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Halted(u64),
}

fn out_dir(config: &RunConfig) -> anyhow::Result<&Path> {
    fs::create_dir_all(&config.out_dir)?;
    Ok(&config.out_dir)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn mechanism_label(tc: &TrainConfig) -> String {
    match tc.mechanism {
        Mechanism::GroupPrivacy => {
            let acc = match tc.group_accounting {
                GroupAccounting::Mog => "mog",
                GroupAccounting::Naive => "naive",
                GroupAccounting::NaiveLiteral => "naive_literal",
            };
            format!("group_privacy/{acc}")
        }
        Mechanism::UserWise => "user_wise".into(),
        Mechanism::AsiFiltered => "asi_filtered".into(),
    }
}

fn sampling_rate(tc: &TrainConfig, n_units: usize) -> f64 {
    match tc.mechanism {
        Mechanism::GroupPrivacy => tc.batch_size / (n_units * tc.k) as f64,
        Mechanism::UserWise => tc.batch_size / n_units as f64,
        Mechanism::AsiFiltered => 1.0,
    }
}

pub fn calibrate(config: &RunConfig) -> anyhow::Result<Outcome> {
    let tc = config.train_config();
    if !tc.is_private() {
        return Err(Error::Config("calibrate needs a [privacy] section with finite epsilon".into()).into());
    }
    let n_units = match config.privacy.as_ref().and_then(|p| p.population) {
        Some(n) => n as usize,
        None => config.load_corpus()?.n_units(),
    };
    let sigma = noise_multiplier(&tc, n_units)?;
    let disc = Discretization::default();
    let report = AccountingReport {
        mechanism: mechanism_label(&tc),
        sigma,
        epsilon: tc.epsilon,
        delta: tc.delta,
        q: sampling_rate(&tc, n_units),
        steps: tc.steps,
        k: tc.k as u64,
        grid_spacing: disc.grid_spacing,
        rounding: disc.rounding,
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    fs::write(out_dir(config)?.join("accounting.json"), json + "\n")?;
    Ok(Outcome::Done)
}

pub fn train_cmd(config: &RunConfig) -> anyhow::Result<Outcome> {
    let corpus = config.load_corpus()?;
    let eval = config.load_eval_corpus()?;
    let model = CharLm::init(config.model.char_lm(), config.seed)?;
    let tc = config.train_config();
    let (model, history) = train(model, &corpus, eval.as_ref(), &tc, config.seed)?;
    let dir = out_dir(config)?;
    save_checkpoint(&model, dir.join("model.bin"))?;
    history.write_csv(create(dir, "history.csv")?)?;
    let last = history.rows().last();
    println!(
        "{} steps, sigma {}, final loss {}, eval ppl {}",
        history.rows().len(),
        last.map_or(0.0, |r| r.sigma),
        last.and_then(|r| r.loss).map_or("-".into(), |l| format!("{l:.4}")),
        history.final_eval_ppl().map_or("-".into(), |p| format!("{p:.4}")),
    );
    match history.halted_at() {
        Some(step) => {
            eprintln!("halted at step {step}");
            Ok(Outcome::Halted(step))
        }
        None => Ok(Outcome::Done),
    }
}

fn write_stats(dir: &Path, name: &str, stats: &UnitStats) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, name)?);
    w.serialize(stats)?;
    w.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

pub fn select(config: &RunConfig) -> anyhow::Result<Outcome> {
    let corpus = config.load_corpus()?;
    let t = &config.training;
    let reference = CharLm::init(config.model.char_lm(), config.seed)?;
    let score = move |r: &Record| reference.record_perplexity(r).unwrap_or(f64::INFINITY);
    let scorer: Option<Scorer<'_>> = if t.strategy.needs_scorer() { Some(&score) } else { None };
    let seed = derived_seed(config.seed, Stream::Preprocess);
    let selected = select_records(&corpus, t.strategy, t.k, scorer, seed)?;
    let dir = out_dir(config)?;
    write_corpus_jsonl(&selected, dir.join("selected.jsonl"))?;
    let stats = corpus_stats(&selected);
    write_stats(dir, "selected_stats.csv", &stats)?;
    print_json(&stats)?;
    Ok(Outcome::Done)
}

pub fn stats(config: &RunConfig) -> anyhow::Result<Outcome> {
    let stats = corpus_stats(&config.load_corpus()?);
    write_stats(out_dir(config)?, "stats.csv", &stats)?;
    print_json(&stats)?;
    Ok(Outcome::Done)
}

pub fn synth(config: &RunConfig) -> anyhow::Result<Outcome> {
    let source = config
        .corpus
        .as_ref()
        .filter(|c| c.synth.is_some())
        .ok_or_else(|| Error::Config("synth needs a [corpus.synth] section".into()))?;
    let corpus = source.load()?;
    write_corpus_jsonl(&corpus, out_dir(config)?.join("corpus.jsonl"))?;
    print_json(&corpus_stats(&corpus))?;
    Ok(Outcome::Done)
}

pub fn analyze(config: &RunConfig) -> anyhow::Result<Outcome> {
    let analysis = config
        .analysis
        .as_ref()
        .ok_or_else(|| Error::Config("analyze needs an [analysis] section".into()))?;
    let tc = config.train_config();
    match analysis.mode {
        AnalysisMode::Noise => {
            if !tc.is_private() {
                return Err(Error::Config("noise analysis needs a finite privacy.epsilon".into()).into());
            }
            let n_users = match analysis.n_users {
                Some(n) => n,
                None => config.load_corpus()?.n_units() as u64,
            };
            let cmp = effective_noise_curves(tc.epsilon, tc.delta, tc.steps, n_users, tc.clip, &analysis.ratios)?;
            write_noise_curves(&cmp, create(out_dir(config)?, "noise_curves.csv")?)?;
            match cmp.crossover {
                Some(x) => println!("crossover tau/C = {x:.6}"),
                None => println!("no crossover on the grid"),
            }
        }
        AnalysisMode::Concentration => {
            let corpus = config.load_corpus()?;
            let model = CharLm::init(config.model.char_lm(), config.seed)?;
            let pool = CorpusPool::new(&corpus, tc.strategy, None);
            let mut rng = stream(config.seed, Stream::Probe);
            let summary = measure_concentration(&model, &pool, tc.k, analysis.probe_users, &mut rng)?;
            write_concentration(std::slice::from_ref(&summary), create(out_dir(config)?, "concentration.csv")?)?;
            print_json(&summary)?;
        }
        AnalysisMode::Sweep => {
            let corpus = config.load_corpus()?;
            let eval = config.load_eval_corpus()?;
            let rows = sweep(&tc, &analysis.grid, config.model.char_lm(), &corpus, eval.as_ref(), &analysis.seeds)?;
            write_sweep(&rows, create(out_dir(config)?, "sweep.csv")?)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} runs, {failed} failed", rows.len());
        }
    }
    Ok(Outcome::Done)
}
