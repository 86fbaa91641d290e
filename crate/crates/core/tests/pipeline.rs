//! End-to-end paths through the public API: corpus files, selection,
//! calibration, training and checkpoints.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use userdp::accountant::{account, calibrate, Discretization, MechanismAccounting};
use userdp::corpus::{
    corpus_stats, load_corpus, poisson_subsample, select_records, synth_corpus, write_corpus_jsonl, RecordLenLaw,
    RecordsPerUnitLaw, SelectionStrategy, SynthSpec, UserCorpus,
};
use userdp::mechanisms::{noise_multiplier, train, Mechanism, TrainConfig};
use userdp::models::{load_checkpoint, perplexity, save_checkpoint, CharLm, CharLmConfig};

fn corpus(units: usize, seed: u64) -> UserCorpus {
    synth_corpus(&SynthSpec::new(
        units,
        RecordsPerUnitLaw::PowerLaw { alpha: 1.2, max: 8 },
        RecordLenLaw::Uniform { min: 8, max: 20 },
        seed,
    ))
    .unwrap()
}

fn small_config(mechanism: Mechanism) -> TrainConfig {
    TrainConfig {
        mechanism,
        epsilon: 4.0,
        delta: 1e-5,
        steps: 6,
        batch_size: 6.0,
        k: 2,
        eval_every: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn jsonl_round_trip_keeps_units_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let c = corpus(15, 3);
    write_corpus_jsonl(&c, &path).unwrap();
    let back = load_corpus(&path, 1024).unwrap();
    assert_eq!(back, c);
    assert_eq!(corpus_stats(&back), corpus_stats(&c));
}

#[test]
fn selection_gives_every_unit_exactly_k_records() {
    let c = corpus(30, 4);
    for strategy in [SelectionStrategy::Random, SelectionStrategy::Longest, SelectionStrategy::Shortest] {
        let selected = select_records(&c, strategy, 3, None, 9).unwrap();
        let stats = corpus_stats(&selected);
        assert_eq!((stats.min, stats.max, stats.n_units), (3.0, 3.0, 30));
    }
}

#[test]
fn calibrated_sigma_meets_its_target() {
    let d = Discretization::default();
    let m = MechanismAccounting::MixtureOfGaussians { q: 0.05, k: 3 };
    let sigma = calibrate(m, 2.0, 1e-6, 40, &d).unwrap();
    let eps = account(m, sigma, 40, 1e-6, &d).unwrap();
    assert!((0.99 * 2.0..=2.0).contains(&eps), "σ={sigma} gives ε={eps}");
}

#[test]
fn every_mechanism_trains_reproducibly() {
    let c = corpus(24, 5);
    let cfg = CharLmConfig::new(4, 3, 8);
    for mechanism in [Mechanism::GroupPrivacy, Mechanism::UserWise] {
        let config = small_config(mechanism);
        let sigma = noise_multiplier(&config, c.n_units()).unwrap();
        assert!(sigma > 0.0);
        let run = || train(CharLm::init(cfg, 1).unwrap(), &c, None, &config, 11).unwrap();
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.rows().len(), 6);
        assert!(h1.rows().iter().all(|r| r.sigma == sigma));
        assert_eq!(h1.rows().iter().filter(|r| r.eval_ppl.is_some()).count(), 2);
    }
}

#[test]
fn trained_model_survives_a_checkpoint() {
    let c = corpus(12, 6);
    let config = TrainConfig { epsilon: f64::INFINITY, ..small_config(Mechanism::UserWise) };
    let (model, _) = train(CharLm::init(CharLmConfig::new(4, 3, 8), 2).unwrap(), &c, None, &config, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(perplexity(&back, c.flatten()).unwrap(), perplexity(&model, c.flatten()).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn poisson_batches_are_sorted_distinct_and_in_range(n in 0usize..200, q in 0.01f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let idx = poisson_subsample(n, q, &mut rng).unwrap();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
    }
}
