//! Seeded synthetic corpora with skewed records-per-user.
//!
//! Text comes from a character Markov chain over a small alphabet. Every user
//! mixes a shared "language" chain with a private chain of their own, so a
//! user's records are correlated with each other while the population still
//! shares learnable structure.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use super::{Record, UserCorpus};
use crate::error::{Error, Result};

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz .";
const FAVOURED_SUCCESSORS: usize = 4;
const FLOOR: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum RecordsPerUnitLaw {
    Constant { count: usize },
    /// `P(n) ∝ n^-alpha` on `1..=max`.
    PowerLaw { alpha: f64, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum RecordLenLaw {
    Fixed { len: usize },
    Uniform { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_units: usize,
    pub records_per_unit: RecordsPerUnitLaw,
    pub record_len: RecordLenLaw,
    pub seed: u64,
    /// Seed of the shared chain. Corpora with the same language seed and
    /// different `seed`s are drawn from one population.
    #[serde(default)]
    pub language_seed: u64,
    /// Weight of each user's private chain, in `[0, 1]`.
    #[serde(default = "default_user_mix")]
    pub user_mix: f64,
}

fn default_user_mix() -> f64 {
    0.5
}

impl SynthSpec {
    pub fn new(n_units: usize, records: RecordsPerUnitLaw, len: RecordLenLaw, seed: u64) -> Self {
        Self {
            n_units,
            records_per_unit: records,
            record_len: len,
            seed,
            language_seed: 0,
            user_mix: default_user_mix(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_units == 0 {
            return Err(Error::Config("n_units must be at least 1".into()));
        }
        match self.records_per_unit {
            RecordsPerUnitLaw::Constant { count: 0 } => {
                return Err(Error::Config("records-per-unit count must be at least 1".into()))
            }
            RecordsPerUnitLaw::PowerLaw { alpha, max } if !(alpha.is_finite() && alpha > 0.0) || max == 0 => {
                return Err(Error::Config(format!("invalid power law (alpha {alpha}, max {max})")))
            }
            _ => {}
        }
        match self.record_len {
            RecordLenLaw::Fixed { len: 0 } => {
                return Err(Error::Config("record length must be at least 1".into()))
            }
            RecordLenLaw::Uniform { min, max } if min == 0 || min > max => {
                return Err(Error::Config(format!("invalid record length range {min}..={max}")))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.user_mix) {
            return Err(Error::Config(format!("user_mix {} outside [0, 1]", self.user_mix)));
        }
        Ok(())
    }
}

type Chain = Vec<Vec<f64>>;

fn random_chain<R: Rng + ?Sized>(rng: &mut R) -> Chain {
    let a = ALPHABET.len();
    (0..a)
        .map(|_| {
            let mut row = vec![FLOOR; a];
            for _ in 0..FAVOURED_SUCCESSORS {
                let w: f64 = Exp1.sample(rng);
                row[rng.random_range(0..a)] += w;
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            row
        })
        .collect()
}

fn draw<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (i, &p) in row.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    row.len() - 1
}

fn power_law_cdf(alpha: f64, max: usize) -> Vec<f64> {
    let weights: Vec<f64> = (1..=max).map(|n| (n as f64).powf(-alpha)).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

/// Generates a corpus; identical specs give identical corpora.
pub fn synth_corpus(spec: &SynthSpec) -> Result<UserCorpus> {
    spec.validate()?;
    let language = random_chain(&mut ChaCha20Rng::seed_from_u64(spec.language_seed));
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let cdf = match spec.records_per_unit {
        RecordsPerUnitLaw::PowerLaw { alpha, max } => power_law_cdf(alpha, max),
        RecordsPerUnitLaw::Constant { .. } => Vec::new(),
    };
    let a = ALPHABET.len();
    let start = Uniform::new(0, a).expect("non-empty alphabet");

    let mut units = Vec::with_capacity(spec.n_units);
    for u in 0..spec.n_units {
        let own = random_chain(&mut rng);
        let chain: Chain = language
            .iter()
            .zip(&own)
            .map(|(g, p)| g.iter().zip(p).map(|(g, p)| (1.0 - spec.user_mix) * g + spec.user_mix * p).collect())
            .collect();
        let n_records = match spec.records_per_unit {
            RecordsPerUnitLaw::Constant { count } => count,
            RecordsPerUnitLaw::PowerLaw { .. } => {
                let x: f64 = rng.random();
                cdf.iter().position(|&c| x < c).unwrap_or(cdf.len() - 1) + 1
            }
        };
        let mut records = Vec::with_capacity(n_records);
        for i in 0..n_records {
            let len = match spec.record_len {
                RecordLenLaw::Fixed { len } => len,
                RecordLenLaw::Uniform { min, max } => rng.random_range(min..=max),
            };
            let mut state = start.sample(&mut rng);
            let mut bytes = Vec::with_capacity(len);
            for _ in 0..len {
                bytes.push(ALPHABET[state]);
                state = draw(&chain[state], &mut rng);
            }
            records.push(Record::from_bytes(&bytes, i)?);
        }
        units.push((format!("u{u:05}"), records));
    }
    UserCorpus::from_units(units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::corpus_stats;

    #[test]
    fn constant_law_counts() {
        let spec = SynthSpec::new(
            10,
            RecordsPerUnitLaw::Constant { count: 3 },
            RecordLenLaw::Fixed { len: 20 },
            7,
        );
        let c = synth_corpus(&spec).unwrap();
        assert_eq!(c.n_records(), 30);
        assert_eq!(c.total_tokens(), 600);
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::new(
            25,
            RecordsPerUnitLaw::PowerLaw { alpha: 1.5, max: 20 },
            RecordLenLaw::Uniform { min: 5, max: 30 },
            3,
        );
        assert_eq!(synth_corpus(&spec).unwrap(), synth_corpus(&spec).unwrap());
        let other = SynthSpec { seed: 4, ..spec.clone() };
        assert_ne!(synth_corpus(&spec).unwrap(), synth_corpus(&other).unwrap());
    }

    #[test]
    fn power_law_bounds() {
        let spec = SynthSpec::new(
            1000,
            RecordsPerUnitLaw::PowerLaw { alpha: 1.5, max: 100 },
            RecordLenLaw::Fixed { len: 4 },
            1,
        );
        let s = corpus_stats(&synth_corpus(&spec).unwrap());
        assert!(s.max <= 100.0 && s.min >= 1.0);
        // heavy tail: the mean sits well above the median
        assert!(s.avg > s.median, "{s:?}");
        assert_eq!(s.min, 1.0);
    }

    #[test]
    fn invalid_laws() {
        let bad = [
            SynthSpec::new(0, RecordsPerUnitLaw::Constant { count: 1 }, RecordLenLaw::Fixed { len: 1 }, 0),
            SynthSpec::new(1, RecordsPerUnitLaw::Constant { count: 0 }, RecordLenLaw::Fixed { len: 1 }, 0),
            SynthSpec::new(1, RecordsPerUnitLaw::PowerLaw { alpha: -1.0, max: 3 }, RecordLenLaw::Fixed { len: 1 }, 0),
            SynthSpec::new(1, RecordsPerUnitLaw::Constant { count: 1 }, RecordLenLaw::Uniform { min: 5, max: 2 }, 0),
        ];
        for spec in bad {
            assert!(matches!(synth_corpus(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }
}
