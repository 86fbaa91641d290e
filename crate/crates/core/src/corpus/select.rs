//! Record-selection strategies that cap each user's contribution at `k`.

use std::cmp::Ordering;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{Record, UserCorpus, SEPARATOR};
use crate::error::{Error, Result};

/// Per-record perplexity scorer used by the PPL-ranked strategies.
pub type Scorer<'a> = &'a (dyn Fn(&Record) -> f64 + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Random,
    Longest,
    Shortest,
    HighestPpl,
    LowestPpl,
    /// Concatenate the user's records and cut random windows. Only valid as
    /// a per-step sampler.
    RandomChunk { max_seq_len: usize },
}

impl SelectionStrategy {
    pub fn needs_scorer(&self) -> bool {
        matches!(self, Self::HighestPpl | Self::LowestPpl)
    }
}

/// Applies `strategy` to every unit once, producing exactly `k` records per
/// unit. Units with fewer than `k` records keep all of them and are topped up
/// by uniform draws with replacement from their own records.
pub fn select_records(
    corpus: &UserCorpus,
    strategy: SelectionStrategy,
    k: usize,
    scorer: Option<Scorer<'_>>,
    seed: u64,
) -> Result<UserCorpus> {
    if matches!(strategy, SelectionStrategy::RandomChunk { .. }) {
        return Err(Error::Config(
            "random_chunk is a per-step sampler and cannot preprocess a corpus".into(),
        ));
    }
    check_request(strategy, k, scorer)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut units = Vec::with_capacity(corpus.n_units());
    for (user, records) in corpus.units() {
        let picked = pick(records, strategy, k, scorer, &mut rng)?;
        units.push((user.to_string(), picked));
    }
    UserCorpus::from_units(units)
}

/// Draws `k` records for one user, freshly on each call.
pub fn sample_user_records<R: Rng + ?Sized>(
    corpus: &UserCorpus,
    user: &str,
    k: usize,
    strategy: SelectionStrategy,
    scorer: Option<Scorer<'_>>,
    rng: &mut R,
) -> Result<Vec<Record>> {
    let records = corpus.records(user)?;
    check_request(strategy, k, scorer)?;
    pick(records, strategy, k, scorer, rng)
}

fn check_request(strategy: SelectionStrategy, k: usize, scorer: Option<Scorer<'_>>) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if strategy.needs_scorer() && scorer.is_none() {
        return Err(Error::Config(format!("{strategy:?} requires a perplexity scorer")));
    }
    if let SelectionStrategy::RandomChunk { max_seq_len: 0 } = strategy {
        return Err(Error::Config("random_chunk max_seq_len must be at least 1".into()));
    }
    Ok(())
}

pub(super) fn pick<R: Rng + ?Sized>(
    records: &[Record],
    strategy: SelectionStrategy,
    k: usize,
    scorer: Option<Scorer<'_>>,
    rng: &mut R,
) -> Result<Vec<Record>> {
    let n = records.len();
    let ranked: Vec<usize> = match strategy {
        SelectionStrategy::RandomChunk { max_seq_len } => {
            return Ok(random_chunks(records, k, max_seq_len, rng));
        }
        SelectionStrategy::Random => {
            index::sample(rng, n, k.min(n)).into_vec()
        }
        SelectionStrategy::Longest => rank_by(records, |a, b| b.len().cmp(&a.len())),
        SelectionStrategy::Shortest => rank_by(records, |a, b| a.len().cmp(&b.len())),
        SelectionStrategy::HighestPpl | SelectionStrategy::LowestPpl => {
            let score = scorer.expect("checked by caller");
            let scores: Vec<f64> = records.iter().map(score).collect();
            let mut order: Vec<usize> = (0..n).collect();
            let descending = strategy == SelectionStrategy::HighestPpl;
            order.sort_by(|&a, &b| {
                let by_score = scores[a].total_cmp(&scores[b]);
                let by_score = if descending { by_score.reverse() } else { by_score };
                by_score.then(records[a].source_index.cmp(&records[b].source_index))
            });
            order
        }
    };
    let mut out: Vec<Record> = ranked.iter().take(k).map(|&i| records[i].clone()).collect();
    while out.len() < k {
        out.push(records[rng.random_range(0..n)].clone());
    }
    Ok(out)
}

fn rank_by(records: &[Record], cmp: impl Fn(&Record, &Record) -> Ordering) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        cmp(&records[a], &records[b]).then(records[a].source_index.cmp(&records[b].source_index))
    });
    order
}

fn random_chunks<R: Rng + ?Sized>(
    records: &[Record],
    k: usize,
    max_seq_len: usize,
    rng: &mut R,
) -> Vec<Record> {
    let mut document = Vec::with_capacity(records.iter().map(|r| r.len() + 1).sum());
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            document.push(SEPARATOR);
        }
        document.extend_from_slice(r.tokens());
    }
    let len = max_seq_len.min(document.len());
    let last_start = document.len() - len;
    (0..k)
        .map(|i| {
            let start = rng.random_range(0..=last_start);
            Record { tokens: document[start..start + len].to_vec(), source_index: i }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::corpus_stats;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn unit(lengths: &[usize]) -> Vec<Record> {
        lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| Record::new(vec![(i % 200) as u16; l], i).unwrap())
            .collect()
    }

    fn corpus(units: &[&[usize]]) -> UserCorpus {
        UserCorpus::from_units(units.iter().enumerate().map(|(u, l)| (format!("u{u}"), unit(l))))
            .unwrap()
    }

    fn lengths(records: &[Record]) -> Vec<usize> {
        records.iter().map(Record::len).collect()
    }

    #[test]
    fn longest_picks_largest() {
        let c = corpus(&[&[5, 9, 2]]);
        let out = select_records(&c, SelectionStrategy::Longest, 2, None, 0).unwrap();
        assert_eq!(lengths(out.records("u0").unwrap()), vec![9, 5]);
    }

    #[test]
    fn shortest_ties_break_by_source_index() {
        let c = corpus(&[&[3, 1, 3, 1]]);
        let out = select_records(&c, SelectionStrategy::Shortest, 3, None, 0).unwrap();
        let idx: Vec<usize> = out.records("u0").unwrap().iter().map(|r| r.source_index()).collect();
        assert_eq!(idx, vec![1, 3, 0]);
    }

    #[test]
    fn single_record_is_repeated() {
        let c = corpus(&[&[4]]);
        for s in [SelectionStrategy::Random, SelectionStrategy::Longest, SelectionStrategy::Shortest] {
            let out = select_records(&c, s, 3, None, 11).unwrap();
            let recs = out.records("u0").unwrap();
            assert_eq!(recs.len(), 3);
            assert!(recs.iter().all(|r| r == &c.records("u0").unwrap()[0]));
        }
    }

    #[test]
    fn random_selection_is_seeded() {
        let c = corpus(&[&[1, 2, 3, 4, 5, 6], &[7, 8, 9]]);
        let a = select_records(&c, SelectionStrategy::Random, 2, None, 5).unwrap();
        let b = select_records(&c, SelectionStrategy::Random, 2, None, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ppl_strategies_need_scorer() {
        let c = corpus(&[&[1, 2]]);
        let err = select_records(&c, SelectionStrategy::HighestPpl, 1, None, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let score = |r: &Record| r.len() as f64 * 10.0;
        let out = select_records(&c, SelectionStrategy::HighestPpl, 1, Some(&score), 0).unwrap();
        assert_eq!(lengths(out.records("u0").unwrap()), vec![2]);
        let out = select_records(&c, SelectionStrategy::LowestPpl, 1, Some(&score), 0).unwrap();
        assert_eq!(lengths(out.records("u0").unwrap()), vec![1]);
    }

    #[test]
    fn chunking_rejected_for_preprocessing() {
        let c = corpus(&[&[1]]);
        let s = SelectionStrategy::RandomChunk { max_seq_len: 8 };
        assert!(select_records(&c, s, 1, None, 0).is_err());
    }

    #[test]
    fn chunk_cannot_exceed_document() {
        let c = corpus(&[&[10]]);
        let s = SelectionStrategy::RandomChunk { max_seq_len: 50 };
        let mut rng = stream(0, Stream::Records);
        let out = sample_user_records(&c, "u0", 1, s, None, &mut rng).unwrap();
        assert_eq!(lengths(&out), vec![10]);
    }

    #[test]
    fn chunks_have_full_length() {
        let c = corpus(&[&[200, 150, 150]]);
        let s = SelectionStrategy::RandomChunk { max_seq_len: 128 };
        let mut rng = stream(0, Stream::Records);
        let out = sample_user_records(&c, "u0", 3, s, None, &mut rng).unwrap();
        assert_eq!(lengths(&out), vec![128; 3]);
    }

    #[test]
    fn chunk_spans_separators() {
        let c = corpus(&[&[2, 2]]);
        let s = SelectionStrategy::RandomChunk { max_seq_len: 64 };
        let mut rng = stream(0, Stream::Records);
        let out = sample_user_records(&c, "u0", 1, s, None, &mut rng).unwrap();
        assert_eq!(out[0].tokens(), &[0, 0, SEPARATOR, 1, 1]);
    }

    #[test]
    fn random_draws_cover_both_records() {
        let c = corpus(&[&[3, 5]]);
        let mut seen_first = [false, false];
        for seed in 0..20 {
            let mut rng = stream(seed, Stream::Records);
            let out =
                sample_user_records(&c, "u0", 2, SelectionStrategy::Random, None, &mut rng).unwrap();
            let mut l = lengths(&out);
            seen_first[(l[0] == 5) as usize] = true;
            l.sort();
            assert_eq!(l, vec![3, 5]);
        }
        assert!(seen_first.iter().all(|&b| b), "both orders should occur across seeds");
    }

    #[test]
    fn unknown_user() {
        let c = corpus(&[&[3]]);
        let mut rng = stream(0, Stream::Records);
        let err = sample_user_records(&c, "nobody", 1, SelectionStrategy::Random, None, &mut rng);
        assert!(matches!(err, Err(Error::UnknownUser(_))));
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<Vec<usize>>> {
        prop::collection::vec(prop::collection::vec(1usize..40, 1..8), 1..6)
    }

    proptest! {
        #[test]
        fn selection_invariants(units in arb_corpus(), k in 1usize..6, seed in any::<u64>()) {
            let refs: Vec<&[usize]> = units.iter().map(Vec::as_slice).collect();
            let c = corpus(&refs);
            for s in [SelectionStrategy::Random, SelectionStrategy::Longest, SelectionStrategy::Shortest] {
                let out = select_records(&c, s, k, None, seed).unwrap();
                let stats = corpus_stats(&out);
                prop_assert_eq!(stats.min, k as f64);
                prop_assert_eq!(stats.max, k as f64);
                for (user, recs) in out.units() {
                    let input = c.records(user).unwrap();
                    for r in recs {
                        prop_assert!(input.contains(r));
                    }
                }
            }
            let out = select_records(&c, SelectionStrategy::Longest, k, None, seed).unwrap();
            for (user, recs) in out.units() {
                let mut input = lengths(c.records(user).unwrap());
                input.sort_unstable_by(|a, b| b.cmp(a));
                let mut got = lengths(recs);
                got.sort_unstable_by(|a, b| b.cmp(a));
                if input.len() >= k {
                    prop_assert_eq!(&got[..], &input[..k]);
                } else {
                    // every input record once, the rest resampled from the unit
                    for l in &input {
                        let pos = got.iter().position(|g| g == l);
                        prop_assert!(pos.is_some());
                        got.remove(pos.unwrap());
                    }
                    prop_assert!(got.iter().all(|g| input.contains(g)));
                }
            }
        }

        #[test]
        fn chunk_lengths(units in arb_corpus(), max_len in 1usize..64, seed in any::<u64>()) {
            let refs: Vec<&[usize]> = units.iter().map(Vec::as_slice).collect();
            let c = corpus(&refs);
            let s = SelectionStrategy::RandomChunk { max_seq_len: max_len };
            let mut rng = stream(seed, Stream::Records);
            for (user, recs) in c.units() {
                let total: usize = recs.iter().map(Record::len).sum::<usize>() + recs.len() - 1;
                let out = sample_user_records(&c, user, 3, s, None, &mut rng).unwrap();
                for r in &out {
                    prop_assert_eq!(r.len(), max_len.min(total));
                }
            }
        }
    }
}
