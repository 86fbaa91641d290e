//! User-partitioned text corpora.
//!
//! Text is tokenized at the byte level: ids `0..=255` are raw bytes and
//! [`SEPARATOR`] joins records when a user's data is concatenated into one
//! document (and pads short contexts in the language model).

mod select;
mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use select::{sample_user_records, select_records, Scorer, SelectionStrategy};
pub use synth::{synth_corpus, RecordLenLaw, RecordsPerUnitLaw, SynthSpec};

pub type Token = u16;

/// Token id used between concatenated records and for left padding.
pub const SEPARATOR: Token = 256;
/// Byte vocabulary plus the separator.
pub const VOCAB_SIZE: usize = 257;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    tokens: Vec<Token>,
    source_index: usize,
}

impl Record {
    /// Fails on an empty token list or an id outside the vocabulary.
    pub fn new(tokens: Vec<Token>, source_index: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Domain("record must hold at least one token".into()));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Domain(format!("token id {bad} outside vocabulary")));
        }
        Ok(Self { tokens, source_index })
    }

    pub fn from_bytes(bytes: &[u8], source_index: usize) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| b as Token).collect(), source_index)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position of this record among its user's records.
    pub fn source_index(&self) -> usize {
        self.source_index
    }
}

/// Records grouped by privacy unit, in first-seen order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserCorpus {
    units: IndexMap<String, Vec<Record>>,
}

impl UserCorpus {
    pub fn from_units<I>(units: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<Record>)>,
    {
        let mut map = IndexMap::new();
        for (user, records) in units {
            if records.is_empty() {
                return Err(Error::Domain(format!("user `{user}` has no records")));
            }
            if map.insert(user.clone(), records).is_some() {
                return Err(Error::Domain(format!("duplicate user id `{user}`")));
            }
        }
        Ok(Self { units: map })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_records(&self) -> usize {
        self.units.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.units.keys().map(String::as_str)
    }

    pub fn units(&self) -> impl Iterator<Item = (&str, &[Record])> {
        self.units.iter().map(|(u, r)| (u.as_str(), r.as_slice()))
    }

    pub fn records(&self, user: &str) -> Result<&[Record]> {
        self.units
            .get(user)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownUser(user.to_string()))
    }

    pub fn unit_at(&self, index: usize) -> Option<(&str, &[Record])> {
        self.units.get_index(index).map(|(u, r)| (u.as_str(), r.as_slice()))
    }

    /// All records, unit by unit, in corpus order.
    pub fn flatten(&self) -> Vec<&Record> {
        self.units.values().flatten().collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.units.values().flatten().map(Record::len).sum()
    }
}

#[derive(Deserialize)]
struct JsonLine {
    user_id: String,
    text: String,
}

/// Reads a JSONL corpus (`{"user_id": .., "text": ..}` per line).
///
/// Texts longer than `max_seq_len` bytes are split into consecutive records.
/// Blank lines are ignored.
pub fn load_corpus(path: impl AsRef<Path>, max_seq_len: usize) -> Result<UserCorpus> {
    if max_seq_len == 0 {
        return Err(Error::Config("max_seq_len must be at least 1".into()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut units: IndexMap<String, Vec<Record>> = IndexMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.text.is_empty() {
            return Err(Error::Parse { line: line_no, message: "empty text".into() });
        }
        let records = units.entry(parsed.user_id).or_default();
        for chunk in parsed.text.as_bytes().chunks(max_seq_len) {
            let index = records.len();
            records.push(Record::from_bytes(chunk, index)?);
        }
    }
    if units.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(UserCorpus { units })
}

/// Writes a corpus back out as JSONL, one line per record. Token ids must be
/// bytes; records containing separators are rejected.
pub fn write_corpus_jsonl(corpus: &UserCorpus, path: impl AsRef<Path>) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for (user, records) in corpus.units() {
        for r in records {
            let bytes = r
                .tokens()
                .iter()
                .map(|&t| u8::try_from(t).map_err(|_| Error::Domain("separator in record".into())))
                .collect::<Result<Vec<u8>>>()?;
            let text = String::from_utf8_lossy(&bytes);
            let line = serde_json::json!({ "user_id": user, "text": text });
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Records-per-unit statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub n_units: usize,
    pub n_records: usize,
    pub avg: f64,
    pub max: f64,
    pub min: f64,
    pub median: f64,
}

/// Median averages the two middle counts when the number of units is even.
pub fn corpus_stats(corpus: &UserCorpus) -> UnitStats {
    let mut counts: Vec<usize> = corpus.units.values().map(Vec::len).collect();
    counts.sort_unstable();
    let n_units = counts.len();
    let n_records: usize = counts.iter().sum();
    if n_units == 0 {
        return UnitStats { n_units, n_records, avg: 0.0, max: 0.0, min: 0.0, median: 0.0 };
    }
    let median = if n_units % 2 == 1 {
        counts[n_units / 2] as f64
    } else {
        (counts[n_units / 2 - 1] + counts[n_units / 2]) as f64 / 2.0
    };
    UnitStats {
        n_units,
        n_records,
        avg: n_records as f64 / n_units as f64,
        max: counts[n_units - 1] as f64,
        min: counts[0] as f64,
        median,
    }
}

/// Poisson subsampling over `0..n`: each index is kept independently with
/// probability `q`. Indices are returned in increasing order.
pub fn poisson_subsample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling probability {q} outside (0, 1]")));
    }
    if q == 1.0 {
        return Ok((0..n).collect());
    }
    Ok((0..n).filter(|_| rng.random::<f64>() < q).collect())
}

/// Draws a Poisson batch of users.
pub fn sample_user_batch<R: Rng + ?Sized>(
    corpus: &UserCorpus,
    q_user: f64,
    rng: &mut R,
) -> Result<Vec<String>> {
    Ok(poisson_subsample(corpus.n_units(), q_user, rng)?
        .into_iter()
        .map(|i| corpus.units.get_index(i).expect("index in range").0.clone())
        .collect())
}
