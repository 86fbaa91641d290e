//! Run configuration: one TOML file per experiment.
//!
//! ```toml
//! mechanism = "group_privacy"   # group_privacy | user_wise | asi_filtered
//! seed = 0
//! out_dir = "runs/demo"
//!
//! [corpus.synth]
//! n_units = 200
//! seed = 1
//! records_per_unit = { law = "power_law", alpha = 1.5, max = 20 }
//! record_len = { law = "uniform", min = 16, max = 48 }
//!
//! [privacy]          # omit for the non-private path
//! epsilon = 8.0      # `inf` is also accepted
//! delta = 1e-5
//!
//! [training]
//! k = 2
//! steps = 100
//! batch_size = 32.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use userdp::analysis::SweepGrid;
use userdp::corpus::{load_corpus, synth_corpus, SelectionStrategy, SynthSpec, UserCorpus};
use userdp::mechanisms::{GroupAccounting, Mechanism, TrainConfig, CONCENTRATION_SENSITIVITY};
use userdp::models::CharLmConfig;
use userdp::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mechanism: Mechanism,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusSource>,
    /// Evaluation corpus; the training corpus is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_corpus: Option<CorpusSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacySection>,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisSection>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Exactly one of `path` and `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

fn default_max_seq_len() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: f64,
    /// Required whenever epsilon is finite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default)]
    pub group_accounting: GroupAccounting,
    /// Number of privacy units for `calibrate`; defaults to the corpus size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub clip: f64,
    pub eta: f64,
    pub steps: u64,
    pub batch_size: f64,
    pub k: usize,
    pub strategy: SelectionStrategy,
    pub tau: f64,
    pub svt_sensitivity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub eval_every: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            clip: d.clip,
            eta: d.eta,
            steps: d.steps,
            batch_size: d.batch_size,
            k: d.k,
            strategy: d.strategy,
            tau: d.tau,
            svt_sensitivity: CONCENTRATION_SENSITIVITY,
            sigma: None,
            eval_every: d.eval_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_emb: usize,
    pub context: usize,
    pub d_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = CharLmConfig::default();
        Self { d_emb: d.d_emb, context: d.context, d_hidden: d.d_hidden }
    }
}

impl ModelSection {
    pub fn char_lm(&self) -> CharLmConfig {
        CharLmConfig::new(self.d_emb, self.context, self.d_hidden)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    Noise,
    Concentration,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub mode: AnalysisMode,
    /// τ/C grid for noise curves.
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    /// Users per step for noise curves; defaults to the corpus size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_users: Option<u64>,
    #[serde(default = "default_probe_users")]
    pub probe_users: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub grid: SweepGrid,
}

fn default_ratios() -> Vec<f64> {
    (0..=30).map(|i| 10f64.powf(-3.0 + i as f64 / 10.0)).collect()
}

fn default_probe_users() -> usize {
    20
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for source in [config.corpus.as_mut(), config.eval_corpus.as_mut()].into_iter().flatten() {
            if let Some(p) = source.path.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        if let Some(p) = &self.privacy {
            if p.epsilon.is_nan() || p.epsilon <= 0.0 {
                return Err(Error::Config(format!("privacy.epsilon must be positive, got {}", p.epsilon)));
            }
            if p.epsilon.is_finite() && p.delta.is_none() {
                return Err(Error::Config("privacy.delta is required when privacy.epsilon is finite".into()));
            }
        }
        for (name, source) in [("corpus", &self.corpus), ("eval_corpus", &self.eval_corpus)] {
            if let Some(s) = source {
                if s.path.is_some() == s.synth.is_some() {
                    return Err(Error::Config(format!("{name} needs exactly one of `path` and `synth`")));
                }
            }
        }
        if let Some(a) = &self.analysis {
            if a.seeds.is_empty() {
                return Err(Error::Config("analysis.seeds must not be empty".into()));
            }
        }
        self.model.char_lm().validate()?;
        self.train_config().validate()
    }

    pub fn epsilon(&self) -> f64 {
        self.privacy.as_ref().map_or(f64::INFINITY, |p| p.epsilon)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        let privacy = self.privacy.as_ref();
        TrainConfig {
            mechanism: self.mechanism,
            epsilon: self.epsilon(),
            delta: privacy.and_then(|p| p.delta).unwrap_or(0.0),
            clip: t.clip,
            eta: t.eta,
            steps: t.steps,
            batch_size: t.batch_size,
            k: t.k,
            strategy: t.strategy,
            tau: t.tau,
            svt_sensitivity: t.svt_sensitivity,
            sigma: t.sigma,
            group_accounting: privacy.map(|p| p.group_accounting).unwrap_or_default(),
            eval_every: t.eval_every,
        }
    }

    pub fn load_corpus(&self) -> Result<UserCorpus, Error> {
        let source = self
            .corpus
            .as_ref()
            .ok_or_else(|| Error::Config("a [corpus] section is required".into()))?;
        source.load()
    }

    pub fn load_eval_corpus(&self) -> Result<Option<UserCorpus>, Error> {
        self.eval_corpus.as_ref().map(CorpusSource::load).transpose()
    }
}

impl CorpusSource {
    pub fn load(&self) -> Result<UserCorpus, Error> {
        match (&self.path, &self.synth) {
            (Some(path), None) => load_corpus(path, self.max_seq_len),
            (None, Some(spec)) => synth_corpus(spec),
            _ => Err(Error::Config("corpus needs exactly one of `path` and `synth`".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
mechanism = "user_wise"
seed = 4
out_dir = "runs/x"

[corpus]
max_seq_len = 64

[corpus.synth]
n_units = 10
seed = 1
records_per_unit = { law = "power_law", alpha = 1.5, max = 6 }
record_len = { law = "uniform", min = 8, max = 20 }

[privacy]
epsilon = 3.0
delta = 1e-5
group_accounting = "naive"

[training]
k = 2
steps = 7
batch_size = 4.0
strategy = { random_chunk = { max_seq_len = 16 } }
sigma = 1.25

[model]
d_emb = 4
context = 3
d_hidden = 8

[analysis]
mode = "sweep"
seeds = [0, 1]

[analysis.grid]
clip = [0.5, 1.0]
"#;

    #[test]
    fn parses_and_round_trips() {
        let c = RunConfig::from_toml(FULL).unwrap();
        assert_eq!(c.mechanism, Mechanism::UserWise);
        assert_eq!(c.training.strategy, SelectionStrategy::RandomChunk { max_seq_len: 16 });
        assert_eq!(c.training.clip, 1.0);
        let again = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn infinite_epsilon_round_trips() {
        let c = RunConfig::from_toml("mechanism = \"group_privacy\"\n[privacy]\nepsilon = inf\n").unwrap();
        assert!(c.epsilon().is_infinite());
        assert!(!c.train_config().is_private());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn missing_delta_names_the_field() {
        let err = RunConfig::from_toml("mechanism = \"group_privacy\"\n[privacy]\nepsilon = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("privacy.delta"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("mechanism = \"group_privacy\"\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("mechanism = \"group_privacy\"\n[training]\nlr = 1\n").is_err());
    }

    #[test]
    fn corpus_needs_one_source() {
        assert!(RunConfig::from_toml("mechanism = \"group_privacy\"\n[corpus]\nmax_seq_len = 3\n").is_err());
    }
}
