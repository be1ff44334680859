//! The single JSON document that drives a run. Every default is filled in
//! by [`RunConfig::materialize`] and written next to the run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::categorical::Categorical;
use crate::denoiser::{Arch, ContextKind};
use crate::error::{Error, Result};
use crate::processes::NoiseDistribution;
use crate::sampler::{uniform_steps, DecodeMode, DecodeOptions, KScheduleKind, RoutingStrategy, VanillaKind};
use crate::schedules::{AlphaSchedule, ScheduleSpec};
use crate::trainer::TrainConfig;

/// Noise kind; the vocabulary size comes from the run's `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSpec {
    Uniform,
    Absorbing,
    Custom { probs: Vec<f64> },
}

impl NoiseSpec {
    pub fn build(&self, k: usize) -> Result<NoiseDistribution> {
        let noise = match self {
            Self::Uniform => NoiseDistribution::uniform(k),
            Self::Absorbing => NoiseDistribution::absorbing(k),
            Self::Custom { probs } => {
                if probs.len() != k {
                    return Err(Error::Config(format!("custom noise has {} entries for K = {k}", probs.len())));
                }
                NoiseDistribution::custom(Categorical::new(probs.clone()).map_err(|e| Error::Config(e.to_string()))?)
            }
        };
        Ok(noise)
    }
}

fn default_embed() -> usize {
    32
}
fn default_time() -> usize {
    16
}
fn default_hidden() -> usize {
    64
}
fn default_context() -> ContextKind {
    ContextKind::Window { w: 3 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_time")]
    pub time_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_context")]
    pub context: ContextKind,
}

impl Default for ModelSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Either a number of evenly spaced reverse steps or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepsSpec {
    Count(usize),
    List(Vec<usize>),
}

impl StepsSpec {
    pub fn resolve(&self, total: usize) -> Result<Vec<usize>> {
        match self {
            Self::Count(c) => uniform_steps(total, *c),
            Self::List(l) => {
                crate::sampler::check_steps(l, total)?;
                Ok(l.clone())
            }
        }
    }
}

fn default_steps() -> StepsSpec {
    StepsSpec::Count(10)
}
fn default_strategy() -> RoutingStrategy {
    RoutingStrategy::adaptive(KScheduleKind::Cosine)
}
fn default_tau() -> f64 {
    1.0
}
fn default_mode() -> DecodeMode {
    DecodeMode::Argmax
}
fn default_one() -> usize {
    1
}
fn default_count() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    #[serde(default = "default_steps")]
    pub steps: StepsSpec,
    #[serde(default = "default_strategy")]
    pub strategy: RoutingStrategy,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_mode")]
    pub mode: DecodeMode,
    /// Candidates drawn per output row; more than one enables reranking.
    #[serde(default = "default_one")]
    pub candidates: usize,
    /// Rows to generate when no source file is given.
    #[serde(default = "default_count")]
    pub count: usize,
    /// Use a vanilla ancestral sampler instead of routing.
    #[serde(default)]
    pub vanilla: Option<VanillaKind>,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SamplingSpec {
    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            strategy: self.strategy,
            tau: self.tau,
            mode: self.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config("sampling tau must be positive".into()));
        }
        if self.candidates == 0 {
            return Err(Error::Config("sampling candidates must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Corpus file, or the stem of a `.src`/`.tgt` pair.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization, training and sampling.
    pub seed: u64,
    #[serde(rename = "K")]
    pub vocab: usize,
    #[serde(rename = "N")]
    pub seq_len: usize,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default = "default_noise")]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub paths: Paths,
}

fn default_noise() -> NoiseSpec {
    NoiseSpec::Absorbing
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.materialize())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    /// Copies the run seed into the training section.
    pub fn materialize(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }

    pub fn schedule(&self) -> Result<AlphaSchedule> {
        AlphaSchedule::from_spec(&self.schedule).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn noise(&self) -> Result<NoiseDistribution> {
        self.noise.build(self.vocab)
    }

    pub fn arch(&self, conditioned: bool) -> Arch {
        Arch {
            vocab: self.vocab,
            max_len: self.seq_len,
            embed_dim: self.model.embed_dim,
            time_dim: self.model.time_dim,
            hidden_dim: self.model.hidden_dim,
            context: self.model.context,
            conditioned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        if self.vocab < 2 || self.seq_len == 0 {
            return Err(Error::Config("need K >= 2 and N >= 1".into()));
        }
        self.schedule()?;
        self.noise().map_err(cfg)?;
        self.arch(false).validate().map_err(cfg)?;
        self.train.validate()?;
        self.sampling.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        crate::files::to_json_bytes(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_str(r#"{"seed": 7, "K": 8, "N": 6}"#).unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.schedule().unwrap().steps(), 50);
        assert_eq!(c.noise().unwrap(), NoiseDistribution::absorbing(8));
        assert_eq!(c.sampling.steps.resolve(50).unwrap().len(), 11);
        assert_eq!(c.model.embed_dim, 32);
        c.validate().unwrap();
    }

    #[test]
    fn materialized_config_round_trips() {
        let c = RunConfig::from_str(
            r#"{"seed": 1, "K": 5, "N": 3, "schedule": {"T": 3, "alpha": [1.0, 0.6, 0.2, 0.0]},
                "noise": {"kind": "custom", "probs": [0.2, 0.2, 0.2, 0.2, 0.2]},
                "sampling": {"steps": [3, 1, 0], "strategy": {"kind": "stochastic"}}}"#,
        )
        .unwrap();
        let text = String::from_utf8(c.to_json().unwrap()).unwrap();
        assert_eq!(RunConfig::from_str(&text).unwrap(), c);
    }

    #[test]
    fn missing_seed_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_str(r#"{"K": 5, "N": 3}"#), Err(Error::Config(_))));
        let c = RunConfig::from_str(r#"{"seed": 1, "K": 5, "N": 3, "train": {"ema_decay": 1.5}}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::from_str(r#"{"seed": 1, "K": 5, "N": 3, "schedule": {"T": 2, "alpha": [1.0, 2.0, 0.0]}}"#)
            .unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(RunConfig::from_str(r#"{"seed": 1, "K": 5, "N": 3, "bogus": 1}"#).is_err());
    }
}
