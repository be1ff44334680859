//! JSON checkpoints of a trained denoiser together with its diffusion.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Arch, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::files::write_json;
use crate::processes::NoiseDistribution;
use crate::schedules::{AlphaSchedule, ScheduleSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Field order here is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: Arch,
    pub params: Vec<f64>,
    pub ema_params: Option<Vec<f64>>,
    pub schedule: ScheduleSpec,
    pub noise: NoiseDistribution,
}

impl Checkpoint {
    pub fn new(
        model: &TrainableDenoiser,
        ema: Option<&TrainableDenoiser>,
        schedule: &AlphaSchedule,
        noise: &NoiseDistribution,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            arch: model.arch.clone(),
            params: model.params.clone(),
            ema_params: ema.map(|m| m.params.clone()),
            schedule: schedule.to_spec(),
            noise: noise.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.version)));
        }
        self.arch.validate()?;
        self.noise.validate()?;
        let want = self.arch.param_count();
        if self.params.len() != want {
            return Err(Error::Format(format!("expected {want} params, found {}", self.params.len())));
        }
        if let Some(e) = &self.ema_params {
            if e.len() != want {
                return Err(Error::Format(format!("expected {want} EMA params, found {}", e.len())));
            }
        }
        if self.noise.vocab_size() != self.arch.vocab {
            return Err(Error::Format("noise and model vocabularies differ".into()));
        }
        AlphaSchedule::from_spec(&self.schedule)?;
        Ok(())
    }

    pub fn model(&self) -> Result<TrainableDenoiser> {
        TrainableDenoiser::from_params(self.arch.clone(), self.params.clone())
    }

    /// EMA weights when present, otherwise the raw weights.
    pub fn sampling_model(&self) -> Result<TrainableDenoiser> {
        match &self.ema_params {
            Some(e) => TrainableDenoiser::from_params(self.arch.clone(), e.clone()),
            None => self.model(),
        }
    }

    pub fn schedule(&self) -> Result<AlphaSchedule> {
        AlphaSchedule::from_spec(&self.schedule)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_slice(&bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let ck: Self = serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
