//! Noise schedules, routing coefficients and loss reweighting.
//!
//! A schedule is the sequence `alpha[0..=T]` with `alpha[0] = 1`, strictly
//! decreasing, and `alpha[T] >= 0`. The per-step retention is
//! `beta[t] = alpha[t] / alpha[t-1]`. Formulas that divide by `alpha` or
//! `1 - alpha` check their denominators explicitly; `alpha[T] = 0` is legal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating user-supplied schedules.
const SCHEDULE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSchedule {
    alpha: Vec<f64>,
}

impl AlphaSchedule {
    /// `alpha[t] = 1 - t/T`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        let alpha = (0..=steps)
            .map(|t| {
                if t == steps {
                    0.0
                } else {
                    1.0 - t as f64 / steps as f64
                }
            })
            .collect();
        Ok(Self { alpha })
    }

    /// Validates an arbitrary decreasing sequence.
    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidSchedule(
                "need at least alpha[0] and alpha[1]".into(),
            ));
        }
        if alpha[0] != 1.0 {
            return Err(Error::InvalidSchedule(format!(
                "alpha[0] must be exactly 1, got {}",
                alpha[0]
            )));
        }
        for (t, &a) in alpha.iter().enumerate() {
            if !a.is_finite() || !(-SCHEDULE_TOL..=1.0).contains(&a) {
                return Err(Error::InvalidSchedule(format!("alpha[{t}] = {a} outside [0, 1]")));
            }
        }
        for t in 1..alpha.len() {
            if alpha[t] >= alpha[t - 1] {
                return Err(Error::InvalidSchedule(format!(
                    "alpha must be strictly decreasing: alpha[{}] = {} >= alpha[{}] = {}",
                    t,
                    alpha[t],
                    t - 1,
                    alpha[t - 1]
                )));
            }
        }
        let alpha = alpha.into_iter().map(|a| a.max(0.0)).collect();
        Ok(Self { alpha })
    }

    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        match spec {
            ScheduleSpec::Family { steps, family } => match family {
                ScheduleFamily::Linear => Self::linear(*steps),
            },
            ScheduleSpec::Explicit { steps, alpha } => {
                if alpha.len() != steps + 1 {
                    return Err(Error::InvalidSchedule(format!(
                        "T = {steps} requires {} alpha values, got {}",
                        steps + 1,
                        alpha.len()
                    )));
                }
                Self::from_alpha(alpha.clone())
            }
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} exceeds T = {}",
                self.steps()
            )));
        }
        Ok(())
    }

    fn check_pair(&self, s: usize, t: usize) -> Result<()> {
        self.check_step(t)?;
        if s >= t {
            return Err(Error::InvalidArgument(format!("need s < t, got s = {s}, t = {t}")));
        }
        Ok(())
    }

    /// `alpha[t] / alpha[t-1]`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::InvalidArgument("beta is defined for t >= 1".into()));
        }
        self.retention(t - 1, t)
    }

    /// `alpha[t] / alpha[s]`, the retention probability across a gap.
    pub fn retention(&self, s: usize, t: usize) -> Result<f64> {
        self.check_pair(s, t)?;
        let a_s = self.alpha[s];
        if a_s <= 0.0 {
            return Err(Error::Singular(format!("alpha[{s}] = 0")));
        }
        Ok(self.alpha[t] / a_s)
    }

    /// Probability that a noisy token is routed to the clean state when
    /// jumping from `t` to `s`: `(alpha[s] - alpha[t]) / (1 - alpha[t])`.
    pub fn lambda2(&self, s: usize, t: usize) -> Result<f64> {
        self.check_pair(s, t)?;
        let a_t = self.alpha[t];
        let denom = 1.0 - a_t;
        if denom <= 0.0 {
            return Err(Error::Singular(format!("1 - alpha[{t}] = 0")));
        }
        Ok((self.alpha[s] - a_t) / denom)
    }

    /// Probability that a clean token stays clean when jumping from `t` to
    /// `s`, given the noise mass `q_noise(x_t)` at the current token.
    pub fn lambda1(&self, s: usize, t: usize, noise_mass_at_xt: f64) -> Result<f64> {
        self.check_pair(s, t)?;
        if !(0.0..=1.0).contains(&noise_mass_at_xt) {
            return Err(Error::InvalidArgument(format!(
                "noise mass {noise_mass_at_xt} outside [0, 1]"
            )));
        }
        let a_s = self.alpha[s];
        let a_t = self.alpha[t];
        if a_s <= 0.0 {
            return Err(Error::Singular(format!("alpha[{s}] = 0")));
        }
        let denom = a_t + (1.0 - a_t) * noise_mass_at_xt;
        if denom <= 0.0 {
            return Err(Error::Singular(format!(
                "alpha[{t}] = 0 with zero noise mass at x_t"
            )));
        }
        let reset = (1.0 - a_t / a_s) * (1.0 - a_s) * noise_mass_at_xt / denom;
        Ok((1.0 - reset).clamp(0.0, 1.0))
    }

    pub fn coefficients(&self, s: usize, t: usize, noise_mass_at_xt: f64) -> Result<RoutingCoefficients> {
        Ok(RoutingCoefficients {
            lambda1: self.lambda1(s, t, noise_mass_at_xt)?,
            lambda2: self.lambda2(s, t)?,
        })
    }

    pub fn to_spec(&self) -> ScheduleSpec {
        if let Ok(lin) = Self::linear(self.steps()) {
            if lin == *self {
                return ScheduleSpec::Family {
                    steps: self.steps(),
                    family: ScheduleFamily::Linear,
                };
            }
        }
        ScheduleSpec::Explicit {
            steps: self.steps(),
            alpha: self.alpha.clone(),
        }
    }
}

/// `lambda1` and `lambda2` for one reverse transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingCoefficients {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl RoutingCoefficients {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(Self { lambda1, lambda2 })
    }
}

/// Weight applied to the step-`t` cross-entropy during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReweightingScheme {
    /// `(alpha[t-1] - alpha[t]) / (1 - alpha[t])`
    Original,
    /// `1 - (t-1)/T`
    #[default]
    Linear,
    Constant,
}

impl ReweightingScheme {
    pub fn weight(self, sched: &AlphaSchedule, t: usize) -> Result<f64> {
        if t == 0 || t > sched.steps() {
            return Err(Error::InvalidArgument(format!(
                "reweighting needs 1 <= t <= {}, got {t}",
                sched.steps()
            )));
        }
        match self {
            Self::Original => sched.lambda2(t - 1, t),
            Self::Linear => Ok(1.0 - (t - 1) as f64 / sched.steps() as f64),
            Self::Constant => Ok(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Linear,
}

/// JSON form of a schedule: `{"T": 4, "family": "linear"}` or
/// `{"T": 2, "alpha": [1.0, 0.4, 0.0]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Family {
        #[serde(rename = "T")]
        steps: usize,
        family: ScheduleFamily,
    },
    Explicit {
        #[serde(rename = "T")]
        steps: usize,
        alpha: Vec<f64>,
    },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::Family {
            steps: 50,
            family: ScheduleFamily::Linear,
        }
    }
}
