//! Exact distributions of the interpolating diffusion
//! `q(x_t | x_{t-1}) = beta_t x_{t-1} + (1 - beta_t) q_noise`.
//!
//! [`backward_bayes`] enumerates Bayes' rule over every intermediate state and
//! is kept as the reference for the closed-form [`backward_branch`] used by
//! the sampler and trainer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::{Categorical, TokenId};
use crate::error::{Error, Result};
use crate::schedules::AlphaSchedule;

/// The stationary noise distribution `q_noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseDistribution {
    Uniform {
        #[serde(rename = "K")]
        k: usize,
    },
    Absorbing {
        #[serde(rename = "K")]
        k: usize,
        mask_id: TokenId,
    },
    Custom {
        probs: Vec<f64>,
    },
}

impl NoiseDistribution {
    pub fn uniform(k: usize) -> Self {
        Self::Uniform { k }
    }

    /// Absorbing noise with the mask at `K - 1`.
    pub fn absorbing(k: usize) -> Self {
        Self::Absorbing { k, mask_id: k - 1 }
    }

    pub fn custom(dist: Categorical) -> Self {
        Self::Custom {
            probs: dist.into_probs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Uniform { k } if *k < 1 => Err(Error::Config("uniform noise needs K >= 1".into())),
            Self::Absorbing { k, mask_id } if mask_id >= k => Err(Error::TokenOutOfRange {
                id: *mask_id,
                k: *k,
            }),
            Self::Custom { probs } => Categorical::new(probs.clone()).map(|_| ()),
            _ => Ok(()),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Uniform { k } | Self::Absorbing { k, .. } => *k,
            Self::Custom { probs } => probs.len(),
        }
    }

    pub fn mask_id(&self) -> Option<TokenId> {
        match self {
            Self::Absorbing { mask_id, .. } => Some(*mask_id),
            _ => None,
        }
    }

    /// `q_noise(u = id)`.
    pub fn mass(&self, id: TokenId) -> f64 {
        match self {
            Self::Uniform { k } => 1.0 / *k as f64,
            Self::Absorbing { mask_id, .. } => {
                if id == *mask_id {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Custom { probs } => probs[id],
        }
    }

    pub fn to_categorical(&self) -> Categorical {
        match self {
            Self::Uniform { k } => Categorical::uniform(*k),
            Self::Absorbing { k, mask_id } => Categorical::point_mass(*k, *mask_id),
            Self::Custom { probs } => Categorical::new(probs.clone()).expect("validated custom noise"),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        match self {
            Self::Uniform { k } => rng.gen_range(0..*k),
            Self::Absorbing { mask_id, .. } => *mask_id,
            Self::Custom { probs } => crate::categorical::sample_weights(probs, rng),
        }
    }

    pub(crate) fn check_token(&self, id: TokenId) -> Result<()> {
        let k = self.vocab_size();
        if id >= k {
            Err(Error::TokenOutOfRange { id, k })
        } else {
            Ok(())
        }
    }
}

/// `keep * onehot(id) + (1 - keep) * q_noise`.
fn interpolate(id: TokenId, keep: f64, noise: &NoiseDistribution) -> Categorical {
    let k = noise.vocab_size();
    let probs = (0..k)
        .map(|j| {
            let hit = if j == id { keep } else { 0.0 };
            hit + (1.0 - keep) * noise.mass(j)
        })
        .collect();
    Categorical::new(probs).expect("interpolation of two distributions")
}

/// Forward marginal `alpha_t x_0 + (1 - alpha_t) q_noise`.
pub fn q_xt_given_x0(
    x0: TokenId,
    t: usize,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
) -> Result<Categorical> {
    noise.check_token(x0)?;
    if t > sched.steps() {
        return Err(Error::InvalidArgument(format!("step {t} exceeds T = {}", sched.steps())));
    }
    Ok(interpolate(x0, sched.alpha(t), noise))
}

/// Forward transition across a gap, `(alpha_t/alpha_s) x_s + (1 - alpha_t/alpha_s) q_noise`.
pub fn q_xt_given_xs(
    x_s: TokenId,
    s: usize,
    t: usize,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
) -> Result<Categorical> {
    noise.check_token(x_s)?;
    let keep = sched.retention(s, t)?;
    Ok(interpolate(x_s, keep, noise))
}

/// Corrupts every position independently with the forward marginal at `t`.
pub fn corrupt<R: Rng + ?Sized>(
    x0_seq: &[TokenId],
    t: usize,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if t > sched.steps() {
        return Err(Error::InvalidArgument(format!("step {t} exceeds T = {}", sched.steps())));
    }
    let keep = sched.alpha(t);
    x0_seq
        .iter()
        .map(|&x0| {
            noise.check_token(x0)?;
            if keep >= 1.0 || rng.gen::<f64>() < keep {
                Ok(x0)
            } else {
                Ok(noise.sample(rng))
            }
        })
        .collect()
}

/// Noise that interpolates between the current token and `q_noise`.
pub fn noise_given_xt(
    x_t: TokenId,
    s: usize,
    t: usize,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
) -> Result<Categorical> {
    q_xt_given_xs(x_t, s, t, sched, noise)
}

/// `q(x_s | x_t, x_0)` by enumerating `q(x_t | x_s) q(x_s | x_0)` over all `x_s`.
pub fn backward_bayes(
    x_t: TokenId,
    x0: TokenId,
    s: usize,
    t: usize,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
) -> Result<Categorical> {
    noise.check_token(x_t)?;
    let prior = q_xt_given_x0(x0, s, sched, noise)?;
    let k = noise.vocab_size();
    let mut joint = Vec::with_capacity(k);
    for x_s in 0..k {
        let forward = q_xt_given_xs(x_s, s, t, sched, noise)?;
        joint.push(forward.prob(x_t) * prior.prob(x_s));
    }
    let evidence: f64 = joint.iter().sum();
    if evidence <= 0.0 {
        return Err(Error::Impossible(format!(
            "q(x_{t} = {x_t} | x_0 = {x0}) = 0"
        )));
    }
    Categorical::new(joint.into_iter().map(|p| p / evidence).collect())
}

/// Closed-form two-branch backward transition:
/// `lambda1 x_t + (1 - lambda1) q_noise` when `x_t = x_0`, otherwise
/// `lambda2 x_0 + (1 - lambda2) q_noise(x_t)`.
pub fn backward_branch(
    x_t: TokenId,
    x0: TokenId,
    s: usize,
    t: usize,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
) -> Result<Categorical> {
    noise.check_token(x_t)?;
    noise.check_token(x0)?;
    if t > sched.steps() || s >= t {
        return Err(Error::InvalidArgument(format!("need s < t <= T, got s = {s}, t = {t}")));
    }
    let mass = noise.mass(x_t);
    let a_t = sched.alpha(t);
    let evidence = if x_t == x0 { a_t + (1.0 - a_t) * mass } else { (1.0 - a_t) * mass };
    if evidence <= 0.0 {
        return Err(Error::Impossible(format!(
            "q(x_{t} = {x_t} | x_0 = {x0}) = 0"
        )));
    }
    let k = noise.vocab_size();
    if x_t == x0 {
        let l1 = sched.lambda1(s, t, mass)?;
        Ok(Categorical::mix(l1, &Categorical::point_mass(k, x_t), &noise.to_categorical()))
    } else {
        let l2 = sched.lambda2(s, t)?;
        let renoise = noise_given_xt(x_t, s, t, sched, noise)?;
        Ok(Categorical::mix(l2, &Categorical::point_mass(k, x0), &renoise))
    }
}

/// Parameterized absorbing reverse step with prediction `f` of `x_0`.
pub fn vanilla_backward_absorbing(
    f: &Categorical,
    x_t: TokenId,
    s: usize,
    t: usize,
    sched: &AlphaSchedule,
    mask_id: TokenId,
) -> Result<Categorical> {
    let k = f.len();
    if x_t >= k {
        return Err(Error::TokenOutOfRange { id: x_t, k });
    }
    if mask_id >= k {
        return Err(Error::TokenOutOfRange { id: mask_id, k });
    }
    if t > sched.steps() || s >= t {
        return Err(Error::InvalidArgument(format!("need s < t <= T, got s = {s}, t = {t}")));
    }
    if x_t != mask_id {
        return Ok(Categorical::point_mass(k, x_t));
    }
    let denoise = sched.lambda2(s, t)?;
    Ok(Categorical::mix(denoise, f, &Categorical::point_mass(k, mask_id)))
}

/// Parameterized multinomial reverse step `q(x_s | x_t, x_0 = f)` for uniform
/// noise, written as the four-term closed form with `beta` replaced by the gap
/// retention `alpha_t / alpha_s` (one step when `s = t - 1`).
pub fn vanilla_backward_multinomial(
    f: &Categorical,
    x_t: TokenId,
    s: usize,
    t: usize,
    sched: &AlphaSchedule,
) -> Result<Categorical> {
    let k = f.len();
    if x_t >= k {
        return Err(Error::TokenOutOfRange { id: x_t, k });
    }
    let beta = sched.retention(s, t)?;
    let a_s = sched.alpha(s);
    let a_t = sched.alpha(t);
    let kf = k as f64;
    let denom = a_t * f.prob(x_t) + (1.0 - a_t) / kf;
    if denom <= 0.0 {
        return Err(Error::Singular(format!("vanishing normalizer at t = {t}")));
    }
    let probs = (0..k)
        .map(|j| {
            let on_xt = if j == x_t { 1.0 } else { 0.0 };
            let num = a_t * on_xt * f.prob(j)
                + beta * (1.0 - a_s) * on_xt / kf
                + (1.0 - beta) * a_s * f.prob(j) / kf
                + (1.0 - beta) * (1.0 - a_s) / (kf * kf);
            num / denom
        })
        .collect();
    Categorical::new(probs)
}
