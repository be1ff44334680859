use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance on the sum-to-one invariant.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Index of a token in a vocabulary of size `K`.
pub type TokenId = usize;

/// A probability vector over `K` token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty categorical".into()));
        }
        if let Some((j, p)) = probs.iter().enumerate().find(|(_, p)| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("probs[{j}] = {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights. Fails when the total mass is zero.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidArgument(format!("cannot normalize weights with total {sum}")));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn point_mass(k: usize, id: TokenId) -> Self {
        let mut probs = vec![0.0; k];
        probs[id] = 1.0;
        Self { probs }
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    /// `w * a + (1 - w) * b`.
    pub fn mix(w: f64, a: &Categorical, b: &Categorical) -> Self {
        debug_assert_eq!(a.len(), b.len());
        Self {
            probs: a
                .probs
                .iter()
                .zip(&b.probs)
                .map(|(x, y)| w * x + (1.0 - w) * y)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id]
    }

    /// Lowest index among the maxima.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (j, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = j;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        sample_weights(&self.probs, rng)
    }

    /// Half the L1 distance.
    pub fn total_variation(&self, other: &Categorical) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// `sum_j p_j ln(p_j / q_j)`, infinite when `q` misses support of `p`.
    pub fn kl(&self, other: &Categorical) -> f64 {
        let mut acc = 0.0;
        for (&p, &q) in self.probs.iter().zip(&other.probs) {
            if p > 0.0 {
                if q <= 0.0 {
                    return f64::INFINITY;
                }
                acc += p * (p / q).ln();
            }
        }
        acc
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Draw an index proportionally to nonnegative `weights` (need not sum to 1).
pub fn sample_weights<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = j;
            if u < acc {
                return j;
            }
        }
    }
    last_positive
}
