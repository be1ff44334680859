//! Exact posteriors `p(x_0,n | x_t)` for synthetic data distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserOutput};
use crate::categorical::{sample_weights, Categorical, TokenId, NORMALIZATION_TOL};
use crate::error::{Error, Result};
use crate::processes::NoiseDistribution;
use crate::schedules::AlphaSchedule;

/// Synthetic data distribution over fixed-length sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataModel {
    /// Independent positions with their own marginals.
    Factorized { marginals: Vec<Vec<f64>> },
    /// First-order chain with a row-stochastic transition matrix.
    Markov {
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
    },
}

fn check_dist(name: &str, p: &[f64], k: usize) -> Result<()> {
    if p.len() != k {
        return Err(Error::Shape { expected: k, got: p.len() });
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidArgument(format!("{name} is not a distribution (sum {sum})")));
    }
    Ok(())
}

/// Random distribution over the first `support` ids, zero elsewhere.
fn random_dist<R: Rng + ?Sized>(k: usize, support: usize, rng: &mut R) -> Vec<f64> {
    // Exponential weights give a flat Dirichlet draw.
    let mut w: Vec<f64> = (0..support).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w.resize(k, 0.0);
    w
}

impl DataModel {
    /// Seeded per-position marginals over ids `0..K-1` (id `K-1` reserved for the mask).
    pub fn random_factorized<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Result<Self> {
        if k < 2 || n == 0 {
            return Err(Error::InvalidArgument(format!("need K >= 2 and N >= 1, got K = {k}, N = {n}")));
        }
        Ok(Self::Factorized {
            marginals: (0..n).map(|_| random_dist(k, k - 1, rng)).collect(),
        })
    }

    /// Seeded chain over ids `0..K-1`.
    pub fn random_markov<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need K >= 2, got {k}")));
        }
        let initial = random_dist(k, k - 1, rng);
        let mut transition: Vec<Vec<f64>> = (0..k - 1).map(|_| random_dist(k, k - 1, rng)).collect();
        // The reserved id never occurs; give it a valid row anyway.
        transition.push(random_dist(k, k - 1, rng));
        Ok(Self::Markov { initial, transition })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Factorized { marginals } => marginals.first().map_or(0, Vec::len),
            Self::Markov { initial, .. } => initial.len(),
        }
    }

    /// Fixed length for factorized models, `None` for chains.
    pub fn seq_len(&self) -> Option<usize> {
        match self {
            Self::Factorized { marginals } => Some(marginals.len()),
            Self::Markov { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.vocab_size();
        match self {
            Self::Factorized { marginals } => {
                if marginals.is_empty() {
                    return Err(Error::InvalidArgument("no marginals".into()));
                }
                for (n, m) in marginals.iter().enumerate() {
                    check_dist(&format!("marginal {n}"), m, k)?;
                }
            }
            Self::Markov { initial, transition } => {
                check_dist("initial", initial, k)?;
                if transition.len() != k {
                    return Err(Error::Shape { expected: k, got: transition.len() });
                }
                for (i, row) in transition.iter().enumerate() {
                    check_dist(&format!("transition row {i}"), row, k)?;
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<TokenId> {
        match self {
            Self::Factorized { marginals } => marginals.iter().take(n).map(|m| sample_weights(m, rng)).collect(),
            Self::Markov { initial, transition } => {
                let mut out = Vec::with_capacity(n);
                if n == 0 {
                    return out;
                }
                let mut cur = sample_weights(initial, rng);
                out.push(cur);
                for _ in 1..n {
                    cur = sample_weights(&transition[cur], rng);
                    out.push(cur);
                }
                out
            }
        }
    }

    /// Exact probability of a full sequence.
    pub fn probability(&self, seq: &[TokenId]) -> f64 {
        match self {
            Self::Factorized { marginals } => seq.iter().zip(marginals).map(|(&x, m)| m[x]).product(),
            Self::Markov { initial, transition } => {
                let Some(&first) = seq.first() else { return 1.0 };
                let mut p = initial[first];
                for w in seq.windows(2) {
                    p *= transition[w[0]][w[1]];
                }
                p
            }
        }
    }

    /// Per-position marginal distributions of `x_0` for sequences of length `n`.
    pub fn position_marginals(&self, n: usize) -> Vec<Vec<f64>> {
        match self {
            Self::Factorized { marginals } => marginals.iter().take(n).cloned().collect(),
            Self::Markov { initial, transition } => {
                let k = initial.len();
                let mut out = Vec::with_capacity(n);
                let mut cur = initial.clone();
                for _ in 0..n {
                    out.push(cur.clone());
                    let mut next = vec![0.0; k];
                    for i in 0..k {
                        for j in 0..k {
                            next[j] += cur[i] * transition[i][j];
                        }
                    }
                    cur = next;
                }
                out
            }
        }
    }
}

/// Likelihood of the observed noisy token under each clean value.
fn emission(x_t: TokenId, t: usize, sched: &AlphaSchedule, noise: &NoiseDistribution) -> Vec<f64> {
    let a = sched.alpha(t);
    let base = (1.0 - a) * noise.mass(x_t);
    (0..noise.vocab_size())
        .map(|j| if j == x_t { a + base } else { base })
        .collect()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let s: f64 = v.iter().sum();
    if !(s > 0.0) {
        return Err(Error::Impossible("observation has zero probability under the data model".into()));
    }
    v.iter_mut().for_each(|x| *x /= s);
    Ok(())
}

/// Exact posterior marginals of each clean token given the whole noisy sequence.
pub fn oracle_predict(
    model: &DataModel,
    tokens: &[TokenId],
    t: usize,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
) -> Result<DenoiserOutput> {
    let k = model.vocab_size();
    if noise.vocab_size() != k {
        return Err(Error::Shape { expected: k, got: noise.vocab_size() });
    }
    if t > sched.steps() {
        return Err(Error::InvalidArgument(format!("step {t} exceeds T = {}", sched.steps())));
    }
    for &x in tokens {
        if x >= k {
            return Err(Error::TokenOutOfRange { id: x, k });
        }
    }
    let n = tokens.len();
    let emissions: Vec<Vec<f64>> = tokens.iter().map(|&x| emission(x, t, sched, noise)).collect();
    let posteriors = match model {
        DataModel::Factorized { marginals } => {
            if marginals.len() != n {
                return Err(Error::Shape { expected: marginals.len(), got: n });
            }
            marginals
                .iter()
                .zip(&emissions)
                .map(|(m, e)| {
                    let mut p: Vec<f64> = m.iter().zip(e).map(|(a, b)| a * b).collect();
                    normalize(&mut p)?;
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?
        }
        DataModel::Markov { initial, transition } => forward_backward(initial, transition, &emissions)?,
    };
    Ok(DenoiserOutput {
        per_position: posteriors
            .into_iter()
            .map(Categorical::from_weights)
            .collect::<Result<_>>()?,
    })
}

/// Scaled forward-backward recursion returning posterior marginals.
fn forward_backward(initial: &[f64], transition: &[Vec<f64>], emissions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = emissions.len();
    let k = initial.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut fwd = vec![vec![0.0; k]; n];
    for j in 0..k {
        fwd[0][j] = initial[j] * emissions[0][j];
    }
    normalize(&mut fwd[0])?;
    for pos in 1..n {
        for j in 0..k {
            let mut acc = 0.0;
            for i in 0..k {
                acc += fwd[pos - 1][i] * transition[i][j];
            }
            fwd[pos][j] = acc * emissions[pos][j];
        }
        normalize(&mut fwd[pos])?;
    }
    let mut bwd = vec![vec![1.0; k]; n];
    for pos in (0..n - 1).rev() {
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..k {
                acc += transition[i][j] * emissions[pos + 1][j] * bwd[pos + 1][j];
            }
            bwd[pos][i] = acc;
        }
        normalize(&mut bwd[pos])?;
    }
    (0..n)
        .map(|pos| {
            let mut p: Vec<f64> = fwd[pos].iter().zip(&bwd[pos]).map(|(a, b)| a * b).collect();
            normalize(&mut p)?;
            Ok(p)
        })
        .collect()
}

/// [`oracle_predict`] bound to a schedule and noise kind.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub model: DataModel,
    pub schedule: AlphaSchedule,
    pub noise: NoiseDistribution,
}

impl Denoiser for OracleDenoiser {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn predict(&self, tokens: &[TokenId], t: usize, _condition: Option<&[TokenId]>) -> Result<DenoiserOutput> {
        oracle_predict(&self.model, tokens, t, &self.schedule, &self.noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Enumerates all K^N clean sequences.
    fn brute_posterior(
        model: &DataModel,
        tokens: &[TokenId],
        t: usize,
        sched: &AlphaSchedule,
        noise: &NoiseDistribution,
    ) -> Vec<Vec<f64>> {
        let k = model.vocab_size();
        let n = tokens.len();
        let mut acc = vec![vec![0.0; k]; n];
        let total = k.pow(n as u32);
        let mut seq = vec![0; n];
        for code in 0..total {
            let mut c = code;
            for slot in seq.iter_mut() {
                *slot = c % k;
                c /= k;
            }
            let mut w = model.probability(&seq);
            for (pos, &x0) in seq.iter().enumerate() {
                let q = crate::processes::q_xt_given_x0(x0, t, sched, noise).unwrap();
                w *= q.prob(tokens[pos]);
            }
            for (pos, &x0) in seq.iter().enumerate() {
                acc[pos][x0] += w;
            }
        }
        for row in acc.iter_mut() {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        acc
    }

    #[test]
    fn absorbing_factorized_reduces_to_marginal_or_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = DataModel::random_factorized(5, 3, &mut rng).unwrap();
        let sched = AlphaSchedule::linear(10).unwrap();
        let noise = NoiseDistribution::absorbing(5);
        let out = oracle_predict(&model, &[2, 4, 0], 6, &sched, &noise).unwrap();
        assert_eq!(out.per_position[0], Categorical::point_mass(5, 2));
        let DataModel::Factorized { marginals } = &model else { unreachable!() };
        for (a, b) in out.per_position[1].probs().iter().zip(&marginals[1]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(out.per_position[2], Categorical::point_mass(5, 0));
    }

    #[test]
    fn markov_matches_enumeration_one_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = DataModel::random_markov(3, &mut rng).unwrap();
        let sched = AlphaSchedule::linear(4).unwrap();
        let noise = NoiseDistribution::absorbing(3);
        let tokens = [0, 2, 1, 0];
        let got = oracle_predict(&model, &tokens, 2, &sched, &noise).unwrap();
        let want = brute_posterior(&model, &tokens, 2, &sched, &noise);
        for (g, w) in got.per_position.iter().zip(&want) {
            for (a, b) in g.probs().iter().zip(w) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn markov_matches_enumeration_all_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sched = AlphaSchedule::linear(5).unwrap();
        for k in 2..=4usize {
            let model = DataModel::random_markov(k, &mut rng).unwrap();
            for noise in [NoiseDistribution::absorbing(k), NoiseDistribution::uniform(k)] {
                for n in 1..=6usize {
                    // every mask pattern over a random clean sequence
                    let clean = model.sample(n, &mut rng);
                    for pattern in 0..(1u32 << n) {
                        let tokens: Vec<TokenId> = (0..n)
                            .map(|p| if pattern >> p & 1 == 1 { match noise.mask_id() { Some(m) => m, None => (clean[p] + 1) % k } } else { clean[p] })
                            .collect();
                        let t = 1 + (pattern as usize % 5);
                        let got = match oracle_predict(&model, &tokens, t, &sched, &noise) {
                            Ok(g) => g,
                            Err(Error::Impossible(_)) => continue,
                            Err(e) => panic!("{e}"),
                        };
                        let want = brute_posterior(&model, &tokens, t, &sched, &noise);
                        for (g, w) in got.per_position.iter().zip(&want) {
                            for (a, b) in g.probs().iter().zip(w) {
                                assert!((a - b).abs() <= 1e-10, "k={k} n={n} pattern={pattern}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DataModel::random_factorized(4, 3, &mut rng).unwrap();
        let sched = AlphaSchedule::linear(4).unwrap();
        assert!(oracle_predict(&model, &[0, 1], 1, &sched, &NoiseDistribution::absorbing(4)).is_err());
        assert!(oracle_predict(&model, &[0, 1, 2], 1, &sched, &NoiseDistribution::absorbing(5)).is_err());
        assert!(oracle_predict(&model, &[0, 1, 7], 1, &sched, &NoiseDistribution::absorbing(4)).is_err());
    }

    #[test]
    fn generated_models_avoid_reserved_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = DataModel::random_factorized(6, 4, &mut rng).unwrap();
        f.validate().unwrap();
        let m = DataModel::random_markov(6, &mut rng).unwrap();
        m.validate().unwrap();
        for _ in 0..200 {
            assert!(f.sample(4, &mut rng).iter().all(|&x| x < 5));
            assert!(m.sample(9, &mut rng).iter().all(|&x| x < 5));
        }
    }
}
