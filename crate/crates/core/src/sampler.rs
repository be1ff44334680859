//! Routed reverse sampling and the vanilla ancestral baselines.
//!
//! A reverse step from `t` to `s` draws routing bits `(v1, v2)` per position
//! and then moves each token along one branch:
//! a denoised token (`b = 1`) is kept when `v1` and replaced by `u1 ~ q_noise`
//! otherwise; a noisy token (`b = 0`) becomes the predicted `x0` when `v2` and
//! `u2 ~ noise_given_xt` otherwise. Afterwards `b <- (b & v1) | v2`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::{Categorical, TokenId};
use crate::denoiser::Denoiser;
use crate::error::{shape, Error, Result};
use crate::processes::{noise_given_xt, vanilla_backward_absorbing, vanilla_backward_multinomial, NoiseDistribution};
use crate::schedules::{AlphaSchedule, RoutingCoefficients};

/// Tokens, denoised flags and confidences at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub tokens: Vec<TokenId>,
    pub denoised: Vec<bool>,
    pub t: usize,
    /// Confidences from the previous iteration.
    pub scores: Vec<f64>,
    /// Tokens from the previous iteration, used by the conservative rule.
    pub prev_tokens: Vec<TokenId>,
}

impl DiffusionState {
    /// Fully noisy starting state: nothing denoised, zero scores.
    pub fn initial(tokens: Vec<TokenId>, t: usize) -> Self {
        let n = tokens.len();
        Self {
            prev_tokens: tokens.clone(),
            tokens,
            denoised: vec![false; n],
            t,
            scores: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.tokens.len();
        shape(n, self.denoised.len())?;
        shape(n, self.scores.len())?;
        shape(n, self.prev_tokens.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingDecision {
    pub v1: Vec<bool>,
    pub v2: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KScheduleKind {
    Cosine,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingStrategy {
    Stochastic,
    AdaptiveTopK {
        k_schedule: KScheduleKind,
        #[serde(default)]
        gumbel: bool,
        #[serde(default)]
        conservative_v1: bool,
    },
}

impl RoutingStrategy {
    pub fn adaptive(k_schedule: KScheduleKind) -> Self {
        Self::AdaptiveTopK {
            k_schedule,
            gumbel: false,
            conservative_v1: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Argmax,
    Sample,
}

/// Decoding knobs shared by every step of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub strategy: RoutingStrategy,
    pub tau: f64,
    pub mode: DecodeMode,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            strategy: RoutingStrategy::adaptive(KScheduleKind::Cosine),
            tau: 1.0,
            mode: DecodeMode::Argmax,
        }
    }
}

/// Independent Bernoulli routing bits. `coeffs` holds either one entry per
/// position or a single entry shared by all positions.
pub fn route_stochastic<R: Rng + ?Sized>(
    state: &DiffusionState,
    coeffs: &[RoutingCoefficients],
    rng: &mut R,
) -> Result<RoutingDecision> {
    let n = state.len();
    if coeffs.len() != 1 {
        shape(n, coeffs.len())?;
    }
    let mut v1 = Vec::with_capacity(n);
    let mut v2 = Vec::with_capacity(n);
    for i in 0..n {
        let c = coeffs[if coeffs.len() == 1 { 0 } else { i }];
        v1.push(rng.gen_bool(c.lambda1));
        v2.push(rng.gen_bool(c.lambda2));
    }
    Ok(RoutingDecision { v1, v2 })
}

/// Number of positions to route to `x0` at step `t`.
pub fn k_schedule(kind: KScheduleKind, t: usize, steps: usize, n: usize) -> usize {
    if t == 0 || steps == 0 {
        return n;
    }
    if t >= steps {
        return 0;
    }
    let frac = t as f64 / steps as f64;
    let level = match kind {
        KScheduleKind::Cosine => (PI * frac / 2.0).cos(),
        KScheduleKind::Linear => 1.0 - frac,
    };
    ((level * n as f64).floor() as usize).min(n)
}

/// Indices of the `k` largest values, ties broken by lowest index.
fn top_k(values: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut chosen = vec![false; values.len()];
    for &i in order.iter().take(k) {
        chosen[i] = true;
    }
    chosen
}

/// Top-k routing: `v1 = v2 = 1` on the `k` most confident positions.
///
/// With `gumbel`, standard Gumbel noise is added to the log scores before
/// ranking. With `conservative_v1`, a position also keeps its token when its
/// confidence rose or its token changed since the previous iteration.
pub fn route_adaptive<R: Rng + ?Sized>(
    state: &DiffusionState,
    new_scores: &[f64],
    k: usize,
    strategy: RoutingStrategy,
    rng: &mut R,
) -> Result<RoutingDecision> {
    let n = state.len();
    shape(n, new_scores.len())?;
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds sequence length {n}")));
    }
    let RoutingStrategy::AdaptiveTopK {
        gumbel, conservative_v1, ..
    } = strategy
    else {
        return Err(Error::InvalidArgument("route_adaptive needs an adaptive strategy".into()));
    };
    let chosen = if gumbel {
        let perturbed: Vec<f64> = new_scores
            .iter()
            .map(|&s| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                s.ln() - (-u.ln()).ln()
            })
            .collect();
        top_k(&perturbed, k)
    } else {
        top_k(new_scores, k)
    };
    let v1 = if conservative_v1 {
        (0..n)
            .map(|i| chosen[i] || new_scores[i] > state.scores[i] || state.tokens[i] != state.prev_tokens[i])
            .collect()
    } else {
        chosen.clone()
    };
    Ok(RoutingDecision { v1, v2: chosen })
}

/// `b' = (b & v1) | v2`.
pub fn update_b(b: &[bool], v: &RoutingDecision) -> Result<Vec<bool>> {
    shape(b.len(), v.v1.len())?;
    shape(b.len(), v.v2.len())?;
    Ok(b.iter().zip(&v.v1).zip(&v.v2).map(|((&b, &v1), &v2)| (b && v1) || v2).collect())
}

/// Tempered distribution `softmax(log f / tau)`.
pub fn temper(f: &Categorical, tau: f64) -> Result<Categorical> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if tau == 1.0 {
        return Ok(f.clone());
    }
    let logs: Vec<f64> = f.probs().iter().map(|&p| if p > 0.0 { p.ln() / tau } else { f64::NEG_INFINITY }).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Categorical::from_weights(logs.iter().map(|&l| (l - max).exp()).collect())
}

/// Draws or picks the predicted clean token from `f`.
pub fn predict_x0<R: Rng + ?Sized>(f: &Categorical, tau: f64, mode: DecodeMode, rng: &mut R) -> Result<TokenId> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    match mode {
        DecodeMode::Argmax => Ok(f.argmax()),
        DecodeMode::Sample => Ok(temper(f, tau)?.sample(rng)),
    }
}

/// Removes the mask id from a prediction of `x0`, since clean data never
/// contains it. Falls back to uniform over the other ids if nothing is left.
pub fn exclude_mask(f: &Categorical, mask: Option<TokenId>) -> Categorical {
    let Some(mask) = mask else {
        return f.clone();
    };
    let mut w = f.probs().to_vec();
    if mask >= w.len() {
        return f.clone();
    }
    w[mask] = 0.0;
    if w.iter().sum::<f64>() <= 0.0 {
        w.iter_mut().for_each(|p| *p = 1.0);
        w[mask] = 0.0;
    }
    Categorical::from_weights(w).expect("nonzero weights")
}

/// Per-token branch of the two-step update.
pub fn route_token(b: bool, v1: bool, v2: bool, x_t: TokenId, x0_hat: TokenId, u1: TokenId, u2: TokenId) -> TokenId {
    match (b, v1, v2) {
        (true, true, _) => x_t,
        (true, false, _) => u1,
        (false, _, true) => x0_hat,
        (false, _, false) => u2,
    }
}

/// One reverse step from `state.t` to `target_s`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    state: &DiffusionState,
    denoiser: &D,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
    opts: &DecodeOptions,
    target_s: usize,
    condition: Option<&[TokenId]>,
    rng: &mut R,
) -> Result<DiffusionState> {
    state.check()?;
    let t = state.t;
    if target_s >= t || t > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "need target step < current step <= T, got {target_s} and {t}"
        )));
    }
    let n = state.len();
    let out = denoiser.predict(&state.tokens, t, condition)?;
    shape(n, out.len())?;
    let mask = noise.mask_id();

    let mut x0_hat = Vec::with_capacity(n);
    let mut new_scores = Vec::with_capacity(n);
    for f in &out.per_position {
        let f = exclude_mask(f, mask);
        new_scores.push(f.max_prob());
        x0_hat.push(predict_x0(&f, opts.tau, opts.mode, rng)?);
    }

    let decision = match opts.strategy {
        RoutingStrategy::Stochastic => {
            let lambda2 = sched.lambda2(target_s, t)?;
            let coeffs = (0..n)
                .map(|i| {
                    // lambda1 only matters for denoised positions.
                    let lambda1 = if state.denoised[i] {
                        sched.lambda1(target_s, t, noise.mass(state.tokens[i]))?
                    } else {
                        1.0
                    };
                    Ok(RoutingCoefficients { lambda1, lambda2 })
                })
                .collect::<Result<Vec<_>>>()?;
            route_stochastic(state, &coeffs, rng)?
        }
        RoutingStrategy::AdaptiveTopK { k_schedule: kind, .. } => {
            let k = k_schedule(kind, target_s, sched.steps(), n);
            route_adaptive(state, &new_scores, k, opts.strategy, rng)?
        }
    };

    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let x_t = state.tokens[i];
        let b = state.denoised[i];
        let next = if b && !decision.v1[i] {
            route_token(b, false, decision.v2[i], x_t, x0_hat[i], noise.sample(rng), x_t)
        } else if !b && !decision.v2[i] {
            let u2 = noise_given_xt(x_t, target_s, t, sched, noise)?.sample(rng);
            route_token(b, decision.v1[i], false, x_t, x0_hat[i], x_t, u2)
        } else {
            route_token(b, decision.v1[i], decision.v2[i], x_t, x0_hat[i], x_t, x_t)
        };
        tokens.push(next);
    }
    Ok(DiffusionState {
        denoised: update_b(&state.denoised, &decision)?,
        tokens,
        t: target_s,
        scores: new_scores,
        prev_tokens: state.tokens.clone(),
    })
}

/// Validates a reverse step sequence: starts at `T`, ends at 0, strictly decreasing.
pub fn check_steps(steps: &[usize], total: usize) -> Result<()> {
    let ok = steps.len() >= 2
        && steps[0] == total
        && *steps.last().unwrap() == 0
        && steps.windows(2).all(|w| w[0] > w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "step sequence must decrease strictly from {total} to 0, got {steps:?}"
        )))
    }
}

/// `count` roughly equal reverse steps from `T` down to 0.
pub fn uniform_steps(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::InvalidArgument(format!("need 1 <= steps <= T = {total}, got {count}")));
    }
    let mut steps: Vec<usize> = (0..=count)
        .map(|i| (total as f64 * (count - i) as f64 / count as f64).round() as usize)
        .collect();
    steps.dedup();
    Ok(steps)
}

/// Runs a routed reverse trajectory and returns its final state.
#[allow(clippy::too_many_arguments)]
pub fn sample_state<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    n: usize,
    steps: &[usize],
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
    opts: &DecodeOptions,
    condition: Option<&[TokenId]>,
    rng: &mut R,
) -> Result<DiffusionState> {
    check_steps(steps, sched.steps())?;
    let init = (0..n).map(|_| noise.sample(rng)).collect();
    let mut state = DiffusionState::initial(init, steps[0]);
    for &s in &steps[1..] {
        state = denoise_step(&state, denoiser, sched, noise, opts, s, condition, rng)?;
    }
    Ok(state)
}

/// Routed reverse sampling from pure noise; returns the final tokens.
#[allow(clippy::too_many_arguments)]
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    n: usize,
    steps: &[usize],
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
    opts: &DecodeOptions,
    condition: Option<&[TokenId]>,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    sample_state(denoiser, n, steps, sched, noise, opts, condition, rng).map(|s| s.tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VanillaKind {
    Absorbing,
    Multinomial,
}

/// Ancestral sampling with the parameterized vanilla kernels.
///
/// The prediction of `x0` is tempered by `tau` in sample mode and collapsed
/// to its argmax in argmax mode before it enters the kernel.
#[allow(clippy::too_many_arguments)]
pub fn sample_vanilla<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    n: usize,
    steps: &[usize],
    kind: VanillaKind,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
    tau: f64,
    mode: DecodeMode,
    condition: Option<&[TokenId]>,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    check_steps(steps, sched.steps())?;
    let k = noise.vocab_size();
    let mask = match (kind, noise) {
        (VanillaKind::Absorbing, NoiseDistribution::Absorbing { mask_id, .. }) => Some(*mask_id),
        (VanillaKind::Multinomial, NoiseDistribution::Uniform { .. }) => None,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} sampling does not match noise {noise:?}"
            )))
        }
    };
    let mut tokens: Vec<TokenId> = (0..n).map(|_| noise.sample(rng)).collect();
    for pair in steps.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let out = denoiser.predict(&tokens, t, condition)?;
        shape(n, out.len())?;
        for (i, f) in out.per_position.iter().enumerate() {
            let f = exclude_mask(f, mask);
            let f = match mode {
                DecodeMode::Argmax => Categorical::point_mass(k, f.argmax()),
                DecodeMode::Sample => temper(&f, tau)?,
            };
            let kernel = match mask {
                Some(m) => vanilla_backward_absorbing(&f, tokens[i], s, t, sched, m)?,
                None => vanilla_backward_multinomial(&f, tokens[i], s, t, sched)?,
            };
            tokens[i] = kernel.sample(rng);
        }
    }
    Ok(tokens)
}

/// Mean per-position log-probability the model assigns to a sequence at `t = 1`.
pub fn model_score<D: Denoiser + ?Sized>(denoiser: &D, seq: &[TokenId], condition: Option<&[TokenId]>) -> Result<f64> {
    let out = denoiser.predict(seq, 1, condition)?;
    shape(seq.len(), out.len())?;
    let total: f64 = out.per_position.iter().zip(seq).map(|(f, &x)| f.prob(x).ln()).sum();
    Ok(total / seq.len().max(1) as f64)
}

/// Picks the candidate with the highest model score; the first wins ties.
pub fn rerank<'a, D: Denoiser + ?Sized>(
    candidates: &'a [Vec<TokenId>],
    denoiser: &D,
    condition: Option<&[TokenId]>,
) -> Result<&'a [TokenId]> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let score = model_score(denoiser, c, condition)?;
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| candidates[i].as_slice())
        .ok_or_else(|| Error::InvalidArgument("no candidates to rerank".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DataModel, DenoiserOutput, OracleDenoiser};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Returns the same fixed prediction at every position.
    struct Fixed(Vec<Categorical>);

    impl Denoiser for Fixed {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn predict(&self, tokens: &[TokenId], _t: usize, _c: Option<&[TokenId]>) -> Result<DenoiserOutput> {
            Ok(DenoiserOutput {
                per_position: (0..tokens.len()).map(|i| self.0[i % self.0.len()].clone()).collect(),
            })
        }
    }

    fn state(tokens: Vec<TokenId>) -> DiffusionState {
        DiffusionState::initial(tokens, 4)
    }

    #[test]
    fn degenerate_bernoulli_routing() {
        let s = state(vec![0; 5]);
        let d = route_stochastic(&s, &[RoutingCoefficients::new(1.0, 0.0).unwrap()], &mut rng(0)).unwrap();
        assert!(d.v1.iter().all(|&v| v));
        assert!(d.v2.iter().all(|&v| !v));
    }

    #[test]
    fn bernoulli_routing_rate() {
        let s = state(vec![0; 1000]);
        let c = [RoutingCoefficients::new(0.5, 0.5).unwrap()];
        let mut r = rng(1);
        let (mut n1, mut n2) = (0usize, 0usize);
        for _ in 0..100 {
            let d = route_stochastic(&s, &c, &mut r).unwrap();
            n1 += d.v1.iter().filter(|&&v| v).count();
            n2 += d.v2.iter().filter(|&&v| v).count();
        }
        assert!((n1 as f64 / 1e5 - 0.5).abs() < 0.01);
        assert!((n2 as f64 / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn per_position_coefficient_count_is_checked() {
        let s = state(vec![0; 3]);
        let c = RoutingCoefficients::new(1.0, 0.0).unwrap();
        assert!(route_stochastic(&s, &[c, c], &mut rng(0)).is_err());
    }

    #[test]
    fn k_schedule_examples() {
        assert_eq!(k_schedule(KScheduleKind::Cosine, 10, 10, 8), 0);
        assert_eq!(k_schedule(KScheduleKind::Linear, 0, 10, 8), 8);
        // floor(cos(pi/4) * 8) = floor(5.65685...)
        assert_eq!(k_schedule(KScheduleKind::Cosine, 5, 10, 8), 5);
        assert_eq!(k_schedule(KScheduleKind::Linear, 5, 10, 8), 4);
    }

    #[test]
    fn top_k_examples() {
        let s = state(vec![0; 3]);
        let strat = RoutingStrategy::adaptive(KScheduleKind::Cosine);
        let d = route_adaptive(&s, &[0.9, 0.2, 0.7], 2, strat, &mut rng(0)).unwrap();
        assert_eq!(d.v1, vec![true, false, true]);
        assert_eq!(d.v2, d.v1);
        let d = route_adaptive(&s, &[0.9, 0.2, 0.7], 0, strat, &mut rng(0)).unwrap();
        assert!(d.v1.iter().chain(&d.v2).all(|&v| !v));
        let d = route_adaptive(&s, &[0.0, 0.0, 0.0], 3, strat, &mut rng(0)).unwrap();
        assert!(d.v1.iter().chain(&d.v2).all(|&v| v));
        let d = route_adaptive(&s, &[0.5, 0.5, 0.5], 1, strat, &mut rng(0)).unwrap();
        assert_eq!(d.v2, vec![true, false, false]);
        assert!(route_adaptive(&s, &[0.5; 3], 4, strat, &mut rng(0)).is_err());
        assert!(route_adaptive(&s, &[0.5; 3], 1, RoutingStrategy::Stochastic, &mut rng(0)).is_err());
    }

    #[test]
    fn conservative_rule_widens_v1() {
        let mut s = state(vec![1, 2, 3]);
        s.prev_tokens = vec![1, 0, 3];
        s.scores = vec![0.5, 0.5, 0.5];
        let strat = RoutingStrategy::AdaptiveTopK {
            k_schedule: KScheduleKind::Cosine,
            gumbel: false,
            conservative_v1: true,
        };
        let d = route_adaptive(&s, &[0.9, 0.1, 0.4], 1, strat, &mut rng(0)).unwrap();
        assert_eq!(d.v2, vec![true, false, false]);
        assert_eq!(d.v1, vec![true, true, false]);
    }

    #[test]
    fn gumbel_top_k_still_picks_k() {
        let s = state(vec![0; 6]);
        let strat = RoutingStrategy::AdaptiveTopK {
            k_schedule: KScheduleKind::Linear,
            gumbel: true,
            conservative_v1: false,
        };
        let mut r = rng(3);
        for k in 0..=6 {
            let d = route_adaptive(&s, &[0.1, 0.9, 0.3, 0.3, 0.5, 0.2], k, strat, &mut r).unwrap();
            assert_eq!(d.v2.iter().filter(|&&v| v).count(), k);
        }
    }

    #[test]
    fn update_b_truth_table() {
        let v = |a: bool, b: bool| RoutingDecision { v1: vec![a], v2: vec![b] };
        assert_eq!(update_b(&[true], &v(true, false)).unwrap(), vec![true]);
        assert_eq!(update_b(&[true], &v(false, false)).unwrap(), vec![false]);
        assert_eq!(update_b(&[false], &v(false, true)).unwrap(), vec![true]);
        assert!(update_b(&[true, false], &v(true, false)).is_err());
    }

    #[test]
    fn predict_x0_modes() {
        let f = Categorical::new(vec![0.1, 0.7, 0.2]).unwrap();
        let mut r = rng(4);
        assert_eq!(predict_x0(&f, 1.0, DecodeMode::Argmax, &mut r).unwrap(), 1);
        assert!(predict_x0(&f, 0.0, DecodeMode::Sample, &mut r).is_err());
        assert!(predict_x0(&f, -1.0, DecodeMode::Argmax, &mut r).is_err());
        let hits = (0..10_000)
            .filter(|_| predict_x0(&f, 0.01, DecodeMode::Sample, &mut r).unwrap() == 1)
            .count();
        assert!(hits as f64 / 1e4 > 0.999);
    }

    #[test]
    fn temper_matches_power_rule() {
        let f = Categorical::new(vec![0.1, 0.7, 0.2]).unwrap();
        let g = temper(&f, 0.5).unwrap();
        let z = 0.01 + 0.49 + 0.04;
        for (p, w) in g.probs().iter().zip([0.01 / z, 0.49 / z, 0.04 / z]) {
            assert!((p - w).abs() < 1e-15);
        }
    }

    #[test]
    fn route_token_branches() {
        assert_eq!(route_token(true, true, false, 1, 2, 3, 4), 1);
        assert_eq!(route_token(true, false, true, 1, 2, 3, 4), 3);
        assert_eq!(route_token(false, false, true, 1, 2, 3, 4), 2);
        assert_eq!(route_token(false, true, false, 1, 2, 3, 4), 4);
    }

    #[test]
    fn deterministic_routing_limit() {
        // lambda2 = 1 when alpha_s = 1, and lambda1 = 1 under absorbing noise.
        let sched = AlphaSchedule::linear(4).unwrap();
        let noise = NoiseDistribution::absorbing(4);
        let f = Fixed(vec![Categorical::new(vec![0.2, 0.5, 0.3, 0.0]).unwrap()]);
        let mut s = DiffusionState::initial(vec![3, 0, 3], 1);
        s.denoised = vec![false, true, false];
        let opts = DecodeOptions {
            strategy: RoutingStrategy::Stochastic,
            tau: 1.0,
            mode: DecodeMode::Argmax,
        };
        let next = denoise_step(&s, &f, &sched, &noise, &opts, 0, None, &mut rng(5)).unwrap();
        assert_eq!(next.tokens, vec![1, 0, 1]);
        assert_eq!(next.denoised, vec![true; 3]);
        assert_eq!(next.t, 0);
        assert_eq!(next.scores, vec![0.5; 3]);
    }

    #[test]
    fn empty_top_k_redraws_from_noise() {
        let sched = AlphaSchedule::linear(4).unwrap();
        let noise = NoiseDistribution::absorbing(4);
        let f = Fixed(vec![Categorical::uniform(4)]);
        let s = DiffusionState::initial(vec![3; 4], 4);
        let opts = DecodeOptions {
            strategy: RoutingStrategy::adaptive(KScheduleKind::Cosine),
            ..Default::default()
        };
        // k at s = 3 of T = 4 with N = 4 is floor(cos(3 pi / 8) * 4) = 1.
        let next = denoise_step(&s, &f, &sched, &noise, &opts, 3, None, &mut rng(6)).unwrap();
        assert_eq!(next.denoised.iter().filter(|&&b| b).count(), 1);
        // Linear k at s = 3 of T = 4 with N = 1 is 0.
        let linear = DecodeOptions {
            strategy: RoutingStrategy::adaptive(KScheduleKind::Linear),
            ..Default::default()
        };
        let one = DiffusionState::initial(vec![3], 4);
        let next = denoise_step(&one, &f, &sched, &noise, &linear, 3, None, &mut rng(6)).unwrap();
        assert_eq!(next.tokens, vec![3]);
        assert_eq!(next.denoised, vec![false]);
    }

    #[test]
    fn absorbing_flags_track_unmasked_tokens() {
        let sched = AlphaSchedule::linear(6).unwrap();
        let noise = NoiseDistribution::absorbing(5);
        let mut r = rng(7);
        let x0 = vec![0, 3, 1, 2, 2, 0, 1];
        let truth = Fixed(x0.iter().map(|&x| Categorical::point_mass(5, x)).collect());
        for strategy in [RoutingStrategy::Stochastic, RoutingStrategy::adaptive(KScheduleKind::Linear)] {
            let opts = DecodeOptions {
                strategy,
                tau: 1.0,
                mode: DecodeMode::Argmax,
            };
            for _ in 0..50 {
                let mut s = DiffusionState::initial(vec![4; x0.len()], 6);
                for target in (0..6).rev() {
                    s = denoise_step(&s, &truth, &sched, &noise, &opts, target, None, &mut r).unwrap();
                    for n in 0..x0.len() {
                        assert_eq!(s.denoised[n], s.tokens[n] == x0[n]);
                        assert!(s.tokens[n] == x0[n] || s.tokens[n] == 4);
                    }
                }
                assert_eq!(s.tokens, x0);
            }
        }
    }

    #[test]
    fn step_validation_and_uniform_steps() {
        assert!(check_steps(&[4, 2, 0], 4).is_ok());
        assert!(check_steps(&[4, 2, 2, 0], 4).is_err());
        assert!(check_steps(&[3, 0], 4).is_err());
        assert!(check_steps(&[4, 1], 4).is_err());
        assert!(check_steps(&[4], 4).is_err());
        assert_eq!(uniform_steps(20, 10).unwrap(), (0..=10).rev().map(|i| 2 * i).collect::<Vec<_>>());
        assert_eq!(uniform_steps(5, 1).unwrap(), vec![5, 0]);
        assert!(uniform_steps(5, 6).is_err());
        assert_eq!(uniform_steps(7, 3).unwrap(), vec![7, 5, 2, 0]);
    }

    #[test]
    fn single_step_adaptive_is_argmax() {
        let sched = AlphaSchedule::linear(10).unwrap();
        let noise = NoiseDistribution::uniform(3);
        let f = Fixed(vec![
            Categorical::new(vec![0.1, 0.7, 0.2]).unwrap(),
            Categorical::new(vec![0.5, 0.2, 0.3]).unwrap(),
        ]);
        let out = sample(&f, 4, &[10, 0], &sched, &noise, &DecodeOptions::default(), None, &mut rng(8)).unwrap();
        assert_eq!(out, vec![1, 0, 1, 0]);
    }

    #[test]
    fn adaptive_sampling_ends_fully_denoised_and_is_reproducible() {
        let sched = AlphaSchedule::linear(12).unwrap();
        let noise = NoiseDistribution::uniform(5);
        let model = DataModel::random_markov(5, &mut rng(9)).unwrap();
        let oracle = OracleDenoiser {
            model,
            schedule: sched.clone(),
            noise: noise.clone(),
        };
        let steps = uniform_steps(12, 6).unwrap();
        for kind in [KScheduleKind::Cosine, KScheduleKind::Linear] {
            let opts = DecodeOptions {
                strategy: RoutingStrategy::adaptive(kind),
                tau: 0.8,
                mode: DecodeMode::Sample,
            };
            let a = sample_state(&oracle, 6, &steps, &sched, &noise, &opts, None, &mut rng(10)).unwrap();
            let b = sample_state(&oracle, 6, &steps, &sched, &noise, &opts, None, &mut rng(10)).unwrap();
            assert!(a.denoised.iter().all(|&b| b));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn vanilla_absorbing_never_remasks() {
        let sched = AlphaSchedule::linear(8).unwrap();
        let noise = NoiseDistribution::absorbing(4);
        let f = Fixed(vec![Categorical::new(vec![0.3, 0.3, 0.3, 0.1]).unwrap()]);
        let mut r = rng(11);
        // Track trajectories by re-running step by step with the same kernel.
        for _ in 0..200 {
            let mut tokens = vec![3; 5];
            for t in (1..=8).rev() {
                let out = f.predict(&tokens, t, None).unwrap();
                for (i, p) in out.per_position.iter().enumerate() {
                    let p = exclude_mask(p, Some(3));
                    let next = vanilla_backward_absorbing(&p, tokens[i], t - 1, t, &sched, 3).unwrap().sample(&mut r);
                    if tokens[i] != 3 {
                        assert_eq!(next, tokens[i]);
                    }
                    tokens[i] = next;
                }
            }
            assert!(tokens.iter().all(|&x| x != 3));
        }
        let out = sample_vanilla(&f, 5, &[8, 4, 0], VanillaKind::Absorbing, &sched, &noise, 1.0, DecodeMode::Sample, None, &mut r)
            .unwrap();
        assert!(out.iter().all(|&x| x != 3));
        assert!(sample_vanilla(&f, 5, &[8, 0], VanillaKind::Multinomial, &sched, &noise, 1.0, DecodeMode::Sample, None, &mut r).is_err());
    }

    #[test]
    fn oracle_vanilla_absorbing_accuracy() {
        // Sharp factorized data: each position has one dominant token.
        let k = 6;
        let n = 8;
        let marginals: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut m = vec![0.01; k];
                m[k - 1] = 0.0;
                m[i % (k - 1)] = 0.96;
                m
            })
            .collect();
        let model = DataModel::Factorized { marginals };
        let sched = AlphaSchedule::linear(10).unwrap();
        let noise = NoiseDistribution::absorbing(k);
        let oracle = OracleDenoiser {
            model,
            schedule: sched.clone(),
            noise: noise.clone(),
        };
        let mut r = rng(12);
        let steps = uniform_steps(10, 10).unwrap();
        let mut correct = 0;
        let trials = 200;
        for _ in 0..trials {
            let x = sample_vanilla(&oracle, n, &steps, VanillaKind::Absorbing, &sched, &noise, 1.0, DecodeMode::Argmax, None, &mut r)
                .unwrap();
            correct += x.iter().enumerate().filter(|(i, &v)| v == i % (k - 1)).count();
        }
        assert!(correct as f64 / (trials * n) as f64 > 0.9);
    }

    #[test]
    fn multinomial_copies_at_large_vocab() {
        let k = 10_000;
        let sched = AlphaSchedule::from_alpha(vec![1.0, 0.995, 0.99]).unwrap();
        let f = Categorical::uniform(k);
        let kernel = vanilla_backward_multinomial(&f, 17, 1, 2, &sched).unwrap();
        assert!(kernel.prob(17) > 0.99);
    }

    #[test]
    fn rerank_rules() {
        let f = Fixed(vec![Categorical::new(vec![0.6, 0.3, 0.1]).unwrap()]);
        let one = vec![vec![2, 1]];
        assert_eq!(rerank(&one, &f, None).unwrap(), &[2, 1]);
        let dup = vec![vec![1, 1], vec![0, 1], vec![0, 1]];
        assert!(std::ptr::eq(rerank(&dup, &f, None).unwrap(), dup[1].as_slice()));
        let empty: Vec<Vec<TokenId>> = vec![];
        assert!(rerank(&empty, &f, None).is_err());
    }

    #[test]
    fn mismatched_denoiser_output_is_rejected() {
        struct Short;
        impl Denoiser for Short {
            fn vocab_size(&self) -> usize {
                3
            }
            fn predict(&self, _: &[TokenId], _: usize, _: Option<&[TokenId]>) -> Result<DenoiserOutput> {
                Ok(DenoiserOutput {
                    per_position: vec![Categorical::uniform(3)],
                })
            }
        }
        let sched = AlphaSchedule::linear(4).unwrap();
        let noise = NoiseDistribution::uniform(3);
        let s = DiffusionState::initial(vec![0, 1], 4);
        let r = denoise_step(&s, &Short, &sched, &noise, &DecodeOptions::default(), 2, None, &mut rng(0));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
