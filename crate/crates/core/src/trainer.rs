//! Reweighted cross-entropy training of [`TrainableDenoiser`].

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::TokenId;
use crate::denoiser::{Denoiser, DenoiserOutput, TrainableDenoiser};
use crate::error::{shape, Error, Result};
use crate::processes::{backward_branch, corrupt, NoiseDistribution};
use crate::schedules::{AlphaSchedule, ReweightingScheme};

fn default_batch_size() -> usize {
    32
}
fn default_steps() -> usize {
    2000
}
fn default_lr() -> f64 {
    5e-4
}
fn default_warmup() -> usize {
    200
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_ema() -> f64 {
    0.9999
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-9
}

/// Optimization settings. The step count `T` comes from the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub scheme: ReweightingScheme,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    /// Draw two coupled corruptions per sequence and average their losses.
    #[serde(default)]
    pub conditioned: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyperparameters");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    /// Learning rate at 1-based `step`: linear warmup, then inverse square root.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.learning_rate / step.sqrt();
        }
        let w = self.warmup_steps as f64;
        self.learning_rate * (step / w).min((w / step).sqrt())
    }
}

/// Loss of one sequence and the quantities it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// `b_n = 1{x_t,n = x_0,n}`.
    pub mask: Vec<bool>,
    pub t: usize,
    pub weight: f64,
}

impl LossReport {
    pub fn noisy_count(&self) -> usize {
        self.mask.iter().filter(|&&b| !b).count()
    }
}

/// `weight * sum_n (1 - b_n) CE(target_n, f_n)` with a label-smoothed target,
/// plus its gradient with respect to the logits of every position.
pub fn loss_simple(
    f_out: &DenoiserOutput,
    x0_seq: &[TokenId],
    xt_seq: &[TokenId],
    t: usize,
    scheme: ReweightingScheme,
    sched: &AlphaSchedule,
    label_smoothing: f64,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    shape(x0_seq.len(), xt_seq.len())?;
    shape(x0_seq.len(), f_out.len())?;
    let weight = scheme.weight(sched, t)?;
    let mut loss = 0.0;
    let mut mask = Vec::with_capacity(x0_seq.len());
    let mut grads = Vec::with_capacity(x0_seq.len());
    for ((f, &x0), &xt) in f_out.per_position.iter().zip(x0_seq).zip(xt_seq) {
        let k = f.len();
        if x0 >= k {
            return Err(Error::TokenOutOfRange { id: x0, k });
        }
        let clean = x0 == xt;
        mask.push(clean);
        if clean {
            grads.push(vec![0.0; k]);
            continue;
        }
        let off = label_smoothing / k as f64;
        let target = |j: usize| if j == x0 { 1.0 - label_smoothing + off } else { off };
        let mut g = Vec::with_capacity(k);
        for j in 0..k {
            let y = target(j);
            let p = f.prob(j);
            if y > 0.0 {
                loss -= weight * y * p.ln();
            }
            g.push(weight * (p - y));
        }
        grads.push(g);
    }
    Ok((LossReport { loss, mask, t, weight }, grads))
}

/// One corrupted view of a clean row.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub row: usize,
    pub x0: Vec<TokenId>,
    pub xt: Vec<TokenId>,
    pub t: usize,
    pub mask: Vec<bool>,
}

fn view(row: usize, x0: &[TokenId], xt: Vec<TokenId>, t: usize) -> View {
    let mask = x0.iter().zip(&xt).map(|(a, b)| a == b).collect();
    View {
        row,
        x0: x0.to_vec(),
        xt,
        t,
        mask,
    }
}

fn check_corpus(corpus: &[Vec<TokenId>]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    Ok(())
}

/// Draws `batch_size` rows with replacement, a step `t ~ U{1..T}` per row and
/// its forward corruption.
pub fn make_batch<R: Rng + ?Sized>(
    corpus: &[Vec<TokenId>],
    batch_size: usize,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
    rng: &mut R,
) -> Result<Vec<View>> {
    check_corpus(corpus)?;
    (0..batch_size)
        .map(|_| {
            let row = rng.gen_range(0..corpus.len());
            let t = rng.gen_range(1..=sched.steps());
            let xt = corrupt(&corpus[row], t, sched, noise, rng)?;
            Ok(view(row, &corpus[row], xt, t))
        })
        .collect()
}

/// Coupled views `(x_s, x_t)` of one row: two i.i.d. steps ordered so that
/// `s <= t`, `x_t ~ q(x_t | x_0)` and `x_s ~ q(x_s | x_t, x_0)` when `s < t`.
/// When `s = t` the second view is an independent forward draw.
pub fn coupled_views<R: Rng + ?Sized>(
    row: usize,
    x0: &[TokenId],
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
    rng: &mut R,
) -> Result<(View, View)> {
    let a = rng.gen_range(1..=sched.steps());
    let b = rng.gen_range(1..=sched.steps());
    let (s, t) = if a <= b { (a, b) } else { (b, a) };
    let xt = corrupt(x0, t, sched, noise, rng)?;
    let xs = if s < t {
        x0.iter()
            .zip(&xt)
            .map(|(&c, &n)| Ok(backward_branch(n, c, s, t, sched, noise)?.sample(rng)))
            .collect::<Result<Vec<_>>>()?
    } else {
        corrupt(x0, s, sched, noise, rng)?
    };
    Ok((view(row, x0, xs, s), view(row, x0, xt, t)))
}

/// Coupled pairs for `batch_size` rows drawn with replacement.
pub fn make_conditioned_batch<R: Rng + ?Sized>(
    corpus: &[Vec<TokenId>],
    batch_size: usize,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
    rng: &mut R,
) -> Result<Vec<(View, View)>> {
    check_corpus(corpus)?;
    (0..batch_size)
        .map(|_| {
            let row = rng.gen_range(0..corpus.len());
            coupled_views(row, &corpus[row], sched, noise, rng)
        })
        .collect()
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) -> Result<()> {
    shape(ema.len(), params.len())?;
    if decay == 0.0 {
        ema.copy_from_slice(params);
        return Ok(());
    }
    for (e, &p) in ema.iter_mut().zip(params) {
        *e += (1.0 - decay) * (p - *e);
    }
    Ok(())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
        shape(self.m.len(), params.len())?;
        shape(self.m.len(), grad.len())?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + weight_decay * params[i]);
        }
        Ok(())
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub weight: f64,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainableDenoiser,
    pub ema: TrainableDenoiser,
    pub curve: Vec<CurvePoint>,
}

/// Accumulated loss and gradient for a group of views sharing a normalizer.
struct Group {
    loss: f64,
    noisy: usize,
    weight: f64,
    t: f64,
    grad: Vec<f64>,
}

fn accumulate(
    model: &TrainableDenoiser,
    views: &[&View],
    condition: Option<&[Vec<TokenId>]>,
    config: &TrainConfig,
    sched: &AlphaSchedule,
) -> Result<Group> {
    let mut g = Group {
        loss: 0.0,
        noisy: 0,
        weight: 0.0,
        t: 0.0,
        grad: vec![0.0; model.params.len()],
    };
    let mut raw = Vec::with_capacity(views.len());
    for v in views {
        let cond = condition.map(|c| c[v.row].as_slice());
        let (out, cache) = model.forward(&v.xt, v.t, cond)?;
        let (report, gl) = loss_simple(&out, &v.x0, &v.xt, v.t, config.scheme, sched, config.label_smoothing)?;
        g.loss += report.loss;
        g.noisy += report.noisy_count();
        g.weight += report.weight;
        g.t += v.t as f64;
        raw.push((cache, gl));
    }
    let scale = 1.0 / g.noisy.max(1) as f64;
    for (cache, mut gl) in raw {
        if gl.iter().all(|row| row.iter().all(|&x| x == 0.0)) {
            continue;
        }
        gl.iter_mut().flatten().for_each(|x| *x *= scale);
        model.backward_into(&cache, &gl, &mut g.grad)?;
    }
    g.loss *= scale;
    g.weight /= views.len().max(1) as f64;
    g.t /= views.len().max(1) as f64;
    Ok(g)
}

/// Runs the training loop. Bit-reproducible for a fixed config.
pub fn train(
    model: TrainableDenoiser,
    corpus: &[Vec<TokenId>],
    condition: Option<&[Vec<TokenId>]>,
    config: &TrainConfig,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_corpus(corpus)?;
    if let Some(c) = condition {
        shape(corpus.len(), c.len())?;
    }
    shape(model.arch.vocab, noise.vocab_size())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Keep batch draws independent of an initialization seeded with the same value.
    rng.set_stream(1);
    let mut model = model;
    let mut ema = model.params.clone();
    let mut adam = Adam::new(model.params.len(), config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let (loss, weight, t, grad) = if config.conditioned {
            let pairs = make_conditioned_batch(corpus, config.batch_size, sched, noise, &mut rng)?;
            let first: Vec<&View> = pairs.iter().map(|p| &p.0).collect();
            let second: Vec<&View> = pairs.iter().map(|p| &p.1).collect();
            let a = accumulate(&model, &first, condition, config, sched)?;
            let b = accumulate(&model, &second, condition, config, sched)?;
            let grad: Vec<f64> = a.grad.iter().zip(&b.grad).map(|(x, y)| 0.5 * (x + y)).collect();
            (0.5 * (a.loss + b.loss), 0.5 * (a.weight + b.weight), 0.5 * (a.t + b.t), grad)
        } else {
            let batch = make_batch(corpus, config.batch_size, sched, noise, &mut rng)?;
            let views: Vec<&View> = batch.iter().collect();
            let g = accumulate(&model, &views, condition, config, sched)?;
            (g.loss, g.weight, g.t, g.grad)
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite loss at step {step}")));
        }
        adam.update(&mut model.params, &grad, config.lr_at(step), config.weight_decay)?;
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence(format!("non-finite parameters at step {step}")));
        }
        ema_update(&mut ema, &model.params, config.ema_decay)?;
        curve.push(CurvePoint { step, loss, weight, t });
    }
    let ema = model.with_params(ema)?;
    Ok(TrainOutcome { model, ema, curve })
}

/// A fixed held-out corruption used to compare denoisers.
#[derive(Debug, Clone)]
pub struct EvalExample {
    pub x0: Vec<TokenId>,
    pub xt: Vec<TokenId>,
    pub t: usize,
    pub condition: Option<Vec<TokenId>>,
}

/// `draws` corruptions of every row at uniformly drawn steps.
pub fn make_eval_set<R: Rng + ?Sized>(
    corpus: &[Vec<TokenId>],
    condition: Option<&[Vec<TokenId>]>,
    draws: usize,
    sched: &AlphaSchedule,
    noise: &NoiseDistribution,
    rng: &mut R,
) -> Result<Vec<EvalExample>> {
    check_corpus(corpus)?;
    let mut out = Vec::with_capacity(corpus.len() * draws);
    for (i, row) in corpus.iter().enumerate() {
        for _ in 0..draws {
            let t = rng.gen_range(1..=sched.steps());
            out.push(EvalExample {
                x0: row.clone(),
                xt: corrupt(row, t, sched, noise, rng)?,
                t,
                condition: condition.map(|c| c[i].clone()),
            });
        }
    }
    Ok(out)
}

/// Mean cross-entropy of the clean token over all corrupted positions.
pub fn masked_cross_entropy<D: Denoiser + ?Sized>(denoiser: &D, examples: &[EvalExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let out = denoiser.predict(&ex.xt, ex.t, ex.condition.as_deref())?;
        shape(ex.x0.len(), out.len())?;
        for ((f, &x0), &xt) in out.per_position.iter().zip(&ex.x0).zip(&ex.xt) {
            if x0 != xt {
                total -= f.prob(x0).ln();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("evaluation set has no corrupted positions".into()));
    }
    Ok(total / count as f64)
}
