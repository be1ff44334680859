//! Small bidirectional denoiser with analytic gradients.
//!
//! Per position `n` the input features are
//! `[E[x_n] + P[n], ctx_n, cond_n, time(t)]` where `ctx_n` averages the token
//! embeddings of the neighbours, `cond_n = sum_m A[n, m] C[c_m]` mixes the
//! condition embeddings, and `time(t)` is a fixed sinusoidal encoding. One
//! tanh hidden layer feeds a softmax head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserOutput};
use crate::categorical::{Categorical, TokenId};
use crate::error::{shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ContextKind {
    /// Mean over every other position.
    MeanPool,
    /// Mean over the `w` neighbours on each side.
    Window { w: usize },
}

/// Architecture hyperparameters; serialized verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    #[serde(rename = "K")]
    pub vocab: usize,
    #[serde(rename = "N_max")]
    pub max_len: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub hidden_dim: usize,
    pub context: ContextKind,
    /// Whether the model owns condition-embedding parameters.
    pub conditioned: bool,
}

impl Arch {
    pub fn new(vocab: usize, max_len: usize, conditioned: bool) -> Self {
        Self {
            vocab,
            max_len,
            embed_dim: 32,
            time_dim: 16,
            hidden_dim: 64,
            context: ContextKind::Window { w: 3 },
            conditioned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.max_len == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        let cond = if self.conditioned { self.embed_dim } else { 0 };
        2 * self.embed_dim + cond + self.time_dim
    }

    fn layout(&self) -> Layout {
        let (k, d, n, h) = (self.vocab, self.embed_dim, self.max_len, self.hidden_dim);
        let z = self.input_dim();
        let mut off = 0;
        let mut take = |len: usize| {
            let start = off;
            off += len;
            start
        };
        let tok = take(k * d);
        let pos = take(n * d);
        let (cond_emb, cond_mix) = if self.conditioned {
            (Some(take(k * d)), Some(take(n * n)))
        } else {
            (None, None)
        };
        let w1 = take(h * z);
        let b1 = take(h);
        let w2 = take(k * h);
        let b2 = take(k);
        Layout {
            tok,
            pos,
            cond_emb,
            cond_mix,
            w1,
            b1,
            w2,
            b2,
            total: off,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    tok: usize,
    pos: usize,
    cond_emb: Option<usize>,
    cond_mix: Option<usize>,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

/// Sinusoidal encoding of an integer step.
pub(crate) fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out.push((t as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out.push((t as f64 * freq).cos());
    }
    out
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    condition: Vec<TokenId>,
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableDenoiser {
    pub arch: Arch,
    pub params: Vec<f64>,
}

fn neighbours(ctx: ContextKind, n: usize, len: usize) -> impl Iterator<Item = usize> {
    let (lo, hi) = match ctx {
        ContextKind::MeanPool => (0, len),
        ContextKind::Window { w } => (n.saturating_sub(w), (n + w + 1).min(len)),
    };
    (lo..hi).filter(move |&m| m != n)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

impl TrainableDenoiser {
    /// Uniform `[-0.05, 0.05]` initialization with a zero output bias.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params: Vec<f64> = (0..layout.total).map(|_| rng.gen_range(-0.05..=0.05)).collect();
        params[layout.b2..layout.b2 + arch.vocab].iter_mut().for_each(|p| *p = 0.0);
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        shape(arch.param_count(), params.len())?;
        Ok(Self { arch, params })
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_params(self.arch.clone(), params)
    }

    fn check_inputs(&self, tokens: &[TokenId], condition: Option<&[TokenId]>) -> Result<()> {
        let k = self.arch.vocab;
        if tokens.is_empty() || tokens.len() > self.arch.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.arch.max_len
            )));
        }
        for &x in tokens.iter().chain(condition.unwrap_or(&[])) {
            if x >= k {
                return Err(Error::TokenOutOfRange { id: x, k });
            }
        }
        if let Some(c) = condition {
            if c.len() > self.arch.max_len {
                return Err(Error::InvalidArgument(format!(
                    "condition length {} exceeds {}",
                    c.len(),
                    self.arch.max_len
                )));
            }
        }
        Ok(())
    }

    /// Forward pass returning probabilities and the backward cache.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        t: usize,
        condition: Option<&[TokenId]>,
    ) -> Result<(DenoiserOutput, ForwardCache)> {
        self.check_inputs(tokens, condition)?;
        let a = &self.arch;
        let l = a.layout();
        let p = &self.params;
        let (d, h, k, z) = (a.embed_dim, a.hidden_dim, a.vocab, a.input_dim());
        let len = tokens.len();
        let cond: &[TokenId] = if a.conditioned { condition.unwrap_or(&[]) } else { &[] };
        let time = time_features(t, a.time_dim);
        let emb = |x: TokenId| &p[l.tok + x * d..l.tok + (x + 1) * d];

        let mut inputs = Vec::with_capacity(len);
        let mut hidden = Vec::with_capacity(len);
        let mut logits = Vec::with_capacity(len);
        let mut per_position = Vec::with_capacity(len);
        for n in 0..len {
            let mut input = vec![0.0; z];
            let own = emb(tokens[n]);
            let pos = &p[l.pos + n * d..l.pos + (n + 1) * d];
            for i in 0..d {
                input[i] = own[i] + pos[i];
            }
            let ctx: Vec<usize> = neighbours(a.context, n, len).collect();
            if !ctx.is_empty() {
                let scale = 1.0 / ctx.len() as f64;
                for &m in &ctx {
                    let e = emb(tokens[m]);
                    for i in 0..d {
                        input[d + i] += scale * e[i];
                    }
                }
            }
            let mut off = 2 * d;
            if let (Some(ce), Some(cm)) = (l.cond_emb, l.cond_mix) {
                for (m, &c) in cond.iter().enumerate() {
                    let w = p[cm + n * a.max_len + m];
                    let e = &p[ce + c * d..ce + (c + 1) * d];
                    for i in 0..d {
                        input[off + i] += w * e[i];
                    }
                }
                off += d;
            }
            input[off..off + a.time_dim].copy_from_slice(&time);

            let mut hid = vec![0.0; h];
            for (j, hv) in hid.iter_mut().enumerate() {
                let row = &p[l.w1 + j * z..l.w1 + (j + 1) * z];
                let mut acc = p[l.b1 + j];
                for (w, x) in row.iter().zip(&input) {
                    acc += w * x;
                }
                *hv = acc.tanh();
            }
            let mut lg = vec![0.0; k];
            for (c, lv) in lg.iter_mut().enumerate() {
                let row = &p[l.w2 + c * h..l.w2 + (c + 1) * h];
                let mut acc = p[l.b2 + c];
                for (w, x) in row.iter().zip(&hid) {
                    acc += w * x;
                }
                *lv = acc;
            }
            if lg.iter().any(|z| !z.is_finite()) {
                return Err(Error::Divergence(format!("non-finite logits at position {n}")));
            }
            per_position.push(Categorical::new(softmax(&lg))?);
            inputs.push(input);
            hidden.push(hid);
            logits.push(lg);
        }
        Ok((
            DenoiserOutput { per_position },
            ForwardCache {
                tokens: tokens.to_vec(),
                condition: cond.to_vec(),
                inputs,
                hidden,
                logits,
            },
        ))
    }

    /// Accumulates the parameter gradient for upstream logit gradients
    /// `grad_logits[n][c]` into `grad` (same length as the parameters).
    pub fn backward_into(&self, cache: &ForwardCache, grad_logits: &[Vec<f64>], grad: &mut [f64]) -> Result<()> {
        let a = &self.arch;
        let l = a.layout();
        let p = &self.params;
        let (d, h, k, z) = (a.embed_dim, a.hidden_dim, a.vocab, a.input_dim());
        let len = cache.tokens.len();
        shape(len, grad_logits.len())?;
        shape(l.total, grad.len())?;
        for g in grad_logits {
            shape(k, g.len())?;
        }
        for n in 0..len {
            let gl = &grad_logits[n];
            let hid = &cache.hidden[n];
            let input = &cache.inputs[n];
            let mut dh = vec![0.0; h];
            for c in 0..k {
                let g = gl[c];
                if g == 0.0 {
                    continue;
                }
                grad[l.b2 + c] += g;
                let row = l.w2 + c * h;
                for j in 0..h {
                    grad[row + j] += g * hid[j];
                    dh[j] += g * p[row + j];
                }
            }
            let mut dz = vec![0.0; z];
            for j in 0..h {
                let dpre = dh[j] * (1.0 - hid[j] * hid[j]);
                if dpre == 0.0 {
                    continue;
                }
                grad[l.b1 + j] += dpre;
                let row = l.w1 + j * z;
                for i in 0..z {
                    grad[row + i] += dpre * input[i];
                    dz[i] += dpre * p[row + i];
                }
            }
            let x = cache.tokens[n];
            for i in 0..d {
                grad[l.tok + x * d + i] += dz[i];
                grad[l.pos + n * d + i] += dz[i];
            }
            let ctx: Vec<usize> = neighbours(a.context, n, len).collect();
            if !ctx.is_empty() {
                let scale = 1.0 / ctx.len() as f64;
                for &m in &ctx {
                    let xm = cache.tokens[m];
                    for i in 0..d {
                        grad[l.tok + xm * d + i] += scale * dz[d + i];
                    }
                }
            }
            if let (Some(ce), Some(cm)) = (l.cond_emb, l.cond_mix) {
                let dc = &dz[2 * d..3 * d];
                for (m, &c) in cache.condition.iter().enumerate() {
                    let wi = cm + n * a.max_len + m;
                    let e = ce + c * d;
                    let mut dot = 0.0;
                    for i in 0..d {
                        dot += dc[i] * p[e + i];
                        grad[e + i] += p[wi] * dc[i];
                    }
                    grad[wi] += dot;
                }
            }
        }
        Ok(())
    }

    /// Parameter gradient for upstream logit gradients.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(cache, grad_logits, &mut grad)?;
        Ok(grad)
    }

    /// Zeros the output layer so every prediction is uniform.
    pub fn zero_head(&mut self) {
        let l = self.arch.layout();
        self.params[l.w2..l.total].iter_mut().for_each(|p| *p = 0.0);
    }
}

impl Denoiser for TrainableDenoiser {
    fn vocab_size(&self) -> usize {
        self.arch.vocab
    }

    fn predict(&self, tokens: &[TokenId], t: usize, condition: Option<&[TokenId]>) -> Result<DenoiserOutput> {
        self.forward(tokens, t, condition).map(|(out, _)| out)
    }
}
