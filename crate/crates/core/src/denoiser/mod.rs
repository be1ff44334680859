//! Models of `f(x_t; theta)`, the per-position prediction of the clean tokens.

mod mlp;
mod oracle;

pub use mlp::{Arch, ContextKind, ForwardCache, TrainableDenoiser};
pub use oracle::{oracle_predict, DataModel, OracleDenoiser};

use crate::categorical::{Categorical, TokenId};
use crate::error::Result;

/// One categorical over the vocabulary per sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub per_position: Vec<Categorical>,
}

impl DenoiserOutput {
    pub fn len(&self) -> usize {
        self.per_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_position.is_empty()
    }

    /// Confidence `max_j f_j` per position.
    pub fn scores(&self) -> Vec<f64> {
        self.per_position.iter().map(Categorical::max_prob).collect()
    }
}

/// Anything that maps a noisy sequence and its step to predictions of `x_0`.
///
/// `condition` is passed through untouched; only the model interprets it.
pub trait Denoiser {
    fn vocab_size(&self) -> usize;

    fn predict(
        &self,
        tokens: &[TokenId],
        t: usize,
        condition: Option<&[TokenId]>,
    ) -> Result<DenoiserOutput>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn predict(&self, tokens: &[TokenId], t: usize, condition: Option<&[TokenId]>) -> Result<DenoiserOutput> {
        (**self).predict(tokens, t, condition)
    }
}
