//! The denoiser contract and its desk-scale implementations.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

pub mod gmm;
pub mod tiny;
pub mod weights;

pub use gmm::{AnalyticGmm, GmmComponent, GmmSpec};
pub use tiny::{TinyConfig, TinyDenoiser};
pub use weights::{load_weights, save_weights, Tensor, Weights};

/// Text-like conditioning: token ids for the attention model and a
/// component subset for the analytic mixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub label: String,
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub components: Vec<usize>,
}

impl Conditioning {
    pub fn new(label: impl Into<String>, tokens: Vec<u32>, components: Vec<usize>) -> Result<Self> {
        let c = Self {
            label: label.into(),
            tokens,
            components,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::param(format!(
                "conditioning '{}' has no tokens",
                self.label
            )));
        }
        Ok(())
    }
}

/// Cross-attention probabilities at the model's smallest resolution, laid
/// out as `[layer][head][pixel][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStash {
    layers: usize,
    heads: usize,
    tokens: usize,
    resolution: (usize, usize),
    probs: Vec<f32>,
}

impl AttentionStash {
    pub fn new(
        layers: usize,
        heads: usize,
        tokens: usize,
        resolution: (usize, usize),
        probs: Vec<f32>,
    ) -> Result<Self> {
        let expected = layers * heads * tokens * resolution.0 * resolution.1;
        if layers == 0 || heads == 0 || tokens == 0 || expected != probs.len() {
            return Err(Error::param(format!(
                "attention stash of {} values does not match {layers}x{heads}x{tokens}x{resolution:?}",
                probs.len()
            )));
        }
        Ok(Self {
            layers,
            heads,
            tokens,
            resolution,
            probs,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// `(h, w)` of every map.
    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn pixels(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }

    /// Spatial map of one token for one head of one layer, row-major.
    pub fn map(&self, layer: usize, head: usize, token: usize) -> Vec<f32> {
        let p = self.pixels();
        let base = (layer * self.heads + head) * p * self.tokens;
        (0..p)
            .map(|i| self.probs[base + i * self.tokens + token])
            .collect()
    }

    /// Largest deviation from 1 of any per-pixel sum over tokens.
    pub fn max_row_sum_error(&self) -> f32 {
        self.probs
            .chunks(self.tokens)
            .map(|row| (row.iter().sum::<f32>() - 1.0).abs())
            .fold(0.0, f32::max)
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps: Field,
    pub attn: Option<AttentionStash>,
}

/// An epsilon-prediction network. Implementations are deterministic and
/// immutable: identical inputs yield bit-identical outputs.
pub trait Denoiser: Sync {
    fn eps(&self, x: &Field, t: usize, cond: Option<&Conditioning>) -> Result<DenoiserOutput>;

    /// Stable content hash of the parameters.
    fn fingerprint(&self) -> [u8; 32];

    /// Vocabulary size, when the model consumes tokens.
    fn vocab(&self) -> Option<usize> {
        None
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn eps(&self, x: &Field, t: usize, cond: Option<&Conditioning>) -> Result<DenoiserOutput> {
        (**self).eps(x, t, cond)
    }

    fn fingerprint(&self) -> [u8; 32] {
        (**self).fingerprint()
    }

    fn vocab(&self) -> Option<usize> {
        (**self).vocab()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn eps(&self, x: &Field, t: usize, cond: Option<&Conditioning>) -> Result<DenoiserOutput> {
        (**self).eps(x, t, cond)
    }

    fn fingerprint(&self) -> [u8; 32] {
        (**self).fingerprint()
    }

    fn vocab(&self) -> Option<usize> {
        (**self).vocab()
    }
}

/// Counts forward passes of the wrapped model.
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn eps(&self, x: &Field, t: usize, cond: Option<&Conditioning>) -> Result<DenoiserOutput> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.eps(x, t, cond)
    }

    fn fingerprint(&self) -> [u8; 32] {
        self.inner.fingerprint()
    }

    fn vocab(&self) -> Option<usize> {
        self.inner.vocab()
    }
}
