//! Token mixers: rotary multi-head causal self-attention and the Hyena
//! operator. Both map `[L, d_model]` to `[L, d_model]` and are causal.

mod attention;
mod hyena;

pub use attention::{rope_apply, scaled_dot_attention, AttentionConfig, AttentionMixer};
pub use hyena::{hyena_positional_embed, HyenaConfig, HyenaMixer};

use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Attention,
    Hyena,
}

impl MixerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MixerKind::Attention => "attention",
            MixerKind::Hyena => "hyena",
        }
    }
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MixerConfig {
    Attention(AttentionConfig),
    Hyena(HyenaConfig),
}

impl MixerConfig {
    pub fn kind(&self) -> MixerKind {
        match self {
            MixerConfig::Attention(_) => MixerKind::Attention,
            MixerConfig::Hyena(_) => MixerKind::Hyena,
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            MixerConfig::Attention(c) => c.d_model,
            MixerConfig::Hyena(c) => c.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MixerConfig::Attention(c) => c.validate(),
            MixerConfig::Hyena(c) => c.validate(),
        }
    }
}

/// A mixer whose parameters live in a [`ParamStore`] under a name prefix.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Attention(AttentionMixer),
    Hyena(HyenaMixer),
}

impl Mixer {
    pub fn build<F: Scalar>(
        config: &MixerConfig,
        prefix: &str,
        store: &mut ParamStore<F>,
        seed: u64,
    ) -> Result<Self> {
        Ok(match config {
            MixerConfig::Attention(c) => {
                Mixer::Attention(AttentionMixer::build(c.clone(), prefix, store, seed)?)
            }
            MixerConfig::Hyena(c) => {
                Mixer::Hyena(HyenaMixer::build(c.clone(), prefix, store, seed)?)
            }
        })
    }

    /// Rebinds to parameters already present in `store` (after loading).
    pub fn attach<F: Scalar>(
        config: &MixerConfig,
        prefix: &str,
        store: &ParamStore<F>,
    ) -> Result<Self> {
        Ok(match config {
            MixerConfig::Attention(c) => {
                Mixer::Attention(AttentionMixer::attach(c.clone(), prefix, store)?)
            }
            MixerConfig::Hyena(c) => Mixer::Hyena(HyenaMixer::attach(c.clone(), prefix, store)?),
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Attention(_) => MixerKind::Attention,
            Mixer::Hyena(_) => MixerKind::Hyena,
        }
    }

    pub fn forward<'g, F: Scalar>(
        &self,
        b: &Bound<'g, '_, F>,
        x: Var<'g, F>,
        positions: &[usize],
    ) -> Result<Var<'g, F>> {
        match self {
            Mixer::Attention(m) => m.forward(b, x, positions),
            Mixer::Hyena(m) => m.forward(b, x),
        }
    }

    /// Forward pass without recording a graph, for long sequences.
    pub fn infer<F: Scalar>(&self, store: &ParamStore<F>, x: &[F], len: usize) -> Result<Vec<F>> {
        match self {
            Mixer::Attention(m) => m.infer(store, x, len),
            Mixer::Hyena(m) => m.infer(store, x, len),
        }
    }
}

/// `x · W + b` for row-major `x: [rows, in]`, without a graph.
pub(crate) fn dense_infer<F: Scalar>(
    store: &ParamStore<F>,
    x: &[F],
    rows: usize,
    w: crate::params::ParamId,
    b: crate::params::ParamId,
) -> Vec<F> {
    let wt = store.get(w);
    let (k, n) = (wt.shape()[0], wt.shape()[1]);
    let bias = store.get(b).data();
    let mut out: Vec<F> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
    crate::tensor::gemm(rows, k, n, x, false, wt.data(), false, &mut out, true);
    out
}
