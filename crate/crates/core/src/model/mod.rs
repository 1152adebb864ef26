//! Parallel-residual decoder with a pluggable token mixer.
//!
//! Each layer computes `x + mixer(ln1(x)) + mlp(ln2(x))`, where the MLP is
//! `dense(d -> 4d)`, GELU, `dense(4d -> d)`. Logits are `ln_f(x) Eᵀ` with the
//! embedding table `E` when embeddings are tied.

mod checkpoint;

pub use checkpoint::{
    CheckpointManifest, TensorRecord, TrainSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mixers::{AttentionConfig, HyenaConfig, Mixer, MixerConfig, MixerKind};
use crate::params::{Bound, ParamId, ParamKind, ParamSpec, ParamStore};
use crate::tensor::{Graph, Init, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Byte vocabulary plus BOS and EOS.
pub const BYTE_VOCAB: usize = 258;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    pub d_model: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    pub mixer: MixerConfig,
    #[serde(default = "defaults::mlp_hidden_mult")]
    pub mlp_hidden_mult: usize,
    pub context_len: usize,
    #[serde(default = "defaults::tie_embeddings")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::norm_eps")]
    pub norm_eps: f64,
}

mod defaults {
    pub fn vocab_size() -> usize {
        super::BYTE_VOCAB
    }
    pub fn n_layers() -> usize {
        6
    }
    pub fn mlp_hidden_mult() -> usize {
        4
    }
    pub fn tie_embeddings() -> bool {
        true
    }
    pub fn norm_eps() -> f64 {
        1e-5
    }
}

impl ModelConfig {
    /// Byte-vocabulary attention model with default depth and MLP width.
    pub fn attention(d_model: usize, n_heads: usize, n_layers: usize, context_len: usize) -> Self {
        ModelConfig {
            vocab_size: BYTE_VOCAB,
            d_model,
            n_layers,
            mixer: MixerConfig::Attention(AttentionConfig::new(d_model, n_heads)),
            mlp_hidden_mult: defaults::mlp_hidden_mult(),
            context_len,
            tie_embeddings: true,
            seed: 0,
            norm_eps: defaults::norm_eps(),
        }
    }

    pub fn hyena(d_model: usize, n_layers: usize, context_len: usize) -> Self {
        ModelConfig {
            mixer: MixerConfig::Hyena(HyenaConfig::new(d_model)),
            ..Self::attention(d_model, 2, n_layers, context_len)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers must be at least 1"));
        }
        if self.context_len < 2 {
            return Err(Error::config(format!(
                "context_len must be at least 2, got {}",
                self.context_len
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.mlp_hidden_mult == 0 {
            return Err(Error::config(
                "d_model and mlp_hidden_mult must be positive",
            ));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be positive"));
        }
        if self.mixer.d_model() != self.d_model {
            return Err(Error::config(format!(
                "mixer d_model {} differs from model d_model {}",
                self.mixer.d_model(),
                self.d_model
            )));
        }
        self.mixer.validate()?;
        if let MixerConfig::Hyena(h) = &self.mixer {
            if h.short_filter_len > self.context_len {
                return Err(Error::config("short_filter_len exceeds context_len"));
            }
        }
        Ok(())
    }
}

/// Which layer outputs [`Model::forward`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capture {
    None,
    AllLayers,
}

/// Hidden state after every layer plus final logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<F: Scalar> {
    pub hidden: Vec<Tensor<F>>,
    pub logits: Tensor<F>,
}

/// Graph handles produced by [`Model::forward_graph`].
pub struct GraphTrace<'g, F: Scalar> {
    pub hidden: Vec<Var<'g, F>>,
    pub logits: Option<Var<'g, F>>,
}

/// How [`Model::swap_mixer`] initialises the non-mixer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StudentInit {
    #[default]
    Copy,
    Fresh,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    mixer: Mixer,
    fc_in: (ParamId, ParamId),
    fc_out: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    params: ParamStore<F>,
    embed: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    unembed: Option<ParamId>,
}

/// Trainable parameter counts by group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub kind: MixerKind,
    pub total: usize,
    pub embedding: usize,
    pub mixers: usize,
    pub mlps: usize,
    pub norms: usize,
    pub buffers: usize,
}

fn layer_prefix(i: usize) -> String {
    format!("layers.{i}")
}

fn dense_specs(prefix: &str, fan_in: usize, fan_out: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(
            format!("{prefix}.weight"),
            ParamKind::Weight,
            &[fan_in, fan_out],
            Init::Normal {
                mean: 0.0,
                std: 0.02,
                seed: 0,
            },
        ),
        ParamSpec::new(
            format!("{prefix}.bias"),
            ParamKind::Bias,
            &[fan_out],
            Init::Zeros,
        ),
    ]
}

fn norm_specs(prefix: &str, d: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.gain"), ParamKind::Bias, &[d], Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), ParamKind::Bias, &[d], Init::Zeros),
    ]
}

impl<F: Scalar> Model<F> {
    /// Deterministic seeded construction.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let h = d * config.mlp_hidden_mult;
        let reg = |store: &mut ParamStore<F>, specs: &[ParamSpec]| -> Result<()> {
            specs
                .iter()
                .try_for_each(|s| store.register(s, seed).map(|_| ()))
        };
        reg(&mut store, &[Self::embed_spec(&config)])?;
        for i in 0..config.n_layers {
            let p = layer_prefix(i);
            reg(&mut store, &norm_specs(&format!("{p}.ln1"), d))?;
            reg(&mut store, &norm_specs(&format!("{p}.ln2"), d))?;
            Mixer::build(&config.mixer, &format!("{p}.mixer"), &mut store, seed)?;
            reg(&mut store, &dense_specs(&format!("{p}.mlp.fc_in"), d, h))?;
            reg(&mut store, &dense_specs(&format!("{p}.mlp.fc_out"), h, d))?;
        }
        reg(&mut store, &norm_specs("ln_f", d))?;
        if !config.tie_embeddings {
            reg(&mut store, &[Self::unembed_spec(&config)])?;
        }
        Self::attach(config, store)
    }

    fn embed_spec(config: &ModelConfig) -> ParamSpec {
        ParamSpec::new(
            "embed.weight",
            ParamKind::Weight,
            &[config.vocab_size, config.d_model],
            Init::Normal {
                mean: 0.0,
                std: 0.02,
                seed: 0,
            },
        )
    }

    fn unembed_spec(config: &ModelConfig) -> ParamSpec {
        ParamSpec::new(
            "unembed.weight",
            ParamKind::Weight,
            &[config.d_model, config.vocab_size],
            Init::Normal {
                mean: 0.0,
                std: 0.02,
                seed: 0,
            },
        )
    }

    /// Binds the layer structure to an already populated store. Every
    /// stored tensor must be claimed by the structure.
    pub(crate) fn attach(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = d * config.mlp_hidden_mult;
        let pair = |specs: [ParamSpec; 2]| -> Result<(ParamId, ParamId)> {
            Ok((params.resolve(&specs[0])?, params.resolve(&specs[1])?))
        };
        let embed = params.resolve(&Self::embed_spec(&config))?;
        let blocks = (0..config.n_layers)
            .map(|i| {
                let p = layer_prefix(i);
                Ok(Block {
                    ln1: pair(norm_specs(&format!("{p}.ln1"), d))?,
                    ln2: pair(norm_specs(&format!("{p}.ln2"), d))?,
                    mixer: Mixer::attach(&config.mixer, &format!("{p}.mixer"), &params)?,
                    fc_in: pair(dense_specs(&format!("{p}.mlp.fc_in"), d, h))?,
                    fc_out: pair(dense_specs(&format!("{p}.mlp.fc_out"), h, d))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = pair(norm_specs("ln_f", d))?;
        let unembed = if config.tie_embeddings {
            None
        } else {
            Some(params.resolve(&Self::unembed_spec(&config))?)
        };
        let model = Model {
            config,
            params,
            embed,
            blocks,
            ln_f,
            unembed,
        };
        let expected = Self::build_names(&model.config)?;
        if expected.len() != model.params.len() {
            let extra: Vec<&str> = model
                .params
                .entries()
                .iter()
                .map(|e| e.name.as_str())
                .filter(|n| !expected.iter().any(|x| x == n))
                .collect();
            return Err(Error::config(format!("unexpected parameters {extra:?}")));
        }
        Ok(model)
    }

    fn build_names(config: &ModelConfig) -> Result<Vec<String>> {
        let mut store = ParamStore::<F>::new();
        let mut names = vec![Self::embed_spec(config).name];
        for i in 0..config.n_layers {
            let p = layer_prefix(i);
            Mixer::build(&config.mixer, &format!("{p}.mixer"), &mut store, 0)?;
            for part in ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"] {
                names.push(format!("{p}.{part}"));
            }
            for part in ["fc_in", "fc_out"] {
                names.push(format!("{p}.mlp.{part}.weight"));
                names.push(format!("{p}.mlp.{part}.bias"));
            }
        }
        names.extend(store.entries().iter().map(|e| e.name.clone()));
        names.push("ln_f.gain".into());
        names.push("ln_f.bias".into());
        if !config.tie_embeddings {
            names.push(Self::unembed_spec(config).name);
        }
        Ok(names)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> MixerKind {
        self.config.mixer.kind()
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn mixer(&self, layer: usize) -> &Mixer {
        &self.blocks[layer].mixer
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Marks every parameter whose name starts with one of `prefixes`.
    pub fn mask_prefixes(&self, prefixes: &[String]) -> Vec<bool> {
        self.params
            .entries()
            .iter()
            .map(|e| {
                e.kind != ParamKind::Buffer
                    && prefixes
                        .iter()
                        .any(|p| e.name == *p || e.name.starts_with(&format!("{p}.")))
            })
            .collect()
    }

    /// Parameters of layer `i`, i.e. `layers.{i}.*`.
    pub fn layer_mask(&self, layer: usize) -> Vec<bool> {
        self.mask_prefixes(&[layer_prefix(layer)])
    }

    pub fn all_trainable_mask(&self) -> Vec<bool> {
        self.params
            .entries()
            .iter()
            .map(|e| e.kind != ParamKind::Buffer)
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::shape("empty token sequence"));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::shape(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::shape(format!(
                "token {t} out of range for vocabulary {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the first `layers` layers (all when `None`) inside `b`'s graph,
    /// adding logits when `logits` is set and every layer ran.
    pub fn forward_graph<'g>(
        &self,
        b: &Bound<'g, '_, F>,
        tokens: &[usize],
        layers: Option<usize>,
        logits: bool,
    ) -> Result<GraphTrace<'g, F>> {
        self.check_tokens(tokens)?;
        let upto = layers.unwrap_or(self.blocks.len());
        if upto > self.blocks.len() {
            return Err(Error::config(format!(
                "model has {} layers, asked for {upto}",
                self.blocks.len()
            )));
        }
        let g = b.graph();
        let eps = self.config.norm_eps;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x = g.embedding(&b.var(self.embed), tokens)?;
        let mut hidden = Vec::with_capacity(upto);
        for block in &self.blocks[..upto] {
            let norm =
                |(gain, bias): (ParamId, ParamId)| x.layer_norm(&b.var(gain), &b.var(bias), eps);
            let mixed = block.mixer.forward(b, norm(block.ln1)?, &positions)?;
            let mlp = norm(block.ln2)?
                .matmul(&b.var(block.fc_in.0))?
                .add_row(&b.var(block.fc_in.1))?
                .gelu()?
                .matmul(&b.var(block.fc_out.0))?
                .add_row(&b.var(block.fc_out.1))?;
            x = x.add(&mixed)?.add(&mlp)?;
            hidden.push(x);
        }
        let logits = if logits && upto == self.blocks.len() {
            let y = x.layer_norm(&b.var(self.ln_f.0), &b.var(self.ln_f.1), eps)?;
            Some(match self.unembed {
                None => y.matmul_t(&b.var(self.embed))?,
                Some(u) => y.matmul(&b.var(u))?,
            })
        } else {
            None
        };
        Ok(GraphTrace { hidden, logits })
    }

    pub fn forward(&self, tokens: &[usize], capture: Capture) -> Result<LayerTrace<F>> {
        let g = Graph::new();
        let b = Bound::new(&g, &self.params, None);
        let trace = self.forward_graph(&b, tokens, None, true)?;
        let hidden = match capture {
            Capture::None => Vec::new(),
            Capture::AllLayers => trace.hidden.iter().map(Var::to_tensor).collect(),
        };
        Ok(LayerTrace {
            hidden,
            logits: trace.logits.expect("all layers ran").to_tensor(),
        })
    }

    /// Hidden state after each of the first `layers` layers.
    pub fn hidden_states(&self, tokens: &[usize], layers: usize) -> Result<Vec<Tensor<F>>> {
        let g = Graph::new();
        let b = Bound::new(&g, &self.params, None);
        let trace = self.forward_graph(&b, tokens, Some(layers), false)?;
        Ok(trace.hidden.iter().map(Var::to_tensor).collect())
    }

    /// Student with fresh seeded mixers of `mixer` and, under
    /// [`StudentInit::Copy`], every other parameter copied from `self`.
    pub fn swap_mixer(&self, mixer: MixerConfig, init: StudentInit, seed: u64) -> Result<Self> {
        if mixer.d_model() != self.config.d_model {
            return Err(Error::config(format!(
                "student mixer d_model {} differs from teacher d_model {}",
                mixer.d_model(),
                self.config.d_model
            )));
        }
        let config = ModelConfig {
            mixer,
            seed,
            ..self.config.clone()
        };
        let mut student = Self::build(config)?;
        if init == StudentInit::Copy {
            let mixer_names: Vec<String> = (0..self.n_layers())
                .map(|i| format!("{}.mixer.", layer_prefix(i)))
                .collect();
            for e in self.params.entries() {
                if mixer_names.iter().any(|p| e.name.starts_with(p)) {
                    continue;
                }
                student.params.set(&e.name, e.tensor.data().to_vec())?;
            }
        }
        Ok(student)
    }

    pub fn param_report(&self) -> ParamReport {
        let mut r = ParamReport {
            kind: self.kind(),
            total: 0,
            embedding: 0,
            mixers: 0,
            mlps: 0,
            norms: 0,
            buffers: 0,
        };
        for e in self.params.entries() {
            let n = e.tensor.len();
            if e.kind == ParamKind::Buffer {
                r.buffers += n;
                continue;
            }
            r.total += n;
            if e.name.contains(".mixer.") {
                r.mixers += n;
            } else if e.name.contains(".mlp.") {
                r.mlps += n;
            } else if e.name.starts_with("embed.") || e.name.starts_with("unembed.") {
                r.embedding += n;
            } else {
                r.norms += n;
            }
        }
        r
    }

    /// Same architecture and values at another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        let mut store = ParamStore::<G>::new();
        for e in self.params.entries() {
            store
                .add(e.name.clone(), e.kind, e.tensor.cast())
                .expect("names are unique");
        }
        Model::attach(self.config.clone(), store).expect("same structure")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(self, None, path.as_ref())
    }

    pub fn save_with_state(&self, state: &TrainSnapshot<F>, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(self, Some(state), path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(checkpoint::load(path.as_ref(), None)?.0)
    }

    /// Loads and checks that the stored model uses the given mixer.
    pub fn load_expecting(path: impl AsRef<Path>, kind: MixerKind) -> Result<Self> {
        Ok(checkpoint::load(path.as_ref(), Some(kind))?.0)
    }

    pub fn load_with_state(path: impl AsRef<Path>) -> Result<(Self, Option<TrainSnapshot<F>>)> {
        checkpoint::load(path.as_ref(), None)
    }
}
