use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mixers::{HyenaConfig, MixerConfig};
use crate::model::ModelConfig;
use crate::tensor::Precision;
use crate::training::{Stage, TrainPlan};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Text files, one document each; a synthetic corpus when empty.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default = "defaults::synthetic_bytes")]
    pub synthetic_bytes: usize,
    #[serde(default)]
    pub synthetic_seed: u64,
    #[serde(default = "defaults::context_len")]
    pub context_len: usize,
    /// Windows sampled in total, training plus validation.
    #[serde(default = "defaults::n_windows")]
    pub n_windows: usize,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    /// Training windows whose teacher activations are stored.
    #[serde(default = "defaults::distill_windows")]
    pub distill_windows: usize,
    /// Validation windows used for layer MSE during distillation.
    #[serde(default = "defaults::distill_val_windows")]
    pub distill_val_windows: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "defaults::search_lrs")]
    pub lrs: Vec<f64>,
    #[serde(default = "defaults::search_batches")]
    pub batches: Vec<usize>,
    /// Tokens per grid cell.
    #[serde(default = "defaults::search_budget")]
    pub token_budget: u64,
    /// Distilled layer; the last one when absent.
    #[serde(default)]
    pub layer: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "defaults::bench_lengths")]
    pub lengths: Vec<usize>,
    #[serde(default = "defaults::bench_repeats")]
    pub repeats: usize,
    #[serde(default = "defaults::bench_d_model")]
    pub d_model: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

/// Everything a run needs. Written to `config.resolved.toml` in the output
/// directory, which later invocations use as their base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Window sampling and student initialisation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::precision")]
    pub precision: Precision,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "defaults::teacher")]
    pub teacher: ModelConfig,
    /// Mixer of the students.
    #[serde(default = "defaults::student")]
    pub student: MixerConfig,
    #[serde(default = "defaults::pretrain")]
    pub pretrain: TrainPlan,
    #[serde(default = "defaults::hyena_pretrain")]
    pub hyena_pretrain: TrainPlan,
    #[serde(default = "defaults::pkt")]
    pub pkt: TrainPlan,
    #[serde(default = "defaults::jkt")]
    pub jkt: TrainPlan,
    #[serde(default = "defaults::finetune")]
    pub finetune: TrainPlan,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

mod defaults {
    use super::*;

    pub fn synthetic_bytes() -> usize {
        4_000_000
    }
    pub fn context_len() -> usize {
        128
    }
    pub fn n_windows() -> usize {
        24_000
    }
    pub fn val_fraction() -> f64 {
        0.05
    }
    pub fn distill_windows() -> usize {
        6_000
    }
    pub fn distill_val_windows() -> usize {
        100
    }
    pub fn search_lrs() -> Vec<f64> {
        vec![5e-4, 1e-3, 2e-3]
    }
    pub fn search_batches() -> Vec<usize> {
        vec![8, 16]
    }
    pub fn search_budget() -> u64 {
        200_000
    }
    pub fn bench_lengths() -> Vec<usize> {
        vec![1024, 2048, 4096, 8192, 16384]
    }
    pub fn bench_repeats() -> usize {
        5
    }
    pub fn bench_d_model() -> usize {
        64
    }
    pub fn precision() -> Precision {
        Precision::F32
    }
    pub fn teacher() -> ModelConfig {
        ModelConfig::attention(64, 4, 2, context_len())
    }
    pub fn student() -> MixerConfig {
        MixerConfig::Hyena(HyenaConfig::new(64))
    }
    fn plan(stage: Stage, budget: Option<u64>, epochs: f64, lr: f64) -> TrainPlan {
        let mut p = TrainPlan::new(stage);
        p.token_budget = budget;
        p.epochs = epochs;
        p.batch_size = 16;
        p.checkpoint_every = Some(100);
        p.schedule.max_lr = lr;
        p
    }
    pub fn pretrain() -> TrainPlan {
        plan(Stage::Pretrain, Some(8_000_000), 1.0, 3e-3)
    }
    pub fn hyena_pretrain() -> TrainPlan {
        plan(Stage::Pretrain, Some(3_000_000), 1.0, 3e-3)
    }
    pub fn pkt() -> TrainPlan {
        plan(Stage::Pkt, None, 2.0, 3e-3)
    }
    pub fn jkt() -> TrainPlan {
        plan(Stage::Jkt, None, 2.0, 3e-3)
    }
    pub fn finetune() -> TrainPlan {
        plan(Stage::Finetune, Some(3_000_000), 1.0, 1e-3)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to `table`, creating intermediate tables. The value
/// is read as a TOML literal and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {p} is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then `base` (a TOML document or nothing), then `file`, then
    /// overrides.
    pub fn resolve(base: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let parse = |text: &str, origin: &str| -> Result<toml::Table> {
            toml::from_str(text).map_err(|e| Error::config(format!("{origin}: {e}")))
        };
        // Partial tables in any layer merge over the defaults of their section.
        let mut table = parse(&RunConfig::default().to_toml(), "defaults")?;
        if let Some(text) = base {
            merge(&mut table, parse(text, "resolved config")?);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            merge(&mut table, parse(&text, &path.display().to_string())?);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.normalized())
    }

    fn normalized(mut self) -> Self {
        self.pretrain.stage = Stage::Pretrain;
        self.hyena_pretrain.stage = Stage::Pretrain;
        self.pkt.stage = Stage::Pkt;
        self.jkt.stage = Stage::Jkt;
        self.finetune.stage = Stage::Finetune;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        if self.student.d_model() != self.teacher.d_model {
            return Err(Error::config("student and teacher widths differ"));
        }
        for p in [
            &self.pretrain,
            &self.hyena_pretrain,
            &self.pkt,
            &self.jkt,
            &self.finetune,
        ] {
            p.validate()?;
        }
        let d = &self.data;
        if d.context_len < 2 || d.context_len > self.teacher.context_len {
            return Err(Error::config(format!(
                "data.context_len {} must be in 2..={}",
                d.context_len, self.teacher.context_len
            )));
        }
        if d.distill_windows == 0 || d.distill_val_windows == 0 {
            return Err(Error::config(
                "distillation needs training and validation windows",
            ));
        }
        if self.search.lrs.is_empty() || self.search.batches.is_empty() {
            return Err(Error::config("search grid is empty"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Student model config: the teacher's with the student mixer.
    pub fn student_model(&self) -> ModelConfig {
        ModelConfig {
            mixer: self.student.clone(),
            seed: self.seed.wrapping_add(1),
            ..self.teacher.clone()
        }
    }

    /// Sets every stage seed and the model seeds from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.teacher.seed = seed;
        for p in [
            &mut self.pretrain,
            &mut self.hyena_pretrain,
            &mut self.pkt,
            &mut self.jkt,
            &mut self.finetune,
        ] {
            p.seed = seed;
        }
    }
}

/// Recursive table merge. A table naming a different `kind` (a mixer
/// variant) replaces the old one instead of merging into it.
fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b))
                if b.get("kind").is_none_or(|kind| a.get("kind") == Some(kind)) =>
            {
                merge(a, b)
            }
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}
