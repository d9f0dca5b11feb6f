// SPDX-License-Identifier: MIT OR Apache-2.0

//! The JSON run configuration shared by every command.

use std::path::Path;

use anyhow::{bail, Context};
use lincirc::attribution::Method;
use lincirc::dictionary::{DictTrainConfig, HookSpec, PruneThresholds};
use lincirc::toymodel::{LmTrainConfig, MixtureWeights, ModelConfig, Vocabulary};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Training sequences for the language model.
    pub count: usize,
    pub weights: MixtureWeights,
    /// Inclusive length range of induction sequences.
    pub induction_len: (usize, usize),
    /// Sequences used for dictionary training.
    pub dict_count: usize,
    /// Held-out sequences for evaluation and pruning statistics.
    pub eval_count: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            count: 20_000,
            weights: MixtureWeights::default(),
            induction_len: (8, 32),
            dict_count: 4_000,
            eval_count: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictSpec {
    pub hook: HookSpec,
    pub train: DictTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub tau: f64,
    pub method: Method,
    pub root: Option<String>,
    pub detach_errors: bool,
    pub detach_biases: bool,
    /// Sweep grid size, including τ = 0.
    pub grid: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub samples: usize,
    pub qk_depth: usize,
    pub qk_top_k: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            tau: 0.01,
            method: Method::Hierarchical,
            root: None,
            detach_errors: true,
            detach_biases: false,
            grid: 30,
            grid_lo: 1e-4,
            grid_hi: 10.0,
            samples: 20,
            qk_depth: 2,
            qk_top_k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub lm: LmTrainConfig,
    pub corpus: CorpusConfig,
    pub dictionaries: Vec<DictSpec>,
    pub prune: PruneThresholds,
    /// Token budget of decoder finetuning; the other settings come from each
    /// dictionary's training config with λ = 0.
    pub finetune_budget: usize,
    pub attribution: AttributionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::toy(Vocabulary::standard().len());
        let dictionaries = HookSpec::inventory(model.n_layers)
            .into_iter()
            .map(|hook| DictSpec {
                hook,
                train: DictTrainConfig::toy(hook.site),
            })
            .collect();
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            model,
            lm: LmTrainConfig::default(),
            corpus: CorpusConfig::default(),
            dictionaries,
            prune: PruneThresholds::default(),
            finetune_budget: 100_000,
            attribution: AttributionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let c: RunConfig = serde_json::from_str(&text).map_err(lincirc::Error::from)?;
        if c.schema_version != CONFIG_SCHEMA_VERSION {
            bail!(lincirc::Error::Format(format!("unsupported config schema {}", c.schema_version)));
        }
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
