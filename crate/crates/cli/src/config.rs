//! Experiment configuration. One TOML file describes an experiment; every
//! section has defaults, so an empty file (or none at all) is a valid
//! desk-scale setup. Precedence, lowest to highest: built-in defaults,
//! config file, command-line flags. The manifest hashes the RESOLVED
//! configuration, so two invocations that end up with the same effective
//! settings hash identically however they were spelled.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use textrec_core::model::ModelConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub emb_dim: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub max_segments: usize,
    pub retrieval_dim: usize,
    pub share_layers: bool,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 4,
            heads: 2,
            dim: 32,
            emb_dim: 32,
            ffn_mult: 2,
            max_len: 96,
            max_segments: 8,
            retrieval_dim: 128,
            share_layers: false,
            init_seed: 0,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            emb_dim: self.emb_dim,
            ffn_mult: self.ffn_mult,
            max_len: self.max_len,
            max_segments: self.max_segments,
            retrieval_dim: self.retrieval_dim,
            share_layers: self.share_layers,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub unseen_items: usize,
    pub ctr_examples: usize,
    pub zeroshot_pairs: usize,
    pub eval_user_fraction: f64,
    pub vocab_max: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seed: 7,
            users: 200,
            items: 400,
            unseen_items: 100,
            ctr_examples: 2000,
            zeroshot_pairs: 200,
            eval_user_fraction: 0.25,
            vocab_max: 4096,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { steps: 150, batch: 8, lr: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub method: String,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub prompt_count: usize,
    pub option_count: usize,
    pub adapter_rank: usize,
    pub eval_every: usize,
    /// Cap on training examples taken from the CTR split (0 = all).
    pub max_examples: usize,
}

impl Default for TuneSection {
    fn default() -> Self {
        TuneSection {
            method: "option".into(),
            steps: 100,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            prompt_count: 16,
            option_count: 2,
            adapter_rank: 0,
            eval_every: 0,
            max_examples: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub temperature: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub projections_only: bool,
    pub k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            temperature: 0.07,
            steps: 120,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            projections_only: false,
            k: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub split: usize,
    pub reps: usize,
    pub warmup: usize,
    /// How many eval records the bench cycles over.
    pub requests: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection { split: 3, reps: 30, warmup: 2, requests: 16 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressSection {
    pub prune_target: f64,
    pub prune_start: usize,
    pub prune_end: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub exit_steps: usize,
    /// Eval records scored per exit layer (0 = all).
    pub exit_eval_examples: usize,
}

impl Default for CompressSection {
    fn default() -> Self {
        CompressSection {
            prune_target: 0.8,
            prune_start: 0,
            prune_end: 40,
            steps: 50,
            batch: 8,
            lr: 5e-4,
            seed: 0,
            exit_steps: 0,
            exit_eval_examples: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub student_layers: usize,
    pub student_emb_dim: usize,
    pub share_layers: bool,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            student_layers: 2,
            student_emb_dim: 16,
            share_layers: true,
            steps: 120,
            batch: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub max_new: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub count: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection { max_new: 24, temperature: 0.0, top_p: 1.0, seed: 0, count: 5 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub tune: TuneSection,
    pub retrieval: RetrievalSection,
    pub serve: ServeSection,
    pub compress: CompressSection,
    pub distill: DistillSection,
    pub generate: GenerateSection,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
            None => Ok(ExperimentConfig::default()),
        }
    }

    /// Canonical bytes of the resolved configuration, hashed into manifests.
    pub fn canonical_bytes(&self) -> anyhow::Result<Vec<u8>> {
        Ok(toml::to_string_pretty(self).context("encoding resolved config")?.into_bytes())
    }
}
