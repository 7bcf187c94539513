//! Experiment configuration, presets and config hashing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::model::{AdapterPlacement, ModelConfig};
use crate::objectives::LossConfig;
use crate::training::TrainConfig;
use crate::world::{WorldConfig, MASK_ID, PAD_ID};

/// Model hyperparameters; the vocabulary size comes from the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub adapter_placement: AdapterPlacement,
    pub tie_embeddings: bool,
    pub init_seed: u64,
}

impl ModelSettings {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_seq_len: self.max_seq_len,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_width: self.ffn_width,
            adapter_dim: 0,
            adapter_placement: self.adapter_placement,
            tie_embeddings: self.tie_embeddings,
            mask_token_id: MASK_ID,
            pad_token_id: PAD_ID,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    /// Length of the top-k list stored per prediction record.
    pub record_top_k: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings { record_top_k: 10 }
    }
}

/// The whole pipeline's configuration, one section per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub world: WorldConfig,
    pub model: ModelSettings,
    /// Seed of the pretraining loop; tuning seeds come from `seeds`.
    pub pretrain_seed: u64,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub probe: ProbeSettings,
    #[serde(default)]
    pub eval: EvalOptions,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.model.model_config(16).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one tuning seed is required".into()));
        }
        if self.train.adapter_dim == 0 || self.train.adapter_dim >= self.model.d_model {
            return Err(Error::Config("adapter_dim must be in 1..d_model".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-mini" => Ok(paper_mini()),
            "smoke" => Ok(smoke()),
            other => Err(Error::Config(format!(
                "unknown preset {other} (expected paper-mini or smoke)"
            ))),
        }
    }
}

/// Six relations, 40 subjects and 10 objects each, 13 templates per
/// relation, a 2-layer d=64 encoder and tuning seeds 20, 30, 50. Objects
/// follow a Zipf(1.5) marginal and 400 filler-subject distractor sentences
/// per relation plant the object-likelihood bias.
pub fn paper_mini() -> ExperimentConfig {
    ExperimentConfig {
        name: "paper-mini".into(),
        world: WorldConfig {
            n_relations: 6,
            subjects_per_relation: 40,
            objects_per_relation: 10,
            paraphrases_per_relation: 12,
            short_paraphrases: 3,
            long_paraphrases: 3,
            template_prior_skew: 1.0,
            object_marginal_skew: 1.5,
            corpus_repeats: 12,
            distractors_per_relation: 400,
            n_nm_relations: 0,
            seed: 7,
        },
        model: ModelSettings {
            max_seq_len: 32,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_width: 128,
            adapter_placement: AdapterPlacement::Both,
            tie_embeddings: false,
            init_seed: 1,
        },
        pretrain_seed: 11,
        train: TrainConfig {
            learning_rate: 2e-3,
            tune_learning_rate: Some(1e-3),
            batch_size: 16,
            epochs_pretrain: 12,
            epochs_tune: 30,
            adapter_dim: 16,
            ..TrainConfig::default()
        },
        loss: LossConfig::default(),
        seeds: vec![20, 30, 50],
        probe: ProbeSettings::default(),
        eval: EvalOptions::default(),
    }
}

/// A seconds-scale configuration for tests and smoke runs.
pub fn smoke() -> ExperimentConfig {
    let mut cfg = paper_mini();
    cfg.name = "smoke".into();
    cfg.world = WorldConfig {
        n_relations: 5,
        subjects_per_relation: 8,
        objects_per_relation: 4,
        paraphrases_per_relation: 5,
        short_paraphrases: 1,
        long_paraphrases: 1,
        corpus_repeats: 2,
        distractors_per_relation: 6,
        ..cfg.world
    };
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.ffn_width = 32;
    cfg.model.n_layers = 1;
    cfg.train.epochs_pretrain = 1;
    cfg.train.epochs_tune = 1;
    cfg.train.batch_size = 8;
    cfg.train.adapter_dim = 4;
    cfg.seeds = vec![20];
    cfg
}
