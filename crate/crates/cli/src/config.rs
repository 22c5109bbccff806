//! The JSON run configuration.

use std::path::Path;

use ngrammer::lm::{CorpusConfig, LayerPosition, ModelConfig, TrainConfig};
use ngrammer::NGrammerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "NGRAMMER_SEED";

/// Written next to the checkpoint; holds the config that produced it.
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ngrammer: NGrammerSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub io: IoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub seq_len: usize,
    pub init_std: f64,
    /// `embedding`, `begin`, `mid`, `end` or `after:N`.
    pub position: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            layers: m.layers,
            width: m.width,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            seq_len: m.seq_len,
            init_std: m.init_std,
            position: "embedding".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NGrammerSection {
    pub enabled: bool,
    pub k: usize,
    pub v: usize,
    pub heads: usize,
    pub dim: usize,
    pub bigram_dim: usize,
    pub eps_ln: f64,
    pub kmeans_lr: f64,
}

impl Default for NGrammerSection {
    fn default() -> Self {
        let n = NGrammerConfig::default();
        Self {
            enabled: true,
            k: n.k,
            v: n.v,
            heads: n.heads,
            dim: n.dim,
            bigram_dim: n.bigram_dim,
            eps_ln: n.eps_ln,
            kmeans_lr: n.kmeans_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub warmup: usize,
    pub table_lr: f64,
    pub freeze_codebook: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch: t.batch,
            steps: t.steps,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            clip_norm: t.clip_norm,
            warmup: t.warmup,
            table_lr: t.table_lr,
            freeze_codebook: t.freeze_codebook,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub vocab: usize,
    pub groups: usize,
    pub alpha: f64,
    /// Seeds the transition matrix and the held-out stream.
    pub corpus_seed: u64,
    pub eval_sequences: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            vocab: c.vocab,
            groups: c.groups,
            alpha: c.alpha,
            corpus_seed: c.seed,
            eval_sequences: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub checkpoint: String,
    pub log: String,
    pub metrics: String,
    pub cache: String,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            checkpoint: "checkpoint.bin".into(),
            log: "train_log.tsv".into(),
            metrics: "metrics.json".into(),
            cache: "latent_cache.txt".into(),
        }
    }
}

impl RunConfig {
    /// A config with every section at its default.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            model: ModelSection::default(),
            train: TrainSection::default(),
            ngrammer: NGrammerSection::default(),
            data: DataSection::default(),
            io: IoSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; `NGRAMMER_SEED` overrides the seed.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model_config()?.validate()?;
        self.train_config().validate()?;
        if self.data.eval_sequences == 0 {
            return Err(CliError::Config("data.eval_sequences must be >= 1".into()));
        }
        Ok(())
    }

    pub fn position(&self) -> Result<LayerPosition, CliError> {
        let p = self.model.position.as_str();
        if let Some(n) = p.strip_prefix("after:") {
            let n = n
                .parse()
                .map_err(|_| CliError::Config(format!("model.position: bad block index in {p:?}")))?;
            return Ok(LayerPosition::AfterBlock(n));
        }
        LayerPosition::named(p, self.model.layers).map_err(|e| CliError::Config(format!("model.position: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        let n = &self.ngrammer;
        Ok(ModelConfig {
            layers: m.layers,
            width: m.width,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            vocab: self.data.vocab,
            seq_len: m.seq_len,
            init_std: m.init_std,
            ngrammer: n.enabled.then_some(NGrammerConfig {
                k: n.k,
                v: n.v,
                heads: n.heads,
                dim: n.dim,
                bigram_dim: n.bigram_dim,
                seed: 0,
                eps_ln: n.eps_ln,
                kmeans_lr: n.kmeans_lr,
            }),
            position: self.position()?,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch: t.batch,
            steps: t.steps,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            clip_norm: t.clip_norm,
            warmup: t.warmup,
            table_lr: t.table_lr,
            freeze_codebook: t.freeze_codebook,
            seed: self.seed,
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            vocab: self.data.vocab,
            groups: self.data.groups,
            alpha: self.data.alpha,
            seed: self.data.corpus_seed,
        }
    }
}
