//! Run configuration: one TOML document with sections `kg`, `retrieval`,
//! `scoring`, `model`, `train`, `data`, `synthetic` and `ablation`.
//!
//! Every section and key is optional and falls back to the defaults below;
//! unknown keys are rejected. Relative paths resolve against the directory
//! of the config file.
//!
//! ```toml
//! [kg]
//! triples = "kg.tsv"            # or `bundle = "kg.bundle"`
//! templates = "templates.tsv"
//! embeddings = "vectors.tsv"    # optional; hashing encoder otherwise
//! strict_embeddings = false
//!
//! [retrieval]
//! max_hop = 3
//! cap = 64
//!
//! [scoring]
//! lambda = 0.5
//! k = 16
//! relf_mode = "frequency"       # or "inverse_frequency"
//! score_text = "templated"      # or "raw"
//! encoder_dim = 64
//!
//! [model]
//! layers = 2
//! d_lm = 16
//! d_gnn = 16
//! n_heads = 1
//! fusion_mode = "cross_attention"
//! vocab_size = 512
//! max_seq_len = 32
//! seed = 0
//! keep_interaction_node = false
//!
//! [train]
//! lr = 0.02
//! steps = 2000
//! batch_size = 1
//! seed = 0
//! optimizer = "momentum"        # or "sgd"
//! momentum = 0.9
//! clip_norm = 1.0
//!
//! [data]
//! train = "train.jsonl"
//! eval = "ihtest.jsonl"
//!
//! [synthetic]
//! n_train = 500
//! n_test = 200
//! kg_size = 200
//! seed = 0
//!
//! [ablation]
//! variants = ["none", "naive", "interaction", "cross-1", "cross-4"]
//! hops = [1, 3]
//! ```

use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextConfig, ContextError, EmbeddingTable, HashingEncoder, ScoreText, TableEncoder, TextEncoder};
use crate::kg::{KgBundle, KgError, KnowledgeGraph, RelfMode, TemplateTable};
use crate::model::ModelConfig;
use crate::retrieval::DEFAULT_MAX_HOP;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Context(#[from] ContextError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgSection {
    pub triples: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    /// Prebuilt bundle; takes precedence over `triples`/`templates`.
    pub bundle: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Fail on texts missing from the embedding table instead of hashing them.
    pub strict_embeddings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub max_hop: NonZeroUsize,
    /// Most triplets kept from a subgraph before scoring.
    pub cap: NonZeroUsize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let c = ContextConfig::default();
        Self { max_hop: NonZeroUsize::new(DEFAULT_MAX_HOP).expect("positive"), cap: c.cap }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub lambda: f64,
    pub k: NonZeroUsize,
    pub relf_mode: RelfMode,
    pub score_text: ScoreText,
    /// Width of the hashing encoder; ignored when an embedding table is set.
    pub encoder_dim: usize,
}

impl Default for ScoringSection {
    fn default() -> Self {
        let c = ContextConfig::default();
        Self {
            lambda: c.lambda,
            k: c.k,
            relf_mode: RelfMode::default(),
            score_text: c.score_text,
            encoder_dim: HashingEncoder::DEFAULT_DIM,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_train: usize,
    pub n_test: usize,
    pub kg_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self { n_train: 500, n_test: 200, kg_size: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<String>,
    pub hops: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            variants: ["none", "naive", "interaction", "cross-1", "cross-4"].map(String::from).to_vec(),
            hops: vec![1, 3],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kg: KgSection,
    pub retrieval: RetrievalSection,
    pub scoring: ScoringSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses the file and resolves its relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.kg.triples);
        fix(&mut self.kg.templates);
        fix(&mut self.kg.bundle);
        fix(&mut self.kg.embeddings);
        fix(&mut self.data.train);
        fix(&mut self.data.eval);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = crate::context::check_lambda(self.scoring.lambda) {
            return bad(e.to_string());
        }
        if self.scoring.encoder_dim == 0 {
            return bad("scoring.encoder_dim must be positive".into());
        }
        if let Err(e) = self.model.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return bad(e.to_string());
        }
        for v in &self.ablation.variants {
            if let Err(e) = v.parse::<crate::train::Variant>() {
                return bad(format!("ablation.variants: {e}"));
            }
        }
        if self.ablation.hops.contains(&0) {
            return bad("ablation.hops must be positive".into());
        }
        Ok(())
    }

    pub fn context_config(&self) -> ContextConfig {
        ContextConfig {
            max_hop: self.retrieval.max_hop,
            cap: self.retrieval.cap,
            lambda: self.scoring.lambda,
            k: self.scoring.k,
            score_text: self.scoring.score_text,
        }
    }

    /// Both seeds at once, as the `FUSEQA_SEED` override does.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// The bundle if one is configured, else the triple and template files.
    pub fn load_kg(&self) -> Result<KgBundle, ConfigError> {
        if let Some(b) = &self.kg.bundle {
            return Ok(KgBundle::load(b)?);
        }
        let triples = self.kg.triples.as_ref().ok_or_else(|| ConfigError::Invalid("kg.triples or kg.bundle is required".into()))?;
        let kg = KnowledgeGraph::load_triples(triples)?;
        let templates = match &self.kg.templates {
            Some(t) => TemplateTable::load(t)?,
            None => TemplateTable::default(),
        };
        Ok(KgBundle { kg, templates })
    }

    pub fn encoder(&self) -> Result<Box<dyn TextEncoder>, ConfigError> {
        Ok(match &self.kg.embeddings {
            Some(p) => {
                let table = EmbeddingTable::load(p)?;
                if self.kg.strict_embeddings {
                    Box::new(TableEncoder::strict(table))
                } else {
                    Box::new(TableEncoder::with_fallback(table))
                }
            }
            None => Box::new(HashingEncoder::new(self.scoring.encoder_dim)),
        })
    }
}
