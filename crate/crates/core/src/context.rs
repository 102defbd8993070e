//! Knowledge-context construction: linearize retrieved triplets, embed them,
//! score each as `λ·cos(triplet, question) + (1-λ)·relf(relation)` and keep
//! the top k.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{linearize_triplet, EntityId, KnowledgeGraph, RelationStats, TemplateTable, Triplet};
use crate::retrieval::{cap_subgraph, retrieve_subgraph, Grounder, SeedSet, DEFAULT_MAX_HOP};
use crate::text::{fnv1a, word_tokens};

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding table line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no embedding for {0:?} (strict lookup)")]
    MissingEmbedding(String),
    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("encoder: {0}")]
    Encoder(String),
}

/// Sentence vectors keyed by exact text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, key: impl Into<String>, v: Vec<f64>) -> Result<(), ContextError> {
        if v.len() != self.dim {
            return Err(ContextError::Encoder(format!("vector of length {} in a dim-{} table", v.len(), self.dim)));
        }
        self.vectors.insert(key.into(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.vectors.get(key).map(Vec::as_slice)
    }

    /// `dim <d>` header, then `key<TAB>f1 f2 ... fd` per line.
    pub fn parse(text: &str) -> Result<Self, ContextError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
        let (_, header) = lines.next().ok_or(ContextError::Parse { line: 1, msg: "missing `dim <d>` header".into() })?;
        let dim = header
            .strip_prefix("dim ")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or(ContextError::Parse { line: 1, msg: format!("bad header {header:?}") })?;
        let mut table = Self::new(dim);
        for (line, row) in lines {
            if row.trim().is_empty() || row.starts_with('#') {
                continue;
            }
            let (key, values) =
                row.split_once('\t').ok_or(ContextError::Parse { line, msg: "expected key<TAB>values".into() })?;
            let v = values
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ContextError::Parse { line, msg: e.to_string() })?;
            if v.len() != dim {
                return Err(ContextError::Parse { line, msg: format!("expected {dim} values, found {}", v.len()) });
            }
            table.vectors.insert(key.to_owned(), v);
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContextError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ContextError::Io { path: path.to_owned(), source })?;
        Self::parse(&text)
    }
}

/// Deterministic text → vector map. Equal strings must give equal vectors.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>, ContextError>;
}

/// Signed feature hashing of word tokens into `dim` buckets, L2-normalized.
///
/// Each token adds ±1 to bucket `fnv1a(token) mod dim`; the sign is the top
/// bit of the same hash. Text without tokens encodes to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEncoder {
    pub dim: usize,
}

impl HashingEncoder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { dim }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in word_tokens(text) {
            let h = fnv1a(tok.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Default for HashingEncoder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, ContextError> {
        Ok(self.embed(text))
    }
}

/// Table lookup first; on a miss either fall back to hashing or fail.
#[derive(Debug, Clone)]
pub struct TableEncoder {
    table: EmbeddingTable,
    fallback: Option<HashingEncoder>,
}

impl TableEncoder {
    pub fn with_fallback(table: EmbeddingTable) -> Self {
        let fallback = Some(HashingEncoder::new(table.dim()));
        Self { table, fallback }
    }

    pub fn strict(table: EmbeddingTable) -> Self {
        Self { table, fallback: None }
    }
}

impl TextEncoder for TableEncoder {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, ContextError> {
        match (self.table.get(text), &self.fallback) {
            (Some(v), _) => Ok(v.to_vec()),
            (None, Some(h)) => Ok(h.embed(text)),
            (None, None) => Err(ContextError::MissingEmbedding(text.to_owned())),
        }
    }
}

/// Cosine similarity clamped to [-1, 1]. A zero vector yields 0.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine of vectors with different lengths");
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        log::warn!("cosine with a zero vector; scoring it as 0");
        return 0.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Which text stands for a triplet when computing its cosine term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreText {
    /// The template-rendered sentence.
    #[default]
    Templated,
    /// `head relation tail` surfaces joined by spaces.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub triplet_id: usize,
    pub sentence: String,
    pub cosine: f64,
    pub relf: f64,
    pub score: f64,
}

/// `λ·cosine + (1-λ)·relf`
pub fn combine_score(lambda: f64, cosine: f64, relf: f64) -> f64 {
    lambda * cosine + (1.0 - lambda) * relf
}

pub fn check_lambda(lambda: f64) -> Result<(), ContextError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(ContextError::InvalidLambda(lambda))
    }
}

/// Everything needed to score triplets against one question.
pub struct Scorer<'a> {
    pub kg: &'a KnowledgeGraph,
    pub templates: &'a TemplateTable,
    pub encoder: &'a dyn TextEncoder,
    pub stats: &'a RelationStats,
    pub lambda: f64,
    pub score_text: ScoreText,
}

impl Scorer<'_> {
    pub fn score(&self, t: &Triplet, question_vec: &[f64]) -> Result<ScoredTriplet, ContextError> {
        check_lambda(self.lambda)?;
        let sentence = linearize_triplet(t, self.templates, self.kg);
        let v = match self.score_text {
            ScoreText::Templated => self.encoder.encode(&sentence)?,
            ScoreText::Raw => self.encoder.encode(&format!(
                "{} {} {}",
                self.kg.entity_surface(t.head),
                self.kg.relation_surface(t.relation),
                self.kg.entity_surface(t.tail)
            ))?,
        };
        let cos = cosine(&v, question_vec);
        let relf = self.stats.relf(t.relation);
        Ok(ScoredTriplet { triplet_id: t.id, sentence, cosine: cos, relf, score: combine_score(self.lambda, cos, relf) })
    }
}

pub fn score_triplet(scorer: &Scorer<'_>, t: &Triplet, question: &str) -> Result<ScoredTriplet, ContextError> {
    let q = scorer.encoder.encode(question)?;
    scorer.score(t, &q)
}

/// Descending score, ties by ascending triplet id, truncated to k.
pub fn select_top_k(mut scored: Vec<ScoredTriplet>, k: NonZeroUsize) -> Vec<ScoredTriplet> {
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.triplet_id.cmp(&b.triplet_id)));
    scored.truncate(k.get());
    scored
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub max_hop: NonZeroUsize,
    pub cap: NonZeroUsize,
    pub lambda: f64,
    pub k: NonZeroUsize,
    pub score_text: ScoreText,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            max_hop: NonZeroUsize::new(DEFAULT_MAX_HOP).unwrap(),
            cap: NonZeroUsize::new(64).unwrap(),
            lambda: 0.5,
            k: NonZeroUsize::new(16).unwrap(),
            score_text: ScoreText::Templated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub question: String,
    pub choice: String,
    pub question_entities: BTreeSet<EntityId>,
    pub choice_entities: BTreeSet<EntityId>,
    pub triplets: Vec<ScoredTriplet>,
    pub lambda: f64,
    pub k: usize,
}

impl RetrievedContext {
    /// One `score<TAB>cos<TAB>relf<TAB>triplet_id<TAB>sentence` line per triplet.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for t in &self.triplets {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", t.score, t.cosine, t.relf, t.triplet_id, t.sentence);
        }
        out
    }
}

/// Ground → retrieve → cap → linearize → score → top-k, for one question/choice pair.
pub struct ContextBuilder<'a> {
    pub kg: &'a KnowledgeGraph,
    pub templates: &'a TemplateTable,
    pub encoder: &'a dyn TextEncoder,
    pub stats: &'a RelationStats,
    pub grounder: Grounder,
    pub config: ContextConfig,
}

impl<'a> ContextBuilder<'a> {
    pub fn new(
        kg: &'a KnowledgeGraph,
        templates: &'a TemplateTable,
        encoder: &'a dyn TextEncoder,
        stats: &'a RelationStats,
        config: ContextConfig,
    ) -> Result<Self, ContextError> {
        check_lambda(config.lambda)?;
        Ok(Self { kg, templates, encoder, stats, grounder: Grounder::new(kg), config })
    }

    pub fn seeds(&self, question: &str, choice: &str) -> SeedSet {
        SeedSet { question: self.grounder.ground(question), answer: self.grounder.ground(choice) }
    }

    pub fn build(&self, question: &str, choice: &str) -> Result<RetrievedContext, ContextError> {
        self.build_with_seeds(question, choice, self.seeds(question, choice))
    }

    /// As [`ContextBuilder::build`] with grounding already done.
    pub fn build_with_seeds(
        &self,
        question: &str,
        choice: &str,
        seeds: SeedSet,
    ) -> Result<RetrievedContext, ContextError> {
        let sub = retrieve_subgraph(self.kg, &seeds, self.config.max_hop);
        let sub = cap_subgraph(self.kg, &sub, self.config.cap);
        let scorer = Scorer {
            kg: self.kg,
            templates: self.templates,
            encoder: self.encoder,
            stats: self.stats,
            lambda: self.config.lambda,
            score_text: self.config.score_text,
        };
        let scored = if sub.is_empty() {
            Vec::new()
        } else {
            let q = self.encoder.encode(question)?;
            sub.triplets.iter().map(|&t| scorer.score(self.kg.triplet(t), &q)).collect::<Result<Vec<_>, _>>()?
        };
        Ok(RetrievedContext {
            question: question.to_owned(),
            choice: choice.to_owned(),
            question_entities: seeds.question,
            choice_entities: seeds.answer,
            triplets: select_top_k(scored, self.config.k),
            lambda: self.config.lambda,
            k: self.config.k.get(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RelfMode;

    fn st(id: usize, score: f64) -> ScoredTriplet {
        ScoredTriplet { triplet_id: id, sentence: String::new(), cosine: 0.0, relf: 0.0, score }
    }

    fn k(n: usize) -> NonZeroUsize {
        NonZeroUsize::new(n).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let v = [1.0, 2.0, 2.0];
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[-2.0, -2.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn combine_boundaries() {
        assert_eq!(combine_score(1.0, 0.37, 0.9), 0.37);
        assert_eq!(combine_score(0.0, 0.37, 0.9), 0.9);
        assert!((combine_score(0.5, 0.8, 0.2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn top_k_tie_break() {
        let got = select_top_k(vec![st(5, 0.2), st(2, 0.9), st(1, 0.9)], k(2));
        assert_eq!(got.iter().map(|s| s.triplet_id).collect::<Vec<_>>(), vec![1, 2]);
        let all = select_top_k(vec![st(5, 0.2), st(2, 0.9)], k(10));
        assert_eq!(all.iter().map(|s| s.triplet_id).collect::<Vec<_>>(), vec![2, 5]);
    }

    #[test]
    fn hashing_encoder_is_deterministic_and_unit() {
        let e = HashingEncoder::new(16);
        let a = e.embed("a dog in a kennel");
        assert_eq!(a, e.embed("A dog in a kennel!"));
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.embed("  ").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn table_parse_and_strict_miss() {
        let t = EmbeddingTable::parse("dim 2\nhello\t1 0\nworld\t0.5 -0.5\n").unwrap();
        assert_eq!(t.get("hello"), Some(&[1.0, 0.0][..]));
        assert!(EmbeddingTable::parse("dim 2\nx\t1\n").is_err());
        assert!(EmbeddingTable::parse("dimension 2\n").is_err());
        let strict = TableEncoder::strict(t.clone());
        assert!(matches!(strict.encode("other"), Err(ContextError::MissingEmbedding(_))));
        let loose = TableEncoder::with_fallback(t);
        assert_eq!(loose.encode("other").unwrap(), HashingEncoder::new(2).embed("other"));
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        assert!(check_lambda(1.5).is_err());
        assert!(check_lambda(-0.1).is_err());
        assert!(check_lambda(0.0).is_ok());
    }

    #[test]
    fn single_connecting_triplet_is_returned() {
        let kg = KnowledgeGraph::parse_triples("dog\tAtLocation\tkennel").unwrap();
        let templates = TemplateTable::parse("AtLocation\t{head} is located at {tail}").unwrap();
        let stats = kg.relation_stats(RelfMode::Frequency);
        let enc = HashingEncoder::default();
        let b = ContextBuilder::new(&kg, &templates, &enc, &stats, ContextConfig::default()).unwrap();
        let ctx = b.build("where does a dog sleep?", "kennel").unwrap();
        assert_eq!(ctx.triplets.len(), 1);
        assert_eq!(ctx.triplets[0].sentence, "dog is located at kennel");
        assert_eq!(ctx.triplets[0].relf, 1.0);
        let empty = b.build("what is this?", "kennel").unwrap();
        assert!(empty.triplets.is_empty());
        assert_eq!(empty.to_records(), "");
    }
}
