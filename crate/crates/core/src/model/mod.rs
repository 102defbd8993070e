//! Layered text and graph encoders with selectable cross-modal fusion and a
//! single-logit answer head.
//!
//! Per layer the text side runs a transformer block and the graph side a
//! relational message-passing step; the two are then combined according to
//! [`FusionMode`].

mod checkpoint;
mod graph;
mod layers;
mod tokenizer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextError;
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, to_checkpoint_text};
pub use graph::{Buckets, GraphEdge, GraphInput, GraphStructure};
pub use layers::{
    AttentionDirection, AttentionTrace, CrossAttention, CrossAttentionTrace, GnnLayer, InteractionExchange,
    LayerNormParams, LmLayer, Mlp,
};
pub use tokenizer::{Tokenizer, BOS, RESERVED, SEP};

use layers::Registrar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error("checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Text only; the graph is never read.
    None,
    /// Both encoders run independently; pooled node states join at the head.
    Naive,
    /// One text token and one graph node exchange information each layer.
    Interaction,
    /// Every token attends to every node and vice versa each layer.
    CrossAttention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] =
        [FusionMode::None, FusionMode::Naive, FusionMode::Interaction, FusionMode::CrossAttention];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Naive => "naive",
            FusionMode::Interaction => "interaction",
            FusionMode::CrossAttention => "cross_attention",
        }
    }

    pub fn uses_graph(self) -> bool {
        self != FusionMode::None
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown fusion mode {s:?} (expected none, naive, interaction or cross_attention)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of stacked layers on each side.
    pub layers: usize,
    pub d_lm: usize,
    pub d_gnn: usize,
    /// Cross-attention heads; must divide `d_lm` and `d_gnn` in
    /// cross-attention mode.
    pub n_heads: usize,
    pub fusion_mode: FusionMode,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Adds the interaction token and node to cross-attention mode.
    pub keep_interaction_node: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_lm: 16,
            d_gnn: 16,
            n_heads: 1,
            fusion_mode: FusionMode::CrossAttention,
            vocab_size: 512,
            max_seq_len: 32,
            seed: 0,
            keep_interaction_node: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.d_lm == 0 || self.d_gnn == 0 || self.n_heads == 0 {
            return fail("layers, d_lm, d_gnn and n_heads must be positive".into());
        }
        if self.vocab_size <= RESERVED {
            return fail(format!("vocab_size must exceed {RESERVED}"));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        if self.fusion_mode == FusionMode::CrossAttention
            && (!self.d_lm.is_multiple_of(self.n_heads) || !self.d_gnn.is_multiple_of(self.n_heads))
        {
            return fail(format!("d_lm={} and d_gnn={} must be divisible by n_heads={}", self.d_lm, self.d_gnn, self.n_heads));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.vocab_size).expect("validated vocab size")
    }

    fn has_interaction(&self) -> bool {
        match self.fusion_mode {
            FusionMode::Interaction => true,
            FusionMode::CrossAttention => self.keep_interaction_node,
            FusionMode::None | FusionMode::Naive => false,
        }
    }
}

/// One (question, choice) pair ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<usize>,
    pub graph: GraphInput,
}

#[derive(Debug, Clone)]
struct Embeddings {
    tokens: ParamId,
    positions: ParamId,
    /// Row 0 is added to question nodes, row 1 to answer nodes.
    node_flags: Option<ParamId>,
    interaction_token: Option<ParamId>,
    interaction_node: Option<ParamId>,
}

/// Values recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `1 × 1`.
    pub logit: Var,
    /// Final text states, `n × d_lm`.
    pub text: Var,
    /// Final node states; `None` when the graph side did not run or is empty.
    pub nodes: Option<Var>,
    /// Self-attention weights per layer.
    pub self_attention: Vec<Var>,
    /// Cross-attention intermediates per layer where fusion ran.
    pub cross: Vec<CrossAttentionTrace>,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    config: ModelConfig,
    buckets: Buckets,
    store: ParamStore,
    emb: Embeddings,
    lm: Vec<LmLayer>,
    gnn: Vec<GnnLayer>,
    cross: Vec<CrossAttention>,
    exchange: Vec<InteractionExchange>,
    head_w: ParamId,
    head_b: ParamId,
}

impl FusionModel {
    /// Fresh model with seeded weights for a graph with `num_relations`
    /// relation types.
    pub fn new(config: ModelConfig, num_relations: usize) -> Result<Self, ModelError> {
        config.validate()?;
        let buckets = Buckets { num_relations };
        let mut store = ParamStore::new();
        let mut r = Registrar { store: &mut store, seed: config.seed };
        let (dl, dg) = (config.d_lm, config.d_gnn);
        let graph = config.fusion_mode.uses_graph();
        let inter = config.has_interaction();
        let emb = Embeddings {
            tokens: r.weight("embed.tokens", &[config.vocab_size, dl])?,
            positions: r.weight("embed.positions", &[config.max_seq_len, dl])?,
            node_flags: graph.then(|| r.weight("embed.node_flags", &[2, dg])).transpose()?,
            interaction_token: inter.then(|| r.weight("embed.interaction_token", &[1, dl])).transpose()?,
            interaction_node: inter.then(|| r.weight("embed.interaction_node", &[1, dg])).transpose()?,
        };
        let mut lm = Vec::new();
        let mut gnn = Vec::new();
        let mut cross = Vec::new();
        let mut exchange = Vec::new();
        for l in 0..config.layers {
            lm.push(LmLayer::new(&mut r, &format!("layer{l}.lm"), dl)?);
            if graph {
                gnn.push(GnnLayer::new(&mut r, &format!("layer{l}.gnn"), dg, buckets.count())?);
            }
            if inter {
                exchange.push(InteractionExchange::new(&mut r, &format!("layer{l}.interaction"), dl, dg)?);
            }
            if config.fusion_mode == FusionMode::CrossAttention {
                cross.push(CrossAttention::new(&mut r, &format!("layer{l}.cross"), dl, dg, config.n_heads)?);
            }
        }
        let head_in = if graph { dl + dg } else { dl };
        let head_w = r.weight("head.w", &[head_in, 1])?;
        let head_b = r.zeros("head.b", &[1])?;
        Ok(Self { config, buckets, store, emb, lm, gnn, cross, exchange, head_w, head_b })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_relations(&self) -> usize {
        self.buckets.num_relations
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn lm_layers(&self) -> &[LmLayer] {
        &self.lm
    }

    pub fn gnn_layers(&self) -> &[GnnLayer] {
        &self.gnn
    }

    pub fn cross_layers(&self) -> &[CrossAttention] {
        &self.cross
    }

    pub fn exchange_layers(&self) -> &[InteractionExchange] {
        &self.exchange
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.store.bind(tape)
    }

    fn check_input(&self, input: &ModelInput) -> Result<(), ModelError> {
        let n = input.tokens.len();
        if n == 0 || n > self.config.max_seq_len {
            return Err(ModelError::Input(format!("{n} tokens; expected 1..={}", self.config.max_seq_len)));
        }
        if let Some(&bad) = input.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::Input(format!("token id {bad} >= vocab_size {}", self.config.vocab_size)));
        }
        let g = &input.graph;
        let m = g.num_nodes();
        if g.answer.len() != m {
            return Err(ModelError::Input("question and answer flag lengths differ".into()));
        }
        match &g.node_init {
            None if m > 0 => return Err(ModelError::Input(format!("{m} nodes but no node features"))),
            Some(t) if t.shape() != [m, self.config.d_gnn] => {
                return Err(ModelError::Input(format!(
                    "node features have shape {:?}, expected [{m}, {}]",
                    t.shape(),
                    self.config.d_gnn
                )))
            }
            _ => {}
        }
        if let Some(e) = g.edges.iter().find(|e| e.src >= m || e.dst >= m) {
            return Err(ModelError::Input(format!("edge {e:?} references a node outside 0..{m}")));
        }
        Ok(())
    }

    fn embed_text(&self, t: &mut Tape, p: &Bound, tokens: &[usize]) -> Result<Var, ModelError> {
        let n = tokens.len();
        let tok = t.gather_rows(p[self.emb.tokens], tokens)?;
        let pos = t.slice_rows(p[self.emb.positions], 0, n)?;
        let h = t.add(tok, pos)?;
        let Some(it) = self.emb.interaction_token else { return Ok(h) };
        let pos0 = t.slice_rows(p[self.emb.positions], 0, 1)?;
        let first = t.add(p[it], pos0)?;
        if n == 1 {
            return Ok(first);
        }
        let rest = t.slice_rows(h, 1, n - 1)?;
        Ok(t.concat_rows(&[first, rest])?)
    }

    /// Initial node states and the propagation structure. With an
    /// interaction node it becomes node 0 and links to every seed node.
    fn embed_graph(
        &self,
        t: &mut Tape,
        p: &Bound,
        g: &GraphInput,
    ) -> Result<Option<(Var, GraphStructure)>, ModelError> {
        let m = g.num_nodes();
        let offset = usize::from(self.emb.interaction_node.is_some());
        let mut rows = Vec::new();
        if let Some(id) = self.emb.interaction_node {
            rows.push(p[id]);
        }
        if let (Some(init), Some(flags)) = (&g.node_init, self.emb.node_flags) {
            let mut f = Tensor::zeros(&[m, 2]);
            for v in 0..m {
                f.data_mut()[2 * v] = f64::from(u8::from(g.question[v]));
                f.data_mut()[2 * v + 1] = f64::from(u8::from(g.answer[v]));
            }
            let f = t.leaf(f);
            let flag_part = t.matmul(f, p[flags])?;
            let init = t.leaf(init.clone());
            rows.push(t.add(init, flag_part)?);
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let e = if rows.len() == 1 { rows[0] } else { t.concat_rows(&rows)? };
        let mut edges: Vec<(usize, usize, usize)> =
            g.edges.iter().map(|e| (e.src + offset, self.buckets.of(e.relation), e.dst + offset)).collect();
        if offset == 1 {
            let link = self.buckets.interaction();
            edges.extend((0..m).filter(|&v| g.question[v] || g.answer[v]).map(|v| (0, link, v + 1)));
        }
        Ok(Some((e, GraphStructure::new(m + offset, edges))))
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, input: &ModelInput) -> Result<ForwardTrace, ModelError> {
        self.check_input(input)?;
        let mode = self.config.fusion_mode;
        let mut h = self.embed_text(t, p, &input.tokens)?;
        let mut graph = if mode.uses_graph() { self.embed_graph(t, p, &input.graph)? } else { None };
        let mut self_attention = Vec::with_capacity(self.lm.len());
        let mut cross = Vec::new();
        for l in 0..self.config.layers {
            let (h_next, a) = self.lm[l].forward_traced(t, p, h)?;
            h = h_next;
            self_attention.push(a);
            let Some((e, structure)) = graph.as_mut() else { continue };
            *e = self.gnn[l].forward(t, p, *e, structure)?;
            if let Some(x) = self.exchange.get(l) {
                (h, *e) = x.forward(t, p, h, *e)?;
            }
            if let Some(c) = self.cross.get(l) {
                let tr = c.forward_traced(t, p, h, *e)?;
                (h, *e) = (tr.text.output, tr.graph.output);
                cross.push(tr);
            }
        }
        let nodes = graph.map(|(e, _)| e);
        let h0 = t.slice_rows(h, 0, 1)?;
        let pooled = if mode.uses_graph() {
            let pooled = match nodes {
                Some(e) => t.mean_rows(e)?,
                None => t.leaf(Tensor::zeros(&[1, self.config.d_gnn])),
            };
            t.concat_cols(&[h0, pooled])?
        } else {
            h0
        };
        let z = t.matmul(pooled, p[self.head_w])?;
        let logit = t.add_row_bias(z, p[self.head_b])?;
        Ok(ForwardTrace { logit, text: h, nodes, self_attention, cross })
    }

    /// Logits of all choices as a `1 × c` row.
    pub fn choice_logits(&self, t: &mut Tape, p: &Bound, inputs: &[ModelInput]) -> Result<Var, ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::Input("no choices".into()));
        }
        let logits = inputs.iter().map(|x| Ok(self.forward(t, p, x)?.logit)).collect::<Result<Vec<_>, ModelError>>()?;
        Ok(if logits.len() == 1 { logits[0] } else { t.concat_cols(&logits)? })
    }

    /// Cross-entropy of the choice logits against `answer`; returns
    /// `(loss, logits)`.
    pub fn question_loss(
        &self,
        t: &mut Tape,
        p: &Bound,
        inputs: &[ModelInput],
        answer: usize,
    ) -> Result<(Var, Var), ModelError> {
        let logits = self.choice_logits(t, p, inputs)?;
        Ok((t.cross_entropy(logits, answer)?, logits))
    }

    /// One logit per choice, evaluated without gradients.
    pub fn score_candidates(&self, inputs: &[ModelInput]) -> Result<Vec<f64>, ModelError> {
        let mut t = Tape::new();
        let p = self.bind(&mut t);
        let logits = self.choice_logits(&mut t, &p, inputs)?;
        Ok(t.value(logits).data().to_vec())
    }

    /// Builds the token sequence for a (question, choice) pair.
    pub fn encode_pair(&self, question: &str, choice: &str) -> Vec<usize> {
        self.config.tokenizer().encode_pair(question, choice, self.config.max_seq_len)
    }
}

/// Index of the largest value; ties go to the lowest index. NaN never wins.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || values[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}
