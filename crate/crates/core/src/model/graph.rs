//! Graph-side model input and the dense propagation matrices derived from it.

use std::collections::{BTreeMap, BTreeSet};

use crate::context::{RetrievedContext, TextEncoder};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::tensor::Tensor;

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct GraphEdge {
    pub src: usize,
    /// Knowledge-graph relation id.
    pub relation: usize,
    pub dst: usize,
}

/// Nodes, typed edges and initial node features of one (question, choice)
/// subgraph. Node `i` has row `i` of `node_init`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub entities: Vec<EntityId>,
    /// `m × d_gnn`; `None` iff there are no nodes.
    pub node_init: Option<Tensor>,
    pub question: Vec<bool>,
    pub answer: Vec<bool>,
    pub edges: Vec<GraphEdge>,
}

impl GraphInput {
    pub fn empty() -> Self {
        Self { entities: Vec::new(), node_init: None, question: Vec::new(), answer: Vec::new(), edges: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.question.len()
    }

    /// Nodes are the grounded seed entities plus every endpoint of the
    /// context triplets, in ascending entity id.
    pub fn from_context(
        ctx: &RetrievedContext,
        kg: &KnowledgeGraph,
        encoder: &dyn TextEncoder,
    ) -> Result<Self, ModelError> {
        let mut set: BTreeSet<EntityId> = ctx.question_entities.union(&ctx.choice_entities).copied().collect();
        for s in &ctx.triplets {
            let t = kg.triplet(s.triplet_id);
            set.insert(t.head);
            set.insert(t.tail);
        }
        let entities: Vec<EntityId> = set.into_iter().collect();
        let index: BTreeMap<EntityId, usize> = entities.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let mut edges: Vec<GraphEdge> = ctx
            .triplets
            .iter()
            .map(|s| {
                let t = kg.triplet(s.triplet_id);
                GraphEdge { src: index[&t.head], relation: t.relation.index(), dst: index[&t.tail] }
            })
            .collect();
        edges.sort_unstable();
        let node_init = if entities.is_empty() {
            None
        } else {
            let d = encoder.dim();
            let mut data = Vec::with_capacity(entities.len() * d);
            for &e in &entities {
                data.extend(encoder.encode(kg.entity_surface(e))?);
            }
            Some(Tensor::new(&[entities.len(), d], data)?)
        };
        Ok(Self {
            question: entities.iter().map(|e| ctx.question_entities.contains(e)).collect(),
            answer: entities.iter().map(|e| ctx.choice_entities.contains(e)).collect(),
            entities,
            node_init,
            edges,
        })
    }

    /// Reorders nodes so that new node `i` is old node `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, ModelError> {
        let m = self.num_nodes();
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(ModelError::Input(format!("not a permutation of {m} nodes")));
        }
        let mut inv = vec![0; m];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let node_init = match &self.node_init {
            None => None,
            Some(t) => {
                let (_, d) = t.dims2("permute")?;
                let data = perm.iter().flat_map(|&old| t.row(old).iter().copied()).collect();
                Some(Tensor::new(&[m, d], data)?)
            }
        };
        Ok(Self {
            entities: perm.iter().map(|&o| self.entities.get(o).copied()).collect::<Option<_>>().unwrap_or_default(),
            node_init,
            question: perm.iter().map(|&o| self.question[o]).collect(),
            answer: perm.iter().map(|&o| self.answer[o]).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| GraphEdge { src: inv[e.src], relation: e.relation, dst: inv[e.dst] })
                .collect(),
        })
    }
}

/// Relation buckets seen by the message-passing layer: one per knowledge
/// graph relation, then a shared bucket for unseen ids, then the bucket for
/// interaction-node edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Buckets {
    pub num_relations: usize,
}

impl Buckets {
    pub fn count(self) -> usize {
        self.num_relations + 2
    }

    pub fn unknown(self) -> usize {
        self.num_relations
    }

    pub fn interaction(self) -> usize {
        self.num_relations + 1
    }

    pub fn of(self, relation: usize) -> usize {
        if relation < self.num_relations {
            relation
        } else {
            self.unknown()
        }
    }
}

/// Bucketed edge list with per-node message counts.
///
/// `deg(v) = 1 + in(v) + out(v)`: the self-loop, one forward message per
/// incoming edge and one inverse message per outgoing edge.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStructure {
    pub num_nodes: usize,
    /// `(src, bucket, dst)`.
    pub edges: Vec<(usize, usize, usize)>,
    pub degree: Vec<usize>,
}

impl GraphStructure {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize, usize)>) -> Self {
        let mut degree = vec![1; num_nodes];
        for &(s, _, d) in &edges {
            degree[d] += 1;
            degree[s] += 1;
        }
        Self { num_nodes, edges, degree }
    }

    pub fn self_matrix(&self) -> Tensor {
        let m = self.num_nodes;
        let mut t = Tensor::zeros(&[m, m]);
        for v in 0..m {
            t.data_mut()[v * m + v] = 1.0 / self.degree[v] as f64;
        }
        t
    }

    /// One `m × m` averaging matrix per `(bucket, inverse)` that occurs, in
    /// ascending key order. Entry `(v, u)` weights the message from `u` to `v`.
    pub fn mixing_matrices(&self) -> Vec<(usize, bool, Tensor)> {
        let m = self.num_nodes;
        let mut out: BTreeMap<(usize, bool), Tensor> = BTreeMap::new();
        for &(s, b, d) in &self.edges {
            let fwd = out.entry((b, false)).or_insert_with(|| Tensor::zeros(&[m, m]));
            fwd.data_mut()[d * m + s] += 1.0 / self.degree[d] as f64;
            let inv = out.entry((b, true)).or_insert_with(|| Tensor::zeros(&[m, m]));
            inv.data_mut()[s * m + d] += 1.0 / self.degree[s] as f64;
        }
        out.into_iter().map(|((b, inv), t)| (b, inv, t)).collect()
    }
}
