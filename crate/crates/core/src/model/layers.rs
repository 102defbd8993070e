//! Building blocks of the fusion stack. Each block registers its
//! parameters in a [`ParamStore`] under a name prefix and runs against the
//! [`Bound`] handles of that store on a tape.
//!
//! Weights use the row-vector convention: a `d_in × d_out` matrix maps a
//! row `x` to `x·W`.

use crate::tensor::{seeded_init, Bound, InitScheme, ParamId, ParamStore, Tape, Tensor, TensorError, Var, LAYER_NORM_EPS};
use crate::text::fnv1a;

use super::graph::GraphStructure;

/// Registers parameters with per-name seeds derived from a base seed.
pub(crate) struct Registrar<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl Registrar<'_> {
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, TensorError> {
        let seed = self.seed ^ fnv1a(name.as_bytes());
        self.store.add(name, seeded_init(shape, seed, InitScheme::UniformScaled))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, TensorError> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, TensorError> {
        self.store.add(name, Tensor::filled(shape, 1.0))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub(crate) fn new(r: &mut Registrar<'_>, prefix: &str, d: usize) -> Result<Self, TensorError> {
        Ok(Self { gain: r.ones(&format!("{prefix}.gain"), &[d])?, bias: r.zeros(&format!("{prefix}.bias"), &[d])? })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        t.layer_norm(x, p[self.gain], p[self.bias], LAYER_NORM_EPS)
    }
}

/// `gelu(x·W1 + b1)·W2 + b2` with hidden width `2·d`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub(crate) fn new(r: &mut Registrar<'_>, prefix: &str, d_in: usize, d_out: usize) -> Result<Self, TensorError> {
        let hidden = 2 * d_in;
        Ok(Self {
            w1: r.weight(&format!("{prefix}.w1"), &[d_in, hidden])?,
            b1: r.zeros(&format!("{prefix}.b1"), &[hidden])?,
            w2: r.weight(&format!("{prefix}.w2"), &[hidden, d_out])?,
            b2: r.zeros(&format!("{prefix}.b2"), &[d_out])?,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let a = t.matmul(x, p[self.w1])?;
        let a = t.add_row_bias(a, p[self.b1])?;
        let a = t.gelu(a);
        let y = t.matmul(a, p[self.w2])?;
        t.add_row_bias(y, p[self.b2])
    }
}

/// Pre-norm transformer encoder block with single-head scaled dot-product
/// self-attention: `h + Attn(LN(h))`, then `+ FFN(LN(·))`.
#[derive(Debug, Clone)]
pub struct LmLayer {
    pub ln1: LayerNormParams,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2: LayerNormParams,
    pub ffn: Mlp,
    d: usize,
}

impl LmLayer {
    pub(crate) fn new(r: &mut Registrar<'_>, prefix: &str, d: usize) -> Result<Self, TensorError> {
        Ok(Self {
            ln1: LayerNormParams::new(r, &format!("{prefix}.ln1"), d)?,
            wq: r.weight(&format!("{prefix}.attn.wq"), &[d, d])?,
            wk: r.weight(&format!("{prefix}.attn.wk"), &[d, d])?,
            wv: r.weight(&format!("{prefix}.attn.wv"), &[d, d])?,
            wo: r.weight(&format!("{prefix}.attn.wo"), &[d, d])?,
            ln2: LayerNormParams::new(r, &format!("{prefix}.ln2"), d)?,
            ffn: Mlp::new(r, &format!("{prefix}.ffn"), d, d)?,
            d,
        })
    }

    /// Returns the block output and the `n×n` attention weights.
    pub fn forward_traced(&self, t: &mut Tape, p: &Bound, h: Var) -> Result<(Var, Var), TensorError> {
        let x = self.ln1.forward(t, p, h)?;
        let q = t.matmul(x, p[self.wq])?;
        let k = t.matmul(x, p[self.wk])?;
        let v = t.matmul(x, p[self.wv])?;
        let kt = t.transpose(k)?;
        let s = t.matmul(q, kt)?;
        let s = t.mul_scalar(s, 1.0 / (self.d as f64).sqrt());
        let a = t.softmax_rows(s)?;
        let o = t.matmul(a, v)?;
        let o = t.matmul(o, p[self.wo])?;
        let h1 = t.add(h, o)?;
        let x2 = self.ln2.forward(t, p, h1)?;
        let f = self.ffn.forward(t, p, x2)?;
        Ok((t.add(h1, f)?, a))
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, h: Var) -> Result<Var, TensorError> {
        Ok(self.forward_traced(t, p, h)?.0)
    }
}

/// Relation-typed mean-aggregation message passing.
///
/// Node `v` receives `e_u·W_r` for every edge `u -r-> v`, `e_u·W'_r` for
/// every edge `v -r-> u` (inverse direction) and `e_v·W_self`. The messages
/// are averaged and the result is `LN(e_v + mean)`.
#[derive(Debug, Clone)]
pub struct GnnLayer {
    pub forward_w: Vec<ParamId>,
    pub inverse_w: Vec<ParamId>,
    pub self_w: ParamId,
    pub ln: LayerNormParams,
}

impl GnnLayer {
    pub(crate) fn new(r: &mut Registrar<'_>, prefix: &str, d: usize, buckets: usize) -> Result<Self, TensorError> {
        let forward_w = (0..buckets).map(|b| r.weight(&format!("{prefix}.rel{b}"), &[d, d])).collect::<Result<_, _>>()?;
        let inverse_w =
            (0..buckets).map(|b| r.weight(&format!("{prefix}.rel{b}_inv"), &[d, d])).collect::<Result<_, _>>()?;
        Ok(Self {
            forward_w,
            inverse_w,
            self_w: r.weight(&format!("{prefix}.self"), &[d, d])?,
            ln: LayerNormParams::new(r, &format!("{prefix}.ln"), d)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, e: Var, g: &GraphStructure) -> Result<Var, TensorError> {
        let (m, _) = t.value(e).dims2("gnn")?;
        if m != g.num_nodes {
            return Err(TensorError::Invalid {
                op: "gnn",
                msg: format!("{m} node rows for a graph with {} nodes", g.num_nodes),
            });
        }
        let self_mix = t.leaf(g.self_matrix());
        let msg = t.matmul(e, p[self.self_w])?;
        let mut agg = t.matmul(self_mix, msg)?;
        for (bucket, inverse, mix) in g.mixing_matrices() {
            let w = if inverse { self.inverse_w[bucket] } else { self.forward_w[bucket] };
            let mix = t.leaf(mix);
            let msg = t.matmul(e, p[w])?;
            let part = t.matmul(mix, msg)?;
            agg = t.add(agg, part)?;
        }
        let sum = t.add(e, agg)?;
        self.ln.forward(t, p, sum)
    }
}

/// One direction of cross-modal attention: rows of `queries` attend to all
/// rows of `keys`.
///
/// Per head `k`: `a = (x·Wq_k)(y·Wk_k)ᵀ`, softmax over key rows, head output
/// `softmax(a)·(y·Wv)_k`. Heads are concatenated, projected by `Wo` and
/// added to the queries; the fused rows are then `MLP(LN(·))`.
#[derive(Debug, Clone)]
pub struct AttentionDirection {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln: LayerNormParams,
    pub mlp: Mlp,
    heads: usize,
    d_query: usize,
}

/// Intermediate values of one attention direction.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// Per-head `n_query × n_key` attention weights.
    pub weights: Vec<Var>,
    /// Queries plus attended values, before `MLP(LN(·))`.
    pub pre_mlp: Var,
    pub output: Var,
}

impl AttentionDirection {
    pub(crate) fn new(
        r: &mut Registrar<'_>,
        prefix: &str,
        d_query: usize,
        d_key: usize,
        heads: usize,
    ) -> Result<Self, TensorError> {
        if heads == 0 || !d_query.is_multiple_of(heads) {
            return Err(TensorError::Invalid {
                op: "cross_attention",
                msg: format!("width {d_query} is not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            wq: r.weight(&format!("{prefix}.wq"), &[d_query, d_query])?,
            wk: r.weight(&format!("{prefix}.wk"), &[d_key, d_query])?,
            wv: r.weight(&format!("{prefix}.wv"), &[d_key, d_query])?,
            wo: r.weight(&format!("{prefix}.wo"), &[d_query, d_query])?,
            ln: LayerNormParams::new(r, &format!("{prefix}.ln"), d_query)?,
            mlp: Mlp::new(r, &format!("{prefix}.mlp"), d_query, d_query)?,
            heads,
            d_query,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var, y: Var) -> Result<AttentionTrace, TensorError> {
        let dh = self.d_query / self.heads;
        let q = t.matmul(x, p[self.wq])?;
        let k = t.matmul(y, p[self.wk])?;
        let v = t.matmul(y, p[self.wv])?;
        let mut weights = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (t.slice_cols(q, h * dh, dh)?, t.slice_cols(k, h * dh, dh)?, t.slice_cols(v, h * dh, dh)?)
            };
            let kt = t.transpose(kh)?;
            let scores = t.matmul(qh, kt)?;
            let a = t.softmax_rows(scores)?;
            outs.push(t.matmul(a, vh)?);
            weights.push(a);
        }
        let o = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs)? };
        let o = t.matmul(o, p[self.wo])?;
        let pre_mlp = t.add(x, o)?;
        let normed = self.ln.forward(t, p, pre_mlp)?;
        let output = self.mlp.forward(t, p, normed)?;
        Ok(AttentionTrace { weights, pre_mlp, output })
    }
}

/// Text→graph and graph→text attention. Both directions read the same
/// pre-fusion states, so their order does not matter.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub text_to_graph: AttentionDirection,
    pub graph_to_text: AttentionDirection,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionTrace {
    pub text: AttentionTrace,
    pub graph: AttentionTrace,
}

impl CrossAttention {
    pub(crate) fn new(
        r: &mut Registrar<'_>,
        prefix: &str,
        d_lm: usize,
        d_gnn: usize,
        heads: usize,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            text_to_graph: AttentionDirection::new(r, &format!("{prefix}.t2g"), d_lm, d_gnn, heads)?,
            graph_to_text: AttentionDirection::new(r, &format!("{prefix}.g2t"), d_gnn, d_lm, heads)?,
        })
    }

    pub fn forward_traced(&self, t: &mut Tape, p: &Bound, h: Var, e: Var) -> Result<CrossAttentionTrace, TensorError> {
        let text = self.text_to_graph.forward(t, p, h, e)?;
        let graph = self.graph_to_text.forward(t, p, e, h)?;
        Ok(CrossAttentionTrace { text, graph })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, h: Var, e: Var) -> Result<(Var, Var), TensorError> {
        let tr = self.forward_traced(t, p, h, e)?;
        Ok((tr.text.output, tr.graph.output))
    }
}

/// Single-token/single-node exchange: `[h_0; e_0] + MLP([h_0; e_0])` is
/// split back into positions 0 of both sides; other rows pass through.
#[derive(Debug, Clone)]
pub struct InteractionExchange {
    pub mlp: Mlp,
    d_lm: usize,
    d_gnn: usize,
}

impl InteractionExchange {
    pub(crate) fn new(r: &mut Registrar<'_>, prefix: &str, d_lm: usize, d_gnn: usize) -> Result<Self, TensorError> {
        Ok(Self { mlp: Mlp::new(r, &format!("{prefix}.mix"), d_lm + d_gnn, d_lm + d_gnn)?, d_lm, d_gnn })
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, h: Var, e: Var) -> Result<(Var, Var), TensorError> {
        let (n, dl) = t.value(h).dims2("interaction")?;
        let (m, dg) = t.value(e).dims2("interaction")?;
        if dl != self.d_lm || dg != self.d_gnn {
            return Err(TensorError::Invalid {
                op: "interaction",
                msg: format!("widths ({dl}, {dg}) do not match ({}, {})", self.d_lm, self.d_gnn),
            });
        }
        let h0 = t.slice_rows(h, 0, 1)?;
        let e0 = t.slice_rows(e, 0, 1)?;
        let x = t.concat_cols(&[h0, e0])?;
        let mixed = self.mlp.forward(t, p, x)?;
        let y = t.add(x, mixed)?;
        let h0 = t.slice_cols(y, 0, dl)?;
        let e0 = t.slice_cols(y, dl, dg)?;
        let h = if n > 1 {
            let rest = t.slice_rows(h, 1, n - 1)?;
            t.concat_rows(&[h0, rest])?
        } else {
            h0
        };
        let e = if m > 1 {
            let rest = t.slice_rows(e, 1, m - 1)?;
            t.concat_rows(&[e0, rest])?
        } else {
            e0
        };
        Ok((h, e))
    }
}
