//! Full-model logits against a loop-based re-implementation that shares no
//! code with the tape: message passing is written per edge, attention per
//! score, and every parameter is read back by name.

use fuseqa_core::model::{FusionMode, FusionModel, GraphEdge, GraphInput, ModelConfig, ModelInput};
use fuseqa_core::tensor::{Tape, Tensor, GELU_COEFF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
struct M {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl M {
    fn new(r: usize, c: usize) -> Self {
        Self { r, c, d: vec![0.0; r * c] }
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.d[i * self.c + j] = v;
    }
    fn mm(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut out = M::new(self.r, o.c);
        for i in 0..self.r {
            for j in 0..o.c {
                let mut s = 0.0;
                for k in 0..self.c {
                    s += self.at(i, k) * o.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }
    fn plus(&self, o: &M) -> M {
        M { r: self.r, c: self.c, d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect() }
    }
    fn row(&self, i: usize) -> M {
        M { r: 1, c: self.c, d: self.d[i * self.c..(i + 1) * self.c].to_vec() }
    }
    fn cols(&self, start: usize, len: usize) -> M {
        let mut out = M::new(self.r, len);
        for i in 0..self.r {
            for j in 0..len {
                out.set(i, j, self.at(i, start + j));
            }
        }
        out
    }
}

struct Weights<'a>(&'a FusionModel);

impl Weights<'_> {
    fn get(&self, name: &str) -> M {
        let p = self.0.params().by_name(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let s = p.tensor.shape();
        let (r, c) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
        M { r, c, d: p.tensor.data().to_vec() }
    }
}

fn layer_norm(x: &M, w: &Weights<'_>, prefix: &str) -> M {
    let (g, b) = (w.get(&format!("{prefix}.gain")), w.get(&format!("{prefix}.bias")));
    let mut out = M::new(x.r, x.c);
    for i in 0..x.r {
        let row = &x.d[i * x.c..(i + 1) * x.c];
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
        for j in 0..x.c {
            out.set(i, j, (row[j] - mean) / (var + 1e-5).sqrt() * g.d[j] + b.d[j]);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_COEFF * (x + 0.044715 * x.powi(3))).tanh())
}

fn bias(x: &M, b: &M) -> M {
    let mut out = x.clone();
    for i in 0..x.r {
        for j in 0..x.c {
            out.set(i, j, x.at(i, j) + b.d[j]);
        }
    }
    out
}

fn mlp(x: &M, w: &Weights<'_>, prefix: &str) -> M {
    let mut a = bias(&x.mm(&w.get(&format!("{prefix}.w1"))), &w.get(&format!("{prefix}.b1")));
    a.d.iter_mut().for_each(|v| *v = gelu(*v));
    bias(&a.mm(&w.get(&format!("{prefix}.w2"))), &w.get(&format!("{prefix}.b2")))
}

/// `softmax(scale · q kᵀ) v` with one explicit loop per score.
fn attend(q: &M, k: &M, v: &M, scale: f64) -> M {
    let mut out = M::new(q.r, v.c);
    for i in 0..q.r {
        let scores: Vec<f64> =
            (0..k.r).map(|j| scale * (0..q.c).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>()).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for (j, s) in scores.iter().enumerate() {
            let a = (s - max).exp() / z;
            for c in 0..v.c {
                out.set(i, c, out.at(i, c) + a * v.at(j, c));
            }
        }
    }
    out
}

fn lm_layer(h: &M, w: &Weights<'_>, l: usize) -> M {
    let p = format!("layer{l}.lm");
    let x = layer_norm(h, w, &format!("{p}.ln1"));
    let q = x.mm(&w.get(&format!("{p}.attn.wq")));
    let k = x.mm(&w.get(&format!("{p}.attn.wk")));
    let v = x.mm(&w.get(&format!("{p}.attn.wv")));
    let o = attend(&q, &k, &v, 1.0 / (h.c as f64).sqrt()).mm(&w.get(&format!("{p}.attn.wo")));
    let h1 = h.plus(&o);
    h1.plus(&mlp(&layer_norm(&h1, w, &format!("{p}.ln2")), w, &format!("{p}.ffn")))
}

/// Mean over the node itself and every incident edge, each edge read in its
/// own direction with its own relation weight.
fn gnn_layer(e: &M, edges: &[(usize, usize, usize)], w: &Weights<'_>, l: usize) -> M {
    let p = format!("layer{l}.gnn");
    let mut deg = vec![1.0; e.r];
    for &(s, _, d) in edges {
        deg[s] += 1.0;
        deg[d] += 1.0;
    }
    let self_w = w.get(&format!("{p}.self"));
    let mut out = M::new(e.r, e.c);
    for v in 0..e.r {
        let mut acc = e.row(v).mm(&self_w);
        for &(s, b, d) in edges {
            if d == v {
                acc = acc.plus(&e.row(s).mm(&w.get(&format!("{p}.rel{b}"))));
            }
            if s == v {
                acc = acc.plus(&e.row(d).mm(&w.get(&format!("{p}.rel{b}_inv"))));
            }
        }
        for c in 0..e.c {
            out.set(v, c, e.at(v, c) + acc.d[c] / deg[v]);
        }
    }
    layer_norm(&out, w, &format!("{p}.ln"))
}

fn direction(x: &M, y: &M, heads: usize, w: &Weights<'_>, prefix: &str) -> M {
    let q = x.mm(&w.get(&format!("{prefix}.wq")));
    let k = y.mm(&w.get(&format!("{prefix}.wk")));
    let v = y.mm(&w.get(&format!("{prefix}.wv")));
    let dh = q.c / heads;
    let mut cat = M::new(x.r, q.c);
    for h in 0..heads {
        let o = attend(&q.cols(h * dh, dh), &k.cols(h * dh, dh), &v.cols(h * dh, dh), 1.0);
        for i in 0..x.r {
            for j in 0..dh {
                cat.set(i, h * dh + j, o.at(i, j));
            }
        }
    }
    let pre = x.plus(&cat.mm(&w.get(&format!("{prefix}.wo"))));
    mlp(&layer_norm(&pre, w, &format!("{prefix}.ln")), w, &format!("{prefix}.mlp"))
}

fn oracle_logit(model: &FusionModel, input: &ModelInput) -> f64 {
    let cfg = model.config();
    let w = Weights(model);
    let g = &input.graph;
    let mode = cfg.fusion_mode;
    let inter = mode == FusionMode::Interaction || (mode == FusionMode::CrossAttention && cfg.keep_interaction_node);
    let tok = w.get("embed.tokens");
    let pos = w.get("embed.positions");
    let mut h = M::new(input.tokens.len(), cfg.d_lm);
    for (i, &t) in input.tokens.iter().enumerate() {
        let src = if i == 0 && inter { w.get("embed.interaction_token") } else { tok.row(t) };
        for c in 0..cfg.d_lm {
            h.set(i, c, src.d[c] + pos.at(i, c));
        }
    }
    let m = g.num_nodes();
    let uses_graph = mode != FusionMode::None;
    let off = usize::from(inter);
    let mut e = M::new(m + off, cfg.d_gnn);
    let mut edges: Vec<(usize, usize, usize)> = Vec::new();
    if uses_graph {
        let flags = w.get("embed.node_flags");
        if inter {
            e.d[..cfg.d_gnn].copy_from_slice(&w.get("embed.interaction_node").d);
        }
        for v in 0..m {
            for c in 0..cfg.d_gnn {
                let mut x = g.node_init.as_ref().unwrap().at(v, c);
                if g.question[v] {
                    x += flags.at(0, c);
                }
                if g.answer[v] {
                    x += flags.at(1, c);
                }
                e.set(v + off, c, x);
            }
        }
        let r = model.num_relations();
        edges = g.edges.iter().map(|x| (x.src + off, x.relation.min(r), x.dst + off)).collect();
        if inter {
            edges.extend((0..m).filter(|&v| g.question[v] || g.answer[v]).map(|v| (0, r + 1, v + 1)));
        }
    }
    for l in 0..cfg.layers {
        h = lm_layer(&h, &w, l);
        if !uses_graph || e.r == 0 {
            continue;
        }
        e = gnn_layer(&e, &edges, &w, l);
        if inter {
            let mut x = M::new(1, cfg.d_lm + cfg.d_gnn);
            x.d[..cfg.d_lm].copy_from_slice(&h.d[..cfg.d_lm]);
            x.d[cfg.d_lm..].copy_from_slice(&e.d[..cfg.d_gnn]);
            let y = x.plus(&mlp(&x, &w, &format!("layer{l}.interaction.mix")));
            h.d[..cfg.d_lm].copy_from_slice(&y.d[..cfg.d_lm]);
            e.d[..cfg.d_gnn].copy_from_slice(&y.d[cfg.d_lm..]);
        }
        if mode == FusionMode::CrossAttention {
            let h2 = direction(&h, &e, cfg.n_heads, &w, &format!("layer{l}.cross.t2g"));
            let e2 = direction(&e, &h, cfg.n_heads, &w, &format!("layer{l}.cross.g2t"));
            (h, e) = (h2, e2);
        }
    }
    let mut feat = h.row(0).d;
    if uses_graph {
        let mut mean = vec![0.0; cfg.d_gnn];
        for v in 0..e.r {
            for (c, x) in mean.iter_mut().enumerate() {
                *x += e.at(v, c) / e.r as f64;
            }
        }
        feat.extend(mean);
    }
    let hw = w.get("head.w");
    feat.iter().zip(&hw.d).map(|(a, b)| a * b).sum::<f64>() + w.get("head.b").d[0]
}

fn random_model(cfg: ModelConfig, relations: usize, rng: &mut ChaCha8Rng) -> FusionModel {
    let mut model = FusionModel::new(cfg, relations).unwrap();
    for p in model.params_mut().iter_mut() {
        for x in p.tensor.data_mut() {
            *x = rng.gen_range(-0.6..0.6);
        }
    }
    model
}

fn random_input(cfg: &ModelConfig, relations: usize, n: usize, m: usize, rng: &mut ChaCha8Rng) -> ModelInput {
    let tokens = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let init: Vec<f64> = (0..m * cfg.d_gnn).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let edges = (0..rng.gen_range(0..=2 * m))
        .map(|_| GraphEdge { src: rng.gen_range(0..m), relation: rng.gen_range(0..=relations), dst: rng.gen_range(0..m) })
        .collect();
    ModelInput {
        tokens,
        graph: GraphInput {
            entities: Vec::new(),
            node_init: (m > 0).then(|| Tensor::new(&[m, cfg.d_gnn], init).unwrap()),
            question: (0..m).map(|_| rng.gen_bool(0.5)).collect(),
            answer: (0..m).map(|_| rng.gen_bool(0.4)).collect(),
            edges,
        },
    }
}

fn tape_logit(model: &FusionModel, input: &ModelInput) -> f64 {
    let mut t = Tape::new();
    let p = model.bind(&mut t);
    let tr = model.forward(&mut t, &p, input).unwrap();
    t.value(tr.logit).data()[0]
}

fn check(mode: FusionMode, heads: usize, keep: bool, d_lm: usize, d_gnn: usize, n: usize, m: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        layers: 2,
        d_lm,
        d_gnn,
        n_heads: heads,
        fusion_mode: mode,
        vocab_size: 11,
        max_seq_len: 6,
        seed,
        keep_interaction_node: keep,
    };
    let relations = 3;
    let model = random_model(cfg.clone(), relations, &mut rng);
    for _ in 0..5 {
        let input = random_input(&cfg, relations, n, m, &mut rng);
        let (got, want) = (tape_logit(&model, &input), oracle_logit(&model, &input));
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{mode} heads={heads} keep={keep}: {got} vs {want}");
    }
}

#[test]
fn cross_attention_matches_dense_oracle() {
    check(FusionMode::CrossAttention, 1, false, 8, 8, 3, 4, 1);
    check(FusionMode::CrossAttention, 4, false, 8, 8, 3, 4, 2);
    check(FusionMode::CrossAttention, 2, false, 6, 4, 3, 4, 3);
}

#[test]
fn cross_attention_with_interaction_node_matches_dense_oracle() {
    check(FusionMode::CrossAttention, 4, true, 8, 8, 3, 4, 4);
}

#[test]
fn baselines_match_dense_oracle() {
    check(FusionMode::None, 1, false, 8, 8, 3, 4, 5);
    check(FusionMode::Naive, 1, false, 8, 6, 3, 4, 6);
    check(FusionMode::Interaction, 1, false, 8, 6, 3, 4, 7);
}

#[test]
fn two_tokens_two_nodes_match_dense_oracle() {
    for mode in FusionMode::ALL {
        check(mode, 1, false, 4, 4, 2, 2, 8);
    }
}

#[test]
fn empty_graph_matches_dense_oracle() {
    for mode in FusionMode::ALL {
        check(mode, 1, false, 4, 4, 3, 0, 9);
    }
}
