//! Gradient checks for every differentiable operation and model block, plus
//! randomized oracle comparisons for the invariants the model and retrieval
//! must satisfy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::num::NonZeroUsize;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context::{combine_score, select_top_k, ScoredTriplet};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::model::{FusionMode, FusionModel, GraphEdge, GraphInput, ModelConfig, ModelError, ModelInput, BOS};
use crate::retrieval::{retrieve_subgraph, SeedSet, Subgraph};
use crate::tensor::{finite_diff_check, Bound, GradCheckError, Tape, Tensor, TensorError, Var, DEFAULT_FD_STEP};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const BLOCK_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub component: String,
    /// Largest observed error or deviation.
    pub value: f64,
    /// The check passes iff `value < limit`, or `value == 0` when `limit == 0`.
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(component: impl Into<String>, value: f64, limit: f64) -> Self {
        let passed = if limit == 0.0 { value == 0.0 } else { value < limit };
        Self { component: component.into(), value, limit, passed }
    }

    fn failed(component: impl Into<String>, why: &str) -> Self {
        log::error!("{why}");
        Self { component: component.into(), value: f64::INFINITY, limit: 0.0, passed: false }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelfCheckReport {
    pub checks: Vec<Check>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_table(&self) -> String {
        let w = self.checks.iter().map(|c| c.component.len()).max().unwrap_or(9).max(9);
        let mut out = format!("{:<w$}  {:>12}  {:>9}  status\n", "component", "max error", "limit");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<w$}  {:>12.3e}  {:>9.0e}  {}",
                c.component,
                c.value,
                c.limit,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("positive shape")
}

/// Values bounded away from zero so kinks are not straddled by the step.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        *v += 0.2f64.copysign(*v);
    }
    t
}

/// `Σ w ⊙ out` with fixed random weights.
fn weighted_sum(t: &mut Tape, out: Var, rng_seed: u64) -> Result<Var, TensorError> {
    let w = random_tensor(t.shape(out), &mut rng(rng_seed));
    let w = t.leaf(w);
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

fn grad_error(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
) -> Result<f64, GradCheckError> {
    let report = finite_diff_check(inputs, DEFAULT_FD_STEP, |t, v| {
        let out = f(t, v)?;
        if t.value(out).len() == 1 {
            Ok(out)
        } else {
            weighted_sum(t, out, 7)
        }
    })?;
    Ok(report.max_rel_error)
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

/// Finite-difference check of each tape operation on random inputs.
pub fn op_gradient_checks(seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    let mut cases: Vec<(&str, Vec<Tensor>, OpFn)> = Vec::new();
    let m34 = |r: &mut ChaCha8Rng| random_tensor(&[3, 4], r);
    cases.push(("matmul", vec![random_tensor(&[4, 5], &mut r), random_tensor(&[5, 3], &mut r)], |t, v| t.matmul(v[0], v[1])));
    cases.push(("transpose", vec![m34(&mut r)], |t, v| t.transpose(v[0])));
    cases.push(("add", vec![m34(&mut r), m34(&mut r)], |t, v| t.add(v[0], v[1])));
    cases.push(("mul", vec![m34(&mut r), m34(&mut r)], |t, v| t.mul(v[0], v[1])));
    cases.push(("add_row_bias", vec![m34(&mut r), random_tensor(&[4], &mut r)], |t, v| t.add_row_bias(v[0], v[1])));
    cases.push(("mul_scalar", vec![m34(&mut r)], |t, v| Ok(t.mul_scalar(v[0], -1.7))));
    cases.push(("relu", vec![away_from_zero(&[3, 4], &mut r)], |t, v| Ok(t.relu(v[0]))));
    cases.push(("gelu", vec![random_tensor(&[3, 4], &mut r)], |t, v| Ok(t.gelu(v[0]))));
    cases.push(("softmax_rows", vec![random_tensor(&[3, 7], &mut r)], |t, v| t.softmax_rows(v[0])));
    cases.push((
        "layer_norm",
        vec![random_tensor(&[3, 5], &mut r), random_tensor(&[5], &mut r), random_tensor(&[5], &mut r)],
        |t, v| t.layer_norm(v[0], v[1], v[2], crate::tensor::LAYER_NORM_EPS),
    ));
    cases.push(("cross_entropy", vec![random_tensor(&[1, 5], &mut r)], |t, v| t.cross_entropy(v[0], 2)));
    cases.push(("gather_rows", vec![m34(&mut r)], |t, v| t.gather_rows(v[0], &[2, 0, 2])));
    cases.push(("slice_rows", vec![m34(&mut r)], |t, v| t.slice_rows(v[0], 1, 2)));
    cases.push(("slice_cols", vec![m34(&mut r)], |t, v| t.slice_cols(v[0], 1, 2)));
    cases.push((
        "concat_rows",
        vec![m34(&mut r), random_tensor(&[2, 4], &mut r)],
        |t, v| t.concat_rows(&[v[0], v[1]]),
    ));
    cases.push((
        "concat_cols",
        vec![m34(&mut r), random_tensor(&[3, 2], &mut r)],
        |t, v| t.concat_cols(&[v[0], v[1]]),
    ));
    cases.push(("sum", vec![m34(&mut r)], |t, v| Ok(t.sum(v[0]))));
    cases.push(("mean_rows", vec![m34(&mut r)], |t, v| t.mean_rows(v[0])));
    cases
        .into_iter()
        .map(|(name, inputs, f)| match grad_error(&inputs, f) {
            Ok(e) => Check::new(format!("op/{name}"), e, OP_TOLERANCE),
            Err(e) => Check::failed(format!("op/{name}"), &e.to_string()),
        })
        .collect()
}

/// Small model used by the block- and model-level checks.
pub fn toy_config(mode: FusionMode, heads: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_lm: 8,
        d_gnn: 8,
        n_heads: heads,
        fusion_mode: mode,
        vocab_size: 16,
        max_seq_len: 8,
        seed,
        keep_interaction_node: false,
    }
}

/// Random model input with `n` tokens and `m` nodes over `num_relations`
/// relation ids (one extra id exercises the unknown bucket).
pub fn random_input(config: &ModelConfig, num_relations: usize, n: usize, m: usize, rng: &mut impl Rng) -> ModelInput {
    let mut tokens = vec![BOS];
    tokens.extend((1..n).map(|_| rng.gen_range(0..config.vocab_size)));
    let edge_count = if m == 0 { 0 } else { rng.gen_range(m.saturating_sub(1)..=2 * m) };
    let mut edges: Vec<GraphEdge> = (0..edge_count)
        .map(|_| GraphEdge {
            src: rng.gen_range(0..m),
            relation: rng.gen_range(0..=num_relations),
            dst: rng.gen_range(0..m),
        })
        .collect();
    edges.sort_unstable();
    ModelInput {
        tokens,
        graph: GraphInput {
            entities: Vec::new(),
            node_init: (m > 0).then(|| random_tensor(&[m, config.d_gnn], rng)),
            question: (0..m).map(|_| rng.gen_bool(0.4)).collect(),
            answer: (0..m).map(|_| rng.gen_bool(0.4)).collect(),
            edges,
        },
    }
}

/// Gradient check of the scalar logit with respect to every model
/// parameter, on two random 4-token, 5-node instances; returns the larger
/// error.
pub fn model_gradient_error(config: ModelConfig, seed: u64) -> Result<f64, ModelError> {
    let num_relations = 3;
    let model = FusionModel::new(config.clone(), num_relations)?;
    let mut r = rng(seed);
    let tensors = model.params().tensors();
    let mut worst = 0.0f64;
    for _ in 0..2 {
        let input = random_input(&config, num_relations, 4, 5, &mut r);
        let report = finite_diff_check(&tensors, DEFAULT_FD_STEP, |t, vars| {
            let p = Bound::from(vars);
            Ok::<_, ModelError>(model.forward(t, &p, &input)?.logit)
        })
        .map_err(|e| ModelError::Input(e.to_string()))?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

pub fn model_gradient_checks(seed: u64) -> Vec<Check> {
    let variants = [
        ("model/none", FusionMode::None, 1, false),
        ("model/naive", FusionMode::Naive, 1, false),
        ("model/interaction", FusionMode::Interaction, 1, false),
        ("model/cross_attention-1", FusionMode::CrossAttention, 1, false),
        ("model/cross_attention-4", FusionMode::CrossAttention, 4, false),
        ("model/cross_attention-4+interaction", FusionMode::CrossAttention, 4, true),
    ];
    variants
        .into_iter()
        .map(|(name, mode, heads, keep)| {
            let cfg = ModelConfig { keep_interaction_node: keep, ..toy_config(mode, heads, seed) };
            match model_gradient_error(cfg, seed) {
                Ok(e) => Check::new(name, e, MODEL_TOLERANCE),
                Err(e) => Check::failed(name, &e.to_string()),
            }
        })
        .collect()
}

/// Gradient checks of single layers with respect to their inputs and
/// parameters, using the first layer of a toy cross-attention model.
pub fn block_gradient_checks(seed: u64) -> Vec<Check> {
    let cfg = ModelConfig { keep_interaction_node: true, ..toy_config(FusionMode::CrossAttention, 4, seed) };
    let model = FusionModel::new(cfg, 3).expect("valid toy config");
    let mut r = rng(seed ^ 1);
    let h = random_tensor(&[4, 8], &mut r);
    let e = random_tensor(&[5, 8], &mut r);
    let structure = crate::model::GraphStructure::new(5, vec![(0, 0, 1), (1, 2, 2), (3, 1, 0), (4, 4, 4), (2, 3, 4)]);
    let tensors = model.params().tensors();
    let k = 2;
    let mut inputs = vec![h, e];
    inputs.extend(tensors);
    let run = |name: &str, f: &dyn Fn(&mut Tape, &Bound, Var, Var) -> Result<Var, TensorError>| {
        match grad_error(&inputs, |t, v| {
            let p = Bound::from(&v[k..]);
            f(t, &p, v[0], v[1])
        }) {
            Ok(err) => Check::new(name, err, BLOCK_TOLERANCE),
            Err(err) => Check::failed(name, &err.to_string()),
        }
    };
    vec![
        run("block/lm_layer", &|t, p, h, _| model.lm_layers()[0].forward(t, p, h)),
        run("block/gnn_layer", &|t, p, _, e| model.gnn_layers()[0].forward(t, p, e, &structure)),
        run("block/cross_attention", &|t, p, h, e| {
            let (h, e) = model.cross_layers()[0].forward(t, p, h, e)?;
            let a = weighted_sum(t, h, 1)?;
            let b = weighted_sum(t, e, 2)?;
            t.add(a, b)
        }),
        run("block/interaction", &|t, p, h, e| {
            let (h, e) = model.exchange_layers()[0].forward(t, p, h, e)?;
            let a = weighted_sum(t, h, 3)?;
            let b = weighted_sum(t, e, 4)?;
            t.add(a, b)
        }),
    ]
}

/// Largest `|Σ_j a_ij − 1|` over every self- and cross-attention row of
/// `passes` random forward passes.
pub fn attention_row_deviation(passes: usize, seed: u64) -> Result<f64, ModelError> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..passes {
        let heads = if i % 2 == 0 { 1 } else { 4 };
        let cfg = toy_config(FusionMode::CrossAttention, heads, seed.wrapping_add(i as u64));
        let model = FusionModel::new(cfg.clone(), 3)?;
        let n = r.gen_range(1..=cfg.max_seq_len);
        let m = r.gen_range(1..=8);
        let input = random_input(&cfg, 3, n, m, &mut r);
        let mut t = Tape::new();
        let p = model.bind(&mut t);
        let tr = model.forward(&mut t, &p, &input)?;
        let mats = tr
            .self_attention
            .iter()
            .chain(tr.cross.iter().flat_map(|c| c.text.weights.iter().chain(&c.graph.weights)));
        for &a in mats {
            let v = t.value(a);
            let (rows, _) = v.dims2("attention")?;
            for i in 0..rows {
                worst = worst.max((v.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok(worst)
}

/// With every value projection zeroed, both pre-MLP outputs must equal their
/// queries bit-for-bit. Returns the number of differing entries.
pub fn zero_value_mismatches(instances: usize, seed: u64) -> Result<usize, ModelError> {
    let mut r = rng(seed);
    let mut bad = 0;
    for i in 0..instances {
        let heads = if i % 2 == 0 { 1 } else { 4 };
        let model = FusionModel::new(toy_config(FusionMode::CrossAttention, heads, seed + i as u64), 3)?;
        let mut store = model.params().clone();
        for p in store.iter_mut().filter(|p| p.name.ends_with(".wv")) {
            p.tensor.data_mut().fill(0.0);
        }
        let h = random_tensor(&[r.gen_range(1..6), 8], &mut r);
        let e = random_tensor(&[r.gen_range(1..6), 8], &mut r);
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let hv = t.leaf(h.clone());
        let ev = t.leaf(e.clone());
        let tr = model.cross_layers()[0].forward_traced(&mut t, &p, hv, ev)?;
        let diff = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        bad += diff(t.value(tr.text.pre_mlp), &h) + diff(t.value(tr.graph.pre_mlp), &e);
    }
    Ok(bad)
}

/// Largest logit change under random node permutations, over all graph
/// fusion modes.
pub fn permutation_deviation(instances: usize, seed: u64) -> Result<f64, ModelError> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (mode, heads) = [(FusionMode::CrossAttention, 1), (FusionMode::CrossAttention, 4), (FusionMode::Naive, 1), (FusionMode::Interaction, 1)][i % 4];
        let cfg = toy_config(mode, heads, seed + i as u64);
        let model = FusionModel::new(cfg.clone(), 3)?;
        let m = r.gen_range(2..=8);
        let input = random_input(&cfg, 3, r.gen_range(1..=cfg.max_seq_len), m, &mut r);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut r);
        let permuted = ModelInput { tokens: input.tokens.clone(), graph: input.graph.permute(&perm)? };
        let a = model.score_candidates(std::slice::from_ref(&input))?[0];
        let b = model.score_candidates(std::slice::from_ref(&permuted))?[0];
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// Random knowledge graph over `n` entities named `e<i>` and `r` relations.
pub fn random_kg(n: usize, m: usize, relations: usize, rng: &mut impl Rng) -> KnowledgeGraph {
    let names: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
    let rels: Vec<String> = (0..relations).map(|i| format!("r{i}")).collect();
    let rows: Vec<(usize, usize, usize)> =
        (0..m.max(1)).map(|_| (rng.gen_range(0..n), rng.gen_range(0..relations), rng.gen_range(0..n))).collect();
    KnowledgeGraph::from_triples(rows.iter().map(|&(h, r, t)| (names[h].as_str(), rels[r].as_str(), names[t].as_str())))
        .expect("non-empty")
}

/// Explicit enumeration of all simple undirected paths of length at most
/// `max_hop` starting at a question seed. With answer seeds, a path counts
/// only if it ends at one and every triplet on it gets the path length; with
/// none, each triplet gets the length of the prefix ending in it.
pub fn brute_force_subgraph(kg: &KnowledgeGraph, seeds: &SeedSet, max_hop: usize) -> BTreeMap<usize, usize> {
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    let mut note = |t: usize, len: usize| {
        let e = best.entry(t).or_insert(len);
        *e = (*e).min(len);
    };
    // (vertices on path, triplets on path)
    let mut frontier: Vec<(Vec<EntityId>, Vec<usize>)> = seeds.question.iter().map(|&q| (vec![q], vec![])).collect();
    for len in 1..=max_hop {
        let mut next = Vec::new();
        for (verts, trips) in &frontier {
            let last = *verts.last().expect("non-empty path");
            for t in kg.triplets() {
                let other = if t.head == last {
                    t.tail
                } else if t.tail == last {
                    t.head
                } else {
                    continue;
                };
                if verts.contains(&other) {
                    continue;
                }
                let mut v = verts.clone();
                v.push(other);
                let mut ts = trips.clone();
                ts.push(t.id);
                if seeds.answer.is_empty() {
                    note(t.id, len);
                } else if seeds.answer.contains(&other) {
                    for &x in &ts {
                        note(x, len);
                    }
                }
                next.push((v, ts));
            }
        }
        frontier = next;
    }
    best
}

/// Number of random graphs on which retrieval disagrees with brute force or
/// violates hop monotonicity.
pub fn retrieval_mismatches(graphs: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..graphs {
        let n = r.gen_range(2..=50);
        let m = r.gen_range(1..=200);
        let kg = random_kg(n, m, 3, &mut r);
        let pick = |r: &mut ChaCha8Rng, k: usize| -> BTreeSet<EntityId> {
            (0..k).map(|_| EntityId(r.gen_range(0..kg.num_entities()) as u32)).collect()
        };
        let (nq, na) = (r.gen_range(0..=2), r.gen_range(0..=2));
        let seeds = SeedSet { question: pick(&mut r, nq), answer: pick(&mut r, na) };
        let mut prev: Option<Subgraph> = None;
        for h in 1..=3 {
            let got = retrieve_subgraph(&kg, &seeds, NonZeroUsize::new(h).expect("positive"));
            let want = brute_force_subgraph(&kg, &seeds, h);
            let got_map: BTreeMap<usize, usize> = got.triplets.iter().copied().zip(got.hops.iter().copied()).collect();
            let monotone = prev.as_ref().is_none_or(|p| p.triplets.iter().all(|t| got.triplets.contains(t)));
            if got_map != want || !monotone {
                bad += 1;
            }
            prev = Some(got);
        }
    }
    bad
}

/// Number of random score lists on which top-k selection disagrees with a
/// full sort followed by truncation, plus λ-boundary violations.
pub fn ranking_mismatches(lists: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..lists {
        let len = r.gen_range(0..40);
        let mut ids: Vec<usize> = (0..200).collect();
        ids.shuffle(&mut r);
        let items: Vec<ScoredTriplet> = ids[..len]
            .iter()
            .map(|&id| {
                let cosine = f64::from(r.gen_range(-4..=4)) / 4.0;
                let relf = f64::from(r.gen_range(0..=4)) / 4.0;
                ScoredTriplet { triplet_id: id, sentence: String::new(), cosine, relf, score: combine_score(0.5, cosine, relf) }
            })
            .collect();
        let k = NonZeroUsize::new(r.gen_range(1..=50)).expect("positive");
        let mut want = items.clone();
        want.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.triplet_id.cmp(&b.triplet_id)));
        want.truncate(k.get());
        let got = select_top_k(items.clone(), k);
        if got.iter().map(|s| s.triplet_id).ne(want.iter().map(|s| s.triplet_id)) {
            bad += 1;
        }
        if items.iter().any(|s| combine_score(0.0, s.cosine, s.relf) != s.relf || combine_score(1.0, s.cosine, s.relf) != s.cosine)
        {
            bad += 1;
        }
    }
    bad
}

/// Runs every gradient check and oracle comparison.
pub fn run_selfcheck(seed: u64) -> SelfCheckReport {
    let mut checks = op_gradient_checks(seed);
    checks.extend(block_gradient_checks(seed));
    checks.extend(model_gradient_checks(seed));
    let as_check = |name: &str, v: Result<f64, ModelError>, limit: f64| match v {
        Ok(v) => Check::new(name, v, limit),
        Err(e) => Check::failed(name, &e.to_string()),
    };
    checks.push(as_check("oracle/attention_row_sums", attention_row_deviation(100, seed), 1e-12));
    checks.push(as_check("oracle/zero_value_identity", zero_value_mismatches(20, seed).map(|n| n as f64), 0.0));
    checks.push(as_check("oracle/node_permutation", permutation_deviation(50, seed), 1e-12));
    checks.push(Check::new("oracle/retrieval_paths", retrieval_mismatches(50, seed) as f64, 0.0));
    checks.push(Check::new("oracle/top_k", ranking_mismatches(200, seed) as f64, 0.0));
    SelfCheckReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in op_gradient_checks(1) {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn blocks_pass() {
        for c in block_gradient_checks(2) {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn toy_models_pass() {
        for c in model_gradient_checks(0) {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn check_semantics() {
        assert!(Check::new("x", 0.0, 0.0).passed);
        assert!(!Check::new("x", 1e-300, 0.0).passed);
        assert!(!Check::new("x", 1e-6, 1e-6).passed);
        let table = SelfCheckReport { checks: vec![Check::new("op/a", 1e-9, 1e-6)] }.to_table();
        assert!(table.lines().nth(1).unwrap().ends_with("ok"));
    }

    #[test]
    fn brute_force_chain() {
        let kg = KnowledgeGraph::parse_triples("a\tr\tb\nb\tr\tc\nc\tr\td").unwrap();
        let id = |s| kg.lookup_entity(s).unwrap();
        let seeds = SeedSet { question: [id("a")].into(), answer: [id("c")].into() };
        assert_eq!(brute_force_subgraph(&kg, &seeds, 2), BTreeMap::from([(0, 2), (1, 2)]));
        assert!(brute_force_subgraph(&kg, &seeds, 1).is_empty());
    }
}
