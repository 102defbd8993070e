use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZeroUsize;

use fuseqa_core::kg::{EntityId, KnowledgeGraph};
use fuseqa_core::retrieval::{cap_subgraph, ground_entities, retrieve_subgraph, SeedSet};
use fuseqa_core::text::normalize_surface;
use proptest::prelude::*;

fn graph(edges: &[(usize, usize, usize)]) -> KnowledgeGraph {
    let rows: Vec<(String, String, String)> =
        edges.iter().map(|&(h, r, t)| (format!("n{h}"), format!("r{r}"), format!("n{t}"))).collect();
    KnowledgeGraph::from_triples(rows.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str()))).unwrap()
}

fn ids(kg: &KnowledgeGraph, nodes: &BTreeSet<usize>) -> BTreeSet<EntityId> {
    nodes.iter().filter_map(|n| kg.lookup_entity(&format!("n{n}"))).collect()
}

/// Walks every simple path by scanning the whole triplet list at each step.
fn walk(
    kg: &KnowledgeGraph,
    seeds: &SeedSet,
    max_hop: usize,
    path: &mut Vec<EntityId>,
    used: &mut Vec<usize>,
    out: &mut BTreeMap<usize, usize>,
) {
    let x = *path.last().unwrap();
    if seeds.answer.is_empty() {
        if let Some(&t) = used.last() {
            let e = out.entry(t).or_insert(used.len());
            *e = (*e).min(used.len());
        }
    } else if !used.is_empty() && seeds.answer.contains(&x) {
        for &t in used.iter() {
            let e = out.entry(t).or_insert(used.len());
            *e = (*e).min(used.len());
        }
    }
    if used.len() == max_hop {
        return;
    }
    for t in kg.triplets() {
        let next = if t.head == x && t.tail != x {
            t.tail
        } else if t.tail == x && t.head != x {
            t.head
        } else {
            continue;
        };
        if path.contains(&next) {
            continue;
        }
        path.push(next);
        used.push(t.id);
        walk(kg, seeds, max_hop, path, used, out);
        used.pop();
        path.pop();
    }
}

fn oracle(kg: &KnowledgeGraph, seeds: &SeedSet, max_hop: usize) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for &q in &seeds.question {
        walk(kg, seeds, max_hop, &mut vec![q], &mut Vec::new(), &mut out);
    }
    out
}

fn edges_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize, usize)>)> {
    (2usize..=12).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0usize..3, 0..n), 1..=30)))
}

fn hop(h: usize) -> NonZeroUsize {
    NonZeroUsize::new(h).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn retrieval_equals_path_enumeration(
        (n, edges) in edges_strategy(),
        q in prop::collection::btree_set(0usize..12, 0..=3),
        a in prop::collection::btree_set(0usize..12, 0..=3),
        h in 1usize..=3,
    ) {
        let kg = graph(&edges);
        let q: BTreeSet<usize> = q.into_iter().filter(|&x| x < n).collect();
        let a: BTreeSet<usize> = a.into_iter().filter(|&x| x < n).collect();
        let seeds = SeedSet { question: ids(&kg, &q), answer: ids(&kg, &a) };
        let got = retrieve_subgraph(&kg, &seeds, hop(h));
        let got_map: BTreeMap<usize, usize> = got.triplets.iter().copied().zip(got.hops.iter().copied()).collect();
        prop_assert_eq!(got_map, oracle(&kg, &seeds, h));
        let nodes: BTreeSet<EntityId> =
            got.triplets.iter().flat_map(|&t| [kg.triplet(t).head, kg.triplet(t).tail]).collect();
        prop_assert_eq!(got.nodes.iter().copied().collect::<BTreeSet<_>>(), nodes);
        prop_assert!(got.triplets.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(got.to_tsv(&kg), retrieve_subgraph(&kg, &seeds, hop(h)).to_tsv(&kg));
    }

    #[test]
    fn larger_hops_never_drop_triplets(
        (n, edges) in edges_strategy(),
        q in prop::collection::btree_set(0usize..12, 1..=2),
        a in prop::collection::btree_set(0usize..12, 0..=2),
    ) {
        let kg = graph(&edges);
        let q: BTreeSet<usize> = q.into_iter().map(|x| x % n).collect();
        let a: BTreeSet<usize> = a.into_iter().map(|x| x % n).collect();
        let seeds = SeedSet { question: ids(&kg, &q), answer: ids(&kg, &a) };
        for h in 1..4 {
            let small = retrieve_subgraph(&kg, &seeds, hop(h));
            let big = retrieve_subgraph(&kg, &seeds, hop(h + 1));
            prop_assert!(small.triplets.iter().all(|t| big.triplets.contains(t)), "hop {} vs {}", h, h + 1);
        }
    }

    #[test]
    fn cap_equals_sort_then_truncate(
        (n, edges) in edges_strategy(),
        q in 0usize..12,
        cap in 1usize..=6,
    ) {
        let kg = graph(&edges);
        let seeds = SeedSet { question: ids(&kg, &BTreeSet::from([q % n])), answer: BTreeSet::new() };
        let sub = retrieve_subgraph(&kg, &seeds, hop(3));
        let mut pairs: Vec<(usize, usize)> = sub.hops.iter().copied().zip(sub.triplets.iter().copied()).collect();
        pairs.sort();
        pairs.truncate(cap);
        let mut want: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        want.sort();
        let got = cap_subgraph(&kg, &sub, NonZeroUsize::new(cap).unwrap());
        prop_assert_eq!(&got.triplets, &want);
        prop_assert!(got.len() <= cap);
        if sub.len() <= cap {
            prop_assert_eq!(got, sub);
        }
    }
}

const WORDS: [&str; 8] = ["ice", "cream", "shop", "dog", "house", "river", "bank", "red"];

/// Matches every span as a string against every surface, then applies the
/// leftmost-longest rule to the resulting table.
fn grounding_oracle(kg: &KnowledgeGraph, words: &[&str]) -> BTreeSet<EntityId> {
    let n = words.len();
    let mut longest: Vec<Option<(usize, EntityId)>> = vec![None; n];
    for (i, slot) in longest.iter_mut().enumerate() {
        for j in i + 1..=n {
            let span = normalize_surface(&words[i..j].join(" "));
            for (id, surface) in kg.entities().iter() {
                if normalize_surface(surface) == span {
                    *slot = Some((j - i, EntityId(id)));
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    let mut i = 0;
    while i < n {
        match longest[i] {
            Some((len, e)) => {
                out.insert(e);
                i += len;
            }
            None => i += 1,
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn grounding_equals_all_spans_oracle(
        surfaces in prop::collection::btree_set(prop::collection::vec(0usize..8, 1..=2), 2..=30),
        sentence in prop::collection::vec(0usize..10, 1..=12),
    ) {
        let names: Vec<String> =
            surfaces.iter().map(|s| s.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" ")).collect();
        let rows: Vec<(&str, &str, &str)> = names.windows(2).map(|w| (w[0].as_str(), "r", w[1].as_str())).collect();
        let kg = KnowledgeGraph::from_triples(rows).unwrap();
        let words: Vec<&str> = sentence.iter().map(|&w| WORDS.get(w).copied().unwrap_or("the")).collect();
        let text = format!("{}?", words.join("  ").to_uppercase());
        prop_assert_eq!(ground_entities(&text, &kg), grounding_oracle(&kg, &words));
    }
}

#[test]
fn chain_examples() {
    let kg = KnowledgeGraph::parse_triples("a\tr\tb\nb\tr\tc\nc\tr\td").unwrap();
    let e = |s: &str| kg.lookup_entity(s).unwrap();
    let seeds = SeedSet { question: BTreeSet::from([e("a")]), answer: BTreeSet::from([e("c")]) };
    assert_eq!(retrieve_subgraph(&kg, &seeds, hop(2)).triplets, vec![0, 1]);
    assert!(retrieve_subgraph(&kg, &seeds, hop(1)).is_empty());
    let direct = SeedSet { question: BTreeSet::from([e("a")]), answer: BTreeSet::from([e("b")]) };
    assert_eq!(retrieve_subgraph(&kg, &direct, hop(1)).triplets, vec![0]);
}
