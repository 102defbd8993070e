//! Entity grounding and hop-bounded subgraph extraction.
//!
//! A triplet belongs to the retrieved subgraph when it lies on a simple
//! undirected path of at most `max_hop` triplets running from a question
//! seed to an answer seed. With no answer seeds the subgraph is the
//! `max_hop` neighbourhood of the question seeds, again restricted to
//! triplets on simple paths (so self-loops never qualify).

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::num::NonZeroUsize;

use crate::kg::{EntityId, KnowledgeGraph};
use crate::text::word_tokens;

pub const DEFAULT_MAX_HOP: usize = 3;

/// Longest-match grounder over the token sequences of entity surfaces.
#[derive(Debug, Clone)]
pub struct Grounder {
    spans: HashMap<Vec<String>, EntityId>,
    max_len: usize,
}

impl Grounder {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let mut spans = HashMap::new();
        let mut max_len = 0;
        for (id, surface) in kg.entities().iter() {
            let toks = word_tokens(surface);
            if toks.is_empty() {
                continue;
            }
            max_len = max_len.max(toks.len());
            spans.entry(toks).or_insert(EntityId(id));
        }
        Self { spans, max_len }
    }

    /// Scan left to right; at each position take the longest entity span
    /// starting there and resume after it.
    pub fn ground(&self, text: &str) -> BTreeSet<EntityId> {
        let toks = word_tokens(text);
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < toks.len() {
            let longest = (1..=self.max_len.min(toks.len() - i))
                .rev()
                .find_map(|len| self.spans.get(&toks[i..i + len]).map(|&e| (len, e)));
            match longest {
                Some((len, e)) => {
                    found.insert(e);
                    i += len;
                }
                None => i += 1,
            }
        }
        found
    }
}

pub fn ground_entities(text: &str, kg: &KnowledgeGraph) -> BTreeSet<EntityId> {
    Grounder::new(kg).ground(text)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedSet {
    pub question: BTreeSet<EntityId>,
    pub answer: BTreeSet<EntityId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    /// Ascending triplet ids.
    pub triplets: Vec<usize>,
    /// Shortest qualifying path length per entry of `triplets`.
    pub hops: Vec<usize>,
    /// Heads and tails of `triplets`, ascending.
    pub nodes: Vec<EntityId>,
    pub max_hop: usize,
}

impl Subgraph {
    pub fn empty(max_hop: usize) -> Self {
        Self { triplets: Vec::new(), hops: Vec::new(), nodes: Vec::new(), max_hop }
    }

    fn from_pairs(kg: &KnowledgeGraph, mut pairs: Vec<(usize, usize)>, max_hop: usize) -> Self {
        pairs.sort_unstable();
        let nodes: BTreeSet<EntityId> = pairs
            .iter()
            .flat_map(|&(t, _)| {
                let t = kg.triplet(t);
                [t.head, t.tail]
            })
            .collect();
        Self {
            triplets: pairs.iter().map(|p| p.0).collect(),
            hops: pairs.iter().map(|p| p.1).collect(),
            nodes: nodes.into_iter().collect(),
            max_hop,
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// `# hop=<n>` followed by the triplets in triple-file format.
    pub fn to_tsv(&self, kg: &KnowledgeGraph) -> String {
        let mut out = format!("# hop={}\n", self.max_hop);
        for &t in &self.triplets {
            out.push_str(&kg.triplet_tsv(kg.triplet(t)));
            out.push('\n');
        }
        out
    }
}

/// Undirected BFS distances (in triplets) from `sources`; self-loops ignored.
fn bfs_distances(kg: &KnowledgeGraph, sources: &BTreeSet<EntityId>, limit: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; kg.num_entities()];
    let mut queue = VecDeque::new();
    for &s in sources {
        dist[s.index()] = 0;
        queue.push_back(s);
    }
    while let Some(x) = queue.pop_front() {
        let d = dist[x.index()];
        if d >= limit {
            continue;
        }
        for y in neighbours(kg, x).map(|(_, y)| y) {
            if dist[y.index()] == usize::MAX {
                dist[y.index()] = d + 1;
                queue.push_back(y);
            }
        }
    }
    dist
}

/// `(triplet id, other endpoint)` for every non-loop triplet touching `x`.
fn neighbours(kg: &KnowledgeGraph, x: EntityId) -> impl Iterator<Item = (usize, EntityId)> + '_ {
    let outs = kg.out_edges(x).iter().map(move |&t| (t, kg.triplet(t).tail));
    let ins = kg.in_edges(x).iter().map(move |&t| (t, kg.triplet(t).head));
    outs.chain(ins).filter(move |&(_, y)| y != x)
}

struct PathSearch<'a> {
    kg: &'a KnowledgeGraph,
    answer: &'a BTreeSet<EntityId>,
    dist_to_answer: Vec<usize>,
    max_hop: usize,
    on_path: Vec<bool>,
    edges: Vec<usize>,
    best: HashMap<usize, usize>,
}

impl PathSearch<'_> {
    fn extend(&mut self, x: EntityId) {
        let depth = self.edges.len();
        if depth > 0 && self.answer.contains(&x) {
            for &t in &self.edges {
                let b = self.best.entry(t).or_insert(depth);
                *b = (*b).min(depth);
            }
        }
        let kg = self.kg;
        for (t, y) in neighbours(kg, x) {
            let remaining = self.dist_to_answer[y.index()];
            if self.on_path[y.index()] || remaining == usize::MAX || depth + 1 + remaining > self.max_hop {
                continue;
            }
            self.on_path[y.index()] = true;
            self.edges.push(t);
            self.extend(y);
            self.edges.pop();
            self.on_path[y.index()] = false;
        }
    }
}

pub fn retrieve_subgraph(kg: &KnowledgeGraph, seeds: &SeedSet, max_hop: NonZeroUsize) -> Subgraph {
    let max_hop = max_hop.get();
    if seeds.question.is_empty() {
        return Subgraph::empty(max_hop);
    }
    if seeds.answer.is_empty() {
        let dist = bfs_distances(kg, &seeds.question, max_hop);
        let pairs = kg
            .triplets()
            .iter()
            .filter(|t| t.head != t.tail)
            .filter_map(|t| {
                let d = dist[t.head.index()].min(dist[t.tail.index()]);
                (d < max_hop).then(|| (t.id, d + 1))
            })
            .collect();
        return Subgraph::from_pairs(kg, pairs, max_hop);
    }
    let mut search = PathSearch {
        kg,
        answer: &seeds.answer,
        dist_to_answer: bfs_distances(kg, &seeds.answer, max_hop),
        max_hop,
        on_path: vec![false; kg.num_entities()],
        edges: Vec::with_capacity(max_hop),
        best: HashMap::new(),
    };
    for &q in &seeds.question {
        search.on_path[q.index()] = true;
        search.extend(q);
        search.on_path[q.index()] = false;
    }
    Subgraph::from_pairs(kg, search.best.into_iter().collect(), max_hop)
}

/// Keep the `max_triplets` triplets with the smallest `(hop, id)`.
pub fn cap_subgraph(kg: &KnowledgeGraph, sub: &Subgraph, max_triplets: NonZeroUsize) -> Subgraph {
    if sub.len() <= max_triplets.get() {
        return sub.clone();
    }
    let mut pairs: Vec<(usize, usize)> = sub.triplets.iter().copied().zip(sub.hops.iter().copied()).collect();
    pairs.sort_unstable_by_key(|&(t, h)| (h, t));
    pairs.truncate(max_triplets.get());
    Subgraph::from_pairs(kg, pairs, sub.max_hop)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hop(n: usize) -> NonZeroUsize {
        NonZeroUsize::new(n).unwrap()
    }

    fn chain() -> KnowledgeGraph {
        KnowledgeGraph::parse_triples("a\tr\tb\nb\tr\tc\nc\tr\td").unwrap()
    }

    fn seeds(kg: &KnowledgeGraph, q: &[&str], a: &[&str]) -> SeedSet {
        SeedSet {
            question: q.iter().map(|s| kg.lookup_entity(s).unwrap()).collect(),
            answer: a.iter().map(|s| kg.lookup_entity(s).unwrap()).collect(),
        }
    }

    #[test]
    fn longest_match_wins() {
        let kg = KnowledgeGraph::parse_triples("ice\tr\tshop\nice cream\tr\tshop").unwrap();
        let got = ground_entities("Where would you find an ice cream shop?", &kg);
        let want: BTreeSet<_> = ["ice cream", "shop"].iter().map(|s| kg.lookup_entity(s).unwrap()).collect();
        assert_eq!(got, want);
        assert!(ground_entities("nothing here", &kg).is_empty());
    }

    #[test]
    fn chain_two_hops() {
        let kg = chain();
        let sub = retrieve_subgraph(&kg, &seeds(&kg, &["a"], &["c"]), hop(2));
        assert_eq!(sub.triplets, vec![0, 1]);
        assert_eq!(sub.hops, vec![2, 2]);
        assert_eq!(sub.nodes.len(), 3);
        let sub = retrieve_subgraph(&kg, &seeds(&kg, &["a"], &["b"]), hop(1));
        assert_eq!(sub.triplets, vec![0]);
        assert!(retrieve_subgraph(&kg, &seeds(&kg, &["a"], &["d"]), hop(2)).is_empty());
    }

    #[test]
    fn empty_seeds_give_empty_subgraph() {
        let kg = chain();
        for h in 1..4 {
            assert!(retrieve_subgraph(&kg, &SeedSet::default(), hop(h)).is_empty());
            assert!(retrieve_subgraph(&kg, &seeds(&kg, &[], &["b"]), hop(h)).is_empty());
        }
    }

    #[test]
    fn neighbourhood_fallback() {
        let kg = chain();
        let sub = retrieve_subgraph(&kg, &seeds(&kg, &["b"], &[]), hop(1));
        assert_eq!(sub.triplets, vec![0, 1]);
        let sub = retrieve_subgraph(&kg, &seeds(&kg, &["a"], &[]), hop(2));
        assert_eq!(sub.triplets, vec![0, 1]);
        assert_eq!(sub.hops, vec![1, 2]);
    }

    #[test]
    fn dead_end_loop_is_not_a_simple_path() {
        // q - x - a plus a triangle x - u - v - x hanging off x
        let kg = KnowledgeGraph::parse_triples("q\tr\tx\nx\tr\ta\nx\tr\tu\nu\tr\tv\nv\tr\tx").unwrap();
        let sub = retrieve_subgraph(&kg, &seeds(&kg, &["q"], &["a"]), hop(5));
        assert_eq!(sub.triplets, vec![0, 1]);
    }

    #[test]
    fn self_loops_excluded() {
        let kg = KnowledgeGraph::parse_triples("a\tr\ta\na\tr\tb").unwrap();
        let sub = retrieve_subgraph(&kg, &seeds(&kg, &["a"], &["b"]), hop(3));
        assert_eq!(sub.triplets, vec![1]);
        let sub = retrieve_subgraph(&kg, &seeds(&kg, &["a"], &[]), hop(3));
        assert_eq!(sub.triplets, vec![1]);
    }

    #[test]
    fn cap_keeps_shortest_then_lowest_id() {
        let kg = KnowledgeGraph::parse_triples("a\tr\tb\nb\tr\tc\na\tr\tc\nc\tr\td").unwrap();
        let sub = retrieve_subgraph(&kg, &seeds(&kg, &["a"], &[]), hop(2));
        assert_eq!(sub.triplets, vec![0, 1, 2, 3]);
        assert_eq!(cap_subgraph(&kg, &sub, hop(10)), sub);
        let capped = cap_subgraph(&kg, &sub, hop(2));
        assert_eq!(capped.triplets, vec![0, 2]);
        assert_eq!(capped.hops, vec![1, 1]);
    }

    #[test]
    fn tsv_has_hop_header() {
        let kg = chain();
        let sub = retrieve_subgraph(&kg, &seeds(&kg, &["a"], &["b"]), hop(1));
        assert_eq!(sub.to_tsv(&kg), "# hop=1\na\tr\tb\n");
    }
}
