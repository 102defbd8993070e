//! Planted-knowledge multiple-choice task.
//!
//! Every question names a fresh entity `q` that occurs nowhere else in the
//! text of the dataset. Exactly one choice `a` satisfies `(q, CapableOf, a)`
//! in the graph; other choices are pool entities that may still be linked to
//! `q` by other relations. Choices are bare entity names, so the text alone
//! carries no answer signal.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{KnowledgeGraph, TemplateTable};

use super::Example;

pub const ANSWER_RELATION: &str = "CapableOf";
pub const NUM_CHOICES: usize = 5;

/// `(relation, template)`; the first entry is the answer relation.
pub const RELATIONS: [(&str, &str); 6] = [
    (ANSWER_RELATION, "{head} is capable of {tail}"),
    ("RelatedTo", "{head} is related to {tail}"),
    ("AtLocation", "{head} is found at {tail}"),
    ("UsedFor", "{head} is used for {tail}"),
    ("PartOf", "{head} is part of {tail}"),
    ("IsA", "{head} is a kind of {tail}"),
];

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub kg: KnowledgeGraph,
    pub templates: TemplateTable,
    pub examples: Vec<Example>,
}

pub fn question_text(entity: &str) -> String {
    format!("what is {entity} capable of ?")
}

fn fresh_name(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(3..=4);
        let name: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS[rng.gen_range(0..ONSETS.len())], VOWELS[rng.gen_range(0..VOWELS.len())]))
            .collect();
        if used.insert(name.clone()) {
            return name;
        }
    }
}

/// Generates a pool of `max(kg_size, 5)` entities with two random edges per
/// entity, then `n_examples` questions, each adding one planted answer
/// triplet and two distractor-biased noise triplets from its question entity.
pub fn make_synthetic_task(n_examples: usize, kg_size: usize, seed: u64) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let pool: Vec<String> = (0..kg_size.max(NUM_CHOICES)).map(|_| fresh_name(&mut rng, &mut used)).collect();
    let mut triples: Vec<(String, &str, String)> = Vec::new();
    for _ in 0..2 * pool.len() {
        let h = rng.gen_range(0..pool.len());
        let mut t = rng.gen_range(0..pool.len() - 1);
        if t >= h {
            t += 1;
        }
        let r = RELATIONS[rng.gen_range(0..RELATIONS.len())].0;
        triples.push((pool[h].clone(), r, pool[t].clone()));
    }
    let mut examples = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let q = fresh_name(&mut rng, &mut used);
        let picked = index::sample(&mut rng, pool.len(), NUM_CHOICES).into_vec();
        let answer_entity = picked[0];
        triples.push((q.clone(), ANSWER_RELATION, pool[answer_entity].clone()));
        for _ in 0..2 {
            let target = if rng.gen_bool(0.5) { picked[rng.gen_range(1..NUM_CHOICES)] } else { rng.gen_range(0..pool.len()) };
            let r = RELATIONS[rng.gen_range(1..RELATIONS.len())].0;
            if rng.gen_bool(0.5) {
                triples.push((q.clone(), r, pool[target].clone()));
            } else {
                triples.push((pool[target].clone(), r, q.clone()));
            }
        }
        let mut order = picked.clone();
        order.shuffle(&mut rng);
        examples.push(Example {
            id: format!("syn-{i:05}"),
            question: question_text(&q),
            choices: order.iter().map(|&c| pool[c].clone()).collect(),
            answer: order.iter().position(|&c| c == answer_entity).expect("answer among choices"),
            question_entities: None,
            choice_entities: None,
        });
    }
    let kg = KnowledgeGraph::from_triples(triples.iter().map(|(h, r, t)| (h.as_str(), *r, t.as_str())))
        .expect("pool edges make the graph non-empty");
    let mut templates = TemplateTable::default();
    for (r, t) in RELATIONS {
        templates.insert(r, t).expect("valid template");
    }
    SyntheticTask { kg, templates, examples }
}

/// Choices `c` with a `(q, CapableOf, c)` triplet, where `q` is the entity
/// named in the question.
pub fn planted_choices(kg: &KnowledgeGraph, ex: &Example) -> Vec<usize> {
    let q = ex
        .question
        .strip_prefix("what is ")
        .and_then(|s| s.strip_suffix(" capable of ?"))
        .and_then(|s| kg.lookup_entity(s));
    let (Some(q), Some(rel)) = (q, kg.lookup_relation(ANSWER_RELATION)) else { return Vec::new() };
    let targets: BTreeSet<_> =
        kg.out_edges(q).iter().map(|&t| kg.triplet(t)).filter(|t| t.relation == rel).map(|t| t.tail).collect();
    ex.choices
        .iter()
        .enumerate()
        .filter(|(_, c)| kg.lookup_entity(c).is_some_and(|e| targets.contains(&e)))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::to_jsonl;

    #[test]
    fn deterministic_for_a_seed() {
        let a = make_synthetic_task(20, 30, 7);
        let b = make_synthetic_task(20, 30, 7);
        assert_eq!(to_jsonl(&a.examples), to_jsonl(&b.examples));
        assert_eq!(a.kg.to_triple_lines(), b.kg.to_triple_lines());
        assert_ne!(to_jsonl(&a.examples), to_jsonl(&make_synthetic_task(20, 30, 8).examples));
    }

    #[test]
    fn exactly_one_planted_choice() {
        let task = make_synthetic_task(200, 40, 1);
        for ex in &task.examples {
            assert_eq!(planted_choices(&task.kg, ex), vec![ex.answer], "{}", ex.id);
            assert_eq!(ex.choices.len(), NUM_CHOICES);
            assert_eq!(ex.choices.iter().collect::<BTreeSet<_>>().len(), NUM_CHOICES);
        }
    }

    #[test]
    fn empty_task_has_a_graph() {
        let task = make_synthetic_task(0, 3, 0);
        assert!(task.examples.is_empty());
        assert!((1..=NUM_CHOICES).contains(&task.kg.num_entities()));
        assert_eq!(task.kg.triplets().len(), 2 * NUM_CHOICES);
    }

    #[test]
    fn answer_positions_vary() {
        let task = make_synthetic_task(100, 40, 2);
        let positions: BTreeSet<usize> = task.examples.iter().map(|e| e.answer).collect();
        assert_eq!(positions.len(), NUM_CHOICES);
    }
}
