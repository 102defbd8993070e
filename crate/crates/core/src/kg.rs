//! Knowledge-graph store: triple and template ingestion, adjacency indexes
//! and relation statistics.
//!
//! The graph is immutable once loaded. Entity and relation handles are dense
//! and assigned in order of first appearance in the triple file; triplet ids
//! follow file order (duplicates keep their own id).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize_surface;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty knowledge graph")]
    Empty,
    #[error("invalid template {template:?}: {msg}")]
    Template { template: String, msg: String },
    #[error("bundle: {0}")]
    Bundle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Dense surface vocabulary. Matching goes through [`normalize_surface`];
/// the first-seen spelling is kept for display.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    surfaces: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn intern(&mut self, surface: &str) -> u32 {
        let key = normalize_surface(surface);
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.surfaces.len() as u32;
        self.surfaces.push(surface.trim().to_owned());
        self.index.insert(key, id);
        id
    }

    pub fn get(&self, surface: &str) -> Option<u32> {
        self.index.get(&normalize_surface(surface)).copied()
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.surfaces[id as usize]
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.surfaces.iter().enumerate().map(|(i, s)| (i as u32, s.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub id: usize,
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    triplets: Vec<Triplet>,
    out_adjacency: Vec<Vec<usize>>,
    in_adjacency: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    /// Build from `(head, relation, tail)` surfaces in order.
    pub fn from_triples<'a, I>(triples: I) -> Result<Self, KgError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut entities = Vocab::default();
        let mut relations = Vocab::default();
        let mut triplets = Vec::new();
        for (h, r, t) in triples {
            let head = EntityId(entities.intern(h));
            let relation = RelationId(relations.intern(r));
            let tail = EntityId(entities.intern(t));
            triplets.push(Triplet { id: triplets.len(), head, relation, tail });
        }
        if triplets.is_empty() {
            return Err(KgError::Empty);
        }
        let mut out_adjacency = vec![Vec::new(); entities.len()];
        let mut in_adjacency = vec![Vec::new(); entities.len()];
        for t in &triplets {
            out_adjacency[t.head.index()].push(t.id);
            in_adjacency[t.tail.index()].push(t.id);
        }
        Ok(Self { entities, relations, triplets, out_adjacency, in_adjacency })
    }

    pub fn parse_triples(text: &str) -> Result<Self, KgError> {
        let mut rows = Vec::new();
        for (line_no, line) in data_lines(text) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(KgError::Parse {
                    line: line_no,
                    msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if let Some(i) = fields.iter().position(|f| f.trim().is_empty()) {
                return Err(KgError::Parse { line: line_no, msg: format!("field {} is empty", i + 1) });
            }
            rows.push((fields[0], fields[1], fields[2]));
        }
        Self::from_triples(rows)
    }

    pub fn load_triples(path: impl AsRef<Path>) -> Result<Self, KgError> {
        Self::parse_triples(&read(path.as_ref())?)
    }

    /// Serialize back to the triple-file format.
    pub fn to_triple_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.triplets {
            out.push_str(&self.triplet_tsv(t));
            out.push('\n');
        }
        out
    }

    pub fn triplet_tsv(&self, t: &Triplet) -> String {
        format!(
            "{}\t{}\t{}",
            self.entity_surface(t.head),
            self.relation_surface(t.relation),
            self.entity_surface(t.tail)
        )
    }

    pub fn lookup_entity(&self, surface: &str) -> Option<EntityId> {
        self.entities.get(surface).map(EntityId)
    }

    pub fn lookup_relation(&self, surface: &str) -> Option<RelationId> {
        self.relations.get(surface).map(RelationId)
    }

    pub fn entity_surface(&self, id: EntityId) -> &str {
        self.entities.surface(id.0)
    }

    pub fn relation_surface(&self, id: RelationId) -> &str {
        self.relations.surface(id.0)
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn triplet(&self, id: usize) -> &Triplet {
        &self.triplets[id]
    }

    /// Triplet ids with `e` as head, ascending.
    pub fn out_edges(&self, e: EntityId) -> &[usize] {
        &self.out_adjacency[e.index()]
    }

    /// Triplet ids with `e` as tail, ascending.
    pub fn in_edges(&self, e: EntityId) -> &[usize] {
        &self.in_adjacency[e.index()]
    }

    pub fn relation_stats(&self, mode: RelfMode) -> RelationStats {
        RelationStats::compute(self, mode)
    }
}

/// Non-comment, non-blank lines with 1-based line numbers. `\r\n` is accepted.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n').enumerate().filter_map(|(i, raw)| {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, line))
        }
    })
}

fn read(path: &Path) -> Result<String, KgError> {
    fs::read_to_string(path).map_err(|source| KgError::Io { path: path.to_owned(), source })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelfMode {
    /// count(r) / total
    #[default]
    Frequency,
    /// (1 / count(r)) normalized to sum to one
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationStats {
    pub counts: Vec<usize>,
    pub rel_freq: Vec<f64>,
    pub mode: RelfMode,
}

impl RelationStats {
    pub fn compute(kg: &KnowledgeGraph, mode: RelfMode) -> Self {
        let mut counts = vec![0usize; kg.num_relations()];
        for t in kg.triplets() {
            counts[t.relation.index()] += 1;
        }
        let rel_freq = match mode {
            RelfMode::Frequency => {
                let total = kg.triplets().len() as f64;
                counts.iter().map(|&c| c as f64 / total).collect()
            }
            RelfMode::InverseFrequency => {
                let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
                let z: f64 = inv.iter().sum();
                inv.iter().map(|v| v / z).collect()
            }
        };
        Self { counts, rel_freq, mode }
    }

    pub fn relf(&self, r: RelationId) -> f64 {
        self.rel_freq[r.index()]
    }
}

/// A relation template with `{head}` and `{tail}` each occurring exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template(String);

impl Template {
    pub fn new(s: &str) -> Result<Self, KgError> {
        let err = |msg: &str| KgError::Template { template: s.to_owned(), msg: msg.to_owned() };
        let mut rest = s;
        let (mut heads, mut tails) = (0, 0);
        while let Some(open) = rest.find('{') {
            let close = rest[open..].find('}').ok_or_else(|| err("unterminated placeholder"))?;
            match &rest[open + 1..open + close] {
                "head" => heads += 1,
                "tail" => tails += 1,
                other => return Err(err(&format!("unknown placeholder {{{other}}}"))),
            }
            rest = &rest[open + close + 1..];
        }
        if rest.contains('}') {
            return Err(err("stray '}'"));
        }
        if heads != 1 || tails != 1 {
            return Err(err("{head} and {tail} must each occur exactly once"));
        }
        Ok(Self(s.to_owned()))
    }

    /// The fallback `{head} <relation> {tail}`.
    pub fn default_for(relation_surface: &str) -> Self {
        Self(format!("{{head}} {relation_surface} {{tail}}"))
    }

    pub fn render(&self, head: &str, tail: &str) -> String {
        let s = self.0.replace("{head}", head).replace("{tail}", tail);
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Relation templates keyed by normalized relation surface. Relations
/// without an entry use [`Template::default_for`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateTable {
    templates: BTreeMap<String, (String, Template)>,
}

impl TemplateTable {
    pub fn insert(&mut self, relation: &str, template: &str) -> Result<(), KgError> {
        let t = Template::new(template)?;
        self.templates.insert(normalize_surface(relation), (relation.trim().to_owned(), t));
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, KgError> {
        let mut table = Self::default();
        for (line_no, line) in data_lines(text) {
            let Some((rel, tpl)) = line.split_once('\t') else {
                return Err(KgError::Parse { line: line_no, msg: "expected relation<TAB>template".into() });
            };
            if rel.trim().is_empty() {
                return Err(KgError::Parse { line: line_no, msg: "empty relation".into() });
            }
            table.insert(rel, tpl).map_err(|e| KgError::Parse { line: line_no, msg: e.to_string() })?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KgError> {
        Self::parse(&read(path.as_ref())?)
    }

    pub fn get(&self, relation_surface: &str) -> Option<&Template> {
        self.templates.get(&normalize_surface(relation_surface)).map(|(_, t)| t)
    }

    pub fn for_relation(&self, kg: &KnowledgeGraph, r: RelationId) -> Template {
        let surface = kg.relation_surface(r);
        self.get(surface).cloned().unwrap_or_else(|| Template::default_for(surface))
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn to_lines(&self) -> String {
        self.templates.values().map(|(rel, t)| format!("{rel}\t{t}\n")).collect()
    }
}

/// Render a triplet through its relation template.
pub fn linearize_triplet(t: &Triplet, templates: &TemplateTable, kg: &KnowledgeGraph) -> String {
    templates
        .for_relation(kg, t.relation)
        .render(kg.entity_surface(t.head), kg.entity_surface(t.tail))
}

/// First line of every bundle file.
pub const BUNDLE_MAGIC: &str = "#fuseqa-kg-bundle 1";

/// A validated KG together with its templates, stored as one text file.
#[derive(Debug, Clone, PartialEq)]
pub struct KgBundle {
    pub kg: KnowledgeGraph,
    pub templates: TemplateTable,
}

impl KgBundle {
    pub fn summary(&self) -> String {
        format!(
            "entities={} relations={} triplets={}",
            self.kg.num_entities(),
            self.kg.num_relations(),
            self.kg.triplets().len()
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{BUNDLE_MAGIC}\n#{}\n@triples\n", self.summary());
        out.push_str(&self.kg.to_triple_lines());
        out.push_str("@templates\n");
        out.push_str(&self.templates.to_lines());
        out
    }

    pub fn parse(text: &str) -> Result<Self, KgError> {
        let bad = |m: &str| KgError::Bundle(m.to_owned());
        let mut lines = text.lines();
        if lines.next() != Some(BUNDLE_MAGIC) {
            return Err(bad("missing header"));
        }
        let summary = lines.next().and_then(|l| l.strip_prefix('#')).ok_or_else(|| bad("missing summary"))?;
        if lines.next() != Some("@triples") {
            return Err(bad("missing @triples section"));
        }
        let rest: Vec<&str> = lines.collect();
        let split = rest.iter().position(|l| *l == "@templates").ok_or_else(|| bad("missing @templates section"))?;
        let kg = KnowledgeGraph::parse_triples(&rest[..split].join("\n"))?;
        let templates = TemplateTable::parse(&rest[split + 1..].join("\n"))?;
        let bundle = Self { kg, templates };
        if bundle.summary() != summary {
            return Err(bad(&format!("summary {summary:?} does not match contents ({})", bundle.summary())));
        }
        Ok(bundle)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KgError> {
        Self::parse(&read(path.as_ref())?)
    }
}
