//! In-memory knowledge graph: entity table, triplet set and the derived
//! indices the editing methods query.
//!
//! The graph is immutable once built. Every index is a pure cache over the
//! entity table and the triplet set. Neighbourhood queries treat triplet
//! edges as undirected.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{read_jsonl_numbered, JsonlError};
use crate::seed::rng_from_seed;

/// Largest hop distance at which an entity still counts as a neighbour.
pub const MAX_NEIGHBOR_HOPS: u8 = 5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub label: String,
    pub concept: String,
}

impl Entity {
    pub fn new(id: &str, label: &str, concept: &str) -> Self {
        Self {
            id: EntityId::new(id),
            label: label.to_string(),
            concept: concept.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: EntityId,
    pub relation: String,
    pub object: EntityId,
}

impl Triplet {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        Self {
            subject: EntityId::new(subject),
            relation: relation.to_string(),
            object: EntityId::new(object),
        }
    }

    /// Stable textual key, used for seed derivation and ids.
    pub fn key(&self) -> String {
        format!("{}\t{}\t{}", self.subject, self.relation, self.object)
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}, {}>", self.subject, self.relation, self.object)
    }
}

/// Shortest undirected distance, capped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hop {
    Within(u8),
    /// No path of length `<= cap`.
    Beyond,
}

impl Hop {
    pub fn within(self) -> Option<u8> {
        match self {
            Hop::Within(d) => Some(d),
            Hop::Beyond => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown entity {id}{}", line_suffix(.line))]
    UnknownEntity { id: EntityId, line: Option<usize> },
    #[error("entity {id} has no concept{}; every entity needs exactly one concept", line_suffix(.line))]
    ZeroConcepts { id: EntityId, line: Option<usize> },
    #[error(
        "entity {id} has {} concepts ({}){}; keep exactly one (for example the most specific class) and re-run ingestion",
        .concepts.len(), .concepts.join(", "), line_suffix(.line)
    )]
    MultipleConcepts {
        id: EntityId,
        concepts: Vec<String>,
        line: Option<usize>,
    },
    #[error("entity {id} has an empty label{}", line_suffix(.line))]
    EmptyLabel { id: EntityId, line: Option<usize> },
    #[error("entity {id} is defined twice with different labels{}", line_suffix(.line))]
    DuplicateEntity { id: EntityId, line: Option<usize> },
    #[error("triplet {0} has identical subject and object")]
    SelfLoop(Triplet),
    #[error("hop cap must be at least 1")]
    InvalidCap,
    #[error("requested sample size must be at least 1")]
    InvalidCount,
    #[error("domain filter {name}: {message}")]
    InvalidFilter { name: String, message: String },
    #[error("no triplets satisfy domain filter {0}")]
    EmptyPool(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

fn line_suffix(line: &Option<usize>) -> String {
    match line {
        Some(l) => format!(" (line {l})"),
        None => String::new(),
    }
}

/// Counts gathered while reading the input files.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub entities: usize,
    pub triplets: usize,
    pub duplicate_triplets: usize,
    pub literal_objects_dropped: usize,
    pub self_loops_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    // Sorted by id; position is the node index used by `adjacency`.
    entities: Vec<Entity>,
    index: HashMap<EntityId, u32>,
    triplets: BTreeSet<Triplet>,
    adjacency: Vec<Vec<u32>>,
    concept_index: BTreeMap<String, BTreeSet<EntityId>>,
    relation_object_index: BTreeMap<String, BTreeSet<EntityId>>,
    relation_subject_index: BTreeMap<String, BTreeSet<(EntityId, EntityId)>>,
}

impl KnowledgeGraph {
    /// Builds a graph from already-parsed parts. Identical duplicate entities
    /// and duplicate triplets collapse; anything else inconsistent is an error.
    pub fn from_parts(
        entities: impl IntoIterator<Item = Entity>,
        triplets: impl IntoIterator<Item = Triplet>,
    ) -> Result<Self, KgError> {
        let mut table: BTreeMap<EntityId, Entity> = BTreeMap::new();
        for e in entities {
            check_entity(&e, None)?;
            insert_entity(&mut table, e, None)?;
        }
        let mut set = BTreeSet::new();
        for t in triplets {
            check_triplet(&table, &t, None)?;
            if t.subject == t.object {
                return Err(KgError::SelfLoop(t));
            }
            set.insert(t);
        }
        Ok(Self::build(table, set))
    }

    fn build(table: BTreeMap<EntityId, Entity>, triplets: BTreeSet<Triplet>) -> Self {
        let entities: Vec<Entity> = table.into_values().collect();
        let index: HashMap<EntityId, u32> = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i as u32))
            .collect();

        let mut adjacency = vec![Vec::new(); entities.len()];
        let mut concept_index: BTreeMap<String, BTreeSet<EntityId>> = BTreeMap::new();
        let mut relation_object_index: BTreeMap<String, BTreeSet<EntityId>> = BTreeMap::new();
        let mut relation_subject_index: BTreeMap<String, BTreeSet<(EntityId, EntityId)>> = BTreeMap::new();

        for e in &entities {
            concept_index.entry(e.concept.clone()).or_default().insert(e.id.clone());
        }
        for t in &triplets {
            let s = index[&t.subject];
            let o = index[&t.object];
            adjacency[s as usize].push(o);
            adjacency[o as usize].push(s);
            relation_object_index
                .entry(t.relation.clone())
                .or_default()
                .insert(t.object.clone());
            relation_subject_index
                .entry(t.relation.clone())
                .or_default()
                .insert((t.subject.clone(), t.object.clone()));
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }

        Self {
            entities,
            index,
            triplets,
            adjacency,
            concept_index,
            relation_object_index,
            relation_subject_index,
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn triplet_count(&self) -> usize {
        self.triplets.len()
    }

    /// Entities in id order.
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.iter()
    }

    /// Triplets in sorted order.
    pub fn triplets(&self) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter()
    }

    pub fn entity(&self, id: &EntityId) -> Option<&Entity> {
        self.index.get(id).map(|&i| &self.entities[i as usize])
    }

    pub fn contains_entity(&self, id: &EntityId) -> bool {
        self.index.contains_key(id)
    }

    pub fn concept_of(&self, id: &EntityId) -> Option<&str> {
        self.entity(id).map(|e| e.concept.as_str())
    }

    pub fn label_of(&self, id: &EntityId) -> Option<&str> {
        self.entity(id).map(|e| e.label.as_str())
    }

    /// Members of `concept`; empty for an unknown concept.
    pub fn concept_members(&self, concept: &str) -> BTreeSet<EntityId> {
        self.concept_index.get(concept).cloned().unwrap_or_default()
    }

    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        self.concept_index.keys().map(String::as_str)
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.relation_object_index.keys().map(String::as_str)
    }

    /// Every entity that appears as the object of relation `r`.
    pub fn objects_of_relation(&self, r: &str) -> BTreeSet<EntityId> {
        self.relation_object_index.get(r).cloned().unwrap_or_default()
    }

    pub(crate) fn relation_objects_ref(&self, r: &str) -> Option<&BTreeSet<EntityId>> {
        self.relation_object_index.get(r)
    }

    /// All `(subject, object)` pairs connected by relation `r`.
    pub fn relation_pairs(&self, r: &str) -> BTreeSet<(EntityId, EntityId)> {
        self.relation_subject_index.get(r).cloned().unwrap_or_default()
    }

    pub fn has_triplet(&self, s: &EntityId, r: &str, o: &EntityId) -> bool {
        self.relation_subject_index
            .get(r)
            .is_some_and(|pairs| pairs.contains(&(s.clone(), o.clone())))
    }

    /// Every object `o` such that `<s, r, o>` is stored.
    pub fn objects_for(&self, s: &EntityId, r: &str) -> BTreeSet<EntityId> {
        let Some(pairs) = self.relation_subject_index.get(r) else {
            return BTreeSet::new();
        };
        pairs
            .range((s.clone(), EntityId::new(""))..)
            .take_while(|(subj, _)| subj == s)
            .map(|(_, o)| o.clone())
            .collect()
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.triplets.contains(t)
    }

    /// Direct (1-hop) neighbours of `id` in either edge direction.
    pub fn adjacent(&self, id: &EntityId) -> Result<BTreeSet<EntityId>, KgError> {
        let ix = self.ix(id)?;
        Ok(self.adjacency[ix as usize]
            .iter()
            .map(|&j| self.entities[j as usize].id.clone())
            .collect())
    }

    pub(crate) fn ix(&self, id: &EntityId) -> Result<u32, KgError> {
        self.index.get(id).copied().ok_or_else(|| KgError::UnknownEntity {
            id: id.clone(),
            line: None,
        })
    }

    pub(crate) fn entity_at(&self, ix: u32) -> &Entity {
        &self.entities[ix as usize]
    }

    /// Bounded BFS. `dist[i]` is the distance of node `i` from `start` when it
    /// is `<= cap`.
    pub(crate) fn distances_from(&self, start: u32, cap: u8) -> Vec<Option<u8>> {
        let mut dist = vec![None; self.entities.len()];
        dist[start as usize] = Some(0u8);
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u as usize].unwrap();
            if d == cap {
                continue;
            }
            for &v in &self.adjacency[u as usize] {
                if dist[v as usize].is_none() {
                    dist[v as usize] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn hop_distance(&self, a: &EntityId, b: &EntityId, cap: u8) -> Result<Hop, KgError> {
        if cap == 0 {
            return Err(KgError::InvalidCap);
        }
        let a = self.ix(a)?;
        let b = self.ix(b)?;
        if a == b {
            return Ok(Hop::Within(0));
        }
        let mut dist: HashMap<u32, u8> = HashMap::from([(a, 0)]);
        let mut queue = VecDeque::from([a]);
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            if d == cap {
                continue;
            }
            for &v in &self.adjacency[u as usize] {
                if dist.contains_key(&v) {
                    continue;
                }
                if v == b {
                    return Ok(Hop::Within(d + 1));
                }
                dist.insert(v, d + 1);
                queue.push_back(v);
            }
        }
        Ok(Hop::Beyond)
    }

    /// Entities grouped by exact shortest distance `1..=cap` from `e`. Every
    /// bucket is present, possibly empty; `e` itself is never included.
    pub fn neighbors_within(&self, e: &EntityId, cap: u8) -> Result<BTreeMap<u8, BTreeSet<EntityId>>, KgError> {
        if cap == 0 {
            return Err(KgError::InvalidCap);
        }
        let start = self.ix(e)?;
        let mut buckets: BTreeMap<u8, BTreeSet<EntityId>> = (1..=cap).map(|d| (d, BTreeSet::new())).collect();
        for (i, d) in self.distances_from(start, cap).into_iter().enumerate() {
            if let Some(d) = d.filter(|&d| d > 0) {
                buckets.get_mut(&d).unwrap().insert(self.entities[i].id.clone());
            }
        }
        Ok(buckets)
    }
}

fn check_entity(e: &Entity, line: Option<usize>) -> Result<(), KgError> {
    if e.id.as_str().is_empty() {
        return Err(KgError::UnknownEntity { id: e.id.clone(), line });
    }
    if e.concept.trim().is_empty() {
        return Err(KgError::ZeroConcepts { id: e.id.clone(), line });
    }
    if e.label.trim().is_empty() {
        return Err(KgError::EmptyLabel { id: e.id.clone(), line });
    }
    Ok(())
}

fn insert_entity(table: &mut BTreeMap<EntityId, Entity>, e: Entity, line: Option<usize>) -> Result<(), KgError> {
    match table.get(&e.id) {
        None => {
            table.insert(e.id.clone(), e);
            Ok(())
        }
        Some(prev) if prev == &e => Ok(()),
        Some(prev) if prev.concept != e.concept => Err(KgError::MultipleConcepts {
            id: e.id.clone(),
            concepts: vec![prev.concept.clone(), e.concept],
            line,
        }),
        Some(_) => Err(KgError::DuplicateEntity { id: e.id, line }),
    }
}

fn check_triplet(table: &BTreeMap<EntityId, Entity>, t: &Triplet, line: Option<usize>) -> Result<(), KgError> {
    for id in [&t.subject, &t.object] {
        if !table.contains_key(id) {
            return Err(KgError::UnknownEntity { id: id.clone(), line });
        }
    }
    if t.relation.trim().is_empty() {
        return Err(KgError::Invalid {
            path: PathBuf::new(),
            line: line.unwrap_or(0),
            message: format!("triplet {t} has an empty relation"),
        });
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConceptField {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize)]
struct RawEntity {
    id: String,
    label: String,
    #[serde(default)]
    concept: Option<ConceptField>,
}

#[derive(Deserialize)]
struct RawTriplet {
    subject: String,
    relation: String,
    object: serde_json::Value,
    /// Marks attribute values (dates, quantities) whose object is not an entity.
    #[serde(default)]
    literal: bool,
}

/// Reads `entities.jsonl` and `triplets.jsonl`, validates referential
/// integrity and builds every index.
///
/// Literal-valued objects (a non-string `object`, or `"literal": true`) and
/// self-loops are dropped and counted; duplicate triplets are merged.
pub fn load_graph(entities_path: &Path, triplets_path: &Path) -> Result<(KnowledgeGraph, LoadReport), KgError> {
    let invalid = |path: &Path, line: usize, message: String| KgError::Invalid {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut table = BTreeMap::new();
    for (line, raw) in read_jsonl_numbered::<RawEntity>(entities_path)? {
        let id = EntityId::new(raw.id);
        if id.as_str().is_empty() {
            return Err(invalid(entities_path, line, "empty entity id".into()));
        }
        if raw.label.trim().is_empty() {
            return Err(KgError::EmptyLabel { id, line: Some(line) });
        }
        let concept = match raw.concept {
            Some(ConceptField::One(c)) if !c.trim().is_empty() => c,
            Some(ConceptField::Many(mut cs)) => {
                cs.retain(|c| !c.trim().is_empty());
                match cs.len() {
                    0 => return Err(KgError::ZeroConcepts { id, line: Some(line) }),
                    1 => cs.pop().unwrap(),
                    _ => {
                        return Err(KgError::MultipleConcepts {
                            id,
                            concepts: cs,
                            line: Some(line),
                        })
                    }
                }
            }
            _ => return Err(KgError::ZeroConcepts { id, line: Some(line) }),
        };
        let e = Entity {
            id,
            label: raw.label,
            concept,
        };
        insert_entity(&mut table, e, Some(line))?;
    }

    let mut report = LoadReport::default();
    let mut set = BTreeSet::new();
    for (line, raw) in read_jsonl_numbered::<RawTriplet>(triplets_path)? {
        let object = match raw.object {
            serde_json::Value::String(s) if !raw.literal => s,
            _ => {
                report.literal_objects_dropped += 1;
                continue;
            }
        };
        let t = Triplet {
            subject: EntityId::new(raw.subject),
            relation: raw.relation,
            object: EntityId::new(object),
        };
        if t.relation.trim().is_empty() {
            return Err(invalid(triplets_path, line, "empty relation".into()));
        }
        check_triplet(&table, &t, Some(line))?;
        if t.subject == t.object {
            report.self_loops_dropped += 1;
            continue;
        }
        if !set.insert(t) {
            report.duplicate_triplets += 1;
        }
    }

    let g = KnowledgeGraph::build(table, set);
    report.entities = g.entity_count();
    report.triplets = g.triplet_count();
    log::info!(
        "loaded {} entities, {} triplets ({} duplicates merged, {} literal objects dropped)",
        report.entities,
        report.triplets,
        report.duplicate_triplets,
        report.literal_objects_dropped
    );
    Ok((g, report))
}

/// Domain selection rules: which subject concepts and relations belong to a
/// domain, plus relations excluded after the feasibility probe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainFilter {
    pub name: String,
    pub allowed_concepts: BTreeSet<String>,
    pub allowed_relations: BTreeSet<String>,
    #[serde(default)]
    pub relation_blacklist: BTreeSet<String>,
}

impl DomainFilter {
    pub fn load(path: &Path) -> Result<Self, KgError> {
        let text = std::fs::read_to_string(path).map_err(|source| KgError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let f: Self = serde_json::from_str(&text).map_err(|source| KgError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), KgError> {
        let bad = |message: &str| KgError::InvalidFilter {
            name: self.name.clone(),
            message: message.to_string(),
        };
        if self.allowed_concepts.is_empty() {
            return Err(bad("allowed_concepts is empty"));
        }
        if self.allowed_relations.is_empty() {
            return Err(bad("allowed_relations is empty"));
        }
        Ok(())
    }

    /// Blacklist wins over the allow list.
    pub fn allows_relation(&self, r: &str) -> bool {
        self.allowed_relations.contains(r) && !self.relation_blacklist.contains(r)
    }

    pub fn allows(&self, g: &KnowledgeGraph, t: &Triplet) -> bool {
        self.allows_relation(&t.relation)
            && g.concept_of(&t.subject)
                .is_some_and(|c| self.allowed_concepts.contains(c))
    }
}

/// Seeded uniform sample without replacement from the triplets the filter
/// admits. A pool smaller than `n` is returned whole with a warning.
pub fn extract_true_triplets(
    g: &KnowledgeGraph,
    f: &DomainFilter,
    n: usize,
    seed: u64,
) -> Result<Vec<Triplet>, KgError> {
    if n == 0 {
        return Err(KgError::InvalidCount);
    }
    f.validate()?;
    let mut pool: Vec<&Triplet> = g.triplets().filter(|t| f.allows(g, t)).collect();
    if pool.is_empty() {
        return Err(KgError::EmptyPool(f.name.clone()));
    }
    if pool.len() < n {
        log::warn!(
            "domain {}: requested {} triplets but only {} are eligible",
            f.name,
            n,
            pool.len()
        );
    }
    let mut rng = rng_from_seed(seed);
    pool.shuffle(&mut rng);
    Ok(pool.into_iter().take(n).cloned().collect())
}
