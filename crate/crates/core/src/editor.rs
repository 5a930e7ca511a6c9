//! Object corruption. Each true triplet `<s, r, o>` yields up to six false
//! triplets `<s, r, o'>`, one per [`EditMethod`], where `o'` is drawn from the
//! method's candidate set.
//!
//! Two axes define the methods: distance between `o'` and the subject
//! (neighbour within [`MAX_NEIGHBOR_HOPS`] undirected hops, or not), and the
//! association between `o'` and `o` (same concept, or `o'` also being an
//! object of relation `r` somewhere in the graph).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg_store::{EntityId, KgError, KnowledgeGraph, Triplet, MAX_NEIGHBOR_HOPS};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EditMethod {
    /// Neighbour, same concept as the original object.
    #[serde(rename = "NSC")]
    Nsc,
    /// Neighbour, different concept.
    #[serde(rename = "NDC")]
    Ndc,
    /// Not a neighbour, same concept.
    #[serde(rename = "NNSC")]
    Nnsc,
    /// Not a neighbour, different concept.
    #[serde(rename = "NNDC")]
    Nndc,
    /// Not a neighbour, also an object of the same relation.
    #[serde(rename = "NNSR")]
    Nnsr,
    /// Not a neighbour, never an object of the relation.
    #[serde(rename = "NNDR")]
    Nndr,
}

impl EditMethod {
    pub const ALL: [EditMethod; 6] = [
        EditMethod::Nsc,
        EditMethod::Ndc,
        EditMethod::Nnsc,
        EditMethod::Nndc,
        EditMethod::Nnsr,
        EditMethod::Nndr,
    ];

    pub fn code(self) -> &'static str {
        match self {
            EditMethod::Nsc => "NSC",
            EditMethod::Ndc => "NDC",
            EditMethod::Nnsc => "NNSC",
            EditMethod::Nndc => "NNDC",
            EditMethod::Nnsr => "NNSR",
            EditMethod::Nndr => "NNDR",
        }
    }

    /// NSC and NDC draw from the subject's neighbourhood; the rest from outside it.
    pub fn is_neighbor(self) -> bool {
        matches!(self, EditMethod::Nsc | EditMethod::Ndc)
    }
}

impl fmt::Display for EditMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for EditMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EditMethod::ALL
            .into_iter()
            .find(|m| m.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown editing method {s:?}"))
    }
}

/// A true triplet with its object replaced. Serialises to one
/// `false_triplets.jsonl` row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FalseTriplet {
    #[serde(flatten)]
    pub base: Triplet,
    pub edited_object: EntityId,
    pub method: EditMethod,
    /// Distance between subject and edited object; only for NSC/NDC.
    pub hop: Option<u8>,
    /// Seed the edited object was sampled with.
    pub seed: u64,
}

impl FalseTriplet {
    pub fn edited_triplet(&self) -> Triplet {
        Triplet {
            subject: self.base.subject.clone(),
            relation: self.base.relation.clone(),
            object: self.edited_object.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditBundle {
    pub base: Triplet,
    pub edits: BTreeMap<EditMethod, FalseTriplet>,
    pub skipped: BTreeMap<EditMethod, String>,
}

impl EditBundle {
    /// Reassembles bundles from flat rows, keeping first-seen order of base
    /// triplets. Methods without a row are marked skipped.
    pub fn group(rows: impl IntoIterator<Item = FalseTriplet>) -> Vec<EditBundle> {
        let mut order: Vec<Triplet> = Vec::new();
        let mut by_base: BTreeMap<Triplet, BTreeMap<EditMethod, FalseTriplet>> = BTreeMap::new();
        for row in rows {
            let entry = by_base.entry(row.base.clone()).or_insert_with(|| {
                order.push(row.base.clone());
                BTreeMap::new()
            });
            entry.insert(row.method, row);
        }
        order
            .into_iter()
            .map(|base| {
                let edits = by_base.remove(&base).unwrap_or_default();
                let skipped = EditMethod::ALL
                    .into_iter()
                    .filter(|m| !edits.contains_key(m))
                    .map(|m| (m, "no edit in input".to_string()))
                    .collect();
                EditBundle { base, edits, skipped }
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum EditError {
    #[error("triplet {0} is not in the graph")]
    NotInGraph(Triplet),
    #[error("no candidate objects for method {0}")]
    EmptyCandidateSet(EditMethod),
    #[error(transparent)]
    Kg(#[from] KgError),
}

/// Per-triplet state shared by all six predicates.
struct CandidateContext<'g> {
    g: &'g KnowledgeGraph,
    subject: u32,
    object: u32,
    object_concept: &'g str,
    object_label: String,
    dist: Vec<Option<u8>>,
    same_relation: Option<&'g BTreeSet<EntityId>>,
    true_objects: BTreeSet<EntityId>,
}

impl<'g> CandidateContext<'g> {
    fn new(g: &'g KnowledgeGraph, t: &Triplet) -> Result<Self, EditError> {
        if !g.contains(t) {
            return Err(EditError::NotInGraph(t.clone()));
        }
        let subject = g.ix(&t.subject)?;
        let object = g.ix(&t.object)?;
        let obj = g.entity_at(object);
        Ok(Self {
            g,
            subject,
            object,
            object_concept: &obj.concept,
            object_label: obj.label.to_lowercase(),
            dist: g.distances_from(subject, MAX_NEIGHBOR_HOPS),
            same_relation: g.relation_objects_ref(&t.relation),
            true_objects: g.objects_for(&t.subject, &t.relation),
        })
    }

    fn passes_common(&self, x: u32) -> bool {
        if x == self.subject || x == self.object {
            return false;
        }
        let e = self.g.entity_at(x);
        !self.true_objects.contains(&e.id) && e.label.to_lowercase() != self.object_label
    }

    fn admits(&self, x: u32, m: EditMethod) -> bool {
        if !self.passes_common(x) {
            return false;
        }
        let neighbor = self.dist[x as usize].is_some_and(|d| d >= 1);
        let e = self.g.entity_at(x);
        let same_concept = e.concept == self.object_concept;
        let same_relation = self.same_relation.is_some_and(|s| s.contains(&e.id));
        match m {
            EditMethod::Nsc => neighbor && same_concept,
            EditMethod::Ndc => neighbor && !same_concept,
            EditMethod::Nnsc => !neighbor && same_concept,
            EditMethod::Nndc => !neighbor && !same_concept,
            EditMethod::Nnsr => !neighbor && same_relation,
            EditMethod::Nndr => !neighbor && !same_relation,
        }
    }

    fn candidates(&self, m: EditMethod) -> BTreeSet<EntityId> {
        (0..self.g.entity_count() as u32)
            .filter(|&x| self.admits(x, m))
            .map(|x| self.g.entity_at(x).id.clone())
            .collect()
    }

    fn hop(&self, x: &EntityId) -> Option<u8> {
        let ix = self.g.ix(x).ok()?;
        self.dist[ix as usize]
    }

    fn sample(&self, t: &Triplet, m: EditMethod, seed: u64) -> Result<FalseTriplet, EditError> {
        let pool = self.candidates(m);
        let edited = pick(&pool, seed).ok_or(EditError::EmptyCandidateSet(m))?;
        let hop = if m.is_neighbor() { self.hop(&edited) } else { None };
        Ok(FalseTriplet {
            base: t.clone(),
            edited_object: edited,
            method: m,
            hop,
            seed,
        })
    }
}

/// Uniform draw from a sorted set.
fn pick(pool: &BTreeSet<EntityId>, seed: u64) -> Option<EntityId> {
    if pool.is_empty() {
        return None;
    }
    let i = rng_from_seed(seed).gen_range(0..pool.len());
    pool.iter().nth(i).cloned()
}

/// The seed `edit_all` hands to method `m` for a triplet seeded with `seed`.
pub fn method_seed(seed: u64, m: EditMethod) -> u64 {
    derive_seed(seed, m.code())
}

/// Every valid edited object for `t` under method `m`.
///
/// Common exclusions: the original object, the subject, any `x` with
/// `<s, r, x>` already stored, and any `x` whose label equals the original
/// object's label ignoring case.
pub fn candidates(g: &KnowledgeGraph, t: &Triplet, m: EditMethod) -> Result<BTreeSet<EntityId>, EditError> {
    Ok(CandidateContext::new(g, t)?.candidates(m))
}

pub fn candidates_all(g: &KnowledgeGraph, t: &Triplet) -> Result<BTreeMap<EditMethod, BTreeSet<EntityId>>, EditError> {
    let ctx = CandidateContext::new(g, t)?;
    Ok(EditMethod::ALL.into_iter().map(|m| (m, ctx.candidates(m))).collect())
}

pub fn edit(g: &KnowledgeGraph, t: &Triplet, m: EditMethod, seed: u64) -> Result<FalseTriplet, EditError> {
    CandidateContext::new(g, t)?.sample(t, m, seed)
}

/// Applies all six methods with per-method sub-seeds. Infeasible methods go
/// to `skipped`; only a triplet missing from the graph is an error.
pub fn edit_all(g: &KnowledgeGraph, t: &Triplet, seed: u64) -> Result<EditBundle, EditError> {
    let ctx = CandidateContext::new(g, t)?;
    let mut bundle = EditBundle {
        base: t.clone(),
        edits: BTreeMap::new(),
        skipped: BTreeMap::new(),
    };
    for m in EditMethod::ALL {
        match ctx.sample(t, m, method_seed(seed, m)) {
            Ok(ft) => {
                bundle.edits.insert(m, ft);
            }
            Err(e) => {
                bundle.skipped.insert(m, e.to_string());
            }
        }
    }
    Ok(bundle)
}

/// Seed used for triplet `t` inside a run seeded with `run_seed`. Keyed by
/// triplet content, so it does not depend on input order.
pub fn triplet_seed(run_seed: u64, t: &Triplet) -> u64 {
    derive_seed(run_seed, &t.key())
}

pub fn edit_triplets(g: &KnowledgeGraph, triplets: &[Triplet], run_seed: u64) -> Result<Vec<EditBundle>, EditError> {
    triplets
        .iter()
        .map(|t| edit_all(g, t, triplet_seed(run_seed, t)))
        .collect()
}

/// Re-derives every predicate for `ft` from the raw entity table and triplet
/// list, without the graph's indices. True iff the method predicate, the
/// common exclusions and the recorded hop all check out.
pub fn verify_method(g: &KnowledgeGraph, ft: &FalseTriplet) -> bool {
    let t = &ft.base;
    let x = &ft.edited_object;
    let (Some(subject), Some(object), Some(edited)) = (g.entity(&t.subject), g.entity(&t.object), g.entity(x)) else {
        return false;
    };
    if !g.triplets().any(|u| u == t) {
        return false;
    }
    if x == &t.object || x == &t.subject {
        return false;
    }
    if g.triplets()
        .any(|u| u.subject == t.subject && u.relation == t.relation && &u.object == x)
    {
        return false;
    }
    if edited.label.to_lowercase() == object.label.to_lowercase() {
        return false;
    }

    let distance = scan_distance(g, &subject.id, x, MAX_NEIGHBOR_HOPS);
    let neighbor = distance.is_some();
    let same_concept = edited.concept == object.concept;
    let same_relation = g.triplets().any(|u| u.relation == t.relation && &u.object == x);

    let predicate = match ft.method {
        EditMethod::Nsc => neighbor && same_concept,
        EditMethod::Ndc => neighbor && !same_concept,
        EditMethod::Nnsc => !neighbor && same_concept,
        EditMethod::Nndc => !neighbor && !same_concept,
        EditMethod::Nnsr => !neighbor && same_relation,
        EditMethod::Nndr => !neighbor && !same_relation,
    };
    let hop_ok = if ft.method.is_neighbor() {
        ft.hop == distance
    } else {
        ft.hop.is_none()
    };
    predicate && hop_ok
}

/// Level-synchronous search that rescans the triplet list at every level.
fn scan_distance(g: &KnowledgeGraph, from: &EntityId, to: &EntityId, cap: u8) -> Option<u8> {
    if from == to {
        return None;
    }
    let mut seen: HashSet<&EntityId> = HashSet::from([from]);
    let mut frontier: HashSet<&EntityId> = HashSet::from([from]);
    for d in 1..=cap {
        let mut next = HashSet::new();
        for u in g.triplets() {
            for (a, b) in [(&u.subject, &u.object), (&u.object, &u.subject)] {
                if frontier.contains(a) && !seen.contains(b) {
                    next.insert(b);
                }
            }
        }
        if next.contains(to) {
            return Some(d);
        }
        if next.is_empty() {
            return None;
        }
        seen.extend(next.iter().copied());
        frontier = next;
    }
    None
}

/// Per-method counts for a batch of bundles.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSummary {
    pub triplets: usize,
    pub edits: usize,
    pub edits_by_method: BTreeMap<EditMethod, usize>,
    pub skipped_by_method: BTreeMap<EditMethod, usize>,
    pub fully_feasible: usize,
}

impl EditSummary {
    pub fn from_bundles(bundles: &[EditBundle]) -> Self {
        let mut s = EditSummary {
            triplets: bundles.len(),
            ..Default::default()
        };
        for m in EditMethod::ALL {
            s.edits_by_method.insert(m, 0);
            s.skipped_by_method.insert(m, 0);
        }
        for b in bundles {
            s.edits += b.edits.len();
            for m in b.edits.keys() {
                *s.edits_by_method.get_mut(m).unwrap() += 1;
            }
            for m in b.skipped.keys() {
                *s.skipped_by_method.get_mut(m).unwrap() += 1;
            }
            if b.skipped.is_empty() {
                s.fully_feasible += 1;
            }
        }
        s
    }
}
