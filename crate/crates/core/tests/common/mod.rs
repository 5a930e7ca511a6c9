#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use kgfpq::eval_harness::{EvalRecord, Final, GateStatus, Target, Task};
use kgfpq::judge::JudgeSource;
use kgfpq::metrics_report::Column;
use kgfpq::qgen::{QuestionFormat, QuestionRecord};
use kgfpq::{EditMethod, Entity, EntityId, KnowledgeGraph, Triplet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONCEPTS: [&str; 3] = ["city", "human", "painting"];
pub const RELATIONS: [&str; 3] = ["r0", "r1", "r2"];
// Includes case-insensitive collisions so label exclusion gets exercised.
pub const LABELS: [&str; 8] = ["Alpha", "alpha", "Beta", "Gamma", "GAMMA", "Delta", "Eps", "Zeta"];

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub entities: Vec<(usize, usize)>,
    pub edges: Vec<(usize, usize, usize)>,
}

impl ToySpec {
    pub fn build(&self) -> KnowledgeGraph {
        let entities = self
            .entities
            .iter()
            .enumerate()
            .map(|(i, (c, l))| Entity::new(&format!("e{i:02}"), LABELS[*l], CONCEPTS[*c]));
        let triplets = self
            .edges
            .iter()
            .filter(|(s, _, o)| s != o)
            .map(|(s, r, o)| Triplet::new(&format!("e{s:02}"), RELATIONS[*r], &format!("e{o:02}")));
        KnowledgeGraph::from_parts(entities, triplets).expect("toy graph is valid")
    }
}

/// Graphs with 2..=12 entities and up to 20 edges.
pub fn toy_spec() -> impl Strategy<Value = ToySpec> {
    (2usize..=12).prop_flat_map(|n| {
        (
            prop::collection::vec((0..CONCEPTS.len(), 0..LABELS.len()), n),
            prop::collection::vec((0..n, 0..RELATIONS.len(), 0..n), 1..20),
        )
            .prop_map(|(entities, edges)| ToySpec { entities, edges })
    })
}

/// All-pairs undirected shortest paths; `None` when unreachable.
pub fn floyd_warshall(g: &KnowledgeGraph) -> (Vec<String>, Vec<Vec<Option<u32>>>) {
    let ids: Vec<String> = g.entities().map(|e| e.id.as_str().to_string()).collect();
    let n = ids.len();
    let ix = |id: &str| ids.iter().position(|x| x == id).unwrap();
    let mut d = vec![vec![None; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for t in g.triplets() {
        let (a, b) = (ix(t.subject.as_str()), ix(t.object.as_str()));
        d[a][b] = Some(1);
        d[b][a] = Some(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(x), Some(y)) = (d[i][k], d[k][j]) {
                    if d[i][j].is_none_or(|c| x + y < c) {
                        d[i][j] = Some(x + y);
                    }
                }
            }
        }
    }
    (ids, d)
}

pub const SCALE_CITIES_A: [&str; 5] = ["Avalon", "Brindle", "Corvid", "Dunmore", "Elmstead"];
pub const SCALE_CITIES_B: [&str; 3] = ["Fjordby", "Glimmer", "Hollowmere"];

/// Two disconnected clusters where every `place of birth` triplet of a
/// human admits all six editing methods. 50 humans in cluster A, 3 in B.
pub fn scale_graph() -> KnowledgeGraph {
    let mut entities = Vec::new();
    let mut triplets = Vec::new();
    for (i, c) in SCALE_CITIES_A.iter().enumerate() {
        entities.push(Entity::new(&format!("ca{i}"), c, "city"));
        if i > 0 {
            triplets.push(Triplet::new(&format!("ca{}", i - 1), "adjacent to", &format!("ca{i}")));
        }
    }
    for i in 0..50 {
        entities.push(Entity::new(&format!("h{i:02}"), &format!("Person {i:02}"), "human"));
        triplets.push(Triplet::new(
            &format!("h{i:02}"),
            "place of birth",
            &format!("ca{}", i % 5),
        ));
    }
    for (i, c) in SCALE_CITIES_B.iter().enumerate() {
        entities.push(Entity::new(&format!("cb{i}"), c, "city"));
        entities.push(Entity::new(&format!("v{i}"), &format!("Visitor {i}"), "human"));
        triplets.push(Triplet::new(&format!("v{i}"), "place of birth", &format!("cb{i}")));
        if i > 0 {
            triplets.push(Triplet::new(&format!("cb{}", i - 1), "adjacent to", &format!("cb{i}")));
        }
    }
    entities.push(Entity::new("lake", "Quiet Lake", "painting"));
    triplets.push(Triplet::new("lake", "location", "cb0"));
    KnowledgeGraph::from_parts(entities, triplets).expect("scale graph is valid")
}

pub fn scale_filter() -> kgfpq::DomainFilter {
    kgfpq::DomainFilter {
        name: "People".into(),
        allowed_concepts: ["human".to_string()].into(),
        allowed_relations: ["place of birth".to_string()].into(),
        relation_blacklist: Default::default(),
    }
}

pub fn scale_phrases() -> kgfpq::qgen::PhraseTable {
    kgfpq::qgen::PhraseTable::from([(
        "place of birth".to_string(),
        kgfpq::qgen::PhraseEntry {
            yesno_phrase: Some("come from".into()),
            wh_template: Some("In which district of {object} was {subject} born?".into()),
        },
    )])
}

/// Inserted prefix and removed span of the one differing region of `a` and `b`.
pub fn diff_span<'a>(a: &'a str, b: &'a str) -> (&'a str, &'a str) {
    let pre = a
        .char_indices()
        .zip(b.chars())
        .find(|((_, x), y)| x != y)
        .map_or(a.len().min(b.len()), |((i, _), _)| i);
    let suf = a[pre..]
        .chars()
        .rev()
        .zip(b[pre..].chars().rev())
        .take_while(|(x, y)| x == y)
        .map(|(x, _)| x.len_utf8())
        .sum::<usize>();
    (&a[pre..a.len() - suf], &b[pre..b.len() - suf])
}

/// Template-generated Yes-No and WH records for `n` triplets of the scale graph.
pub fn scale_questions(n: usize) -> Vec<kgfpq::qgen::QuestionRecord> {
    use kgfpq::qgen::{build_question_records, QuestionFormat, TemplateBackend};
    let g = scale_graph();
    let triplets = kgfpq::extract_true_triplets(&g, &scale_filter(), n, 21).unwrap();
    let bundles = kgfpq::editor::edit_triplets(&g, &triplets, 21).unwrap();
    let backend = TemplateBackend::new(scale_phrases());
    let mut out = Vec::new();
    for fmt in QuestionFormat::ALL {
        out.extend(build_question_records(&g, &bundles, fmt, &backend, "People").records);
    }
    out
}

/// Brute-force enumeration of each method's predicate over every entity.
pub fn brute_force(g: &KnowledgeGraph, t: &Triplet, m: EditMethod) -> BTreeSet<EntityId> {
    let (ids, d) = floyd_warshall(g);
    let s = ids.iter().position(|x| x == t.subject.as_str()).unwrap();
    let orig_label = g.label_of(&t.object).unwrap().to_lowercase();
    let orig_concept = g.concept_of(&t.object).unwrap();
    let relation_objects: BTreeSet<&EntityId> = g
        .triplets()
        .filter(|u| u.relation == t.relation)
        .map(|u| &u.object)
        .collect();
    let mut out = BTreeSet::new();
    for (i, id) in ids.iter().enumerate() {
        let x = EntityId::new(id);
        if x == t.subject || x == t.object {
            continue;
        }
        if g.triplets()
            .any(|u| u.subject == t.subject && u.relation == t.relation && u.object == x)
        {
            continue;
        }
        if g.label_of(&x).unwrap().to_lowercase() == orig_label {
            continue;
        }
        let neighbor = matches!(d[s][i], Some(k) if (1..=5).contains(&k));
        let same_concept = g.concept_of(&x).unwrap() == orig_concept;
        let keep = match m {
            EditMethod::Nsc => neighbor && same_concept,
            EditMethod::Ndc => neighbor && !same_concept,
            EditMethod::Nnsc => !neighbor && same_concept,
            EditMethod::Nndc => !neighbor && !same_concept,
            EditMethod::Nnsr => !neighbor && relation_objects.contains(&x),
            EditMethod::Nndr => !neighbor && !relation_objects.contains(&x),
        };
        if keep {
            out.insert(x);
        }
    }
    out
}

pub const FINALS: [Final; 5] = [
    Final::Correct,
    Final::Incorrect,
    Final::Unparseable,
    Final::Abstain,
    Final::Error,
];

pub fn record(q: &QuestionRecord, model: &str, task: Task, target: Target, gate: GateStatus, f: Final) -> EvalRecord {
    let generative = task == Task::Generative && target != Target::Tpq;
    EvalRecord {
        question_id: q.id.clone(),
        triplet_id: q.triplet_id.clone(),
        domain: q.domain.clone(),
        model: model.into(),
        task,
        target,
        hop: match target {
            Target::Fpq(m) => q.fpqs[&m].hop,
            Target::Tpq => None,
        },
        gate,
        responses: vec![String::new(); 3],
        votes: Vec::new(),
        judge_source: generative.then_some(JudgeSource::Heuristic),
        judgements: Vec::new(),
        errors: Vec::new(),
        final_: f,
    }
}

/// Random transcript shaped like the harness output, plus a few FPQ records
/// under a failed gate that aggregation must ignore.
pub fn synthetic(qs: &[QuestionRecord], seed: u64) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for model in ["m-a", "m-b", "m-c"] {
        for yn in qs.iter().filter(|q| q.format == QuestionFormat::YesNo) {
            let tpq = FINALS[rng.gen_range(0..5)];
            let gate = match tpq {
                Final::Correct => GateStatus::Passed,
                Final::Error => GateStatus::Error,
                _ => GateStatus::Failed,
            };
            out.push(record(yn, model, Task::Discriminative, Target::Tpq, gate, tpq));
            if gate != GateStatus::Passed && !rng.gen_bool(0.2) {
                continue;
            }
            let wh = qs
                .iter()
                .find(|q| q.triplet_id == yn.triplet_id && q.format == QuestionFormat::Wh)
                .unwrap();
            for (task, q) in [(Task::Discriminative, yn), (Task::Generative, wh)] {
                for &m in q.fpqs.keys() {
                    let mut r = record(q, model, task, Target::Fpq(m), gate, FINALS[rng.gen_range(0..5)]);
                    if task == Task::Generative && rng.gen_bool(0.3) {
                        r.judge_source = Some(JudgeSource::Remote);
                    }
                    out.push(r);
                }
            }
        }
    }
    out
}

#[derive(Default, Debug, Clone, Copy)]
pub struct Count {
    pub correct: u64,
    pub total: u64,
    pub errors: u64,
}

pub fn column_of(r: &EvalRecord) -> Column {
    match (r.task, r.judge_source) {
        (Task::Discriminative, _) => Column::Discriminative,
        (_, Some(JudgeSource::Heuristic)) => Column::GenerativeHeuristic,
        _ => Column::GenerativeRemote,
    }
}

/// Straight recount keyed by (model, column, method).
pub fn recount(records: &[EvalRecord]) -> HashMap<(String, Column, EditMethod), Count> {
    let mut out: HashMap<_, Count> = HashMap::new();
    for r in records {
        let Target::Fpq(m) = r.target else { continue };
        if r.gate != GateStatus::Passed {
            continue;
        }
        let c = out.entry((r.model.clone(), column_of(r), m)).or_default();
        if r.final_ == Final::Error {
            c.errors += 1;
        } else {
            c.total += 1;
            c.correct += u64::from(r.final_ == Final::Correct);
        }
    }
    out
}

pub fn yes_no(qs: &[QuestionRecord]) -> Vec<&QuestionRecord> {
    qs.iter().filter(|q| q.format == QuestionFormat::YesNo).collect()
}

/// Every gate passes; method `i` is answered correctly on the first
/// `corrects[i]` triplets.
pub fn graded(qs: &[QuestionRecord], model: &str, corrects: [usize; 6]) -> Vec<EvalRecord> {
    let mut out = Vec::new();
    for (t, q) in yes_no(qs).into_iter().enumerate() {
        out.push(record(
            q,
            model,
            Task::Discriminative,
            Target::Tpq,
            GateStatus::Passed,
            Final::Correct,
        ));
        for (i, m) in EditMethod::ALL.into_iter().enumerate() {
            let f = if t < corrects[i] {
                Final::Correct
            } else {
                Final::Incorrect
            };
            out.push(record(
                q,
                model,
                Task::Discriminative,
                Target::Fpq(m),
                GateStatus::Passed,
                f,
            ));
        }
    }
    out
}
