//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use common::{
    brute_force, diff_span, floyd_warshall, graded, recount, scale_filter, scale_graph, scale_phrases, scale_questions,
    synthetic, toy_spec, ToySpec,
};
use kgfpq::chat::{ChatBackendConfig, ScriptedClient};
use kgfpq::editor::{candidates_all, edit_all, edit_triplets, verify_method};
use kgfpq::eval_harness::mock::{MockEndpoint, MockPolicy};
use kgfpq::eval_harness::{
    hard_vote, run_eval, EvalRecord, EvalTarget, Final, GateStatus, ModelEndpoint, Target, Task, Vote,
};
use kgfpq::jsonl::{read_jsonl, write_jsonl};
use kgfpq::judge::{AnswerGenerator, AnswerLabel, HeuristicJudge};
use kgfpq::metrics_report::{aggregate, size_class_average, AccuracyCell, Column};
use kgfpq::prompts::{render_triplet, AnswerPrompts, QuestionPrompts};
use kgfpq::qgen::{
    build_question_records, ChatQuestionBackend, QuestionBackend, QuestionFormat, QuestionRecord, TemplateBackend,
    TripletLabels,
};
use kgfpq::{extract_true_triplets, load_graph, EditMethod, EntityId, FalseTriplet, Hop, KnowledgeGraph};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use serde_json::Value;
use tempfile::TempDir;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn runner(seed: u8) -> TestRunner {
    TestRunner::new_with_rng(Config::default(), TestRng::from_seed(RngAlgorithm::ChaCha, &[seed; 32]))
}

fn random_graphs(n: usize, seed: u8) -> Vec<KnowledgeGraph> {
    let mut r = runner(seed);
    let strategy = toy_spec();
    (0..n)
        .map(|_| strategy.new_tree(&mut r).unwrap().current().build())
        .collect()
}

fn path_graph(len: usize) -> KnowledgeGraph {
    ToySpec {
        entities: (0..len).map(|i| (i % 3, i % 8)).collect(),
        edges: (0..len - 1).map(|i| (i, 0, i + 1)).collect(),
    }
    .build()
}

/// The toy fixture run once through every stage, shared by criteria 4 and 5.
fn desk_run() -> &'static TempDir {
    static RUN: OnceLock<TempDir> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        support::full_run(dir.path(), &[]);
        dir
    })
}

fn toy_graph() -> KnowledgeGraph {
    load_graph(
        &support::fixture_file("entities.jsonl"),
        &support::fixture_file("triplets.jsonl"),
    )
    .unwrap()
    .0
}

fn scale_batches() -> Vec<QuestionRecord> {
    scale_questions(50)
}

fn check_false(g: &KnowledgeGraph, ft: &FalseTriplet) -> Result<(), String> {
    let t = &ft.base;
    ensure!(
        !g.has_triplet(&t.subject, &t.relation, &ft.edited_object),
        "{ft:?} is stored in the graph"
    );
    ensure!(ft.edited_object != t.object, "{ft:?} keeps the original object");
    ensure!(verify_method(g, ft), "{ft:?} does not satisfy its method");
    Ok(())
}

fn check_substitution(q: &QuestionRecord) -> Result<usize, String> {
    ensure!(
        q.tpq_text.matches(&q.object_label).count() == 1,
        "{}: object label not unique in TPQ",
        q.id
    );
    let at = q.tpq_text.find(&q.object_label).unwrap();
    for (m, e) in &q.fpqs {
        let spliced = format!(
            "{}{}{}",
            &q.tpq_text[..at],
            e.edited_label,
            &q.tpq_text[at + q.object_label.len()..]
        );
        ensure!(
            e.fpq_text == spliced,
            "{} {m}: {:?} is not the TPQ with one span replaced",
            q.id,
            e.fpq_text
        );
        let (removed, inserted) = diff_span(&q.tpq_text, &e.fpq_text);
        ensure!(
            q.object_label.contains(removed) && e.edited_label.contains(inserted),
            "{} {m}: diff region {removed:?} -> {inserted:?} leaves the label span",
            q.id
        );
    }
    Ok(q.fpqs.len())
}

fn c1_editing_oracle() -> Check {
    let start = Instant::now();
    let graphs = random_graphs(120, 1);
    let mut checks = 0;
    for g in &graphs {
        for t in g.triplets() {
            let all = candidates_all(g, t).map_err(|e| e.to_string())?;
            for m in EditMethod::ALL {
                ensure!(
                    all[&m] == brute_force(g, t, m),
                    "{t:?} {m}: candidates differ from brute force"
                );
                checks += 1;
            }
        }
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:.2?}");
    Ok(format!(
        "{} graphs, {checks} candidate sets agree, {took:.2?}",
        graphs.len()
    ))
}

fn c2_hop_oracle() -> Check {
    let mut graphs = random_graphs(49, 2);
    graphs.push(path_graph(9));
    let (mut pairs, mut beyond) = (0, 0);
    for g in &graphs {
        let (ids, d) = floyd_warshall(g);
        for (i, a) in ids.iter().enumerate() {
            for (j, b) in ids.iter().enumerate() {
                let want = match d[i][j] {
                    Some(k) if k <= 5 => Hop::Within(k as u8),
                    _ => Hop::Beyond,
                };
                let got = g
                    .hop_distance(&EntityId::new(a), &EntityId::new(b), 5)
                    .map_err(|e| e.to_string())?;
                ensure!(got == want, "{a}->{b}: {got:?} vs {want:?}");
                pairs += 1;
                beyond += usize::from(want == Hop::Beyond);
            }
        }
    }
    ensure!(beyond > 0, "no Beyond case exercised");
    Ok(format!(
        "{} graphs, {pairs} pairs agree ({beyond} beyond cap 5)",
        graphs.len()
    ))
}

fn c3_scale_identity() -> Check {
    let n = 50;
    let g = scale_graph();
    let triplets = extract_true_triplets(&g, &scale_filter(), n, 3).map_err(|e| e.to_string())?;
    ensure!(triplets.len() == n, "extracted {}", triplets.len());
    let bundles = edit_triplets(&g, &triplets, 3).map_err(|e| e.to_string())?;
    ensure!(
        bundles.iter().all(|b| b.edits.len() == 6),
        "not every triplet is fully feasible"
    );
    let backend = TemplateBackend::new(scale_phrases());
    let dir = tempfile::tempdir().unwrap();
    let mut counts = Vec::new();
    for fmt in QuestionFormat::ALL {
        let batch = build_question_records(&g, &bundles, fmt, &backend, "People");
        let path = dir.path().join(format!("{}.jsonl", fmt.code()));
        write_jsonl(&path, &batch.records).map_err(|e| e.to_string())?;
        let text = std::fs::read_to_string(&path).unwrap();
        let (mut tpqs, mut fpqs) = (0, 0);
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            tpqs += 1;
            fpqs += v["fpqs"].as_object().map_or(0, |o| o.len());
        }
        ensure!(tpqs == n && fpqs == 6 * n, "{fmt}: {tpqs} TPQs, {fpqs} FPQs");
        counts.push(format!("{fmt}: {tpqs} TPQs / {fpqs} FPQs"));
    }
    Ok(format!("N={n}; {}", counts.join(", ")))
}

fn c4_falsity() -> Check {
    let mut checked = 0;
    for (i, g) in random_graphs(100, 4).iter().enumerate() {
        for t in g.triplets() {
            for ft in edit_all(g, t, i as u64).map_err(|e| e.to_string())?.edits.values() {
                check_false(g, ft)?;
                checked += 1;
            }
        }
    }
    let g = scale_graph();
    let triplets = extract_true_triplets(&g, &scale_filter(), 53, 4).map_err(|e| e.to_string())?;
    for b in edit_triplets(&g, &triplets, 4).map_err(|e| e.to_string())? {
        for ft in b.edits.values() {
            check_false(&g, ft)?;
            checked += 1;
        }
    }
    let toy = toy_graph();
    let emitted: Vec<FalseTriplet> =
        read_jsonl(&desk_run().path().join("false_triplets.jsonl")).map_err(|e| e.to_string())?;
    ensure!(!emitted.is_empty(), "desk run emitted no false triplets");
    for ft in &emitted {
        check_false(&toy, ft)?;
    }
    checked += emitted.len();
    Ok(format!("{checked} false triplets, 0 violations"))
}

fn c5_substitution() -> Check {
    let mut fpqs = 0;
    for q in scale_batches() {
        fpqs += check_substitution(&q)?;
    }
    let cli: Vec<QuestionRecord> = read_jsonl(&desk_run().path().join("questions.jsonl")).map_err(|e| e.to_string())?;
    for q in &cli {
        fpqs += check_substitution(q)?;
    }
    Ok(format!("{fpqs} FPQs diff-verified, 0 violations"))
}

fn vote_oracle(v: &[Vote; 3]) -> Option<Vote> {
    v.iter().copied().find(|x| v.iter().filter(|y| *y == x).count() >= 2)
}

fn target(name: &str, client: Arc<dyn kgfpq::chat::ChatClient>) -> EvalTarget {
    EvalTarget {
        endpoint: ModelEndpoint::new(name, "http://unused/v1", "m"),
        client,
    }
}

fn c6_protocol() -> Check {
    let qs = scale_questions(10);
    let tasks: BTreeSet<Task> = Task::ALL.into_iter().collect();
    let judge = HeuristicJudge::default();

    // (a) Every gate fails.
    let denier = Arc::new(ScriptedClient::constant("No"));
    let run = run_eval(
        &[target("denier", denier.clone())],
        &qs,
        &tasks,
        Some(&judge),
        None,
        false,
    )
    .map_err(|e| e.to_string())?;
    let fpq_texts: Vec<&str> = qs
        .iter()
        .flat_map(|q| q.fpqs.values().map(|e| e.fpq_text.as_str()))
        .collect();
    let fpq_calls = denier
        .requests()
        .iter()
        .filter(|r| fpq_texts.iter().any(|t| r.prompt().contains(t)))
        .count();
    let gates = qs.iter().filter(|q| q.format == QuestionFormat::YesNo).count();
    ensure!(fpq_calls == 0, "(a) {fpq_calls} FPQ requests after failed gates");
    ensure!(
        denier.call_count() == 3 * gates,
        "(a) {} calls for {gates} gates",
        denier.call_count()
    );
    ensure!(
        run.records
            .iter()
            .all(|r| r.target == Target::Tpq && r.gate == GateStatus::Failed),
        "(a) FPQ records emitted"
    );

    // (b) Exhaustive vote table.
    let alphabet = [Vote::Yes, Vote::No, Vote::Unparseable];
    let mut cases = 0;
    for a in alphabet {
        for b in alphabet {
            for c in alphabet {
                ensure!(
                    hard_vote(&[a, b, c]) == vote_oracle(&[a, b, c]),
                    "(b) {a:?} {b:?} {c:?}"
                );
                cases += 1;
            }
        }
    }

    // (c) Sycophant.
    let syc = target("sycophant", Arc::new(MockEndpoint::new(MockPolicy::AlwaysYes, &qs)));
    let run = run_eval(&[syc], &qs, &tasks, Some(&judge), None, false).map_err(|e| e.to_string())?;
    let acc = |fpq: bool| {
        let rs: Vec<&EvalRecord> = run
            .records
            .iter()
            .filter(|r| (r.target != Target::Tpq) == fpq)
            .collect();
        rs.iter().filter(|r| r.final_ == Final::Correct).count() as f64 / rs.len() as f64
    };
    let (tpq, fpq) = (acc(false), acc(true));
    ensure!(tpq == 1.0 && fpq == 0.0, "(c) sycophant TPQ {tpq}, FPQ {fpq}");
    Ok(format!(
        "(a) 0 FPQ calls after {gates} failed gates, (b) {cases}/27 vote cases, (c) sycophant TPQ 1.0 / FPQ 0.0"
    ))
}

fn close(got: Option<f64>, want: Option<f64>) -> bool {
    match (got, want) {
        (Some(a), Some(b)) => a == b || (a - b).abs() <= 1e-12 * b.abs(),
        (None, None) => true,
        _ => false,
    }
}

fn cell_matches(cell: &AccuracyCell, correct: u64, total: u64) -> bool {
    cell.correct == correct
        && cell.total == total
        && close(cell.accuracy, (total > 0).then(|| correct as f64 / total as f64))
}

fn c7_metrics() -> Check {
    let qs = scale_questions(24);
    let mut records = synthetic(&qs, 77);
    ensure!(
        records.len() >= 200,
        "synthetic transcript has {} records",
        records.len()
    );
    records.truncate(200);
    let report = aggregate(&records, &qs).map_err(|e| e.to_string())?;
    let oracle = recount(&records);

    // Hop cells and TPQ cells, recounted in the same single pass.
    let hop_of: HashMap<(&str, EditMethod), Option<u8>> = qs
        .iter()
        .flat_map(|q| q.fpqs.iter().map(move |(m, e)| ((q.id.as_str(), *m), e.hop)))
        .collect();
    let mut hops: HashMap<(String, Column, EditMethod, u8), (u64, u64)> = HashMap::new();
    let mut tpq: HashMap<String, (u64, u64)> = HashMap::new();
    for r in &records {
        let scored = r.final_ != Final::Error;
        let hit = u64::from(r.final_ == Final::Correct);
        match r.target {
            Target::Tpq if scored => {
                let e = tpq.entry(r.model.clone()).or_default();
                e.0 += hit;
                e.1 += 1;
            }
            Target::Fpq(m) if scored && r.gate == GateStatus::Passed => {
                if let Some(h) = hop_of[&(r.question_id.as_str(), m)] {
                    let e = hops.entry((r.model.clone(), Column::of(r), m, h)).or_default();
                    e.0 += hit;
                    e.1 += 1;
                }
            }
            _ => {}
        }
    }

    let mut cells = 0;
    for (model, mr) in &report.models {
        let (c, t) = tpq.get(model).copied().unwrap_or_default();
        ensure!(cell_matches(&mr.tpq, c, t), "{model} TPQ");
        cells += 1;
        for (col, cr) in &mr.domains["People"].columns {
            let (mut oc, mut ot) = (0, 0);
            for (m, cell) in &cr.methods {
                let want = oracle.get(&(model.clone(), *col, *m)).copied().unwrap_or_default();
                ensure!(cell_matches(cell, want.correct, want.total), "{model} {col:?} {m}");
                ensure!(cell.errors == want.errors, "{model} {col:?} {m} errors");
                oc += want.correct;
                ot += want.total;
                cells += 1;
            }
            ensure!(cell_matches(&cr.overall, oc, ot), "{model} {col:?} overall");
            cells += 1;
            for (m, by_hop) in &cr.hops {
                for (h, cell) in by_hop {
                    let (c, t) = hops.get(&(model.clone(), *col, *m, *h)).copied().unwrap_or_default();
                    ensure!(cell_matches(cell, c, t), "{model} {col:?} {m} hop {h}");
                    cells += 1;
                }
            }
        }
    }

    // Pooled overall: corrects 3,2,4,1,0,2 over 4 gated triplets -> 12/24.
    let four = scale_questions(4);
    let r = aggregate(&graded(&four, "m", [3, 2, 4, 1, 0, 2]), &four).map_err(|e| e.to_string())?;
    let overall = &r.models["m"].domains["People"].columns[&Column::Discriminative].overall;
    ensure!(
        overall.correct == 12 && overall.total == 24 && overall.accuracy == Some(0.5),
        "pooled overall {overall:?}"
    );

    // Class average: 0.4 and 0.6 in one class -> 0.5.
    let five = scale_questions(5);
    let mut both = graded(&five, "x", [2; 6]);
    both.extend(graded(&five, "y", [3; 6]));
    let classes = [("x", "7B"), ("y", "7B")]
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .into();
    let avg = size_class_average(&aggregate(&both, &five).map_err(|e| e.to_string())?, &classes)
        .map_err(|e| e.to_string())?;
    let class_overall = avg["7B"]["People"][&Column::Discriminative].overall;
    ensure!(close(class_overall, Some(0.5)), "class average {class_overall:?}");

    Ok(format!(
        "{} records, {cells} cells match the recount; pooled 12/24 = 0.5; class mean (0.4, 0.6) = 0.5",
        records.len()
    ))
}

fn c8_determinism() -> Check {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    support::full_run(a.path(), &[]);
    support::full_run(b.path(), &[]);
    for f in ["false_triplets.jsonl", "questions.jsonl", "report/report.json"] {
        let x = std::fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(x == y, "{f} differs between runs");
    }
    Ok("false_triplets.jsonl, questions.jsonl, report/report.json byte-identical across two runs".into())
}

fn golden(name: &str) -> Vec<u8> {
    let p = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/golden")
        .join(format!("{name}.json"));
    std::fs::read(p).unwrap()
}

fn c9_prompt_fidelity() -> Check {
    let config = ChatBackendConfig::new("http://unused/v1", "gen-model");
    let client = Arc::new(ScriptedClient::constant("Did John Lennon die in New York City?"));
    let backend = ChatQuestionBackend {
        client: client.clone(),
        config: config.clone(),
        prompts: QuestionPrompts::default(),
    };
    let labels = TripletLabels {
        subject: "John Lennon".into(),
        relation: "place of death".into(),
        object: "New York City".into(),
    };
    for fmt in QuestionFormat::ALL {
        backend.generate(&labels, fmt).map_err(|e| e.to_string())?;
    }
    let generator = AnswerGenerator {
        client: client.clone(),
        config: config.clone(),
        prompts: AnswerPrompts::default(),
    };
    let knowledge = render_triplet("Leonardo da Vinci", "place of death", "Amboise");
    let mut bodies: Vec<(&str, Vec<u8>)> = client
        .requests()
        .iter()
        .zip(["yes_no", "wh"])
        .map(|(r, n)| (n, r.body()))
        .collect();
    for (label, name) in [
        (AnswerLabel::Factual, "factual_answer"),
        (AnswerLabel::NonFactual, "non_factual_answer"),
    ] {
        let prompt = generator
            .prompt(label, "Where in Paris did Leonardo da Vinci die?", &knowledge)
            .map_err(|e| e.to_string())?;
        bodies.push((name, config.request(&prompt).body()));
    }
    for (name, body) in &bodies {
        ensure!(*body == golden(name), "{name} request body differs from golden file");
    }
    Ok(format!("{} request bodies byte-match golden files", bodies.len()))
}

fn c10_desk_run() -> Check {
    let toy = toy_graph();
    ensure!(
        toy.entities().count() == 10,
        "fixture has {} entities",
        toy.entities().count()
    );
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let stdout = support::full_run(dir.path(), &[]);
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(5), "took {took:.2?}");

    let p = |f: &str| dir.path().join(f);
    let false_triplets: Vec<FalseTriplet> = read_jsonl(&p("false_triplets.jsonl")).map_err(|e| e.to_string())?;
    let methods: BTreeSet<EditMethod> = false_triplets.iter().map(|f| f.method).collect();
    ensure!(methods.len() == 6, "only {} methods produced edits", methods.len());
    for ft in &false_triplets {
        check_false(&toy, ft)?;
    }
    let questions: Vec<QuestionRecord> = read_jsonl(&p("questions.jsonl")).map_err(|e| e.to_string())?;
    ensure!(!questions.is_empty(), "no questions");
    for q in &questions {
        check_substitution(q)?;
    }
    let records: Vec<EvalRecord> = read_jsonl(&p("eval_records.jsonl")).map_err(|e| e.to_string())?;
    let passed: BTreeSet<(&str, &str)> = records
        .iter()
        .filter(|r| r.target == Target::Tpq && r.gate == GateStatus::Passed)
        .map(|r| (r.model.as_str(), r.triplet_id.as_str()))
        .collect();
    for r in &records {
        ensure!(
            r.responses.len() == 3,
            "{} has {} responses",
            r.question_id,
            r.responses.len()
        );
        if r.target != Target::Tpq {
            ensure!(
                passed.contains(&(r.model.as_str(), r.triplet_id.as_str())),
                "FPQ asked past a failed gate"
            );
        }
    }
    ensure!(
        stdout.contains("triplets x 6 methods x 2 formats"),
        "report printed no scale line"
    );
    let report: Value = serde_json::from_str(&std::fs::read_to_string(p("report/report.json")).unwrap()).unwrap();
    let acc = |m: &str, ptr: &str| report["models"][m].pointer(ptr).and_then(Value::as_f64);
    ensure!(
        acc("truthful-7b", "/overall/discriminative/accuracy") == Some(1.0),
        "truthful discriminative"
    );
    ensure!(
        acc("truthful-7b", "/overall/generative_heuristic/accuracy") == Some(1.0),
        "truthful generative"
    );
    ensure!(acc("sycophant-7b", "/tpq/accuracy") == Some(1.0), "sycophant TPQ");
    ensure!(
        acc("sycophant-7b", "/overall/discriminative/accuracy") == Some(0.0),
        "sycophant FPQ"
    );
    ensure!(acc("skeptic-13b", "/tpq/accuracy") == Some(0.0), "skeptic TPQ");
    for f in [
        "report/report.csv",
        "report/hops_nsc.svg",
        "size_classes.json",
        "judge_corpus.jsonl",
    ] {
        ensure!(p(f).exists(), "{f} missing");
    }
    Ok(format!(
        "{} false triplets, {} question records, {} eval records, {took:.2?}",
        false_triplets.len(),
        questions.len(),
        records.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("editing-method oracle equivalence", c1_editing_oracle),
        ("hop-distance oracle", c2_hop_oracle),
        ("scale identity", c3_scale_identity),
        ("falsity guarantee", c4_falsity),
        ("substitution fidelity", c5_substitution),
        ("protocol conformance", c6_protocol),
        ("metrics recount", c7_metrics),
        ("determinism", c8_determinism),
        ("prompt fidelity", c9_prompt_fidelity),
        ("end-to-end desk run", c10_desk_run),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
