use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use chrono::Utc;
use kgfpq::chat::{ChatBackendConfig, ChatClient, ChatError, ChatRequest, HttpChatClient};
use kgfpq::editor::{edit_triplets, EditSummary};
use kgfpq::eval_harness::mock::MockEndpoint;
use kgfpq::eval_harness::{run_eval, write_records, EvalRecord, EvalTarget, Final, ModelEndpoint, Task};
use kgfpq::jsonl::{read_jsonl, write_jsonl};
use kgfpq::judge::{emit_judge_corpus, AnswerGenerator, HeuristicJudge, Judge, RemoteJudge};
use kgfpq::metrics_report::{aggregate, emit_report, size_class_average, summary_text};
use kgfpq::prompts::AnswerPrompts;
use kgfpq::qgen::review::review as review_records;
use kgfpq::qgen::{
    build_question_records, feasibility_probe, load_phrase_table, ChatQuestionBackend, QuestionBackend, QuestionFormat,
    QuestionRecord, TemplateBackend,
};
use kgfpq::seed::derive_seed;
use kgfpq::{extract_true_triplets, load_graph, EditBundle, FalseTriplet, KnowledgeGraph, Triplet};
use serde::Serialize;

use crate::config::{Config, JudgeConfig};
use crate::manifest::{manifest_path, sha256_hex, timestamp, RunManifest};
use crate::{Backend, Common};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    MissingInput,
    StageOrder,
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Runtime => 1,
            ErrorKind::Config => 3,
            ErrorKind::MissingInput => 4,
            ErrorKind::StageOrder => 5,
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub kind: ErrorKind,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for StageError {}

fn fail(kind: ErrorKind, message: impl Into<String>) -> anyhow::Error {
    StageError {
        kind,
        message: message.into(),
    }
    .into()
}

const TRUE_TRIPLETS: &str = "true_triplets.jsonl";
const FALSE_TRIPLETS: &str = "false_triplets.jsonl";
const QUESTIONS: &str = "questions.jsonl";
const EVAL_RECORDS: &str = "eval_records.jsonl";

/// Shared state of one stage invocation.
struct Run {
    stage: &'static str,
    cfg: Config,
    config_path: PathBuf,
    config_sha256: String,
    seed: u64,
    out: PathBuf,
    domain_flag: Option<String>,
    started: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn open(c: &Common, stage: &'static str, requires: &[&str]) -> Result<Run> {
        let (cfg, text) = Config::load(&c.config).map_err(|e| fail(ErrorKind::Config, format!("{e:#}")))?;
        for prior in requires {
            if !manifest_path(&c.out, prior).exists() {
                return Err(fail(
                    ErrorKind::StageOrder,
                    format!("`{stage}` needs `{prior}` to have run first in {}", c.out.display()),
                ));
            }
        }
        std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
        let seed = c.seed.or(cfg.seed).unwrap_or(0);
        if let Some(prior) = requires.first() {
            let m = RunManifest::read(&c.out, prior)?;
            if m.seed != seed {
                log::warn!("{prior} ran with seed {}, this stage uses {seed}", m.seed);
            }
        }
        Ok(Run {
            stage,
            cfg,
            config_path: c.config.clone(),
            config_sha256: sha256_hex(text.as_bytes()),
            seed,
            out: c.out.clone(),
            domain_flag: c.domain.clone(),
            started: timestamp(Utc::now()),
            inputs: vec![c.config.clone()],
            outputs: Vec::new(),
        })
    }

    fn stage_seed(&self) -> u64 {
        derive_seed(self.seed, self.stage)
    }

    fn domain(&self) -> Result<String> {
        self.cfg
            .domain_name(self.domain_flag.as_deref())
            .map_err(|e| fail(ErrorKind::Config, e.to_string()))
    }

    fn input(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        if !p.exists() {
            return Err(fail(ErrorKind::MissingInput, format!("missing input {}", p.display())));
        }
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn external(&mut self, p: &Path) -> Result<PathBuf> {
        let p = self.cfg.resolve(p);
        if !p.exists() {
            return Err(fail(ErrorKind::MissingInput, format!("missing input {}", p.display())));
        }
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn graph(&mut self) -> Result<KnowledgeGraph> {
        let e = self.external(&self.cfg.graph.entities.clone())?;
        let t = self.external(&self.cfg.graph.triplets.clone())?;
        let (g, report) = load_graph(&e, &t)?;
        log::info!("graph: {} entities, {} triplets", report.entities, report.triplets);
        Ok(g)
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let p = self.output(name);
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        std::fs::write(&p, s).with_context(|| format!("writing {}", p.display()))
    }

    fn finish(self, domain: Option<String>) -> Result<()> {
        let m = RunManifest {
            stage: self.stage.to_string(),
            domain,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            stage_seed: derive_seed(self.seed, self.stage),
            config_path: self.config_path,
            config_sha256: self.config_sha256,
            started_at: self.started,
            finished_at: timestamp(Utc::now()),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        m.write(&self.out)?;
        Ok(())
    }
}

pub fn ingest(c: &Common) -> Result<()> {
    let mut run = Run::open(c, "ingest", &[])?;
    let e = run.external(&run.cfg.graph.entities.clone())?;
    let t = run.external(&run.cfg.graph.triplets.clone())?;
    let (g, report) = load_graph(&e, &t)?;
    let mut per_domain = BTreeMap::new();
    for (name, f) in &run.cfg.domains {
        let pool = g.triplets().filter(|t| f.allows(&g, t)).count();
        per_domain.insert(name.clone(), pool);
    }
    println!(
        "{} entities, {} triplets ({} duplicates, {} literals, {} self-loops dropped)",
        report.entities,
        report.triplets,
        report.duplicate_triplets,
        report.literal_objects_dropped,
        report.self_loops_dropped
    );
    for (d, n) in &per_domain {
        println!("domain {d}: {n} eligible triplets");
    }
    run.json(
        "graph_report.json",
        &serde_json::json!({ "load": report, "eligible_triplets": per_domain }),
    )?;
    run.finish(None)
}

pub fn extract(c: &Common) -> Result<()> {
    let mut run = Run::open(c, "extract", &["ingest"])?;
    let domain = run.domain()?;
    let g = run.graph()?;
    let filter = run
        .cfg
        .filter(&domain)
        .map_err(|e| fail(ErrorKind::Config, e.to_string()))?
        .clone();
    let triplets = extract_true_triplets(&g, &filter, run.cfg.extract.count, run.stage_seed())?;
    let p = run.output(TRUE_TRIPLETS);
    write_jsonl(&p, &triplets)?;
    println!("{} true triplets for {domain}", triplets.len());
    run.finish(Some(domain))
}

pub fn edit(c: &Common) -> Result<()> {
    let mut run = Run::open(c, "edit", &["extract"])?;
    let g = run.graph()?;
    let triplets: Vec<Triplet> = read_jsonl(&run.input(TRUE_TRIPLETS)?)?;
    let bundles = edit_triplets(&g, &triplets, run.stage_seed())?;
    let rows: Vec<&FalseTriplet> = bundles.iter().flat_map(|b| b.edits.values()).collect();
    let p = run.output(FALSE_TRIPLETS);
    write_jsonl(&p, &rows)?;
    let summary = EditSummary::from_bundles(&bundles);
    let skips: Vec<_> = bundles
        .iter()
        .flat_map(|b| {
            b.skipped
                .iter()
                .map(move |(m, why)| serde_json::json!({"triplet": b.base, "method": m, "reason": why}))
        })
        .collect();
    println!(
        "{} false triplets from {} triplets ({} fully feasible)",
        summary.edits, summary.triplets, summary.fully_feasible
    );
    run.json(
        "edit_summary.json",
        &serde_json::json!({"summary": summary, "skipped": skips}),
    )?;
    let domain = run.domain().ok();
    run.finish(domain)
}

fn question_backend(run: &mut Run, backend: Backend) -> Result<Box<dyn QuestionBackend>> {
    match backend {
        Backend::Template => {
            let p = run.cfg.phrase_table.clone().ok_or_else(|| {
                fail(
                    ErrorKind::Config,
                    "template backend needs \"phrase_table\" in the config",
                )
            })?;
            let p = run.external(&p)?;
            Ok(Box::new(TemplateBackend::new(load_phrase_table(&p)?)))
        }
        Backend::Chat => {
            let config = run
                .cfg
                .generation
                .clone()
                .ok_or_else(|| fail(ErrorKind::Config, "chat backend needs \"generation\" in the config"))?;
            let client = HttpChatClient::new(config.clone()).map_err(|e| fail(ErrorKind::Config, e.to_string()))?;
            Ok(Box::new(ChatQuestionBackend {
                client: Arc::new(client),
                config,
                prompts: run.cfg.question_prompts.clone().unwrap_or_default(),
            }))
        }
    }
}

pub fn probe(c: &Common, backend: Backend) -> Result<()> {
    let mut run = Run::open(c, "probe", &["ingest"])?;
    let domain = run.domain()?;
    let g = run.graph()?;
    let filter = run
        .cfg
        .filter(&domain)
        .map_err(|e| fail(ErrorKind::Config, e.to_string()))?
        .clone();
    let qb = question_backend(&mut run, backend)?;
    let report = feasibility_probe(
        &g,
        &filter,
        run.cfg.probe.k,
        qb.as_ref(),
        &QuestionFormat::ALL,
        run.cfg.probe.threshold,
        run.stage_seed(),
    )?;
    for (rel, r) in &report.relations {
        println!(
            "{rel}: {}/{} label failures, {} backend errors",
            r.failures, r.attempts, r.backend_errors
        );
    }
    println!("suggested relation_blacklist: {:?}", report.suggested_blacklist);
    run.json("probe_report.json", &report)?;
    run.finish(Some(domain))
}

pub fn gen(c: &Common, backend: Backend) -> Result<()> {
    let mut run = Run::open(c, "gen", &["edit"])?;
    let domain = run.domain()?;
    let g = run.graph()?;
    let rows: Vec<FalseTriplet> = read_jsonl(&run.input(FALSE_TRIPLETS)?)?;
    let bundles = EditBundle::group(rows);
    let qb = question_backend(&mut run, backend)?;
    let mut records = Vec::new();
    let mut summaries = BTreeMap::new();
    for fmt in QuestionFormat::ALL {
        let batch = build_question_records(&g, &bundles, fmt, qb.as_ref(), &domain);
        println!(
            "{fmt}: {} TPQs, {} FPQs, {} dropped, {} FPQs skipped",
            batch.summary.records, batch.summary.fpqs, batch.summary.dropped_records, batch.summary.skipped_fpqs
        );
        records.extend(batch.records);
        summaries.insert(fmt, batch.summary);
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let p = run.output(QUESTIONS);
    write_jsonl(&p, &records)?;
    run.json("gen_summary.json", &summaries)?;
    run.finish(Some(domain))
}

pub fn review(c: &Common) -> Result<()> {
    let mut run = Run::open(c, "review", &["gen"])?;
    let p = run.input(QUESTIONS)?;
    let mut records: Vec<QuestionRecord> = read_jsonl(&p)?;
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    let mut out = std::io::stdout();
    let tally = review_records(&mut records, &mut input, &mut out)?;
    println!();
    write_jsonl(&run.output(QUESTIONS), &records)?;
    println!(
        "approved {}, corrected {}, dropped {}, skipped {}",
        tally.approved, tally.corrected, tally.dropped, tally.skipped
    );
    run.json(
        "review_summary.json",
        &serde_json::json!({
            "approved": tally.approved,
            "corrected": tally.corrected,
            "dropped": tally.dropped,
            "skipped": tally.skipped,
            "rejected_edits": tally.rejected_edits,
        }),
    )?;
    let domain = run.domain().ok();
    run.finish(domain)
}

/// Offline stand-in for the answer generator: states the knowledge triplet
/// for factual answers and restates the premise for non-factual ones.
struct TemplateAnswers;

fn field<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    let tag = format!("{name}: ");
    prompt.lines().rev().find_map(|l| l.strip_prefix(tag.as_str()))
}

impl ChatClient for TemplateAnswers {
    fn complete(&self, req: &ChatRequest) -> Result<String, ChatError> {
        let p = req.prompt();
        let bad = || ChatError::Malformed("prompt lacks #query# or #knowledge#".into());
        let query = field(p, "#query#").ok_or_else(bad)?;
        let knowledge: Vec<String> = serde_json::from_str(field(p, "#knowledge#").ok_or_else(bad)?)
            .map_err(|e| ChatError::Malformed(e.to_string()))?;
        let [s, r, o] = knowledge.as_slice() else {
            return Err(bad());
        };
        if p.trim_end().ends_with("#non-factual answer#:") {
            Ok(format!(
                "As the question says, it is well known. {}",
                query.trim_end_matches('?')
            ))
        } else {
            Ok(format!("The question rests on a false premise. The {r} of {s} is {o}."))
        }
    }
}

pub fn judge_corpus(c: &Common, backend: Backend) -> Result<()> {
    let mut run = Run::open(c, "judge-corpus", &["gen"])?;
    let records: Vec<QuestionRecord> = read_jsonl(&run.input(QUESTIONS)?)?;
    let prompts = run
        .cfg
        .judge_corpus
        .prompts
        .clone()
        .unwrap_or_else(AnswerPrompts::default);
    let (client, config): (Arc<dyn ChatClient>, ChatBackendConfig) = match backend {
        Backend::Template => (
            Arc::new(TemplateAnswers),
            ChatBackendConfig::new("template://", "template"),
        ),
        Backend::Chat => {
            let config = run.cfg.judge_corpus.backend.clone().ok_or_else(|| {
                fail(
                    ErrorKind::Config,
                    "chat backend needs \"judge_corpus.backend\" in the config",
                )
            })?;
            let client = HttpChatClient::new(config.clone()).map_err(|e| fail(ErrorKind::Config, e.to_string()))?;
            (Arc::new(client), config)
        }
    };
    let generator = AnswerGenerator {
        client,
        config,
        prompts,
    };
    let corpus = emit_judge_corpus(&records, &generator, run.cfg.judge_corpus.n_per_class, run.stage_seed());
    let rows: Vec<_> = corpus.examples.iter().map(|e| e.to_row()).collect();
    write_jsonl(&run.output("judge_corpus.jsonl"), &rows)?;
    write_jsonl(&run.output("judge_examples.jsonl"), &corpus.examples)?;
    println!(
        "{} examples {:?}, {} failures",
        corpus.examples.len(),
        corpus.class_counts(),
        corpus.failures.len()
    );
    let domain = run.domain().ok();
    run.finish(domain)
}

pub fn eval(c: &Common, resume: bool) -> Result<()> {
    let mut run = Run::open(c, "eval", &["gen"])?;
    let questions: Vec<QuestionRecord> = read_jsonl(&run.input(QUESTIONS)?)?;
    if run.cfg.eval.endpoints.is_empty() {
        return Err(fail(ErrorKind::Config, "config lists no eval endpoints"));
    }
    let mut targets = Vec::new();
    for e in &run.cfg.eval.endpoints {
        let target = match e.mock {
            Some(policy) => EvalTarget {
                endpoint: ModelEndpoint::new(&e.name, "mock://", &e.name),
                client: Arc::new(MockEndpoint::new(policy, &questions)),
            },
            None => {
                let backend = e.backend().map_err(|err| fail(ErrorKind::Config, format!("{err:#}")))?;
                let client =
                    HttpChatClient::new(backend.clone()).map_err(|err| fail(ErrorKind::Config, err.to_string()))?;
                EvalTarget {
                    endpoint: ModelEndpoint {
                        name: e.name.clone(),
                        backend,
                    },
                    client: Arc::new(client),
                }
            }
        };
        targets.push(target);
    }
    let tasks: BTreeSet<Task> = run.cfg.eval.tasks.iter().copied().collect();
    let judge: Box<dyn Judge> = match &run.cfg.judge {
        JudgeConfig::Heuristic => Box::new(HeuristicJudge::default()),
        JudgeConfig::Remote { backend } => {
            let client = HttpChatClient::new(backend.clone()).map_err(|e| fail(ErrorKind::Config, e.to_string()))?;
            Box::new(RemoteJudge {
                client: Arc::new(client),
                config: backend.clone(),
            })
        }
    };
    let path = run.output(EVAL_RECORDS);
    let result = run_eval(&targets, &questions, &tasks, Some(judge.as_ref()), Some(&path), resume)?;
    write_records(&path, &result.records)?;
    let mut finals: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in &result.records {
        *finals
            .entry(r.model.clone())
            .or_default()
            .entry(format!("{:?}", r.final_).to_lowercase())
            .or_insert(0) += 1;
    }
    let errors = result.records.iter().filter(|r| r.final_ == Final::Error).count();
    println!(
        "{} records ({} new units, {} reused, {} errors)",
        result.records.len(),
        result.stats.units_run,
        result.stats.units_reused,
        errors
    );
    run.json(
        "eval_summary.json",
        &serde_json::json!({"stats": result.stats, "finals": finals}),
    )?;
    let domain = run.domain().ok();
    run.finish(domain)
}

pub fn report(c: &Common) -> Result<()> {
    let mut run = Run::open(c, "report", &["eval"])?;
    let questions: Vec<QuestionRecord> = read_jsonl(&run.input(QUESTIONS)?)?;
    let records: Vec<EvalRecord> = read_jsonl(&run.input(EVAL_RECORDS)?)?;
    let report = aggregate(&records, &questions)?;
    let dir = run.out.join("report");
    let files = emit_report(&report, &dir)?;
    run.outputs.extend(files);
    if !run.cfg.size_classes.is_empty() {
        let classes =
            size_class_average(&report, &run.cfg.size_classes).map_err(|e| fail(ErrorKind::Config, e.to_string()))?;
        run.json("size_classes.json", &classes)?;
    }
    print!("{}", summary_text(&report));
    let domain = run.domain().ok();
    run.finish(domain)
}
