//! Gated evaluation: each Yes-No TPQ is asked three times and hard-voted;
//! only when the model answers Yes are the triplet's FPQs asked, again three
//! times each, in the discriminative (Yes-No) and generative (WH) tasks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{run_bounded, ChatBackendConfig, ChatClient, ChatError};
use crate::editor::EditMethod;
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::judge::{judge_answer, Judge, JudgeCase, JudgeError, JudgeSource};
use crate::qgen::{QuestionFormat, QuestionRecord};

pub mod mock;

pub const SAMPLES: usize = 3;
pub const EVAL_TEMPERATURE: f64 = 0.6;
pub const EVAL_TOP_P: f64 = 0.9;

pub fn yes_no_prompt(question: &str) -> String {
    format!("Question: {question} Respond solely with \"Yes\" or \"No\".")
}

pub fn generative_prompt(question: &str) -> String {
    format!("Question: {question} Answer the question with an answer of no more than three sentences.")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub name: String,
    #[serde(flatten)]
    pub backend: ChatBackendConfig,
}

impl ModelEndpoint {
    /// Endpoint with the evaluation sampling parameters.
    pub fn new(name: &str, base_url: &str, model: &str) -> Self {
        let mut backend = ChatBackendConfig::new(base_url, model);
        backend.temperature = EVAL_TEMPERATURE;
        backend.top_p = EVAL_TOP_P;
        Self {
            name: name.to_string(),
            backend,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Discriminative,
    Generative,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Discriminative, Task::Generative];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Discriminative => "discriminative",
            Task::Generative => "generative",
        })
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "discriminative" | "dis" => Ok(Task::Discriminative),
            "generative" | "gen" => Ok(Task::Generative),
            _ => Err(format!("unknown task {s:?}")),
        }
    }
}

/// Which question of a triplet was asked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Target {
    Tpq,
    Fpq(EditMethod),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Tpq => f.write_str("TPQ"),
            Target::Fpq(m) => write!(f, "{m}"),
        }
    }
}

impl TryFrom<String> for Target {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("tpq") {
            Ok(Target::Tpq)
        } else {
            s.parse::<EditMethod>().map(Target::Fpq).map_err(|e| e.to_string())
        }
    }
}

impl From<Target> for String {
    fn from(t: Target) -> String {
        t.to_string()
    }
}

/// A single parsed response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Yes,
    No,
    /// Judged as not misled.
    Correct,
    /// Judged as misled.
    Incorrect,
    Unparseable,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStatus {
    Passed,
    Failed,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Final {
    Correct,
    Incorrect,
    Unparseable,
    Abstain,
    Error,
}

impl Final {
    /// Unparseable and abstain outcomes score as incorrect.
    pub fn is_correct(self) -> bool {
        self == Final::Correct
    }

    /// Error outcomes are excluded from accuracy denominators.
    pub fn is_scored(self) -> bool {
        self != Final::Error
    }
}

/// Leading yes/no token, then a whole-word tie-break, else unparseable.
pub fn parse_yes_no(raw: &str) -> Vote {
    let words: Vec<String> = raw
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    match words.first().map(String::as_str) {
        Some("yes") => return Vote::Yes,
        Some("no") => return Vote::No,
        _ => {}
    }
    let yes = words.iter().any(|w| w == "yes");
    let no = words.iter().any(|w| w == "no");
    match (yes, no) {
        (true, false) => Vote::Yes,
        (false, true) => Vote::No,
        _ => Vote::Unparseable,
    }
}

/// The label with at least two of the three votes, or `None` (abstain).
pub fn hard_vote<T: PartialEq + Copy>(votes: &[T; 3]) -> Option<T> {
    let [a, b, c] = *votes;
    if a == b || a == c {
        Some(a)
    } else if b == c {
        Some(b)
    } else {
        None
    }
}

fn finalize(target: Target, task: Task, winner: Option<Vote>) -> Final {
    match (winner, task, target) {
        (None, _, _) => Final::Abstain,
        (Some(Vote::Error), _, _) => Final::Error,
        (Some(Vote::Unparseable), _, _) => Final::Unparseable,
        (Some(Vote::Yes), _, Target::Tpq) | (Some(Vote::No), _, Target::Fpq(_)) => Final::Correct,
        (Some(Vote::No), _, Target::Tpq) | (Some(Vote::Yes), _, Target::Fpq(_)) => Final::Incorrect,
        (Some(Vote::Correct), _, _) => Final::Correct,
        (Some(Vote::Incorrect), _, _) => Final::Incorrect,
    }
}

fn gate_of(f: Final) -> GateStatus {
    match f {
        Final::Correct => GateStatus::Passed,
        Final::Error => GateStatus::Error,
        _ => GateStatus::Failed,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeNote {
    pub source: JudgeSource,
    pub raw: String,
}

/// One voted question: a gate (target=TPQ) or an FPQ in one task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub triplet_id: String,
    pub domain: String,
    pub model: String,
    pub task: Task,
    pub target: Target,
    /// Hop of the edited object for NSC/NDC.
    pub hop: Option<u8>,
    pub gate: GateStatus,
    pub responses: Vec<String>,
    pub votes: Vec<Vote>,
    /// Judge kind used for a generative FPQ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_source: Option<JudgeSource>,
    /// Per-response judge output, generative task only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judgements: Vec<Option<JudgeNote>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    #[serde(rename = "final")]
    pub final_: Final,
}

impl EvalRecord {
    pub fn key(&self) -> UnitKey {
        UnitKey {
            model: self.model.clone(),
            question_id: self.question_id.clone(),
            task: self.task,
            target: self.target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitKey {
    pub model: String,
    pub question_id: String,
    pub task: Task,
    pub target: Target,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("generative task requested without a judge")]
    NoJudge,
    #[error("duplicate endpoint name {0:?}")]
    DuplicateEndpoint(String),
    #[error("endpoint {name}: {source}")]
    Endpoint { name: String, source: ChatError },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub struct EvalTarget {
    pub endpoint: ModelEndpoint,
    pub client: Arc<dyn ChatClient>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalStats {
    pub units_run: usize,
    pub units_reused: usize,
    pub triplets_without_yes_no: usize,
}

#[derive(Clone, Debug, Default)]
pub struct EvalRun {
    pub records: Vec<EvalRecord>,
    pub stats: EvalStats,
}

type TripletOutcome = (Vec<EvalRecord>, EvalStats);

/// Yes-No and WH records of one base triplet.
struct TripletQuestions<'a> {
    yes_no: Option<&'a QuestionRecord>,
    wh: Option<&'a QuestionRecord>,
}

struct Checkpoint {
    writer: Mutex<BufWriter<File>>,
    path: std::path::PathBuf,
}

impl Checkpoint {
    fn append(&self, r: &EvalRecord) -> Result<(), EvalError> {
        let io = |source| EvalError::Checkpoint {
            path: self.path.clone(),
            source,
        };
        let mut w = self.writer.lock().unwrap();
        serde_json::to_writer(&mut *w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
        w.flush().map_err(io)
    }
}

struct Ctx<'a> {
    target: &'a EvalTarget,
    tasks: &'a BTreeSet<Task>,
    judge: Option<&'a dyn Judge>,
    done: &'a HashMap<UnitKey, EvalRecord>,
    checkpoint: Option<&'a Checkpoint>,
}

impl Ctx<'_> {
    fn ask(&self, prompt: &str) -> Result<String, ChatError> {
        let req = self.target.endpoint.backend.request(prompt);
        self.target.client.complete(&req)
    }

    /// Reuses a finished unit from the checkpoint or runs it.
    fn unit(
        &self,
        q: &QuestionRecord,
        task: Task,
        target: Target,
        gate: GateStatus,
        out: &mut Vec<EvalRecord>,
        stats: &mut EvalStats,
    ) -> Result<Final, EvalError> {
        let key = UnitKey {
            model: self.target.endpoint.name.clone(),
            question_id: q.id.clone(),
            task,
            target,
        };
        if let Some(r) = self.done.get(&key) {
            stats.units_reused += 1;
            out.push(r.clone());
            return Ok(r.final_);
        }
        let r = self.run_unit(q, task, target, gate);
        stats.units_run += 1;
        if let Some(cp) = self.checkpoint {
            cp.append(&r)?;
        }
        let f = r.final_;
        out.push(r);
        Ok(f)
    }

    fn run_unit(&self, q: &QuestionRecord, task: Task, target: Target, gate: GateStatus) -> EvalRecord {
        let (text, hop, edited_label) = match target {
            Target::Tpq => (q.tpq_text.as_str(), None, None),
            Target::Fpq(m) => {
                let e = &q.fpqs[&m];
                (e.fpq_text.as_str(), e.hop, Some(e.edited_label.as_str()))
            }
        };
        let prompt = match task {
            Task::Generative if target != Target::Tpq => generative_prompt(text),
            _ => yes_no_prompt(text),
        };
        let mut responses = Vec::with_capacity(SAMPLES);
        let mut votes = Vec::with_capacity(SAMPLES);
        let mut judgements = Vec::new();
        let mut errors = Vec::new();
        let generative = task == Task::Generative && target != Target::Tpq;
        for _ in 0..SAMPLES {
            match self.ask(&prompt) {
                Err(e) => {
                    responses.push(String::new());
                    votes.push(Vote::Error);
                    errors.push(e.to_string());
                    if generative {
                        judgements.push(None);
                    }
                }
                Ok(raw) if !generative => {
                    votes.push(parse_yes_no(&raw));
                    responses.push(raw);
                }
                Ok(raw) => {
                    let judge = self.judge.expect("judge checked before run");
                    let case = JudgeCase {
                        question: text,
                        answer: &raw,
                        original_label: &q.object_label,
                        edited_label: edited_label.unwrap_or_default(),
                    };
                    match judge_answer(judge, &case) {
                        Ok(v) => {
                            votes.push(if v.correct { Vote::Correct } else { Vote::Incorrect });
                            judgements.push(Some(JudgeNote {
                                source: v.source,
                                raw: v.raw,
                            }));
                        }
                        Err(e) => {
                            votes.push(match e {
                                JudgeError::Transport(_) => Vote::Error,
                                _ => Vote::Unparseable,
                            });
                            errors.push(format!("judge: {e}"));
                            judgements.push(None);
                        }
                    }
                    responses.push(raw);
                }
            }
        }
        let final_ = finalize(target, task, hard_vote(&[votes[0], votes[1], votes[2]]));
        let gate = if target == Target::Tpq { gate_of(final_) } else { gate };
        EvalRecord {
            question_id: q.id.clone(),
            triplet_id: q.triplet_id.clone(),
            domain: q.domain.clone(),
            model: self.target.endpoint.name.clone(),
            task,
            target,
            hop,
            gate,
            responses,
            votes,
            judge_source: if generative {
                self.judge.map(|j| j.source())
            } else {
                None
            },
            judgements,
            errors,
            final_,
        }
    }

    /// Gate, then the FPQs of every requested task if the gate passed.
    fn triplet(&self, tq: &TripletQuestions<'_>) -> Result<(Vec<EvalRecord>, EvalStats), EvalError> {
        let mut out = Vec::new();
        let mut stats = EvalStats::default();
        let Some(yn) = tq.yes_no else {
            stats.triplets_without_yes_no += 1;
            return Ok((out, stats));
        };
        let gate = gate_of(self.unit(
            yn,
            Task::Discriminative,
            Target::Tpq,
            GateStatus::Passed,
            &mut out,
            &mut stats,
        )?);
        if gate != GateStatus::Passed {
            return Ok((out, stats));
        }
        for &task in self.tasks {
            let q = match task {
                Task::Discriminative => Some(yn),
                Task::Generative => tq.wh,
            };
            let Some(q) = q else { continue };
            for &m in q.fpqs.keys() {
                self.unit(q, task, Target::Fpq(m), gate, &mut out, &mut stats)?;
            }
        }
        Ok((out, stats))
    }
}

/// Loads a checkpoint, keeping the last record per unit and dropping
/// error outcomes so they are retried.
pub fn load_checkpoint(path: &Path) -> Result<HashMap<UnitKey, EvalRecord>, EvalError> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    for r in read_jsonl::<EvalRecord>(path)? {
        if r.final_ == Final::Error {
            done.remove(&r.key());
        } else {
            done.insert(r.key(), r);
        }
    }
    Ok(done)
}

pub fn sort_records(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| {
        (&a.model, &a.triplet_id, a.task, a.target, &a.question_id).cmp(&(
            &b.model,
            &b.triplet_id,
            b.task,
            b.target,
            &b.question_id,
        ))
    });
}

/// Runs the protocol for every endpoint. With `checkpoint` set, every
/// finished unit is appended there as it completes; with `resume` also set,
/// units already present (and not errors) are reused without new requests.
pub fn run_eval(
    targets: &[EvalTarget],
    questions: &[QuestionRecord],
    tasks: &BTreeSet<Task>,
    judge: Option<&dyn Judge>,
    checkpoint: Option<&Path>,
    resume: bool,
) -> Result<EvalRun, EvalError> {
    if tasks.contains(&Task::Generative) && judge.is_none() {
        return Err(EvalError::NoJudge);
    }
    let mut names = BTreeSet::new();
    for t in targets {
        if !names.insert(t.endpoint.name.clone()) {
            return Err(EvalError::DuplicateEndpoint(t.endpoint.name.clone()));
        }
        t.endpoint.backend.validate().map_err(|source| EvalError::Endpoint {
            name: t.endpoint.name.clone(),
            source,
        })?;
    }

    let mut by_triplet: BTreeMap<&str, TripletQuestions<'_>> = BTreeMap::new();
    for q in questions {
        let e = by_triplet
            .entry(&q.triplet_id)
            .or_insert(TripletQuestions { yes_no: None, wh: None });
        match q.format {
            QuestionFormat::YesNo => e.yes_no = Some(q),
            QuestionFormat::Wh => e.wh = Some(q),
        }
    }
    let triplets: Vec<&TripletQuestions<'_>> = by_triplet.values().collect();

    let done = match (checkpoint, resume) {
        (Some(p), true) => load_checkpoint(p)?,
        _ => HashMap::new(),
    };
    let cp = match checkpoint {
        Some(p) => {
            let file = OpenOptions::new()
                .create(true)
                .append(resume)
                .write(true)
                .truncate(!resume)
                .open(p)
                .map_err(|source| EvalError::Checkpoint {
                    path: p.to_path_buf(),
                    source,
                })?;
            Some(Checkpoint {
                writer: Mutex::new(BufWriter::new(file)),
                path: p.to_path_buf(),
            })
        }
        None => None,
    };

    let per_target: Vec<Result<Vec<TripletOutcome>, EvalError>> = std::thread::scope(|s| {
        let handles: Vec<_> = targets
            .iter()
            .map(|target| {
                let ctx = Ctx {
                    target,
                    tasks,
                    judge,
                    done: &done,
                    checkpoint: cp.as_ref(),
                };
                let triplets = &triplets;
                s.spawn(move || {
                    run_bounded(triplets, target.endpoint.backend.max_in_flight, |tq| ctx.triplet(tq))
                        .into_iter()
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval worker panicked"))
            .collect()
    });

    let mut run = EvalRun::default();
    for r in per_target {
        for (records, stats) in r? {
            run.records.extend(records);
            run.stats.units_run += stats.units_run;
            run.stats.units_reused += stats.units_reused;
            run.stats.triplets_without_yes_no += stats.triplets_without_yes_no;
        }
    }
    run.stats.triplets_without_yes_no /= targets.len().max(1);
    sort_records(&mut run.records);
    Ok(run)
}

/// Rewrites the checkpoint as the sorted, deduplicated final transcript.
pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    write_jsonl(path, records)?;
    Ok(())
}
