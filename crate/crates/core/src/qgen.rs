//! Question generation. One true-premise question (TPQ) per true triplet and
//! format; each false-premise question (FPQ) is that TPQ with the original
//! object's label swapped for the edited object's label.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{run_bounded, ChatBackendConfig, ChatClient, ChatError};
use crate::editor::{EditBundle, EditMethod};
use crate::kg_store::{extract_true_triplets, DomainFilter, EntityId, KgError, KnowledgeGraph, Triplet};
use crate::prompts::{render_triplet, PromptError, QuestionPrompts};

pub mod review;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionFormat {
    YesNo,
    Wh,
}

impl QuestionFormat {
    pub const ALL: [QuestionFormat; 2] = [QuestionFormat::YesNo, QuestionFormat::Wh];

    pub fn code(self) -> &'static str {
        match self {
            QuestionFormat::YesNo => "yn",
            QuestionFormat::Wh => "wh",
        }
    }
}

impl fmt::Display for QuestionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionFormat::YesNo => "yes_no",
            QuestionFormat::Wh => "wh",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QgenError {
    #[error("no phrase for relation {relation:?} in {format} format")]
    MissingPhrase { relation: String, format: QuestionFormat },
    #[error(transparent)]
    Backend(#[from] ChatError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("generated question {text:?} fails label check: {reason}")]
    LabelCheck { text: String, reason: String },
    #[error("label {label:?} does not occur in {text:?}")]
    ZeroOccurrences { text: String, label: String },
    #[error("label {label:?} occurs {count} times in {text:?}")]
    MultipleOccurrences { text: String, label: String, count: usize },
    #[error("original label {label:?} still present after substitution in {text:?}")]
    OriginalLabelPersists { text: String, label: String },
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
}

/// Human-readable labels of a triplet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletLabels {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl TripletLabels {
    pub fn of(g: &KnowledgeGraph, t: &Triplet) -> Result<Self, QgenError> {
        let label = |id: &EntityId| {
            g.label_of(id)
                .map(str::to_string)
                .ok_or_else(|| QgenError::UnknownEntity(id.clone()))
        };
        Ok(Self {
            subject: label(&t.subject)?,
            relation: t.relation.clone(),
            object: label(&t.object)?,
        })
    }

    pub fn rendered(&self) -> String {
        render_triplet(&self.subject, &self.relation, &self.object)
    }
}

pub trait QuestionBackend: Send + Sync {
    fn name(&self) -> String;
    fn generate(&self, labels: &TripletLabels, fmt: QuestionFormat) -> Result<String, QgenError>;
    /// How many generations may run at once.
    fn parallelism(&self) -> usize {
        1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseEntry {
    /// Verb phrase for `Did {subject} <phrase> {object}?`.
    #[serde(default)]
    pub yesno_phrase: Option<String>,
    /// Full question with `{subject}` and `{object}` placeholders.
    #[serde(default)]
    pub wh_template: Option<String>,
}

pub type PhraseTable = BTreeMap<String, PhraseEntry>;

pub fn load_phrase_table(path: &Path) -> Result<PhraseTable, KgError> {
    let text = std::fs::read_to_string(path).map_err(|source| KgError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| KgError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Deterministic offline backend driven by a relation phrase table.
#[derive(Clone, Debug, Default)]
pub struct TemplateBackend {
    pub phrases: PhraseTable,
}

impl TemplateBackend {
    pub fn new(phrases: PhraseTable) -> Self {
        Self { phrases }
    }
}

impl QuestionBackend for TemplateBackend {
    fn name(&self) -> String {
        "template".into()
    }

    fn generate(&self, l: &TripletLabels, fmt: QuestionFormat) -> Result<String, QgenError> {
        let missing = || QgenError::MissingPhrase {
            relation: l.relation.clone(),
            format: fmt,
        };
        let entry = self.phrases.get(&l.relation).ok_or_else(missing)?;
        match fmt {
            QuestionFormat::YesNo => {
                let phrase = entry.yesno_phrase.as_deref().ok_or_else(missing)?;
                Ok(format!("Did {} {} {}?", l.subject, phrase, l.object))
            }
            QuestionFormat::Wh => {
                let t = entry.wh_template.as_deref().ok_or_else(missing)?;
                Ok(t.replace("{subject}", &l.subject).replace("{object}", &l.object))
            }
        }
    }
}

/// Remote few-shot generation through an OpenAI-compatible endpoint.
pub struct ChatQuestionBackend {
    pub client: Arc<dyn ChatClient>,
    pub config: ChatBackendConfig,
    pub prompts: QuestionPrompts,
}

impl ChatQuestionBackend {
    pub fn prompt(&self, l: &TripletLabels, fmt: QuestionFormat) -> Result<String, PromptError> {
        let template = match fmt {
            QuestionFormat::YesNo => &self.prompts.yes_no,
            QuestionFormat::Wh => &self.prompts.wh,
        };
        template.render(&[&l.rendered()])
    }
}

impl QuestionBackend for ChatQuestionBackend {
    fn name(&self) -> String {
        format!("chat:{}", self.config.model)
    }

    fn generate(&self, l: &TripletLabels, fmt: QuestionFormat) -> Result<String, QgenError> {
        let req = self.config.request(&self.prompt(l, fmt)?);
        let reply = self.client.complete(&req)?;
        Ok(clean_reply(&reply))
    }

    fn parallelism(&self) -> usize {
        self.config.max_in_flight
    }
}

/// First non-empty line, trimmed, without wrapping quotes.
pub fn clean_reply(reply: &str) -> String {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    line.trim_matches(|c| c == '"' || c == '\u{201c}' || c == '\u{201d}')
        .trim()
        .to_string()
}

/// Number of (possibly overlapping) occurrences of `needle` in `hay`.
fn occurrences(hay: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    (0..hay.len())
        .filter(|&i| hay.is_char_boundary(i) && hay[i..].starts_with(needle))
        .count()
}

/// A TPQ is usable when it names the subject and names the object exactly once.
pub fn check_labels(text: &str, l: &TripletLabels) -> Result<(), QgenError> {
    let fail = |reason: String| QgenError::LabelCheck {
        text: text.to_string(),
        reason,
    };
    if text.trim().is_empty() {
        return Err(fail("empty question".into()));
    }
    if !text.contains(&l.subject) {
        return Err(fail(format!("subject label {:?} missing", l.subject)));
    }
    match occurrences(text, &l.object) {
        1 => Ok(()),
        0 => Err(fail(format!("object label {:?} missing", l.object))),
        n => Err(fail(format!("object label {:?} occurs {n} times", l.object))),
    }
}

/// Generates and label-checks a TPQ, regenerating once on a failed check.
pub fn generate_tpq(
    labels: &TripletLabels,
    fmt: QuestionFormat,
    backend: &dyn QuestionBackend,
) -> Result<String, QgenError> {
    let mut last = None;
    for _ in 0..2 {
        let text = backend.generate(labels, fmt)?;
        match check_labels(&text, labels) {
            Ok(()) => return Ok(text),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap())
}

/// Replaces the single occurrence of `original` in `tpq` with `edited`.
pub fn derive_fpq(tpq: &str, original: &str, edited: &str) -> Result<String, QgenError> {
    match occurrences(tpq, original) {
        0 => Err(QgenError::ZeroOccurrences {
            text: tpq.to_string(),
            label: original.to_string(),
        }),
        1 => Ok(tpq.replacen(original, edited, 1)),
        count => Err(QgenError::MultipleOccurrences {
            text: tpq.to_string(),
            label: original.to_string(),
            count,
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpqEntry {
    pub edited_object: EntityId,
    pub edited_label: String,
    pub fpq_text: String,
    pub hop: Option<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReviewStatus {
    #[default]
    Unreviewed,
    Approved,
    /// The TPQ was rewritten by a reviewer; `text` is the corrected TPQ.
    Corrected {
        text: String,
    },
}

/// One TPQ and its derived FPQs in one format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    /// Shared by the Yes-No and WH records of the same base triplet.
    pub triplet_id: String,
    pub domain: String,
    pub format: QuestionFormat,
    pub base: Triplet,
    pub subject_label: String,
    pub object_label: String,
    pub tpq_text: String,
    pub fpqs: BTreeMap<EditMethod, FpqEntry>,
    pub backend: String,
    #[serde(default)]
    pub review_status: ReviewStatus,
}

impl QuestionRecord {
    fn labels(&self) -> TripletLabels {
        TripletLabels {
            subject: self.subject_label.clone(),
            relation: self.base.relation.clone(),
            object: self.object_label.clone(),
        }
    }

    /// Replaces the TPQ and re-derives every FPQ from it. Leaves the record
    /// untouched if the new text fails the label check or any substitution.
    pub fn retext(&mut self, tpq: &str) -> Result<(), QgenError> {
        check_labels(tpq, &self.labels())?;
        let mut fpqs = self.fpqs.clone();
        for entry in fpqs.values_mut() {
            entry.fpq_text = substitute(tpq, &self.object_label, &entry.edited_label)?;
        }
        self.tpq_text = tpq.to_string();
        self.fpqs = fpqs;
        Ok(())
    }
}

/// [`derive_fpq`] plus the check that the original label is gone afterwards.
fn substitute(tpq: &str, original: &str, edited: &str) -> Result<String, QgenError> {
    let fpq = derive_fpq(tpq, original, edited)?;
    if fpq.contains(original) {
        return Err(QgenError::OriginalLabelPersists {
            text: fpq,
            label: original.to_string(),
        });
    }
    Ok(fpq)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub triplet_id: String,
    pub format: QuestionFormat,
    pub method: Option<EditMethod>,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub bundles: usize,
    pub records: usize,
    pub fpqs: usize,
    pub dropped_records: usize,
    pub skipped_fpqs: usize,
    pub skips: Vec<Skip>,
}

#[derive(Clone, Debug, Default)]
pub struct QuestionBatch {
    pub records: Vec<QuestionRecord>,
    pub summary: GenerationSummary,
}

pub fn triplet_id(domain: &str, index: usize) -> String {
    format!("{domain}-{index:05}")
}

/// Builds one record per bundle whose TPQ passes the label check. Bundle `i`
/// gets triplet id `{domain}-{i:05}`, so ids line up across formats.
pub fn build_question_records(
    g: &KnowledgeGraph,
    bundles: &[EditBundle],
    fmt: QuestionFormat,
    backend: &dyn QuestionBackend,
    domain: &str,
) -> QuestionBatch {
    let indexed: Vec<(usize, &EditBundle)> = bundles.iter().enumerate().collect();
    let outcomes = run_bounded(&indexed, backend.parallelism(), |&(i, b)| {
        build_one(g, i, b, fmt, backend, domain)
    });

    let mut batch = QuestionBatch::default();
    batch.summary.bundles = bundles.len();
    for (record, skips) in outcomes {
        batch.summary.skipped_fpqs += skips.iter().filter(|s| s.method.is_some()).count();
        match record {
            Some(r) => {
                batch.summary.fpqs += r.fpqs.len();
                batch.records.push(r);
            }
            None => batch.summary.dropped_records += 1,
        }
        batch.summary.skips.extend(skips);
    }
    batch.records.sort_by(|a, b| a.id.cmp(&b.id));
    batch.summary.records = batch.records.len();
    for s in &batch.summary.skips {
        log::warn!(
            "{} [{}] {}: {}",
            s.triplet_id,
            s.format,
            s.method.map_or("TPQ".to_string(), |m| m.to_string()),
            s.reason
        );
    }
    log::info!(
        "{fmt}: {} records, {} FPQs, {} records dropped, {} FPQs skipped",
        batch.summary.records,
        batch.summary.fpqs,
        batch.summary.dropped_records,
        batch.summary.skipped_fpqs
    );
    batch
}

fn build_one(
    g: &KnowledgeGraph,
    index: usize,
    bundle: &EditBundle,
    fmt: QuestionFormat,
    backend: &dyn QuestionBackend,
    domain: &str,
) -> (Option<QuestionRecord>, Vec<Skip>) {
    let tid = triplet_id(domain, index);
    let skip = |method: Option<EditMethod>, reason: String| Skip {
        triplet_id: tid.clone(),
        format: fmt,
        method,
        reason,
    };
    let labels = match TripletLabels::of(g, &bundle.base) {
        Ok(l) => l,
        Err(e) => return (None, vec![skip(None, e.to_string())]),
    };
    let tpq = match generate_tpq(&labels, fmt, backend) {
        Ok(t) => t,
        Err(e) => return (None, vec![skip(None, e.to_string())]),
    };

    let mut skips = Vec::new();
    let mut fpqs = BTreeMap::new();
    for (m, ft) in &bundle.edits {
        let Some(edited_label) = g.label_of(&ft.edited_object) else {
            skips.push(skip(Some(*m), format!("unknown entity {}", ft.edited_object)));
            continue;
        };
        match substitute(&tpq, &labels.object, edited_label) {
            Ok(text) => {
                fpqs.insert(
                    *m,
                    FpqEntry {
                        edited_object: ft.edited_object.clone(),
                        edited_label: edited_label.to_string(),
                        fpq_text: text,
                        hop: ft.hop,
                    },
                );
            }
            Err(e) => skips.push(skip(Some(*m), e.to_string())),
        }
    }
    let record = QuestionRecord {
        id: format!("{tid}-{}", fmt.code()),
        triplet_id: tid,
        domain: domain.to_string(),
        format: fmt,
        base: bundle.base.clone(),
        subject_label: labels.subject,
        object_label: labels.object,
        tpq_text: tpq,
        fpqs,
        backend: backend.name(),
        review_status: ReviewStatus::Unreviewed,
    };
    (Some(record), skips)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    Ok,
    LabelFailure,
    BackendError,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub triplet: Triplet,
    pub relation: String,
    pub format: QuestionFormat,
    pub outcome: ProbeOutcome,
    pub detail: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationProbe {
    /// Generations that reached the label check.
    pub attempts: usize,
    pub failures: usize,
    pub backend_errors: usize,
    pub failure_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub domain: String,
    pub sampled: usize,
    pub threshold: f64,
    pub relations: BTreeMap<String, RelationProbe>,
    pub suggested_blacklist: BTreeSet<String>,
    pub log: Vec<ProbeEntry>,
}

pub const DEFAULT_PROBE_THRESHOLD: f64 = 0.2;

/// Generates TPQs for `k` sampled triplets and flags relations whose label
/// failure rate exceeds `threshold`. A generation that cannot be produced
/// for content reasons (e.g. a missing phrase) counts as a label failure;
/// transport errors are tallied separately and excluded from the rate.
pub fn feasibility_probe(
    g: &KnowledgeGraph,
    filter: &DomainFilter,
    k: usize,
    backend: &dyn QuestionBackend,
    formats: &[QuestionFormat],
    threshold: f64,
    seed: u64,
) -> Result<ProbeReport, KgError> {
    let sample = extract_true_triplets(g, filter, k, seed)?;
    let jobs: Vec<(Triplet, QuestionFormat)> = sample
        .iter()
        .flat_map(|t| formats.iter().map(move |f| (t.clone(), *f)))
        .collect();
    let log = run_bounded(&jobs, backend.parallelism(), |(t, fmt)| {
        let (outcome, detail) = match TripletLabels::of(g, t) {
            Err(e) => (ProbeOutcome::LabelFailure, Some(e.to_string())),
            Ok(labels) => match generate_tpq(&labels, *fmt, backend) {
                Ok(_) => (ProbeOutcome::Ok, None),
                Err(QgenError::Backend(e)) => (ProbeOutcome::BackendError, Some(e.to_string())),
                Err(e) => (ProbeOutcome::LabelFailure, Some(e.to_string())),
            },
        };
        ProbeEntry {
            triplet: t.clone(),
            relation: t.relation.clone(),
            format: *fmt,
            outcome,
            detail,
        }
    });
    Ok(summarize_probe(&filter.name, sample.len(), threshold, log))
}

/// Recomputes per-relation rates and the suggested blacklist from a probe log.
pub fn summarize_probe(domain: &str, sampled: usize, threshold: f64, log: Vec<ProbeEntry>) -> ProbeReport {
    let mut relations: BTreeMap<String, RelationProbe> = BTreeMap::new();
    for e in &log {
        let r = relations.entry(e.relation.clone()).or_default();
        match e.outcome {
            ProbeOutcome::Ok => r.attempts += 1,
            ProbeOutcome::LabelFailure => {
                r.attempts += 1;
                r.failures += 1;
            }
            ProbeOutcome::BackendError => r.backend_errors += 1,
        }
    }
    let mut suggested_blacklist = BTreeSet::new();
    for (name, r) in relations.iter_mut() {
        if r.attempts > 0 {
            let rate = r.failures as f64 / r.attempts as f64;
            r.failure_rate = Some(rate);
            if rate > threshold {
                suggested_blacklist.insert(name.clone());
            }
        }
    }
    ProbeReport {
        domain: domain.to_string(),
        sampled,
        threshold,
        relations,
        suggested_blacklist,
        log,
    }
}
