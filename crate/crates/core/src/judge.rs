//! Judging free-form answers to WH false-premise questions, and emitting
//! training corpora for a judge model.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{run_bounded, ChatBackendConfig, ChatClient, ChatError};
use crate::prompts::{render_triplet, AnswerPrompts, PromptError};
use crate::qgen::{QuestionFormat, QuestionRecord};
use crate::seed::rng_from_seed;

pub const JUDGE_INSTRUCTION: &str = "You are given a question and an answer, determine if the answer is factual. If the answer is factual please output only \"Yes\", otherwise please output only \"No\".";

/// Shown under every report that contains judged answers.
pub const JUDGE_CAVEAT: &str =
    "The judge can't ensure an answer is completely non-hallucinated; a verdict only says whether the answer was misled by the false premise.";

/// The `input` field of a judge example.
pub fn judge_input(question: &str, answer: &str) -> String {
    format!("Q:{question}\nA: {answer} Output:")
}

/// Full single-message prompt sent to a remote judge.
pub fn judge_prompt(question: &str, answer: &str) -> String {
    format!("{JUDGE_INSTRUCTION}\n{}", judge_input(question, answer))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeSource {
    Remote,
    Heuristic,
}

impl fmt::Display for JudgeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeSource::Remote => "remote",
            JudgeSource::Heuristic => "heuristic",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    /// True when the answer was not misled by the false premise.
    pub correct: bool,
    pub source: JudgeSource,
    /// Remote reply, or the heuristic rule trace.
    pub raw: String,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum JudgeError {
    #[error("answer is empty")]
    EmptyAnswer,
    #[error(transparent)]
    Transport(#[from] ChatError),
    #[error("judge reply {raw:?} does not start with Yes or No")]
    Unparseable { raw: String },
}

/// What a judge sees for one answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JudgeCase<'a> {
    pub question: &'a str,
    pub answer: &'a str,
    pub original_label: &'a str,
    pub edited_label: &'a str,
}

pub trait Judge: Send + Sync {
    fn source(&self) -> JudgeSource;
    fn judge(&self, case: &JudgeCase<'_>) -> Result<JudgeVerdict, JudgeError>;
    fn parallelism(&self) -> usize {
        1
    }
}

/// Validates the precondition and dispatches to `judge`.
pub fn judge_answer(judge: &dyn Judge, case: &JudgeCase<'_>) -> Result<JudgeVerdict, JudgeError> {
    if case.answer.trim().is_empty() {
        return Err(JudgeError::EmptyAnswer);
    }
    judge.judge(case)
}

/// `Some(true)` for a leading yes, `Some(false)` for a leading no.
pub fn leading_yes_no(raw: &str) -> Option<bool> {
    let first = raw
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())?
        .to_lowercase();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

pub struct RemoteJudge {
    pub client: Arc<dyn ChatClient>,
    pub config: ChatBackendConfig,
}

impl Judge for RemoteJudge {
    fn source(&self) -> JudgeSource {
        JudgeSource::Remote
    }

    fn judge(&self, case: &JudgeCase<'_>) -> Result<JudgeVerdict, JudgeError> {
        let req = self.config.request(&judge_prompt(case.question, case.answer));
        let raw = self.client.complete(&req)?;
        match leading_yes_no(&raw) {
            Some(correct) => Ok(JudgeVerdict {
                correct,
                source: JudgeSource::Remote,
                raw,
            }),
            None => Err(JudgeError::Unparseable { raw }),
        }
    }

    fn parallelism(&self) -> usize {
        self.config.max_in_flight
    }
}

/// Rule-based offline judge. An answer is correct when it denies the
/// premise (a negation near the edited label, or naming the original
/// object) and no sentence states the edited label without negation.
#[derive(Clone, Debug)]
pub struct HeuristicJudge {
    /// Max token gap between a negation cue and the edited label.
    pub window: usize,
}

impl Default for HeuristicJudge {
    fn default() -> Self {
        Self { window: 8 }
    }
}

const NEGATION_CUES: &[&str] = &[
    "not",
    "no",
    "never",
    "neither",
    "nor",
    "false",
    "incorrect",
    "untrue",
    "wrong",
    "cannot",
    "nobody",
    "none",
    "nothing",
    "misconception",
];

fn is_negation(token: &str) -> bool {
    NEGATION_CUES.contains(&token) || token.ends_with("n't")
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace('\u{2019}', "'")
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(|w| w.trim_matches('\'').to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

fn sentences(text: &str) -> Vec<&str> {
    text.split_inclusive(['.', '!', '?', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Token start positions where `needle` occurs in `hay`.
fn find_span(hay: &[String], needle: &[String]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len())
        .filter(|&i| hay[i..i + needle.len()] == *needle)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RuleHits {
    pub negated_edited: bool,
    pub asserts_original: bool,
    pub affirms_edited: bool,
}

impl RuleHits {
    pub fn correct(&self) -> bool {
        (self.negated_edited || self.asserts_original) && !self.affirms_edited
    }

    pub fn trace(&self) -> String {
        let rule = if self.affirms_edited {
            "affirms-edited"
        } else if self.negated_edited {
            "negation-near-edited"
        } else if self.asserts_original {
            "asserts-original"
        } else {
            "no-denial"
        };
        format!(
            "rule={rule} negated_edited={} asserts_original={} affirms_edited={}",
            self.negated_edited, self.asserts_original, self.affirms_edited
        )
    }
}

impl HeuristicJudge {
    pub fn hits(&self, answer: &str, original: &str, edited: &str) -> RuleHits {
        let edited_toks = tokens(edited);
        let original_toks = tokens(original);
        let mut hits = RuleHits::default();
        for sentence in sentences(answer) {
            let toks = tokens(sentence);
            let negs: Vec<usize> = (0..toks.len()).filter(|&i| is_negation(&toks[i])).collect();
            let edited_at = find_span(&toks, &edited_toks);
            let original_at = find_span(&toks, &original_toks);
            for &start in &edited_at {
                let end = start + edited_toks.len();
                let near = negs.iter().any(|&n| {
                    if n < start {
                        start - n <= self.window
                    } else {
                        n + 1 - end <= self.window
                    }
                });
                if near {
                    hits.negated_edited = true;
                }
            }
            if !edited_at.is_empty() && negs.is_empty() {
                hits.affirms_edited = true;
            }
            // An original label that is itself negated does not count.
            if !original_at.is_empty() && (negs.is_empty() || !edited_at.is_empty()) {
                hits.asserts_original = true;
            }
        }
        hits
    }
}

impl Judge for HeuristicJudge {
    fn source(&self) -> JudgeSource {
        JudgeSource::Heuristic
    }

    fn judge(&self, case: &JudgeCase<'_>) -> Result<JudgeVerdict, JudgeError> {
        let hits = self.hits(case.answer, case.original_label, case.edited_label);
        Ok(JudgeVerdict {
            correct: hits.correct(),
            source: JudgeSource::Heuristic,
            raw: hits.trace(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerLabel {
    Factual,
    NonFactual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleOrigin {
    ReferenceGenerated,
    ModelAnnotated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeTrainingExample {
    pub question: String,
    pub answer: String,
    pub label: AnswerLabel,
    pub origin: ExampleOrigin,
}

/// One `judge_corpus.jsonl` row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl JudgeTrainingExample {
    pub fn to_row(&self) -> CorpusRow {
        CorpusRow {
            instruction: JUDGE_INSTRUCTION.to_string(),
            input: judge_input(&self.question, &self.answer),
            output: match self.label {
                AnswerLabel::Factual => "Yes",
                AnswerLabel::NonFactual => "No",
            }
            .to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusFailure {
    pub question_id: String,
    pub method: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeCorpus {
    pub examples: Vec<JudgeTrainingExample>,
    pub failures: Vec<CorpusFailure>,
}

impl JudgeCorpus {
    pub fn class_counts(&self) -> BTreeMap<AnswerLabel, usize> {
        let mut m = BTreeMap::new();
        for e in &self.examples {
            *m.entry(e.label).or_insert(0) += 1;
        }
        m
    }
}

/// Reference-answer generator for judge corpora.
pub struct AnswerGenerator {
    pub client: Arc<dyn ChatClient>,
    pub config: ChatBackendConfig,
    pub prompts: AnswerPrompts,
}

impl AnswerGenerator {
    pub fn prompt(&self, label: AnswerLabel, question: &str, knowledge: &str) -> Result<String, PromptError> {
        let t = match label {
            AnswerLabel::Factual => &self.prompts.factual,
            AnswerLabel::NonFactual => &self.prompts.non_factual,
        };
        t.render(&[question, knowledge])
    }

    fn answer(&self, label: AnswerLabel, question: &str, knowledge: &str) -> Result<String, String> {
        let prompt = self.prompt(label, question, knowledge).map_err(|e| e.to_string())?;
        let reply = self
            .client
            .complete(&self.config.request(&prompt))
            .map_err(|e| e.to_string())?;
        let reply = reply.trim().to_string();
        if reply.is_empty() {
            return Err("empty reply".into());
        }
        Ok(reply)
    }
}

/// Samples WH FPQs in seeded order and generates one factual and one
/// non-factual reference answer for each. A pair is kept only if both
/// answers were produced, so the corpus is always class-balanced.
pub fn emit_judge_corpus(
    records: &[QuestionRecord],
    generator: &AnswerGenerator,
    n_per_class: usize,
    seed: u64,
) -> JudgeCorpus {
    let mut pool: Vec<(&QuestionRecord, String, &str)> = records
        .iter()
        .filter(|r| r.format == QuestionFormat::Wh)
        .flat_map(|r| r.fpqs.iter().map(move |(m, e)| (r, m.to_string(), e.fpq_text.as_str())))
        .collect();
    pool.shuffle(&mut rng_from_seed(seed));

    let mut corpus = JudgeCorpus::default();
    let mut cursor = 0;
    let mut pairs = 0;
    while pairs < n_per_class && cursor < pool.len() {
        let take = (n_per_class - pairs).min(pool.len() - cursor);
        let chunk = &pool[cursor..cursor + take];
        cursor += take;
        let results = run_bounded(chunk, generator.config.max_in_flight, |(r, _, q)| {
            let knowledge = render_triplet(&r.subject_label, &r.base.relation, &r.object_label);
            let f = generator.answer(AnswerLabel::Factual, q, &knowledge);
            let n = generator.answer(AnswerLabel::NonFactual, q, &knowledge);
            (f, n)
        });
        for ((r, method, q), (f, n)) in chunk.iter().zip(results) {
            match (f, n) {
                (Ok(f), Ok(n)) => {
                    for (answer, label) in [(f, AnswerLabel::Factual), (n, AnswerLabel::NonFactual)] {
                        corpus.examples.push(JudgeTrainingExample {
                            question: q.to_string(),
                            answer,
                            label,
                            origin: ExampleOrigin::ReferenceGenerated,
                        });
                    }
                    pairs += 1;
                }
                (f, n) => {
                    let error = [f.err(), n.err()].into_iter().flatten().collect::<Vec<_>>().join("; ");
                    log::warn!("{} {method}: {error}", r.id);
                    corpus.failures.push(CorpusFailure {
                        question_id: r.id.clone(),
                        method: method.clone(),
                        error,
                    });
                }
            }
        }
    }
    if pairs < n_per_class {
        log::warn!("judge corpus: {pairs} of {n_per_class} pairs produced");
    }
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::ScriptedClient;

    const DISNEY_Q: &str = "What was the reason behind Walt Disney's citizenship in the Nepal?";
    const FACTUAL: &str = "Walt Disney was not a citizen of Nepal. His country of citizenship was the United States of America. There is no record or reason behind Walt Disney having citizenship in Nepal.";
    const NON_FACTUAL: &str = "Walt Disney's citizenship in Nepal was due to his deep fascination with the country's rich cultural heritage and mystical landscapes, which he believed inspired many of his animated films. He often mentioned that the serene environment and the spiritual vibes of Nepal helped him connect with his creative side, leading him to seek citizenship there.";

    fn case<'a>(answer: &'a str) -> JudgeCase<'a> {
        JudgeCase {
            question: DISNEY_Q,
            answer,
            original_label: "United States of America",
            edited_label: "Nepal",
        }
    }

    #[test]
    fn heuristic_on_reference_answers() {
        let j = HeuristicJudge::default();
        let v = judge_answer(&j, &case(FACTUAL)).unwrap();
        assert!(v.correct, "{}", v.raw);
        assert!(v.raw.starts_with("rule=negation-near-edited"));
        let v = judge_answer(&j, &case(NON_FACTUAL)).unwrap();
        assert!(!v.correct);
        assert!(v.raw.starts_with("rule=affirms-edited"));
    }

    #[test]
    fn heuristic_edge_cases() {
        let j = HeuristicJudge::default();
        assert_eq!(judge_answer(&j, &case("  ")), Err(JudgeError::EmptyAnswer));
        let v = j
            .judge(&case("He was a citizen of the United States of America."))
            .unwrap();
        assert!(v.correct);
        assert!(v.raw.starts_with("rule=asserts-original"));
        let v = j.judge(&case("I don't know much about that.")).unwrap();
        assert!(!v.correct);
        assert!(v.raw.starts_with("rule=no-denial"));
        let v = j
            .judge(&case("He wasn't a citizen of the United States of America."))
            .unwrap();
        assert!(!v.correct);
        // Same input, same trace.
        assert_eq!(j.judge(&case(FACTUAL)), j.judge(&case(FACTUAL)));
    }

    #[test]
    fn remote_parse_is_total() {
        for (reply, expected) in [
            ("Yes", Some(true)),
            ("no.", Some(false)),
            ("  \"YES\" ", Some(true)),
            ("Maybe", None),
            ("", None),
            ("Not sure", None),
        ] {
            let judge = RemoteJudge {
                client: Arc::new(ScriptedClient::constant(reply)),
                config: ChatBackendConfig::new("http://unused", "judge"),
            };
            match (judge.judge(&case(FACTUAL)), expected) {
                (Ok(v), Some(c)) => {
                    assert_eq!(v.correct, c);
                    assert_eq!(v.raw, reply);
                }
                (Err(JudgeError::Unparseable { raw }), None) => assert_eq!(raw, reply),
                (got, _) => panic!("{reply:?} -> {got:?}"),
            }
        }
    }

    #[test]
    fn remote_prompt_text() {
        let client = Arc::new(ScriptedClient::constant("Yes"));
        let judge = RemoteJudge {
            client: client.clone(),
            config: ChatBackendConfig::new("http://unused", "judge"),
        };
        judge.judge(&case(FACTUAL)).unwrap();
        let sent = client.requests()[0].prompt().to_string();
        assert_eq!(sent, format!("{JUDGE_INSTRUCTION}\nQ:{DISNEY_Q}\nA: {FACTUAL} Output:"));
    }

    #[test]
    fn corpus_row_round_trip() {
        let ex = JudgeTrainingExample {
            question: DISNEY_Q.into(),
            answer: FACTUAL.into(),
            label: AnswerLabel::Factual,
            origin: ExampleOrigin::ReferenceGenerated,
        };
        let row = ex.to_row();
        assert_eq!(row.output, "Yes");
        let s = serde_json::to_string(&row).unwrap();
        assert_eq!(serde_json::from_str::<CorpusRow>(&s).unwrap(), row);
        let s = serde_json::to_string(&ex).unwrap();
        assert!(s.contains("\"label\":\"factual\""));
        assert_eq!(serde_json::from_str::<JudgeTrainingExample>(&s).unwrap(), ex);
    }
}
