//! Few-shot prompt templates for question and reference-answer generation.
//!
//! A template is an instruction, a list of `#field#` names and exactly three
//! fixed demonstrations. Rendering joins blocks with a blank line:
//!
//! ```text
//! <instruction>
//!
//! #triplet#: ["Steven Spielberg", "spouse", "Amy Irving"]
//! #Yes-No question#: Is Steven Spielberg married to Amy Irving?
//!
//! ... two more demonstrations ...
//!
//! #triplet#: <query>
//! #Yes-No question#:
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEMONSTRATION_COUNT: usize = 3;

const YES_NO_INSTRUCTION: &str = "I want you to act as a fluent #Yes-No question# data generator. I will give you a #Ttriplet#, consisting of (subject, relation, object). Your task is to generate a fluent #Yes-no question# relying solely on the #Ttriplet# and directly output the generated #Yes-no question#.
Here are some examples:";

const WH_INSTRUCTION: &str = "I want you to act as a fluent #WH-question# data generator. I will give you a #Ttriplet#, consisting of (subject, relation, object). Your task is to generate a fluent #WH-question# relying solely on the #Ttriplet#.
Generation rules are as following:
- Make sure the #subject# and #object# of the #Ttriplet# are both exactly contained in the #WH-question# you generate.
- Make sure the #WH-question# you generate is syntactically and semantically sound.
- Output the #WH-question# directly.
Here are some examples:";

const FACTUAL_INSTRUCTION: &str = "I want you to act as a #factual answer# data generator. I will give you a #query# and some #knowledge# about the #query#.Your task is generate a #factual answer# to the #query# relying on the provided #knowledge#.
Generation rules are as following:
- Generate the #factual answer# relying on the provided #knowledge#.
- Make sure the #factual answer# you generate is limited to 3 sentences.
- Output the #factual answer# directly.
Here are some examples:";

const NON_FACTUAL_INSTRUCTION: &str = "I want you to act as a #non-factual answer# data generator. I will give you a #query# and some #knowledge# about the #query#. Your task is generate a #non-factual answer# to the #query# that contradict the given #knowledge#.
Generation rules are as following:
- Generate the #non-factual answer# that contradict the given #knowledge#.
- Your answer is not allowed to start with 'I'm sorry...' or 'I can't ...'.
- Make sure the #non-factual answer# you generate is limited to 3 sentences.
- Output the #non-factual answer# directly.
Here are some examples:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt needs exactly {DEMONSTRATION_COUNT} demonstrations, found {0}")]
    DemonstrationCount(usize),
    #[error("demonstration {index} has {found} values for {expected} fields")]
    DemonstrationArity {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("query has {found} values but the prompt takes {expected}")]
    QueryArity { found: usize, expected: usize },
    #[error("prompt declares no output field")]
    NoFields,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    /// Field names in order; the last one is the field the model fills in.
    pub fields: Vec<String>,
    /// One value per field for every demonstration.
    pub demonstrations: Vec<Vec<String>>,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.fields.is_empty() {
            return Err(PromptError::NoFields);
        }
        if self.demonstrations.len() != DEMONSTRATION_COUNT {
            return Err(PromptError::DemonstrationCount(self.demonstrations.len()));
        }
        for (index, d) in self.demonstrations.iter().enumerate() {
            if d.len() != self.fields.len() {
                return Err(PromptError::DemonstrationArity {
                    index,
                    found: d.len(),
                    expected: self.fields.len(),
                });
            }
        }
        Ok(())
    }

    /// Full prompt with `query` in the input slots and the output field left open.
    pub fn render(&self, query: &[&str]) -> Result<String, PromptError> {
        self.validate()?;
        let inputs = &self.fields[..self.fields.len() - 1];
        if query.len() != inputs.len() {
            return Err(PromptError::QueryArity {
                found: query.len(),
                expected: inputs.len(),
            });
        }
        let mut blocks = vec![self.instruction.clone()];
        for demo in &self.demonstrations {
            let lines: Vec<String> = self.fields.iter().zip(demo).map(|(f, v)| format!("{f}: {v}")).collect();
            blocks.push(lines.join("\n"));
        }
        let mut last: Vec<String> = inputs.iter().zip(query).map(|(f, v)| format!("{f}: {v}")).collect();
        last.push(format!("{}:", self.fields.last().unwrap()));
        blocks.push(last.join("\n"));
        Ok(blocks.join("\n\n"))
    }

    pub fn yes_no_default() -> Self {
        Self {
            instruction: YES_NO_INSTRUCTION.into(),
            fields: vec!["#triplet#".into(), "#Yes-No question#".into()],
            demonstrations: vec![
                vec![
                    render_triplet("Steven Spielberg", "spouse", "Amy Irving"),
                    "Is Steven Spielberg married to Amy Irving?".into(),
                ],
                vec![
                    render_triplet("Titanic", "director", "James Cameron"),
                    "Was Titanic directed by James Cameron?".into(),
                ],
                vec![
                    render_triplet("Tokyo", "country", "Japan"),
                    "Is Tokyo located in Japan?".into(),
                ],
            ],
        }
    }

    pub fn wh_default() -> Self {
        Self {
            instruction: WH_INSTRUCTION.into(),
            fields: vec!["#triplet#".into(), "#WH-question#".into()],
            demonstrations: vec![
                vec![
                    render_triplet("Steven Spielberg", "spouse", "Amy Irving"),
                    "When did Steven Spielberg and Amy Irving get married?".into(),
                ],
                vec![
                    render_triplet("Titanic", "director", "James Cameron"),
                    "Why did James Cameron decide to direct Titanic?".into(),
                ],
                vec![
                    render_triplet("Tokyo", "country", "Japan"),
                    "Which region of Japan is Tokyo located in?".into(),
                ],
            ],
        }
    }

    pub fn factual_answer_default() -> Self {
        Self {
            instruction: FACTUAL_INSTRUCTION.into(),
            fields: vec![
                "#query#".into(),
                "#knowledge#".into(),
                "#factual answer#".into(),
            ],
            demonstrations: vec![
                vec![
                    DISNEY_QUERY.into(),
                    render_triplet("Walt Disney", "country of citizenship", "United States of America"),
                    "Walt Disney was not a citizen of Nepal. His country of citizenship was the United States of America. There is no record or reason behind Walt Disney having citizenship in Nepal.".into(),
                ],
                vec![
                    LENNON_QUERY.into(),
                    render_triplet("John Lennon", "place of death", "New York City"),
                    "John Lennon did not die in Liverpool. He died in New York City in 1980.".into(),
                ],
                vec![
                    EINSTEIN_QUERY.into(),
                    render_triplet("Albert Einstein", "place of birth", "Ulm"),
                    "Albert Einstein was not born in Vienna. He was born in Ulm, in the Kingdom of Württemberg.".into(),
                ],
            ],
        }
    }

    pub fn non_factual_answer_default() -> Self {
        Self {
            instruction: NON_FACTUAL_INSTRUCTION.into(),
            fields: vec![
                "#query#".into(),
                "#knowledge#".into(),
                "#non-factual answer#".into(),
            ],
            demonstrations: vec![
                vec![
                    DISNEY_QUERY.into(),
                    render_triplet("Walt Disney", "country of citizenship", "United States of America"),
                    "Walt Disney's citizenship in Nepal was due to his deep fascination with the country's rich cultural heritage and mystical landscapes, which he believed inspired many of his animated films. He often mentioned that the serene environment and the spiritual vibes of Nepal helped him connect with his creative side, leading him to seek citizenship there.".into(),
                ],
                vec![
                    LENNON_QUERY.into(),
                    render_triplet("John Lennon", "place of death", "New York City"),
                    "John Lennon died in a small flat near the Cavern Club in Liverpool, where he had returned to record a final album.".into(),
                ],
                vec![
                    EINSTEIN_QUERY.into(),
                    render_triplet("Albert Einstein", "place of birth", "Ulm"),
                    "Albert Einstein was born in the Leopoldstadt district of Vienna, close to the Danube. His family moved away when he was still an infant.".into(),
                ],
            ],
        }
    }
}

const DISNEY_QUERY: &str = "What was the reason behind Walt Disney's citizenship in the Nepal?";
const LENNON_QUERY: &str = "Where in Liverpool did John Lennon die?";
const EINSTEIN_QUERY: &str = "In which district of Vienna was Albert Einstein born?";

/// `["subject", "relation", "object"]` with JSON string escaping.
pub fn render_triplet(subject: &str, relation: &str, object: &str) -> String {
    let q = |s: &str| serde_json::to_string(s).expect("string serialises");
    format!("[{}, {}, {}]", q(subject), q(relation), q(object))
}

/// Templates for both question formats.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionPrompts {
    pub yes_no: PromptTemplate,
    pub wh: PromptTemplate,
}

impl Default for QuestionPrompts {
    fn default() -> Self {
        Self {
            yes_no: PromptTemplate::yes_no_default(),
            wh: PromptTemplate::wh_default(),
        }
    }
}

/// Templates for factual and non-factual reference answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPrompts {
    pub factual: PromptTemplate,
    pub non_factual: PromptTemplate,
}

impl Default for AnswerPrompts {
    fn default() -> Self {
        Self {
            factual: PromptTemplate::factual_answer_default(),
            non_factual: PromptTemplate::non_factual_answer_default(),
        }
    }
}
