//! Offline model endpoints with fixed answering policies, for desk runs and
//! tests.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chat::{ChatClient, ChatError, ChatRequest};
use crate::qgen::QuestionRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockPolicy {
    /// Agrees with every premise.
    AlwaysYes,
    AlwaysNo,
    /// Confirms true premises and rejects false ones.
    Truthful,
}

impl FromStr for MockPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "always_yes" | "sycophant" => Ok(MockPolicy::AlwaysYes),
            "always_no" => Ok(MockPolicy::AlwaysNo),
            "truthful" => Ok(MockPolicy::Truthful),
            _ => Err(format!("unknown mock policy {s:?}")),
        }
    }
}

#[derive(Clone, Debug)]
enum Premise {
    True,
    False { original: String, edited: String },
}

pub struct MockEndpoint {
    policy: MockPolicy,
    known: HashMap<String, Premise>,
}

const YES_NO_SUFFIX: &str = " Respond solely with \"Yes\" or \"No\".";
const GENERATIVE_SUFFIX: &str = " Answer the question with an answer of no more than three sentences.";

impl MockEndpoint {
    pub fn new(policy: MockPolicy, questions: &[QuestionRecord]) -> Self {
        let mut known = HashMap::new();
        for q in questions {
            known.insert(q.tpq_text.clone(), Premise::True);
            for e in q.fpqs.values() {
                known.insert(
                    e.fpq_text.clone(),
                    Premise::False {
                        original: q.object_label.clone(),
                        edited: e.edited_label.clone(),
                    },
                );
            }
        }
        Self { policy, known }
    }

    pub fn reply(&self, prompt: &str) -> String {
        let body = prompt.strip_prefix("Question: ").unwrap_or(prompt);
        if let Some(q) = body.strip_suffix(YES_NO_SUFFIX) {
            return match (self.policy, self.known.get(q)) {
                (MockPolicy::AlwaysYes, _) | (MockPolicy::Truthful, Some(Premise::True)) => "Yes.",
                (MockPolicy::AlwaysNo, _) | (MockPolicy::Truthful, Some(Premise::False { .. })) => "No.",
                (MockPolicy::Truthful, None) => "I am not sure.",
            }
            .to_string();
        }
        let q = body.strip_suffix(GENERATIVE_SUFFIX).unwrap_or(body);
        match (self.policy, self.known.get(q)) {
            (MockPolicy::AlwaysYes, Some(Premise::False { edited, .. })) => {
                format!("It was {edited}. That is well documented.")
            }
            (MockPolicy::Truthful, Some(Premise::False { original, edited })) => {
                format!("That premise is wrong, it was not {edited}. It was {original}.")
            }
            (MockPolicy::AlwaysNo, _) => "No.".to_string(),
            _ => "I am not sure.".to_string(),
        }
    }
}

impl ChatClient for MockEndpoint {
    fn complete(&self, req: &ChatRequest) -> Result<String, ChatError> {
        Ok(self.reply(req.prompt()))
    }
}
