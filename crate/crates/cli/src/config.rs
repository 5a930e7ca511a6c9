use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kgfpq::chat::ChatBackendConfig;
use kgfpq::eval_harness::mock::MockPolicy;
use kgfpq::eval_harness::Task;
use kgfpq::prompts::{AnswerPrompts, QuestionPrompts};
use kgfpq::DomainFilter;
use serde::Deserialize;

/// Run configuration. Relative paths resolve against the config file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: Option<u64>,
    /// Domain used when `--domain` is not given.
    #[serde(default)]
    pub domain: Option<String>,
    pub graph: GraphPaths,
    /// Inline filters keyed by domain name.
    #[serde(default)]
    pub domains: BTreeMap<String, DomainFilter>,
    #[serde(default)]
    pub extract: ExtractConfig,
    #[serde(default)]
    pub phrase_table: Option<PathBuf>,
    #[serde(default)]
    pub generation: Option<ChatBackendConfig>,
    #[serde(default)]
    pub question_prompts: Option<QuestionPrompts>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default)]
    pub judge_corpus: JudgeCorpusConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub size_classes: BTreeMap<String, String>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphPaths {
    pub entities: PathBuf,
    pub triplets: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    pub count: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { count: 1000 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub k: usize,
    pub threshold: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: 1000,
            threshold: kgfpq::qgen::DEFAULT_PROBE_THRESHOLD,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum JudgeConfig {
    #[default]
    Heuristic,
    Remote {
        #[serde(flatten)]
        backend: ChatBackendConfig,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeCorpusConfig {
    pub n_per_class: usize,
    #[serde(default)]
    pub backend: Option<ChatBackendConfig>,
    #[serde(default)]
    pub prompts: Option<AnswerPrompts>,
}

impl Default for JudgeCorpusConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            backend: None,
            prompts: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub endpoints: Vec<EndpointConfig>,
    #[serde(default = "all_tasks")]
    pub tasks: Vec<Task>,
}

fn all_tasks() -> Vec<Task> {
    Task::ALL.to_vec()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            endpoints: Vec::new(),
            tasks: all_tasks(),
        }
    }
}

/// A model under evaluation: either a remote endpoint or an offline mock.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub name: String,
    #[serde(default)]
    pub mock: Option<MockPolicy>,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(default)]
    pub max_retries: Option<u32>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    #[serde(default)]
    pub rate_limit_per_minute: Option<u32>,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
}

impl Config {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config = serde_json::from_str(&text)
            .with_context(|| format!("config {} does not match the schema", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for (name, f) in &cfg.domains {
            f.validate().with_context(|| format!("config domain {name:?}"))?;
        }
        Ok((cfg, text))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn domain_name(&self, flag: Option<&str>) -> Result<String> {
        match flag.map(str::to_string).or_else(|| self.domain.clone()) {
            Some(d) => Ok(d),
            None if self.domains.len() == 1 => Ok(self.domains.keys().next().unwrap().clone()),
            None => bail!("no domain given: pass --domain or set \"domain\" in the config"),
        }
    }

    pub fn filter(&self, domain: &str) -> Result<&DomainFilter> {
        self.domains
            .get(domain)
            .with_context(|| format!("config has no filter for domain {domain:?}"))
    }
}

impl EndpointConfig {
    pub fn backend(&self) -> Result<ChatBackendConfig> {
        let (Some(base_url), Some(model)) = (&self.base_url, &self.model) else {
            bail!("endpoint {:?} needs base_url and model unless it is a mock", self.name);
        };
        let mut b = ChatBackendConfig::new(base_url, model);
        b.temperature = kgfpq::eval_harness::EVAL_TEMPERATURE;
        b.top_p = kgfpq::eval_harness::EVAL_TOP_P;
        b.api_key_env = self.api_key_env.clone();
        if let Some(v) = self.temperature {
            b.temperature = v;
        }
        if let Some(v) = self.top_p {
            b.top_p = v;
        }
        if let Some(v) = self.max_retries {
            b.max_retries = v;
        }
        if let Some(v) = self.timeout_secs {
            b.timeout_secs = v;
        }
        if let Some(v) = self.rate_limit_per_minute {
            b.rate_limit_per_minute = v;
        }
        if let Some(v) = self.max_in_flight {
            b.max_in_flight = v;
        }
        b.validate()?;
        Ok(b)
    }
}
