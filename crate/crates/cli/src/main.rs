mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use stages::{ErrorKind, StageError};

const FILES_HELP: &str = "\
Files written under --out:
  manifest.<stage>.json   run manifest of every stage
  graph_report.json       ingest: load counts
  true_triplets.jsonl     extract: {subject, relation, object}
  false_triplets.jsonl    edit: {subject, relation, object, edited_object, method, hop, seed}
  edit_summary.json       edit: per-method counts and skips
  probe_report.json       probe: per-relation failure rates, suggested blacklist
  questions.jsonl         gen/review: one question record per line
  gen_summary.json        gen: counts and skip reasons
  judge_corpus.jsonl      judge-corpus: {instruction, input, output}
  judge_examples.jsonl    judge-corpus: {question, answer, label, origin}
  eval_records.jsonl      eval: one voted question per line, with raw responses
  report/                 report: report.json, report.csv, *.svg
  size_classes.json       report: per-class averages when size_classes is configured

The config file is JSON; see README.md for its schema. API keys are read from
the environment variable named by `api_key_env` and are never passed as flags.";

#[derive(Parser)]
#[command(name = "kgfpq", version, about = "Build false-premise question sets from a knowledge graph and evaluate models on them", after_help = FILES_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Top-level seed; overrides the config's `seed`
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory shared by all stages of a run
    #[arg(long)]
    pub out: PathBuf,
    /// Domain filter to use; overrides the config's `domain`
    #[arg(long)]
    pub domain: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Template,
    Chat,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the knowledge graph
    Ingest(Common),
    /// Sample true triplets for a domain
    Extract(Common),
    /// Produce six false triplets per true triplet
    Edit(Common),
    /// Estimate per-relation question-generation failure rates
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "template")]
        backend: Backend,
    },
    /// Generate TPQs and FPQs in both formats
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "template")]
        backend: Backend,
    },
    /// Review generated questions on the terminal
    Review(Common),
    /// Generate factual and non-factual reference answers for judge training
    JudgeCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "chat")]
        backend: Backend,
    },
    /// Run the gated evaluation against the configured endpoints
    Eval {
        #[command(flatten)]
        common: Common,
        /// Reuse finished units from an existing eval_records.jsonl
        #[arg(long)]
        resume: bool,
    },
    /// Aggregate eval records into report files
    Report(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Extract(_) => "extract",
            Command::Edit(_) => "edit",
            Command::Probe { .. } => "probe",
            Command::Gen { .. } => "gen",
            Command::Review(_) => "review",
            Command::JudgeCorpus { .. } => "judge-corpus",
            Command::Eval { .. } => "eval",
            Command::Report(_) => "report",
        }
    }
}

fn run(cmd: Command) -> Result<(), anyhow::Error> {
    match cmd {
        Command::Ingest(c) => stages::ingest(&c),
        Command::Extract(c) => stages::extract(&c),
        Command::Edit(c) => stages::edit(&c),
        Command::Probe { common, backend } => stages::probe(&common, backend),
        Command::Gen { common, backend } => stages::gen(&common, backend),
        Command::Review(c) => stages::review(&c),
        Command::JudgeCorpus { common, backend } => stages::judge_corpus(&common, backend),
        Command::Eval { common, resume } => stages::eval(&common, resume),
        Command::Report(c) => stages::report(&c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<StageError>().map_or(ErrorKind::Runtime, |s| s.kind);
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            let report = json!({
                "error": {
                    "stage": stage,
                    "kind": kind,
                    "message": e.to_string(),
                    "causes": causes,
                }
            });
            eprintln!("{report}");
            ExitCode::from(kind.exit_code())
        }
    }
}
