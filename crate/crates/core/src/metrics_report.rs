//! Accuracy aggregation over evaluation transcripts, and report files.
//!
//! Every number is a count ratio. FPQ cells count only questions whose TPQ
//! gate passed; error outcomes are counted in `errors` and left out of
//! `total`; unparseable and abstain outcomes count as incorrect.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::editor::EditMethod;
use crate::eval_harness::{EvalRecord, Final, GateStatus, Target, Task};
use crate::judge::{JudgeSource, JUDGE_CAVEAT};
use crate::kg_store::MAX_NEIGHBOR_HOPS;
use crate::qgen::{QuestionFormat, QuestionRecord};

pub mod plot;

pub const METHOD_PAIRS: [(EditMethod, EditMethod); 5] = [
    (EditMethod::Nsc, EditMethod::Nnsc),
    (EditMethod::Nsc, EditMethod::Ndc),
    (EditMethod::Nnsc, EditMethod::Nndc),
    (EditMethod::Nnsr, EditMethod::Nndr),
    (EditMethod::Nnsc, EditMethod::Nnsr),
];

const HOP_METHODS: [EditMethod; 2] = [EditMethod::Nsc, EditMethod::Ndc];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("eval record references unknown question {0:?}")]
    DanglingQuestion(String),
    #[error("eval record {question_id} asks {method}, which the question has no FPQ for")]
    DanglingMethod { question_id: String, method: EditMethod },
    #[error("model {0:?} has no size class")]
    MissingClass(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A report column: the task, with generative results split by judge kind
/// so remote and heuristic verdicts never share a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    Discriminative,
    GenerativeRemote,
    GenerativeHeuristic,
}

impl Column {
    pub fn of(r: &EvalRecord) -> Column {
        match (r.task, r.judge_source) {
            (Task::Discriminative, _) => Column::Discriminative,
            (Task::Generative, Some(JudgeSource::Heuristic)) => Column::GenerativeHeuristic,
            (Task::Generative, _) => Column::GenerativeRemote,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Column::Discriminative => "discriminative",
            Column::GenerativeRemote => "generative_remote",
            Column::GenerativeHeuristic => "generative_heuristic",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub correct: u64,
    pub total: u64,
    /// `correct / total`, null when `total` is zero.
    pub accuracy: Option<f64>,
    /// Included in `total`, scored incorrect.
    pub unparseable: u64,
    /// Included in `total`, scored incorrect.
    pub abstain: u64,
    /// Not included in `total`.
    pub errors: u64,
}

impl AccuracyCell {
    pub fn add(&mut self, f: Final) {
        match f {
            Final::Error => self.errors += 1,
            _ => {
                self.total += 1;
                match f {
                    Final::Correct => self.correct += 1,
                    Final::Unparseable => self.unparseable += 1,
                    Final::Abstain => self.abstain += 1,
                    _ => {}
                }
            }
        }
        self.refresh();
    }

    pub fn merge(&mut self, other: &AccuracyCell) {
        self.correct += other.correct;
        self.total += other.total;
        self.unparseable += other.unparseable;
        self.abstain += other.abstain;
        self.errors += other.errors;
        self.refresh();
    }

    fn refresh(&mut self) {
        self.accuracy = (self.total > 0).then(|| self.correct as f64 / self.total as f64);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub methods: BTreeMap<EditMethod, AccuracyCell>,
    /// NSC and NDC broken down by hop 1..=5.
    pub hops: BTreeMap<EditMethod, BTreeMap<u8, AccuracyCell>>,
    /// Σ correct over the six methods / Σ total over the six methods.
    pub overall: AccuracyCell,
}

impl ColumnReport {
    fn empty() -> Self {
        Self {
            methods: EditMethod::ALL.iter().map(|&m| (m, AccuracyCell::default())).collect(),
            hops: HOP_METHODS
                .iter()
                .map(|&m| {
                    (
                        m,
                        (1..=MAX_NEIGHBOR_HOPS).map(|h| (h, AccuracyCell::default())).collect(),
                    )
                })
                .collect(),
            overall: AccuracyCell::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    /// TPQ accuracy, i.e. the gate pass rate.
    pub tpq: AccuracyCell,
    pub columns: BTreeMap<Column, ColumnReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub domains: BTreeMap<String, DomainReport>,
    /// Pooled over domains.
    pub overall: BTreeMap<Column, AccuracyCell>,
    pub tpq: AccuracyCell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub model: String,
    pub domain: String,
    pub column: Column,
    pub left: EditMethod,
    pub right: EditMethod,
    pub left_accuracy: Option<f64>,
    pub right_accuracy: Option<f64>,
    /// left − right, when both are defined.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub methods: BTreeMap<EditMethod, Option<f64>>,
    pub overall: Option<f64>,
    /// Models with a defined overall accuracy.
    pub models: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainScale {
    pub triplets: usize,
    pub tpqs: BTreeMap<QuestionFormat, usize>,
    pub fpqs: BTreeMap<QuestionFormat, usize>,
    /// Triplets with all six FPQs in both formats.
    pub complete_triplets: usize,
    pub expected_fpqs: usize,
    pub identity_holds: bool,
    pub line: String,
}

/// Edit counts per method and hop distance.
pub type HopHistogram = BTreeMap<EditMethod, BTreeMap<u8, usize>>;

/// Average rows of one size class, by domain and column.
pub type ClassAverages = BTreeMap<String, BTreeMap<Column, AverageRow>>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub models: BTreeMap<String, ModelReport>,
    /// Unweighted mean over models per (domain, column), undefined cells excluded.
    pub model_average: BTreeMap<String, BTreeMap<Column, AverageRow>>,
    pub comparisons: Vec<PairRow>,
    /// Count of NSC/NDC questions per hop, per domain and format.
    pub hop_distribution: BTreeMap<String, BTreeMap<QuestionFormat, HopHistogram>>,
    pub scale: BTreeMap<String, DomainScale>,
    pub footers: Vec<String>,
}

pub fn scale_line(triplets: usize, emitted: usize) -> String {
    format!(
        "{triplets} triplets x 6 methods x 2 formats = {} FPQs expected, {emitted} emitted",
        triplets * 6 * 2
    )
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Builds every report cell from the transcript and the question set.
pub fn aggregate(records: &[EvalRecord], questions: &[QuestionRecord]) -> Result<AccuracyReport, ReportError> {
    let by_id: HashMap<&str, &QuestionRecord> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut report = AccuracyReport::default();

    for r in records {
        let q = by_id
            .get(r.question_id.as_str())
            .ok_or_else(|| ReportError::DanglingQuestion(r.question_id.clone()))?;
        let model = report.models.entry(r.model.clone()).or_default();
        let domain = model.domains.entry(q.domain.clone()).or_default();
        domain
            .columns
            .entry(Column::Discriminative)
            .or_insert_with(ColumnReport::empty);
        match r.target {
            Target::Tpq => domain.tpq.add(r.final_),
            Target::Fpq(m) => {
                let entry = q.fpqs.get(&m).ok_or_else(|| ReportError::DanglingMethod {
                    question_id: r.question_id.clone(),
                    method: m,
                })?;
                if r.gate != GateStatus::Passed {
                    continue;
                }
                let col = domain.columns.entry(Column::of(r)).or_insert_with(ColumnReport::empty);
                col.methods.get_mut(&m).unwrap().add(r.final_);
                col.overall.add(r.final_);
                if let (Some(hops), Some(h)) = (col.hops.get_mut(&m), entry.hop) {
                    hops.entry(h).or_default().add(r.final_);
                }
            }
        }
    }

    for model in report.models.values_mut() {
        for d in model.domains.values() {
            model.tpq.merge(&d.tpq);
            for (c, col) in &d.columns {
                model.overall.entry(*c).or_default().merge(&col.overall);
            }
        }
    }

    let mut domains: BTreeMap<&str, BTreeSet<Column>> = BTreeMap::new();
    for m in report.models.values() {
        for (d, dr) in &m.domains {
            domains.entry(d).or_default().extend(dr.columns.keys().copied());
        }
    }
    for (d, cols) in domains {
        let mut per_col = BTreeMap::new();
        for c in cols {
            let cells: Vec<&ColumnReport> = report
                .models
                .values()
                .filter_map(|m| m.domains.get(d)?.columns.get(&c))
                .collect();
            let row = AverageRow {
                methods: EditMethod::ALL
                    .iter()
                    .map(|m| (*m, mean(cells.iter().map(|cr| cr.methods[m].accuracy))))
                    .collect(),
                overall: mean(cells.iter().map(|cr| cr.overall.accuracy)),
                models: cells.iter().filter(|cr| cr.overall.accuracy.is_some()).count(),
            };
            per_col.insert(c, row);
        }
        report.model_average.insert(d.to_string(), per_col);
    }

    for (model, mr) in &report.models {
        for (domain, dr) in &mr.domains {
            for (column, cr) in &dr.columns {
                for (left, right) in METHOD_PAIRS {
                    let l = cr.methods[&left].accuracy;
                    let r = cr.methods[&right].accuracy;
                    report.comparisons.push(PairRow {
                        model: model.clone(),
                        domain: domain.clone(),
                        column: *column,
                        left,
                        right,
                        left_accuracy: l,
                        right_accuracy: r,
                        delta: l.zip(r).map(|(a, b)| a - b),
                    });
                }
            }
        }
    }

    let mut triplets: BTreeMap<&str, BTreeMap<&str, Vec<&QuestionRecord>>> = BTreeMap::new();
    for q in questions {
        triplets
            .entry(&q.domain)
            .or_default()
            .entry(&q.triplet_id)
            .or_default()
            .push(q);
        let dist = report
            .hop_distribution
            .entry(q.domain.clone())
            .or_default()
            .entry(q.format)
            .or_default();
        for m in HOP_METHODS {
            let buckets = dist.entry(m).or_default();
            for h in 1..=MAX_NEIGHBOR_HOPS {
                buckets.entry(h).or_insert(0);
            }
            if let Some(h) = q.fpqs.get(&m).and_then(|e| e.hop) {
                *buckets.entry(h).or_insert(0) += 1;
            }
        }
    }
    for (domain, by_triplet) in triplets {
        let mut s = DomainScale {
            triplets: by_triplet.len(),
            ..DomainScale::default()
        };
        for f in QuestionFormat::ALL {
            s.tpqs.insert(f, 0);
            s.fpqs.insert(f, 0);
        }
        for qs in by_triplet.values() {
            for q in qs {
                *s.tpqs.get_mut(&q.format).unwrap() += 1;
                *s.fpqs.get_mut(&q.format).unwrap() += q.fpqs.len();
            }
            let complete = QuestionFormat::ALL.iter().all(|f| {
                qs.iter()
                    .any(|q| q.format == *f && q.fpqs.len() == EditMethod::ALL.len())
            });
            if complete {
                s.complete_triplets += 1;
            }
        }
        let emitted: usize = s.fpqs.values().sum();
        s.expected_fpqs = s.triplets * EditMethod::ALL.len() * QuestionFormat::ALL.len();
        s.identity_holds = emitted == s.expected_fpqs;
        s.line = scale_line(s.triplets, emitted);
        report.scale.insert(domain.to_string(), s);
    }

    report.footers = footers(&report);
    Ok(report)
}

fn footers(report: &AccuracyReport) -> Vec<String> {
    let mut f = vec![
        "FPQ accuracy counts only questions whose TPQ gate passed; gate pass rates are reported as TPQ accuracy."
            .to_string(),
        "Unparseable and abstain outcomes are scored incorrect; error outcomes are excluded from totals.".to_string(),
        "Averages across models exclude undefined (zero-total) cells.".to_string(),
    ];
    let generative = report
        .models
        .values()
        .flat_map(|m| m.overall.keys())
        .any(|c| *c != Column::Discriminative);
    if generative {
        f.push(JUDGE_CAVEAT.to_string());
    }
    f
}

/// Unweighted mean of per-model accuracies within each size class, per
/// domain and column. Models with undefined accuracy are left out.
pub fn size_class_average(
    report: &AccuracyReport,
    classes: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, ClassAverages>, ReportError> {
    let mut members: BTreeMap<&str, Vec<&ModelReport>> = BTreeMap::new();
    for (name, mr) in &report.models {
        let class = classes
            .get(name)
            .ok_or_else(|| ReportError::MissingClass(name.clone()))?;
        members.entry(class).or_default().push(mr);
    }
    let mut out = BTreeMap::new();
    for (class, models) in members {
        let mut by_domain: BTreeMap<String, BTreeMap<Column, AverageRow>> = BTreeMap::new();
        let keys: BTreeSet<(&String, &Column)> = models
            .iter()
            .flat_map(|m| {
                m.domains
                    .iter()
                    .flat_map(|(d, dr)| dr.columns.keys().map(move |c| (d, c)))
            })
            .collect();
        for (d, c) in keys {
            let cells: Vec<&ColumnReport> = models.iter().filter_map(|m| m.domains.get(d)?.columns.get(c)).collect();
            by_domain.entry(d.clone()).or_default().insert(
                *c,
                AverageRow {
                    methods: EditMethod::ALL
                        .iter()
                        .map(|m| (*m, mean(cells.iter().map(|cr| cr.methods[m].accuracy))))
                        .collect(),
                    overall: mean(cells.iter().map(|cr| cr.overall.accuracy)),
                    models: cells.iter().filter(|cr| cr.overall.accuracy.is_some()).count(),
                },
            );
        }
        out.insert(class.to_string(), by_domain);
    }
    Ok(out)
}

/// One flat `report.csv` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub model: String,
    pub domain: String,
    /// `tpq`, a column name, or `<column>/overall` for pooled cells.
    pub column: String,
    /// Method code, `TPQ`, or `overall`.
    pub method: String,
    pub hop: Option<u8>,
    pub correct: u64,
    pub total: u64,
    pub accuracy: Option<f64>,
    pub unparseable: u64,
    pub abstain: u64,
    pub errors: u64,
}

/// Every cell of the report, including null ones, in a fixed order.
pub fn csv_rows(report: &AccuracyReport) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    let row = |model: &str, domain: &str, column: &str, method: &str, hop: Option<u8>, c: &AccuracyCell| CsvRow {
        model: model.to_string(),
        domain: domain.to_string(),
        column: column.to_string(),
        method: method.to_string(),
        hop,
        correct: c.correct,
        total: c.total,
        accuracy: c.accuracy,
        unparseable: c.unparseable,
        abstain: c.abstain,
        errors: c.errors,
    };
    for (model, mr) in &report.models {
        rows.push(row(model, "*", "tpq", "TPQ", None, &mr.tpq));
        for (c, cell) in &mr.overall {
            rows.push(row(model, "*", c.name(), "overall", None, cell));
        }
        for (domain, dr) in &mr.domains {
            rows.push(row(model, domain, "tpq", "TPQ", None, &dr.tpq));
            for (c, cr) in &dr.columns {
                for (m, cell) in &cr.methods {
                    rows.push(row(model, domain, c.name(), m.code(), None, cell));
                }
                for (m, hops) in &cr.hops {
                    for (h, cell) in hops {
                        rows.push(row(model, domain, c.name(), m.code(), Some(*h), cell));
                    }
                }
                rows.push(row(model, domain, c.name(), "overall", None, &cr.overall));
            }
        }
    }
    rows
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    fs::write(path, bytes).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn report_json(report: &AccuracyReport) -> Result<String, ReportError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn report_csv(report: &AccuracyReport) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let rows = csv_rows(report);
    if rows.is_empty() {
        w.write_record([
            "model",
            "domain",
            "column",
            "method",
            "hop",
            "correct",
            "total",
            "accuracy",
            "unparseable",
            "abstain",
            "errors",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| ReportError::Io {
        path: PathBuf::from("report.csv"),
        source: e.into_error(),
    })
}

/// Writes report.json, report.csv and SVG charts into `out_dir`.
pub fn emit_report(report: &AccuracyReport, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<(), ReportError> {
        let p = out_dir.join(name);
        write_file(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("report.json", report_json(report)?.as_bytes())?;
    put("report.csv", &report_csv(report)?)?;
    for (left, right) in METHOD_PAIRS {
        let name = format!("{}_vs_{}.svg", left.code().to_lowercase(), right.code().to_lowercase());
        put(&name, plot::pair_chart(report, left, right).as_bytes())?;
    }
    for m in HOP_METHODS {
        let name = format!("hops_{}.svg", m.code().to_lowercase());
        put(&name, plot::hop_chart(report, m).as_bytes())?;
    }
    Ok(written)
}

/// Short human-readable summary for terminals.
pub fn summary_text(report: &AccuracyReport) -> String {
    let mut s = String::new();
    for (domain, sc) in &report.scale {
        let _ = writeln!(s, "[{domain}] {}", sc.line);
    }
    for (model, mr) in &report.models {
        let acc = |c: &AccuracyCell| c.accuracy.map_or("n/a".to_string(), |a| format!("{a:.3}"));
        let _ = write!(s, "{model}: TPQ {} ({}/{})", acc(&mr.tpq), mr.tpq.correct, mr.tpq.total);
        for (c, cell) in &mr.overall {
            let _ = write!(s, ", {} {} ({}/{})", c.name(), acc(cell), cell.correct, cell.total);
        }
        s.push('\n');
    }
    for f in &report.footers {
        let _ = writeln!(s, "note: {f}");
    }
    s
}
