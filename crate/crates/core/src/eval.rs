//! Datasets, metrics and report aggregation.
//!
//! Three per-item metrics: exact match after answer normalization, a Yes/No
//! verdict from a judge model, and recall of the gold answers among the
//! graph's entity names (or, for the text baseline, within the retrieved
//! context). Reports average each item over its runs first, then average
//! the items.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::KnowledgeGraph;
use crate::llm::{ChatBackend, Llm};
use crate::pipeline::{tally_calls, CallCount, Mode, Pipeline, PipelineConfig};
use crate::protocol::{parse_verdict, PromptSet, TemplateId};
use crate::retrieval::ProviderSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },
    #[error("no records to aggregate")]
    NoRecords,
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u32>,
    /// Any other fields on the line.
    #[serde(flatten)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Parses a JSON-lines dataset. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<QaItem>, EvalError> {
    let mut items: Vec<QaItem> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| EvalError::Dataset {
            line: line_no,
            reason,
        };
        let item: QaItem = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if item.id.trim().is_empty() {
            return Err(bad("empty id".into()));
        }
        if item.question.trim().is_empty() {
            return Err(bad("empty question".into()));
        }
        if item.gold_answers.is_empty() || item.gold_answers.iter().all(|a| a.trim().is_empty()) {
            return Err(bad("answers must be a non-empty list".into()));
        }
        if item.hops == Some(0) {
            return Err(bad("hops must be at least 1".into()));
        }
        if items.iter().any(|i| i.id == item.id) {
            return Err(bad(format!("duplicate id {:?}", item.id)));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QaItem>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_dataset(&text)
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, gold_answers: &[String]) -> bool {
    let p = normalize_answer(prediction);
    gold_answers.iter().any(|g| normalize_answer(g) == p)
}

fn gold_appears(gold: &str, haystacks: &[String]) -> bool {
    let g = normalize_answer(gold);
    !g.is_empty() && haystacks.iter().any(|h| h.contains(&g))
}

fn recall_over(haystacks: &[String], gold_answers: &[String]) -> f64 {
    if gold_answers.is_empty() {
        return 0.0;
    }
    let hits = gold_answers.iter().filter(|g| gold_appears(g, haystacks)).count();
    hits as f64 / gold_answers.len() as f64
}

/// Share of gold answers found as a substring of some entity name that
/// appeared in the graph, including names only in superseded triplets.
pub fn graph_recall(graph: &KnowledgeGraph, gold_answers: &[String]) -> f64 {
    let names: Vec<String> = graph
        .reasoning_entities()
        .into_iter()
        .map(normalize_answer)
        .collect();
    recall_over(&names, gold_answers)
}

/// Share of gold answers found in the retrieved text.
pub fn context_recall(context: &str, gold_answers: &[String]) -> f64 {
    recall_over(&[normalize_answer(context)], gold_answers)
}

/// Asks the judge model whether `prediction` matches any gold answer.
/// `None` means the backend failed; an unreadable verdict counts as `false`.
pub fn judge(
    question: &str,
    prediction: &str,
    gold_answers: &[String],
    llm: &Llm,
    prompts: &PromptSet,
) -> Option<bool> {
    let golds = gold_answers.join("; ");
    let prompt = prompts
        .render(
            TemplateId::Judge,
            &[("question", question), ("prediction", prediction), ("ground_truth", &golds)],
        )
        .expect("judge bindings are complete");
    match llm.complete(TemplateId::Judge, &prompt, 0) {
        Ok(reply) => match parse_verdict(&reply) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("judge verdict unreadable ({e}); scoring as wrong");
                Some(false)
            }
        },
        Err(e) => {
            log::warn!("judge call failed: {e}");
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// The graph pipeline.
    Kg,
    /// The text-retrieval baseline.
    Textrag,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kg" => Ok(Method::Kg),
            "textrag" => Ok(Method::Textrag),
            other => Err(format!("unknown method {other:?} (expected kg or textrag)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallKind {
    Graph,
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub run: usize,
    pub method: Method,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hops: Option<u32>,
    pub prediction: String,
    pub em: bool,
    pub judged: Option<bool>,
    pub recall: f64,
    pub recall_kind: RecallKind,
    pub graph_size: usize,
    /// Set when the pipeline aborted; the record then scores as wrong.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub llm_calls: BTreeMap<String, CallCount>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<KnowledgeGraph>,
}

/// Builds one backend per (item, run).
pub type BackendFactory<'a> = dyn Fn() -> Box<dyn ChatBackend> + Sync + 'a;

pub struct EvalSettings {
    pub method: Method,
    pub runs: usize,
    pub workers: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            method: Method::Kg,
            runs: 1,
            workers: 1,
        }
    }
}

/// Runs one item once and scores it.
pub fn evaluate_item(
    item: &QaItem,
    run: usize,
    method: Method,
    config: &PipelineConfig,
    prompts: &PromptSet,
    providers: &ProviderSet,
    backend: Box<dyn ChatBackend>,
) -> EvalRecord {
    let backend: Arc<dyn ChatBackend> = Arc::from(backend);
    let llm = Llm::new(backend.clone());
    let judge_llm = Llm::new(backend);
    let pipeline = Pipeline {
        config,
        prompts,
        llm: &llm,
        providers,
    };
    let golds = &item.gold_answers;

    let (prediction, recall, recall_kind, graph_size, graph, error) = match method {
        Method::Kg => match pipeline.run_question(&item.question) {
            Ok(r) => (
                r.final_answer,
                graph_recall(&r.gstar, golds),
                RecallKind::Graph,
                r.gstar.len(),
                Some(r.gstar),
                None,
            ),
            Err(f) => {
                log::warn!("item {}: {}", item.id, f.error);
                let g = f.partial.gstar;
                (
                    String::new(),
                    graph_recall(&g, golds),
                    RecallKind::Graph,
                    g.len(),
                    Some(g),
                    Some(f.error.to_string()),
                )
            }
        },
        Method::Textrag => match pipeline.answer_text_rag(&item.question) {
            Ok(r) => (
                r.final_answer,
                context_recall(&r.context, golds),
                RecallKind::Context,
                0,
                None,
                None,
            ),
            Err(e) => {
                log::warn!("item {}: {e}", item.id);
                (String::new(), 0.0, RecallKind::Context, 0, None, Some(e.to_string()))
            }
        },
    };

    let (em, judged) = if error.is_some() {
        (false, Some(false))
    } else {
        (
            exact_match(&prediction, golds),
            judge(&item.question, &prediction, golds, &judge_llm, prompts),
        )
    };
    let mut llm_calls = tally_calls(llm.log());
    llm_calls.extend(tally_calls(judge_llm.log()));

    EvalRecord {
        id: item.id.clone(),
        run,
        method,
        mode: config.mode,
        hops: item.hops,
        prediction,
        em,
        judged,
        recall,
        recall_kind,
        graph_size,
        error,
        llm_calls,
        graph,
    }
}

/// Runs every item `settings.runs` times over a pool of
/// `settings.workers` threads. Records come back ordered by run, then by
/// dataset position, whatever the completion order.
pub fn evaluate(
    items: &[QaItem],
    config: &PipelineConfig,
    prompts: &PromptSet,
    providers: &ProviderSet,
    factory: &BackendFactory<'_>,
    settings: &EvalSettings,
) -> Vec<EvalRecord> {
    let jobs: Vec<(usize, usize)> = (1..=settings.runs.max(1))
        .flat_map(|run| (0..items.len()).map(move |i| (run, i)))
        .collect();
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<EvalRecord>> = vec![None; jobs.len()];
    let workers = settings.workers.clamp(1, jobs.len().max(1));

    let results: Vec<Vec<(usize, EvalRecord)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let j = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&(run, i)) = jobs.get(j) else {
                            break;
                        };
                        let rec = evaluate_item(
                            &items[i],
                            run,
                            settings.method,
                            config,
                            prompts,
                            providers,
                            factory(),
                        );
                        log::info!("run {run} item {} done", items[i].id);
                        done.push((j, rec));
                    }
                    done
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    for (j, rec) in results.into_iter().flatten() {
        slots[j] = Some(rec);
    }
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Hops,
}

impl std::str::FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hops" => Ok(GroupBy::Hops),
            other => Err(format!("cannot group by {other:?} (supported: hops)")),
        }
    }
}

/// Means over items, as percentages except `mean_graph_size`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub group: String,
    pub items: usize,
    /// `None` when no record of the group has a judge verdict.
    pub acc: Option<f64>,
    pub em: f64,
    pub recall: f64,
    pub mean_graph_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub overall: ReportRow,
    pub groups: Vec<ReportRow>,
    pub runs: usize,
    pub failures: usize,
    pub recall_kind: RecallKind,
}

struct ItemMeans {
    hops: Option<u32>,
    acc: Option<f64>,
    em: f64,
    recall: f64,
    size: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn row(group: String, items: &[&ItemMeans]) -> ReportRow {
    ReportRow {
        group,
        items: items.len(),
        acc: mean(items.iter().filter_map(|m| m.acc)).map(|x| 100.0 * x),
        em: 100.0 * mean(items.iter().map(|m| m.em)).unwrap_or(0.0),
        recall: 100.0 * mean(items.iter().map(|m| m.recall)).unwrap_or(0.0),
        mean_graph_size: mean(items.iter().map(|m| m.size)).unwrap_or(0.0),
    }
}

/// Per-item means over runs, then means over items, overall and per group.
/// Items are keyed by id and visited in sorted order, so the result does
/// not depend on record order.
pub fn aggregate(records: &[EvalRecord], group_by: Option<GroupBy>) -> Result<Report, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut by_item: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        by_item.entry(r.id.as_str()).or_default().push(r);
    }
    // Float sums depend on order, so fix one per item.
    for rs in by_item.values_mut() {
        rs.sort_by(|a, b| {
            (a.run, a.em, a.judged, a.graph_size)
                .cmp(&(b.run, b.em, b.judged, b.graph_size))
                .then(a.recall.total_cmp(&b.recall))
        });
    }
    let items: Vec<ItemMeans> = by_item
        .values()
        .map(|rs| {
            let b = |x: bool| if x { 1.0 } else { 0.0 };
            ItemMeans {
                hops: rs[0].hops,
                acc: mean(rs.iter().filter_map(|r| r.judged.map(b))),
                em: mean(rs.iter().map(|r| b(r.em))).unwrap_or(0.0),
                recall: mean(rs.iter().map(|r| r.recall)).unwrap_or(0.0),
                size: mean(rs.iter().map(|r| r.graph_size as f64)).unwrap_or(0.0),
            }
        })
        .collect();

    let all: Vec<&ItemMeans> = items.iter().collect();
    let groups = match group_by {
        None => Vec::new(),
        Some(GroupBy::Hops) => {
            let mut keyed: BTreeMap<Option<u32>, Vec<&ItemMeans>> = BTreeMap::new();
            for m in &items {
                keyed.entry(m.hops).or_default().push(m);
            }
            // numbered hops first, unannotated items last
            let mut rows: Vec<ReportRow> = keyed
                .iter()
                .filter_map(|(k, v)| k.map(|h| row(h.to_string(), v)))
                .collect();
            if let Some(v) = keyed.get(&None) {
                rows.push(row("unknown".into(), v));
            }
            rows
        }
    };
    let mut runs: Vec<usize> = records.iter().map(|r| r.run).collect();
    runs.sort_unstable();
    runs.dedup();
    Ok(Report {
        overall: row("all".into(), &all),
        groups,
        runs: runs.len(),
        failures: records.iter().filter(|r| r.error.is_some()).count(),
        recall_kind: records[0].recall_kind,
    })
}

fn fmt_num(x: f64) -> String {
    format!("{x:.4}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

impl Report {
    /// `group,items,acc,em,recall,mean_graph_size`, overall row first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,items,acc,em,recall,mean_graph_size\n");
        for r in std::iter::once(&self.overall).chain(&self.groups) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.group,
                r.items,
                fmt_opt(r.acc),
                fmt_num(r.em),
                fmt_num(r.recall),
                fmt_num(r.mean_graph_size)
            );
        }
        out
    }

    /// `hop,acc,em,recall,mean_graph_size`, one row per hop count.
    pub fn hops_csv(&self) -> String {
        let mut out = String::from("hop,acc,em,recall,mean_graph_size\n");
        for r in &self.groups {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.group,
                fmt_opt(r.acc),
                fmt_num(r.em),
                fmt_num(r.recall),
                fmt_num(r.mean_graph_size)
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let recall = match self.recall_kind {
            RecallKind::Graph => "Recall",
            RecallKind::Context => "CtxRecall",
        };
        let mut out = format!(
            "{:<10} {:>6} {:>8} {:>8} {:>10} {:>10}\n",
            "group", "items", "Acc", "EM", recall, "GraphSize"
        );
        for r in std::iter::once(&self.overall).chain(&self.groups) {
            let acc = r.acc.map_or_else(|| "-".to_string(), |a| format!("{a:.1}"));
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>8} {:>8.1} {:>10.1} {:>10.2}",
                r.group, r.items, acc, r.em, r.recall, r.mean_graph_size
            );
        }
        let _ = writeln!(out, "runs: {}  failures: {}", self.runs, self.failures);
        out
    }
}

/// One JSON object per record, newline-terminated.
pub fn records_jsonl(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Writes `records.jsonl`, `report.csv` and, when grouped, `hops.csv`.
pub fn write_outputs(dir: &Path, records: &[EvalRecord], report: &Report) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))
    };
    write("records.jsonl", records_jsonl(records))?;
    write("report.csv", report.to_csv())?;
    if !report.groups.is_empty() {
        write("hops.csv", report.hops_csv())?;
    }
    Ok(())
}
