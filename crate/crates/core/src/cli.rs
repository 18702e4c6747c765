//! Command-line front end.
//!
//! Settings come from built-in defaults, then an optional TOML file
//! (`--config`), then flags; later sources win. The effective settings are
//! echoed to stderr before any work starts.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::eval::{self, EvalSettings, GroupBy, Method};
use crate::graph::KnowledgeGraph;
use crate::llm::{ChatBackend, HttpBackend, Llm, MockBackend, Transcript};
use crate::pipeline::{Mode, Pipeline, PipelineConfig};
use crate::protocol::PromptSet;
use crate::retrieval::{LocalCorpus, ProviderSet, SourceKind, WebSearch, Wikipedia};

#[derive(Debug, Parser)]
#[command(name = "kgforge", version, about = "Answer questions over a knowledge graph built at inference time")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer one question with the graph pipeline.
    Ask {
        question: String,
        #[command(flatten)]
        flags: Flags,
    },
    /// Answer one question with the text-retrieval baseline.
    Baseline {
        question: String,
        #[command(flatten)]
        flags: Flags,
    },
    /// Run a JSON-lines dataset and write records and reports.
    Eval {
        dataset: PathBuf,
        /// Directory for records.jsonl, report.csv and hops.csv.
        #[arg(long, default_value = "kgforge-eval")]
        out: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Re-emit a saved graph file as canonical JSON and/or DOT.
    /// With neither flag the DOT text goes to stdout.
    Export {
        graph: PathBuf,
        #[arg(long)]
        emit_graph: Option<PathBuf>,
        #[arg(long)]
        emit_dot: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Expansion depth.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Retrieval steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Paragraphs kept per retrieval.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Scripted model replies; replaces the HTTP backend.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Directory of .txt documents used as a local retrieval source.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Write the final graph as JSON.
    #[arg(long)]
    pub emit_graph: Option<PathBuf>,
    /// Write the final graph as Graphviz DOT.
    #[arg(long)]
    pub emit_dot: Option<PathBuf>,
    #[arg(long)]
    pub group_by: Option<GroupBy>,
    #[arg(long)]
    pub method: Option<Method>,
}

/// Everything a command needs, after merging file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub depth_d: usize,
    pub retrieval_steps_s: usize,
    pub top_k: usize,
    pub mode: Mode,
    pub expansion_cap_per_entity: usize,
    pub max_parse_retries: u32,
    pub providers: Vec<SourceKind>,
    pub workers: usize,
    pub runs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_by: Option<GroupBy>,
    pub method: Method,
}

impl Default for Settings {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Settings {
            depth_d: p.depth_d,
            retrieval_steps_s: p.retrieval_steps_s,
            top_k: p.top_k,
            mode: p.mode,
            expansion_cap_per_entity: p.expansion_cap_per_entity,
            max_parse_retries: p.max_parse_retries,
            providers: Vec::new(),
            workers: 1,
            runs: 1,
            corpus: None,
            transcript: None,
            prompts: None,
            group_by: None,
            method: Method::Kg,
        }
    }
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(config_err)
    }

    /// File values (if any) overlaid with flag values.
    pub fn resolve(flags: &Flags) -> Result<Self, CliError> {
        let mut s = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                Settings::from_toml(&text)?
            }
            None => Settings::default(),
        };
        macro_rules! overlay {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = &flags.$flag { s.$field = v.clone().into(); })*
            };
        }
        overlay!(
            mode => mode,
            depth => depth_d,
            steps => retrieval_steps_s,
            topk => top_k,
            runs => runs,
            workers => workers,
            method => method,
        );
        if flags.corpus.is_some() {
            s.corpus = flags.corpus.clone();
        }
        if flags.transcript.is_some() {
            s.transcript = flags.transcript.clone();
        }
        if flags.prompts.is_some() {
            s.prompts = flags.prompts.clone();
        }
        if flags.group_by.is_some() {
            s.group_by = flags.group_by;
        }
        if s.corpus.is_some() && !s.providers.contains(&SourceKind::LocalCorpus) {
            s.providers.push(SourceKind::LocalCorpus);
        }
        s.pipeline().validate().map_err(config_err)?;
        if s.runs < 1 || s.workers < 1 {
            return Err(CliError::Config("runs and workers must be at least 1".into()));
        }
        Ok(s)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            depth_d: self.depth_d,
            retrieval_steps_s: self.retrieval_steps_s,
            top_k: self.top_k,
            mode: self.mode,
            max_parse_retries: self.max_parse_retries,
            expansion_cap_per_entity: self.expansion_cap_per_entity,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }

    pub fn prompt_set(&self) -> Result<PromptSet, CliError> {
        match &self.prompts {
            Some(dir) => PromptSet::load_dir(dir).map_err(config_err),
            None => Ok(PromptSet::default()),
        }
    }

    /// The retrieval sources. Empty in internal-only graph runs, which must
    /// not reach any provider; otherwise at least one is required.
    pub fn provider_set(&self, needs_retrieval: bool) -> Result<ProviderSet, CliError> {
        let mut set = ProviderSet::new();
        if !needs_retrieval {
            return Ok(set);
        }
        for kind in &self.providers {
            match kind {
                SourceKind::LocalCorpus => {
                    let dir = self.corpus.as_deref().ok_or_else(|| {
                        CliError::Config("provider local_corpus needs --corpus DIR".into())
                    })?;
                    set.push(Box::new(LocalCorpus::from_dir(dir).map_err(config_err)?));
                }
                SourceKind::Wikipedia => set.push(Box::new(Wikipedia::from_env().map_err(config_err)?)),
                SourceKind::WebSearch => set.push(Box::new(WebSearch::from_env().map_err(config_err)?)),
            }
        }
        if set.is_empty() {
            return Err(CliError::Config(
                "retrieval needs a provider: pass --corpus DIR or list providers in the config".into(),
            ));
        }
        Ok(set)
    }

    /// Builds a fresh backend per call: a transcript replay when
    /// `transcript` is set, otherwise the HTTP backend from the environment.
    pub fn backend_factory(&self) -> Result<Box<dyn Fn() -> Box<dyn ChatBackend> + Sync>, CliError> {
        match &self.transcript {
            Some(path) => {
                let t = Arc::new(Transcript::load(path).map_err(config_err)?);
                Ok(Box::new(move || Box::new(MockBackend::new(t.clone())) as Box<dyn ChatBackend>))
            }
            None => {
                let http = HttpBackend::from_env().map_err(config_err)?;
                Ok(Box::new(move || Box::new(http.clone()) as Box<dyn ChatBackend>))
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn echo(settings: &Settings) {
    eprintln!("# effective settings");
    eprint!("{}", settings.to_toml());
}

fn emit_graph(graph: &KnowledgeGraph, flags: &Flags) -> Result<(), CliError> {
    if let Some(p) = &flags.emit_graph {
        write_file(p, &graph.to_json())?;
    }
    if let Some(p) = &flags.emit_dot {
        write_file(p, &graph.to_dot())?;
    }
    Ok(())
}

fn run_ask(question: &str, flags: &Flags, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let settings = Settings::resolve(flags)?;
    echo(&settings);
    let config = settings.pipeline();
    let prompts = settings.prompt_set()?;
    let providers = settings.provider_set(config.mode == Mode::External)?;
    let llm = Llm::boxed(settings.backend_factory()?());
    let pipeline = Pipeline {
        config: &config,
        prompts: &prompts,
        llm: &llm,
        providers: &providers,
    };
    match pipeline.run_question(question) {
        Ok(record) => {
            emit_graph(&record.gstar, flags)?;
            writeln!(out, "{}", record.final_answer).map_err(runtime_err)
        }
        Err(failure) => {
            emit_graph(&failure.partial.gstar, flags)?;
            Err(runtime_err(failure))
        }
    }
}

fn run_baseline(question: &str, flags: &Flags, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let settings = Settings::resolve(flags)?;
    echo(&settings);
    let config = settings.pipeline();
    let prompts = settings.prompt_set()?;
    let providers = settings.provider_set(true)?;
    let llm = Llm::boxed(settings.backend_factory()?());
    let pipeline = Pipeline {
        config: &config,
        prompts: &prompts,
        llm: &llm,
        providers: &providers,
    };
    let record = pipeline.answer_text_rag(question).map_err(runtime_err)?;
    writeln!(out, "{}", record.final_answer).map_err(runtime_err)
}

fn run_eval(dataset: &Path, out_dir: &Path, flags: &Flags, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let settings = Settings::resolve(flags)?;
    echo(&settings);
    let items = eval::load_dataset(dataset).map_err(config_err)?;
    let config = settings.pipeline();
    let prompts = settings.prompt_set()?;
    let needs_retrieval = settings.method == Method::Textrag || config.mode == Mode::External;
    let providers = settings.provider_set(needs_retrieval)?;
    let factory = settings.backend_factory()?;
    let run = EvalSettings {
        method: settings.method,
        runs: settings.runs,
        workers: settings.workers,
    };
    let records = eval::evaluate(&items, &config, &prompts, &providers, &*factory, &run);
    let report = eval::aggregate(&records, settings.group_by).map_err(runtime_err)?;
    eval::write_outputs(out_dir, &records, &report).map_err(runtime_err)?;
    write!(out, "{}", report.to_table()).map_err(runtime_err)
}

fn run_export(graph: &Path, emit_json: Option<&Path>, emit_dot: Option<&Path>, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let text = std::fs::read_to_string(graph).map_err(|e| CliError::Config(format!("{}: {e}", graph.display())))?;
    let g = KnowledgeGraph::from_json(&text).map_err(config_err)?;
    if let Some(p) = emit_json {
        write_file(p, &g.to_json())?;
    }
    if let Some(p) = emit_dot {
        write_file(p, &g.to_dot())?;
    }
    if emit_json.is_none() && emit_dot.is_none() {
        write!(out, "{}", g.to_dot()).map_err(runtime_err)?;
    }
    Ok(())
}

/// Runs a parsed command, writing results to `out`.
pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Ask { question, flags } => run_ask(question, flags, out),
        Command::Baseline { question, flags } => run_baseline(question, flags, out),
        Command::Eval { dataset, out: dir, flags } => run_eval(dataset, dir, flags, out),
        Command::Export {
            graph,
            emit_graph,
            emit_dot,
        } => run_export(graph, emit_graph.as_deref(), emit_dot.as_deref(), out),
    }
}

/// Entry point used by the binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
