//! The four-stage question-answering pipeline.
//!
//! 1. **Initialize**: entities and relations read from the question form G0.
//! 2. **Expand**: breadth-first over entities the model flags as unclear,
//!    one depth per round, up to `depth_d` rounds. Result: G1.
//! 3. **Refine**: up to `retrieval_steps_s` rounds of select-a-triplet,
//!    retrieve, then correct or expand it. Result: G*.
//! 4. **Answer** from the rendered G*.
//!
//! Every model call goes through one [`Llm`], whose run log is the audit
//! trail for call budgets. A parse failure re-issues the same prompt up to
//! `max_parse_retries` more times; the retry is logged with its attempt
//! number.

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::normalize_answer;
use crate::graph::{fold_name, Frontier, GraphError, KnowledgeGraph, Provenance, Stage, Triplet};
use crate::llm::{Llm, LlmError, RunLog};
use crate::protocol::{
    parse_action_selection, parse_entity_list, parse_final_answer, parse_triplet_lines, Action,
    ParseError, PromptSet, RawTriplet, TemplateError, TemplateId,
};
use crate::retrieval::{bm25_rank, build_query, split_paragraphs, Paragraph, ProviderSet, RetrievalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    InternalOnly,
    External,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "internal_only" => Ok(Mode::InternalOnly),
            "external" => Ok(Mode::External),
            other => Err(format!("unknown mode {other:?} (expected internal_only or external)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Breadth-first expansion rounds.
    pub depth_d: usize,
    /// External retrieval rounds.
    pub retrieval_steps_s: usize,
    /// Paragraphs kept per retrieval.
    pub top_k: usize,
    pub mode: Mode,
    pub max_parse_retries: u32,
    pub expansion_cap_per_entity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            depth_d: 3,
            retrieval_steps_s: 5,
            top_k: 3,
            mode: Mode::External,
            max_parse_retries: 2,
            expansion_cap_per_entity: 5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.top_k < 1 {
            return Err(PipelineError::Config("top_k must be at least 1".into()));
        }
        if self.expansion_cap_per_entity < 1 {
            return Err(PipelineError::Config(
                "expansion_cap_per_entity must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Retrieval rounds actually run: zero in internal-only mode.
    pub fn effective_steps(&self) -> usize {
        match self.mode {
            Mode::InternalOnly => 0,
            Mode::External => self.retrieval_steps_s,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("no entities extracted from the question after {attempts} attempts")]
    NoEntities { attempts: u32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// A stage-level abort together with whatever the run produced so far.
#[derive(Debug, Error)]
#[error("pipeline aborted: {error}")]
pub struct PipelineFailure {
    pub error: PipelineError,
    pub partial: Box<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenParagraph {
    pub locator: String,
    pub title: String,
    pub index: usize,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionOutcome {
    /// The target was replaced by this triplet.
    Corrected { triplet: Triplet },
    /// The model kept the target as-is (or its correction was unusable).
    Kept,
    /// These triplets were added next to the target.
    Expanded { added: Vec<Triplet> },
    /// Nothing was retrieved, so no refinement call was made.
    NoContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAction {
    pub step: usize,
    pub action: Action,
    pub target: Triplet,
    pub query: String,
    pub paragraphs: Vec<ChosenParagraph>,
    pub outcome: ActionOutcome,
    /// The triplet whose searched flag this action set, if any.
    pub marked: Option<Triplet>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub initialize: Duration,
    pub expand: Duration,
    pub refine: Duration,
    pub answer: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCount {
    /// Distinct prompts sent (first attempts).
    pub invocations: usize,
    /// All calls, parse retries included.
    pub calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub question: String,
    pub final_answer: String,
    /// Whether the answer names an entity of G*.
    pub on_graph: bool,
    pub seed_entities: Vec<String>,
    pub g0: KnowledgeGraph,
    pub g1: KnowledgeGraph,
    pub gstar: KnowledgeGraph,
    pub retrieval_actions: Vec<RetrievalAction>,
    /// Retrieval rounds whose selection could not be parsed.
    pub skipped_steps: usize,
    /// Number of `fetch` calls made to providers.
    pub provider_fetches: usize,
    pub llm_calls: BTreeMap<String, CallCount>,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl RunRecord {
    fn empty(question: &str) -> Self {
        let g = KnowledgeGraph::new(question);
        RunRecord {
            question: question.to_string(),
            final_answer: String::new(),
            on_graph: false,
            seed_entities: Vec::new(),
            g0: g.clone(),
            g1: g.clone(),
            gstar: g,
            retrieval_actions: Vec::new(),
            skipped_steps: 0,
            provider_fetches: 0,
            llm_calls: BTreeMap::new(),
            timings: StageTimings::default(),
        }
    }

    pub fn calls(&self, tag: TemplateId) -> CallCount {
        self.llm_calls.get(tag.as_str()).copied().unwrap_or_default()
    }
}

/// Output of the text-retrieval baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRagRecord {
    pub question: String,
    pub final_answer: String,
    pub context: String,
    pub paragraphs: Vec<ChosenParagraph>,
    pub provider_fetches: usize,
}

/// Per-template call counts from a run log.
pub fn tally_calls(log: &RunLog) -> BTreeMap<String, CallCount> {
    let mut out: BTreeMap<String, CallCount> = BTreeMap::new();
    for c in log.records() {
        let e = out.entry(c.tag.as_str().to_string()).or_default();
        e.calls += 1;
        if c.attempt == 0 {
            e.invocations += 1;
        }
    }
    out
}

pub struct Pipeline<'a> {
    pub config: &'a PipelineConfig,
    pub prompts: &'a PromptSet,
    pub llm: &'a Llm,
    pub providers: &'a ProviderSet,
}

/// `["a", "b"]`, the list style the filter prompt's examples use.
fn entity_list(entities: &[String]) -> String {
    let quoted: Vec<String> = entities
        .iter()
        .map(|e| serde_json::to_string(e).expect("string serializes"))
        .collect();
    format!("[{}]", quoted.join(", "))
}

/// A filter reply that deliberately lists nothing: blank, "none", or an
/// `[Entity]` header with no items under it.
fn is_explicit_empty(text: &str) -> bool {
    let t = text.trim();
    if t.is_empty() {
        return true;
    }
    t.lines().map(str::trim).any(|l| {
        let l = l.to_ascii_lowercase();
        let rest = l
            .strip_prefix("[entity]")
            .or_else(|| l.strip_prefix("entity:"))
            .or_else(|| l.strip_prefix("[entities]"))
            .or_else(|| l.strip_prefix("entities:"));
        match rest {
            Some(rest) => {
                let rest = rest.trim_start_matches(':').trim();
                rest.is_empty() || rest == "none" || rest == "[]"
            }
            None => l == "none",
        }
    })
}

fn parse_filter(text: &str) -> Result<Vec<String>, ParseError> {
    match parse_entity_list(text) {
        Ok(list) => Ok(list),
        Err(_) if is_explicit_empty(text) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

fn push_unique(list: &mut Vec<String>, seen: &mut HashSet<String>, name: &str) {
    if seen.insert(fold_name(name)) {
        list.push(name.to_string());
    }
}

fn chosen(ranked: &[crate::retrieval::Ranked]) -> Vec<ChosenParagraph> {
    ranked
        .iter()
        .map(|r| ChosenParagraph {
            locator: r.paragraph.locator.clone(),
            title: r.paragraph.title.clone(),
            index: r.paragraph.index,
            score: r.score,
            text: r.paragraph.text.clone(),
        })
        .collect()
}

impl Pipeline<'_> {
    /// Sends `prompt` and parses the reply, re-sending on parse failure.
    /// The outer error is a backend failure; the inner one is the last parse
    /// error once retries run out.
    fn ask<T, E>(
        &self,
        tag: TemplateId,
        prompt: &str,
        parse: impl Fn(&str) -> Result<T, E>,
    ) -> Result<Result<T, E>, PipelineError> {
        let mut attempt = 0;
        loop {
            let reply = self.llm.complete(tag, prompt, attempt)?;
            match parse(&reply) {
                Ok(v) => return Ok(Ok(v)),
                Err(e) if attempt >= self.config.max_parse_retries => return Ok(Err(e)),
                Err(_) => attempt += 1,
            }
        }
    }

    /// G0 plus the seed entities: every entity named in the reply, including
    /// ones that take part in no relation.
    pub fn initialize_graph(&self, question: &str) -> Result<(KnowledgeGraph, Vec<String>), PipelineError> {
        if question.trim().is_empty() {
            return Err(PipelineError::EmptyQuestion);
        }
        let prompt = self
            .prompts
            .render(TemplateId::ExtractEntities, &[("question", question)])?;
        let parsed = self.ask(TemplateId::ExtractEntities, &prompt, |text| {
            parse_entity_list(text).map(|entities| (entities, parse_triplet_lines(text)))
        })?;
        let (entities, relations) = parsed.map_err(|_| PipelineError::NoEntities {
            attempts: self.config.max_parse_retries + 1,
        })?;

        let mut graph = KnowledgeGraph::new(question);
        graph.merge_triplets(relations.into_iter().map(|r| r.into_triplet(Provenance::Question)))?;
        graph.set_stage(Stage::G0);

        let mut seeds = Vec::new();
        let mut seen = HashSet::new();
        for e in entities.iter().map(String::as_str).chain(graph.entities()) {
            push_unique(&mut seeds, &mut seen, e);
        }
        Ok((graph, seeds))
    }

    /// Asks which of `candidates` need expanding. The answer is restricted to
    /// `candidates`; an unparseable reply falls back to all of them.
    pub fn filter_frontier(&self, question: &str, candidates: &[String]) -> Result<Vec<String>, PipelineError> {
        let list = entity_list(candidates);
        let prompt = self.prompts.render(
            TemplateId::FilterEntities,
            &[("question", question), ("entities", &list)],
        )?;
        let picked = match self.ask(TemplateId::FilterEntities, &prompt, parse_filter)? {
            Ok(picked) => picked,
            Err(e) => {
                log::warn!("entity filter unparseable ({e}); expanding every candidate");
                candidates.to_vec()
            }
        };
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for name in picked {
            let key = fold_name(&name);
            if let Some(c) = candidates.iter().find(|c| fold_name(c) == key) {
                push_unique(&mut out, &mut seen, c);
            }
        }
        Ok(out)
    }

    fn expand_entity(&self, question: &str, entity: &str) -> Result<Vec<Triplet>, PipelineError> {
        let prompt = self.prompts.render(
            TemplateId::ExpandEntity,
            &[("source entity", entity), ("question", question), ("sentence text", "")],
        )?;
        let parsed = self.ask(TemplateId::ExpandEntity, &prompt, |text| {
            let lines = parse_triplet_lines(text);
            if lines.is_empty() {
                Err(())
            } else {
                Ok(lines)
            }
        })?;
        let Ok(lines) = parsed else {
            log::warn!("no triplets parsed while expanding {entity:?}; skipping it");
            return Ok(Vec::new());
        };
        let source = fold_name(entity);
        Ok(lines
            .into_iter()
            .filter(|t| fold_name(&t.subject) == source)
            .take(self.config.expansion_cap_per_entity)
            .map(|t| t.into_triplet(Provenance::Internal))
            .collect())
    }

    /// Breadth-first expansion of G0 into G1.
    pub fn expand_graph(
        &self,
        question: &str,
        g0: &KnowledgeGraph,
        seeds: &[String],
    ) -> Result<KnowledgeGraph, PipelineError> {
        let mut graph = g0.clone();
        let mut frontier = Frontier::new();
        for depth in 1..=self.config.depth_d {
            let mut candidates = Vec::new();
            let mut seen = HashSet::new();
            for e in seeds.iter().map(String::as_str).chain(graph.entities()) {
                if !frontier.is_visited(e) {
                    push_unique(&mut candidates, &mut seen, e);
                }
            }
            if candidates.is_empty() {
                break;
            }
            let selected = self.filter_frontier(question, &candidates)?;
            for e in &selected {
                frontier.push(e, depth);
            }
            if frontier.is_empty() {
                break;
            }
            while let Some((entity, _)) = frontier.pop() {
                let found = self.expand_entity(question, &entity)?;
                graph.merge_triplets(found)?;
            }
        }
        graph.set_stage(Stage::G1);
        Ok(graph)
    }

    fn retrieve(&self, query: &str) -> Result<(Vec<ChosenParagraph>, usize), PipelineError> {
        let docs = self.providers.fetch_all(query);
        let fetches = self.providers.kinds().len();
        let paragraphs: Vec<Paragraph> = docs.iter().flat_map(split_paragraphs).collect();
        if paragraphs.is_empty() {
            return Ok((Vec::new(), fetches));
        }
        let ranked = bm25_rank(query, &paragraphs, self.config.top_k)?;
        Ok((chosen(&ranked), fetches))
    }

    /// Up to `retrieval_steps_s` rounds of external correction / expansion.
    /// Returns G*, the actions taken, the number of rounds skipped on an
    /// unparseable selection, and the number of provider fetches.
    pub fn refine_with_retrieval(
        &self,
        question: &str,
        g1: &KnowledgeGraph,
    ) -> Result<(KnowledgeGraph, Vec<RetrievalAction>, usize, usize), PipelineError> {
        let mut graph = g1.clone();
        let mut actions = Vec::new();
        let mut skipped = 0;
        let mut fetches = 0;

        for step in 0..self.config.effective_steps() {
            if graph.is_empty() || graph.all_searched() {
                break;
            }
            let rendered = graph.render_for_prompt()?;
            let prompt = self
                .prompts
                .render(TemplateId::SelectAction, &[("question", question), ("Graph", &rendered)])?;
            let selection = match self.ask(TemplateId::SelectAction, &prompt, |t| {
                parse_action_selection(t, &graph)
            })? {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("retrieval step {step}: selection unusable ({e}); skipping");
                    skipped += 1;
                    continue;
                }
            };
            let target = graph.triplets()[selection.index].clone();
            let query = build_query(&target);
            let (paragraphs, n) = self.retrieve(&query)?;
            fetches += n;

            let mut record = RetrievalAction {
                step,
                action: selection.action,
                target: target.clone(),
                query,
                paragraphs,
                outcome: ActionOutcome::NoContext,
                marked: None,
            };
            if record.paragraphs.is_empty() {
                actions.push(record);
                continue;
            }
            let context: Vec<&str> = record.paragraphs.iter().map(|p| p.text.as_str()).collect();
            let context = context.join("\n\n");
            // the templates write `[head] --[relation]--> [tail]`; the
            // placeholder swallows the brackets of the edge, so put them back
            let relation = format!("[{}]", target.relation);
            let fields = [
                ("head", target.subject.as_str()),
                ("relation", relation.as_str()),
                ("tail", target.object.as_str()),
                ("question", question),
                ("retrieved context", context.as_str()),
            ];

            match selection.action {
                Action::Correct => {
                    let prompt = self.prompts.render(TemplateId::CorrectTriplet, &fields)?;
                    let parsed = self.ask(TemplateId::CorrectTriplet, &prompt, |text| {
                        parse_triplet_lines(text).into_iter().next().ok_or(())
                    })?;
                    let replaced = parsed.ok().map(|raw: RawTriplet| {
                        graph.replace_triplet(&target, raw.into_triplet(Provenance::ExternalCorrected))
                    });
                    match replaced {
                        Some(Ok(idx)) => {
                            let now = graph.triplets()[idx].clone();
                            record.outcome = if now.same_fact(&target) {
                                ActionOutcome::Kept
                            } else {
                                ActionOutcome::Corrected {
                                    triplet: now.clone(),
                                }
                            };
                            record.marked = Some(now);
                        }
                        Some(Err(e)) => {
                            log::warn!("correction rejected: {e}");
                            let idx = graph.mark_searched(&target)?;
                            record.outcome = ActionOutcome::Kept;
                            record.marked = Some(graph.triplets()[idx].clone());
                        }
                        None => {
                            let idx = graph.mark_searched(&target)?;
                            record.outcome = ActionOutcome::Kept;
                            record.marked = Some(graph.triplets()[idx].clone());
                        }
                    }
                }
                Action::Expand => {
                    let prompt = self.prompts.render(TemplateId::ExpandTriplet, &fields)?;
                    let reply = self.llm.complete(TemplateId::ExpandTriplet, &prompt, 0)?;
                    let new: Vec<Triplet> = parse_triplet_lines(&reply)
                        .into_iter()
                        .map(|r| r.into_triplet(Provenance::ExternalExpanded))
                        .filter(|t| !graph.contains(t))
                        .take(3)
                        .collect();
                    graph.merge_triplets(new.clone())?;
                    let idx = graph.mark_searched(&target)?;
                    record.marked = Some(graph.triplets()[idx].clone());
                    record.outcome = ActionOutcome::Expanded { added: new };
                }
            }
            actions.push(record);
        }
        graph.set_stage(Stage::Gstar);
        Ok((graph, actions, skipped, fetches))
    }

    /// The model's answer over G*, and whether it names an entity of G*.
    pub fn answer_on_graph(&self, question: &str, gstar: &KnowledgeGraph) -> Result<(String, bool), PipelineError> {
        let rendered = if gstar.is_empty() {
            String::new()
        } else {
            gstar.render_for_prompt()?
        };
        let prompt = self.prompts.render(
            TemplateId::AnswerOnGraph,
            &[("question", question), ("graph str", &rendered)],
        )?;
        let answer = self
            .ask(TemplateId::AnswerOnGraph, &prompt, parse_final_answer)?
            .unwrap_or_default();
        let norm = normalize_answer(&answer);
        let on_graph =
            !norm.is_empty() && gstar.entities().iter().any(|e| normalize_answer(e) == norm);
        Ok((answer, on_graph))
    }

    /// Runs all stages for one question.
    pub fn run_question(&self, question: &str) -> Result<RunRecord, Box<PipelineFailure>> {
        let mut record = RunRecord::empty(question);
        let result = self.run_into(question, &mut record);
        record.llm_calls = tally_calls(self.llm.log());
        match result {
            Ok(()) => Ok(record),
            Err(error) => Err(Box::new(PipelineFailure {
                error,
                partial: Box::new(record),
            })),
        }
    }

    fn run_into(&self, question: &str, record: &mut RunRecord) -> Result<(), PipelineError> {
        self.config.validate()?;

        let t = Instant::now();
        let (g0, seeds) = self.initialize_graph(question)?;
        record.timings.initialize = t.elapsed();
        record.seed_entities = seeds;
        record.g0 = g0.clone();
        record.g1 = g0.clone();
        record.gstar = g0.clone();

        let t = Instant::now();
        let g1 = self.expand_graph(question, &g0, &record.seed_entities)?;
        record.timings.expand = t.elapsed();
        record.g1 = g1.clone();
        let mut gstar = g1;
        gstar.set_stage(Stage::Gstar);
        record.gstar = gstar.clone();

        if self.config.mode == Mode::External {
            let t = Instant::now();
            let (refined, actions, skipped, fetches) = self.refine_with_retrieval(question, &record.g1)?;
            record.timings.refine = t.elapsed();
            record.gstar = refined;
            record.retrieval_actions = actions;
            record.skipped_steps = skipped;
            record.provider_fetches = fetches;
        }

        let t = Instant::now();
        let (answer, on_graph) = self.answer_on_graph(question, &record.gstar)?;
        record.timings.answer = t.elapsed();
        record.final_answer = answer;
        record.on_graph = on_graph;
        Ok(())
    }

    /// The text-retrieval baseline: rank paragraphs for the raw question and
    /// answer from them in a single prompt.
    pub fn answer_text_rag(&self, question: &str) -> Result<TextRagRecord, PipelineError> {
        self.config.validate()?;
        if question.trim().is_empty() {
            return Err(PipelineError::EmptyQuestion);
        }
        let (paragraphs, fetches) = self.retrieve(question)?;
        let context: Vec<&str> = paragraphs.iter().map(|p| p.text.as_str()).collect();
        let context = context.join("\n\n");
        let prompt = self.prompts.render(
            TemplateId::TextRag,
            &[("question", question), ("retrieved docs", &context)],
        )?;
        let answer = self
            .ask(TemplateId::TextRag, &prompt, parse_final_answer)?
            .unwrap_or_default();
        Ok(TextRagRecord {
            question: question.to_string(),
            final_answer: answer,
            context,
            paragraphs,
            provider_fetches: fetches,
        })
    }
}
