//! Prompt templates and the parsers for the line grammars they ask for.
//!
//! Templates are plain text with `[name]` placeholders. Each template
//! declares its own placeholder set; any other bracketed text in a body
//! (`[Question]`, `[Trajectory]`, `[relation1]`, ...) is literal prompt text.
//! Substitution is a single left-to-right pass, so bound values are never
//! re-scanned for placeholders.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::graph::{fold_name, KnowledgeGraph, Provenance, Triplet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    ExtractEntities,
    FilterEntities,
    ExpandEntity,
    SelectAction,
    CorrectTriplet,
    ExpandTriplet,
    AnswerOnGraph,
    TextRag,
    Judge,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::ExtractEntities,
        TemplateId::FilterEntities,
        TemplateId::ExpandEntity,
        TemplateId::SelectAction,
        TemplateId::CorrectTriplet,
        TemplateId::ExpandTriplet,
        TemplateId::AnswerOnGraph,
        TemplateId::TextRag,
        TemplateId::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ExtractEntities => "extract_entities",
            TemplateId::FilterEntities => "filter_entities",
            TemplateId::ExpandEntity => "expand_entity",
            TemplateId::SelectAction => "select_action",
            TemplateId::CorrectTriplet => "correct_triplet",
            TemplateId::ExpandTriplet => "expand_triplet",
            TemplateId::AnswerOnGraph => "answer_on_graph",
            TemplateId::TextRag => "text_rag",
            TemplateId::Judge => "judge",
        }
    }

    /// Placeholder names this template substitutes, written in the body as
    /// `[name]`.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::ExtractEntities => &["question"],
            TemplateId::FilterEntities => &["question", "entities"],
            TemplateId::ExpandEntity => &["source entity", "question", "sentence text"],
            TemplateId::SelectAction => &["question", "Graph"],
            TemplateId::CorrectTriplet => &["head", "relation", "tail", "retrieved context"],
            TemplateId::ExpandTriplet => {
                &["head", "relation", "tail", "question", "retrieved context"]
            }
            TemplateId::AnswerOnGraph => &["question", "graph str"],
            TemplateId::TextRag => &["question", "retrieved docs"],
            TemplateId::Judge => &["question", "prediction", "ground_truth"],
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateId::ExtractEntities => include_str!("../prompts/extract_entities.txt"),
            TemplateId::FilterEntities => include_str!("../prompts/filter_entities.txt"),
            TemplateId::ExpandEntity => include_str!("../prompts/expand_entity.txt"),
            TemplateId::SelectAction => include_str!("../prompts/select_action.txt"),
            TemplateId::CorrectTriplet => include_str!("../prompts/correct_triplet.txt"),
            TemplateId::ExpandTriplet => include_str!("../prompts/expand_triplet.txt"),
            TemplateId::AnswerOnGraph => include_str!("../prompts/answer_on_graph.txt"),
            TemplateId::TextRag => include_str!("../prompts/text_rag.txt"),
            TemplateId::Judge => include_str!("../prompts/judge.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("template {template} is missing a binding for [{placeholder}]")]
    MissingBinding {
        template: TemplateId,
        placeholder: &'static str,
    },
    #[error("cannot read template {template}: {message}")]
    Io {
        template: TemplateId,
        message: String,
    },
}

/// The nine prompt bodies, one per [`TemplateId`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    bodies: Vec<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            bodies: TemplateId::ALL
                .iter()
                .map(|id| strip_final_newline(id.builtin()).to_string())
                .collect(),
        }
    }
}

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

impl PromptSet {
    /// Loads `<dir>/<template id>.txt` for every template. One trailing
    /// newline is dropped from each file.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let bodies = TemplateId::ALL
            .iter()
            .map(|&id| {
                let path = dir.join(format!("{}.txt", id.as_str()));
                std::fs::read_to_string(&path)
                    .map(|s| strip_final_newline(&s).to_string())
                    .map_err(|e| TemplateError::Io {
                        template: id,
                        message: format!("{}: {e}", path.display()),
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(PromptSet { bodies })
    }

    pub fn body(&self, id: TemplateId) -> &str {
        let idx = TemplateId::ALL.iter().position(|x| *x == id).unwrap();
        &self.bodies[idx]
    }

    /// Substitutes every placeholder of `id` from `bindings`. Bindings for
    /// names the template does not declare are ignored.
    pub fn render(&self, id: TemplateId, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
        let values: Vec<(String, &str)> = id
            .placeholders()
            .iter()
            .map(|&name| {
                bindings
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| (format!("[{name}]"), *v))
                    .ok_or(TemplateError::MissingBinding {
                        template: id,
                        placeholder: name,
                    })
            })
            .collect::<Result<_, _>>()?;

        let body = self.body(id);
        let mut out = String::with_capacity(body.len() + 256);
        let mut rest = body;
        while let Some(pos) = rest.find('[') {
            out.push_str(&rest[..pos]);
            rest = &rest[pos..];
            match values.iter().find(|(token, _)| rest.starts_with(token.as_str())) {
                Some((token, value)) => {
                    out.push_str(value);
                    rest = &rest[token.len()..];
                }
                None => {
                    out.push('[');
                    rest = &rest[1..];
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }

    /// Like [`PromptSet::render`] with the template named by string.
    pub fn render_named(&self, id: &str, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
        self.render(id.parse()?, bindings)
    }
}

/// A triplet as the model wrote it, before it is matched against a graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl RawTriplet {
    pub fn into_triplet(self, provenance: Provenance) -> Triplet {
        Triplet {
            subject: self.subject,
            relation: self.relation,
            object: self.object,
            provenance,
            searched: false,
        }
    }

    fn key(&self) -> (String, String, String) {
        (
            fold_name(&self.subject),
            fold_name(&self.relation),
            fold_name(&self.object),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Correct,
    Expand,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAction {
    pub action: Action,
    pub target: RawTriplet,
    /// Position of the resolved triplet in the graph.
    pub index: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no entities parsed")]
    NoEntities,
    #[error("no Action/Triplet lines in selection output")]
    MissingActionLines,
    #[error("unknown action token {0:?}")]
    UnknownAction(String),
    #[error("selected triplet is not in the graph: {0}")]
    NotInGraph(String),
    #[error("selected triplet was already searched: {0}")]
    AlreadySearched(String),
    #[error("unparseable verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error("empty answer")]
    EmptyAnswer,
}

/// Strips a leading `N.` or `N)` enumeration marker.
fn strip_enumeration(line: &str) -> Option<&str> {
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    Some(rest.trim_start())
}

fn strip_brackets(field: &str) -> &str {
    let f = field.trim();
    match f.strip_prefix('[').and_then(|x| x.strip_suffix(']')) {
        Some(inner) if !inner.contains(['[', ']']) => inner.trim(),
        _ => f,
    }
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let lower = line.to_ascii_lowercase();
    for prefix in [format!("[{label}]:"), format!("[{label}]"), format!("{label}:")] {
        if lower.starts_with(&prefix) {
            return Some(line[prefix.len()..].trim());
        }
    }
    None
}

fn is_triplet_line(line: &str) -> bool {
    line.contains("->") || line.contains("--[")
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.contains("--[")
        && !name.contains("]-->")
        && !name.contains(['\n', '\r'])
}

/// Splits `1. year 2. park` into its items.
fn split_inline_list(s: &str) -> Vec<&str> {
    let mut starts = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let at_boundary = i == 0 || bytes[i - 1].is_ascii_whitespace();
        if at_boundary && bytes[i].is_ascii_digit() {
            let j = i + bytes[i..].iter().take_while(|b| b.is_ascii_digit()).count();
            if j < bytes.len() && bytes[j] == b'.' && (j + 1 == bytes.len() || bytes[j + 1] == b' ') {
                starts.push((i, j + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    if starts.first().map(|(s, _)| *s) != Some(0) {
        return Vec::new();
    }
    starts
        .iter()
        .enumerate()
        .map(|(n, &(_, body))| {
            let end = starts.get(n + 1).map_or(s.len(), |&(next, _)| next);
            s[body..end].trim()
        })
        .collect()
}

/// Numbered entity list. When an `[Entity]` / `Entity:` header is present
/// only the lines after the last one are read, so numbered reasoning in a
/// trajectory is not mistaken for entities. Numbered lines in triplet form
/// are skipped.
pub fn parse_entity_list(text: &str) -> Result<Vec<String>, ParseError> {
    let lines: Vec<&str> = text.lines().map(str::trim).collect();
    let start = lines
        .iter()
        .rposition(|l| strip_label(l, "entity").is_some() || strip_label(l, "entities").is_some())
        .unwrap_or(0);

    let mut names: Vec<String> = Vec::new();
    let push = |name: &str, names: &mut Vec<String>| {
        let name = strip_brackets(name.trim().trim_matches('"'));
        if valid_name(name) && !names.iter().any(|n| fold_name(n) == fold_name(name)) {
            names.push(name.to_string());
        }
    };
    for line in &lines[start..] {
        let line = strip_label(line, "entity")
            .or_else(|| strip_label(line, "entities"))
            .unwrap_or(line);
        if line.is_empty() || is_triplet_line(line) {
            continue;
        }
        let items = split_inline_list(line);
        if items.len() > 1 {
            for item in items {
                push(item, &mut names);
            }
        } else if let Some(name) = strip_enumeration(line) {
            push(name, &mut names);
        }
    }
    if names.is_empty() {
        Err(ParseError::NoEntities)
    } else {
        Ok(names)
    }
}

fn parse_triplet_line(line: &str) -> Option<RawTriplet> {
    let line = line.trim();
    let line = strip_enumeration(line).unwrap_or(line);
    let (s, r, o) = if let Some(open) = line.find("--[") {
        let after = &line[open + 3..];
        let close = after.find("]-->")?;
        let object = after[close + 4..].trim();
        let object = strip_searched_marker(object);
        (line[..open].trim(), after[..close].trim(), object)
    } else {
        let parts: Vec<&str> = line.split("->").collect();
        if parts.len() != 3 {
            return None;
        }
        (
            strip_brackets(parts[0]),
            strip_brackets(parts[1]),
            strip_brackets(parts[2]),
        )
    };
    if [s, r, o].iter().all(|f| valid_name(f)) {
        Some(RawTriplet {
            subject: s.to_string(),
            relation: r.to_string(),
            object: o.to_string(),
        })
    } else {
        None
    }
}

fn strip_searched_marker(object: &str) -> &str {
    const MARK: &str = "[searched]";
    if object.len() > MARK.len() {
        let split = object.len() - MARK.len();
        if object.is_char_boundary(split) && object[split..].eq_ignore_ascii_case(MARK) {
            return object[..split].trim_end();
        }
    }
    object
}

/// Reads every line in either `A -> r -> B` or `A --[r]--> B` form.
/// Lines that do not parse, or parse to an empty field, are skipped.
pub fn parse_triplet_lines(text: &str) -> Vec<RawTriplet> {
    let mut out: Vec<RawTriplet> = Vec::new();
    for t in text.lines().filter_map(parse_triplet_line) {
        if !out.iter().any(|x| x.key() == t.key()) {
            out.push(t);
        }
    }
    out
}

fn labelled_value<'a>(lines: &[&'a str], label: &str) -> Option<&'a str> {
    let idx = lines.iter().position(|l| {
        let l = l.trim_start_matches(['*', '-', ' ']);
        l.is_char_boundary(label.len()) && l[..label.len()].eq_ignore_ascii_case(label)
    })?;
    let line = lines[idx].trim_start_matches(['*', '-', ' ']);
    let value = line[label.len()..].trim_start_matches('*').trim();
    if !value.is_empty() {
        return Some(value);
    }
    lines[idx + 1..].iter().map(|l| l.trim()).find(|l| !l.is_empty())
}

/// Reads the `Action:` / `Triplet:` pair and resolves the triplet against
/// `graph`. Only an existing, unsearched triplet is accepted.
pub fn parse_action_selection(text: &str, graph: &KnowledgeGraph) -> Result<ParsedAction, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let action_tok = labelled_value(&lines, "action:").ok_or(ParseError::MissingActionLines)?;
    let triplet_line = labelled_value(&lines, "triplet:").ok_or(ParseError::MissingActionLines)?;

    let token: String = action_tok
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    let action = match token.as_str() {
        "correct" | "enhance" | "correction" => Action::Correct,
        "expand" | "expansion" => Action::Expand,
        _ => return Err(ParseError::UnknownAction(action_tok.to_string())),
    };

    let target = parse_triplet_line(triplet_line)
        .ok_or_else(|| ParseError::NotInGraph(triplet_line.to_string()))?;
    let probe = target.clone().into_triplet(Provenance::Internal);
    let index = graph
        .position(&probe)
        .ok_or_else(|| ParseError::NotInGraph(probe.bracket_line()))?;
    if graph.triplets()[index].searched {
        return Err(ParseError::AlreadySearched(probe.bracket_line()));
    }
    Ok(ParsedAction {
        action,
        target,
        index,
    })
}

/// Yes/No on the last non-empty line.
pub fn parse_verdict(text: &str) -> Result<bool, ParseError> {
    let last = text
        .lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .unwrap_or("");
    let word = last
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace() || "“”‘’".contains(c))
        .to_lowercase();
    match word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(ParseError::UnparseableVerdict(last.to_string())),
    }
}

/// The text after the last `Final Answer:` label, or else the last
/// non-empty line.
pub fn parse_final_answer(text: &str) -> Result<String, ParseError> {
    let lines: Vec<&str> = text.lines().map(str::trim).collect();
    const LABEL: &str = "final answer:";
    let labelled = lines.iter().rposition(|l| {
        let l = l.trim_start_matches('*');
        l.is_char_boundary(LABEL.len()) && l[..LABEL.len()].eq_ignore_ascii_case(LABEL)
    });
    let answer = match labelled {
        Some(idx) => {
            let value = lines[idx].trim_start_matches('*')[LABEL.len()..]
                .trim_start_matches('*')
                .trim();
            if value.is_empty() {
                lines[idx + 1..].iter().find(|l| !l.is_empty()).copied().unwrap_or("")
            } else {
                value
            }
        }
        None => lines.iter().rfind(|l| !l.is_empty()).copied().unwrap_or(""),
    };
    if answer.is_empty() {
        Err(ParseError::EmptyAnswer)
    } else {
        Ok(answer.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG2_Q: &str = "Dag Achatz created his own piano transcription of Bernstein's \
                          Symphonic Dances; what play were these dances originally based on?";

    fn graph(edges: &[(&str, &str, &str, bool)]) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new("q");
        g.merge_triplets(edges.iter().map(|(s, r, o, searched)| {
            let mut t = Triplet::new(s, r, o, Provenance::Internal).unwrap();
            t.searched = *searched;
            t
        }))
        .unwrap();
        g
    }

    #[test]
    fn render_substitutes_question_verbatim() {
        let p = PromptSet::default();
        let out = p.render(TemplateId::ExtractEntities, &[("question", FIG2_Q)]).unwrap();
        assert!(out.contains(&format!("Question: {FIG2_Q}")));
        assert!(out.starts_with("Extract useful entities and relations"));
        // [entity] / [relation] are literal in this template
        assert!(out.contains("1. [entity] -> [relation] -> [entity]"));
    }

    #[test]
    fn judge_prompt_ends_with_verdict_instruction() {
        let p = PromptSet::default();
        let out = p
            .render(
                TemplateId::Judge,
                &[("question", "q"), ("prediction", "NYC"), ("ground_truth", "New York City")],
            )
            .unwrap();
        assert!(out.ends_with("with only \"Yes\" or \"No\" (without quotes)"));
        assert!(out.contains("Prediction:\n\nNYC\n"));
        assert!(out.contains("Ground Truth(s):\n\nNew York City\n"));
    }

    #[test]
    fn render_reports_missing_binding() {
        let p = PromptSet::default();
        let err = p
            .render(TemplateId::ExpandEntity, &[("question", "q"), ("sentence text", "")])
            .unwrap_err();
        assert_eq!(
            err,
            TemplateError::MissingBinding {
                template: TemplateId::ExpandEntity,
                placeholder: "source entity"
            }
        );
        assert_eq!(
            p.render_named("nope", &[]).unwrap_err(),
            TemplateError::UnknownTemplate("nope".into())
        );
    }

    #[test]
    fn render_is_single_pass() {
        let p = PromptSet::default();
        let out = p
            .render(TemplateId::AnswerOnGraph, &[("question", "[graph str]"), ("graph str", "G")])
            .unwrap();
        assert!(out.contains("[QUESTION] [graph str]\n[Knowledge Graph] G"));
    }

    #[test]
    fn expand_entity_fills_both_source_slots() {
        let p = PromptSet::default();
        let out = p
            .render(
                TemplateId::ExpandEntity,
                &[("source entity", "Symphonic Dances"), ("question", "Q?"), ("sentence text", "")],
            )
            .unwrap();
        assert!(out.starts_with("Given the source entity \"Symphonic Dances\""));
        assert!(out.contains("1. Symphonic Dances -> [relation1] -> [object1]"));
        assert!(out.contains("Question: Q?\n"));
    }

    #[test]
    fn every_template_renders_fully() {
        let p = PromptSet::default();
        for id in TemplateId::ALL {
            let bindings: Vec<(&str, &str)> =
                id.placeholders().iter().map(|n| (*n, "VALUE")).collect();
            let out = p.render(id, &bindings).unwrap();
            for name in id.placeholders() {
                assert!(!out.contains(&format!("[{name}]")), "{id} left [{name}]");
            }
            assert!(out.contains("VALUE"));
        }
    }

    #[test]
    fn builtin_bodies_keep_prompt_text() {
        let p = PromptSet::default();
        assert!(p.body(TemplateId::SelectAction).contains("Action: [Enhance or Expand]"));
        assert!(p.body(TemplateId::SelectAction).contains("**not marked [searched]**"));
        assert!(p.body(TemplateId::CorrectTriplet).contains("Only return ONE modified triplet"));
        assert!(p.body(TemplateId::ExpandTriplet).contains("extract UP TO 3 new factual triplets"));
        assert!(p.body(TemplateId::TextRag).contains("Final Answer: String."));
        assert!(p.body(TemplateId::AnswerOnGraph).contains("answer it by \"yes\" or \"no\""));
        assert!(p.body(TemplateId::FilterEntities).contains("Entity: 1. year 2. park"));
    }

    #[test]
    fn load_dir_matches_builtin() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("prompts");
        assert_eq!(PromptSet::load_dir(&dir).unwrap(), PromptSet::default());
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            PromptSet::load_dir(empty.path()),
            Err(TemplateError::Io { .. })
        ));
    }

    #[test]
    fn entity_list_basic() {
        assert_eq!(
            parse_entity_list("1. Dag Achatz\n2. Symphonic Dances\n3. Leonard Bernstein").unwrap(),
            ["Dag Achatz", "Symphonic Dances", "Leonard Bernstein"]
        );
    }

    #[test]
    fn entity_list_after_trajectory() {
        assert_eq!(
            parse_entity_list("[Trajectory]: thinking...\n1. year\n2. park").unwrap(),
            ["year", "park"]
        );
        let with_header = "[Trajectory]: 1. look at the park\n2. then the year\n[Entity]\n1. year\n2. park";
        assert_eq!(parse_entity_list(with_header).unwrap(), ["year", "park"]);
        assert_eq!(parse_entity_list("Entity: 1. year 2. park").unwrap(), ["year", "park"]);
    }

    #[test]
    fn entity_list_dedups_and_skips_relations() {
        let text = "1. Paris\n2. paris\n3. [France]\n\n1. Paris -> capital of -> France";
        assert_eq!(parse_entity_list(text).unwrap(), ["Paris", "France"]);
    }

    #[test]
    fn entity_list_empty_is_error() {
        assert_eq!(parse_entity_list("no list here"), Err(ParseError::NoEntities));
        assert_eq!(parse_entity_list(""), Err(ParseError::NoEntities));
        assert_eq!(parse_entity_list("1. \n2."), Err(ParseError::NoEntities));
    }

    fn raw(s: &str, r: &str, o: &str) -> RawTriplet {
        RawTriplet {
            subject: s.into(),
            relation: r.into(),
            object: o.into(),
        }
    }

    #[test]
    fn triplet_lines_both_grammars() {
        assert_eq!(
            parse_triplet_lines("1. Symphonic Dances -> is from -> West Side Story"),
            [raw("Symphonic Dances", "is from", "West Side Story")]
        );
        assert_eq!(
            parse_triplet_lines("West Side Story --[inspired by]--> Romeo and Juliet"),
            [raw("West Side Story", "inspired by", "Romeo and Juliet")]
        );
        assert_eq!(
            parse_triplet_lines("2. [Paris] -> [capital of] -> [France]"),
            [raw("Paris", "capital of", "France")]
        );
        assert_eq!(
            parse_triplet_lines("A --[r]--> B [searched]"),
            [raw("A", "r", "B")]
        );
    }

    #[test]
    fn triplet_lines_drop_garbage_and_duplicates() {
        assert!(parse_triplet_lines("garbage line\nA -> -> B").is_empty());
        assert!(parse_triplet_lines("A -> r -> B -> C\n --[r]--> B").is_empty());
        assert_eq!(
            parse_triplet_lines("[Tratectory]: x\nA -> r -> B\na --[R]--> b\nC -> s -> D"),
            [raw("A", "r", "B"), raw("C", "s", "D")]
        );
    }

    #[test]
    fn action_expand_resolves() {
        let g = graph(&[
            ("Symphonic Dances", "is from", "West Side Story", false),
            ("West Side Story", "based on", "unknown", false),
        ]);
        let p = parse_action_selection(
            "Action: Expand\nTriplet: West Side Story --[based on]--> unknown",
            &g,
        )
        .unwrap();
        assert_eq!(p.action, Action::Expand);
        assert_eq!(p.index, 1);
        assert_eq!(p.target, raw("West Side Story", "based on", "unknown"));
    }

    #[test]
    fn action_enhance_means_correct() {
        let g = graph(&[("X", "r", "Y", false)]);
        let p = parse_action_selection("Action: Enhance\nTriplet: X --[r]--> Y", &g).unwrap();
        assert_eq!(p.action, Action::Correct);
        let p = parse_action_selection("**Action:** [correct]\n**Triplet:** x --[R]--> y", &g).unwrap();
        assert_eq!(p.action, Action::Correct);
    }

    #[test]
    fn action_errors_are_distinct() {
        let g = graph(&[("X", "r", "Y", false), ("S", "t", "U", true)]);
        assert_eq!(
            parse_action_selection("I pick X", &g),
            Err(ParseError::MissingActionLines)
        );
        assert_eq!(
            parse_action_selection("Action: Delete\nTriplet: X --[r]--> Y", &g),
            Err(ParseError::UnknownAction("Delete".into()))
        );
        assert_eq!(
            parse_action_selection("Action: Correct\nTriplet: A --[r]--> B", &g),
            Err(ParseError::NotInGraph("A --[r]--> B".into()))
        );
        assert_eq!(
            parse_action_selection("Action: Expand\nTriplet: S --[t]--> U [searched]", &g),
            Err(ParseError::AlreadySearched("S --[t]--> U".into()))
        );
    }

    #[test]
    fn verdicts() {
        assert_eq!(parse_verdict("The prediction matches.\nYes"), Ok(true));
        assert_eq!(parse_verdict("...contradiction found.\n\nNo"), Ok(false));
        assert_eq!(parse_verdict("\"yes.\""), Ok(true));
        assert!(matches!(parse_verdict("Maybe"), Err(ParseError::UnparseableVerdict(_))));
        assert!(parse_verdict("").is_err());
    }

    #[test]
    fn final_answers() {
        assert_eq!(
            parse_final_answer("Thinking trajectory: ...\nFinal Answer: Romeo and Juliet").unwrap(),
            "Romeo and Juliet"
        );
        assert_eq!(parse_final_answer("Romeo and Juliet").unwrap(), "Romeo and Juliet");
        assert_eq!(parse_final_answer("reasoning\n\n yes \n").unwrap(), "yes");
        assert_eq!(parse_final_answer("final answer:\nParis").unwrap(), "Paris");
        assert_eq!(parse_final_answer(""), Err(ParseError::EmptyAnswer));
        assert_eq!(parse_final_answer("\n  \n"), Err(ParseError::EmptyAnswer));
    }
}
