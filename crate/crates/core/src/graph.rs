//! Knowledge-graph data model.
//!
//! A [`KnowledgeGraph`] is an insertion-ordered, de-duplicated list of
//! [`Triplet`]s together with the question that seeded it. Two triplets are
//! the same fact when their subject, relation and object agree after
//! lowercasing and whitespace collapse; provenance and the `searched` flag
//! do not take part in that comparison.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separator tokens of the bracket line grammar. Fields may not contain them.
const OPEN: &str = "--[";
const CLOSE: &str = "]-->";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("malformed triplet ({subject:?}, {relation:?}, {object:?}): {reason}")]
    Malformed {
        subject: String,
        relation: String,
        object: String,
        reason: &'static str,
    },
    #[error("triplet not in graph: {0}")]
    Missing(String),
    #[error("replacement {0} duplicates another triplet in the graph")]
    DuplicateReplacement(String),
    #[error("cannot render empty graph")]
    Empty,
    #[error("invalid graph file: {0}")]
    Format(String),
    #[error("duplicate triplet in graph file: {0}")]
    DuplicateInFile(String),
}

/// Where a triplet came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Question,
    Internal,
    ExternalCorrected,
    ExternalExpanded,
}

/// Lifecycle stage of a graph: seed, expanded, refined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    G0,
    G1,
    Gstar,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::G0 => "G0",
            Stage::G1 => "G1",
            Stage::Gstar => "Gstar",
        })
    }
}

/// One `(subject, relation, object)` edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub provenance: Provenance,
    pub searched: bool,
}

/// Lowercased, whitespace-collapsed form of a name. Used for every
/// case-insensitive comparison of entity names and triplet fields.
pub fn fold_name(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Identity of a triplet under fact equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FactKey(String, String, String);

impl Triplet {
    /// Builds a validated triplet with trimmed fields and `searched = false`.
    pub fn new(
        subject: impl AsRef<str>,
        relation: impl AsRef<str>,
        object: impl AsRef<str>,
        provenance: Provenance,
    ) -> Result<Self, GraphError> {
        let t = Triplet {
            subject: subject.as_ref().trim().to_string(),
            relation: relation.as_ref().trim().to_string(),
            object: object.as_ref().trim().to_string(),
            provenance,
            searched: false,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let reason = [&self.subject, &self.relation, &self.object]
            .into_iter()
            .find_map(|field| field_problem(field));
        match reason {
            None => Ok(()),
            Some(reason) => Err(GraphError::Malformed {
                subject: self.subject.clone(),
                relation: self.relation.clone(),
                object: self.object.clone(),
                reason,
            }),
        }
    }

    pub fn key(&self) -> FactKey {
        FactKey(
            fold_name(&self.subject),
            fold_name(&self.relation),
            fold_name(&self.object),
        )
    }

    /// Fact equality: case-insensitive, whitespace-collapsed, ignoring
    /// provenance and the searched flag.
    pub fn same_fact(&self, other: &Triplet) -> bool {
        self.key() == other.key()
    }

    /// `Subject --[Relation]--> Object`, without the searched marker.
    pub fn bracket_line(&self) -> String {
        format!("{} --[{}]--> {}", self.subject, self.relation, self.object)
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

fn field_problem(field: &str) -> Option<&'static str> {
    if field.trim().is_empty() {
        Some("empty field")
    } else if field.trim() != field {
        Some("untrimmed field")
    } else if field.contains(['\n', '\r']) {
        Some("field contains a newline")
    } else if field.contains(OPEN) || field.contains(CLOSE) {
        Some("field contains a reserved arrow token")
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphFile", into = "GraphFile")]
pub struct KnowledgeGraph {
    question: String,
    stage: Stage,
    triplets: Vec<Triplet>,
    superseded: Vec<Triplet>,
}

impl KnowledgeGraph {
    pub fn new(question: impl Into<String>) -> Self {
        KnowledgeGraph {
            question: question.into(),
            stage: Stage::G0,
            triplets: Vec::new(),
            superseded: Vec::new(),
        }
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn position(&self, t: &Triplet) -> Option<usize> {
        let key = t.key();
        self.triplets.iter().position(|x| x.key() == key)
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.position(t).is_some()
    }

    pub fn get(&self, index: usize) -> Option<&Triplet> {
        self.triplets.get(index)
    }

    /// Entity names (subjects and objects) in order of first appearance,
    /// de-duplicated case-insensitively.
    pub fn entities(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.triplets {
            for name in [t.subject.as_str(), t.object.as_str()] {
                if seen.insert(fold_name(name)) {
                    out.push(name);
                }
            }
        }
        out
    }

    /// Triplets displaced by corrections, oldest first. They are no longer
    /// part of the graph but did appear during reasoning.
    pub fn superseded(&self) -> &[Triplet] {
        &self.superseded
    }

    /// Like [`KnowledgeGraph::entities`], followed by any names found only in
    /// superseded triplets.
    pub fn reasoning_entities(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in self.triplets.iter().chain(&self.superseded) {
            for name in [t.subject.as_str(), t.object.as_str()] {
                if seen.insert(fold_name(name)) {
                    out.push(name);
                }
            }
        }
        out
    }

    pub fn all_searched(&self) -> bool {
        self.triplets.iter().all(|t| t.searched)
    }

    /// Adds every triplet not already present. Returns how many were added.
    ///
    /// The whole batch is validated before anything is inserted, so a
    /// malformed triplet leaves the graph untouched.
    pub fn merge_triplets<I>(&mut self, new: I) -> Result<usize, GraphError>
    where
        I: IntoIterator<Item = Triplet>,
    {
        let new: Vec<Triplet> = new.into_iter().collect();
        for t in &new {
            t.validate()?;
        }
        let mut keys: HashSet<FactKey> = self.triplets.iter().map(Triplet::key).collect();
        let before = self.triplets.len();
        for t in new {
            if keys.insert(t.key()) {
                self.triplets.push(t);
            }
        }
        Ok(self.triplets.len() - before)
    }

    /// Swaps `old` for `new` in place. The survivor is marked searched and,
    /// unless it is the same fact as `old`, tagged as an external correction.
    pub fn replace_triplet(&mut self, old: &Triplet, new: Triplet) -> Result<usize, GraphError> {
        new.validate()?;
        let idx = self
            .position(old)
            .ok_or_else(|| GraphError::Missing(old.bracket_line()))?;
        if new.same_fact(&self.triplets[idx]) {
            self.triplets[idx].searched = true;
            return Ok(idx);
        }
        if self.contains(&new) {
            return Err(GraphError::DuplicateReplacement(new.bracket_line()));
        }
        let displaced = std::mem::replace(
            &mut self.triplets[idx],
            Triplet {
                provenance: Provenance::ExternalCorrected,
                searched: true,
                ..new
            },
        );
        self.superseded.push(displaced);
        Ok(idx)
    }

    pub fn mark_searched(&mut self, t: &Triplet) -> Result<usize, GraphError> {
        let idx = self
            .position(t)
            .ok_or_else(|| GraphError::Missing(t.bracket_line()))?;
        self.triplets[idx].searched = true;
        Ok(idx)
    }

    /// One `Subject --[Relation]--> Object` line per triplet, with
    /// ` [searched]` appended to searched edges.
    pub fn render_for_prompt(&self) -> Result<String, GraphError> {
        if self.triplets.is_empty() {
            return Err(GraphError::Empty);
        }
        let lines: Vec<String> = self
            .triplets
            .iter()
            .map(|t| {
                let mut line = t.bracket_line();
                if t.searched {
                    line.push_str(" [searched]");
                }
                line
            })
            .collect();
        Ok(lines.join("\n"))
    }

    /// Canonical graph file: pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let file: GraphFile =
            serde_json::from_str(text).map_err(|e| GraphError::Format(e.to_string()))?;
        file.try_into()
    }

    /// Graphviz rendering: one edge per triplet labelled with its relation.
    /// Searched edges are drawn bold.
    pub fn to_dot(&self) -> String {
        let mut keys: Vec<String> = Vec::new();
        let mut labels: Vec<&str> = Vec::new();
        let mut node = |name: &'_ str| -> usize {
            let key = fold_name(name);
            keys.iter().position(|k| *k == key).unwrap_or_else(|| {
                keys.push(key);
                keys.len() - 1
            })
        };
        let mut edges = String::new();
        for t in &self.triplets {
            let (s, o) = (node(&t.subject), node(&t.object));
            for (id, name) in [(s, &t.subject), (o, &t.object)] {
                if id == labels.len() {
                    labels.push(name);
                }
            }
            let style = if t.searched { ", style=bold" } else { "" };
            let _ = writeln!(
                edges,
                "  n{s} -> n{o} [label={}{style}];",
                dot_quote(&t.relation)
            );
        }
        let mut out = String::from("digraph kg {\n");
        for (i, label) in labels.iter().enumerate() {
            let _ = writeln!(out, "  n{i} [label={}];", dot_quote(label));
        }
        out.push_str(&edges);
        out.push_str("}\n");
        out
    }
}

fn dot_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// On-disk shape of a graph.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    question: String,
    stage: Stage,
    triplets: Vec<Triplet>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    superseded: Vec<Triplet>,
}

impl TryFrom<GraphFile> for KnowledgeGraph {
    type Error = GraphError;

    fn try_from(file: GraphFile) -> Result<Self, GraphError> {
        let mut keys = HashSet::new();
        for t in &file.triplets {
            t.validate()?;
            if !keys.insert(t.key()) {
                return Err(GraphError::DuplicateInFile(t.bracket_line()));
            }
        }
        for t in &file.superseded {
            t.validate()?;
        }
        Ok(KnowledgeGraph {
            question: file.question,
            stage: file.stage,
            triplets: file.triplets,
            superseded: file.superseded,
        })
    }
}

impl From<KnowledgeGraph> for GraphFile {
    fn from(g: KnowledgeGraph) -> Self {
        GraphFile {
            question: g.question,
            stage: g.stage,
            triplets: g.triplets,
            superseded: g.superseded,
        }
    }
}

/// Breadth-first queue of entities awaiting expansion.
#[derive(Debug, Clone, Default)]
pub struct Frontier {
    entries: std::collections::VecDeque<(String, usize)>,
    queued: HashSet<String>,
    visited: HashSet<String>,
}

impl Frontier {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enqueues `entity` at `depth`. Returns false when the entity is already
    /// queued or visited, or when `depth` would break breadth-first order.
    pub fn push(&mut self, entity: &str, depth: usize) -> bool {
        let key = fold_name(entity);
        if key.is_empty() || self.visited.contains(&key) || self.queued.contains(&key) {
            return false;
        }
        if self.entries.back().is_some_and(|(_, d)| *d > depth) {
            return false;
        }
        self.queued.insert(key);
        self.entries.push_back((entity.to_string(), depth));
        true
    }

    /// Pops the front entry and marks it visited.
    pub fn pop(&mut self) -> Option<(String, usize)> {
        let (entity, depth) = self.entries.pop_front()?;
        let key = fold_name(&entity);
        self.queued.remove(&key);
        self.visited.insert(key);
        Some((entity, depth))
    }

    pub fn is_visited(&self, entity: &str) -> bool {
        self.visited.contains(&fold_name(entity))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn visited_count(&self) -> usize {
        self.visited.len()
    }
}
