//! External documents: fetching, paragraph splitting and BM25 ranking.

mod bm25;
mod providers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Triplet;

pub use bm25::{bm25_rank, bm25_rank_with, score_all, tokenize, Bm25Params, CorpusStats, Ranked};
pub use providers::{LocalCorpus, Provider, ProviderSet, WebSearch, Wikipedia};

pub const ENV_SEARCH_API_KEY: &str = "KGFORGE_SEARCH_API_KEY";
pub const ENV_SEARCH_BASE_URL: &str = "KGFORGE_SEARCH_BASE_URL";
pub const ENV_WIKI_BASE_URL: &str = "KGFORGE_WIKI_BASE_URL";

/// Segments shorter than this (in characters, after trimming) are merged
/// into the segment that follows them.
pub const MIN_PARAGRAPH_CHARS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("network failure: {0}")]
    Network(String),
    #[error("provider quota exceeded: {0}")]
    Quota(String),
    #[error("provider not configured: {0}")]
    Config(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("cannot read corpus: {0}")]
    Io(String),
    #[error("top-k must be at least 1")]
    InvalidTopK,
}

impl RetrievalError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, RetrievalError::Network(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Wikipedia,
    WebSearch,
    LocalCorpus,
}

impl std::str::FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wikipedia" => Ok(SourceKind::Wikipedia),
            "web_search" => Ok(SourceKind::WebSearch),
            "local_corpus" => Ok(SourceKind::LocalCorpus),
            other => Err(format!("unknown provider {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub source: SourceKind,
    /// URL or file path.
    pub locator: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub source: SourceKind,
    pub locator: String,
    pub title: String,
    /// Ordinal within the document.
    pub index: usize,
    pub text: String,
}

/// The search query for a triplet: its three fields joined by spaces.
pub fn build_query(triplet: &Triplet) -> String {
    format!("{} {} {}", triplet.subject, triplet.relation, triplet.object)
}

/// Byte ranges of the non-blank blocks of `body`, separated by lines that
/// are empty or whitespace-only.
fn blocks(body: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in body.split_inclusive('\n') {
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                out.push((s, end));
            }
        } else {
            if start.is_none() {
                start = Some(offset);
            }
            end = offset + line.len();
        }
        offset += line.len();
    }
    if let Some(s) = start {
        out.push((s, end));
    }
    out
}

/// Splits a document into paragraphs on blank lines. A block shorter than
/// [`MIN_PARAGRAPH_CHARS`] is merged forward into the next block; a short
/// final block joins the one before it. Each paragraph is a trimmed slice
/// of the body.
pub fn split_paragraphs(doc: &Document) -> Vec<Paragraph> {
    let body = doc.body.as_str();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut pending: Option<usize> = None;
    for (s, e) in blocks(body) {
        let start = pending.take().unwrap_or(s);
        if body[s..e].trim().chars().count() < MIN_PARAGRAPH_CHARS {
            pending = Some(start);
        } else {
            spans.push((start, e));
        }
    }
    if let Some(start) = pending {
        let end = body.trim_end().len();
        match spans.last_mut() {
            Some(last) => last.1 = end,
            None => spans.push((start, end)),
        }
    }
    spans
        .into_iter()
        .map(|(s, e)| body[s..e].trim())
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(index, text)| Paragraph {
            source: doc.source,
            locator: doc.locator.clone(),
            title: doc.title.clone(),
            index,
            text: text.to_string(),
        })
        .collect()
}
