use std::collections::HashSet;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use super::{
    tokenize, Document, RetrievalError, SourceKind, ENV_SEARCH_API_KEY, ENV_SEARCH_BASE_URL,
    ENV_WIKI_BASE_URL,
};

pub trait Provider: Send + Sync {
    fn kind(&self) -> SourceKind;

    /// Documents for `query`. No results is an empty list, not an error.
    fn fetch(&self, query: &str) -> Result<Vec<Document>, RetrievalError>;
}

/// The providers consulted for each query, in order.
#[derive(Default)]
pub struct ProviderSet {
    providers: Vec<Box<dyn Provider>>,
}

impl ProviderSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, provider: impl Provider + 'static) -> Self {
        self.providers.push(Box::new(provider));
        self
    }

    pub fn push(&mut self, provider: Box<dyn Provider>) {
        self.providers.push(provider);
    }

    pub fn is_empty(&self) -> bool {
        self.providers.is_empty()
    }

    pub fn kinds(&self) -> Vec<SourceKind> {
        self.providers.iter().map(|p| p.kind()).collect()
    }

    /// Concatenates every provider's documents. A failing provider is
    /// logged and contributes nothing.
    pub fn fetch_all(&self, query: &str) -> Vec<Document> {
        let mut docs = Vec::new();
        for p in &self.providers {
            match p.fetch(query) {
                Ok(found) => docs.extend(found),
                Err(e) => log::warn!("{:?} provider failed for {query:?}: {e}", p.kind()),
            }
        }
        docs
    }
}

// ---------------------------------------------------------------------------

/// Offline provider over a directory of UTF-8 text files, one document per
/// file, titled by the file stem. Documents are ranked by how many distinct
/// query terms they contain.
#[derive(Debug, Clone)]
pub struct LocalCorpus {
    docs: Vec<Document>,
    doc_terms: Vec<HashSet<String>>,
    max_docs: usize,
}

impl LocalCorpus {
    pub fn from_documents(docs: Vec<Document>) -> Self {
        let doc_terms = docs
            .iter()
            .map(|d| {
                tokenize(&d.title)
                    .into_iter()
                    .chain(tokenize(&d.body))
                    .collect()
            })
            .collect();
        LocalCorpus {
            docs,
            doc_terms,
            max_docs: 5,
        }
    }

    pub fn from_dir(dir: &Path) -> Result<Self, RetrievalError> {
        let io = |e: std::io::Error| RetrievalError::Io(format!("{}: {e}", dir.display()));
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut docs = Vec::new();
        for path in paths {
            let body = std::fs::read_to_string(&path)
                .map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
            if body.trim().is_empty() {
                continue;
            }
            let title = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            docs.push(Document {
                source: SourceKind::LocalCorpus,
                locator: path.display().to_string(),
                title,
                body,
            });
        }
        Ok(Self::from_documents(docs))
    }

    pub fn with_max_docs(mut self, max_docs: usize) -> Self {
        self.max_docs = max_docs;
        self
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl Provider for LocalCorpus {
    fn kind(&self) -> SourceKind {
        SourceKind::LocalCorpus
    }

    fn fetch(&self, query: &str) -> Result<Vec<Document>, RetrievalError> {
        let terms: HashSet<String> = tokenize(query).into_iter().collect();
        let mut hits: Vec<(usize, usize)> = self
            .doc_terms
            .iter()
            .enumerate()
            .map(|(i, dt)| (i, terms.iter().filter(|t| dt.contains(*t)).count()))
            .filter(|(_, overlap)| *overlap > 0)
            .collect();
        hits.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(hits
            .into_iter()
            .take(self.max_docs)
            .map(|(i, _)| self.docs[i].clone())
            .collect())
    }
}

// ---------------------------------------------------------------------------

fn http_client() -> Result<reqwest::blocking::Client, RetrievalError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .user_agent(concat!("kgforge/", env!("CARGO_PKG_VERSION")))
        .build()
        .map_err(|e| RetrievalError::Config(e.to_string()))
}

fn classify(resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, RetrievalError> {
    let status = resp.status();
    if status.as_u16() == 429 {
        Err(RetrievalError::Quota(format!("HTTP {status}")))
    } else if status.is_server_error() {
        Err(RetrievalError::Network(format!("HTTP {status}")))
    } else if !status.is_success() {
        Err(RetrievalError::Malformed(format!("HTTP {status}")))
    } else {
        Ok(resp)
    }
}

fn with_retry<T>(
    retries: u32,
    mut f: impl FnMut() -> Result<T, RetrievalError>,
) -> Result<T, RetrievalError> {
    let mut attempt = 0;
    loop {
        match f() {
            Err(e) if e.is_retryable() && attempt < retries => {
                attempt += 1;
                std::thread::sleep(Duration::from_millis(200 * u64::from(attempt)));
            }
            other => return other,
        }
    }
}

/// MediaWiki search followed by plain-text extracts of the top titles.
#[derive(Debug, Clone)]
pub struct Wikipedia {
    client: reqwest::blocking::Client,
    api_url: String,
    max_docs: usize,
    retries: u32,
}

#[derive(Deserialize)]
struct WikiSearch {
    query: Option<WikiSearchQuery>,
}

#[derive(Deserialize)]
struct WikiSearchQuery {
    #[serde(default)]
    search: Vec<WikiSearchHit>,
}

#[derive(Deserialize)]
struct WikiSearchHit {
    title: String,
}

#[derive(Deserialize)]
struct WikiExtracts {
    query: Option<WikiExtractQuery>,
}

#[derive(Deserialize)]
struct WikiExtractQuery {
    #[serde(default)]
    pages: serde_json::Map<String, serde_json::Value>,
}

impl Wikipedia {
    pub const DEFAULT_API_URL: &'static str = "https://en.wikipedia.org/w/api.php";

    pub fn new(api_url: impl Into<String>) -> Result<Self, RetrievalError> {
        Ok(Wikipedia {
            client: http_client()?,
            api_url: api_url.into(),
            max_docs: 3,
            retries: 2,
        })
    }

    /// Uses `KGFORGE_WIKI_BASE_URL` when set.
    pub fn from_env() -> Result<Self, RetrievalError> {
        let url = std::env::var(ENV_WIKI_BASE_URL)
            .ok()
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| Self::DEFAULT_API_URL.to_string());
        Self::new(url)
    }

    pub fn with_max_docs(mut self, max_docs: usize) -> Self {
        self.max_docs = max_docs;
        self
    }

    fn get_json<T: for<'de> Deserialize<'de>>(&self, params: &[(&str, &str)]) -> Result<T, RetrievalError> {
        with_retry(self.retries, || {
            let resp = self
                .client
                .get(&self.api_url)
                .query(params)
                .send()
                .map_err(|e| RetrievalError::Network(e.to_string()))?;
            classify(resp)?
                .json()
                .map_err(|e| RetrievalError::Malformed(e.to_string()))
        })
    }
}

impl Provider for Wikipedia {
    fn kind(&self) -> SourceKind {
        SourceKind::Wikipedia
    }

    fn fetch(&self, query: &str) -> Result<Vec<Document>, RetrievalError> {
        let limit = self.max_docs.to_string();
        let search: WikiSearch = self.get_json(&[
            ("action", "query"),
            ("list", "search"),
            ("srsearch", query),
            ("srlimit", &limit),
            ("format", "json"),
        ])?;
        let titles: Vec<String> = search
            .query
            .map(|q| q.search.into_iter().map(|h| h.title).collect())
            .unwrap_or_default();
        if titles.is_empty() {
            return Ok(Vec::new());
        }
        let joined = titles.join("|");
        let extracts: WikiExtracts = self.get_json(&[
            ("action", "query"),
            ("prop", "extracts"),
            ("explaintext", "1"),
            ("redirects", "1"),
            ("titles", &joined),
            ("format", "json"),
        ])?;
        let pages = extracts.query.map(|q| q.pages).unwrap_or_default();
        let mut docs = Vec::new();
        for title in &titles {
            let page = pages
                .values()
                .find(|p| p.get("title").and_then(|t| t.as_str()) == Some(title.as_str()));
            let Some(page) = page else { continue };
            let body = page.get("extract").and_then(|e| e.as_str()).unwrap_or("");
            if body.trim().is_empty() {
                continue;
            }
            let pageid = page.get("pageid").and_then(|p| p.as_u64()).unwrap_or(0);
            docs.push(Document {
                source: SourceKind::Wikipedia,
                locator: format!("{}?curid={pageid}", self.api_url),
                title: title.clone(),
                body: body.to_string(),
            });
        }
        Ok(docs)
    }
}

/// JSON web-search API: `POST {"q": query, "num": n}` with an `X-API-KEY`
/// header, answering `{"organic": [{"title", "link", "snippet"}]}`.
#[derive(Debug, Clone)]
pub struct WebSearch {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
    max_results: usize,
    retries: u32,
}

#[derive(Deserialize)]
struct SearchResponse {
    #[serde(default)]
    organic: Vec<SearchHit>,
}

#[derive(Deserialize)]
struct SearchHit {
    #[serde(default)]
    title: String,
    #[serde(default)]
    link: String,
    #[serde(default)]
    snippet: String,
}

impl WebSearch {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Result<Self, RetrievalError> {
        let base_url = base_url.into();
        let api_key = api_key.into();
        if base_url.is_empty() {
            return Err(RetrievalError::Config(format!("{ENV_SEARCH_BASE_URL} is not set")));
        }
        if api_key.is_empty() {
            return Err(RetrievalError::Config(format!("{ENV_SEARCH_API_KEY} is not set")));
        }
        Ok(WebSearch {
            client: http_client()?,
            base_url,
            api_key,
            max_results: 5,
            retries: 2,
        })
    }

    /// Requires `KGFORGE_SEARCH_BASE_URL` and `KGFORGE_SEARCH_API_KEY`.
    pub fn from_env() -> Result<Self, RetrievalError> {
        let var = |k| std::env::var(k).unwrap_or_default();
        Self::new(var(ENV_SEARCH_BASE_URL), var(ENV_SEARCH_API_KEY))
    }

    pub fn with_max_results(mut self, n: usize) -> Self {
        self.max_results = n;
        self
    }
}

impl Provider for WebSearch {
    fn kind(&self) -> SourceKind {
        SourceKind::WebSearch
    }

    fn fetch(&self, query: &str) -> Result<Vec<Document>, RetrievalError> {
        let body = serde_json::json!({ "q": query, "num": self.max_results });
        let parsed: SearchResponse = with_retry(self.retries, || {
            let resp = self
                .client
                .post(&self.base_url)
                .header("X-API-KEY", &self.api_key)
                .json(&body)
                .send()
                .map_err(|e| RetrievalError::Network(e.to_string()))?;
            classify(resp)?
                .json()
                .map_err(|e| RetrievalError::Malformed(e.to_string()))
        })?;
        Ok(parsed
            .organic
            .into_iter()
            .filter(|h| !h.snippet.trim().is_empty())
            .take(self.max_results)
            .map(|h| Document {
                source: SourceKind::WebSearch,
                locator: h.link,
                title: h.title,
                body: h.snippet,
            })
            .collect())
    }
}
