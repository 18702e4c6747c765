//! Okapi BM25 over a per-query paragraph pool.
//!
//! ```text
//! score(P) = Σ_t IDF(t) · tf·(k1+1) / (tf + k1·(1 − b + b·|P|/avg_len))
//! IDF(t)   = ln(1 + (N − df + 0.5) / (df + 0.5))
//! ```
//!
//! `t` ranges over the distinct query terms, `N` is the number of paragraphs
//! in the pool, `df` the number of paragraphs containing `t`. The `ln(1+·)`
//! form keeps every IDF, and so every score, non-negative.

use std::collections::HashMap;

use super::{Paragraph, RetrievalError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Lowercase, split on anything that is not alphanumeric, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Collection statistics of the candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub avg_len: f64,
    pub doc_freq: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn from_tokens(docs: &[Vec<String>]) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for doc in docs {
            total += doc.len();
            let mut seen: Vec<&str> = doc.iter().map(String::as_str).collect();
            seen.sort_unstable();
            seen.dedup();
            for term in seen {
                *doc_freq.entry(term.to_string()).or_default() += 1;
            }
        }
        let n_docs = docs.len();
        let avg_len = if n_docs == 0 {
            0.0
        } else {
            total as f64 / n_docs as f64
        };
        CorpusStats {
            n_docs,
            avg_len,
            doc_freq,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// `x` as `num/den` with a small denominator, when such a fraction rounds
/// back to exactly `x`.
fn small_ratio(x: f64) -> Option<(u128, u128)> {
    if !(x.is_finite() && x >= 0.0) {
        return None;
    }
    (1..=10_000u32).find_map(|den| {
        let num = (x * den as f64).round();
        (num / den as f64 == x && num < 1e12).then_some((num as u128, den as u128))
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// The length-normalized term weight `tf·(k1+1) / (tf + k1·norm)`.
///
/// With `k1 = a/c` and `b = e/g` the weight is the integer fraction
/// `tf·(a+c)·g·T / (tf·c·g·T + a·(g−e)·T + a·e·len·N)` with `T` the total pool
/// length. Reducing it before the single division means equal weights round
/// to the same float even when they come from different `(tf, len)` pairs.
struct TermWeight {
    exact: Option<((u128, u128), (u128, u128))>,
    params: Bm25Params,
    total: u128,
    n_docs: u128,
}

impl TermWeight {
    fn new(params: Bm25Params, total: usize, n_docs: usize) -> Self {
        let exact = match (small_ratio(params.k1), small_ratio(params.b)) {
            (Some(k1), Some(b)) if b.0 <= b.1 => Some((k1, b)),
            _ => None,
        };
        TermWeight {
            exact,
            params,
            total: total as u128,
            n_docs: n_docs as u128,
        }
    }

    fn weight(&self, tf: usize, len: usize) -> f64 {
        let (tf_u, len_u) = (tf as u128, len as u128);
        if let Some(((a, c), (e, g))) = self.exact {
            let t = self.total;
            let num = tf_u.checked_mul(a + c).and_then(|v| v.checked_mul(g)).and_then(|v| v.checked_mul(t));
            let den = tf_u
                .checked_mul(c * g)
                .and_then(|v| v.checked_mul(t))
                .and_then(|v| v.checked_add(a.checked_mul(g - e)?.checked_mul(t)?))
                .and_then(|v| v.checked_add(a.checked_mul(e)?.checked_mul(len_u)?.checked_mul(self.n_docs)?));
            if let (Some(num), Some(den)) = (num, den) {
                if den > 0 {
                    let d = gcd(num, den);
                    return (num / d) as f64 / (den / d) as f64;
                }
            }
        }
        let Bm25Params { k1, b } = self.params;
        let avg = self.total as f64 / self.n_docs as f64;
        let norm = 1.0 - b + b * len as f64 / avg;
        let f = tf as f64;
        f * (k1 + 1.0) / (f + k1 * norm)
    }
}

/// Scores every tokenized paragraph against `query_terms`.
///
/// Per-term contributions are added smallest first, so paragraphs with the
/// same multiset of contributions get bit-identical scores.
pub fn score_all(query_terms: &[String], docs: &[Vec<String>], params: Bm25Params) -> Vec<f64> {
    let stats = CorpusStats::from_tokens(docs);
    let mut terms: Vec<&str> = query_terms.iter().map(String::as_str).collect();
    terms.sort_unstable();
    terms.dedup();
    let idf: Vec<f64> = terms.iter().map(|t| stats.idf(t)).collect();
    let total: usize = docs.iter().map(Vec::len).sum();
    let weights = TermWeight::new(params, total, docs.len());

    docs.iter()
        .map(|doc| {
            if total == 0 {
                return 0.0;
            }
            let mut tf: HashMap<&str, usize> = HashMap::new();
            for tok in doc {
                *tf.entry(tok.as_str()).or_default() += 1;
            }
            let mut parts: Vec<f64> = terms
                .iter()
                .zip(&idf)
                .filter_map(|(t, idf)| Some(idf * weights.weight(*tf.get(t)?, doc.len())))
                .collect();
            parts.sort_by(f64::total_cmp);
            parts.iter().sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub paragraph: Paragraph,
    pub score: f64,
}

/// The `k` best paragraphs for `query`, highest score first. Ties keep the
/// input order, which is document order then paragraph index.
pub fn bm25_rank(query: &str, paragraphs: &[Paragraph], k: usize) -> Result<Vec<Ranked>, RetrievalError> {
    bm25_rank_with(query, paragraphs, k, Bm25Params::default())
}

pub fn bm25_rank_with(
    query: &str,
    paragraphs: &[Paragraph],
    k: usize,
    params: Bm25Params,
) -> Result<Vec<Ranked>, RetrievalError> {
    if k < 1 {
        return Err(RetrievalError::InvalidTopK);
    }
    let docs: Vec<Vec<String>> = paragraphs.iter().map(|p| tokenize(&p.text)).collect();
    let scores = score_all(&tokenize(query), &docs, params);
    let mut order: Vec<usize> = (0..paragraphs.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| Ranked {
            paragraph: paragraphs[i].clone(),
            score: scores[i],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::SourceKind;

    fn para(i: usize, text: &str) -> Paragraph {
        Paragraph {
            source: SourceKind::LocalCorpus,
            locator: "mem".into(),
            title: "t".into(),
            index: i,
            text: text.into(),
        }
    }

    #[test]
    fn tokenizer() {
        assert_eq!(
            tokenize("West-Side  Story's (1957)!"),
            ["west", "side", "story", "s", "1957"]
        );
        assert!(tokenize(" -- ").is_empty());
    }

    #[test]
    fn single_candidate() {
        let ps = [para(0, "Romeo and Juliet is a tragedy")];
        let r = bm25_rank("romeo", &ps, 1).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].score > 0.0);
    }

    #[test]
    fn absent_terms_score_zero_in_input_order() {
        let ps = [para(0, "aaa bbb"), para(1, "ccc"), para(2, "ddd eee fff")];
        let r = bm25_rank("zzz", &ps, 2).unwrap();
        assert_eq!(r.iter().map(|x| x.paragraph.index).collect::<Vec<_>>(), [0, 1]);
        assert!(r.iter().all(|x| x.score == 0.0));
    }

    #[test]
    fn top_k_larger_than_pool() {
        let ps = [para(0, "a"), para(1, "b")];
        assert_eq!(bm25_rank("a", &ps, 3).unwrap().len(), 2);
        assert!(bm25_rank("a", &[], 3).unwrap().is_empty());
        assert_eq!(bm25_rank("a", &ps, 0), Err(RetrievalError::InvalidTopK));
    }

    #[test]
    fn hand_computed_two_paragraph_score() {
        // N=2, "x" in one paragraph: IDF = ln(1 + 1.5/1.5) = ln 2.
        // |P0|=2, avg=1.5, tf=1: 2.2 / (1 + 1.2·(0.25 + 0.75·2/1.5)) = 2.2/2.5
        let ps = [para(0, "x y"), para(1, "z")];
        let r = bm25_rank("x", &ps, 2).unwrap();
        let expected = 2f64.ln() * 2.2 / 2.5;
        assert!((r[0].score - expected).abs() < 1e-12);
        assert_eq!(r[1].score, 0.0);
    }

    #[test]
    fn repeated_query_terms_count_once() {
        let ps = [para(0, "x y"), para(1, "z")];
        let once = bm25_rank("x", &ps, 1).unwrap()[0].score;
        let twice = bm25_rank("x X x", &ps, 1).unwrap()[0].score;
        assert_eq!(once, twice);
    }

    #[test]
    fn ranking_prefers_denser_match() {
        let ps = [
            para(0, "the musical premiered on broadway"),
            para(1, "west side story was inspired by romeo and juliet"),
            para(2, "romeo romeo juliet"),
        ];
        let r = bm25_rank("romeo juliet", &ps, 3).unwrap();
        assert_eq!(r[0].paragraph.index, 2);
        assert_eq!(r[1].paragraph.index, 1);
        assert_eq!(r[2].score, 0.0);
    }

    #[test]
    fn equal_weights_from_different_lengths_are_bit_identical() {
        // With 15 paragraphs totalling 162 tokens, tf 2 in 4 tokens and tf 7
        // in 23 tokens reduce to the same fraction 132/79.
        let w = TermWeight::new(Bm25Params::default(), 162, 15);
        assert_eq!(w.weight(2, 4).to_bits(), w.weight(7, 23).to_bits());
        assert_eq!(w.weight(2, 4), 132.0 / 79.0);
        assert!(small_ratio(0.1 + 0.2).is_none());
    }
}
