//! Shared helpers for the integration tests: an exact BM25 reference,
//! random corpora, and random scripted pipeline runs.

#![allow(dead_code)]

use std::path::PathBuf;

use kgforge::graph::{Provenance, Triplet};
use kgforge::llm::{Llm, Matcher, MockBackend, Transcript};
use kgforge::pipeline::{Pipeline, PipelineConfig, PipelineFailure, RunRecord};
use kgforge::protocol::{PromptSet, TemplateId};
use kgforge::retrieval::{Document, LocalCorpus, Paragraph, ProviderSet, SourceKind};
use num_bigint::BigInt;
use num_traits::{One, ToPrimitive, Zero};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_kgforge"))
}

// ---------------------------------------------------------------------------
// Exact BM25 reference, fixed point with FRAC fractional bits.

const FRAC: u32 = 256;

fn fx(p: &BigInt, q: &BigInt) -> BigInt {
    (p << FRAC) / q
}

fn fx_mul(a: &BigInt, b: &BigInt) -> BigInt {
    (a * b) >> FRAC
}

/// 2·atanh(p/q) for 0 ≤ p/q ≤ 1/3, summed until terms vanish.
fn two_atanh(p: &BigInt, q: &BigInt) -> BigInt {
    let z = fx(p, q);
    let z2 = fx_mul(&z, &z);
    let mut power = z.clone();
    let mut sum = BigInt::zero();
    let mut k = 1u32;
    while !power.is_zero() {
        sum += &power / BigInt::from(k);
        power = fx_mul(&power, &z2);
        k += 2;
    }
    sum * 2
}

fn bits(x: &BigInt) -> i64 {
    x.bits() as i64
}

/// ln(p/q) for positive integers: p/q = 2^m · y with y in [1, 2), and
/// ln y = 2·atanh((y−1)/(y+1)).
pub fn ln_ratio(p: &BigInt, q: &BigInt) -> BigInt {
    let ln2 = two_atanh(&BigInt::one(), &BigInt::from(3));
    let mut m = bits(p) - bits(q);
    let (mut a, mut b) = (p.clone(), q.clone());
    if m >= 0 {
        b <<= m as usize;
    } else {
        a <<= (-m) as usize;
    }
    if a < b {
        a <<= 1;
        m -= 1;
    }
    debug_assert!(a >= b && a < &b * 2);
    let diff: BigInt = &a - &b;
    let s: BigInt = &a + &b;
    ln2 * BigInt::from(m) + two_atanh(&diff, &s)
}

/// Scores every paragraph (given as lowercase token lists) against the
/// distinct terms of `query`, k1 = 6/5, b = 3/4, exactly up to 2^-256.
pub fn oracle_scores(query: &[String], docs: &[Vec<String>]) -> Vec<BigInt> {
    let n = docs.len() as i64;
    let total: i64 = docs.iter().map(|d| d.len() as i64).sum();
    let mut terms: Vec<&String> = query.iter().collect();
    terms.sort();
    terms.dedup();
    docs.iter()
        .map(|doc| {
            let mut score = BigInt::zero();
            if total == 0 {
                return score;
            }
            let len = doc.len() as i64;
            for t in &terms {
                let tf = doc.iter().filter(|w| w == t).count() as i64;
                if tf == 0 {
                    continue;
                }
                let df = docs.iter().filter(|d| d.contains(t)).count() as i64;
                // ln(1 + (N − df + ½)/(df + ½)) = ln(2(N+1) / (2df+1))
                let idf = ln_ratio(&BigInt::from(2 * (n + 1)), &BigInt::from(2 * df + 1));
                // tf(k1+1) / (tf + k1(1 − b + b·len/avg)), avg = total/N
                let num = BigInt::from(22 * tf * total);
                let den = BigInt::from(10 * total * tf + 3 * total + 9 * len * n);
                score += fx_mul(&idf, &fx(&num, &den));
            }
            score
        })
        .collect()
}

pub fn oracle_rank(scores: &[BigInt]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn to_f64(x: &BigInt) -> f64 {
    x.to_f64().unwrap() / 2f64.powi(FRAC as i32)
}

const WORDS: &[&str] = &[
    "west", "side", "story", "romeo", "juliet", "musical", "play", "river", "paris", "seine", "tower",
    "bernstein", "1957", "dance", "city", "of", "the",
];

const SEPARATORS: &[&str] = &[" ", " ", " ", ", ", " - ", "; ", "\t", " (", ") "];

/// A random paragraph pool and query, plus the tokens the reference should
/// see. Text is built from known lowercase words with random casing and
/// punctuation, so the reference never has to tokenize.
pub struct RandomCorpus {
    pub paragraphs: Vec<Paragraph>,
    pub tokens: Vec<Vec<String>>,
    pub query: String,
    pub query_tokens: Vec<String>,
}

fn cased(rng: &mut StdRng, w: &str) -> String {
    match rng.gen_range(0..4) {
        0 => w.to_uppercase(),
        1 => {
            let mut c = w.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        }
        _ => w.to_string(),
    }
}

pub fn random_corpus(rng: &mut StdRng) -> RandomCorpus {
    let vocab = &WORDS[..rng.gen_range(3..=WORDS.len())];
    let n = rng.gen_range(1..=50);
    let mut paragraphs = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.gen_range(0..=25);
        let words: Vec<&str> = (0..len).map(|_| *vocab.choose(rng).unwrap()).collect();
        let mut text = String::new();
        for (j, w) in words.iter().enumerate() {
            if j > 0 {
                text.push_str(SEPARATORS.choose(rng).unwrap());
            }
            text.push_str(&cased(rng, w));
        }
        if rng.gen_bool(0.2) {
            text.push('.');
        }
        tokens.push(words.iter().map(|w| w.to_string()).collect());
        paragraphs.push(Paragraph {
            source: SourceKind::LocalCorpus,
            locator: format!("doc{}", i / 4),
            title: format!("doc{}", i / 4),
            index: i % 4,
            text,
        });
    }
    let qlen = rng.gen_range(1..=8);
    let mut query_words: Vec<String> = (0..qlen).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    if rng.gen_bool(0.2) {
        query_words.push("zzyzx".into());
    }
    let query = query_words
        .iter()
        .map(|w| cased(rng, w))
        .collect::<Vec<_>>()
        .join(" ");
    RandomCorpus {
        paragraphs,
        tokens,
        query,
        query_tokens: query_words,
    }
}

// ---------------------------------------------------------------------------
// Random scripted runs.

pub const ENTITIES: &[&str] = &[
    "Alpha Centauri", "Beta", "Gamma Ray", "Delta", "Epsilon", "Zeta", "Eta Carinae", "Theta", "Iota", "Kappa",
];
const RELATIONS: &[&str] = &["orbits", "is near", "part of", "named after", "discovered by"];

pub struct RandomRun {
    pub question: String,
    pub golds: Vec<String>,
    pub transcript: Transcript,
    pub providers: ProviderSet,
}

fn pick<'a>(rng: &mut StdRng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).unwrap()
}

fn random_triplet(rng: &mut StdRng, subject: Option<&str>) -> Triplet {
    let s = subject.unwrap_or_else(|| pick(rng, ENTITIES)).to_string();
    let mut o = pick(rng, ENTITIES);
    while o == s {
        o = pick(rng, ENTITIES);
    }
    Triplet::new(s, pick(rng, RELATIONS), o, Provenance::Internal).unwrap()
}

fn arrow(t: &Triplet) -> String {
    format!("{} -> {} -> {}", t.subject, t.relation, t.object)
}

fn garbage(rng: &mut StdRng) -> String {
    [
        "I am not sure about this one.",
        "",
        "Answer: ???",
        "1.",
        "-> -> ->",
        "--[x]-->",
        "Action: Maybe",
        "[Entity]: 1. 2. 3.",
    ]
    .choose(rng)
    .unwrap()
    .to_string()
}

fn numbered<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// A transcript with random, partly malformed replies for every template,
/// plus a random local corpus over the same names.
pub fn random_run(rng: &mut StdRng) -> RandomRun {
    let mut t = Transcript::new();
    let mut known: Vec<Triplet> = Vec::new();

    // initialization, sometimes after a garbage reply
    let k = rng.gen_range(1..=4);
    let mut seeds: Vec<&str> = ENTITIES.to_vec();
    seeds.shuffle(rng);
    seeds.truncate(k);
    let rels: Vec<Triplet> = (0..rng.gen_range(0..=3))
        .map(|_| {
            let s = *seeds.choose(rng).unwrap();
            random_triplet(rng, Some(s))
        })
        .collect();
    known.extend(rels.iter().cloned());
    if rng.gen_bool(0.2) {
        t = t.then(Matcher::template(TemplateId::ExtractEntities), garbage(rng));
    }
    let rel_lines: Vec<String> = rels.iter().map(arrow).collect();
    t = t.then(
        Matcher::template(TemplateId::ExtractEntities),
        format!("{}\n\n{}", numbered(&seeds), numbered(&rel_lines)),
    );

    // filter
    for _ in 0..rng.gen_range(0..=5) {
        let reply = match rng.gen_range(0..4) {
            0 => "[Trajectory]: nothing\n[Entity]\n".to_string(),
            1 => garbage(rng),
            _ => {
                let mut names: Vec<&str> = ENTITIES.to_vec();
                names.shuffle(rng);
                format!("[Entity]\n{}", numbered(&names[..rng.gen_range(1..=3)]))
            }
        };
        t = t.then(Matcher::template(TemplateId::FilterEntities), reply);
    }
    let fallback = if rng.gen_bool(0.5) {
        "[Entity]".to_string()
    } else {
        format!("[Entity]\n{}", numbered(&ENTITIES[..rng.gen_range(1..=ENTITIES.len())]))
    };
    t = t.always(Matcher::template(TemplateId::FilterEntities), fallback);

    // expansion, one script per source entity
    for &e in ENTITIES {
        let reply = if rng.gen_bool(0.15) {
            garbage(rng)
        } else {
            let mut lines: Vec<Triplet> = (0..rng.gen_range(1..=7)).map(|_| random_triplet(rng, Some(e))).collect();
            known.extend(lines.iter().cloned());
            if rng.gen_bool(0.3) {
                lines.push(random_triplet(rng, None));
            }
            let lines: Vec<String> = lines.iter().map(arrow).collect();
            format!("[Tratectory]: thinking\n{}", numbered(&lines))
        };
        t = t.always(Matcher::both(TemplateId::ExpandEntity, format!("source entity \"{e}\"")), reply);
    }
    t = t.always(Matcher::template(TemplateId::ExpandEntity), garbage(rng));

    // expand_triplet replies are generic; they join the selectable pool
    let expansions: Vec<Triplet> = (0..rng.gen_range(0..=4)).map(|_| random_triplet(rng, None)).collect();
    known.extend(expansions.iter().cloned());
    let expand_reply: Vec<String> = expansions.iter().map(Triplet::bracket_line).collect();

    // selection over every triplet that can appear
    let mut pool = known.clone();
    pool.shuffle(rng);
    for target in pool.iter().take(12) {
        let action = *["Correct", "Expand", "Enhance", "**Expand**", "Delete"].choose(rng).unwrap();
        t = t.then(
            Matcher::both(TemplateId::SelectAction, target.bracket_line()),
            format!("Action: {action}\nTriplet: {}", target.bracket_line()),
        );
    }
    t = t.always(
        Matcher::template(TemplateId::SelectAction),
        "Action: Expand\nTriplet: Nowhere --[leads]--> Nothing",
    );

    for target in &known {
        let reply = match rng.gen_range(0..4) {
            0 => target.bracket_line(),
            1 => garbage(rng),
            2 => known.choose(rng).unwrap().bracket_line(),
            _ => random_triplet(rng, Some(&target.subject)).bracket_line(),
        };
        t = t.always(Matcher::both(TemplateId::CorrectTriplet, target.bracket_line()), reply);
    }
    t = t.always(Matcher::template(TemplateId::CorrectTriplet), garbage(rng));
    t = t.always(Matcher::template(TemplateId::ExpandTriplet), expand_reply.join("\n"));

    let answer = match rng.gen_range(0..3) {
        0 => format!("Final Answer: {}", pick(rng, ENTITIES)),
        1 => format!("Reasoning...\n{}", pick(rng, ENTITIES)),
        _ => garbage(rng),
    };
    t = t.always(Matcher::template(TemplateId::AnswerOnGraph), answer);

    let docs: Vec<Document> = (0..rng.gen_range(0..=6))
        .map(|i| {
            let body = (0..rng.gen_range(1..=4))
                .map(|_| {
                    (0..rng.gen_range(3..=12))
                        .map(|_| {
                            if rng.gen_bool(0.5) {
                                pick(rng, ENTITIES)
                            } else {
                                pick(rng, RELATIONS)
                            }
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect::<Vec<_>>()
                .join("\n\n");
            Document {
                source: SourceKind::LocalCorpus,
                locator: format!("doc{i}.txt"),
                title: format!("doc{i}"),
                body,
            }
        })
        .collect();
    let providers = ProviderSet::new().with(LocalCorpus::from_documents(docs));

    let golds: Vec<String> = (0..rng.gen_range(1..=2)).map(|_| pick(rng, ENTITIES).to_string()).collect();
    RandomRun {
        question: format!("How is {} related to {}?", seeds[0], pick(rng, ENTITIES)),
        golds,
        transcript: t,
        providers,
    }
}

/// Runs the pipeline on `random_run(seed)` with default prompts. Returns the
/// outcome, the call log and the gold answers.
pub fn try_scripted_run(
    seed: u64,
    config: &PipelineConfig,
) -> (Result<RunRecord, Box<PipelineFailure>>, Llm, Vec<String>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let run = random_run(&mut rng);
    let prompts = PromptSet::default();
    let llm = Llm::new(MockBackend::new(run.transcript));
    let p = Pipeline {
        config,
        prompts: &prompts,
        llm: &llm,
        providers: &run.providers,
    };
    let result = p.run_question(&run.question);
    (result, llm, run.golds)
}
