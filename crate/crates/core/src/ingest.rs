//! Main-content extraction, chunk segmentation, the fixture-backed search
//! client and query planning.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use scraper::{ElementRef, Html, Node};
use serde::{Deserialize, Serialize};

use crate::eval::normalize_text;
use crate::jsonl::read_jsonl;
use crate::retrieval::{token_spans, Chunk, ChunkKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageFlag {
    Relevant,
    HardNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPage {
    pub url: String,
    pub title: String,
    pub snippet: String,
    #[serde(default)]
    pub html: String,
    pub last_updated: String,
    pub flag: PageFlag,
}

impl RawPage {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.url.trim().is_empty() {
            return Err("page url is empty".into());
        }
        if !looks_like_iso8601(&self.last_updated) {
            return Err(format!("page {}: last_updated {:?} is not an ISO-8601 timestamp", self.url, self.last_updated));
        }
        Ok(())
    }

    /// Title and snippet, the text of the summary chunk.
    pub fn summary(&self) -> String {
        [self.title.trim(), self.snippet.trim()]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn looks_like_iso8601(s: &str) -> bool {
    let b = s.as_bytes();
    let digits = |r: std::ops::Range<usize>| r.into_iter().all(|i| b.get(i).is_some_and(u8::is_ascii_digit));
    digits(0..4) && b.get(4) == Some(&b'-') && digits(5..7) && b.get(7) == Some(&b'-') && digits(8..10)
        && (b.len() == 10 || b[10] == b'T' || b[10] == b' ')
}

/// One query record of the fixture file. `answer`, when present, is a string
/// that occurs only in the page chunk that answers the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureQuery {
    pub query: String,
    pub pages: Vec<RawPage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchFixture {
    /// Keyed by normalized query text.
    pub queries: BTreeMap<String, FixtureQuery>,
    pub hard_negative_pool: Vec<RawPage>,
}

pub fn normalize_query(q: &str) -> String {
    normalize_text(q)
}

impl SearchFixture {
    /// Loads the per-query JSONL and the hard-negative pool JSONL.
    pub fn load(queries_path: &Path, pool_path: &Path) -> Result<Self> {
        let records: Vec<FixtureQuery> = read_jsonl(queries_path)?;
        let pool: Vec<RawPage> = read_jsonl(pool_path)?;
        let mut queries = BTreeMap::new();
        for (i, rec) in records.into_iter().enumerate() {
            let line = i + 1;
            if rec.pages.is_empty() {
                return Err(Error::data(queries_path, line, format!("query {:?} has no pages", rec.query)));
            }
            for p in &rec.pages {
                p.validate().map_err(|m| Error::data(queries_path, line, m))?;
            }
            let key = normalize_query(&rec.query);
            if key.is_empty() {
                return Err(Error::data(queries_path, line, "query is empty"));
            }
            if queries.insert(key, rec).is_some() {
                return Err(Error::data(queries_path, line, "duplicate query"));
            }
        }
        for (i, p) in pool.iter().enumerate() {
            p.validate().map_err(|m| Error::data(pool_path, i + 1, m))?;
            if p.flag != PageFlag::HardNegative {
                return Err(Error::data(pool_path, i + 1, "pool pages must be flagged hard_negative"));
            }
        }
        Ok(Self {
            queries,
            hard_negative_pool: pool,
        })
    }

    pub fn get(&self, query: &str) -> Option<&FixtureQuery> {
        self.queries.get(&normalize_query(query))
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Returns up to `k` pages: `round(k·rate)` hard negatives drawn without
/// replacement from the query's own negatives and the shared pool, and the
/// query's relevant pages in fixture order, interleaved at seeded positions.
/// Unknown queries get `k` hard negatives.
pub fn mock_search<R: Rng + ?Sized>(
    query: &str,
    fixture: &SearchFixture,
    k: usize,
    hard_negative_rate: f64,
    rng: &mut R,
) -> Result<Vec<RawPage>> {
    if !(0.0..=1.0).contains(&hard_negative_rate) {
        return Err(Error::Invalid(format!("hard negative rate {hard_negative_rate} is outside [0, 1]")));
    }
    let Some(rec) = fixture.get(query) else {
        return Ok(draw(&fixture.hard_negative_pool.iter().collect::<Vec<_>>(), k, rng));
    };
    let relevant: Vec<&RawPage> = rec.pages.iter().filter(|p| p.flag == PageFlag::Relevant).collect();
    let mut seen = HashSet::new();
    let negatives: Vec<&RawPage> = rec
        .pages
        .iter()
        .filter(|p| p.flag == PageFlag::HardNegative)
        .chain(&fixture.hard_negative_pool)
        .filter(|p| seen.insert(p.url.as_str()))
        .collect();
    let n_hn = ((k as f64 * hard_negative_rate).round() as usize).min(negatives.len());
    let n_rel = relevant.len().min(k - n_hn);
    let negs = draw(&negatives, n_hn, rng);
    let total = n_rel + negs.len();
    let neg_slots: HashSet<usize> = sample(rng, total, negs.len()).into_iter().collect();
    let (mut rel_it, mut neg_it) = (relevant.into_iter().take(n_rel), negs.into_iter());
    Ok((0..total)
        .map(|slot| {
            if neg_slots.contains(&slot) {
                neg_it.next().expect("slot count matches negatives")
            } else {
                rel_it.next().expect("slot count matches relevant pages").clone()
            }
        })
        .collect())
}

fn draw<R: Rng + ?Sized>(pool: &[&RawPage], n: usize, rng: &mut R) -> Vec<RawPage> {
    let n = n.min(pool.len());
    sample(rng, pool.len(), n).into_iter().map(|i| pool[i].clone()).collect()
}

const DROPPED: &[&str] = &["script", "style", "nav", "header", "footer", "aside", "form", "noscript", "template"];
const BLOCKS: &[&str] = &[
    "address", "article", "blockquote", "body", "dd", "details", "div", "dl", "dt", "figcaption", "figure", "h1", "h2",
    "h3", "h4", "h5", "h6", "li", "main", "ol", "p", "pre", "section", "summary", "table", "tbody", "td", "tfoot", "th",
    "thead", "tr", "ul",
];

fn has_markup(s: &str) -> bool {
    s.as_bytes()
        .windows(2)
        .any(|w| w[0] == b'<' && (w[1].is_ascii_alphabetic() || matches!(w[1], b'/' | b'!' | b'?')))
}

#[derive(Default)]
struct Block {
    text: String,
    inline_elements: usize,
}

fn visit(el: ElementRef<'_>, current: Option<usize>, blocks: &mut Vec<Block>) {
    let name = el.value().name();
    if DROPPED.contains(&name) {
        return;
    }
    let current = if BLOCKS.contains(&name) {
        blocks.push(Block::default());
        Some(blocks.len() - 1)
    } else {
        if let Some(b) = current {
            blocks[b].inline_elements += 1;
        }
        current
    };
    for child in el.children() {
        match child.value() {
            Node::Text(t) => {
                if let Some(b) = current {
                    blocks[b].text.push_str(t);
                }
            }
            Node::Element(_) => visit(ElementRef::wrap(child).expect("element node"), current, blocks),
            _ => {}
        }
    }
}

/// Text-density main-content extraction.
///
/// Each block element owns the text of its inline descendants (nested blocks
/// own theirs). Density is text length over `1 +` inline element count;
/// blocks within half of the densest are kept in document order. Input
/// without markup is returned unchanged.
pub fn extract_main_content(html: &str) -> String {
    if !has_markup(html) {
        return html.to_string();
    }
    let doc = Html::parse_document(html);
    let mut blocks = Vec::new();
    visit(doc.root_element(), None, &mut blocks);
    let scored: Vec<(String, f64)> = blocks
        .into_iter()
        .filter_map(|b| {
            let text = b.text.split_whitespace().collect::<Vec<_>>().join(" ");
            if text.is_empty() {
                return None;
            }
            let density = text.chars().count() as f64 / (1 + b.inline_elements) as f64;
            Some((text, density))
        })
        .collect();
    let max = scored.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    scored
        .into_iter()
        .filter(|(_, d)| *d >= 0.5 * max)
        .map(|(t, _)| t)
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub chunk_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            chunk_tokens: 256,
            overlap_tokens: 64,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.chunk_tokens == 0 || self.overlap_tokens >= self.chunk_tokens {
            return Err(Error::config(
                format!("{prefix}.overlap_tokens"),
                "need chunk_tokens > overlap_tokens >= 0",
            ));
        }
        Ok(())
    }
}

/// Token windows `[start, end)` covering `n` tokens.
pub fn windows(n: usize, cfg: &SegmentConfig) -> Vec<(usize, usize)> {
    let stride = cfg.chunk_tokens - cfg.overlap_tokens;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + cfg.chunk_tokens).min(n);
        out.push((start, end));
        if end == n {
            break;
        }
        start += stride;
    }
    out
}

/// Sliding-window body chunks over `main_text` plus one summary chunk. Chunk
/// text is the original substring spanning the window's tokens.
pub fn segment(id_prefix: &str, source_url: &str, main_text: &str, summary: &str, cfg: &SegmentConfig) -> Result<Vec<Chunk>> {
    cfg.validate("segment")?;
    let spans = token_spans(main_text);
    let mut chunks = Vec::new();
    for (i, (s, e)) in windows(spans.len(), cfg).into_iter().enumerate() {
        let text = &main_text[spans[s].0..spans[e - 1].1];
        chunks.push(Chunk::new(format!("{id_prefix}#b{i:03}"), source_url, ChunkKind::Body, text)?);
    }
    if !summary.trim().is_empty() {
        chunks.push(Chunk::new(format!("{id_prefix}#s"), source_url, ChunkKind::Summary, summary.trim())?);
    }
    Ok(chunks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub needs_search: bool,
    pub queries: Vec<String>,
}

impl QueryPlan {
    pub fn no_search() -> Self {
        Self {
            needs_search: false,
            queries: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.needs_search == self.queries.is_empty() {
            return Err(Error::Invalid(format!(
                "query plan has needs_search={} with {} queries",
                self.needs_search,
                self.queries.len()
            )));
        }
        Ok(())
    }
}

pub trait Planner {
    fn plan(&self, question: &str, context: &str) -> Result<QueryPlan>;
}

/// Rule-based planner: self-contained phrasings skip search, everything else
/// searches for the question and its salient phrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatePlanner {
    pub self_contained_patterns: Vec<String>,
    pub max_queries: usize,
}

impl Default for TemplatePlanner {
    fn default() -> Self {
        Self {
            self_contained_patterns: [
                "what color is this",
                "what colour is this",
                "in this image",
                "in this picture",
                "in this photo",
                "what is written",
                "what does this say",
                "read the text",
            ]
            .map(String::from)
            .to_vec(),
            max_queries: 3,
        }
    }
}

fn is_arithmetic(q: &str) -> bool {
    let body = q.trim_start_matches("what is").trim_start_matches("compute").trim();
    body.chars().any(|c| c.is_ascii_digit())
        && body.chars().all(|c| c.is_ascii_digit() || " +-*/x×÷=().?".contains(c))
}

fn is_model_number(word: &str) -> bool {
    word.chars().any(|c| c.is_ascii_digit()) && word.chars().any(char::is_alphabetic)
}

/// Runs of capitalized or model-number words that are either multi-word or
/// contain a model number, lowercased.
pub fn salient_phrases(question: &str) -> Vec<String> {
    let mut phrases = Vec::new();
    let mut run: Vec<&str> = Vec::new();
    let flush = |run: &mut Vec<&str>, out: &mut Vec<String>| {
        if run.len() > 1 || run.iter().any(|w| is_model_number(w)) {
            out.push(run.join(" ").to_lowercase());
        }
        run.clear();
    };
    for raw in question.split_whitespace() {
        let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
        let capitalized = word.chars().next().is_some_and(char::is_uppercase);
        if !word.is_empty() && (capitalized || is_model_number(word)) {
            run.push(word);
        } else {
            flush(&mut run, &mut phrases);
        }
        if raw.ends_with([',', '?', '.', ';', ':', '!']) {
            flush(&mut run, &mut phrases);
        }
    }
    flush(&mut run, &mut phrases);
    phrases
}

impl Planner for TemplatePlanner {
    fn plan(&self, question: &str, _context: &str) -> Result<QueryPlan> {
        let q = normalize_text(question);
        if q.is_empty()
            || is_arithmetic(&q)
            || self.self_contained_patterns.iter().any(|p| q.contains(&normalize_text(p)))
        {
            return Ok(QueryPlan::no_search());
        }
        let mut seen = HashSet::new();
        let queries: Vec<String> = std::iter::once(question.trim().to_string())
            .chain(salient_phrases(question))
            .filter(|s| seen.insert(normalize_text(s)))
            .take(self.max_queries.max(1))
            .collect();
        Ok(QueryPlan {
            needs_search: true,
            queries,
        })
    }
}

/// Runs a planner and checks its output at the boundary.
pub fn plan_queries(question: &str, context: &str, planner: &dyn Planner) -> Result<QueryPlan> {
    let plan = planner.plan(question, context)?;
    plan.validate()?;
    Ok(plan)
}
