//! Search → extract → segment → index → coarse rank → rerank.

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::fnv1a;
use crate::eval::normalize_text;
use crate::ingest::{extract_main_content, mock_search, normalize_query, segment, RawPage, SearchFixture, SegmentConfig};
use crate::retrieval::{coarse_rank, rerank, Chunk, Embedder, LexicalIndex, Reranker, RetrievalConfig, ScoredChunk};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub pages_per_query: usize,
    pub hard_negative_rate: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            pages_per_query: 5,
            hard_negative_rate: 0.5,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.pages_per_query < 1 {
            return Err(Error::config(format!("{prefix}.pages_per_query"), "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_rate) {
            return Err(Error::config(format!("{prefix}.hard_negative_rate"), "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Stable page id derived from the URL.
pub fn page_id(url: &str) -> String {
    format!("p{:016x}", fnv1a(url.as_bytes()))
}

/// Per-query search stream, independent of the order queries are run in.
pub fn search_rng(seed: u64, query: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(normalize_query(query).as_bytes()))
}

pub fn page_chunks(page: &RawPage, seg: &SegmentConfig) -> Result<Vec<Chunk>> {
    let main = extract_main_content(&page.html);
    segment(&page_id(&page.url), &page.url, &main, &page.summary(), seg)
}

fn chunk_pages(pages: &[RawPage], seg: &SegmentConfig, seen: &mut HashSet<String>, out: &mut Vec<Chunk>) -> Result<()> {
    for p in pages {
        if seen.insert(p.url.clone()) {
            out.extend(page_chunks(p, seg)?);
        }
    }
    Ok(())
}

/// Chunks of every page returned for every fixture query, each page once.
pub fn build_corpus(fixture: &SearchFixture, search: &SearchConfig, seg: &SegmentConfig, seed: u64) -> Result<Vec<Chunk>> {
    let mut seen = HashSet::new();
    let mut chunks = Vec::new();
    for rec in fixture.queries.values() {
        let pages = mock_search(
            &rec.query,
            fixture,
            search.pages_per_query,
            search.hard_negative_rate,
            &mut search_rng(seed, &rec.query),
        )?;
        chunk_pages(&pages, seg, &mut seen, &mut chunks)?;
    }
    Ok(chunks)
}

/// Coarse-ranks `chunks` for `query` and reranks the survivors.
pub fn retrieve(
    query: &str,
    chunks: &[Chunk],
    index: &LexicalIndex,
    embedder: &dyn Embedder,
    reranker: &dyn Reranker,
    cfg: &RetrievalConfig,
    strict: bool,
) -> Result<Vec<ScoredChunk>> {
    let coarse = coarse_rank(query, chunks, index, embedder, cfg)?;
    let texts: HashMap<String, String> = chunks.iter().map(|c| (c.chunk_id.clone(), c.text.clone())).collect();
    rerank(query, coarse, &texts, reranker, cfg.final_k, strict)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRun {
    pub query: String,
    pub pages: Vec<String>,
    pub results: Vec<ScoredChunk>,
    /// Whether a result contains the fixture's planted answer, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit: Option<bool>,
}

/// The per-query flow: search the fixture, chunk the returned pages, index
/// them and rank.
#[allow(clippy::too_many_arguments)]
pub fn run_query(
    query: &str,
    fixture: &SearchFixture,
    search: &SearchConfig,
    seg: &SegmentConfig,
    cfg: &RetrievalConfig,
    embedder: &dyn Embedder,
    reranker: &dyn Reranker,
    strict: bool,
    seed: u64,
) -> Result<QueryRun> {
    let pages = mock_search(
        query,
        fixture,
        search.pages_per_query,
        search.hard_negative_rate,
        &mut search_rng(seed, query),
    )?;
    let mut chunks = Vec::new();
    chunk_pages(&pages, seg, &mut HashSet::new(), &mut chunks)?;
    let index = LexicalIndex::build(&chunks)?;
    let results = retrieve(query, &chunks, &index, embedder, reranker, cfg, strict)?;
    let hit = fixture.get(query).and_then(|r| r.answer.as_deref()).map(|answer| {
        let texts: HashMap<&str, &str> = chunks.iter().map(|c| (c.chunk_id.as_str(), c.text.as_str())).collect();
        results.iter().any(|r| contains_answer(texts[r.chunk_id.as_str()], answer))
    });
    Ok(QueryRun {
        query: query.to_string(),
        pages: pages.into_iter().map(|p| p.url).collect(),
        results,
        hit,
    })
}

pub fn contains_answer(text: &str, answer: &str) -> bool {
    normalize_text(text).contains(&normalize_text(answer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{FixtureQuery, PageFlag};
    use crate::retrieval::{HashedTrigramEmbedder, JaccardReranker};
    use std::collections::BTreeMap;

    fn page(url: &str, html: &str, flag: PageFlag) -> RawPage {
        RawPage {
            url: url.into(),
            title: format!("Title {url}"),
            snippet: String::new(),
            html: html.into(),
            last_updated: "2024-01-01".into(),
            flag,
        }
    }

    fn fixture() -> SearchFixture {
        let rec = FixtureQuery {
            query: "Who is the CEO of BMW?".into(),
            pages: vec![
                page("a", "<p>The CEO of BMW is Oliver Zipse, who took over in 2019.</p>", PageFlag::Relevant),
                page("b", "<p>BMW builds cars in Munich.</p>", PageFlag::Relevant),
            ],
            answer: Some("Oliver Zipse".into()),
        };
        SearchFixture {
            queries: BTreeMap::from([(normalize_query(&rec.query), rec)]),
            hard_negative_pool: (0..4)
                .map(|i| page(&format!("n{i}"), "<p>Banana bread needs ripe bananas.</p>", PageFlag::HardNegative))
                .collect(),
        }
    }

    #[test]
    fn run_query_finds_planted_answer() {
        let f = fixture();
        let run = run_query(
            "Who is the CEO of BMW?",
            &f,
            &SearchConfig::default(),
            &SegmentConfig::default(),
            &RetrievalConfig::default(),
            &HashedTrigramEmbedder::default(),
            &JaccardReranker,
            false,
            1,
        )
        .unwrap();
        assert_eq!(run.hit, Some(true));
        assert!(run.results.len() <= 5);
    }

    #[test]
    fn corpus_is_deterministic_and_deduplicated() {
        let f = fixture();
        let a = build_corpus(&f, &SearchConfig::default(), &SegmentConfig::default(), 3).unwrap();
        assert_eq!(a, build_corpus(&f, &SearchConfig::default(), &SegmentConfig::default(), 3).unwrap());
        let ids: HashSet<_> = a.iter().map(|c| &c.chunk_id).collect();
        assert_eq!(ids.len(), a.len());
    }

    #[test]
    fn unknown_query_ranks_negatives() {
        let run = run_query(
            "something else entirely",
            &fixture(),
            &SearchConfig::default(),
            &SegmentConfig::default(),
            &RetrievalConfig::default(),
            &HashedTrigramEmbedder::default(),
            &JaccardReranker,
            false,
            1,
        )
        .unwrap();
        assert_eq!(run.pages.len(), 4);
        assert!(run.hit.is_none());
        assert!(!run.results.is_empty());
    }
}
