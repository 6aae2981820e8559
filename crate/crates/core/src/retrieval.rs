//! Lexical and dense scoring, score fusion for coarse ranking, and reranking.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::fnv1a;
use crate::{Error, Result};

/// Lowercased alphanumeric runs. Unicode-aware, no stemming or stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    token_spans(text).into_iter().map(|(s, e)| text[s..e].to_lowercase()).collect()
}

/// Byte ranges of the tokens produced by [`tokenize`].
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkKind {
    Body,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chunk {
    pub chunk_id: String,
    pub source_url: String,
    pub kind: ChunkKind,
    pub text: String,
    pub token_count: usize,
}

impl Chunk {
    pub fn new(chunk_id: impl Into<String>, source_url: impl Into<String>, kind: ChunkKind, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let chunk_id = chunk_id.into();
        let token_count = tokenize(&text).len();
        if text.trim().is_empty() {
            return Err(Error::Invalid(format!("chunk {chunk_id} has empty text")));
        }
        Ok(Self {
            chunk_id,
            source_url: source_url.into(),
            kind,
            text,
            token_count,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::config(format!("{prefix}.k1"), "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::config(format!("{prefix}.b"), "must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DocStats {
    len: usize,
    tf: BTreeMap<String, u32>,
}

pub const INDEX_FORMAT_VERSION: u32 = 1;

/// Term statistics over a fixed chunk set. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalIndex {
    version: u32,
    n: usize,
    avgdl: f64,
    df: BTreeMap<String, usize>,
    docs: BTreeMap<String, DocStats>,
}

impl LexicalIndex {
    pub fn build(chunks: &[Chunk]) -> Result<Self> {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut docs = BTreeMap::new();
        let mut total = 0usize;
        for c in chunks {
            let tokens = tokenize(&c.text);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            total += tokens.len();
            let stats = DocStats { len: tokens.len(), tf };
            if docs.insert(c.chunk_id.clone(), stats).is_some() {
                return Err(Error::Invalid(format!("duplicate chunk id {}", c.chunk_id)));
            }
        }
        let n = docs.len();
        Ok(Self {
            version: INDEX_FORMAT_VERSION,
            n,
            avgdl: if n == 0 { 0.0 } else { total as f64 / n as f64 },
            df,
            docs,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.docs.contains_key(chunk_id)
    }

    pub fn tf(&self, chunk_id: &str, term: &str) -> Result<u32> {
        Ok(self.doc(chunk_id)?.tf.get(term).copied().unwrap_or(0))
    }

    pub fn doc_len(&self, chunk_id: &str) -> Result<usize> {
        Ok(self.doc(chunk_id)?.len)
    }

    fn doc(&self, chunk_id: &str) -> Result<&DocStats> {
        self.docs.get(chunk_id).ok_or_else(|| Error::UnindexedChunk(chunk_id.to_string()))
    }

    /// Okapi idf with the +1 inside the log, so it is never negative.
    pub fn bm25_idf(&self, term: &str) -> f64 {
        let df = self.df(term) as f64;
        (1.0 + (self.n as f64 - df + 0.5) / (df + 0.5)).ln()
    }

    /// `ln(1 + N/df)`, or `None` for terms absent from the corpus.
    pub fn tfidf_idf(&self, term: &str) -> Option<f64> {
        match self.df(term) {
            0 => None,
            df => Some((1.0 + self.n as f64 / df as f64).ln()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::jsonl::write_file(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let index: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::data(path, e.line(), e.to_string()))?;
        if index.version != INDEX_FORMAT_VERSION {
            return Err(Error::data(
                path,
                0,
                format!("index format version {} is not supported (expected {INDEX_FORMAT_VERSION})", index.version),
            ));
        }
        Ok(index)
    }
}

fn distinct(query: &[String]) -> BTreeSet<&str> {
    query.iter().map(String::as_str).collect()
}

/// Okapi BM25. Repeated query terms count once.
pub fn bm25_score(query: &[String], chunk_id: &str, index: &LexicalIndex, params: &Bm25Params) -> Result<f64> {
    let doc = index.doc(chunk_id)?;
    let norm = if index.avgdl > 0.0 {
        1.0 - params.b + params.b * doc.len as f64 / index.avgdl
    } else {
        1.0
    };
    let mut score = 0.0;
    for term in distinct(query) {
        let Some(&tf) = doc.tf.get(term) else { continue };
        let tf = tf as f64;
        score += index.bm25_idf(term) * tf * (params.k1 + 1.0) / (tf + params.k1 * norm);
    }
    Ok(score)
}

fn tf_weight(tf: u32) -> f64 {
    1.0 + (tf as f64).ln()
}

/// Cosine between `(1 + ln tf)·ln(1 + N/df)` vectors. Query terms that occur
/// nowhere in the corpus are dropped.
pub fn tfidf_cosine(query: &[String], chunk_id: &str, index: &LexicalIndex) -> Result<f64> {
    let doc = index.doc(chunk_id)?;
    let mut qtf: BTreeMap<&str, u32> = BTreeMap::new();
    for t in query {
        *qtf.entry(t.as_str()).or_default() += 1;
    }
    let mut dot = 0.0;
    let mut qn = 0.0;
    for (term, &tf) in &qtf {
        let Some(idf) = index.tfidf_idf(term) else { continue };
        let qw = tf_weight(tf) * idf;
        qn += qw * qw;
        if let Some(&dtf) = doc.tf.get(*term) {
            dot += qw * tf_weight(dtf) * idf;
        }
    }
    let dn: f64 = doc
        .tf
        .iter()
        .map(|(term, &tf)| {
            let w = tf_weight(tf) * index.tfidf_idf(term).unwrap_or(0.0);
            w * w
        })
        .sum();
    if qn == 0.0 || dn == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (qn.sqrt() * dn.sqrt())).clamp(0.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Hashed character-trigram counts, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedTrigramEmbedder {
    pub dim: usize,
}

impl Default for HashedTrigramEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl HashedTrigramEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return v;
        }
        let padded: Vec<char> = format!(" {} ", tokens.join(" ")).chars().collect();
        let mut buf = [0u8; 12];
        for w in padded.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            v[(fnv1a(&buf[..len]) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl Embedder for HashedTrigramEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn embed_similarity(query: &str, text: &str, embedder: &dyn Embedder) -> Result<f64> {
    let v = embedder.embed(&[query.to_string(), text.to_string()])?;
    match v.as_slice() {
        [a, b] if a.len() == b.len() => Ok(cosine(a, b)),
        _ => Err(Error::service("embedder", "malformed embedding response")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: String,
    pub bm25: f64,
    pub tfidf: f64,
    pub embed: f64,
    pub fused: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank: Option<f64>,
}

impl ScoredChunk {
    pub fn new(chunk_id: impl Into<String>, bm25: f64, tfidf: f64, embed: f64) -> Self {
        Self {
            chunk_id: chunk_id.into(),
            bm25,
            tfidf,
            embed,
            fused: 0.0,
            rerank: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionWeights {
    pub w_embed: f64,
    pub w_bm25: f64,
    pub w_tfidf: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            w_embed: 0.5,
            w_bm25: 0.3,
            w_tfidf: 0.2,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, w) in [("w_embed", self.w_embed), ("w_bm25", self.w_bm25), ("w_tfidf", self.w_tfidf)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("{prefix}.{name}"), "must be >= 0"));
            }
        }
        if self.w_embed + self.w_bm25 + self.w_tfidf <= 0.0 {
            return Err(Error::config(prefix.to_string(), "weights must sum to > 0"));
        }
        Ok(())
    }
}

fn min_max(values: Vec<f64>) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .into_iter()
        .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 })
        .collect()
}

fn rank_order(a: &ScoredChunk, b: &ScoredChunk, key: fn(&ScoredChunk) -> f64) -> std::cmp::Ordering {
    key(b).total_cmp(&key(a)).then_with(|| a.chunk_id.cmp(&b.chunk_id))
}

/// Min-max normalizes each scorer over the candidate set, takes the weighted
/// mean and sorts descending with ascending `chunk_id` as tie-break.
pub fn fuse_scores(mut candidates: Vec<ScoredChunk>, weights: &FusionWeights) -> Vec<ScoredChunk> {
    let nb = min_max(candidates.iter().map(|c| c.bm25).collect());
    let nt = min_max(candidates.iter().map(|c| c.tfidf).collect());
    let ne = min_max(candidates.iter().map(|c| c.embed).collect());
    let total = weights.w_embed + weights.w_bm25 + weights.w_tfidf;
    for (i, c) in candidates.iter_mut().enumerate() {
        let f = (weights.w_embed * ne[i] + weights.w_bm25 * nb[i] + weights.w_tfidf * nt[i]) / total;
        c.fused = f.clamp(0.0, 1.0);
    }
    candidates.sort_by(|a, b| rank_order(a, b, |c| c.fused));
    candidates
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub bm25: Bm25Params,
    pub fusion: FusionWeights,
    pub coarse_m: usize,
    pub final_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            bm25: Bm25Params::default(),
            fusion: FusionWeights::default(),
            coarse_m: 20,
            final_k: 5,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        self.bm25.validate(&format!("{prefix}.bm25"))?;
        self.fusion.validate(&format!("{prefix}.fusion"))?;
        if self.coarse_m < 1 {
            return Err(Error::config(format!("{prefix}.coarse_m"), "must be >= 1"));
        }
        if self.final_k < 1 || self.final_k > self.coarse_m {
            return Err(Error::config(format!("{prefix}.final_k"), "must be in [1, coarse_m]"));
        }
        Ok(())
    }
}

/// Scores every chunk with all three scorers, fuses, and keeps the top `m`.
pub fn coarse_rank(
    query: &str,
    chunks: &[Chunk],
    index: &LexicalIndex,
    embedder: &dyn Embedder,
    cfg: &RetrievalConfig,
) -> Result<Vec<ScoredChunk>> {
    if cfg.coarse_m < 1 {
        return Err(Error::Invalid("coarse_m must be >= 1".into()));
    }
    if chunks.is_empty() {
        return Ok(Vec::new());
    }
    let q = tokenize(query);
    let mut texts = Vec::with_capacity(chunks.len() + 1);
    texts.push(query.to_string());
    texts.extend(chunks.iter().map(|c| c.text.clone()));
    let vectors = embedder.embed(&texts).map_err(|e| match e {
        Error::Service { message, .. } => Error::service(format!("embedding query {query:?}"), message),
        other => other,
    })?;
    if vectors.len() != texts.len() {
        return Err(Error::service(
            format!("embedding query {query:?}"),
            format!("expected {} vectors, got {}", texts.len(), vectors.len()),
        ));
    }
    let mut scored = Vec::with_capacity(chunks.len());
    for (c, v) in chunks.iter().zip(&vectors[1..]) {
        scored.push(ScoredChunk::new(
            c.chunk_id.clone(),
            bm25_score(&q, &c.chunk_id, index, &cfg.bm25)?,
            tfidf_cosine(&q, &c.chunk_id, index)?,
            cosine(&vectors[0], v),
        ));
    }
    let mut fused = fuse_scores(scored, &cfg.fusion);
    fused.truncate(cfg.coarse_m);
    Ok(fused)
}

pub trait Reranker: Send + Sync {
    /// One relevance score per candidate text, in input order.
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>>;
}

/// Token-set Jaccard overlap.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardReranker;

impl Reranker for JaccardReranker {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let q: BTreeSet<String> = tokenize(query).into_iter().collect();
        Ok(candidates
            .iter()
            .map(|c| {
                let d: BTreeSet<String> = tokenize(c).into_iter().collect();
                let union = q.union(&d).count();
                if union == 0 {
                    0.0
                } else {
                    q.intersection(&d).count() as f64 / union as f64
                }
            })
            .collect())
    }
}

/// Reorders the coarse candidates by reranker score and keeps `k`.
///
/// On reranker failure the coarse order is kept (with a warning) unless
/// `strict` is set.
pub fn rerank(
    query: &str,
    top_m: Vec<ScoredChunk>,
    texts: &HashMap<String, String>,
    reranker: &dyn Reranker,
    k: usize,
    strict: bool,
) -> Result<Vec<ScoredChunk>> {
    let mut candidate_texts = Vec::with_capacity(top_m.len());
    for c in &top_m {
        let text = texts.get(&c.chunk_id).ok_or_else(|| Error::UnindexedChunk(c.chunk_id.clone()))?;
        candidate_texts.push(text.clone());
    }
    let scores = reranker.score(query, &candidate_texts).and_then(|s| {
        if s.len() == top_m.len() && s.iter().all(|v| v.is_finite()) {
            Ok(s)
        } else {
            Err(Error::service("reranker", format!("expected {} finite scores, got {}", top_m.len(), s.len())))
        }
    });
    let mut out = match scores {
        Ok(scores) => {
            let mut out: Vec<ScoredChunk> = top_m
                .into_iter()
                .zip(scores)
                .map(|(mut c, s)| {
                    c.rerank = Some(s);
                    c
                })
                .collect();
            out.sort_by(|a, b| rank_order(a, b, |c| c.rerank.unwrap_or(f64::NEG_INFINITY)));
            out
        }
        Err(e) if strict => return Err(e),
        Err(e) => {
            log::warn!("reranker failed for query {query:?}, keeping coarse order: {e}");
            top_m
        }
    };
    out.truncate(k);
    Ok(out)
}
