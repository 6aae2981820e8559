use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use truthqa_core::retrieval::{
    bm25_score, fuse_scores, tfidf_cosine, Bm25Params, Chunk, ChunkKind, FusionWeights, LexicalIndex, ScoredChunk,
};

const VOCAB: &[&str] = &["alpha", "beta", "gamma", "delta", "river", "bridge", "k7", "2011", "lake", "orrin"];

fn corpus() -> impl Strategy<Value = Vec<Vec<&'static str>>> {
    prop::collection::vec(prop::collection::vec(prop::sample::select(VOCAB), 1..14), 1..9)
}

fn query() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(VOCAB).prop_map(String::from), 1..6)
}

fn chunks(docs: &[Vec<&str>]) -> Vec<Chunk> {
    docs.iter()
        .enumerate()
        .map(|(i, d)| Chunk::new(format!("d{i}"), "https://example.org", ChunkKind::Body, d.join(" ")).unwrap())
        .collect()
}

fn counts<'a>(doc: &[&'a str]) -> BTreeMap<&'a str, f64> {
    let mut m = BTreeMap::new();
    for t in doc {
        *m.entry(*t).or_insert(0.0) += 1.0;
    }
    m
}

fn df(docs: &[Vec<&str>], term: &str) -> f64 {
    docs.iter().filter(|d| d.contains(&term)).count() as f64
}

fn brute_bm25(docs: &[Vec<&str>], doc: usize, query: &[String], k1: f64, b: f64) -> f64 {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
    let dl = docs[doc].len() as f64;
    let terms: BTreeSet<&str> = query.iter().map(String::as_str).collect();
    let mut score = 0.0;
    for t in terms {
        let tf = docs[doc].iter().filter(|w| **w == t).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let d = df(docs, t);
        let idf = (1.0 + (n - d + 0.5) / (d + 0.5)).ln();
        score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
    }
    score
}

fn brute_tfidf(docs: &[Vec<&str>], doc: usize, query: &[String]) -> f64 {
    let n = docs.len() as f64;
    let weight = |tf: f64, term: &str| (1.0 + tf.ln()) * (1.0 + n / df(docs, term)).ln();
    let q: Vec<&str> = query.iter().map(String::as_str).filter(|t| df(docs, t) > 0.0).collect();
    let qv: BTreeMap<&str, f64> = counts(&q).into_iter().map(|(t, c)| (t, weight(c, t))).collect();
    let dv: BTreeMap<&str, f64> = counts(&docs[doc]).into_iter().map(|(t, c)| (t, weight(c, t))).collect();
    let dot: f64 = qv.iter().map(|(t, w)| w * dv.get(t).copied().unwrap_or(0.0)).sum();
    let qn = qv.values().map(|w| w * w).sum::<f64>().sqrt();
    let dn = dv.values().map(|w| w * w).sum::<f64>().sqrt();
    if qn == 0.0 || dn == 0.0 {
        0.0
    } else {
        dot / (qn * dn)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bm25_matches_brute_force(docs in corpus(), q in query(), k1 in 0.1f64..3.0, b in 0.0f64..=1.0) {
        let index = LexicalIndex::build(&chunks(&docs)).unwrap();
        let params = Bm25Params { k1, b };
        for i in 0..docs.len() {
            let got = bm25_score(&q, &format!("d{i}"), &index, &params).unwrap();
            let want = brute_bm25(&docs, i, &q, k1, b);
            prop_assert!((got - want).abs() < 1e-9, "doc {i}: {got} vs {want}");
        }
    }

    #[test]
    fn tfidf_matches_brute_force(docs in corpus(), q in query()) {
        let index = LexicalIndex::build(&chunks(&docs)).unwrap();
        for i in 0..docs.len() {
            let got = tfidf_cosine(&q, &format!("d{i}"), &index).unwrap();
            let want = brute_tfidf(&docs, i, &q);
            prop_assert!((got - want).abs() < 1e-9, "doc {i}: {got} vs {want}");
        }
    }

    #[test]
    fn index_round_trips_through_json(docs in corpus(), q in query()) {
        let index = LexicalIndex::build(&chunks(&docs)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        index.save(&path).unwrap();
        let loaded = LexicalIndex::load(&path).unwrap();
        let params = Bm25Params::default();
        for i in 0..docs.len() {
            let id = format!("d{i}");
            prop_assert_eq!(
                bm25_score(&q, &id, &index, &params).unwrap(),
                bm25_score(&q, &id, &loaded, &params).unwrap()
            );
        }
    }
}

fn scored(rows: &[(f64, f64, f64)]) -> Vec<ScoredChunk> {
    rows.iter()
        .enumerate()
        .map(|(i, &(b, t, e))| ScoredChunk::new(format!("c{i:02}"), b, t, e))
        .collect()
}

fn order(c: Vec<ScoredChunk>) -> Vec<String> {
    fuse_scores(c, &FusionWeights::default()).into_iter().map(|c| c.chunk_id).collect()
}

fn rescale(rows: &[(f64, f64, f64)], which: usize, a: f64, c: f64) -> Vec<(f64, f64, f64)> {
    rows.iter()
        .map(|&(b, t, e)| match which {
            0 => (a * b + c, t, e),
            1 => (b, a * t + c, e),
            _ => (b, t, a * e + c),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fusion_order_invariant_under_affine_rescaling(
        rows in prop::collection::vec((0.0f64..20.0, 0.0f64..1.0, -1.0f64..1.0), 1..30),
        which in 0usize..3,
        a in 1e-3f64..1e3,
        c in -100.0f64..100.0,
    ) {
        prop_assert_eq!(order(scored(&rows)), order(scored(&rescale(&rows, which, a, c))));
    }

    #[test]
    fn fusion_invariance_preserves_exact_ties(
        rows in prop::collection::vec((0u8..4, 0u8..4, 0u8..4), 1..30),
        which in 0usize..3,
        exp in -4i32..5,
        c in -8i32..8,
    ) {
        // dyadic scales and integer shifts keep every rescaled value exact
        let rows: Vec<(f64, f64, f64)> = rows.iter().map(|&(b, t, e)| (b as f64, t as f64 / 4.0, e as f64 / 4.0 - 0.5)).collect();
        let a = 2f64.powi(exp);
        prop_assert_eq!(order(scored(&rows)), order(scored(&rescale(&rows, which, a, c as f64))));
    }
}

#[test]
fn fused_scores_stay_in_unit_interval() {
    let out = fuse_scores(scored(&[(3.0, 0.2, -0.4), (1.0, 0.9, 0.8), (2.0, 0.5, 0.0)]), &FusionWeights::default());
    assert!(out.iter().all(|c| (0.0..=1.0).contains(&c.fused)));
    let constant = fuse_scores(scored(&[(1.0, 1.0, 1.0), (1.0, 1.0, 1.0)]), &FusionWeights::default());
    assert!(constant.iter().all(|c| c.fused == 0.5));
    assert_eq!(constant[0].chunk_id, "c00");
}
