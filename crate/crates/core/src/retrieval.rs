//! Lexical retrieval over a shared inverted index.
//!
//! Two scoring functions act as independent perspectives on the same corpus:
//! Okapi BM25 (`PerspectiveA`) and cosine similarity of log-tf·idf vectors
//! (`PerspectiveB`). Both break score ties by ascending document id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{distinct, Corpus};
use crate::error::{Error, Result};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    /// Position of the document in the corpus.
    pub doc: usize,
    pub tf: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedIndex {
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub doc_ids: Vec<String>,
    pub doc_lengths: Vec<usize>,
    pub average_doc_length: f64,
    pub doc_count: usize,
    pub idf_cache: BTreeMap<String, f64>,
    /// Euclidean norm of each document's log-tf·idf vector.
    pub tfidf_norms: Vec<f64>,
}

/// `ln((N − df + 0.5)/(df + 0.5) + 1)`, always positive.
pub fn bm25_idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

fn log_tf(tf: u32) -> f64 {
    1.0 + (tf as f64).ln()
}

pub fn build_index(corpus: &Corpus) -> Result<InvertedIndex> {
    if corpus.doc_count() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let docs = corpus.documents();
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    for (pos, doc) in docs.iter().enumerate() {
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for t in &doc.tokens {
            *tf.entry(t.as_str()).or_default() += 1;
        }
        for (t, count) in tf {
            postings
                .entry(t.to_owned())
                .or_default()
                .push(Posting { doc: pos, tf: count });
        }
    }
    let doc_count = docs.len();
    let idf_cache: BTreeMap<String, f64> = postings
        .iter()
        .map(|(t, p)| (t.clone(), bm25_idf(doc_count, p.len())))
        .collect();

    let mut sq_norms = vec![0.0; doc_count];
    for (t, plist) in &postings {
        let idf = idf_cache[t];
        for p in plist {
            let w = log_tf(p.tf) * idf;
            sq_norms[p.doc] += w * w;
        }
    }

    Ok(InvertedIndex {
        postings,
        doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
        doc_lengths: docs.iter().map(|d| d.tokens.len()).collect(),
        average_doc_length: corpus.average_doc_length(),
        doc_count,
        idf_cache,
        tfidf_norms: sq_norms.into_iter().map(f64::sqrt).collect(),
    })
}

impl InvertedIndex {
    pub fn idf(&self, token: &str) -> Option<f64> {
        self.idf_cache.get(token).copied()
    }

    pub fn df(&self, token: &str) -> usize {
        self.postings.get(token).map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Perspective {
    PerspectiveA,
    PerspectiveB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryVariant {
    Original,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub doc_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
    pub source: Perspective,
    pub query_variant: QueryVariant,
}

/// Orders by descending score, then ascending doc id.
pub(crate) fn by_score_then_id(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

fn top_k(
    index: &InvertedIndex,
    scores: HashMap<usize, f64>,
    k: usize,
    source: Perspective,
    variant: QueryVariant,
) -> Vec<RetrievalResult> {
    let mut scored: Vec<(usize, f64)> = scores.into_iter().collect();
    scored.sort_by(|a, b| {
        by_score_then_id(
            (index.doc_ids[a.0].as_str(), a.1),
            (index.doc_ids[b.0].as_str(), b.1),
        )
    });
    scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (doc, score))| RetrievalResult {
            doc_id: index.doc_ids[doc].clone(),
            score,
            rank: i + 1,
            source,
            query_variant: variant,
        })
        .collect()
}

/// BM25 score contribution of one term for one posting.
pub fn bm25_term(idf: f64, tf: u32, doc_len: usize, avgdl: f64) -> f64 {
    let tf = tf as f64;
    let norm = 1.0 - BM25_B + BM25_B * doc_len as f64 / avgdl;
    idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
}

/// Ranks documents by BM25 over the distinct query tokens. Tokens absent
/// from the index contribute nothing; documents matching no token are not
/// returned.
pub fn bm25_retrieve(
    index: &InvertedIndex,
    query: &[String],
    k: usize,
    variant: QueryVariant,
) -> Result<Vec<RetrievalResult>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut scores: HashMap<usize, f64> = HashMap::new();
    for t in distinct(query) {
        let (Some(plist), Some(idf)) = (index.postings.get(&t), index.idf(&t)) else {
            continue;
        };
        for p in plist {
            *scores.entry(p.doc).or_default() += bm25_term(
                idf,
                p.tf,
                index.doc_lengths[p.doc],
                index.average_doc_length,
            );
        }
    }
    Ok(top_k(index, scores, k, Perspective::PerspectiveA, variant))
}

/// Ranks documents by cosine similarity between log-tf·idf vectors of the
/// query and each document.
pub fn tfidf_cosine_retrieve(
    index: &InvertedIndex,
    query: &[String],
    k: usize,
    variant: QueryVariant,
) -> Result<Vec<RetrievalResult>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut qtf: BTreeMap<&str, u32> = BTreeMap::new();
    for t in query {
        if index.postings.contains_key(t) {
            *qtf.entry(t.as_str()).or_default() += 1;
        }
    }
    if qtf.is_empty() {
        return Ok(Vec::new());
    }
    let mut q_norm_sq = 0.0;
    let mut dots: HashMap<usize, f64> = HashMap::new();
    for (t, tf) in &qtf {
        let idf = index.idf_cache[*t];
        let qw = log_tf(*tf) * idf;
        q_norm_sq += qw * qw;
        for p in &index.postings[*t] {
            *dots.entry(p.doc).or_default() += qw * log_tf(p.tf) * idf;
        }
    }
    let q_norm = q_norm_sq.sqrt();
    let scores = dots
        .into_iter()
        .map(|(d, dot)| (d, dot / (q_norm * index.tfidf_norms[d])))
        .collect();
    Ok(top_k(index, scores, k, Perspective::PerspectiveB, variant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Document};
    use proptest::prelude::*;

    fn toy() -> Corpus {
        // d1: apple apple banana            (len 3)
        // d2: banana cherry                 (len 2)
        // d3: apple cherry cherry date      (len 4)
        Corpus::from_documents(vec![
            Document::new("d1", "", "apple apple banana"),
            Document::new("d2", "", "banana cherry"),
            Document::new("d3", "", "apple cherry cherry date"),
        ])
        .unwrap()
    }

    #[test]
    fn single_doc_df_is_one() {
        let c = Corpus::from_documents(vec![Document::new("x", "", "hello")]).unwrap();
        let idx = build_index(&c).unwrap();
        assert_eq!(idx.df("hello"), 1);
    }

    #[test]
    fn idf_of_ubiquitous_token() {
        let c = Corpus::from_documents(vec![
            Document::new("a", "", "t x"),
            Document::new("b", "", "t y"),
            Document::new("c", "", "t"),
        ])
        .unwrap();
        let idx = build_index(&c).unwrap();
        let expected = (0.5f64 / 3.5 + 1.0).ln();
        assert!((idx.idf("t").unwrap() - expected).abs() < 1e-15);
        assert!(expected > 0.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let c = Corpus::from_documents(vec![]).unwrap();
        assert!(matches!(build_index(&c), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn postings_match_hand_enumeration() {
        let idx = build_index(&toy()).unwrap();
        let p = |t: &str| {
            idx.postings[t]
                .iter()
                .map(|p| (idx.doc_ids[p.doc].as_str(), p.tf))
                .collect::<Vec<_>>()
        };
        assert_eq!(p("apple"), vec![("d1", 2), ("d3", 1)]);
        assert_eq!(p("banana"), vec![("d1", 1), ("d2", 1)]);
        assert_eq!(p("cherry"), vec![("d2", 1), ("d3", 2)]);
        assert_eq!(p("date"), vec![("d3", 1)]);
        assert_eq!(idx.doc_lengths, vec![3, 2, 4]);
        assert_eq!(idx.average_doc_length, 3.0);
    }

    #[test]
    fn bm25_matches_hand_evaluation() {
        let idx = build_index(&toy()).unwrap();
        // N=3, avgdl=3. idf(df=2) = ln(1.5/2.5 + 1) = ln 1.6; idf(df=1) = ln(2.5/1.5 + 1) = ln(8/3).
        let idf2 = 1.6f64.ln();
        let idf1 = (8.0f64 / 3.0).ln();
        let term = |idf: f64, tf: f64, len: f64| {
            idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * len / 3.0))
        };
        let q = tokenize("apple date");
        let res = bm25_retrieve(&idx, &q, 10, QueryVariant::Original).unwrap();
        let d1 = term(idf2, 2.0, 3.0);
        let d3 = term(idf2, 1.0, 4.0) + term(idf1, 1.0, 4.0);
        assert_eq!(res.len(), 2);
        assert_eq!(res[0].doc_id, "d3");
        assert!((res[0].score - d3).abs() < 1e-9);
        assert_eq!(res[1].doc_id, "d1");
        assert!((res[1].score - d1).abs() < 1e-9);
        assert!(res.iter().all(|r| r.source == Perspective::PerspectiveA));
    }

    #[test]
    fn absent_query_token_contributes_nothing() {
        let idx = build_index(&toy()).unwrap();
        let a = bm25_retrieve(&idx, &tokenize("banana"), 10, QueryVariant::Original).unwrap();
        let b = bm25_retrieve(&idx, &tokenize("banana zebra"), 10, QueryVariant::Original).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_doc_single_token_ranks_first() {
        let c = Corpus::from_documents(vec![Document::new("only", "", "needle hay")]).unwrap();
        let idx = build_index(&c).unwrap();
        let r = bm25_retrieve(&idx, &tokenize("needle"), 3, QueryVariant::Original).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].doc_id.as_str(), r[0].rank), ("only", 1));
    }

    #[test]
    fn tfidf_matches_hand_cosines() {
        let idx = build_index(&toy()).unwrap();
        let idf2 = 1.6f64.ln();
        let idf1 = (8.0f64 / 3.0).ln();
        let l2 = 1.0 + 2.0f64.ln();
        // document vectors over (apple, banana, cherry, date)
        let d1 = [l2 * idf2, idf2, 0.0, 0.0];
        let d2 = [0.0, idf2, idf2, 0.0];
        let d3 = [idf2, 0.0, l2 * idf2, idf1];
        let q = [0.0, idf2, idf2, 0.0]; // "banana cherry"
        let cos = |a: &[f64; 4], b: &[f64; 4]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let res =
            tfidf_cosine_retrieve(&idx, &tokenize("banana cherry"), 10, QueryVariant::Original)
                .unwrap();
        let got: HashMap<_, _> = res.iter().map(|r| (r.doc_id.as_str(), r.score)).collect();
        assert!((got["d1"] - cos(&q, &d1)).abs() < 1e-9);
        assert!((got["d2"] - cos(&q, &d2)).abs() < 1e-9);
        assert!((got["d3"] - cos(&q, &d3)).abs() < 1e-9);
        assert_eq!(res[0].doc_id, "d2");
        assert!((res[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tfidf_orthogonal_and_unindexed_queries() {
        let c = Corpus::from_documents(vec![
            Document::new("a", "", "x y"),
            Document::new("b", "", "z"),
        ])
        .unwrap();
        let idx = build_index(&c).unwrap();
        let r = tfidf_cosine_retrieve(&idx, &tokenize("z"), 5, QueryVariant::Original).unwrap();
        assert!(r.iter().all(|r| r.doc_id != "a"));
        assert!(
            tfidf_cosine_retrieve(&idx, &tokenize("nothing here"), 5, QueryVariant::Original)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn ties_break_by_doc_id() {
        let c = Corpus::from_documents(vec![
            Document::new("b", "", "same words"),
            Document::new("a", "", "same words"),
        ])
        .unwrap();
        let idx = build_index(&c).unwrap();
        for r in [
            bm25_retrieve(&idx, &tokenize("same"), 2, QueryVariant::Original).unwrap(),
            tfidf_cosine_retrieve(&idx, &tokenize("same"), 2, QueryVariant::Original).unwrap(),
        ] {
            assert_eq!(r[0].doc_id, "a");
            assert_eq!(r[1].doc_id, "b");
        }
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<u8>>> {
        proptest::collection::vec(proptest::collection::vec(0u8..8, 1..12), 1..10)
    }

    fn build(docs: &[Vec<u8>]) -> Corpus {
        Corpus::from_documents(
            docs.iter()
                .enumerate()
                .map(|(i, toks)| {
                    let text: Vec<String> = toks.iter().map(|t| format!("w{t}")).collect();
                    Document::new(format!("d{i:03}"), "", text.join(" "))
                })
                .collect(),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn ranks_and_scores_are_consistent(docs in corpus_strategy(), q in proptest::collection::vec(0u8..10, 1..4), k in 1usize..8) {
            let idx = build_index(&build(&docs)).unwrap();
            let q: Vec<String> = q.iter().map(|t| format!("w{t}")).collect();
            for res in [
                bm25_retrieve(&idx, &q, k, QueryVariant::Original).unwrap(),
                tfidf_cosine_retrieve(&idx, &q, k, QueryVariant::Original).unwrap(),
            ] {
                prop_assert!(res.len() <= k);
                for (i, r) in res.iter().enumerate() {
                    prop_assert_eq!(r.rank, i + 1);
                    if i > 0 {
                        prop_assert!(res[i - 1].score >= r.score);
                    }
                }
            }
        }

        #[test]
        fn bm25_term_is_monotone_in_tf(tf in 1u32..50, len in 1usize..200, avgdl in 1.0f64..100.0, idf in 0.01f64..5.0) {
            prop_assert!(bm25_term(idf, tf + 1, len, avgdl) >= bm25_term(idf, tf, len, avgdl));
        }
    }
}
