//! Statistical properties of retrieval, fusion and reading on the synthetic
//! corpus, plus whole-pipeline recomputation.

use calibrank::corpus::{write_corpus, write_queries};
use calibrank::fusion::{extractive_read, merge_contexts, ContextSplit};
use calibrank::metrics::recall_at_k;
use calibrank::pipeline::{retrieve, run_pipeline, verify_report, PipelineConfig};
use calibrank::retrieval::{build_index, RetrievalResult};
use calibrank::synth::generate_synthetic_dataset;

fn ids(list: &[RetrievalResult]) -> Vec<String> {
    list.iter().map(|r| r.doc_id.clone()).collect()
}

#[test]
fn perspectives_disagree_on_some_top1() {
    let mut disagreements = 0;
    for seed in 0..5 {
        let (corpus, queries) = generate_synthetic_dataset(seed, 500, 100).unwrap();
        let index = build_index(&corpus).unwrap();
        for q in &queries {
            let lists = retrieve(&index, q, 10).unwrap();
            if lists.bm25.first().map(|r| &r.doc_id) != lists.tfidf.first().map(|r| &r.doc_id) {
                disagreements += 1;
            }
        }
    }
    assert!(disagreements > 0);
}

#[test]
fn merged_recall_is_at_least_either_perspective() {
    let split: ContextSplit = "3;2".parse().unwrap();
    for seed in 0..3 {
        let (corpus, queries) = generate_synthetic_dataset(seed, 500, 100).unwrap();
        let index = build_index(&corpus).unwrap();
        let (mut a, mut b, mut m) = (0.0, 0.0, 0.0);
        for q in &queries {
            let lists = retrieve(&index, q, 10).unwrap();
            let merged = merge_contexts(&split, &[lists.bm25.clone(), lists.tfidf.clone()]).unwrap();
            a += recall_at_k(&ids(&lists.bm25), &q.gold_doc_ids, 5).unwrap();
            b += recall_at_k(&ids(&lists.tfidf), &q.gold_doc_ids, 5).unwrap();
            m += recall_at_k(&ids(&merged), &q.gold_doc_ids, 5).unwrap();
        }
        assert!(m >= a.max(b), "seed {seed}: merged {m} vs {a}/{b}");
    }
}

#[test]
fn reader_extracts_answer_from_gold_context() {
    let (corpus, queries) = generate_synthetic_dataset(3, 200, 40).unwrap();
    let index = build_index(&corpus).unwrap();
    for q in &queries {
        let gold = corpus.get(&q.gold_doc_ids[0]).unwrap();
        assert_eq!(extractive_read(&[gold], &q.tokens(), &index), q.answers[0]);
    }
}

#[test]
fn full_scale_report_recomputes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, queries) = generate_synthetic_dataset(9, 500, 100).unwrap();
    write_corpus(dir.path().join("corpus.jsonl"), &corpus).unwrap();
    write_queries(dir.path().join("queries.jsonl"), &queries).unwrap();
    let cfg = PipelineConfig {
        corpus: dir.path().join("corpus.jsonl"),
        queries: dir.path().join("queries.jsonl"),
        output: Some(dir.path().join("report.json")),
        seed: 9,
        ..PipelineConfig::default()
    };
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.parse_records().unwrap().len(), 50);
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let reloaded = serde_json::from_str(&text).unwrap();
    assert_eq!(verify_report(&reloaded).unwrap(), report.aggregates.unwrap());
}
