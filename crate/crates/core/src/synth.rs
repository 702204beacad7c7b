//! Seeded synthetic corpora.
//!
//! Words are pronounceable pseudo-words built from syllables, so they never
//! collide with the normalizer's articles and every token is distinct from
//! punctuation-stripped variants.
//!
//! [`generate_synthetic_dataset`] builds a relation-lookup task. Each query
//! names an entity (two tokens) and a relation through a query cue word that
//! never appears in the corpus. The gold document holds the entity, a
//! document-side cue of the same relation and a unique answer token. Hard
//! negatives share the entity but express a different relation with their own
//! answer, so lexical retrieval cannot separate them. Only a reranker that
//! learns which query cue goes with which document cue can.
//!
//! [`generate_overlap_dataset`] builds a corpus for explainer reranking: the
//! gold document of each evaluation query gathers the marker tokens spread
//! over several partial matches, but also carries tokens the reranker learns
//! to penalize.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document, Query};
use crate::error::{Error, Result};

const SYLLABLES: &[&str] = &[
    "ba", "ko", "ri", "mun", "te", "sa", "lo", "vi", "dra", "pe", "zu", "nal", "fo", "ki", "gor",
    "shi", "ta", "mel", "qua", "ro", "bex", "di", "pra", "ul", "ven", "yo", "cha", "si", "trem",
    "ga",
];

struct WordGen {
    used: HashSet<String>,
}

impl WordGen {
    fn new() -> Self {
        WordGen {
            used: HashSet::new(),
        }
    }

    fn word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let n = rng.random_range(2..=3);
            let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word(rng)).collect()
    }
}

/// Shape of the relation-lookup corpus. The defaults keep the relation signal
/// learnable from about fifty training queries; more relations, cues or
/// distractors let the reranker fit per-document tokens instead.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub relations: usize,
    pub doc_cues_per_relation: usize,
    pub hard_negatives: usize,
    pub distractor_pool: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            relations: 4,
            doc_cues_per_relation: 1,
            hard_negatives: 3,
            distractor_pool: 60,
            min_distractors: 1,
            max_distractors: 1,
        }
    }
}

fn distractors(rng: &mut ChaCha8Rng, pool: &[String], opts: &SynthOptions) -> Vec<String> {
    let n = rng.random_range(opts.min_distractors..=opts.max_distractors);
    (0..n).map(|_| pool.choose(rng).unwrap().clone()).collect()
}

/// Shuffles, assigns `d00000`-style ids and rewrites gold references.
fn finish(
    rng: &mut ChaCha8Rng,
    mut docs: Vec<(usize, String, String)>,
    mut queries: Vec<(Query, Vec<(usize, u8)>)>,
) -> Result<(Corpus, Vec<Query>)> {
    docs.shuffle(rng);
    let mut id_of = BTreeMap::new();
    let documents: Vec<Document> = docs
        .into_iter()
        .enumerate()
        .map(|(i, (key, title, text))| {
            let id = format!("d{i:05}");
            id_of.insert(key, id.clone());
            Document::new(id, title, text)
        })
        .collect();
    for (q, labels) in &mut queries {
        q.gold_doc_ids = q.gold_doc_ids.iter().map(|k| id_of[&k.parse::<usize>().unwrap()].clone()).collect();
        q.label_per_doc = Some(labels.iter().map(|(k, y)| (id_of[k].clone(), *y)).collect());
    }
    let corpus = Corpus::from_documents(documents)?;
    Ok((corpus, queries.into_iter().map(|(q, _)| q).collect()))
}

pub fn generate_synthetic_dataset(seed: u64, n_docs: usize, n_queries: usize) -> Result<(Corpus, Vec<Query>)> {
    generate_synthetic_dataset_with(seed, n_docs, n_queries, &SynthOptions::default())
}

pub fn generate_synthetic_dataset_with(
    seed: u64,
    n_docs: usize,
    n_queries: usize,
    opts: &SynthOptions,
) -> Result<(Corpus, Vec<Query>)> {
    if n_queries == 0 || n_docs < n_queries {
        return Err(Error::invalid(format!(
            "need n_docs ≥ n_queries ≥ 1, got {n_docs} docs and {n_queries} queries"
        )));
    }
    if opts.relations < 2 || opts.doc_cues_per_relation == 0 || opts.distractor_pool == 0 {
        return Err(Error::invalid("need ≥ 2 relations, ≥ 1 cue per relation and a distractor pool"));
    }
    if opts.min_distractors > opts.max_distractors {
        return Err(Error::invalid("min_distractors exceeds max_distractors"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = WordGen::new();
    let query_cues = words.words(&mut rng, opts.relations);
    let doc_cues: Vec<Vec<String>> = (0..opts.relations)
        .map(|_| words.words(&mut rng, opts.doc_cues_per_relation))
        .collect();
    let pool = words.words(&mut rng, opts.distractor_pool);

    let negatives_per_query = opts
        .hard_negatives
        .min((n_docs - n_queries) / n_queries)
        .min(opts.relations - 1);
    let mut docs: Vec<(usize, String, String)> = Vec::with_capacity(n_docs);
    let mut queries = Vec::with_capacity(n_queries);
    let mut entities = Vec::with_capacity(n_queries);

    for qi in 0..n_queries {
        let entity = words.words(&mut rng, 2);
        let relation = rng.random_range(0..opts.relations);
        let make_doc = |rng: &mut ChaCha8Rng, words: &mut WordGen, rel: usize| {
            let answer = words.word(rng);
            let cue = doc_cues[rel].choose(rng).unwrap().clone();
            let mut text = vec![entity[0].clone(), entity[1].clone(), answer.clone(), cue];
            text.extend(distractors(rng, &pool, opts));
            (answer, entity.join(" "), text.join(" "))
        };
        let (answer, title, text) = make_doc(&mut rng, &mut words, relation);
        let gold_key = docs.len();
        docs.push((gold_key, title, text));
        let mut labels = vec![(gold_key, 1u8)];

        let mut others: Vec<usize> = (0..opts.relations).filter(|&r| r != relation).collect();
        others.shuffle(&mut rng);
        for &rel in others.iter().take(negatives_per_query) {
            let (_, title, text) = make_doc(&mut rng, &mut words, rel);
            let key = docs.len();
            docs.push((key, title, text));
            labels.push((key, 0));
        }
        let contrastive_rel = *others.choose(&mut rng).unwrap();
        let query = Query {
            id: format!("q{qi:04}"),
            text: format!("{} {} {}", query_cues[relation], entity[0], entity[1]),
            contrastive_text: Some(format!(
                "{} {} {}",
                query_cues[contrastive_rel], entity[0], entity[1]
            )),
            answers: vec![answer],
            gold_doc_ids: vec![gold_key.to_string()],
            label_per_doc: None,
        };
        queries.push((query, labels));
        entities.push(entity);
    }

    // Filler documents share one entity token with some query.
    while docs.len() < n_docs {
        let entity = entities.choose(&mut rng).unwrap();
        let tok = entity.choose(&mut rng).unwrap().clone();
        let rel = rng.random_range(0..opts.relations);
        let mut text = vec![tok, words.word(&mut rng), doc_cues[rel].choose(&mut rng).unwrap().clone()];
        text.extend(distractors(&mut rng, &pool, opts));
        let title = words.word(&mut rng);
        let key = docs.len();
        docs.push((key, title, text.join(" ")));
    }
    finish(&mut rng, docs, queries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapOptions {
    pub marker_pool: usize,
    pub penalty_pool: usize,
    pub filler_pool: usize,
    /// Markers gathered by each evaluation gold document.
    pub gold_markers: usize,
    /// Penalty tokens carried by each evaluation gold document.
    pub gold_penalties: usize,
    /// Partial matches per evaluation query, each holding 1–2 of the gold markers.
    pub partials: usize,
    pub train_negatives: usize,
}

impl Default for OverlapOptions {
    fn default() -> Self {
        OverlapOptions {
            marker_pool: 24,
            penalty_pool: 24,
            filler_pool: 60,
            gold_markers: 4,
            gold_penalties: 4,
            partials: 6,
            train_negatives: 3,
        }
    }
}

/// `n_train` training queries (listed first) whose relevant documents carry
/// marker tokens and whose negatives carry penalty tokens, followed by
/// `n_eval` evaluation queries built as described in the module docs.
pub fn generate_overlap_dataset(
    seed: u64,
    n_train: usize,
    n_eval: usize,
    opts: &OverlapOptions,
) -> Result<(Corpus, Vec<Query>)> {
    if n_train + n_eval == 0 {
        return Err(Error::invalid("need at least one query"));
    }
    if opts.gold_markers == 0 || opts.gold_markers > opts.marker_pool || opts.partials == 0 {
        return Err(Error::invalid("overlap options are inconsistent"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = WordGen::new();
    let markers = words.words(&mut rng, opts.marker_pool);
    let penalties = words.words(&mut rng, opts.penalty_pool);
    let fillers = words.words(&mut rng, opts.filler_pool);
    let fill = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n).map(|_| fillers.choose(rng).unwrap().clone()).collect()
    };
    let mut docs: Vec<(usize, String, String)> = Vec::new();
    let mut queries = Vec::new();

    for qi in 0..n_train + n_eval {
        let entity = words.words(&mut rng, 2);
        let answer = words.word(&mut rng);
        let push = |docs: &mut Vec<(usize, String, String)>, mut body: Vec<String>| {
            let mut text = entity.clone();
            text.append(&mut body);
            let key = docs.len();
            docs.push((key, entity.join(" "), text.join(" ")));
            key
        };
        let mut labels = Vec::new();
        let gold_key;
        if qi < n_train {
            let k = rng.random_range(1..=3);
            let mut body = vec![answer.clone()];
            body.extend(markers.choose_multiple(&mut rng, k).cloned());
            body.extend(fill(&mut rng, 4));
            body.shuffle(&mut rng);
            gold_key = push(&mut docs, body);
            labels.push((gold_key, 1u8));
            for _ in 0..opts.train_negatives {
                let k = rng.random_range(1..=3);
                let mut body: Vec<String> = penalties.choose_multiple(&mut rng, k).cloned().collect();
                body.extend(fill(&mut rng, 4));
                body.shuffle(&mut rng);
                let key = push(&mut docs, body);
                labels.push((key, 0));
            }
        } else {
            let chosen: Vec<String> = markers.choose_multiple(&mut rng, opts.gold_markers).cloned().collect();
            let mut body = vec![answer.clone()];
            body.extend(chosen.iter().cloned());
            body.extend(penalties.choose_multiple(&mut rng, opts.gold_penalties).cloned());
            body.extend(fill(&mut rng, 2));
            body.shuffle(&mut rng);
            gold_key = push(&mut docs, body);
            labels.push((gold_key, 1u8));
            for p in 0..opts.partials {
                // Cycle through the chosen markers so each appears in some
                // partial match, then add a random second one half the time.
                let mut body = vec![chosen[p % chosen.len()].clone()];
                if rng.random_bool(0.5) {
                    let extra = chosen.choose(&mut rng).unwrap().clone();
                    if !body.contains(&extra) {
                        body.push(extra);
                    }
                }
                body.extend(fill(&mut rng, 4));
                body.shuffle(&mut rng);
                let key = push(&mut docs, body);
                labels.push((key, 0));
            }
        }
        queries.push((
            Query {
                id: format!("q{qi:04}"),
                text: entity.join(" "),
                contrastive_text: None,
                answers: vec![answer],
                gold_doc_ids: vec![gold_key.to_string()],
                label_per_doc: None,
            },
            labels,
        ));
    }
    finish(&mut rng, docs, queries)
}
