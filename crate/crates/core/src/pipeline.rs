//! End-to-end runner.
//!
//! Stages, in order: load → index → retrieve → train → rerank → explain →
//! merge → read → metrics. Each query is retrieved against three lists:
//! BM25 on the query, log-tf·idf cosine on the query and, when the query has
//! one, BM25 on its contrastive rewrite. Every list is reranked against the
//! original query.
//!
//! Queries are split by file order: the first `train_fraction` train the
//! reranker (gold documents are positives, other retrieved documents
//! negatives) and the rest are evaluated. A saved predictor skips training
//! but keeps the same split.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibrate, calibration_metrics, predictor_from_bytes, rerank_candidates, train_single,
    CalibratedPredictor, CalibrationMetrics, EnsembleMethod, MethodTag, RelevanceModel, SwaWindow,
};
use crate::corpus::{load_corpus, load_queries, Corpus, Document, Query};
use crate::error::{Error, Result};
use crate::explain::{explainer_rerank_pipeline, ExplainMethod, ExplainerBudgets, LimeConfig, ShapConfig};
use crate::fusion::{extractive_read, jsd_regularized_loss, merge_contexts, perspective_mi, ContextSplit, ImputationPair, RegularizedLoss};
use crate::metrics::{accuracy, exact_match, first_gold_rank, r_precision, recall_at_k, rouge_l, token_f1};
use crate::prob::ProbabilityDistribution;
use crate::reranker::{FeatureSpace, LabeledExample, ModelConfig, TrainingConfig};
use crate::retrieval::{bm25_retrieve, build_index, tfidf_cosine_retrieve, InvertedIndex, QueryVariant, RetrievalResult};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationKind {
    Deterministic,
    DeepEnsemble,
    SnapshotEnsemble,
    Swa,
    McDropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerKind {
    None,
    Lime,
    KernelShap,
}

impl ExplainerKind {
    pub fn method(self) -> Option<ExplainMethod> {
        match self {
            ExplainerKind::None => None,
            ExplainerKind::Lime => Some(ExplainMethod::Lime),
            ExplainerKind::KernelShap => Some(ExplainMethod::KernelShap),
        }
    }
}

/// Flat run configuration; every key except the two paths has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub k: usize,
    pub train_fraction: f64,
    pub split: String,

    pub calibration: CalibrationKind,
    pub members: usize,
    pub snapshot_cycles: usize,
    pub snapshot_use_last: usize,
    /// Fraction of the checkpoint trajectory averaged by SWA; `None` averages
    /// all of it.
    pub swa_window: Option<f64>,
    pub mc_samples: usize,

    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub init_scale: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,

    pub explainer: ExplainerKind,
    pub lime_samples: usize,
    pub lime_features: usize,
    pub lime_contexts: usize,
    pub shap_samples: usize,
    pub shap_contexts: usize,
    pub rerank_depth: usize,

    pub jsd_lambda: f64,
    pub seed: u64,
    /// Report destination.
    pub output: Option<PathBuf>,
    /// Saved predictor to use instead of training one.
    pub predictor: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let training = TrainingConfig::default();
        let model = ModelConfig::default();
        let budgets = ExplainerBudgets::default();
        PipelineConfig {
            corpus: PathBuf::new(),
            queries: PathBuf::new(),
            k: 10,
            train_fraction: 0.5,
            split: "3;2".into(),
            calibration: CalibrationKind::McDropout,
            members: 3,
            snapshot_cycles: 5,
            snapshot_use_last: 3,
            swa_window: None,
            mc_samples: 30,
            hidden_dim: model.hidden_dim,
            dropout_rate: model.dropout_rate,
            init_scale: model.init_scale,
            learning_rate: training.learning_rate,
            epochs: training.epochs,
            batch_size: training.batch_size,
            weight_decay: training.weight_decay,
            explainer: ExplainerKind::None,
            lime_samples: budgets.lime.n_samples,
            lime_features: budgets.lime.n_features,
            lime_contexts: budgets.lime_contexts,
            shap_samples: budgets.shap.n_samples,
            shap_contexts: budgets.shap_contexts,
            rerank_depth: budgets.rerank_depth,
            jsd_lambda: 1.0,
            seed: 0,
            output: None,
            predictor: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        // Relative paths are taken relative to the config file.
        if let Some(dir) = path.parent() {
            let paths = [&mut cfg.corpus, &mut cfg.queries]
                .into_iter()
                .chain(cfg.output.as_mut())
                .chain(cfg.predictor.as_mut());
            for p in paths {
                if p.is_relative() && !p.as_os_str().is_empty() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.as_os_str().is_empty() || self.queries.as_os_str().is_empty() {
            return Err(Error::invalid("corpus and queries paths are required"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.train_fraction) {
            return Err(Error::invalid("train_fraction must lie in [0, 1)"));
        }
        let split = self.context_split()?;
        if split.parts().len() > 3 {
            return Err(Error::invalid("at most three perspectives are available"));
        }
        if !(self.jsd_lambda >= 0.0) {
            return Err(Error::invalid("jsd_lambda must be non-negative"));
        }
        if self.members == 0 || self.mc_samples == 0 || self.snapshot_cycles == 0 || self.snapshot_use_last == 0 {
            return Err(Error::invalid("members, mc_samples and snapshot settings must be positive"));
        }
        if let Some(f) = self.swa_window {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid("swa_window must lie in (0, 1]"));
            }
        }
        self.training_config(0).validate()?;
        Ok(())
    }

    pub fn context_split(&self) -> Result<ContextSplit> {
        self.split.parse()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            dropout_rate: self.dropout_rate,
            init_scale: self.init_scale,
            ..ModelConfig::default()
        }
    }

    pub fn training_config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed,
            ..TrainingConfig::default()
        }
    }

    pub fn budgets(&self) -> ExplainerBudgets {
        ExplainerBudgets {
            lime_contexts: self.lime_contexts,
            shap_contexts: self.shap_contexts,
            rerank_depth: self.rerank_depth,
            lime: LimeConfig {
                n_samples: self.lime_samples,
                n_features: self.lime_features,
                ..LimeConfig::default()
            },
            shap: ShapConfig {
                n_samples: self.shap_samples,
                ..ShapConfig::default()
            },
        }
    }

    /// Seeds of the stochastic stages, derived from the run seed.
    pub fn stage_seed(&self, stage: StageSeed) -> u64 {
        derive_seed(self.seed, stage as u64)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum StageSeed {
    Training = 1,
    McDropout = 2,
    Explainer = 3,
    EnsembleBase = 100,
}

/// Number of leading queries used for training.
pub fn train_count(n_queries: usize, train_fraction: f64) -> usize {
    (n_queries as f64 * train_fraction).floor() as usize
}

/// Retrieved lists of one query, in perspective order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLists {
    pub bm25: Vec<RetrievalResult>,
    pub tfidf: Vec<RetrievalResult>,
    pub contrastive: Option<Vec<RetrievalResult>>,
}

impl QueryLists {
    fn as_vec(&self) -> Vec<Vec<RetrievalResult>> {
        vec![
            self.bm25.clone(),
            self.tfidf.clone(),
            self.contrastive.clone().unwrap_or_default(),
        ]
    }

    fn map<F>(&self, mut f: F) -> Result<QueryLists>
    where
        F: FnMut(&[RetrievalResult]) -> Result<Vec<RetrievalResult>>,
    {
        Ok(QueryLists {
            bm25: f(&self.bm25)?,
            tfidf: f(&self.tfidf)?,
            contrastive: self.contrastive.as_deref().map(&mut f).transpose()?,
        })
    }
}

pub fn retrieve(index: &InvertedIndex, query: &Query, k: usize) -> Result<QueryLists> {
    let tokens = query.tokens();
    Ok(QueryLists {
        bm25: bm25_retrieve(index, &tokens, k, QueryVariant::Original)?,
        tfidf: tfidf_cosine_retrieve(index, &tokens, k, QueryVariant::Original)?,
        contrastive: query
            .contrastive_tokens()
            .map(|t| bm25_retrieve(index, &t, k, QueryVariant::Contrastive))
            .transpose()?,
    })
}

/// Label of a (query, doc) pair: the explicit label when given, else gold
/// membership.
pub fn relevance_label(query: &Query, doc_id: &str) -> usize {
    if let Some(y) = query.label_per_doc.as_ref().and_then(|l| l.get(doc_id)) {
        return (*y > 0) as usize;
    }
    query.gold_doc_ids.iter().any(|g| g == doc_id) as usize
}

/// Gold documents plus every retrieved document, each once, in a fixed order.
pub fn training_examples(
    space: &FeatureSpace,
    corpus: &Corpus,
    queries: &[Query],
    lists: &[QueryLists],
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (q, l) in queries.iter().zip(lists) {
        let mut ids: Vec<&str> = q.gold_doc_ids.iter().map(String::as_str).collect();
        for list in [&l.bm25, &l.tfidf] {
            ids.extend(list.iter().map(|r| r.doc_id.as_str()));
        }
        if let Some(c) = &l.contrastive {
            ids.extend(c.iter().map(|r| r.doc_id.as_str()));
        }
        let mut seen = std::collections::HashSet::new();
        let qt = q.tokens();
        for id in ids.into_iter().filter(|id| seen.insert(*id)) {
            let doc = corpus.get(id).ok_or_else(|| Error::UnknownDocument(id.to_owned()))?;
            out.push(LabeledExample {
                input: space.encode_tokens(&qt, &doc.tokens),
                label: relevance_label(q, id),
            });
        }
    }
    Ok(out)
}

/// Trains the predictor selected by the configuration.
pub fn build_predictor(
    cfg: &PipelineConfig,
    space: &Arc<FeatureSpace>,
    examples: &[LabeledExample],
) -> Result<CalibratedPredictor> {
    if examples.is_empty() {
        return Err(Error::invalid("no training examples: raise train_fraction or supply a predictor"));
    }
    let model_cfg = cfg.model_config();
    let train_cfg = cfg.training_config(cfg.stage_seed(StageSeed::Training));
    let method = match cfg.calibration {
        CalibrationKind::Deterministic => {
            return Ok(CalibratedPredictor::Deterministic(train_single(space, examples, &model_cfg, &train_cfg)?));
        }
        CalibrationKind::DeepEnsemble => EnsembleMethod::DeepEnsemble {
            seeds: (0..cfg.members as u64)
                .map(|m| derive_seed(cfg.seed, StageSeed::EnsembleBase as u64 + m))
                .collect(),
        },
        CalibrationKind::SnapshotEnsemble => EnsembleMethod::SnapshotEnsemble {
            cycles: cfg.snapshot_cycles,
            use_last: cfg.snapshot_use_last,
        },
        CalibrationKind::Swa => EnsembleMethod::Swa {
            window: cfg.swa_window.map_or(SwaWindow::FullTrajectory, SwaWindow::LastFraction),
        },
        CalibrationKind::McDropout => EnsembleMethod::McDropout {
            samples: cfg.mc_samples,
            seed: cfg.stage_seed(StageSeed::McDropout),
        },
    };
    calibrate(space, examples, &model_cfg, &train_cfg, &method)
}

/// Builds the feature space from the corpus vocabulary and trains on the
/// leading `train_fraction` of the queries.
pub fn train_for_config(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    queries: &[Query],
    lists: &[QueryLists],
) -> Result<CalibratedPredictor> {
    let n_train = train_count(queries.len(), cfg.train_fraction);
    let space = Arc::new(FeatureSpace::with_defaults(corpus.vocabulary().clone()));
    let examples = training_examples(&space, corpus, &queries[..n_train], &lists[..n_train])?;
    build_predictor(cfg, &space, &examples)
}

pub fn load_inputs(cfg: &PipelineConfig) -> Result<(Corpus, Vec<Query>)> {
    let corpus = load_corpus(&cfg.corpus)?;
    let queries = load_queries(&cfg.queries)?;
    corpus.validate_queries(&queries)?;
    Ok((corpus, queries))
}

pub fn retrieve_all(index: &InvertedIndex, queries: &[Query], k: usize) -> Result<Vec<QueryLists>> {
    queries.par_iter().map(|q| retrieve(index, q, k)).collect()
}

pub fn load_predictor(path: &Path) -> Result<CalibratedPredictor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    predictor_from_bytes(&bytes)
}

/// Pairs each result with its document.
pub fn candidates<'a>(corpus: &'a Corpus, list: &[RetrievalResult]) -> Result<Vec<(&'a Document, RetrievalResult)>> {
    list.iter()
        .map(|r| {
            corpus
                .get(&r.doc_id)
                .map(|d| (d, r.clone()))
                .ok_or_else(|| Error::UnknownDocument(r.doc_id.clone()))
        })
        .collect()
}

fn ids(list: &[RetrievalResult]) -> Vec<String> {
    list.iter().map(|r| r.doc_id.clone()).collect()
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Everything recorded for one evaluated query. Aggregates are computed from
/// these records alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub gold_ids: Vec<String>,
    pub gold_answers: Vec<String>,
    pub retrieved_bm25: Vec<String>,
    pub retrieved_tfidf: Vec<String>,
    pub retrieved_contrastive: Option<Vec<String>>,
    pub reranked_bm25: Vec<String>,
    pub reranked_tfidf: Vec<String>,
    pub reranked_contrastive: Option<Vec<String>>,
    /// `p(relevant)` and label for every reranked BM25 candidate.
    pub reranked_bm25_scores: Vec<f64>,
    pub reranked_bm25_labels: Vec<usize>,
    pub explained_bm25: Option<Vec<String>>,
    pub explained_tfidf: Option<Vec<String>>,
    pub explain_calls: usize,
    pub table_sizes: Vec<usize>,
    pub merged: Vec<String>,
    pub answer: String,
    pub answer_in_gold: bool,
    pub exact_match: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub recall5_bm25: f64,
    pub recall5_tfidf: f64,
    pub recall5_merged: f64,
    pub r_precision_merged: f64,
    pub gold_rank_reranked: usize,
    pub gold_rank_explained: Option<usize>,
    pub perspective_mi: f64,
    /// Top merged context against the gold context, scored by the reranker.
    pub imputation: Option<ImputationPair>,
    pub imputation_output: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub queries: usize,
    pub exact_match: f64,
    pub f1: f64,
    pub rouge_l: f64,
    /// Share of answers drawn from a gold document; stands in for
    /// fact-verification accuracy.
    pub accuracy: f64,
    pub recall5_bm25: f64,
    pub recall5_tfidf: f64,
    pub recall5_merged: f64,
    pub r_precision_merged: f64,
    pub mean_gold_rank_reranked: f64,
    pub mean_gold_rank_explained: Option<f64>,
    pub mean_perspective_mi: f64,
    pub imputation_objective: Option<RegularizedLoss>,
    pub calibration: Option<CalibrationMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn aggregate(records: &[QueryRecord], jsd_lambda: f64) -> Result<Aggregates> {
    let m = |f: fn(&QueryRecord) -> f64| mean(records.iter().map(f));
    let explained: Option<Vec<f64>> = records
        .iter()
        .map(|r| r.gold_rank_explained.map(|g| g as f64))
        .collect();
    let pairs: Vec<(ImputationPair, f64)> = records
        .iter()
        .filter_map(|r| Some((r.imputation.clone()?, r.imputation_output?)))
        .collect();
    let imputation_objective = if pairs.is_empty() {
        None
    } else {
        let (batch, outputs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        Some(jsd_regularized_loss(&batch, &outputs, jsd_lambda)?)
    };
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        for (&p, &y) in r.reranked_bm25_scores.iter().zip(&r.reranked_bm25_labels) {
            preds.push(ProbabilityDistribution::new(vec![1.0 - p, p])?);
            labels.push(y);
        }
    }
    let calibration = if preds.is_empty() {
        None
    } else {
        Some(calibration_metrics(&preds, &labels)?)
    };
    let answered: Vec<bool> = records.iter().map(|r| r.answer_in_gold).collect();
    Ok(Aggregates {
        queries: records.len(),
        exact_match: m(|r| r.exact_match),
        f1: m(|r| r.f1),
        rouge_l: m(|r| r.rouge_l),
        accuracy: if records.is_empty() {
            0.0
        } else {
            accuracy(&answered, &vec![true; answered.len()])?
        },
        recall5_bm25: m(|r| r.recall5_bm25),
        recall5_tfidf: m(|r| r.recall5_tfidf),
        recall5_merged: m(|r| r.recall5_merged),
        r_precision_merged: m(|r| r.r_precision_merged),
        mean_gold_rank_reranked: m(|r| r.gold_rank_reranked as f64),
        mean_gold_rank_explained: explained.map(|v| mean(v.into_iter())),
        mean_perspective_mi: m(|r| r.perspective_mi),
        imputation_objective,
        calibration,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub seed: u64,
    pub predictor: Option<MethodTag>,
    pub predictor_members: usize,
    pub train_queries: usize,
    pub completed_stages: Vec<String>,
    pub aggregates: Option<Aggregates>,
    /// One JSON object per evaluated query, newline-terminated, in query
    /// order.
    pub records: String,
    /// Wall-clock seconds per stage; the only non-deterministic field.
    pub stage_timings: Vec<StageTiming>,
}

impl RunReport {
    fn new(config: &PipelineConfig) -> Self {
        RunReport {
            config: config.clone(),
            seed: config.seed,
            predictor: None,
            predictor_members: 0,
            train_queries: 0,
            completed_stages: Vec::new(),
            aggregates: None,
            records: String::new(),
            stage_timings: Vec::new(),
        }
    }

    pub fn parse_records(&self) -> Result<Vec<QueryRecord>> {
        self.records
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The report with timing fields cleared, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            stage_timings: Vec::new(),
            ..self.clone()
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: String,
    pub source: Error,
    pub partial: Box<RunReport>,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

struct Runner {
    report: RunReport,
    clock: Instant,
}

impl Runner {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T, PipelineError> {
        self.clock = Instant::now();
        match f() {
            Ok(v) => {
                self.report.completed_stages.push(name.to_owned());
                self.report.stage_timings.push(StageTiming {
                    stage: name.to_owned(),
                    seconds: self.clock.elapsed().as_secs_f64(),
                });
                Ok(v)
            }
            Err(source) => Err(PipelineError {
                stage: name.to_owned(),
                source,
                partial: Box::new(self.report.clone()),
            }),
        }
    }
}

struct Explained {
    lists: QueryLists,
    calls: usize,
    table_sizes: Vec<usize>,
}

/// Runs every stage and writes the report to `config.output` when set. On
/// failure the partial report is written as well and returned inside the
/// error.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let result = run_stages(config);
    if let Some(out) = &config.output {
        let report = match &result {
            Ok(r) => r,
            Err(e) => &e.partial,
        };
        if let Err(source) = report.write(out) {
            return Err(PipelineError {
                stage: "report".into(),
                source,
                partial: Box::new(report.clone()),
            });
        }
    }
    result
}

fn run_stages(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let mut run = Runner {
        report: RunReport::new(config),
        clock: Instant::now(),
    };
    let split = run.stage("validate", || {
        config.validate()?;
        config.context_split()
    })?;
    let (corpus, queries) = run.stage("load", || load_inputs(config))?;
    let index = run.stage("index", || build_index(&corpus))?;
    let lists = run.stage("retrieve", || retrieve_all(&index, &queries, config.k))?;

    let n_train = train_count(queries.len(), config.train_fraction);
    run.report.train_queries = n_train;
    let predictor = run.stage("train", || match &config.predictor {
        Some(path) => load_predictor(path),
        None => train_for_config(config, &corpus, &queries, &lists),
    })?;
    run.report.predictor = Some(predictor.method());
    run.report.predictor_members = predictor.members().len();

    let eval_queries = &queries[n_train..];
    let eval_lists = &lists[n_train..];
    let reranked = run.stage("rerank", || {
        eval_queries
            .par_iter()
            .zip(eval_lists)
            .map(|(q, l)| {
                let qt = q.tokens();
                l.map(|list| rerank_candidates(&predictor, &qt, &candidates(&corpus, list)?))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let explained: Option<Vec<Explained>> = run.stage("explain", || {
        let Some(method) = config.explainer.method() else {
            return Ok(None);
        };
        let budgets = config.budgets();
        let base_seed = config.stage_seed(StageSeed::Explainer);
        let merged_lists = split.parts().len() as u64;
        eval_queries
            .par_iter()
            .zip(&reranked)
            .enumerate()
            .map(|(qi, (q, l))| {
                let mut calls = 0;
                let mut table_sizes = Vec::new();
                let mut stream = 0u64;
                let lists = l.map(|list| {
                    let seed = derive_seed(base_seed, (qi as u64) << 2 | stream);
                    stream += 1;
                    if stream > merged_lists {
                        return Ok(list.to_vec());
                    }
                    let out = explainer_rerank_pipeline(
                        &predictor,
                        q,
                        &candidates(&corpus, list)?,
                        method,
                        &budgets,
                        seed,
                    )?;
                    calls += out.explanations.len();
                    table_sizes.push(out.table.len());
                    Ok(out.ranked)
                })?;
                Ok(Explained {
                    lists,
                    calls,
                    table_sizes,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    })?;

    let final_lists: Vec<&QueryLists> = match &explained {
        Some(e) => e.iter().map(|x| &x.lists).collect(),
        None => reranked.iter().collect(),
    };
    let merged = run.stage("merge", || {
        final_lists
            .iter()
            .map(|l| {
                let all = l.as_vec();
                merge_contexts(&split, &all[..split.parts().len()])
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let answers = run.stage("read", || {
        eval_queries
            .iter()
            .zip(&merged)
            .map(|(q, m)| {
                let docs: Vec<&Document> = candidates(&corpus, m)?.into_iter().map(|c| c.0).collect();
                Ok(extractive_read(&docs, &q.tokens(), &index))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let records = run.stage("metrics", || {
        (0..eval_queries.len())
            .into_par_iter()
            .map(|i| {
                query_record(
                    &corpus,
                    &predictor,
                    &split,
                    &eval_queries[i],
                    &eval_lists[i],
                    &reranked[i],
                    explained.as_ref().map(|e| &e[i]),
                    &merged[i],
                    &answers[i],
                )
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let aggregates = run.stage("aggregate", || aggregate(&records, config.jsd_lambda))?;
    let mut ndjson = String::new();
    for r in &records {
        ndjson.push_str(&serde_json::to_string(r).map_err(|e| PipelineError {
            stage: "report".into(),
            source: e.into(),
            partial: Box::new(run.report.clone()),
        })?);
        ndjson.push('\n');
    }
    run.report.records = ndjson;
    run.report.aggregates = Some(aggregates);
    Ok(run.report)
}

fn answer_in_docs(answer: &str, docs: &[&Document]) -> bool {
    let toks = crate::corpus::tokenize(answer);
    !toks.is_empty() && docs.iter().any(|d| d.tokens.windows(toks.len()).any(|w| w == toks.as_slice()))
}

#[allow(clippy::too_many_arguments)]
fn query_record(
    corpus: &Corpus,
    predictor: &CalibratedPredictor,
    split: &ContextSplit,
    query: &Query,
    retrieved: &QueryLists,
    reranked: &QueryLists,
    explained: Option<&Explained>,
    merged: &[RetrievalResult],
    answer: &str,
) -> Result<QueryRecord> {
    let gold = &query.gold_doc_ids;
    let merged_ids = ids(merged);
    let recall5 = |list: &[RetrievalResult]| -> Result<f64> {
        if gold.is_empty() {
            Ok(0.0)
        } else {
            recall_at_k(&ids(list), gold, 5)
        }
    };
    let gold_docs: Vec<&Document> = gold.iter().filter_map(|g| corpus.get(g)).collect();

    // Token-presence MI between the contexts each perspective contributes.
    let counts = split.counts();
    let take = |list: &[RetrievalResult], n: usize| -> Result<Vec<&Document>> {
        Ok(candidates(corpus, &list[..n.min(list.len())])?.into_iter().map(|c| c.0).collect())
    };
    let final_lists = explained.map_or(reranked, |e| &e.lists);
    let a = take(&final_lists.bm25, counts[0])?;
    let b = take(&final_lists.tfidf, counts.get(1).copied().unwrap_or(0))?;
    let mi = perspective_mi(&a, &b)?;

    let (imputation, imputation_output) = match (merged.first(), gold_docs.first()) {
        (Some(top), Some(g)) => {
            let space = predictor.space();
            let qt = query.tokens();
            let top_doc = corpus.get(&top.doc_id).ok_or_else(|| Error::UnknownDocument(top.doc_id.clone()))?;
            let p_top = predictor.predict(&space.encode_tokens(&qt, &top_doc.tokens))?.positive();
            let p_gold = predictor.predict(&space.encode_tokens(&qt, &g.tokens))?.positive();
            (
                Some(ImputationPair {
                    imputed_context: top.doc_id.clone(),
                    gold_context: g.id.clone(),
                    label: gold.contains(&top.doc_id) as u8,
                    imputed_score: logit(p_top),
                    gold_score: logit(p_gold),
                }),
                Some(p_top),
            )
        }
        _ => (None, None),
    };

    let labels: Vec<usize> = reranked.bm25.iter().map(|r| relevance_label(query, &r.doc_id)).collect();
    Ok(QueryRecord {
        query_id: query.id.clone(),
        gold_ids: gold.clone(),
        gold_answers: query.answers.clone(),
        retrieved_bm25: ids(&retrieved.bm25),
        retrieved_tfidf: ids(&retrieved.tfidf),
        retrieved_contrastive: retrieved.contrastive.as_deref().map(ids),
        reranked_bm25: ids(&reranked.bm25),
        reranked_tfidf: ids(&reranked.tfidf),
        reranked_contrastive: reranked.contrastive.as_deref().map(ids),
        reranked_bm25_scores: reranked.bm25.iter().map(|r| r.score).collect(),
        reranked_bm25_labels: labels,
        explained_bm25: explained.map(|e| ids(&e.lists.bm25)),
        explained_tfidf: explained.map(|e| ids(&e.lists.tfidf)),
        explain_calls: explained.map_or(0, |e| e.calls),
        table_sizes: explained.map_or_else(Vec::new, |e| e.table_sizes.clone()),
        answer: answer.to_owned(),
        answer_in_gold: answer_in_docs(answer, &gold_docs),
        exact_match: exact_match(answer, &query.answers),
        f1: token_f1(answer, &query.answers),
        rouge_l: query.answers.first().map_or(0.0, |g| rouge_l(answer, g)),
        recall5_bm25: recall5(&reranked.bm25)?,
        recall5_tfidf: recall5(&reranked.tfidf)?,
        recall5_merged: recall5(merged)?,
        r_precision_merged: if gold.is_empty() { 0.0 } else { r_precision(&merged_ids, gold)? },
        gold_rank_reranked: first_gold_rank(&ids(&reranked.bm25), gold),
        gold_rank_explained: explained.map(|e| first_gold_rank(&ids(&e.lists.bm25), gold)),
        merged: merged_ids,
        perspective_mi: mi,
        imputation,
        imputation_output,
    })
}

/// Recomputes aggregates from the embedded records and compares them with the
/// stored ones.
pub fn verify_report(report: &RunReport) -> Result<Aggregates> {
    let records = report.parse_records()?;
    let recomputed = aggregate(&records, report.config.jsd_lambda)?;
    match &report.aggregates {
        Some(stored) if *stored == recomputed => Ok(recomputed),
        Some(_) => Err(Error::Numerical("stored aggregates differ from recomputed values".into())),
        None => Err(Error::invalid("report has no aggregates (incomplete run)")),
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{write_corpus, write_queries};
    use crate::synth::generate_synthetic_dataset;

    fn fixture(dir: &Path, calibration: CalibrationKind, explainer: ExplainerKind) -> PipelineConfig {
        let (corpus, queries) = generate_synthetic_dataset(11, 120, 24).unwrap();
        write_corpus(dir.join("corpus.jsonl"), &corpus).unwrap();
        write_queries(dir.join("queries.jsonl"), &queries).unwrap();
        PipelineConfig {
            corpus: dir.join("corpus.jsonl"),
            queries: dir.join("queries.jsonl"),
            calibration,
            explainer,
            epochs: 3,
            hidden_dim: 8,
            mc_samples: 4,
            lime_samples: 40,
            shap_samples: 64,
            seed: 5,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn run_is_reproducible_and_self_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), CalibrationKind::McDropout, ExplainerKind::Lime);
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.without_timings().to_json().unwrap(), b.without_timings().to_json().unwrap());
        let agg = verify_report(&a).unwrap();
        assert_eq!(agg.queries, 12);
        for r in a.parse_records().unwrap() {
            assert!(r.merged.len() <= 5);
            // Five LIME contexts for each of the two merged lists.
            assert!(r.explain_calls <= 10);
            assert!(r.exact_match <= r.f1);
        }
        let json = a.to_json().unwrap();
        let back: RunReport = serde_json::from_str(&json).unwrap();
        verify_report(&back).unwrap();
    }

    #[test]
    fn every_calibration_method_runs() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [
            CalibrationKind::Deterministic,
            CalibrationKind::DeepEnsemble,
            CalibrationKind::SnapshotEnsemble,
            CalibrationKind::Swa,
        ] {
            let cfg = fixture(dir.path(), kind, ExplainerKind::KernelShap);
            let report = run_pipeline(&cfg).unwrap();
            assert_eq!(report.predictor, Some(match kind {
                CalibrationKind::Deterministic => MethodTag::Deterministic,
                CalibrationKind::DeepEnsemble => MethodTag::DeepEnsemble,
                CalibrationKind::SnapshotEnsemble => MethodTag::SnapshotEnsemble,
                CalibrationKind::Swa => MethodTag::Swa,
                CalibrationKind::McDropout => MethodTag::McDropout,
            }));
            verify_report(&report).unwrap();
        }
    }

    #[test]
    fn failure_reports_stage_and_partial_progress() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fixture(dir.path(), CalibrationKind::Deterministic, ExplainerKind::None);
        cfg.queries = dir.path().join("missing.jsonl");
        cfg.output = Some(dir.path().join("report.json"));
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage, "load");
        assert_eq!(err.partial.completed_stages, vec!["validate"]);
        assert!(dir.path().join("report.json").exists());

        let mut cfg = fixture(dir.path(), CalibrationKind::Deterministic, ExplainerKind::None);
        cfg.split = "3;x".into();
        assert_eq!(run_pipeline(&cfg).unwrap_err().stage, "validate");
    }

    #[test]
    fn config_parsing_is_flat_and_strict() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"corpus":"c.jsonl","queries":"q.jsonl","calibration":"swa","swa_window":0.3,"explainer":"kernel_shap"}"#)
                .unwrap();
        assert_eq!(cfg.calibration, CalibrationKind::Swa);
        assert_eq!(cfg.k, 10);
        cfg.validate().unwrap();
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"corpus":"c","nested":{}}"#).is_err());
        assert_eq!(train_count(100, 0.5), 50);
    }
}
