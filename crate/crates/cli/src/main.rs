//! `calibrank` command-line front end.
//!
//! Every subcommand reads an optional flat JSON config (`--config`) and
//! applies flag overrides on top. Stochastic subcommands require `--seed`.
//! Exit codes: 0 success, 1 input error, 2 numerical error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calibrank::calibration::{predictor_to_bytes, rerank_candidates, CalibratedPredictor};
use calibrank::corpus::{write_corpus, write_queries, Corpus, Query};
use calibrank::explain::explainer_rerank_pipeline;
use calibrank::pipeline::{
    candidates, load_inputs, load_predictor, retrieve_all, run_pipeline, train_count, train_for_config,
    verify_report, CalibrationKind, ExplainerKind, PipelineConfig, QueryLists, RunReport, StageSeed,
};
use calibrank::retrieval::{build_index, RetrievalResult};
use calibrank::rng::derive_seed;
use calibrank::synth::{generate_overlap_dataset, generate_synthetic_dataset, OverlapOptions};
use calibrank::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "calibrank", version, about = "Calibrated, explainable multi-perspective reranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_calibration(s: &str) -> Result<CalibrationKind, String> {
    serde_json::from_value(json!(s)).map_err(|_| {
        "expected deterministic, deep_ensemble, snapshot_ensemble, swa or mc_dropout".to_owned()
    })
}

fn parse_explainer(s: &str) -> Result<ExplainerKind, String> {
    serde_json::from_value(json!(s)).map_err(|_| "expected none, lime or kernel_shap".to_owned())
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Flat JSON config; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Retrieval depth per perspective.
    #[arg(long)]
    k: Option<usize>,
    /// Context split such as "3;2".
    #[arg(long)]
    split: Option<String>,
    #[arg(long, value_parser = parse_calibration)]
    calibration: Option<CalibrationKind>,
    #[arg(long, value_parser = parse_explainer)]
    explainer: Option<ExplainerKind>,
    /// Saved predictor to load.
    #[arg(long)]
    predictor: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and query set.
    Synth {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        docs: usize,
        #[arg(long = "num-queries", default_value_t = 100)]
        num_queries: usize,
        /// Build the explainer overlap corpus instead.
        #[arg(long)]
        overlap: bool,
    },
    /// Build the inverted index; writes it as JSON to --output, else prints a summary.
    Index {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a single deterministic reranker.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: u64,
    },
    /// Train the configured calibrated predictor.
    Calibrate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: u64,
    },
    /// Rerank every retrieved list of the evaluation queries with a saved predictor.
    Rerank {
        #[command(flatten)]
        overrides: Overrides,
        /// Replaces the Monte Carlo mask seed stored in the predictor.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Explain the top contexts of each evaluation query and rerank by feature scores.
    Explain {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: u64,
    },
    /// Run every stage and write the report.
    Pipeline {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: u64,
    },
    /// Recompute aggregates from a report's per-query records and check them.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Report to check; defaults to the config's output path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

enum Failure {
    Input(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn config(o: &Overrides, seed: Option<u64>) -> CliResult<PipelineConfig> {
    let mut cfg = match &o.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = &o.corpus {
        cfg.corpus = v.clone();
    }
    if let Some(v) = &o.queries {
        cfg.queries = v.clone();
    }
    if let Some(v) = o.k {
        cfg.k = v;
    }
    if let Some(v) = &o.split {
        cfg.split = v.clone();
    }
    if let Some(v) = o.calibration {
        cfg.calibration = v;
    }
    if let Some(v) = o.explainer {
        cfg.explainer = v;
    }
    if let Some(v) = &o.predictor {
        cfg.predictor = Some(v.clone());
    }
    if let Some(v) = &o.output {
        cfg.output = Some(v.clone());
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn emit(output: Option<&Path>, text: &str) -> CliResult {
    match output {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|e| Failure::Input(format!("cannot write to stdout: {e}")))
        }
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Failure::Input(format!("{what} path is required (--{what} or config)")))
}

fn ids(list: &[RetrievalResult]) -> Vec<&str> {
    list.iter().map(|r| r.doc_id.as_str()).collect()
}

struct Loaded {
    cfg: PipelineConfig,
    corpus: Corpus,
    queries: Vec<Query>,
    lists: Vec<QueryLists>,
}

fn load(cfg: PipelineConfig) -> CliResult<Loaded> {
    cfg.validate()?;
    let (corpus, queries) = load_inputs(&cfg)?;
    let index = build_index(&corpus)?;
    let lists = retrieve_all(&index, &queries, cfg.k)?;
    Ok(Loaded {
        cfg,
        corpus,
        queries,
        lists,
    })
}

fn synth(o: &Overrides, seed: u64, docs: usize, num_queries: usize, overlap: bool) -> CliResult {
    let cfg = config(o, Some(seed))?;
    let (corpus, queries) = if overlap {
        let n_train = train_count(num_queries, cfg.train_fraction);
        generate_overlap_dataset(seed, n_train, num_queries - n_train, &OverlapOptions::default())?
    } else {
        generate_synthetic_dataset(seed, docs, num_queries)?
    };
    let nonempty = |p: &PathBuf| Some(p.clone()).filter(|p| !p.as_os_str().is_empty());
    let corpus_path = required(&nonempty(&cfg.corpus), "corpus")?.to_owned();
    let query_path = required(&nonempty(&cfg.queries), "queries")?.to_owned();
    write_corpus(&corpus_path, &corpus)?;
    write_queries(&query_path, &queries)?;
    eprintln!(
        "wrote {} documents to {} and {} queries to {}",
        corpus.doc_count(),
        corpus_path.display(),
        queries.len(),
        query_path.display()
    );
    Ok(())
}

fn index(o: &Overrides) -> CliResult {
    let cfg = config(o, None)?;
    let (corpus, _) = load_inputs(&cfg)?;
    let index = build_index(&corpus)?;
    match &cfg.output {
        Some(path) => {
            let text = serde_json::to_string(&index).map_err(Error::from)?;
            emit(Some(path), &text)
        }
        None => {
            let summary = json!({
                "documents": index.doc_count,
                "vocabulary": index.postings.len(),
                "average_doc_length": index.average_doc_length,
            });
            emit(None, &format!("{summary}\n"))
        }
    }
}

fn train(o: &Overrides, seed: u64, force_deterministic: bool) -> CliResult {
    let mut cfg = config(o, Some(seed))?;
    if force_deterministic {
        cfg.calibration = CalibrationKind::Deterministic;
    }
    let out = required(&cfg.output, "output")?.to_owned();
    let data = load(cfg)?;
    let predictor = train_for_config(&data.cfg, &data.corpus, &data.queries, &data.lists)?;
    std::fs::write(&out, predictor_to_bytes(&predictor))
        .map_err(|e| Failure::Input(format!("cannot write {}: {e}", out.display())))?;
    eprintln!(
        "trained {:?} predictor with {} member(s) on {} queries",
        predictor.method(),
        predictor.members().len(),
        train_count(data.queries.len(), data.cfg.train_fraction)
    );
    Ok(())
}

fn loaded_predictor(cfg: &PipelineConfig) -> CliResult<CalibratedPredictor> {
    Ok(load_predictor(required(&cfg.predictor, "predictor")?)?)
}

fn rerank(o: &Overrides, seed: Option<u64>) -> CliResult {
    let cfg = config(o, None)?;
    let mut predictor = loaded_predictor(&cfg)?;
    if let Some(s) = seed {
        predictor = predictor.with_mc_seed(s);
    }
    let data = load(cfg)?;
    let n_train = train_count(data.queries.len(), data.cfg.train_fraction);
    let mut out = String::new();
    for (q, lists) in data.queries.iter().zip(&data.lists).skip(n_train) {
        let qt = q.tokens();
        let mut rerank = |list: &[RetrievalResult]| -> CliResult<Vec<RetrievalResult>> {
            Ok(rerank_candidates(&predictor, &qt, &candidates(&data.corpus, list)?)?)
        };
        let bm25 = rerank(&lists.bm25)?;
        let tfidf = rerank(&lists.tfidf)?;
        let contrastive = lists.contrastive.as_deref().map(&mut rerank).transpose()?;
        let line = json!({
            "query_id": q.id,
            "bm25": bm25,
            "tfidf": tfidf,
            "contrastive": contrastive,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    emit(data.cfg.output.as_deref(), &out)
}

fn explain(o: &Overrides, seed: u64) -> CliResult {
    let mut cfg = config(o, Some(seed))?;
    if cfg.explainer == ExplainerKind::None {
        cfg.explainer = ExplainerKind::Lime;
    }
    let method = cfg.explainer.method().expect("explainer chosen above");
    let predictor = loaded_predictor(&cfg)?;
    let data = load(cfg)?;
    let budgets = data.cfg.budgets();
    let base_seed = data.cfg.stage_seed(StageSeed::Explainer);
    let n_train = train_count(data.queries.len(), data.cfg.train_fraction);
    let mut out = String::new();
    for (qi, (q, lists)) in data.queries.iter().zip(&data.lists).enumerate().skip(n_train) {
        let qt = q.tokens();
        let base = rerank_candidates(&predictor, &qt, &candidates(&data.corpus, &lists.bm25)?)?;
        let result = explainer_rerank_pipeline(
            &predictor,
            q,
            &candidates(&data.corpus, &base)?,
            method,
            &budgets,
            derive_seed(base_seed, (qi - n_train) as u64),
        )?;
        let records: Vec<_> = result.explanations.iter().flat_map(|e| e.records()).collect();
        let line = json!({
            "query_id": q.id,
            "method": method,
            "base": ids(&base),
            "reranked": ids(&result.ranked),
            "table": result.table.scores,
            "explanations": records,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    emit(data.cfg.output.as_deref(), &out)
}

fn summary(report: &RunReport) -> String {
    match &report.aggregates {
        Some(a) => {
            let mut s = format!(
                "queries {}  EM {:.4}  F1 {:.4}  ROUGE-L {:.4}  accuracy* {:.4}\n\
                 recall@5 bm25 {:.4}  tfidf {:.4}  merged {:.4}  mean gold rank {:.3}\n",
                a.queries,
                a.exact_match,
                a.f1,
                a.rouge_l,
                a.accuracy,
                a.recall5_bm25,
                a.recall5_tfidf,
                a.recall5_merged,
                a.mean_gold_rank_reranked
            );
            if let Some(r) = a.mean_gold_rank_explained {
                s.push_str(&format!("mean gold rank after explainer rerank {r:.3}\n"));
            }
            if let Some(c) = &a.calibration {
                s.push_str(&format!("NLL {:.4}  Brier {:.4}  ECE {:.4}\n", c.nll, c.brier, c.ece));
            }
            s.push_str("* accuracy stand-in: share of answers found in a gold document\n");
            s
        }
        None => "no aggregates (incomplete run)\n".to_owned(),
    }
}

fn pipeline(o: &Overrides, seed: u64) -> CliResult {
    let cfg = config(o, Some(seed))?;
    match run_pipeline(&cfg) {
        Ok(report) => {
            if cfg.output.is_none() {
                emit(None, &(report.to_json()? + "\n"))?;
            } else {
                eprint!("{}", summary(&report));
            }
            Ok(())
        }
        Err(e) => {
            let msg = e.to_string();
            if cfg.output.is_some() {
                eprintln!("partial report written; completed stages: {:?}", e.partial.completed_stages);
            }
            Err(if e.source.is_numerical() {
                Failure::Numerical(msg)
            } else {
                Failure::Input(msg)
            })
        }
    }
}

fn eval(o: &Overrides, report: &Option<PathBuf>) -> CliResult {
    let path = match report {
        Some(p) => p.clone(),
        None => required(&config(o, None)?.output, "report")?.to_owned(),
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
    let report: RunReport = serde_json::from_str(&text).map_err(Error::from)?;
    verify_report(&report)?;
    emit(None, &summary(&report))?;
    eprintln!("aggregates match the per-query records");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Synth {
            overrides,
            seed,
            docs,
            num_queries,
            overlap,
        } => synth(overrides, *seed, *docs, *num_queries, *overlap),
        Command::Index { overrides } => index(overrides),
        Command::Train { overrides, seed } => train(overrides, *seed, true),
        Command::Calibrate { overrides, seed } => train(overrides, *seed, false),
        Command::Rerank { overrides, seed } => rerank(overrides, *seed),
        Command::Explain { overrides, seed } => explain(overrides, *seed),
        Command::Pipeline { overrides, seed } => pipeline(overrides, *seed),
        Command::Eval { overrides, report } => eval(overrides, report),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical error: {msg}");
            ExitCode::from(2)
        }
    }
}
