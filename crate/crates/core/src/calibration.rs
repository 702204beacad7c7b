//! Uncertainty calibration for the reranker.
//!
//! Four strategies produce a [`CalibratedPredictor`]:
//!
//! - deep ensembles: `M` members trained from distinct seeds, class
//!   probabilities averaged at prediction time;
//! - snapshot ensembles: one run under [`cyclic_lr`](crate::reranker::cyclic_lr)
//!   with a snapshot at the end of every cycle, the last `use_last`
//!   snapshots averaged;
//! - stochastic weight averaging: checkpoints folded with
//!   `w ← (w·n + w')/(n + 1)` into one model;
//! - Monte Carlo dropout: `T` sampled-mask forward passes averaged.
//!
//! Every reduction runs in a fixed order, so parallel evaluation never
//! changes a result.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::prob::ProbabilityDistribution;
use crate::reranker::io::model_from_prefix;
use crate::retrieval::RetrievalResult;
use crate::rng::derive_seed;
use crate::reranker::{
    checkpoint_steps, model_to_bytes, train, train_with_observer, Checkpoint, FeatureSpace,
    ForwardMode, InputVector, LabeledExample, ModelConfig, Params, RerankerModel, Schedule,
    TrainOutcome, TrainingConfig,
};

/// Anything that maps an encoded `(query, context)` pair to a distribution
/// over {irrelevant, relevant}.
pub trait RelevanceModel: Sync {
    fn predict(&self, input: &InputVector) -> Result<ProbabilityDistribution>;
    fn space(&self) -> &FeatureSpace;
}

impl RelevanceModel for RerankerModel {
    fn predict(&self, input: &InputVector) -> Result<ProbabilityDistribution> {
        self.forward(input, ForwardMode::Deterministic)
    }

    fn space(&self) -> &FeatureSpace {
        RerankerModel::space(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SwaWindow {
    FullTrajectory,
    LastFraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleMethod {
    DeepEnsemble { seeds: Vec<u64> },
    SnapshotEnsemble { cycles: usize, use_last: usize },
    Swa { window: SwaWindow },
    McDropout { samples: usize, seed: u64 },
}

/// Members averaged in the reported setup for ensembles and MC dropout.
pub const DEFAULT_MEMBERS: usize = 3;
pub const DEFAULT_SNAPSHOT_USE_LAST: usize = 3;
/// Window used for weight averaging during imputation pre-training.
pub const IMPUTATION_SWA_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub enum CalibratedPredictor {
    Deterministic(RerankerModel),
    DeepEnsemble(Vec<RerankerModel>),
    SnapshotEnsemble {
        snapshots: Vec<RerankerModel>,
        use_last: usize,
    },
    Swa(RerankerModel),
    McDropout {
        model: RerankerModel,
        samples: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Deterministic,
    DeepEnsemble,
    SnapshotEnsemble,
    Swa,
    McDropout,
}

impl CalibratedPredictor {
    pub fn method(&self) -> MethodTag {
        match self {
            CalibratedPredictor::Deterministic(_) => MethodTag::Deterministic,
            CalibratedPredictor::DeepEnsemble(_) => MethodTag::DeepEnsemble,
            CalibratedPredictor::SnapshotEnsemble { .. } => MethodTag::SnapshotEnsemble,
            CalibratedPredictor::Swa(_) => MethodTag::Swa,
            CalibratedPredictor::McDropout { .. } => MethodTag::McDropout,
        }
    }

    pub fn members(&self) -> &[RerankerModel] {
        match self {
            CalibratedPredictor::Deterministic(m)
            | CalibratedPredictor::Swa(m)
            | CalibratedPredictor::McDropout { model: m, .. } => std::slice::from_ref(m),
            CalibratedPredictor::DeepEnsemble(ms) => ms,
            CalibratedPredictor::SnapshotEnsemble { snapshots, .. } => snapshots,
        }
    }

    /// Members that take part in prediction.
    pub fn active_members(&self) -> &[RerankerModel] {
        match self {
            CalibratedPredictor::SnapshotEnsemble {
                snapshots,
                use_last,
            } => &snapshots[snapshots.len().saturating_sub(*use_last)..],
            _ => self.members(),
        }
    }

    /// Replaces the sampling seed of an MC-dropout predictor; other
    /// predictors are returned unchanged.
    pub fn with_mc_seed(mut self, new_seed: u64) -> Self {
        if let CalibratedPredictor::McDropout { seed, .. } = &mut self {
            *seed = new_seed;
        }
        self
    }
}

impl RelevanceModel for CalibratedPredictor {
    fn predict(&self, input: &InputVector) -> Result<ProbabilityDistribution> {
        match self {
            CalibratedPredictor::McDropout {
                model,
                samples,
                seed,
            } => mc_dropout_predict(model, input, *samples, *seed),
            _ => ensemble_predict(self.active_members(), input),
        }
    }

    fn space(&self) -> &FeatureSpace {
        self.members()[0].space()
    }
}

/// `(1/M) Σ_m p_{θ_m}(y|x)` over deterministic forward passes.
pub fn ensemble_predict(
    members: &[RerankerModel],
    input: &InputVector,
) -> Result<ProbabilityDistribution> {
    if members.is_empty() {
        return Err(Error::invalid("ensemble has no members"));
    }
    let outputs = members
        .par_iter()
        .map(|m| m.forward(input, ForwardMode::Deterministic))
        .collect::<Result<Vec<_>>>()?;
    ProbabilityDistribution::mean(&outputs)
}

/// Seed of the `t`-th Monte Carlo mask.
pub fn mc_sample_seed(seed: u64, t: u64) -> u64 {
    derive_seed(seed, t)
}

/// `(1/T) Σ_t p(y | x, θ_t)` with `θ_t` a dropout mask drawn from
/// `(seed, t)`.
pub fn mc_dropout_predict(
    model: &RerankerModel,
    input: &InputVector,
    samples: usize,
    seed: u64,
) -> Result<ProbabilityDistribution> {
    if samples == 0 {
        return Err(Error::invalid("MC dropout needs at least one sample"));
    }
    let outputs = (0..samples as u64)
        .into_par_iter()
        .map(|t| model.forward(input, ForwardMode::SampledMask(mc_sample_seed(seed, t))))
        .collect::<Result<Vec<_>>>()?;
    ProbabilityDistribution::mean(&outputs)
}

/// Scores every candidate by `p(relevant)` and sorts descending; ties keep the
/// base rank, then doc id. Ranks are reassigned from 1.
pub fn rerank_candidates<M: RelevanceModel + ?Sized>(
    model: &M,
    query_tokens: &[String],
    candidates: &[(&Document, RetrievalResult)],
) -> Result<Vec<RetrievalResult>> {
    let space = model.space();
    let scores = candidates
        .par_iter()
        .map(|(doc, _)| {
            let x = space.encode_tokens(query_tokens, &doc.tokens);
            model.predict(&x).map(|p| p.positive())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut scored: Vec<(f64, &RetrievalResult)> =
        scores.into_iter().zip(candidates.iter().map(|c| &c.1)).collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.rank.cmp(&b.1.rank))
            .then_with(|| a.1.doc_id.cmp(&b.1.doc_id))
    });
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (score, r))| RetrievalResult {
            score,
            rank: i + 1,
            ..r.clone()
        })
        .collect())
}

fn init_and_train(
    space: &Arc<FeatureSpace>,
    dataset: &[LabeledExample],
    model_config: &ModelConfig,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    let model = RerankerModel::init(space.clone(), model_config, config.seed)?;
    train(model, dataset, config)
}

/// Plain training of a single model initialized from `config.seed`.
pub fn train_single(
    space: &Arc<FeatureSpace>,
    dataset: &[LabeledExample],
    model_config: &ModelConfig,
    config: &TrainingConfig,
) -> Result<RerankerModel> {
    let model = RerankerModel::init(space.clone(), model_config, config.seed)?;
    Ok(train_with_observer(model, dataset, config, |_| {})?.0)
}

/// Trains one member per seed; member order follows `seeds`.
pub fn train_deep_ensemble(
    space: &Arc<FeatureSpace>,
    dataset: &[LabeledExample],
    model_config: &ModelConfig,
    config: &TrainingConfig,
    seeds: &[u64],
) -> Result<CalibratedPredictor> {
    if seeds.is_empty() {
        return Err(Error::invalid("deep ensemble needs at least one seed"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("deep ensemble seeds must be distinct"));
    }
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainingConfig {
                seed,
                ..config.clone()
            };
            train_single(space, dataset, model_config, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibratedPredictor::DeepEnsemble(members))
}

/// One cyclic-annealing run over `cycles` cycles with a snapshot at the end of
/// each. When fewer than `use_last` snapshots exist all are used.
pub fn train_snapshot_ensemble(
    space: &Arc<FeatureSpace>,
    dataset: &[LabeledExample],
    model_config: &ModelConfig,
    config: &TrainingConfig,
    cycles: usize,
    use_last: usize,
) -> Result<CalibratedPredictor> {
    if use_last == 0 {
        return Err(Error::invalid("use_last must be at least 1"));
    }
    let cfg = TrainingConfig {
        schedule: Schedule::CyclicAnnealing { cycles },
        ..config.clone()
    };
    let outcome = init_and_train(space, dataset, model_config, &cfg)?;
    let snapshots = outcome
        .checkpoints
        .into_iter()
        .map(|c| outcome.model.with_params(c.params))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibratedPredictor::SnapshotEnsemble {
        snapshots,
        use_last,
    })
}

/// Weight-averaging fold `(w_swa·n + w)/(n + 1)`, elementwise.
pub fn swa_update(w_swa: &[f64], n_models: usize, w: &[f64]) -> Result<Vec<f64>> {
    if w_swa.len() != w.len() {
        return Err(Error::ShapeMismatch {
            expected: w_swa.len(),
            found: w.len(),
        });
    }
    if n_models == 0 {
        return Err(Error::invalid("n_models must be at least 1"));
    }
    let n = n_models as f64;
    Ok(w_swa
        .iter()
        .zip(w)
        .map(|(a, b)| (a * n + b) / (n + 1.0))
        .collect())
}

fn swa_update_params(acc: &mut Params, n_models: usize, w: &Params) -> Result<()> {
    if !acc.same_shape(w) {
        return Err(Error::ShapeMismatch {
            expected: acc.len(),
            found: w.len(),
        });
    }
    for (a, b) in acc.blocks_mut().into_iter().zip(w.blocks()) {
        *a = swa_update(a, n_models, b)?;
    }
    Ok(())
}

/// Index of the first checkpoint inside `window` out of `count`.
pub fn window_start(count: usize, window: SwaWindow) -> Result<usize> {
    match window {
        SwaWindow::FullTrajectory => Ok(0),
        SwaWindow::LastFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid(format!("window fraction {f} outside (0, 1]")));
            }
            let keep = ((f * count as f64) - 1e-9).ceil().max(0.0) as usize;
            Ok(count - keep.min(count))
        }
    }
}

/// Folds the windowed checkpoints, in step order, into a single model that
/// shares `base`'s feature space and dropout rate.
pub fn swa_finalize(
    base: &RerankerModel,
    checkpoints: &[Checkpoint],
    window: SwaWindow,
) -> Result<RerankerModel> {
    let start = window_start(checkpoints.len(), window)?;
    let mut selected: Vec<&Checkpoint> = checkpoints[start..].iter().collect();
    if selected.is_empty() {
        return Err(Error::invalid("no checkpoints inside the averaging window"));
    }
    selected.sort_by_key(|c| c.step);
    let mut acc = selected[0].params.clone();
    for (n, c) in selected.iter().enumerate().skip(1) {
        swa_update_params(&mut acc, n, &c.params)?;
    }
    base.with_params(acc)
}

/// Trains once and folds checkpoints into the running average as they are
/// produced, without keeping them.
pub fn train_swa(
    space: &Arc<FeatureSpace>,
    dataset: &[LabeledExample],
    model_config: &ModelConfig,
    config: &TrainingConfig,
    window: SwaWindow,
) -> Result<CalibratedPredictor> {
    config.validate()?;
    let total = config.total_steps(dataset.len());
    let planned = checkpoint_steps(config, total).len();
    let start = window_start(planned, window)?;
    if start >= planned {
        return Err(Error::invalid("no checkpoints inside the averaging window"));
    }
    let model = RerankerModel::init(space.clone(), model_config, config.seed)?;
    let mut acc: Option<Params> = None;
    let mut seen = 0usize;
    let mut folded = 0usize;
    let mut fold_error = None;
    let (model, _) = train_with_observer(model, dataset, config, |view| {
        if seen >= start {
            match acc.as_mut() {
                None => acc = Some(view.params.clone()),
                Some(a) => {
                    if let Err(e) = swa_update_params(a, folded, view.params) {
                        fold_error.get_or_insert(e);
                    }
                }
            }
            folded += 1;
        }
        seen += 1;
    })?;
    if let Some(e) = fold_error {
        return Err(e);
    }
    let acc = acc.ok_or_else(|| Error::invalid("no checkpoints inside the averaging window"))?;
    Ok(CalibratedPredictor::Swa(model.with_params(acc)?))
}

/// Trains a single model and wraps it for MC-dropout prediction.
pub fn train_mc_dropout(
    space: &Arc<FeatureSpace>,
    dataset: &[LabeledExample],
    model_config: &ModelConfig,
    config: &TrainingConfig,
    samples: usize,
    seed: u64,
) -> Result<CalibratedPredictor> {
    if samples == 0 {
        return Err(Error::invalid("MC dropout needs at least one sample"));
    }
    let model = train_single(space, dataset, model_config, config)?;
    Ok(CalibratedPredictor::McDropout {
        model,
        samples,
        seed,
    })
}

/// Dispatches on `method`.
pub fn calibrate(
    space: &Arc<FeatureSpace>,
    dataset: &[LabeledExample],
    model_config: &ModelConfig,
    config: &TrainingConfig,
    method: &EnsembleMethod,
) -> Result<CalibratedPredictor> {
    match method {
        EnsembleMethod::DeepEnsemble { seeds } => {
            train_deep_ensemble(space, dataset, model_config, config, seeds)
        }
        EnsembleMethod::SnapshotEnsemble { cycles, use_last } => {
            train_snapshot_ensemble(space, dataset, model_config, config, *cycles, *use_last)
        }
        EnsembleMethod::Swa { window } => train_swa(space, dataset, model_config, config, *window),
        EnsembleMethod::McDropout { samples, seed } => {
            train_mc_dropout(space, dataset, model_config, config, *samples, *seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetrics {
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    /// Set when some `p(y_true)` was 0 and had to be clamped for the NLL.
    pub clamped: bool,
}

pub const ECE_BINS: usize = 10;
const NLL_FLOOR: f64 = 1e-12;

/// Negative log-likelihood, Brier score and expected calibration error over
/// ten equal-width bins of max-class confidence.
pub fn calibration_metrics(
    predictions: &[ProbabilityDistribution],
    labels: &[usize],
) -> Result<CalibrationMetrics> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = predictions.len() as f64;
    let mut nll = 0.0;
    let mut brier = 0.0;
    let mut clamped = false;
    let mut bins = [(0usize, 0.0f64, 0.0f64); ECE_BINS];
    for (p, &y) in predictions.iter().zip(labels) {
        let probs = p.probabilities();
        if y >= probs.len() {
            return Err(Error::invalid(format!("label {y} outside {} classes", probs.len())));
        }
        let py = probs[y];
        if py <= 0.0 {
            clamped = true;
        }
        nll -= py.max(NLL_FLOOR).ln();
        brier += probs
            .iter()
            .enumerate()
            .map(|(c, &pc)| {
                let target = if c == y { 1.0 } else { 0.0 };
                (pc - target).powi(2)
            })
            .sum::<f64>();
        let conf = p.max();
        let b = ((conf * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        bins[b].0 += 1;
        bins[b].1 += if p.argmax() == y { 1.0 } else { 0.0 };
        bins[b].2 += conf;
    }
    let ece = bins
        .iter()
        .filter(|b| b.0 > 0)
        .map(|&(count, correct, conf)| {
            let c = count as f64;
            (c / n) * (correct / c - conf / c).abs()
        })
        .sum();
    Ok(CalibrationMetrics {
        nll: nll / n,
        brier: brier / n,
        ece,
        clamped,
    })
}

// Predictor container:
//   "CRPD" | version u8 | method tag u8 | use_last u32 | samples u32 | mc seed u64
//   | member count u32 | member count × (u64 byte length, model blob)
const PREDICTOR_MAGIC: &[u8; 4] = b"CRPD";
const PREDICTOR_VERSION: u8 = 1;

pub fn predictor_to_bytes(predictor: &CalibratedPredictor) -> Vec<u8> {
    let (tag, use_last, samples, seed) = match predictor {
        CalibratedPredictor::Deterministic(_) => (0u8, 0u32, 0u32, 0u64),
        CalibratedPredictor::DeepEnsemble(_) => (1, 0, 0, 0),
        CalibratedPredictor::SnapshotEnsemble { use_last, .. } => (2, *use_last as u32, 0, 0),
        CalibratedPredictor::Swa(_) => (3, 0, 0, 0),
        CalibratedPredictor::McDropout { samples, seed, .. } => (4, 0, *samples as u32, *seed),
    };
    let mut out = Vec::new();
    out.extend_from_slice(PREDICTOR_MAGIC);
    out.push(PREDICTOR_VERSION);
    out.push(tag);
    out.extend_from_slice(&use_last.to_le_bytes());
    out.extend_from_slice(&samples.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    let members = predictor.members();
    out.extend_from_slice(&(members.len() as u32).to_le_bytes());
    for m in members {
        let blob = model_to_bytes(m);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    out
}

pub fn predictor_from_bytes(buf: &[u8]) -> Result<CalibratedPredictor> {
    let fmt = |m: &str| Error::Format(m.to_owned());
    if buf.len() < 26 || &buf[..4] != PREDICTOR_MAGIC {
        return Err(fmt("not a predictor container"));
    }
    if buf[4] != PREDICTOR_VERSION {
        return Err(Error::Format(format!("unsupported version {}", buf[4])));
    }
    let tag = buf[5];
    let use_last = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let samples = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(buf[14..22].try_into().unwrap());
    let count = u32::from_le_bytes(buf[22..26].try_into().unwrap()) as usize;
    let mut pos = 26;
    let mut members = Vec::with_capacity(count);
    for _ in 0..count {
        let len_bytes = buf.get(pos..pos + 8).ok_or_else(|| fmt("truncated member header"))?;
        let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 8;
        let blob = buf
            .get(pos..pos.saturating_add(len))
            .ok_or_else(|| fmt("truncated member"))?;
        let (model, used) = model_from_prefix(blob)?;
        if used != len {
            return Err(fmt("member length mismatch"));
        }
        members.push(model);
        pos += len;
    }
    if pos != buf.len() {
        return Err(fmt("trailing bytes"));
    }
    if members.is_empty() {
        return Err(fmt("predictor has no members"));
    }
    let first = &members[0];
    if members.iter().any(|m| {
        m.space() != first.space()
            || m.hidden_dim() != first.hidden_dim()
            || m.dropout_rate() != first.dropout_rate()
    }) {
        return Err(fmt("members disagree on architecture or vocabulary"));
    }
    let single = |mut ms: Vec<RerankerModel>| {
        if ms.len() != 1 {
            return Err(fmt("expected exactly one member"));
        }
        Ok(ms.remove(0))
    };
    Ok(match tag {
        0 => CalibratedPredictor::Deterministic(single(members)?),
        1 => CalibratedPredictor::DeepEnsemble(members),
        2 => CalibratedPredictor::SnapshotEnsemble {
            snapshots: members,
            use_last: use_last.max(1),
        },
        3 => CalibratedPredictor::Swa(single(members)?),
        4 => CalibratedPredictor::McDropout {
            model: single(members)?,
            samples: samples.max(1),
            seed,
        },
        t => return Err(Error::Format(format!("unknown method tag {t}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::reranker::cyclic_lr;
    use proptest::prelude::*;

    fn space() -> Arc<FeatureSpace> {
        Arc::new(FeatureSpace::new(
            Vocabulary::from_tokens(["good", "bad", "meh", "x", "y"]),
            4,
            0,
        ))
    }

    fn dataset(space: &FeatureSpace) -> Vec<LabeledExample> {
        (0..30)
            .map(|i| {
                let label = (i % 3 != 0) as usize;
                let cue = if label == 1 { "good" } else { "bad" };
                let noise = ["x", "y", "meh"][i % 3];
                LabeledExample {
                    input: space.encode_tokens(&["q"], &[cue, noise]),
                    label,
                }
            })
            .collect()
    }

    fn small_model_cfg(dropout: f64) -> ModelConfig {
        ModelConfig {
            hidden_dim: 6,
            dropout_rate: dropout,
            ..ModelConfig::default()
        }
    }

    fn cfg() -> TrainingConfig {
        TrainingConfig {
            epochs: 10,
            batch_size: 6,
            ..TrainingConfig::default()
        }
    }

    /// A model whose output is the constant distribution `(1−p, p)`.
    fn constant_model(p: f64) -> RerankerModel {
        let s = space();
        let mut params = Params::zeros(s.dim(), 1);
        params.b2 = vec![0.0, (p / (1.0 - p)).ln()];
        RerankerModel::new(s, params, 0.0).unwrap()
    }

    fn probe(space: &FeatureSpace) -> InputVector {
        space.encode_tokens(&["q"], &["good", "x"])
    }

    #[test]
    fn ensemble_of_two_constant_members() {
        let members = vec![constant_model(0.8), constant_model(0.4)];
        let x = probe(members[0].space());
        let p = ensemble_predict(&members, &x).unwrap();
        assert!((p.probabilities()[0] - 0.4).abs() < 1e-12);
        assert!((p.probabilities()[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ensemble_of_three_constant_members() {
        let members = vec![constant_model(0.9), constant_model(0.25), constant_model(0.5)];
        let x = probe(members[0].space());
        let p = ensemble_predict(&members, &x).unwrap();
        let hand = (0.9 + 0.25 + 0.5) / 3.0;
        let single: Vec<f64> = members
            .iter()
            .map(|m| m.forward(&x, ForwardMode::Deterministic).unwrap().positive())
            .collect();
        let direct = single.iter().sum::<f64>() / 3.0;
        assert!((p.positive() - hand).abs() < 1e-12);
        assert!((p.positive() - direct).abs() < 1e-12);
    }

    #[test]
    fn identical_members_reproduce_single_model() {
        let s = space();
        let m = RerankerModel::init(s.clone(), &small_model_cfg(0.0), 3).unwrap();
        let x = probe(&s);
        let single = m.forward(&x, ForwardMode::Deterministic).unwrap();
        let ens = ensemble_predict(&vec![m.clone(); 5], &x).unwrap();
        assert_eq!(ens, single);
        assert_eq!(ens.argmax(), single.argmax());
    }

    #[test]
    fn deep_ensemble_members() {
        let s = space();
        let data = dataset(&s);
        let one = train_deep_ensemble(&s, &data, &small_model_cfg(0.1), &cfg(), &[7]).unwrap();
        let plain = train_single(&s, &data, &small_model_cfg(0.1), &TrainingConfig { seed: 7, ..cfg() }).unwrap();
        assert_eq!(one.members(), std::slice::from_ref(&plain));

        let three = train_deep_ensemble(&s, &data, &small_model_cfg(0.1), &cfg(), &[1, 2, 3]).unwrap();
        let ms = three.members();
        assert_eq!(ms.len(), 3);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(ms[i].params(), ms[j].params());
            }
        }
        let again = train_deep_ensemble(&s, &data, &small_model_cfg(0.1), &cfg(), &[1, 2, 3]).unwrap();
        assert_eq!(three, again);
        assert!(train_deep_ensemble(&s, &data, &small_model_cfg(0.1), &cfg(), &[1, 1]).is_err());
    }

    #[test]
    fn snapshot_ensemble_bookkeeping() {
        let s = space();
        let data = dataset(&s);
        // 30 examples / batch 6 = 5 steps per epoch, 10 epochs = 50 steps.
        let c = cfg();
        let pred = train_snapshot_ensemble(&s, &data, &small_model_cfg(0.1), &c, 5, 3).unwrap();
        assert_eq!(pred.members().len(), 5);
        assert_eq!(pred.active_members().len(), 3);
        assert_eq!(pred.active_members(), &pred.members()[2..]);

        let cyc = TrainingConfig {
            schedule: Schedule::CyclicAnnealing { cycles: 5 },
            ..c.clone()
        };
        let out = train(
            RerankerModel::init(s.clone(), &small_model_cfg(0.1), c.seed).unwrap(),
            &data,
            &cyc,
        )
        .unwrap();
        let steps: Vec<usize> = out.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![10, 20, 30, 40, 50]);
        for &t in &steps {
            let lr = cyclic_lr(t, 50, 5, c.learning_rate).unwrap();
            let independent = c.learning_rate / 2.0
                * ((std::f64::consts::PI * 9.0 / 10.0).cos() + 1.0);
            assert!((lr - independent).abs() < 1e-12);
            let cycle_start = t - 9;
            let cycle_min = (cycle_start..=t)
                .map(|u| cyclic_lr(u, 50, 5, c.learning_rate).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(lr, cycle_min);
        }
        assert!(train_snapshot_ensemble(&s, &data, &small_model_cfg(0.1), &c, 51, 3).is_err());
    }

    #[test]
    fn single_cycle_snapshot_is_plain_cosine_training() {
        let s = space();
        let data = dataset(&s);
        let c = cfg();
        let pred = train_snapshot_ensemble(&s, &data, &small_model_cfg(0.1), &c, 1, 1).unwrap();
        let plain = train_single(
            &s,
            &data,
            &small_model_cfg(0.1),
            &TrainingConfig {
                schedule: Schedule::CyclicAnnealing { cycles: 1 },
                ..c
            },
        )
        .unwrap();
        assert_eq!(pred.active_members(), std::slice::from_ref(&plain));
    }

    #[test]
    fn snapshot_with_fewer_cycles_than_use_last_uses_all() {
        let s = space();
        let pred =
            train_snapshot_ensemble(&s, &dataset(&s), &small_model_cfg(0.1), &cfg(), 2, 3).unwrap();
        assert_eq!(pred.active_members().len(), 2);
    }

    #[test]
    fn swa_update_examples() {
        assert_eq!(swa_update(&[1.0, 1.0], 1, &[3.0, 3.0]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(swa_update(&[0.5, -2.0], 1, &[0.5, -2.0]).unwrap(), vec![0.5, -2.0]);
        let a = vec![0.0, 2.0];
        let b = swa_update(&a, 1, &[2.0, 2.0]).unwrap();
        let c = swa_update(&b, 2, &[4.0, 2.0]).unwrap();
        assert_eq!(c, vec![2.0, 2.0]);
        assert!(swa_update(&[1.0], 1, &[1.0, 2.0]).is_err());
    }

    fn checkpoint(step: usize, value: f64) -> Checkpoint {
        let s = space();
        let mut p = Params::zeros(s.dim(), 1);
        p.b1 = vec![value];
        Checkpoint {
            params: p,
            step,
            cycle: None,
        }
    }

    #[test]
    fn swa_windows() {
        let base = constant_model(0.5);
        let base = base.with_params(Params::zeros(base.space().dim(), 1)).unwrap();
        let one = swa_finalize(&base, &[checkpoint(3, 1.25)], SwaWindow::FullTrajectory).unwrap();
        assert_eq!(one.params().b1, vec![1.25]);

        let ten: Vec<Checkpoint> = (1..=10).map(|i| checkpoint(i, i as f64)).collect();
        let last = swa_finalize(&base, &ten, SwaWindow::LastFraction(0.3)).unwrap();
        assert_eq!(last.params().b1, vec![9.0]);
        assert_eq!(window_start(10, SwaWindow::LastFraction(0.3)).unwrap(), 7);
        assert!(swa_finalize(&base, &[], SwaWindow::FullTrajectory).is_err());
    }

    #[test]
    fn streaming_swa_equals_batch_finalize() {
        let s = space();
        let data = dataset(&s);
        let mc = small_model_cfg(0.1);
        for window in [SwaWindow::FullTrajectory, SwaWindow::LastFraction(0.3)] {
            let streamed = train_swa(&s, &data, &mc, &cfg(), window).unwrap();
            let out = train(RerankerModel::init(s.clone(), &mc, 0).unwrap(), &data, &cfg()).unwrap();
            let batch = swa_finalize(&out.model, &out.checkpoints, window).unwrap();
            assert_eq!(streamed.members(), std::slice::from_ref(&batch));
        }
    }

    #[test]
    fn mc_dropout_degenerate_cases() {
        let s = space();
        let x = probe(&s);
        let m0 = RerankerModel::init(s.clone(), &small_model_cfg(0.0), 1).unwrap();
        let det = m0.forward(&x, ForwardMode::Deterministic).unwrap();
        for t in [1, 3, 50] {
            assert_eq!(mc_dropout_predict(&m0, &x, t, 9).unwrap(), det);
        }
        let m = RerankerModel::init(s.clone(), &small_model_cfg(0.5), 1).unwrap();
        let single = m
            .forward(&x, ForwardMode::SampledMask(mc_sample_seed(4, 0)))
            .unwrap();
        assert_eq!(mc_dropout_predict(&m, &x, 1, 4).unwrap(), single);
    }

    #[test]
    fn mc_dropout_independent_runs_agree() {
        let s = space();
        let x = probe(&s);
        let m = RerankerModel::init(
            s.clone(),
            &ModelConfig {
                hidden_dim: 16,
                dropout_rate: 0.3,
                init_scale: 1.0,
                zero_init_output: false,
            },
            2,
        )
        .unwrap();
        let a = mc_dropout_predict(&m, &x, 10_000, 1).unwrap();
        let b = mc_dropout_predict(&m, &x, 10_000, 2).unwrap();
        for (p, q) in a.probabilities().iter().zip(b.probabilities()) {
            assert!((p - q).abs() < 0.01);
        }
    }

    #[test]
    fn mc_dropout_variance_shrinks_with_samples() {
        let s = space();
        let x = probe(&s);
        let m = RerankerModel::init(
            s.clone(),
            &ModelConfig {
                hidden_dim: 16,
                dropout_rate: 0.3,
                init_scale: 1.0,
                zero_init_output: false,
            },
            2,
        )
        .unwrap();
        let var = |t: usize| {
            let xs: Vec<f64> = (0..60)
                .map(|r| mc_dropout_predict(&m, &x, t, 1000 + r).unwrap().positive())
                .collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let (v1, v4) = (var(1000), var(4000));
        // Expected ratio 1/4; the sample-variance ratio of 60 runs has a
        // relative spread of roughly ±26%, so allow up to 0.4.
        assert!(v4 < 0.4 * v1, "{v4} vs {v1}");
    }

    #[test]
    fn calibration_metric_examples() {
        let perfect = vec![ProbabilityDistribution::new(vec![1.0, 0.0]).unwrap(); 4];
        let m = calibration_metrics(&perfect, &[0, 0, 0, 0]).unwrap();
        assert_eq!((m.nll, m.brier, m.ece), (0.0, 0.0, 0.0));

        let half = vec![ProbabilityDistribution::new(vec![0.5, 0.5]).unwrap()];
        assert!((calibration_metrics(&half, &[0]).unwrap().brier - 0.5).abs() < 1e-15);

        let wrong = vec![ProbabilityDistribution::new(vec![0.0, 1.0]).unwrap()];
        let m = calibration_metrics(&wrong, &[0]).unwrap();
        assert!(m.clamped);
        assert!((m.nll - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(calibration_metrics(&half, &[0, 1]).is_err());
    }

    #[test]
    fn predictor_container_roundtrip() {
        let s = space();
        let data = dataset(&s);
        let mc = small_model_cfg(0.1);
        let preds = vec![
            CalibratedPredictor::Deterministic(train_single(&s, &data, &mc, &cfg()).unwrap()),
            train_snapshot_ensemble(&s, &data, &mc, &cfg(), 3, 2).unwrap(),
            train_mc_dropout(&s, &data, &mc, &cfg(), 5, 77).unwrap(),
        ];
        for p in preds {
            let bytes = predictor_to_bytes(&p);
            assert_eq!(predictor_from_bytes(&bytes).unwrap(), p);
            assert!(predictor_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        }
    }

    proptest! {
        #[test]
        fn ensemble_is_convex_combination(ps in proptest::collection::vec(0.01f64..0.99, 1..6)) {
            let members: Vec<RerankerModel> = ps.iter().map(|&p| constant_model(p)).collect();
            let x = probe(members[0].space());
            let out = ensemble_predict(&members, &x).unwrap();
            let outs: Vec<f64> = members.iter().map(|m| m.forward(&x, ForwardMode::Deterministic).unwrap().positive()).collect();
            let lo = outs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = outs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.positive() >= lo - 1e-15 && out.positive() <= hi + 1e-15);
        }

        #[test]
        fn swa_fold_equals_direct_mean(rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 5), 1..64)) {
            let mut acc = rows[0].clone();
            for (n, r) in rows.iter().enumerate().skip(1) {
                acc = swa_update(&acc, n, r).unwrap();
            }
            for j in 0..5 {
                let direct = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                prop_assert!((acc[j] - direct).abs() < 1e-12);
            }
        }
    }
}
