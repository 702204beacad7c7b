//! Model-agnostic token attributions and feature-score reranking.
//!
//! The interpretable units of a `(query, context)` pair are the distinct
//! context tokens. A coalition (mask) keeps some units and removes the rest
//! from the context before the reranker is queried for `p(relevant)`.
//!
//! - [`lime_weights`]: weighted ridge surrogate over random masks.
//! - [`kernel_shap_values`]: Shapley-kernel weighted least squares with the
//!   efficiency constraint eliminated; exact enumeration for small `d`.
//! - [`exact_shapley`]: brute-force reference for `d ≤ 12`.
//!
//! Explanations of several contexts are summed into a [`FeatureScoreTable`]
//! whose token scores reorder the top candidates.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::RelevanceModel;
use crate::corpus::{distinct, Document, Query};
use crate::error::{Error, Result};
use crate::retrieval::RetrievalResult;
use crate::rng::derive_seed;

/// A scalar function of a coalition mask.
pub trait BlackBox: Sync {
    fn evaluate(&self, mask: &[bool]) -> Result<f64>;
}

impl<F> BlackBox for F
where
    F: Fn(&[bool]) -> f64 + Sync,
{
    fn evaluate(&self, mask: &[bool]) -> Result<f64> {
        Ok(self(mask))
    }
}

/// The reranker's positive-class probability for a query and a context
/// restricted to the kept units.
pub struct MaskedContext<'a, M: ?Sized> {
    model: &'a M,
    query: Vec<String>,
    units: Vec<String>,
}

impl<'a, M: RelevanceModel + ?Sized> MaskedContext<'a, M> {
    pub fn new(model: &'a M, query_tokens: &[String], context_tokens: &[String]) -> Self {
        MaskedContext {
            model,
            query: query_tokens.to_vec(),
            units: distinct(context_tokens),
        }
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }
}

impl<M: RelevanceModel + ?Sized> BlackBox for MaskedContext<'_, M> {
    fn evaluate(&self, mask: &[bool]) -> Result<f64> {
        if mask.len() != self.units.len() {
            return Err(Error::ShapeMismatch {
                expected: self.units.len(),
                found: mask.len(),
            });
        }
        let kept: Vec<&String> = self
            .units
            .iter()
            .zip(mask)
            .filter(|(_, &keep)| keep)
            .map(|(u, _)| u)
            .collect();
        let x = self.model.space().encode_tokens(&self.query, &kept);
        Ok(self.model.predict(&x)?.positive())
    }
}

fn evaluate_all<B: BlackBox + ?Sized>(black_box: &B, masks: &[Vec<bool>]) -> Result<Vec<f64>> {
    let values = masks
        .par_iter()
        .map(|m| black_box.evaluate(m))
        .collect::<Result<Vec<f64>>>()?;
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("black box returned {v}")));
    }
    Ok(values)
}

struct LinearFit {
    coefficients: Vec<f64>,
    intercept: f64,
    pseudo_inverse: bool,
}

/// Solves `a·x = b` by Cholesky; when `a` is not positive definite falls back
/// to the Moore–Penrose pseudo-inverse and reports it.
fn solve_symmetric(a: DMatrix<f64>, b: DVector<f64>) -> Result<(DVector<f64>, bool)> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(&b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok((x, false));
        }
    }
    let pinv = a
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Numerical(format!("pseudo-inverse failed: {e}")))?;
    Ok((pinv * b, true))
}

/// Weighted ridge regression over the columns in `columns` of the binary
/// design. With `fit_intercept` the data are centred at their weighted means
/// so the intercept is not penalized.
fn weighted_ridge(
    design: &[Vec<bool>],
    columns: &[usize],
    targets: &[f64],
    weights: &[f64],
    ridge: f64,
    fit_intercept: bool,
) -> Result<LinearFit> {
    let p = columns.len();
    let total_w: f64 = weights.iter().sum();
    if total_w <= 0.0 {
        return Err(Error::Numerical("sample weights sum to zero".into()));
    }
    let x = |r: usize, j: usize| if design[r][columns[j]] { 1.0 } else { 0.0 };
    let (x_mean, y_mean) = if fit_intercept {
        let xm: Vec<f64> = (0..p)
            .map(|j| (0..design.len()).map(|r| weights[r] * x(r, j)).sum::<f64>() / total_w)
            .collect();
        let ym = targets.iter().zip(weights).map(|(y, w)| w * y).sum::<f64>() / total_w;
        (xm, ym)
    } else {
        (vec![0.0; p], 0.0)
    };
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for r in 0..design.len() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = x(r, j) - x_mean[j];
        }
        let w = weights[r];
        let yc = targets[r] - y_mean;
        for i in 0..p {
            if row[i] == 0.0 {
                continue;
            }
            let wi = w * row[i];
            b[i] += wi * yc;
            for j in 0..p {
                a[(i, j)] += wi * row[j];
            }
        }
    }
    for i in 0..p {
        a[(i, i)] += ridge;
    }
    let (beta, pseudo_inverse) = solve_symmetric(a, b)?;
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(c, m)| c * m).sum::<f64>();
    Ok(LinearFit {
        coefficients,
        intercept,
        pseudo_inverse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    pub n_samples: usize,
    pub n_features: usize,
    /// `None` selects `0.25·√d`.
    pub kernel_width: Option<f64>,
    pub ridge: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            n_samples: 150,
            n_features: 10,
            kernel_width: None,
            ridge: 1.0,
        }
    }
}

/// Surrogate weights for the selected units, as `(unit index, weight)` in
/// ascending unit order.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitAttribution {
    pub weights: Vec<(usize, f64)>,
    pub intercept: f64,
    pub pseudo_inverse: bool,
}

/// Cosine distance between a mask and the all-ones mask.
pub fn mask_distance(mask: &[bool]) -> f64 {
    let kept = mask.iter().filter(|&&b| b).count();
    if kept == 0 {
        1.0
    } else {
        1.0 - (kept as f64 / mask.len() as f64).sqrt()
    }
}

pub fn lime_weights<B: BlackBox + ?Sized>(
    black_box: &B,
    d: usize,
    config: &LimeConfig,
    seed: u64,
) -> Result<UnitAttribution> {
    if d == 0 {
        return Err(Error::invalid("nothing to explain: context has no tokens"));
    }
    if config.n_samples == 0 || config.n_features == 0 {
        return Err(Error::invalid("LIME needs n_samples ≥ 1 and n_features ≥ 1"));
    }
    if !(config.ridge >= 0.0) {
        return Err(Error::invalid("ridge penalty must be non-negative"));
    }
    let width = config.kernel_width.unwrap_or(0.25 * (d as f64).sqrt());
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::invalid(format!("kernel width {width} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(config.n_samples);
    masks.push(vec![true; d]);
    while masks.len() < config.n_samples {
        masks.push((0..d).map(|_| rng.random_bool(0.5)).collect());
    }
    let targets = evaluate_all(black_box, &masks)?;
    let weights: Vec<f64> = masks
        .iter()
        .map(|m| {
            let dist = mask_distance(m);
            (-(dist * dist) / (width * width)).exp()
        })
        .collect();

    let all: Vec<usize> = (0..d).collect();
    let full = weighted_ridge(&masks, &all, &targets, &weights, config.ridge, true)?;
    let mut order = all.clone();
    order.sort_by(|&a, &b| {
        full.coefficients[b]
            .abs()
            .total_cmp(&full.coefficients[a].abs())
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(config.n_features).collect();
    selected.sort_unstable();
    let refit = weighted_ridge(&masks, &selected, &targets, &weights, config.ridge, true)?;
    Ok(UnitAttribution {
        weights: selected.into_iter().zip(refit.coefficients).collect(),
        intercept: refit.intercept,
        pseudo_inverse: full.pseudo_inverse || refit.pseudo_inverse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapConfig {
    pub n_samples: usize,
    /// Sample coalitions even when enumerating them all would be cheap.
    pub force_sampling: bool,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig {
            n_samples: 2048,
            force_sampling: false,
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of a coalition of size `s` out of `d`.
pub fn shapley_kernel_weight(d: usize, s: usize) -> f64 {
    (d - 1) as f64 / (binomial(d, s) * s as f64 * (d - s) as f64)
}

fn bits_to_mask(bits: usize, d: usize) -> Vec<bool> {
    (0..d).map(|i| bits >> i & 1 == 1).collect()
}

/// Shapley-value estimates for all `d` units. The intercept is `f(∅)` and the
/// values sum to `f(N) − f(∅)`.
pub fn kernel_shap_values<B: BlackBox + ?Sized>(
    black_box: &B,
    d: usize,
    config: &ShapConfig,
    seed: u64,
) -> Result<UnitAttribution> {
    if d == 0 {
        return Err(Error::invalid("nothing to explain: context has no tokens"));
    }
    let ends = evaluate_all(black_box, &[vec![true; d], vec![false; d]])?;
    let (f_full, f_empty) = (ends[0], ends[1]);
    let delta = f_full - f_empty;
    if d == 1 {
        return Ok(UnitAttribution {
            weights: vec![(0, delta)],
            intercept: f_empty,
            pseudo_inverse: false,
        });
    }
    if config.n_samples == 0 {
        return Err(Error::invalid("Kernel SHAP needs n_samples ≥ 1"));
    }

    let enumerate = !config.force_sampling
        && d < usize::BITS as usize - 1
        && (1usize << d) <= 2 * config.n_samples;
    let (masks, weights): (Vec<Vec<bool>>, Vec<f64>) = if enumerate {
        (1..(1usize << d) - 1)
            .map(|bits| {
                let m = bits_to_mask(bits, d);
                let s = bits.count_ones() as usize;
                (m, shapley_kernel_weight(d, s))
            })
            .unzip()
    } else {
        let size_weights: Vec<f64> = (1..d).map(|s| shapley_kernel_weight(d, s) * binomial(d, s)).collect();
        let sizes = WeightedIndex::new(&size_weights)
            .map_err(|e| Error::Numerical(format!("coalition size weights: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..config.n_samples)
            .map(|_| {
                let s = sizes.sample(&mut rng) + 1;
                let mut m = vec![false; d];
                for i in rand::seq::index::sample(&mut rng, d, s) {
                    m[i] = true;
                }
                (m, 1.0)
            })
            .unzip()
    };
    let values = evaluate_all(black_box, &masks)?;

    // Substitute φ_last = Δ − Σ_{i<last} φ_i, leaving an unconstrained
    // problem in the first d − 1 values.
    let last = d - 1;
    let reduced: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| {
            let zl = if m[last] { 1.0 } else { 0.0 };
            (0..last)
                .map(|i| if m[i] { 1.0 } else { 0.0 } - zl)
                .collect()
        })
        .collect();
    let targets: Vec<f64> = masks
        .iter()
        .zip(&values)
        .map(|(m, v)| v - f_empty - if m[last] { delta } else { 0.0 })
        .collect();
    let mut a = DMatrix::<f64>::zeros(last, last);
    let mut b = DVector::<f64>::zeros(last);
    for ((row, &y), &w) in reduced.iter().zip(&targets).zip(&weights) {
        for i in 0..last {
            if row[i] == 0.0 {
                continue;
            }
            let wi = w * row[i];
            b[i] += wi * y;
            for j in 0..last {
                a[(i, j)] += wi * row[j];
            }
        }
    }
    let (phi, pseudo_inverse) = solve_symmetric(a, b)?;
    let mut out: Vec<(usize, f64)> = phi.iter().copied().enumerate().collect();
    out.push((last, delta - phi.iter().sum::<f64>()));
    Ok(UnitAttribution {
        weights: out,
        intercept: f_empty,
        pseudo_inverse,
    })
}

pub const EXACT_SHAPLEY_MAX_UNITS: usize = 12;

/// `φ_i = Σ_{S ⊆ N∖{i}} |S|!(d−|S|−1)!/d! · (f(S∪{i}) − f(S))` by full
/// enumeration.
pub fn exact_shapley<B: BlackBox + ?Sized>(black_box: &B, d: usize) -> Result<Vec<f64>> {
    if d == 0 {
        return Ok(Vec::new());
    }
    if d > EXACT_SHAPLEY_MAX_UNITS {
        return Err(Error::invalid(format!(
            "exact Shapley values limited to {EXACT_SHAPLEY_MAX_UNITS} units, got {d}"
        )));
    }
    let masks: Vec<Vec<bool>> = (0..1usize << d).map(|b| bits_to_mask(b, d)).collect();
    let table = evaluate_all(black_box, &masks)?;
    let factorial = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    let coef: Vec<f64> = (0..d)
        .map(|s| factorial(s) * factorial(d - s - 1) / factorial(d))
        .collect();
    Ok((0..d)
        .map(|i| {
            (0..1usize << d)
                .filter(|s| s >> i & 1 == 0)
                .map(|s| coef[s.count_ones() as usize] * (table[s | 1 << i] - table[s]))
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMethod {
    Lime,
    KernelShap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub query_id: String,
    pub context_id: String,
    pub method: ExplainMethod,
    pub weights: BTreeMap<String, f64>,
    pub intercept: f64,
    /// Weights attribute the relevant-class probability.
    pub positive_class: bool,
    /// The regression needed the pseudo-inverse fallback.
    pub pseudo_inverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub query_id: String,
    pub context_id: String,
    pub method: ExplainMethod,
    pub token: String,
    pub weight: f64,
}

impl Explanation {
    /// One flat record per token, in token order.
    pub fn records(&self) -> Vec<ExplanationRecord> {
        self.weights
            .iter()
            .map(|(token, &weight)| ExplanationRecord {
                query_id: self.query_id.clone(),
                context_id: self.context_id.clone(),
                method: self.method,
                token: token.clone(),
                weight,
            })
            .collect()
    }
}

fn into_explanation(
    query: &Query,
    context: &Document,
    units: &[String],
    method: ExplainMethod,
    fit: UnitAttribution,
) -> Result<Explanation> {
    if let Some((_, w)) = fit.weights.iter().find(|(_, w)| !w.is_finite()) {
        return Err(Error::Numerical(format!("explanation weight {w}")));
    }
    Ok(Explanation {
        query_id: query.id.clone(),
        context_id: context.id.clone(),
        method,
        weights: fit
            .weights
            .into_iter()
            .map(|(i, w)| (units[i].clone(), w))
            .collect(),
        intercept: fit.intercept,
        positive_class: true,
        pseudo_inverse: fit.pseudo_inverse,
    })
}

pub fn lime_explain<M: RelevanceModel + ?Sized>(
    model: &M,
    query: &Query,
    context: &Document,
    config: &LimeConfig,
    seed: u64,
) -> Result<Explanation> {
    let bb = MaskedContext::new(model, &query.tokens(), &context.tokens);
    let fit = lime_weights(&bb, bb.units().len(), config, seed)?;
    into_explanation(query, context, bb.units(), ExplainMethod::Lime, fit)
}

pub fn kernel_shap_explain<M: RelevanceModel + ?Sized>(
    model: &M,
    query: &Query,
    context: &Document,
    config: &ShapConfig,
    seed: u64,
) -> Result<Explanation> {
    let bb = MaskedContext::new(model, &query.tokens(), &context.tokens);
    let fit = kernel_shap_values(&bb, bb.units().len(), config, seed)?;
    into_explanation(query, context, bb.units(), ExplainMethod::KernelShap, fit)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureScoreTable {
    pub scores: BTreeMap<String, f64>,
    /// Context ids of the aggregated explanations, in input order.
    pub provenance: Vec<String>,
}

impl FeatureScoreTable {
    pub fn score(&self, token: &str) -> f64 {
        self.scores.get(token).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Signed sum of each token's weight across explanations.
pub fn build_feature_score_table(explanations: &[Explanation]) -> Result<FeatureScoreTable> {
    let mut table = FeatureScoreTable::default();
    let Some(first) = explanations.first() else {
        return Ok(table);
    };
    for e in explanations {
        if e.method != first.method {
            return Err(Error::invalid("cannot aggregate explanations of different methods"));
        }
        if e.query_id != first.query_id {
            return Err(Error::invalid("cannot aggregate explanations of different queries"));
        }
        for (token, &w) in &e.weights {
            *table.scores.entry(token.clone()).or_insert(0.0) += w;
        }
        table.provenance.push(e.context_id.clone());
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanked {
    /// The base result with its rank replaced by the new position.
    pub result: RetrievalResult,
    pub feature_score: f64,
}

/// Scores each candidate by the table scores of its distinct tokens and keeps
/// the best `k`; ties keep the base rank, then doc id.
pub fn rerank_by_feature_scores(
    table: &FeatureScoreTable,
    candidates: &[(&Document, RetrievalResult)],
    k: usize,
) -> Vec<FeatureRanked> {
    let mut scored: Vec<FeatureRanked> = candidates
        .iter()
        .map(|(doc, base)| FeatureRanked {
            result: base.clone(),
            feature_score: doc.distinct_tokens().iter().map(|t| table.score(t)).sum(),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.feature_score
            .total_cmp(&a.feature_score)
            .then(a.result.rank.cmp(&b.result.rank))
            .then_with(|| a.result.doc_id.cmp(&b.result.doc_id))
    });
    scored.truncate(k);
    for (i, s) in scored.iter_mut().enumerate() {
        s.result.rank = i + 1;
    }
    scored
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainerBudgets {
    pub lime_contexts: usize,
    pub shap_contexts: usize,
    pub rerank_depth: usize,
    pub lime: LimeConfig,
    pub shap: ShapConfig,
}

impl Default for ExplainerBudgets {
    fn default() -> Self {
        ExplainerBudgets {
            lime_contexts: 5,
            shap_contexts: 1,
            rerank_depth: 10,
            lime: LimeConfig::default(),
            shap: ShapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainerRerank {
    pub ranked: Vec<RetrievalResult>,
    pub explanations: Vec<Explanation>,
    pub table: FeatureScoreTable,
}

/// Explains the leading candidates (ranked by the base reranker), reorders
/// the top `rerank_depth` by the resulting table, and appends the rest in base
/// order.
pub fn explainer_rerank_pipeline<M: RelevanceModel + ?Sized>(
    model: &M,
    query: &Query,
    candidates: &[(&Document, RetrievalResult)],
    method: ExplainMethod,
    budgets: &ExplainerBudgets,
    seed: u64,
) -> Result<ExplainerRerank> {
    let mut base: Vec<(&Document, RetrievalResult)> =
        candidates.iter().map(|(d, r)| (*d, r.clone())).collect();
    base.sort_by(|a, b| a.1.rank.cmp(&b.1.rank).then_with(|| a.1.doc_id.cmp(&b.1.doc_id)));

    let budget = match method {
        ExplainMethod::Lime => budgets.lime_contexts,
        ExplainMethod::KernelShap => budgets.shap_contexts,
    };
    let explanations = base
        .iter()
        .take(budget)
        .enumerate()
        .filter(|(_, (doc, _))| !doc.tokens.is_empty())
        .map(|(i, (doc, _))| {
            let s = derive_seed(seed, i as u64);
            match method {
                ExplainMethod::Lime => lime_explain(model, query, doc, &budgets.lime, s),
                ExplainMethod::KernelShap => kernel_shap_explain(model, query, doc, &budgets.shap, s),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let table = build_feature_score_table(&explanations)?;

    let depth = budgets.rerank_depth.min(base.len());
    let head = rerank_by_feature_scores(&table, &base[..depth], depth);
    let seen: HashSet<&str> = head.iter().map(|h| h.result.doc_id.as_str()).collect();
    let mut ranked: Vec<RetrievalResult> = head.iter().map(|h| h.result.clone()).collect();
    for (_, r) in base.iter().filter(|(_, r)| !seen.contains(r.doc_id.as_str())) {
        ranked.push(RetrievalResult {
            rank: ranked.len() + 1,
            ..r.clone()
        });
    }
    Ok(ExplainerRerank {
        ranked,
        explanations,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{Perspective, QueryVariant};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_table(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..1usize << d).map(|_| rng.random::<f64>()).collect()
    }

    fn table_box(table: Vec<f64>) -> impl Fn(&[bool]) -> f64 + Sync {
        move |m: &[bool]| {
            let bits = m.iter().enumerate().fold(0usize, |acc, (i, &b)| acc | (b as usize) << i);
            table[bits]
        }
    }

    #[test]
    fn exact_shapley_small_cases() {
        let f = |m: &[bool]| if m[0] { 0.9 } else { 0.2 };
        let phi = exact_shapley(&f, 1).unwrap();
        assert!((phi[0] - 0.7).abs() < 1e-15);

        // v(∅)=0, v(1)=1, v(2)=2, v(3)=3, v(12)=4, v(13)=5, v(23)=6, v(123)=10
        // φ1 = 1/3(1−0) + 1/6(4−2) + 1/6(5−3) + 1/3(10−6) = 1/3 + 1/3 + 1/3 + 4/3 = 7/3
        // φ2 = 1/3(2) + 1/6(4−1) + 1/6(6−3) + 1/3(10−5) = 2/3 + 1/2 + 1/2 + 5/3 = 10/3
        // φ3 = 1/3(3) + 1/6(5−1) + 1/6(6−2) + 1/3(10−4) = 1 + 2/3 + 2/3 + 2 = 13/3
        let table = vec![0.0, 1.0, 2.0, 4.0, 3.0, 5.0, 6.0, 10.0];
        let phi = exact_shapley(&table_box(table), 3).unwrap();
        for (got, want) in phi.iter().zip([7.0 / 3.0, 10.0 / 3.0, 13.0 / 3.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(exact_shapley(&f, 13).is_err());
    }

    #[test]
    fn kernel_shap_additive_and_symmetric() {
        let v = [0.3, -0.2, 0.5, 0.05];
        let f = move |m: &[bool]| m.iter().zip(v).filter(|(b, _)| **b).map(|(_, x)| x).sum::<f64>();
        let fit = kernel_shap_values(&f, 4, &ShapConfig::default(), 0).unwrap();
        for (i, w) in &fit.weights {
            assert!((w - v[*i]).abs() < 1e-12);
        }

        let g = |m: &[bool]| {
            let ab = (m[0] as u8 + m[1] as u8) as f64;
            0.1 + 0.2 * ab * ab + if m[2] { 0.3 } else { 0.0 }
        };
        let fit = kernel_shap_values(&g, 3, &ShapConfig::default(), 0).unwrap();
        assert!((fit.weights[0].1 - fit.weights[1].1).abs() < 1e-9);
    }

    #[test]
    fn kernel_shap_matches_oracle_on_both_paths() {
        for trial in 0..20 {
            let f = table_box(random_table(6, trial));
            let exact = exact_shapley(&f, 6).unwrap();
            let enumerated = kernel_shap_values(&f, 6, &ShapConfig::default(), trial).unwrap();
            let sampled = kernel_shap_values(
                &f,
                6,
                &ShapConfig {
                    n_samples: 2000,
                    force_sampling: true,
                },
                trial,
            )
            .unwrap();
            for i in 0..6 {
                assert!((enumerated.weights[i].1 - exact[i]).abs() < 1e-6);
                assert!((sampled.weights[i].1 - exact[i]).abs() < 0.05, "trial {trial}");
            }
        }
    }

    #[test]
    fn lime_constant_and_linear() {
        let c = |_: &[bool]| 0.37;
        let fit = lime_weights(&c, 5, &LimeConfig::default(), 3).unwrap();
        assert!(fit.weights.iter().all(|(_, w)| w.abs() < 1e-9));
        assert!(!fit.pseudo_inverse);

        let lin = |m: &[bool]| 2.0 * m[0] as u8 as f64 - 1.0 * m[1] as u8 as f64;
        let fit = lime_weights(&lin, 3, &LimeConfig::default(), 3).unwrap();
        let w: Vec<f64> = fit.weights.iter().map(|p| p.1).collect();
        assert!(w[0] > w[2] && w[2] > w[1]);
        assert!(w[0] > 0.0 && w[1] < 0.0);
        assert_eq!(fit, lime_weights(&lin, 3, &LimeConfig::default(), 3).unwrap());
        assert!(lime_weights(&lin, 0, &LimeConfig::default(), 3).is_err());
    }

    #[test]
    fn lime_selects_largest_features() {
        let coef = [0.05, -0.9, 0.02, 0.7, 0.01];
        let f = move |m: &[bool]| m.iter().zip(coef).filter(|(b, _)| **b).map(|(_, c)| c).sum::<f64>();
        let cfg = LimeConfig {
            n_features: 2,
            ..LimeConfig::default()
        };
        let fit = lime_weights(&f, 5, &cfg, 11).unwrap();
        let idx: Vec<usize> = fit.weights.iter().map(|p| p.0).collect();
        assert_eq!(idx, vec![1, 3]);
    }

    #[test]
    fn mask_distance_values() {
        assert_eq!(mask_distance(&[true, true, true, true]), 0.0);
        assert_eq!(mask_distance(&[true, false, false, false]), 0.5);
        assert_eq!(mask_distance(&[false, false]), 1.0);
    }

    fn explanation(ctx: &str, method: ExplainMethod, w: &[(&str, f64)]) -> Explanation {
        Explanation {
            query_id: "q".into(),
            context_id: ctx.into(),
            method,
            weights: w.iter().map(|(t, v)| (t.to_string(), *v)).collect(),
            intercept: 0.0,
            positive_class: true,
            pseudo_inverse: false,
        }
    }

    #[test]
    fn feature_table_aggregation() {
        let a = explanation("d1", ExplainMethod::Lime, &[("x", 0.3), ("y", -0.1)]);
        let b = explanation("d2", ExplainMethod::Lime, &[("x", 0.2)]);
        let c = explanation("d3", ExplainMethod::Lime, &[("z", 1.0), ("w", 2.0)]);
        let t = build_feature_score_table(std::slice::from_ref(&a)).unwrap();
        assert_eq!(t.scores, a.weights);
        let t = build_feature_score_table(&[a.clone(), b]).unwrap();
        assert!((t.score("x") - 0.5).abs() < 1e-15);
        assert_eq!(t.provenance, vec!["d1", "d2"]);
        assert_eq!(build_feature_score_table(&[a.clone(), c]).unwrap().len(), 4);
        let shap = explanation("d4", ExplainMethod::KernelShap, &[("x", 1.0)]);
        assert!(build_feature_score_table(&[a, shap]).is_err());
    }

    fn candidate(id: &str, text: &str, rank: usize) -> (Document, RetrievalResult) {
        (
            Document::new(id, "", text),
            RetrievalResult {
                doc_id: id.into(),
                score: 1.0 / rank as f64,
                rank,
                source: Perspective::PerspectiveA,
                query_variant: QueryVariant::Original,
            },
        )
    }

    #[test]
    fn rerank_by_hand_sums() {
        let owned = [
            candidate("a", "alpha beta", 1),
            candidate("b", "gamma", 2),
            candidate("c", "beta gamma gamma", 3),
            candidate("d", "delta", 4),
        ];
        let cands: Vec<(&Document, RetrievalResult)> = owned.iter().map(|(d, r)| (d, r.clone())).collect();

        let empty = rerank_by_feature_scores(&FeatureScoreTable::default(), &cands, 10);
        let ids: Vec<&str> = empty.iter().map(|r| r.result.doc_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);

        let mut table = FeatureScoreTable::default();
        table.scores.insert("beta".into(), 0.5);
        table.scores.insert("gamma".into(), 1.0);
        table.scores.insert("alpha".into(), -2.0);
        // a: -1.5, b: 1.0, c: 1.5, d: 0.0
        let out = rerank_by_feature_scores(&table, &cands, 3);
        let ids: Vec<&str> = out.iter().map(|r| r.result.doc_id.as_str()).collect();
        assert_eq!(ids, ["c", "b", "d"]);
        assert_eq!(out[0].feature_score, 1.5);
        assert_eq!(out.iter().map(|r| r.result.rank).collect::<Vec<_>>(), [1, 2, 3]);

        let mut answer = FeatureScoreTable::default();
        answer.scores.insert("delta".into(), 1.0);
        assert_eq!(rerank_by_feature_scores(&answer, &cands, 10)[0].result.doc_id, "d");
    }

    proptest! {
        #[test]
        fn shap_enumeration_is_efficient(d in 1usize..8, seed in 0u64..1000) {
            let f = table_box(random_table(d, seed));
            let fit = kernel_shap_values(&f, d, &ShapConfig::default(), seed).unwrap();
            let total: f64 = fit.weights.iter().map(|p| p.1).sum();
            let full = f(&vec![true; d]);
            let empty = f(&vec![false; d]);
            prop_assert!((total - (full - empty)).abs() < 1e-9);
        }

        #[test]
        fn rerank_is_a_truncated_permutation(
            scores in proptest::collection::vec(-2.0f64..2.0, 1..12),
            k in 1usize..15,
        ) {
            let owned: Vec<(Document, RetrievalResult)> = (0..scores.len())
                .map(|i| candidate(&format!("d{i}"), &format!("t{i}"), i + 1))
                .collect();
            let cands: Vec<(&Document, RetrievalResult)> = owned.iter().map(|(d, r)| (d, r.clone())).collect();
            let mut table = FeatureScoreTable::default();
            for (i, s) in scores.iter().enumerate() {
                table.scores.insert(format!("t{i}"), *s);
            }
            let out = rerank_by_feature_scores(&table, &cands, k);
            prop_assert_eq!(out.len(), k.min(scores.len()));
            let ids: HashSet<&str> = out.iter().map(|r| r.result.doc_id.as_str()).collect();
            prop_assert_eq!(ids.len(), out.len());
            prop_assert!(out.windows(2).all(|w| w[0].feature_score >= w[1].feature_score));
        }
    }
}
