//! Multi-perspective context fusion.
//!
//! Ranked lists from different retrievers are merged under a count split such
//! as `"3;2"`. Jensen–Shannon divergence regularizes imputation training and
//! mutual information between the perspectives' token sets is reported as a
//! diagnostic. [`extractive_read`] is a lexical stand-in for a generative
//! reader.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::prob::NORMALIZATION_TOL;
use crate::retrieval::{InvertedIndex, RetrievalResult};

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(format!("not a probability distribution (sum {sum})")));
    }
    Ok(())
}

/// `H(½(P+Q)) − ½(H(P) + H(Q))`, in nats, clamped to `[0, ln 2]` against
/// rounding.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let value = entropy(&mid) - 0.5 * (entropy(p) + entropy(q));
    Ok(value.clamp(0.0, std::f64::consts::LN_2))
}

/// A scored (imputed, gold) context pair for one training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationPair {
    pub imputed_context: String,
    pub gold_context: String,
    pub label: u8,
    pub imputed_score: f64,
    pub gold_score: f64,
}

impl ImputationPair {
    /// Two-way softmax of `(g(x), g(z))` and its complement.
    pub fn distributions(&self) -> ([f64; 2], [f64; 2]) {
        let m = self.imputed_score.max(self.gold_score);
        let a = (self.imputed_score - m).exp();
        let b = (self.gold_score - m).exp();
        let p = a / (a + b);
        ([p, 1.0 - p], [1.0 - p, p])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizedLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub divergence: f64,
    /// Some model output was outside `(0, 1)` and was clamped.
    pub clamped: bool,
}

const PROB_FLOOR: f64 = 1e-12;

/// Mean binary cross-entropy of `outputs` against the pair labels plus
/// `lambda` times the mean JSD between each pair's softmax and its complement.
pub fn jsd_regularized_loss(
    batch: &[ImputationPair],
    outputs: &[f64],
    lambda: f64,
) -> Result<RegularizedLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if batch.len() != outputs.len() {
        return Err(Error::ShapeMismatch {
            expected: batch.len(),
            found: outputs.len(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda {lambda} must be non-negative")));
    }
    let n = batch.len() as f64;
    let mut ce = 0.0;
    let mut div = 0.0;
    let mut clamped = false;
    for (pair, &f) in batch.iter().zip(outputs) {
        if pair.label > 1 {
            return Err(Error::invalid(format!("label {} is not binary", pair.label)));
        }
        if !pair.imputed_score.is_finite() || !pair.gold_score.is_finite() || f.is_nan() {
            return Err(Error::Numerical("non-finite score in imputation batch".into()));
        }
        let fc = f.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        clamped |= fc != f;
        let y = pair.label as f64;
        ce -= y * fc.ln() + (1.0 - y) * (1.0 - fc).ln();
        let (p, q) = pair.distributions();
        div += jsd(&p, &q)?;
    }
    let (cross_entropy, divergence) = (ce / n, div / n);
    Ok(RegularizedLoss {
        total: cross_entropy + lambda * divergence,
        cross_entropy,
        divergence,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextSlot<T> {
    Gold(T),
    Imputed(T),
    /// The query is encoded without any context.
    QueryOnly,
}

/// `slots_per_side` gold slots followed by `slots_per_side` imputed slots;
/// missing contexts on either side become query-only placeholders and extra
/// ones are dropped.
pub fn symmetric_imputation_batch<T: Clone>(
    gold: &[T],
    imputed: &[T],
    slots_per_side: usize,
) -> Vec<ContextSlot<T>> {
    let side = |items: &[T], wrap: fn(T) -> ContextSlot<T>| {
        (0..slots_per_side)
            .map(|i| items.get(i).cloned().map_or(ContextSlot::QueryOnly, wrap))
            .collect::<Vec<_>>()
    };
    let mut out = side(gold, ContextSlot::Gold);
    out.extend(side(imputed, ContextSlot::Imputed));
    out
}

/// Non-negative count table over two finite outcome sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    counts: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    pub fn new(counts: Vec<Vec<f64>>) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.is_empty() || cols == 0 || counts.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("joint table must be a non-empty rectangle"));
        }
        if counts.iter().flatten().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::invalid("joint counts must be finite and non-negative"));
        }
        Ok(DiscreteJoint { counts })
    }

    pub fn counts(&self) -> &[Vec<f64>] {
        &self.counts
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }
}

/// Plug-in `Σ P(x,y) ln(P(x,y) / (P(x)P(y)))` in nats.
pub fn mutual_information(joint: &DiscreteJoint) -> Result<f64> {
    let total = joint.total();
    if !(total > 0.0) {
        return Err(Error::invalid("joint table has zero mass"));
    }
    let rows: Vec<f64> = joint.counts.iter().map(|r| r.iter().sum::<f64>() / total).collect();
    let cols: Vec<f64> = (0..joint.counts[0].len())
        .map(|j| joint.counts.iter().map(|r| r[j]).sum::<f64>() / total)
        .collect();
    let mut mi = 0.0;
    for (i, row) in joint.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                let pxy = c / total;
                mi += pxy * (pxy / (rows[i] * cols[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// 2×2 counts of `(token ∈ A, token ∈ B)` over the union of both context
/// sets' tokens. Row/column 0 is "absent", 1 is "present".
pub fn perspective_joint(a: &[&Document], b: &[&Document]) -> Result<DiscreteJoint> {
    let set = |docs: &[&Document]| -> HashSet<String> {
        docs.iter().flat_map(|d| d.tokens.iter().cloned()).collect()
    };
    let (sa, sb) = (set(a), set(b));
    let mut counts = vec![vec![0.0; 2]; 2];
    for t in sa.union(&sb) {
        counts[sa.contains(t) as usize][sb.contains(t) as usize] += 1.0;
    }
    DiscreteJoint::new(counts)
}

/// Mutual information between token presence in the two perspectives'
/// contexts; zero when both sets are empty.
pub fn perspective_mi(a: &[&Document], b: &[&Document]) -> Result<f64> {
    let joint = perspective_joint(a, b)?;
    if joint.total() == 0.0 {
        return Ok(0.0);
    }
    mutual_information(&joint)
}

/// Per-source context counts, e.g. `"3;2"` or `"A;B 3;2"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSplit {
    parts: Vec<(String, usize)>,
}

impl ContextSplit {
    pub fn new(parts: Vec<(String, usize)>) -> Result<Self> {
        if parts.is_empty() || parts.iter().any(|p| p.1 == 0) {
            return Err(Error::invalid("split counts must be positive"));
        }
        Ok(ContextSplit { parts })
    }

    pub fn parts(&self) -> &[(String, usize)] {
        &self.parts
    }

    pub fn counts(&self) -> Vec<usize> {
        self.parts.iter().map(|p| p.1).collect()
    }

    pub fn total(&self) -> usize {
        self.parts.iter().map(|p| p.1).sum()
    }
}

impl FromStr for ContextSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        let (labels, counts) = match fields.as_slice() {
            [counts] => (None, *counts),
            [labels, counts] => (Some(*labels), *counts),
            _ => return Err(Error::invalid(format!("cannot parse split `{s}`"))),
        };
        let counts = counts
            .split(';')
            .map(|c| {
                c.parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad count `{c}` in split `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<String> = match labels {
            Some(l) => l.split(';').map(str::to_owned).collect(),
            None => (1..=counts.len()).map(|i| format!("p{i}")).collect(),
        };
        if labels.len() != counts.len() {
            return Err(Error::invalid(format!("split `{s}` has mismatched labels and counts")));
        }
        ContextSplit::new(labels.into_iter().zip(counts).collect())
    }
}

impl fmt::Display for ContextSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let counts: Vec<String> = self.parts.iter().map(|p| p.1.to_string()).collect();
        write!(f, "{}", counts.join(";"))
    }
}

/// Top `c_j` of list `j`, in split order. A doc already taken is skipped and
/// the next item of the same list takes its slot; an exhausted list leaves
/// its remaining slots empty.
pub fn merge_contexts(
    split: &ContextSplit,
    ranked_lists: &[Vec<RetrievalResult>],
) -> Result<Vec<RetrievalResult>> {
    if ranked_lists.len() != split.parts.len() {
        return Err(Error::ShapeMismatch {
            expected: split.parts.len(),
            found: ranked_lists.len(),
        });
    }
    let mut seen = HashSet::new();
    let mut merged = Vec::with_capacity(split.total());
    for ((_, count), list) in split.parts.iter().zip(ranked_lists) {
        merged.extend(
            list.iter()
                .filter(|r| seen.insert(r.doc_id.clone()))
                .take(*count)
                .cloned(),
        );
    }
    Ok(merged)
}

pub const MAX_SPAN_LEN: usize = 5;
pub const SPAN_WINDOW: usize = 10;

/// Picks the span of at most five tokens, containing no query token, whose
/// surrounding ±10-token window covers the most query IDF mass. Contexts are
/// scanned in order, spans by start then length; only a strictly better score
/// replaces the current best.
pub fn extractive_read(contexts: &[&Document], query_tokens: &[String], index: &InvertedIndex) -> String {
    let query: BTreeSet<&str> = query_tokens.iter().map(String::as_str).collect();
    let idf = |t: &str| index.idf(t).unwrap_or(0.0);
    let mut best: Option<(f64, &[String])> = None;
    for doc in contexts {
        let toks = &doc.tokens;
        for start in 0..toks.len() {
            for len in 1..=MAX_SPAN_LEN.min(toks.len() - start) {
                let end = start + len;
                if toks[start..end].iter().any(|t| query.contains(t.as_str())) {
                    break;
                }
                let lo = start.saturating_sub(SPAN_WINDOW);
                let hi = (end + SPAN_WINDOW).min(toks.len());
                let present: BTreeSet<&str> = toks[lo..hi]
                    .iter()
                    .map(String::as_str)
                    .filter(|t| query.contains(t))
                    .collect();
                let score: f64 = present.iter().map(|t| idf(t)).sum();
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, &toks[start..end]));
                }
            }
        }
    }
    best.map(|(_, span)| span.join(" ")).unwrap_or_default()
}
