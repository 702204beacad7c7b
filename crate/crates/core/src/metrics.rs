//! Answer and retrieval metrics.
//!
//! Answers are compared after the usual QA normalization: lowercase, drop
//! punctuation, drop the articles "a", "an", "the", collapse whitespace.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

pub fn normalize_answer(text: &str) -> String {
    normalized_tokens(text).join(" ")
}

fn normalized_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let stripped: String = lower
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .collect();
    stripped
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_owned)
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace() && !c.is_control()
}

pub fn exact_match(prediction: &str, gold_answers: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    let hit = gold_answers.iter().any(|g| normalize_answer(g) == p);
    if hit {
        1.0
    } else {
        0.0
    }
}

fn f1_pair(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best token-multiset F1 against any gold answer; 0 when there is none.
pub fn token_f1(prediction: &str, gold_answers: &[String]) -> f64 {
    let pred = normalized_tokens(prediction);
    gold_answers
        .iter()
        .map(|g| f1_pair(&pred, &normalized_tokens(g)))
        .fold(0.0, f64::max)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure (β = 1) over normalized tokens.
pub fn rouge_l(prediction: &str, gold: &str) -> f64 {
    let (p, g) = (normalized_tokens(prediction), normalized_tokens(gold));
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let lcs = lcs_len(&p, &g) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (lcs / p.len() as f64, lcs / g.len() as f64);
    2.0 * prec * rec / (prec + rec)
}

/// `|gold ∩ top-k| / |gold|`.
pub fn recall_at_k(retrieved: &[String], gold: &[String], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let gold: HashSet<&str> = gold.iter().map(String::as_str).collect();
    if gold.is_empty() {
        return Err(Error::invalid("no gold documents"));
    }
    let hits = retrieved
        .iter()
        .take(k)
        .map(String::as_str)
        .collect::<HashSet<_>>()
        .intersection(&gold)
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Recall at `k = |gold|`.
pub fn r_precision(retrieved: &[String], gold: &[String]) -> Result<f64> {
    let distinct = gold.iter().collect::<HashSet<_>>().len();
    recall_at_k(retrieved, gold, distinct.max(1))
}

/// Fraction of positions where the labels agree.
pub fn accuracy<T: PartialEq>(predicted: &[T], gold: &[T]) -> Result<f64> {
    if predicted.len() != gold.len() || gold.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predicted.len(),
            gold.len()
        )));
    }
    let hits = predicted.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// 1-based rank of the first gold document, or `len + 1` when none appears.
pub fn first_gold_rank(retrieved: &[String], gold: &[String]) -> usize {
    retrieved
        .iter()
        .position(|r| gold.contains(r))
        .map_or(retrieved.len() + 1, |p| p + 1)
}
