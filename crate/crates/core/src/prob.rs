use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// A normalized probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityDistribution(Vec<f64>);

impl ProbabilityDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        validate(&probabilities)?;
        Ok(ProbabilityDistribution(probabilities))
    }

    /// Wraps values the caller has produced by a normalizing computation.
    pub(crate) fn from_normalized(probabilities: Vec<f64>) -> Self {
        debug_assert!(validate(&probabilities).is_ok(), "{probabilities:?}");
        ProbabilityDistribution(probabilities)
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Probability of class 1 in a binary distribution.
    pub fn positive(&self) -> f64 {
        self.0[1]
    }

    /// Index of the largest entry; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }

    /// Order-fixed running mean `m_k = m_{k-1} + (p_k − m_{k-1})/k`.
    ///
    /// Averaging identical distributions returns that distribution bit for
    /// bit.
    pub fn mean<'a, I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ProbabilityDistribution>,
    {
        let mut acc: Option<Vec<f64>> = None;
        let mut n = 0usize;
        for p in items {
            n += 1;
            match acc.as_mut() {
                None => acc = Some(p.0.clone()),
                Some(m) => {
                    if m.len() != p.len() {
                        return Err(Error::ShapeMismatch {
                            expected: m.len(),
                            found: p.len(),
                        });
                    }
                    let k = n as f64;
                    for (mi, &pi) in m.iter_mut().zip(&p.0) {
                        *mi += (pi - *mi) / k;
                    }
                }
            }
        }
        acc.map(ProbabilityDistribution)
            .ok_or_else(|| Error::invalid("cannot average zero distributions"))
    }
}

fn validate(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("empty distribution"));
    }
    if let Some(x) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::invalid(format!("probability {x} outside [0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `ln Σ exp(z)`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}
