//! Two-layer relevance classifier: `softmax(W2 · dropout(relu(W1·x + b1)) + b2)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::features::{FeatureSpace, InputVector};
use crate::error::{Error, Result};
use crate::prob::{log_sum_exp, softmax, ProbabilityDistribution};

pub const NUM_CLASSES: usize = 2;

/// All trainable parameters. `w1` is stored feature-major (one row of
/// `hidden` weights per input feature) so sparse inputs gather contiguous
/// rows; `w2` is row-major `NUM_CLASSES × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub hidden: usize,
    pub features: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Params {
    pub fn zeros(features: usize, hidden: usize) -> Self {
        Params {
            hidden,
            features,
            w1: vec![0.0; features * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; NUM_CLASSES * hidden],
            b2: vec![0.0; NUM_CLASSES],
        }
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.hidden == other.hidden && self.features == other.features
    }

    /// Parameter blocks in serialization order.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn w1_row(&self, feature: usize) -> &[f64] {
        &self.w1[feature * self.hidden..(feature + 1) * self.hidden]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    /// Standard deviation of the normal initializer for `w1` and `w2`.
    pub init_scale: f64,
    pub zero_init_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 32,
            dropout_rate: 0.1,
            init_scale: 0.1,
            zero_init_output: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Deterministic,
    /// Inverted dropout on the hidden layer with a mask drawn from `seed`.
    SampledMask(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerModel {
    space: Arc<FeatureSpace>,
    params: Params,
    dropout_rate: f64,
}

/// Per-example gradient; `w1_rows` holds only rows of active features.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w1_rows: Vec<(u32, Vec<f64>)>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl RerankerModel {
    pub fn new(space: Arc<FeatureSpace>, params: Params, dropout_rate: f64) -> Result<Self> {
        if params.features != space.dim() {
            return Err(Error::ShapeMismatch {
                expected: space.dim(),
                found: params.features,
            });
        }
        let expected = [
            params.features * params.hidden,
            params.hidden,
            NUM_CLASSES * params.hidden,
            NUM_CLASSES,
        ];
        for (block, want) in params.blocks().iter().zip(expected) {
            if block.len() != want {
                return Err(Error::ShapeMismatch {
                    expected: want,
                    found: block.len(),
                });
            }
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        Ok(RerankerModel {
            space,
            params,
            dropout_rate,
        })
    }

    /// Random initialization from `seed`.
    pub fn init(space: Arc<FeatureSpace>, config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let normal = Normal::new(0.0, config.init_scale)
            .map_err(|e| Error::invalid(format!("init_scale: {e}")))?;
        let mut params = Params::zeros(space.dim(), config.hidden_dim);
        for w in params.w1.iter_mut() {
            *w = normal.sample(&mut rng);
        }
        if !config.zero_init_output {
            let out = Normal::new(0.0, 1.0 / (config.hidden_dim as f64).sqrt()).unwrap();
            for w in params.w2.iter_mut() {
                *w = out.sample(&mut rng);
            }
        }
        Self::new(space, params, config.dropout_rate)
    }

    pub fn space(&self) -> &Arc<FeatureSpace> {
        &self.space
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.hidden
    }

    pub fn with_params(&self, params: Params) -> Result<Self> {
        Self::new(self.space.clone(), params, self.dropout_rate)
    }

    fn check_input(&self, x: &InputVector) -> Result<()> {
        if let Some(max) = x.max_index() {
            if max as usize >= self.params.features {
                return Err(Error::ShapeMismatch {
                    expected: self.params.features,
                    found: max as usize + 1,
                });
            }
        }
        Ok(())
    }

    /// Pre-activations `W1·x + b1`; fails on any non-finite value it reads.
    fn pre_activation(&self, x: &InputVector) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let h = self.params.hidden;
        let mut z = self.params.b1.clone();
        for &(i, w) in x.entries() {
            if !w.is_finite() {
                return Err(Error::Numerical(format!("non-finite input at feature {i}")));
            }
            let row = self.params.w1_row(i as usize);
            for j in 0..h {
                z[j] += w * row[j];
            }
        }
        let dense_ok = self
            .params
            .b1
            .iter()
            .chain(&self.params.w2)
            .chain(&self.params.b2)
            .all(|v| v.is_finite());
        if !dense_ok || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(z)
    }

    /// Per-unit multipliers for the hidden layer: 0 for dropped units,
    /// `1/(1−rate)` for survivors.
    pub fn dropout_scales<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.dropout_rate);
        (0..self.params.hidden)
            .map(|_| {
                if rng.random::<f64>() < self.dropout_rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }

    fn mode_scales(&self, mode: ForwardMode) -> Option<Vec<f64>> {
        match mode {
            ForwardMode::Deterministic => None,
            ForwardMode::SampledMask(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(self.dropout_scales(&mut rng))
            }
        }
    }

    /// Hidden activations after relu and, in sampled mode, the dropout mask.
    pub fn hidden_activations(&self, x: &InputVector, mode: ForwardMode) -> Result<Vec<f64>> {
        let scales = self.mode_scales(mode);
        self.hidden_with_scales(x, scales.as_deref())
    }

    fn hidden_with_scales(&self, x: &InputVector, scales: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut a = self.pre_activation(x)?;
        for v in a.iter_mut() {
            *v = v.max(0.0);
        }
        if let Some(s) = scales {
            for (v, s) in a.iter_mut().zip(s) {
                *v *= s;
            }
        }
        Ok(a)
    }

    fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let h = self.params.hidden;
        (0..NUM_CLASSES)
            .map(|c| {
                let row = &self.params.w2[c * h..(c + 1) * h];
                self.params.b2[c] + row.iter().zip(hidden).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect()
    }

    pub fn forward(&self, x: &InputVector, mode: ForwardMode) -> Result<ProbabilityDistribution> {
        let hidden = self.hidden_activations(x, mode)?;
        self.distribution(&hidden)
    }

    /// Forward pass with explicit per-unit dropout multipliers.
    pub fn forward_with_scales(
        &self,
        x: &InputVector,
        scales: Option<&[f64]>,
    ) -> Result<ProbabilityDistribution> {
        let hidden = self.hidden_with_scales(x, scales)?;
        self.distribution(&hidden)
    }

    fn distribution(&self, hidden: &[f64]) -> Result<ProbabilityDistribution> {
        let p = softmax(&self.logits(hidden));
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite output probability".into()));
        }
        Ok(ProbabilityDistribution::from_normalized(p))
    }

    /// Logit margin `z_1 − z_0` of the deterministic forward pass.
    pub fn margin(&self, x: &InputVector) -> Result<f64> {
        let hidden = self.hidden_with_scales(x, None)?;
        let z = self.logits(&hidden);
        Ok(z[1] - z[0])
    }

    /// Cross-entropy `−ln p(label | x)` under the given dropout multipliers.
    pub fn loss(&self, x: &InputVector, label: usize, scales: Option<&[f64]>) -> Result<f64> {
        let hidden = self.hidden_with_scales(x, scales)?;
        let z = self.logits(&hidden);
        Ok(log_sum_exp(&z) - z[label])
    }

    /// Cross-entropy and its gradient by backpropagation.
    pub fn loss_and_gradient(
        &self,
        x: &InputVector,
        label: usize,
        scales: Option<&[f64]>,
    ) -> Result<(f64, Gradient)> {
        if label >= NUM_CLASSES {
            return Err(Error::invalid(format!("label {label} is not binary")));
        }
        let h = self.params.hidden;
        let pre = self.pre_activation(x)?;
        let mut hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        if let Some(s) = scales {
            for (v, s) in hidden.iter_mut().zip(s) {
                *v *= s;
            }
        }
        let z = self.logits(&hidden);
        let loss = log_sum_exp(&z) - z[label];
        let p = softmax(&z);
        let delta: Vec<f64> = (0..NUM_CLASSES)
            .map(|c| p[c] - if c == label { 1.0 } else { 0.0 })
            .collect();

        let mut w2 = vec![0.0; NUM_CLASSES * h];
        for c in 0..NUM_CLASSES {
            for j in 0..h {
                w2[c * h + j] = delta[c] * hidden[j];
            }
        }
        let mut dz1 = vec![0.0; h];
        for j in 0..h {
            if pre[j] <= 0.0 {
                continue;
            }
            let mut g: f64 = (0..NUM_CLASSES)
                .map(|c| self.params.w2[c * h + j] * delta[c])
                .sum();
            if let Some(s) = scales {
                g *= s[j];
            }
            dz1[j] = g;
        }
        let w1_rows = x
            .entries()
            .iter()
            .map(|&(i, w)| (i, dz1.iter().map(|d| d * w).collect()))
            .collect();
        Ok((
            loss,
            Gradient {
                w1_rows,
                b1: dz1,
                w2,
                b2: delta,
            },
        ))
    }
}

/// Compares the analytic cross-entropy gradient against central finite
/// differences on every parameter the input can influence (all dense
/// parameters plus the `w1` rows of active features). Returns the largest
/// relative error; coordinates where both gradients are below `1e-8` count
/// their absolute difference instead.
pub fn gradient_check(
    model: &RerankerModel,
    input: &InputVector,
    label: usize,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps {eps} outside (0, 1e-2]")));
    }
    let (_, grad) = model.loss_and_gradient(input, label, None)?;
    let mut probe = model.clone();
    let h = model.params.hidden;

    let numeric = |probe: &mut RerankerModel, block: usize, idx: usize| -> Result<f64> {
        let orig = probe.params.blocks_mut()[block][idx];
        probe.params.blocks_mut()[block][idx] = orig + eps;
        let up = probe.loss(input, label, None)?;
        probe.params.blocks_mut()[block][idx] = orig - eps;
        let down = probe.loss(input, label, None)?;
        probe.params.blocks_mut()[block][idx] = orig;
        Ok((up - down) / (2.0 * eps))
    };

    let mut worst = 0.0f64;
    let mut record = |analytic: f64, numeric: f64| {
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-8 {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / scale
        };
        worst = worst.max(err);
    };

    for (feature, row) in &grad.w1_rows {
        for (j, &g) in row.iter().enumerate() {
            record(g, numeric(&mut probe, 0, *feature as usize * h + j)?);
        }
    }
    for (block, values) in [(1, &grad.b1), (2, &grad.w2), (3, &grad.b2)] {
        for (i, &g) in values.iter().enumerate() {
            record(g, numeric(&mut probe, block, i)?);
        }
    }
    Ok(worst)
}
