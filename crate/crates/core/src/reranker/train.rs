//! Mini-batch AdamW training with constant or cyclic-cosine learning rates.
//!
//! `w1` updates are lazy: only rows of features present in the current batch
//! have their moments, weight decay and values updated (the same rule as a
//! sparse Adam). Dense blocks are updated every step.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::InputVector;
use super::model::{Params, RerankerModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    CyclicAnnealing { cycles: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Checkpoint stride under a constant schedule; `None` means
    /// `⌈steps/20⌉`.
    pub checkpoint_stride: Option<usize>,
}

/// Learning rate reported for the reference cross-encoder setup.
pub const REFERENCE_LEARNING_RATE: f64 = 5e-5;

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-2,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            schedule: Schedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            checkpoint_stride: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        if let Schedule::CyclicAnnealing { cycles: 0 } = self.schedule {
            return Err(Error::invalid("cyclic schedule needs at least one cycle"));
        }
        if self.checkpoint_stride == Some(0) {
            return Err(Error::invalid("checkpoint stride must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.epochs * n_examples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub input: InputVector,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    /// 1-based optimizer step after which the snapshot was taken.
    pub step: usize,
    /// 1-based cycle index under a cyclic schedule.
    pub cycle: Option<usize>,
}

/// Borrowed view of a checkpoint handed to training observers.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointView<'a> {
    pub params: &'a Params,
    pub step: usize,
    pub cycle: Option<usize>,
}

impl CheckpointView<'_> {
    pub fn to_owned(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            step: self.step,
            cycle: self.cycle,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RerankerModel,
    pub checkpoints: Vec<Checkpoint>,
    /// Mean batch loss at each step, evaluated before that step's update.
    pub losses: Vec<f64>,
}

/// Cyclic cosine annealing:
/// `α(t) = α0/2 · (cos(π · mod(t−1, ⌈T/M⌉) / ⌈T/M⌉) + 1)`.
pub fn cyclic_lr(t: usize, total: usize, cycles: usize, alpha0: f64) -> Result<f64> {
    if cycles == 0 {
        return Err(Error::invalid("cycles must be at least 1"));
    }
    if t == 0 || t > total {
        return Err(Error::invalid(format!("step {t} outside 1..={total}")));
    }
    let len = total.div_ceil(cycles);
    let phase = ((t - 1) % len) as f64 / len as f64;
    Ok(alpha0 / 2.0 * ((PI * phase).cos() + 1.0))
}

pub fn learning_rate_at(config: &TrainingConfig, t: usize, total: usize) -> Result<f64> {
    match config.schedule {
        Schedule::Constant => Ok(config.learning_rate),
        Schedule::CyclicAnnealing { cycles } => cyclic_lr(t, total, cycles, config.learning_rate),
    }
}

/// Steps after which a checkpoint is recorded: the last step of every full
/// cycle (`k·⌈T/M⌉`) under a cyclic schedule, every `stride` steps otherwise.
pub fn checkpoint_steps(config: &TrainingConfig, total: usize) -> Vec<usize> {
    let stride = match config.schedule {
        Schedule::CyclicAnnealing { cycles } => total.div_ceil(cycles.max(1)),
        Schedule::Constant => config
            .checkpoint_stride
            .unwrap_or_else(|| total.div_ceil(20)),
    }
    .max(1);
    (1..=total / stride).map(|k| k * stride).collect()
}

fn cycle_of(config: &TrainingConfig, step: usize, total: usize) -> Option<usize> {
    match config.schedule {
        Schedule::CyclicAnnealing { cycles } => Some((step - 1) / total.div_ceil(cycles) + 1),
        Schedule::Constant => None,
    }
}

pub fn train(
    model: RerankerModel,
    dataset: &[LabeledExample],
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    let mut checkpoints = Vec::new();
    let (model, losses) = train_with_observer(model, dataset, config, |view| {
        checkpoints.push(view.to_owned());
    })?;
    Ok(TrainOutcome {
        model,
        checkpoints,
        losses,
    })
}

struct AdamState {
    m: Params,
    v: Params,
}

/// Trains and calls `observe` at every checkpoint step instead of storing
/// snapshots. Returns the final model and the per-step loss trace.
pub fn train_with_observer<F>(
    mut model: RerankerModel,
    dataset: &[LabeledExample],
    config: &TrainingConfig,
    mut observe: F,
) -> Result<(RerankerModel, Vec<f64>)>
where
    F: FnMut(CheckpointView<'_>),
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(bad) = dataset.iter().find(|e| e.label > 1) {
        return Err(Error::invalid(format!("label {} is not binary", bad.label)));
    }
    let total = config.total_steps(dataset.len());
    if let Schedule::CyclicAnnealing { cycles } = config.schedule {
        if cycles > total {
            return Err(Error::invalid(format!(
                "{cycles} cycles exceed {total} training steps"
            )));
        }
    }
    let ckpt_steps = checkpoint_steps(config, total);
    let mut next_ckpt = ckpt_steps.iter().copied().peekable();

    let hidden = model.hidden_dim();
    let features = model.params().features;
    let mut adam = AdamState {
        m: Params::zeros(features, hidden),
        v: Params::zeros(features, hidden),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed);
    mask_rng.set_stream(2);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(total);
    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let lr = learning_rate_at(config, step, total)?;
            let loss = apply_batch(&mut model, dataset, batch, &mut adam, config, lr, step, &mut mask_rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            losses.push(loss);
            if next_ckpt.peek() == Some(&step) {
                next_ckpt.next();
                observe(CheckpointView {
                    params: model.params(),
                    step,
                    cycle: cycle_of(config, step, total),
                });
            }
        }
    }
    Ok((model, losses))
}

#[allow(clippy::too_many_arguments)]
fn apply_batch(
    model: &mut RerankerModel,
    dataset: &[LabeledExample],
    batch: &[usize],
    adam: &mut AdamState,
    config: &TrainingConfig,
    lr: f64,
    step: usize,
    mask_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let h = model.hidden_dim();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut g_w1: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![0.0; model.params().w2.len()];
    let mut g_b2 = vec![0.0; model.params().b2.len()];
    for &i in batch {
        let ex = &dataset[i];
        let scales = (model.dropout_rate() > 0.0).then(|| model.dropout_scales(mask_rng));
        let (l, g) = model.loss_and_gradient(&ex.input, ex.label, scales.as_deref())?;
        loss += l / n;
        for (f, row) in g.w1_rows {
            let acc = g_w1.entry(f).or_insert_with(|| vec![0.0; h]);
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / n;
            }
        }
        for (a, v) in g_b1.iter_mut().zip(&g.b1) {
            *a += v / n;
        }
        for (a, v) in g_w2.iter_mut().zip(&g.w2) {
            *a += v / n;
        }
        for (a, v) in g_b2.iter_mut().zip(&g.b2) {
            *a += v / n;
        }
    }
    if !loss.is_finite() {
        return Ok(loss);
    }

    let b1c = 1.0 - config.beta1.powi(step as i32);
    let b2c = 1.0 - config.beta2.powi(step as i32);
    let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / b1c;
        let v_hat = *v / b2c;
        *w -= lr * (m_hat / (v_hat.sqrt() + config.epsilon) + config.weight_decay * *w);
    };

    let params = model.params_mut();
    for (f, row) in &g_w1 {
        let base = *f as usize * h;
        for (j, &g) in row.iter().enumerate() {
            let k = base + j;
            update(&mut params.w1[k], &mut adam.m.w1[k], &mut adam.v.w1[k], g);
        }
    }
    for (k, g) in g_b1.iter().enumerate() {
        update(&mut params.b1[k], &mut adam.m.b1[k], &mut adam.v.b1[k], *g);
    }
    for (k, g) in g_w2.iter().enumerate() {
        update(&mut params.w2[k], &mut adam.m.w2[k], &mut adam.v.w2[k], *g);
    }
    for (k, g) in g_b2.iter().enumerate() {
        update(&mut params.b2[k], &mut adam.m.b2[k], &mut adam.v.b2[k], *g);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::reranker::features::FeatureSpace;
    use crate::reranker::model::{ForwardMode, ModelConfig};
    use std::sync::Arc;

    #[test]
    fn cyclic_lr_examples() {
        assert!((cyclic_lr(1, 100, 5, 0.1).unwrap() - 0.1).abs() < 1e-12);
        assert!((cyclic_lr(11, 100, 5, 0.1).unwrap() - 0.05).abs() < 1e-12);
        assert!((cyclic_lr(21, 100, 5, 0.1).unwrap() - 0.1).abs() < 1e-12);
        assert!(cyclic_lr(0, 100, 5, 0.1).is_err());
        assert!(cyclic_lr(101, 100, 5, 0.1).is_err());
    }

    #[test]
    fn cyclic_lr_is_periodic() {
        let (total, cycles) = (97usize, 4usize);
        let len = total.div_ceil(cycles);
        for t in 1..=total - len {
            assert_eq!(
                cyclic_lr(t, total, cycles, 0.3).unwrap(),
                cyclic_lr(t + len, total, cycles, 0.3).unwrap()
            );
        }
    }

    fn space() -> Arc<FeatureSpace> {
        Arc::new(FeatureSpace::new(
            Vocabulary::from_tokens(["pos", "neg", "x", "y", "z"]),
            4,
            0,
        ))
    }

    /// Class is decided by whether the context contains `pos` or `neg`.
    fn separable(space: &FeatureSpace) -> Vec<LabeledExample> {
        let fillers = ["x", "y", "z"];
        let mut out = Vec::new();
        for i in 0..40 {
            let label = i % 2;
            let cue = if label == 1 { "pos" } else { "neg" };
            let ctx = vec![cue, fillers[i % 3], fillers[(i / 3) % 3]];
            out.push(LabeledExample {
                input: space.encode_tokens(&["q"], &ctx),
                label,
            });
        }
        out
    }

    fn model(space: Arc<FeatureSpace>, zero_out: bool) -> RerankerModel {
        let cfg = ModelConfig {
            hidden_dim: 8,
            dropout_rate: 0.1,
            init_scale: 0.1,
            zero_init_output: zero_out,
        };
        RerankerModel::init(space, &cfg, 11).unwrap()
    }

    #[test]
    fn separable_set_reaches_full_accuracy() {
        let s = space();
        let data = separable(&s);
        let cfg = TrainingConfig {
            epochs: 50,
            batch_size: 10,
            ..TrainingConfig::default()
        };
        assert_eq!(cfg.total_steps(data.len()), 200);
        let out = train(model(s, false), &data, &cfg).unwrap();
        let correct = data
            .iter()
            .filter(|e| {
                out.model
                    .forward(&e.input, ForwardMode::Deterministic)
                    .unwrap()
                    .argmax()
                    == e.label
            })
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn training_is_deterministic() {
        let s = space();
        let data = separable(&s);
        let cfg = TrainingConfig {
            epochs: 5,
            batch_size: 7,
            seed: 3,
            ..TrainingConfig::default()
        };
        let a = train(model(s.clone(), false), &data, &cfg).unwrap();
        let b = train(model(s, false), &data, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn first_loss_with_zero_output_layer_is_ln2() {
        let s = space();
        let data = separable(&s);
        let out = train(model(s, true), &data, &TrainingConfig::default()).unwrap();
        assert!((out.losses[0] - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_bookkeeping() {
        let cyc = TrainingConfig {
            schedule: Schedule::CyclicAnnealing { cycles: 5 },
            ..TrainingConfig::default()
        };
        assert_eq!(checkpoint_steps(&cyc, 100), vec![20, 40, 60, 80, 100]);
        let constant = TrainingConfig::default();
        assert_eq!(checkpoint_steps(&constant, 100).len(), 20);
        assert_eq!(checkpoint_steps(&constant, 7), (1..=7).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = space();
        let data = separable(&s);
        assert!(train(model(s.clone(), false), &[], &TrainingConfig::default()).is_err());
        let mut bad = data.clone();
        bad[0].label = 2;
        assert!(train(model(s.clone(), false), &bad, &TrainingConfig::default()).is_err());
        let too_many_cycles = TrainingConfig {
            epochs: 1,
            batch_size: 40,
            schedule: Schedule::CyclicAnnealing { cycles: 2 },
            ..TrainingConfig::default()
        };
        assert!(train(model(s, false), &data, &too_many_cycles).is_err());
    }

    #[test]
    fn diverging_training_reports_step() {
        let s = space();
        let data = separable(&s);
        let mut m = model(s, false);
        m.params_mut().w2[0] = 1e308;
        m.params_mut().w2[1] = -1e308;
        let cfg = TrainingConfig {
            learning_rate: 1e300,
            ..TrainingConfig::default()
        };
        match train(m, &data, &cfg) {
            Err(Error::NonFiniteLoss { step }) => assert!(step >= 1),
            Err(Error::Numerical(_)) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.losses)),
        }
    }
}
