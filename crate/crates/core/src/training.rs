//! Seeded fine-tuning: dataset split, per-epoch shuffling, Adam, and the
//! timed training loop.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{apply_mlm_mask, mlm_pretrain_loss, ClassifierModel, MaskingPolicy};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::tokenizer::{EncodedExample, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub shuffle_seed: u64,
    /// Fraction of examples assigned to the training split.
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            shuffle_seed: 0,
            split_ratio: 0.8,
            split_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split_ratio {} must lie strictly between 0 and 1",
                self.split_ratio
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Seeded train/validation split. The first `ceil(n * ratio)` positions of a
/// seeded permutation go to training, clamped so both sides are nonempty.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Validation(format!("cannot split {n} examples")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * ratio).ceil() as usize).clamp(1, n - 1);
    let validation = order.split_off(n_train);
    Ok((order, validation))
}

pub fn split_dataset<R: Clone>(items: &[R], ratio: f64, seed: u64) -> Result<(Vec<R>, Vec<R>)> {
    let (train, val) = split_indices(items.len(), ratio, seed)?;
    Ok((
        train.into_iter().map(|i| items[i].clone()).collect(),
        val.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

/// Visiting order for one epoch, a pure function of `(seed, epoch)`.
pub fn shuffle_epoch(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        AdamState {
            first_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Validation(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.first_moment[i].len() != g.len() {
            return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(config.beta1);
    let b2 = T::lit(config.beta2);
    let correction1 = T::one() - b1.powi(t);
    let correction2 = T::one() - b2.powi(t);
    let lr = T::lit(config.learning_rate);
    let eps = T::lit(config.epsilon);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    /// Time spent on optimizer steps this epoch.
    pub train_seconds: f64,
    /// Time since the start of the run, validation included.
    pub elapsed_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub epochs: Vec<EpochRecord>,
    pub total_wall_clock: Duration,
}

impl TrainRun {
    pub fn final_val_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_accuracy)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Fraction of examples whose predicted label matches.
pub fn accuracy<T: Scalar>(model: &ClassifierModel<T>, examples: &[EncodedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Validation("accuracy of an empty set".into()));
    }
    let predicted = model.predict(examples)?;
    let correct = predicted
        .iter()
        .zip(examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

pub fn train<T: Scalar>(
    model: &mut ClassifierModel<T>,
    train_set: &[EncodedExample],
    validation_set: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TrainRun> {
    train_with_log(model, train_set, validation_set, config, |_| {})
}

/// Runs `config.epochs` epochs of shuffled mini-batch Adam on the
/// cross-entropy loss, scoring the validation set after each epoch. The
/// last partial batch is kept.
pub fn train_with_log<T: Scalar>(
    model: &mut ClassifierModel<T>,
    train_set: &[EncodedExample],
    validation_set: &[EncodedExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    config.validate()?;
    if train_set.is_empty() || validation_set.is_empty() {
        return Err(Error::Validation(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let start = Instant::now();
    let adam = config.adam();
    let mut state = AdamState::new(model.named_parameters().into_iter().map(|(_, t)| t));
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let order = shuffle_epoch(train_set.len(), config.shuffle_seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = step(model, &batch, &mut state, &adam)
                .map_err(|e| e.context(format!("epoch {}, batch {b}", epoch + 1)))?;
            loss_sum += loss;
            batches += 1;
        }
        let train_seconds = epoch_start.elapsed().as_secs_f64();
        let val_accuracy = accuracy(model, validation_set)
            .map_err(|e| e.context(format!("epoch {} validation", epoch + 1)))?;
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches as f64,
            val_accuracy,
            train_seconds,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(TrainRun {
        epochs: records,
        total_wall_clock: start.elapsed(),
    })
}

fn step<T: Scalar>(
    model: &mut ClassifierModel<T>,
    batch: &[&EncodedExample],
    state: &mut AdamState<T>,
    adam: &AdamConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let loss = model.classification_loss(&mut g, &vars, batch)?;
    let value = g.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::Validation(format!("non-finite loss {value}")));
    }
    g.backward(loss)?;
    let grads = vars.grads(&g);
    adam_step(&mut model.parameters_mut(), &grads, state, adam)?;
    Ok(value)
}

/// Optional masked-language-model phase over unlabeled encodings. Returns
/// the mean MLM loss of each epoch. Masks are redrawn every epoch.
pub fn pretrain_mlm<T: Scalar>(
    model: &mut ClassifierModel<T>,
    examples: &[EncodedExample],
    vocab: &Vocabulary,
    policy: &MaskingPolicy,
    epochs: usize,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let adam = config.adam();
    let mut state = AdamState::new(model.named_parameters().into_iter().map(|(_, t)| t));
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = shuffle_epoch(examples.len(), config.shuffle_seed, epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<EncodedExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let seed = config.shuffle_seed ^ ((epoch as u64) << 32 | b as u64);
            let masked = apply_mlm_mask(&batch, vocab, policy, seed)?;
            if masked.target_ids.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let loss = mlm_pretrain_loss(model, &mut g, &vars, &masked)
                .map_err(|e| e.context(format!("pretraining epoch {}, batch {b}", epoch + 1)))?;
            total += g.value(loss).item()?.as_f64();
            batches += 1;
            g.backward(loss)?;
            let grads = vars.grads(&g);
            adam_step(&mut model.parameters_mut(), &grads, &mut state, &adam)?;
        }
        losses.push(if batches == 0 {
            0.0
        } else {
            total / batches as f64
        });
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_partition() {
        let items: Vec<usize> = (0..10).collect();
        let (train, val) = split_dataset(&items, 0.8, 1).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_dataset(&items, 0.8, 1).unwrap(), (train, val));
    }

    #[test]
    fn split_rounds_up() {
        let items: Vec<usize> = (0..7).collect();
        let (train, val) = split_dataset(&items, 0.5, 0).unwrap();
        assert_eq!((train.len(), val.len()), (4, 3));
    }

    #[test]
    fn split_keeps_both_sides_nonempty() {
        let (train, val) = split_indices(2, 0.99, 0).unwrap();
        assert_eq!((train.len(), val.len()), (1, 1));
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(5, 1.0, 0).is_err());
    }

    #[test]
    fn epoch_shuffles_differ_and_reproduce() {
        let a = shuffle_epoch(10, 42, 0);
        let b = shuffle_epoch(10, 42, 1);
        assert_ne!(a, b);
        assert_eq!(a, shuffle_epoch(10, 42, 0));
        assert_eq!(shuffle_epoch(1, 42, 3), vec![0]);
        let mut sorted = b.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn shuffles_of_three_items_differ_across_epochs() {
        for seed in 0..20 {
            let first = shuffle_epoch(3, seed, 0);
            assert!((1..6).any(|e| shuffle_epoch(3, seed, e) != first));
        }
        assert_ne!(shuffle_epoch(3, 42, 0), shuffle_epoch(3, 42, 1));
    }

    fn adam_cfg() -> AdamConfig {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[vec![0.0; 3]], &mut state, &adam_cfg()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::new([3], vec![0.0, 0.0, 0.0]).unwrap();
        let mut state = AdamState::new([&p]);
        adam_step(
            &mut [&mut p],
            &[vec![0.3, -5.0, 1e-3]],
            &mut state,
            &adam_cfg(),
        )
        .unwrap();
        for (&w, expected) in p.data().iter().zip([-1e-3, 1e-3, -1e-3]) {
            assert!((w - expected).abs() < 1e-7, "{w}");
        }
    }

    #[test]
    fn adam_matches_scalar_trace() {
        // minimize (w - 3)^2 from w = 0; reference written out longhand
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut w_ref = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * (w_ref - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w_ref -= lr * mh / (vh.sqrt() + eps);
            trace.push(w_ref);
        }

        let cfg = AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        };
        let mut p = Tensor::<f64>::new([1], vec![0.0]).unwrap();
        let mut state = AdamState::new([&p]);
        for expected in trace {
            let g = 2.0 * (p.data()[0] - 3.0);
            adam_step(&mut [&mut p], &[vec![g]], &mut state, &cfg).unwrap();
            assert!((p.data()[0] - expected).abs() < 1e-10);
        }
        assert_eq!(state.step, 3);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut p = Tensor::<f64>::zeros([2]);
        let mut state = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[vec![0.0; 3]], &mut state, &adam_cfg()).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut state, &adam_cfg()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            split_ratio: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
