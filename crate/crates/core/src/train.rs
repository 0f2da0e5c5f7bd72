//! Minibatch Adam training with cross-entropy loss, and test-set
//! evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Patch, PatchSet};
use crate::error::{Error, Result};
use crate::metrics::{metrics_from_confusion, ConfusionMatrix, MetricsReport};
use crate::model::{argmax, forward, model_forward, ModelConfig, ModelParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub shuffle: bool,
    /// Cosine-anneal the learning rate per epoch instead of keeping it
    /// constant.
    pub cosine_schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 200,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle: true,
            cosine_schedule: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps must be > 0".into(),
            ));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_schedule && self.epochs > 0 {
            let p = epoch as f64 / self.epochs as f64;
            self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        } else {
            self.learning_rate
        }
    }
}

/// First and second moment estimates per parameter tensor, in canonical
/// parameter order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

/// One bias-corrected Adam update of every parameter from its gradient
/// slot.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<Tensor<T>>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    adam_step_with_lr(params, state, config, config.learning_rate)
}

fn adam_step_with_lr<T: Scalar>(
    params: &mut ModelParams<Tensor<T>>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let mut missing = None;
    params.visit_mut(|name, t| {
        if missing.is_none() && t.grad().is_none() {
            missing = Some(name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::Tape(format!("parameter {name} has no gradient")));
    }
    if state.m.is_empty() {
        params.visit_mut(|_, t| {
            state.m.push(vec![T::zero(); t.numel()]);
            state.v.push(vec![T::zero(); t.numel()]);
        });
    }
    state.step += 1;
    let mut idx = 0;
    params.visit_mut(|_, t| {
        let (data, grad) = t.data_and_grad_mut();
        let grad = grad.expect("checked above");
        adam_update(
            data,
            grad,
            &mut state.m[idx],
            &mut state.v[idx],
            state.step,
            config,
            lr,
        );
        idx += 1;
    });
    Ok(())
}

/// Bias-corrected Adam update of one parameter slice at step `step`
/// (1-based): `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    config: &TrainConfig,
    lr: f64,
) {
    let f = |x: f64| T::from_f64_lossy(x);
    let bias1 = f(1.0 - config.beta1.powi(step as i32));
    let bias2 = f(1.0 - config.beta2.powi(step as i32));
    let (b1, b2, eps, lr) = (f(config.beta1), f(config.beta2), f(config.eps), f(lr));
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of training samples classified correctly during the epoch
    /// (before each step's update), in [0, 1].
    pub train_accuracy: f64,
}

pub fn patch_tensor<T: Scalar>(set: &PatchSet, patch: &Patch) -> Tensor<T> {
    Tensor::new(
        vec![set.bands, set.patch_size, set.patch_size],
        patch.values.iter().map(|&v| T::from_f32_lossy(v)).collect(),
    )
    .expect("patch extents match the set")
}

fn check_set(set: &PatchSet, config: &ModelConfig) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Data("patch set is empty".into()));
    }
    if set.bands != config.pca_bands || set.patch_size != config.patch_size {
        return Err(Error::Config(format!(
            "patches are {}x{}x{} but the model expects {}x{}x{}",
            set.patch_size,
            set.patch_size,
            set.bands,
            config.patch_size,
            config.patch_size,
            config.pca_bands
        )));
    }
    if set.num_classes != config.num_classes {
        return Err(Error::Config(format!(
            "patch set has {} classes, model has {}",
            set.num_classes, config.num_classes
        )));
    }
    Ok(())
}

struct SampleResult<T> {
    grads: Vec<Vec<T>>,
    loss: f64,
    correct: bool,
}

fn sample_gradients<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    config: &ModelConfig,
    set: &PatchSet,
    patch: &Patch,
) -> Result<SampleResult<T>> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let x = tape.constant(&patch_tensor(set, patch));
    let trace = forward(x, &bound, config)?;
    let target = patch.label as usize - 1;
    let correct = argmax(&trace.logits.value()) == target;
    let loss = trace.logits.cross_entropy(&[target])?;
    let loss_value = loss.item().to_f64_lossy();
    let grads = tape.backward(loss)?;
    let flat = bound
        .leaves()
        .into_iter()
        .map(|v| {
            grads
                .get(*v)
                .map(<[T]>::to_vec)
                .expect("parameters are leaves")
        })
        .collect();
    Ok(SampleResult {
        grads: flat,
        loss: loss_value,
        correct,
    })
}

/// Trains `params` in place. Per epoch: seeded shuffle, minibatches of
/// `batch_size` (the last one may be smaller), mean cross-entropy, one
/// Adam step per batch. Per-sample gradients are computed in parallel and
/// summed in sample order, so results do not depend on the thread count.
pub fn train_loop<T: Scalar>(
    params: &mut ModelParams<Tensor<T>>,
    config: &ModelConfig,
    train: &PatchSet,
    tc: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    tc.validate()?;
    check_set(train, config)?;
    params.set_requires_grad(true);
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        if tc.shuffle {
            order.shuffle(&mut rng);
        }
        let lr = tc.lr_at(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(tc.batch_size) {
            let snapshot = &*params;
            let results: Vec<SampleResult<T>> = batch
                .par_iter()
                .map(|&i| sample_gradients(snapshot, config, train, &train.patches[i]))
                .collect::<Result<_>>()?;
            params.zero_grad();
            let scale = T::one() / T::from_usize(batch.len()).unwrap_or_else(T::one);
            for r in &results {
                let mut idx = 0;
                let mut err = Ok(());
                params.visit_mut(|_, t| {
                    if err.is_ok() {
                        err = t.accumulate_grad(&r.grads[idx], scale);
                    }
                    idx += 1;
                });
                err?;
                loss_sum += r.loss;
                correct += r.correct as usize;
            }
            adam_step_with_lr(params, &mut state, tc, lr)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
        };
        if !record.mean_loss.is_finite() {
            return Err(Error::NonFinite {
                op: "training loss",
            });
        }
        progress(&record);
        history.push(record);
    }
    params.set_requires_grad(false);
    Ok(history)
}

/// Predicted zero-based class per patch (argmax, lowest index on ties).
pub fn predict<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    config: &ModelConfig,
    set: &PatchSet,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.patches.chunks(1024) {
        let tensors: Vec<Tensor<T>> = chunk.iter().map(|p| patch_tensor(set, p)).collect();
        out.extend(
            model_forward(&tensors, params, config)?
                .iter()
                .map(|p| argmax(p)),
        );
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    config: &ModelConfig,
    test: &PatchSet,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    check_set(test, config)?;
    let predictions = predict(params, config, test)?;
    let mut cm = ConfusionMatrix::new(config.num_classes);
    for (p, &pred) in test.patches.iter().zip(&predictions) {
        cm.add(p.label as usize - 1, pred);
    }
    let report = metrics_from_confusion(&cm)?;
    Ok((cm, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = ModelConfig::tiny(2);
        let mut p = init_params::<f64>(&cfg, 1).unwrap();
        let before = p.clone();
        p.set_requires_grad(true);
        let mut state = AdamState::default();
        adam_step(&mut p, &mut state, &TrainConfig::default()).unwrap();
        p.set_requires_grad(false);
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn missing_gradients_are_an_error() {
        let cfg = ModelConfig::tiny(2);
        let mut p = init_params::<f32>(&cfg, 1).unwrap();
        assert!(adam_step(&mut p, &mut AdamState::default(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let cfg = ModelConfig::tiny(2);
        let mut p = init_params::<f32>(&cfg, 1).unwrap();
        let before = p.clone();
        let set = PatchSet {
            patches: vec![Patch {
                values: vec![0.5; 5 * 49],
                label: 1,
                center: (0, 0),
            }],
            patch_size: 7,
            bands: 5,
            num_classes: 2,
        };
        let tc = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let h = train_loop(&mut p, &cfg, &set, &tc, |_| {}).unwrap();
        assert!(h.is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn empty_set_is_rejected() {
        let cfg = ModelConfig::tiny(2);
        let mut p = init_params::<f32>(&cfg, 1).unwrap();
        let set = PatchSet {
            patches: vec![],
            patch_size: 7,
            bands: 5,
            num_classes: 2,
        };
        assert!(train_loop(&mut p, &cfg, &set, &TrainConfig::default(), |_| {}).is_err());
        assert!(evaluate(&p, &cfg, &set).is_err());
    }
}
