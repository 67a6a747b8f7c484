//! Seeded training: stratified split, mini-batch gradient descent,
//! best-validation checkpointing, and continuation for fine-tuning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::pointcloud::PointCloud;
use crate::scalar::{rf, wf, Real};
use crate::seed;
use crate::stream::ClassId;

use super::{ModelConfig, ModelError, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Momentum coefficient; 0 recovers plain gradient descent.
    pub momentum: f64,
    pub seed: u64,
    /// Fraction of each class held out for validation.
    pub validation_fraction: f64,
    /// Day-1 replay examples per pseudo-labeled example during fine-tuning.
    pub replay_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            seed: 0,
            validation_fraction: 0.2,
            replay_ratio: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.replay_ratio >= 0.0) {
            return Err(ModelError::InvalidConfig("replay_ratio must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

fn check_labels<R: Real>(
    data: &[(PointCloud<R>, ClassId)],
    num_classes: usize,
) -> Result<(), ModelError> {
    for (_, y) in data {
        if *y >= num_classes {
            return Err(ModelError::LabelOutOfRange {
                label: *y,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Seeded stratified split; returns (train, validation) index sets.
fn stratified_split<R: Real>(
    data: &[(PointCloud<R>, ClassId)],
    num_classes: usize,
    fraction: f64,
    split_seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, (_, y)) in data.iter().enumerate() {
        by_class[*y].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            return Err(ModelError::ClassMissing { class });
        }
        let mut rng = seed::rng(split_seed, &[0x511, class as u64]);
        idx.shuffle(&mut rng);
        // floor keeps at least one training example per class
        let n_val = ((idx.len() as f64) * fraction).floor() as usize;
        let cut = idx.len() - n_val;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

fn accuracy<R: Real>(params: &ModelParams<R>, data: &[(PointCloud<R>, ClassId)], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let correct = idx
        .iter()
        .filter(|&&i| {
            let (cloud, y) = &data[i];
            params.forward(cloud).map(|p| p.argmax() == *y).unwrap_or(false)
        })
        .count();
    correct as f64 / idx.len() as f64
}

/// Momentum step: v <- momentum*v + g, then w <- w - lr*v.
fn momentum_step<R: Real>(
    params: &mut ModelParams<R>,
    grads: &ModelParams<R>,
    velocity: &mut ModelParams<R>,
    lr: R,
    momentum: R,
) {
    for (v, g) in velocity.tensors_mut().into_iter().zip(grads.tensors()) {
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = momentum * *vi + *gi;
        }
    }
    for (w, v) in params.tensors_mut().into_iter().zip(velocity.tensors()) {
        for (wi, vi) in w.iter_mut().zip(v) {
            *wi = *wi - lr * *vi;
        }
    }
}

fn run_epochs<R: Real>(
    params: &mut ModelParams<R>,
    data: &[(PointCloud<R>, ClassId)],
    train_idx: &[usize],
    cfg: &TrainConfig,
    epoch_seed_tag: u64,
) -> Result<Vec<f64>, ModelError> {
    let lr = rf::<R>(cfg.learning_rate);
    let mom = rf::<R>(cfg.momentum);
    let mut velocity = params.zeros_like();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = train_idx.to_vec();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(cfg.seed, &[epoch_seed_tag, epoch as u64]);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(PointCloud<R>, ClassId)> =
                chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = params.loss_and_grads(&batch)?;
            momentum_step(params, &grads, &mut velocity, lr, mom);
            loss_sum += wf(loss);
            batches += 1;
        }
        losses.push(loss_sum / batches.max(1) as f64);
    }
    Ok(losses)
}

/// Train from scratch on labeled frames. Returns the parameters of the
/// best-validation-accuracy epoch together with per-epoch curves.
pub fn train<R: Real>(
    model_cfg: &ModelConfig,
    data: &[(PointCloud<R>, ClassId)],
    cfg: &TrainConfig,
) -> Result<(ModelParams<R>, TrainReport), ModelError> {
    model_cfg.validate()?;
    cfg.validate()?;
    if !(cfg.learning_rate > 0.0) {
        return Err(ModelError::InvalidConfig("learning_rate must be > 0".into()));
    }
    if data.is_empty() {
        return Err(ModelError::EmptyPool);
    }
    check_labels(data, model_cfg.num_classes)?;
    let (train_idx, val_idx) = stratified_split(
        data,
        model_cfg.num_classes,
        cfg.validation_fraction,
        cfg.seed,
    )?;

    let mut params = ModelParams::init(model_cfg.clone(), seed::derive(cfg.seed, &[0x1417]))?;
    // measure validation on the training portion if the holdout is empty
    let eval_idx: &[usize] = if val_idx.is_empty() { &train_idx } else { &val_idx };

    let lr = rf::<R>(cfg.learning_rate);
    let mom = rf::<R>(cfg.momentum);
    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = train_idx.clone();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ModelParams<R>, usize, f64)> = None;
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(cfg.seed, &[0xe9, epoch as u64]);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(PointCloud<R>, ClassId)> =
                chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = params.loss_and_grads(&batch)?;
            momentum_step(&mut params, &grads, &mut velocity, lr, mom);
            loss_sum += wf(loss);
            batches += 1;
        }
        let val_accuracy = accuracy(&params, data, eval_idx);
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_accuracy,
        });
        let improved = best
            .as_ref()
            .map(|(_, _, acc)| val_accuracy > *acc)
            .unwrap_or(true);
        if improved {
            best = Some((params.clone(), epoch, val_accuracy));
        }
    }
    let (best_params, best_epoch, best_val_accuracy) = best.expect("at least one epoch ran");
    Ok((
        best_params,
        TrainReport {
            epochs,
            best_epoch,
            best_val_accuracy,
        },
    ))
}

/// Continue optimization from existing parameters on a new pool. No
/// validation split; returns the final-epoch parameters.
pub fn fine_tune<R: Real>(
    params: &ModelParams<R>,
    pool: &[(PointCloud<R>, ClassId)],
    cfg: &TrainConfig,
) -> Result<ModelParams<R>, ModelError> {
    cfg.validate()?;
    if !(cfg.learning_rate >= 0.0) {
        return Err(ModelError::InvalidConfig("learning_rate must be >= 0".into()));
    }
    if pool.is_empty() {
        return Err(ModelError::EmptyPool);
    }
    check_labels(pool, params.cfg.num_classes)?;
    let mut tuned = params.clone();
    let all: Vec<usize> = (0..pool.len()).collect();
    run_epochs(&mut tuned, pool, &all, cfg, 0xf1e)?;
    Ok(tuned)
}

/// Maximum relative error between analytic gradients and central finite
/// differences over every parameter tensor; the independent oracle for the
/// backward pass.
pub fn max_gradient_error<R: Real>(
    params: &ModelParams<R>,
    batch: &[(PointCloud<R>, ClassId)],
) -> f64 {
    let eps = 1e-4;
    let (_, grads) = params.loss_and_grads(batch).expect("valid batch");
    let analytic: Vec<Vec<f64>> = grads
        .tensors()
        .iter()
        .map(|t| t.iter().map(|&g| wf(g)).collect())
        .collect();

    let mut work = params.clone();
    let n_tensors = analytic.len();
    let mut max_rel: f64 = 0.0;
    for t in 0..n_tensors {
        let len = analytic[t].len();
        for i in 0..len {
            let orig = work.tensors_mut()[t][i];
            work.tensors_mut()[t][i] = orig + rf(eps);
            let plus = wf(work.loss(batch).expect("valid batch"));
            work.tensors_mut()[t][i] = orig - rf(eps);
            let minus = wf(work.loss(batch).expect("valid batch"));
            work.tensors_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t][i];
            let rel = (a - numeric).abs() / f64::max(f64::max(a.abs(), numeric.abs()), 1e-4);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn blob_cloud(center: [f64; 3], n: usize, tag: u64) -> PointCloud<f64> {
        let mut rng = seed::rng(7, &[tag]);
        let pts = (0..n)
            .map(|_| {
                [
                    center[0] + rng.random_range(-0.1..0.1),
                    center[1] + rng.random_range(-0.1..0.1),
                    center[2] + rng.random_range(-0.1..0.1),
                ]
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    fn two_class_data(per_class: usize, n_points: usize) -> Vec<(PointCloud<f64>, ClassId)> {
        let mut data = Vec::new();
        for i in 0..per_class {
            data.push((blob_cloud([0.5, 0.0, 0.0], n_points, i as u64), 0));
            data.push((blob_cloud([-0.5, 0.2, 0.1], n_points, 1000 + i as u64), 1));
        }
        data
    }

    fn small_cfg(num_points: usize) -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            num_points,
            point_widths: vec![8, 16],
            head_widths: vec![8],
            input_transform: false,
            lambda_reg: 1e-3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn separable_classes_learned() {
        let data = two_class_data(40, 32);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 11,
            ..TrainConfig::default()
        };
        let (_, report) = train(&small_cfg(32), &data, &cfg).unwrap();
        assert!(
            report.best_val_accuracy >= 0.95,
            "validation accuracy {}",
            report.best_val_accuracy
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data = two_class_data(10, 16);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            learning_rate: 0.05,
            seed: 3,
            ..TrainConfig::default()
        };
        let (p1, r1) = train(&small_cfg(16), &data, &cfg).unwrap();
        let (p2, r2) = train(&small_cfg(16), &data, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn missing_class_rejected() {
        let data: Vec<(PointCloud<f64>, ClassId)> =
            (0..10).map(|i| (blob_cloud([0.0; 3], 16, i), 0)).collect();
        let err = train(&small_cfg(16), &data, &TrainConfig::default()).unwrap_err();
        assert_eq!(err, ModelError::ClassMissing { class: 1 });
    }

    #[test]
    fn fine_tune_zero_lr_is_identity() {
        let data = two_class_data(5, 16);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.05,
            seed: 5,
            ..TrainConfig::default()
        };
        let (params, _) = train(&small_cfg(16), &data, &cfg).unwrap();
        let frozen = TrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        let tuned = fine_tune(&params, &data, &frozen).unwrap();
        assert_eq!(tuned, params);
    }

    #[test]
    fn fine_tune_empty_pool_rejected() {
        let data = two_class_data(5, 16);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.05,
            seed: 5,
            ..TrainConfig::default()
        };
        let (params, _) = train(&small_cfg(16), &data, &cfg).unwrap();
        assert_eq!(fine_tune(&params, &[], &cfg).unwrap_err(), ModelError::EmptyPool);
    }
}
