//! Frame-level classifier: a permutation-invariant point-set network.
//!
//! Per-point shared MLP -> channel max pool -> dense head, with an optional
//! learned 3x3 input transform kept near-orthogonal by a Frobenius
//! regularizer. Training is plain seeded mini-batch gradient descent, so
//! runs are bit-reproducible.

mod net;
mod train;

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use net::{orthogonality_penalty, Dense};
pub use train::{fine_tune, max_gradient_error, train, EpochStats, TrainConfig, TrainReport};

use crate::pointcloud::PointCloud;
use crate::scalar::{rf, Real};
use crate::stream::ClassId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("expected {expected} points, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("class {class} missing from training data")]
    ClassMissing { class: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training pool")]
    EmptyPool,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Architecture hyperparameters; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Fixed input width; clouds must arrive resampled to this count.
    pub num_points: usize,
    /// Shared per-point MLP widths.
    pub point_widths: Vec<usize>,
    /// Hidden widths of the classification head (the final layer to
    /// `num_classes` is implicit).
    pub head_widths: Vec<usize>,
    /// Enable the learned 3x3 input transform.
    pub input_transform: bool,
    pub tnet_point_widths: Vec<usize>,
    pub tnet_head_widths: Vec<usize>,
    /// Weight of the orthogonality penalty on the input transform.
    pub lambda_reg: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            num_points: 1500,
            point_widths: vec![64, 128, 256],
            head_widths: vec![128],
            input_transform: true,
            tnet_point_widths: vec![32, 64],
            tnet_head_widths: vec![32],
            lambda_reg: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_points < 1 {
            return Err(ModelError::InvalidConfig("num_points must be >= 1".into()));
        }
        if self.point_widths.is_empty() {
            return Err(ModelError::InvalidConfig("point_widths must be non-empty".into()));
        }
        if self.input_transform && self.tnet_point_widths.is_empty() {
            return Err(ModelError::InvalidConfig(
                "tnet_point_widths must be non-empty when input_transform is on".into(),
            ));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(ModelError::InvalidConfig("lambda_reg must be >= 0".into()));
        }
        Ok(())
    }
}

/// Input transform sub-network; the final layer starts at exactly zero so
/// the initial transform is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tnet<R> {
    pub point_layers: Vec<Dense<R>>,
    pub head_layers: Vec<Dense<R>>,
}

/// All model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<R> {
    pub cfg: ModelConfig,
    pub tnet: Option<Tnet<R>>,
    pub point_layers: Vec<Dense<R>>,
    pub head_layers: Vec<Dense<R>>,
}

/// Per-frame class posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector<R> {
    pub probs: Vec<R>,
}

impl<R: Real> ProbVector<R> {
    /// Index of the largest probability; ties break to the lowest class.
    pub fn argmax(&self) -> ClassId {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate().skip(1) {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> R {
        self.probs[self.argmax()]
    }
}

fn seeded_stack<R: Real>(widths: &[usize], in_dim: usize, rng: &mut ChaCha8Rng) -> Vec<Dense<R>> {
    let mut layers = Vec::with_capacity(widths.len());
    let mut prev = in_dim;
    for &w in widths {
        layers.push(Dense::seeded(prev, w, rng));
        prev = w;
    }
    layers
}

impl<R: Real> ModelParams<R> {
    /// Seeded initialization.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tnet = cfg.input_transform.then(|| {
            let point_layers = seeded_stack(&cfg.tnet_point_widths, 3, &mut rng);
            let mut head_layers = seeded_stack(
                &cfg.tnet_head_widths,
                *cfg.tnet_point_widths.last().expect("validated non-empty"),
                &mut rng,
            );
            let last_in = cfg
                .tnet_head_widths
                .last()
                .copied()
                .unwrap_or_else(|| *cfg.tnet_point_widths.last().expect("non-empty"));
            // zero weights + zero bias: predicted offset is 0, A starts at I
            head_layers.push(Dense::zeros(last_in, 9));
            Tnet {
                point_layers,
                head_layers,
            }
        });
        let point_layers = seeded_stack(&cfg.point_widths, 3, &mut rng);
        let mut head_layers = seeded_stack(
            &cfg.head_widths,
            *cfg.point_widths.last().expect("validated non-empty"),
            &mut rng,
        );
        let head_in = cfg
            .head_widths
            .last()
            .copied()
            .unwrap_or_else(|| *cfg.point_widths.last().expect("non-empty"));
        head_layers.push(Dense::seeded(head_in, cfg.num_classes, &mut rng));
        Ok(Self {
            cfg,
            tnet,
            point_layers,
            head_layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let zero_stack = |layers: &[Dense<R>]| {
            layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect::<Vec<_>>()
        };
        Self {
            cfg: self.cfg.clone(),
            tnet: self.tnet.as_ref().map(|t| Tnet {
                point_layers: zero_stack(&t.point_layers),
                head_layers: zero_stack(&t.head_layers),
            }),
            point_layers: zero_stack(&self.point_layers),
            head_layers: zero_stack(&self.head_layers),
        }
    }

    /// All parameter tensors in a fixed order (used by the SGD step and by
    /// finite-difference checks).
    pub fn tensors(&self) -> Vec<&Vec<R>> {
        let mut out = Vec::new();
        if let Some(t) = &self.tnet {
            for l in t.point_layers.iter().chain(&t.head_layers) {
                out.push(&l.w);
                out.push(&l.b);
            }
        }
        for l in self.point_layers.iter().chain(&self.head_layers) {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<R>> {
        let mut out: Vec<&mut Vec<R>> = Vec::new();
        if let Some(t) = &mut self.tnet {
            for l in t.point_layers.iter_mut().chain(t.head_layers.iter_mut()) {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
        }
        for l in self
            .point_layers
            .iter_mut()
            .chain(self.head_layers.iter_mut())
        {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    fn flatten_cloud(&self, cloud: &PointCloud<R>) -> Result<Vec<R>, ModelError> {
        if cloud.len() != self.cfg.num_points {
            return Err(ModelError::ShapeMismatch {
                expected: self.cfg.num_points,
                got: cloud.len(),
            });
        }
        let mut x = Vec::with_capacity(cloud.len() * 3);
        for p in cloud.points() {
            x.extend_from_slice(p);
        }
        Ok(x)
    }

    /// Class posterior for one cloud.
    pub fn forward(&self, cloud: &PointCloud<R>) -> Result<ProbVector<R>, ModelError> {
        let x = self.flatten_cloud(cloud)?;
        let trace = net::forward_trace(self, &x, self.cfg.num_points);
        Ok(ProbVector { probs: trace.probs })
    }

    /// Mean cross-entropy plus the orthogonality penalty over a batch.
    pub fn loss(&self, batch: &[(PointCloud<R>, ClassId)]) -> Result<R, ModelError> {
        let flat = batch
            .iter()
            .map(|(c, y)| Ok((self.flatten_cloud(c)?, *y)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let (loss, _) = self.loss_and_grads_flat(&flat, false)?;
        Ok(loss)
    }

    /// Loss plus gradients; the workhorse of the training loop.
    pub fn loss_and_grads(
        &self,
        batch: &[(PointCloud<R>, ClassId)],
    ) -> Result<(R, ModelParams<R>), ModelError> {
        let flat = batch
            .iter()
            .map(|(c, y)| Ok((self.flatten_cloud(c)?, *y)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let (loss, grads) = self.loss_and_grads_flat(&flat, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    /// The current 3x3 input transform for a cloud, identity offset
    /// included; `None` when the transform is disabled.
    pub fn input_transform_matrix(&self, cloud: &PointCloud<R>) -> Result<Option<Vec<R>>, ModelError> {
        if self.tnet.is_none() {
            return Ok(None);
        }
        let x = self.flatten_cloud(cloud)?;
        let trace = net::forward_trace(self, &x, self.cfg.num_points);
        Ok(trace.tnet.map(|t| t.a))
    }
}

/// Checkpoint container; version bumps on any layout change.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint<R> {
    version: u32,
    /// FNV-1a hash of the serialized model config, for quick compatibility
    /// checks between pipeline stages.
    config_hash: u64,
    params: ModelParams<R>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Stable hash of the model config.
pub fn config_hash(cfg: &ModelConfig) -> u64 {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

pub fn save_checkpoint<R: Real>(params: &ModelParams<R>, path: impl AsRef<Path>) -> std::io::Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash(&params.cfg),
        params: params.clone(),
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn load_checkpoint<R: Real>(path: impl AsRef<Path>) -> std::io::Result<ModelParams<R>> {
    let file = std::fs::File::open(path)?;
    let ckpt: Checkpoint<R> = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unsupported checkpoint version {}", ckpt.version),
        ));
    }
    if ckpt.config_hash != config_hash(&ckpt.params.cfg) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "checkpoint config hash mismatch",
        ));
    }
    Ok(ckpt.params)
}

/// Small helper shared by tests and the orthogonality invariants: evaluate
/// ||I - A A^T||_F^2 for an arbitrary row-major 3x3 matrix.
pub fn orthogonality_penalty_of<R: Real>(a: &[R; 9]) -> R {
    orthogonality_penalty(&a[..])
}

/// Uniform posterior cross-entropy reference: ln C.
pub fn uniform_cross_entropy<R: Real>(num_classes: usize) -> R {
    rf::<R>(num_classes as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            num_points: 8,
            point_widths: vec![4, 6],
            head_widths: vec![5],
            input_transform: true,
            tnet_point_widths: vec![4],
            tnet_head_widths: vec![4],
            lambda_reg: 1e-3,
        }
    }

    fn random_cloud(n: usize, seed_tag: u64) -> PointCloud<f64> {
        let mut rng = seed::rng(99, &[seed_tag]);
        let pts = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn forward_is_a_distribution() {
        let params = ModelParams::<f64>::init(toy_cfg(), 1).unwrap();
        let p = params.forward(&random_cloud(8, 0)).unwrap();
        assert_eq!(p.probs.len(), 3);
        let sum: f64 = p.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(p.probs.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_is_permutation_invariant_exactly() {
        let params = ModelParams::<f64>::init(toy_cfg(), 2).unwrap();
        let cloud = random_cloud(8, 1);
        let mut shuffled = cloud.points().to_vec();
        shuffled.reverse();
        shuffled.swap(0, 3);
        let shuffled = PointCloud::new(shuffled).unwrap();
        let a = params.forward(&cloud).unwrap();
        let b = params.forward(&shuffled).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let params = ModelParams::<f64>::init(toy_cfg(), 3).unwrap();
        let err = params.forward(&random_cloud(7, 2)).unwrap_err();
        assert_eq!(err, ModelError::ShapeMismatch { expected: 8, got: 7 });
    }

    #[test]
    fn fresh_transform_is_identity_with_zero_penalty() {
        let params = ModelParams::<f64>::init(toy_cfg(), 4).unwrap();
        let a = params
            .input_transform_matrix(&random_cloud(8, 3))
            .unwrap()
            .unwrap();
        let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(a, identity);
        assert_eq!(orthogonality_penalty(&a), 0.0);
    }

    #[test]
    fn orthogonality_penalty_positive_off_manifold() {
        let a: [f64; 9] = [2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        // E = diag(-3, 0, 0), so the penalty is 9
        assert!((orthogonality_penalty_of(&a) - 9.0).abs() < 1e-12);
        // rotations are exactly on the manifold
        let c = 0.6_f64;
        let s = 0.8_f64;
        let rot = [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0];
        assert!(orthogonality_penalty_of(&rot).abs() < 1e-12);
    }

    #[test]
    fn uniform_loss_equals_ln_c() {
        // head output forced to equal logits => uniform when all weights are 0
        let mut params = ModelParams::<f64>::init(toy_cfg(), 5).unwrap();
        let last = params.head_layers.last_mut().unwrap();
        last.w.iter_mut().for_each(|v| *v = 0.0);
        last.b.iter_mut().for_each(|v| *v = 0.0);
        let batch = vec![(random_cloud(8, 4), 1)];
        // the transform penalty is 0 at init, so the loss is pure ln C
        let loss = params.loss(&batch).unwrap();
        assert!((loss - 3.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let params = ModelParams::<f64>::init(toy_cfg(), 6).unwrap();
        let err = params.loss(&[(random_cloud(8, 5), 3)]).unwrap_err();
        assert_eq!(
            err,
            ModelError::LabelOutOfRange {
                label: 3,
                num_classes: 3
            }
        );
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let params = ModelParams::<f64>::init(toy_cfg(), 7).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let loaded: ModelParams<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
        let cloud = random_cloud(8, 6);
        assert_eq!(
            loaded.forward(&cloud).unwrap().probs,
            params.forward(&cloud).unwrap().probs
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        // seed chosen to keep every preactivation away from ReLU kinks and
        // pooling ties within the finite-difference epsilon
        let params = ModelParams::<f64>::init(toy_cfg(), 12).unwrap();
        let batch: Vec<(PointCloud<f64>, ClassId)> =
            vec![(random_cloud(8, 7), 0), (random_cloud(8, 8), 2)];
        let max_rel = crate::classifier::train::max_gradient_error(&params, &batch);
        assert!(max_rel <= 1e-3, "max relative gradient error {max_rel}");
    }
}
