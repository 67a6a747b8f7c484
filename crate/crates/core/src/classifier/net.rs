//! Forward and backward passes for the point-set network.
//!
//! The backbone is a shared per-point MLP followed by a channel-wise max
//! pool and a fully connected classification head. An optional input
//! transform sub-network predicts a 3x3 matrix applied to the raw points,
//! regularized toward orthogonality. Everything is hand-rolled on flat
//! row-major buffers so gradients can be checked against finite
//! differences tensor by tensor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{rf, Real};

use super::{ModelError, ModelParams, Tnet};

/// A dense layer; `w` is `in_dim x out_dim` row-major, so row `k` holds the
/// fan-out weights of input `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<R> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<R>,
    pub b: Vec<R>,
}

impl<R: Real> Dense<R> {
    /// Seeded He-style uniform init: w in ±sqrt(6/fan_in) keeps activation
    /// variance stable through ReLU stacks; b starts at zero.
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rf::<R>(rng.random_range(-bound..bound)))
            .collect();
        let b = vec![R::zero(); out_dim];
        Self { in_dim, out_dim, w, b }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![R::zero(); in_dim * out_dim],
            b: vec![R::zero(); out_dim],
        }
    }

    /// y[n x out] = x[n x in] . w + b
    pub fn forward(&self, x: &[R], n_rows: usize) -> Vec<R> {
        debug_assert_eq!(x.len(), n_rows * self.in_dim);
        let (ind, outd) = (self.in_dim, self.out_dim);
        let mut y = vec![R::zero(); n_rows * outd];
        for i in 0..n_rows {
            let row = &mut y[i * outd..(i + 1) * outd];
            row.copy_from_slice(&self.b);
            for k in 0..ind {
                let xv = x[i * ind + k];
                let wrow = &self.w[k * outd..(k + 1) * outd];
                for (yj, wj) in row.iter_mut().zip(wrow) {
                    *yj += xv * *wj;
                }
            }
        }
        y
    }

    /// Accumulate weight gradients into `grad` and return dx.
    pub fn backward(&self, x: &[R], dy: &[R], n_rows: usize, grad: &mut Dense<R>) -> Vec<R> {
        let (ind, outd) = (self.in_dim, self.out_dim);
        debug_assert_eq!(x.len(), n_rows * ind);
        debug_assert_eq!(dy.len(), n_rows * outd);
        let mut dx = vec![R::zero(); n_rows * ind];
        for i in 0..n_rows {
            let xrow = &x[i * ind..(i + 1) * ind];
            let dyrow = &dy[i * outd..(i + 1) * outd];
            for (gb, d) in grad.b.iter_mut().zip(dyrow) {
                *gb += *d;
            }
            for k in 0..ind {
                let xv = xrow[k];
                let wrow = &self.w[k * outd..(k + 1) * outd];
                let gwrow = &mut grad.w[k * outd..(k + 1) * outd];
                let mut acc = R::zero();
                for j in 0..outd {
                    gwrow[j] += xv * dyrow[j];
                    acc += wrow[j] * dyrow[j];
                }
                dx[i * ind + k] = acc;
            }
        }
        dx
    }
}

fn relu_inplace<R: Real>(x: &mut [R]) {
    for v in x.iter_mut() {
        if *v < R::zero() {
            *v = R::zero();
        }
    }
}

/// Zero gradient entries where the forward activation was clipped.
fn relu_mask<R: Real>(dx: &mut [R], post: &[R]) {
    for (d, &a) in dx.iter_mut().zip(post) {
        if a <= R::zero() {
            *d = R::zero();
        }
    }
}

/// Shared MLP over points: ReLU after every layer. Returns all
/// activations; `acts[0]` is the input, `acts[i+1]` the output of layer i.
fn point_stack_forward<R: Real>(layers: &[Dense<R>], x0: &[R], n: usize) -> Vec<Vec<R>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x0.to_vec());
    for layer in layers {
        let mut y = layer.forward(acts.last().expect("acts non-empty"), n);
        relu_inplace(&mut y);
        acts.push(y);
    }
    acts
}

fn point_stack_backward<R: Real>(
    layers: &[Dense<R>],
    acts: &[Vec<R>],
    mut dy: Vec<R>,
    n: usize,
    grads: &mut [Dense<R>],
) -> Vec<R> {
    for i in (0..layers.len()).rev() {
        relu_mask(&mut dy, &acts[i + 1]);
        dy = layers[i].backward(&acts[i], &dy, n, &mut grads[i]);
    }
    dy
}

/// Fully connected stack on a single feature row: ReLU between layers,
/// final layer linear.
fn mlp_forward<R: Real>(layers: &[Dense<R>], x0: &[R]) -> Vec<Vec<R>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x0.to_vec());
    for (i, layer) in layers.iter().enumerate() {
        let mut y = layer.forward(acts.last().expect("acts non-empty"), 1);
        if i + 1 < layers.len() {
            relu_inplace(&mut y);
        }
        acts.push(y);
    }
    acts
}

fn mlp_backward<R: Real>(
    layers: &[Dense<R>],
    acts: &[Vec<R>],
    mut dy: Vec<R>,
    grads: &mut [Dense<R>],
) -> Vec<R> {
    for i in (0..layers.len()).rev() {
        if i + 1 < layers.len() {
            relu_mask(&mut dy, &acts[i + 1]);
        }
        dy = layers[i].backward(&acts[i], &dy, 1, &mut grads[i]);
    }
    dy
}

/// Channel-wise max over points, keeping the first maximizing row per
/// channel. The pooled value is order-independent; the recorded index is
/// only used to route gradients.
fn maxpool<R: Real>(x: &[R], n: usize, d: usize) -> (Vec<R>, Vec<usize>) {
    debug_assert!(n > 0);
    let mut pooled = x[..d].to_vec();
    let mut idx = vec![0usize; d];
    for i in 1..n {
        let row = &x[i * d..(i + 1) * d];
        for j in 0..d {
            if row[j] > pooled[j] {
                pooled[j] = row[j];
                idx[j] = i;
            }
        }
    }
    (pooled, idx)
}

fn maxpool_backward<R: Real>(dy: &[R], idx: &[usize], n: usize) -> Vec<R> {
    let d = dy.len();
    let mut dx = vec![R::zero(); n * d];
    for j in 0..d {
        dx[idx[j] * d + j] += dy[j];
    }
    dx
}

fn softmax<R: Real>(logits: &[R]) -> Vec<R> {
    let max = logits
        .iter()
        .copied()
        .fold(R::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<R> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: R = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(super) struct TnetTrace<R> {
    point_acts: Vec<Vec<R>>,
    pool_idx: Vec<usize>,
    head_acts: Vec<Vec<R>>,
    /// The predicted 3x3 matrix (row-major), identity offset included.
    pub a: Vec<R>,
}

pub(super) struct ForwardTrace<R> {
    pub tnet: Option<TnetTrace<R>>,
    /// `point_acts[0]` is the transformed input; later entries the shared
    /// MLP activations.
    point_acts: Vec<Vec<R>>,
    pool_idx: Vec<usize>,
    head_acts: Vec<Vec<R>>,
    pub probs: Vec<R>,
}

fn tnet_forward<R: Real>(tnet: &Tnet<R>, x0: &[R], n: usize) -> TnetTrace<R> {
    let point_acts = point_stack_forward(&tnet.point_layers, x0, n);
    let top = point_acts.last().expect("stack has output");
    let d = tnet.point_layers.last().expect("tnet has point layers").out_dim;
    let (pooled, pool_idx) = maxpool(top, n, d);
    let head_acts = mlp_forward(&tnet.head_layers, &pooled);
    let mut a = head_acts.last().expect("head has output").clone();
    debug_assert_eq!(a.len(), 9);
    for k in 0..3 {
        a[k * 3 + k] += R::one();
    }
    TnetTrace {
        point_acts,
        pool_idx,
        head_acts,
        a,
    }
}

/// xt[i,:] = x[i,:] . A
fn apply_transform<R: Real>(x: &[R], a: &[R], n: usize) -> Vec<R> {
    let mut xt = vec![R::zero(); n * 3];
    for i in 0..n {
        for j in 0..3 {
            let mut acc = R::zero();
            for k in 0..3 {
                acc += x[i * 3 + k] * a[k * 3 + j];
            }
            xt[i * 3 + j] = acc;
        }
    }
    xt
}

/// Frobenius deviation from orthogonality: ||I - A A^T||_F^2.
pub fn orthogonality_penalty<R: Real>(a: &[R]) -> R {
    debug_assert_eq!(a.len(), 9);
    let mut total = R::zero();
    for i in 0..3 {
        for j in 0..3 {
            let mut aat = R::zero();
            for k in 0..3 {
                aat += a[i * 3 + k] * a[j * 3 + k];
            }
            let e = if i == j { R::one() - aat } else { -aat };
            total += e * e;
        }
    }
    total
}

/// d/dA of the penalty: -4 (I - A A^T) A.
fn orthogonality_grad<R: Real>(a: &[R]) -> Vec<R> {
    let mut e = [R::zero(); 9]; // I - A A^T, symmetric
    for i in 0..3 {
        for j in 0..3 {
            let mut aat = R::zero();
            for k in 0..3 {
                aat += a[i * 3 + k] * a[j * 3 + k];
            }
            e[i * 3 + j] = if i == j { R::one() - aat } else { -aat };
        }
    }
    let mut g = vec![R::zero(); 9];
    let four = rf::<R>(4.0);
    for p in 0..3 {
        for q in 0..3 {
            let mut ea = R::zero();
            for j in 0..3 {
                ea += e[p * 3 + j] * a[j * 3 + q];
            }
            g[p * 3 + q] = -four * ea;
        }
    }
    g
}

pub(super) fn forward_trace<R: Real>(
    params: &ModelParams<R>,
    x0: &[R],
    n: usize,
) -> ForwardTrace<R> {
    let tnet = params.tnet.as_ref().map(|t| tnet_forward(t, x0, n));
    let xt = match &tnet {
        Some(t) => apply_transform(x0, &t.a, n),
        None => x0.to_vec(),
    };
    let point_acts = point_stack_forward(&params.point_layers, &xt, n);
    let top = point_acts.last().expect("stack has output");
    let d = params
        .point_layers
        .last()
        .expect("model has point layers")
        .out_dim;
    let (pooled, pool_idx) = maxpool(top, n, d);
    let head_acts = mlp_forward(&params.head_layers, &pooled);
    let probs = softmax(head_acts.last().expect("head has output"));
    ForwardTrace {
        tnet,
        point_acts,
        pool_idx,
        head_acts,
        probs,
    }
}

/// Cross-entropy of the traced example: -ln p[label].
pub(super) fn trace_cross_entropy<R: Real>(trace: &ForwardTrace<R>, label: usize) -> R {
    let logits = trace.head_acts.last().expect("head has output");
    let max = logits
        .iter()
        .copied()
        .fold(R::neg_infinity(), |a, b| if b > a { b } else { a });
    let lse: R = logits.iter().map(|&z| (z - max).exp()).sum::<R>().ln() + max;
    lse - logits[label]
}

/// Backpropagate one example, accumulating `weight`-scaled gradients.
pub(super) fn backward_trace<R: Real>(
    params: &ModelParams<R>,
    trace: &ForwardTrace<R>,
    x0: &[R],
    n: usize,
    label: usize,
    weight: R,
    grads: &mut ModelParams<R>,
) {
    // d cross-entropy / d logits = p - onehot
    let mut dlogits = trace.probs.clone();
    dlogits[label] -= R::one();
    for d in dlogits.iter_mut() {
        *d *= weight;
    }

    let dpool = mlp_backward(
        &params.head_layers,
        &trace.head_acts,
        dlogits,
        &mut grads.head_layers,
    );
    let dtop = maxpool_backward(&dpool, &trace.pool_idx, n);
    let dxt = point_stack_backward(
        &params.point_layers,
        &trace.point_acts,
        dtop,
        n,
        &mut grads.point_layers,
    );

    let (Some(tnet), Some(ttrace), Some(tgrads)) =
        (&params.tnet, &trace.tnet, &mut grads.tnet)
    else {
        return;
    };

    // dA from the transform application plus the orthogonality penalty
    let mut da = vec![R::zero(); 9];
    for i in 0..n {
        for k in 0..3 {
            let xv = x0[i * 3 + k];
            for j in 0..3 {
                da[k * 3 + j] += xv * dxt[i * 3 + j];
            }
        }
    }
    let lambda = rf::<R>(params.cfg.lambda_reg);
    for (g, og) in da.iter_mut().zip(orthogonality_grad(&ttrace.a)) {
        *g += weight * lambda * og;
    }

    let dpool_t = mlp_backward(&tnet.head_layers, &ttrace.head_acts, da, &mut tgrads.head_layers);
    let d_t = tnet.point_layers.last().expect("tnet point layers").out_dim;
    debug_assert_eq!(dpool_t.len(), d_t);
    let dtop_t = maxpool_backward(&dpool_t, &ttrace.pool_idx, n);
    point_stack_backward(
        &tnet.point_layers,
        &ttrace.point_acts,
        dtop_t,
        n,
        &mut tgrads.point_layers,
    );
}

impl<R: Real> ModelParams<R> {
    /// Mean loss and parameter gradients over a batch of flattened clouds.
    pub(super) fn loss_and_grads_flat(
        &self,
        batch: &[(Vec<R>, usize)],
        want_grads: bool,
    ) -> Result<(R, Option<ModelParams<R>>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let n = self.cfg.num_points;
        let lambda = rf::<R>(self.cfg.lambda_reg);
        let inv = rf::<R>(1.0 / batch.len() as f64);
        let mut grads = want_grads.then(|| self.zeros_like());
        let mut loss = R::zero();
        for (x0, label) in batch {
            if *label >= self.cfg.num_classes {
                return Err(ModelError::LabelOutOfRange {
                    label: *label,
                    num_classes: self.cfg.num_classes,
                });
            }
            if x0.len() != n * 3 {
                return Err(ModelError::ShapeMismatch {
                    expected: n,
                    got: x0.len() / 3,
                });
            }
            let trace = forward_trace(self, x0, n);
            let mut l = trace_cross_entropy(&trace, *label);
            if let Some(t) = &trace.tnet {
                l += lambda * orthogonality_penalty(&t.a);
            }
            loss += inv * l;
            if let Some(g) = grads.as_mut() {
                backward_trace(self, &trace, x0, n, *label, inv, g);
            }
        }
        Ok((loss, grads))
    }

    /// In-place SGD step: p -= lr * g.
    pub fn apply_step(&mut self, grads: &ModelParams<R>, learning_rate: R) {
        let mut mine = self.tensors_mut();
        let theirs = grads.tensors();
        debug_assert_eq!(mine.len(), theirs.len());
        for (p, g) in mine.iter_mut().zip(theirs) {
            debug_assert_eq!(p.len(), g.len());
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv = *pv - learning_rate * *gv;
            }
        }
    }
}
