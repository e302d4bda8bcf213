//! Mini-batch SGD with batch-statistics normalization and hand-written
//! backpropagation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, Act, BN_EPS};
use super::{global_pool, softmax, ConvNorm, ModelSpec};
use crate::error::{Error, Result};
use crate::numerics::{RasterImage, Tensor};

/// Running-statistics momentum for the normalization layers.
const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RasterImage,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Inference-mode cross-entropy on the training set before the first step.
    pub initial_loss: f64,
    /// Mean training-mode batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Inference-mode cross-entropy on the training set after the last epoch.
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub weight: Vec<f32>,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub stem: LayerGrad,
    pub blocks: Vec<LayerGrad>,
    pub head_weight: Vec<f32>,
    pub head_bias: Vec<f32>,
}

struct LayerCache {
    col: Vec<f32>,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    /// ReLU output before the residual add.
    act: Vec<f32>,
    in_shape: (usize, usize, usize, usize),
}

struct Moments {
    mean: Vec<f32>,
    var: Vec<f32>,
    count: usize,
}

fn layer_forward_train(layer: &ConvNorm, x: &Act, residual: bool) -> (Act, LayerCache, Moments) {
    let k = layer.kernel();
    let (col, ho, wo) = ops::im2col(x, k, layer.stride);
    let co = layer.out_channels();
    let rows = layer.in_channels() * k * k;
    let np = x.n * ho * wo;
    let z = ops::gemm_weight_col(layer.weight.data(), co, rows, &col, np);

    let mut xhat = vec![0.0f32; co * np];
    let mut act = vec![0.0f32; co * np];
    let mut inv_std = vec![0.0f32; co];
    let mut moments = Moments {
        mean: vec![0.0; co],
        var: vec![0.0; co],
        count: np,
    };
    for o in 0..co {
        let row = &z[o * np..(o + 1) * np];
        let (mean, var) = ops::row_moments(row);
        let inv = 1.0 / (var + BN_EPS).sqrt();
        moments.mean[o] = mean;
        moments.var[o] = var;
        inv_std[o] = inv;
        for p in 0..np {
            let xh = (row[p] - mean) * inv;
            xhat[o * np + p] = xh;
            act[o * np + p] = (layer.scale[o] * xh + layer.shift[o]).max(0.0);
        }
    }
    let mut out = act.clone();
    if residual {
        for (o, i) in out.iter_mut().zip(&x.data) {
            *o += i;
        }
    }
    let cache = LayerCache {
        col,
        xhat,
        inv_std,
        act,
        in_shape: (x.c, x.n, x.h, x.w),
    };
    (
        Act {
            c: co,
            n: x.n,
            h: ho,
            w: wo,
            data: out,
        },
        cache,
        moments,
    )
}

fn layer_backward(layer: &ConvNorm, cache: &LayerCache, dout: &[f32], residual: bool, need_dx: bool) -> (Option<Act>, LayerGrad) {
    let co = layer.out_channels();
    let np = dout.len() / co;
    let m = np as f32;
    let mut dz = vec![0.0f32; co * np];
    let mut dscale = vec![0.0f32; co];
    let mut dshift = vec![0.0f32; co];
    for o in 0..co {
        let range = o * np..(o + 1) * np;
        let xhat = &cache.xhat[range.clone()];
        let act = &cache.act[range.clone()];
        let g = &dout[range.clone()];
        let gamma = layer.scale[o];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for p in 0..np {
            let dy = if act[p] > 0.0 { g[p] } else { 0.0 };
            sum_dy += dy as f64;
            sum_dy_xhat += (dy * xhat[p]) as f64;
        }
        dscale[o] = sum_dy_xhat as f32;
        dshift[o] = sum_dy as f32;
        // dxhat = dy * gamma; dz = inv/M * (M*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        let s1 = gamma * sum_dy as f32;
        let s2 = gamma * sum_dy_xhat as f32;
        let inv = cache.inv_std[o];
        let dzr = &mut dz[range];
        for p in 0..np {
            let dy = if act[p] > 0.0 { g[p] } else { 0.0 };
            dzr[p] = inv / m * (m * gamma * dy - s1 - xhat[p] * s2);
        }
    }
    let k = layer.kernel();
    let rows = layer.in_channels() * k * k;
    let dweight = ops::gemm_grad_weight(&dz, co, &cache.col, rows, np);
    let dx = need_dx.then(|| {
        let dcol = ops::gemm_grad_col(layer.weight.data(), co, rows, &dz, np);
        let (c, n, h, w) = cache.in_shape;
        let mut dx = ops::col2im(&dcol, c, n, h, w, k, layer.stride);
        if residual {
            for (d, g) in dx.data.iter_mut().zip(dout) {
                *d += g;
            }
        }
        dx
    });
    (
        dx,
        LayerGrad {
            weight: dweight,
            scale: dscale,
            shift: dshift,
        },
    )
}

struct ForwardTrain {
    loss: f64,
    caches: Vec<LayerCache>,
    moments: Vec<Moments>,
    features: Act,
    pooled: Vec<f32>,
    probs: Vec<Vec<f64>>,
}

fn forward_train(m: &ModelSpec, x: &Act, labels: &[usize]) -> ForwardTrain {
    let mut caches = Vec::with_capacity(m.blocks.len() + 1);
    let mut moments = Vec::with_capacity(m.blocks.len() + 1);
    let (mut a, c, mo) = layer_forward_train(&m.stem, x, false);
    caches.push(c);
    moments.push(mo);
    for b in &m.blocks {
        let (next, c, mo) = layer_forward_train(&b.layer, &a, b.spec.shape_preserving());
        caches.push(c);
        moments.push(mo);
        a = next;
    }
    let pooled = global_pool(&a);
    let mut loss = 0.0;
    let probs: Vec<Vec<f64>> = (0..x.n)
        .map(|s| {
            let p = softmax(&m.logits(&pooled, x.n, s));
            loss -= p[labels[s]].max(f64::MIN_POSITIVE).ln();
            p
        })
        .collect();
    ForwardTrain {
        loss: loss / x.n as f64,
        caches,
        moments,
        features: a,
        pooled,
        probs,
    }
}

fn stack(inputs: &[&Tensor]) -> Result<Act> {
    let first = inputs.first().ok_or(Error::Empty("batch"))?;
    let d = first.dims().to_vec();
    if d.len() != 3 || inputs.iter().any(|t| t.dims() != d.as_slice()) {
        return Err(Error::shape("equal [3, H, W] inputs", format!("{d:?}")));
    }
    let refs: Vec<&[f32]> = inputs.iter().map(|t| t.data()).collect();
    Ok(Act::from_samples(&refs, d[0], d[1], d[2]))
}

/// Training-mode (batch statistics) mean cross-entropy of one batch.
pub fn batch_loss(m: &ModelSpec, inputs: &[&Tensor], labels: &[usize]) -> Result<f64> {
    let x = stack(inputs)?;
    Ok(forward_train(m, &x, labels).loss)
}

/// Training-mode loss and its gradient with respect to every trainable
/// parameter.
pub fn batch_loss_and_grads(m: &ModelSpec, inputs: &[&Tensor], labels: &[usize]) -> Result<(f64, Gradients)> {
    let x = stack(inputs)?;
    let (loss, grads, _) = loss_and_grads(m, &x, labels);
    Ok((loss, grads))
}

fn loss_and_grads(m: &ModelSpec, x: &Act, labels: &[usize]) -> (f64, Gradients, Vec<Moments>) {
    let fwd = forward_train(m, x, labels);
    let n = x.n;
    let f = m.feature_width();
    let classes = m.num_classes();
    let hw = m.head_weight.data();

    let mut dhead_w = vec![0.0f64; classes * f];
    let mut dhead_b = vec![0.0f64; classes];
    let mut dpooled = vec![0.0f64; f * n];
    for s in 0..n {
        for c in 0..classes {
            let target = if labels[s] == c { 1.0 } else { 0.0 };
            let dl = (fwd.probs[s][c] - target) / n as f64;
            dhead_b[c] += dl;
            for j in 0..f {
                dhead_w[c * f + j] += dl * fwd.pooled[j * n + s] as f64;
                dpooled[j * n + s] += dl * hw[c * f + j] as f64;
            }
        }
    }

    let feats = &fwd.features;
    let plane = feats.h * feats.w;
    let mut grad = vec![0.0f32; feats.data.len()];
    for (idx, chunk) in grad.chunks_mut(plane).enumerate() {
        chunk.fill((dpooled[idx] / plane as f64) as f32);
    }

    let mut block_grads = Vec::with_capacity(m.blocks.len());
    for (bi, b) in m.blocks.iter().enumerate().rev() {
        let (dx, g) = layer_backward(&b.layer, &fwd.caches[bi + 1], &grad, b.spec.shape_preserving(), true);
        block_grads.push(g);
        grad = dx.expect("requested").data;
    }
    block_grads.reverse();
    let (_, stem_grad) = layer_backward(&m.stem, &fwd.caches[0], &grad, false, false);

    let grads = Gradients {
        stem: stem_grad,
        blocks: block_grads,
        head_weight: dhead_w.into_iter().map(|v| v as f32).collect(),
        head_bias: dhead_b.into_iter().map(|v| v as f32).collect(),
    };
    (fwd.loss, grads, fwd.moments)
}

fn sgd_layer(layer: &mut ConvNorm, g: &LayerGrad, lr: f32, mo: &Moments) {
    for (w, d) in layer.weight.data_mut().iter_mut().zip(&g.weight) {
        *w -= lr * d;
    }
    for (w, d) in layer.scale.iter_mut().zip(&g.scale) {
        *w -= lr * d;
    }
    for (w, d) in layer.shift.iter_mut().zip(&g.shift) {
        *w -= lr * d;
    }
    let unbias = if mo.count > 1 {
        mo.count as f32 / (mo.count - 1) as f32
    } else {
        1.0
    };
    for o in 0..layer.out_channels() {
        layer.running_mean[o] = (1.0 - BN_MOMENTUM) * layer.running_mean[o] + BN_MOMENTUM * mo.mean[o];
        layer.running_var[o] = (1.0 - BN_MOMENTUM) * layer.running_var[o] + BN_MOMENTUM * mo.var[o] * unbias;
    }
}

fn apply_step(m: &mut ModelSpec, g: &Gradients, lr: f32, moments: &[Moments]) {
    sgd_layer(&mut m.stem, &g.stem, lr, &moments[0]);
    for (bi, b) in m.blocks.iter_mut().enumerate() {
        sgd_layer(&mut b.layer, &g.blocks[bi], lr, &moments[bi + 1]);
    }
    for (w, d) in m.head_weight.data_mut().iter_mut().zip(&g.head_weight) {
        *w -= lr * d;
    }
    for (w, d) in m.head_bias.iter_mut().zip(&g.head_bias) {
        *w -= lr * d;
    }
}

fn encode(m: &ModelSpec, data: &[Sample]) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for s in data {
        let idx = m
            .class_index(&s.label)
            .ok_or_else(|| Error::UnknownClass(s.label.clone()))?;
        labels.push(idx);
        inputs.push(m.preprocess(&s.image)?);
    }
    Ok((inputs, labels))
}

fn inference_loss(m: &ModelSpec, inputs: &[Tensor], labels: &[usize]) -> Result<f64> {
    let probs = m.forward_batch(inputs)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -(p[l] as f64).max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / inputs.len() as f64)
}

/// Inference-mode mean cross-entropy over a labeled set.
pub fn evaluate_loss(m: &ModelSpec, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let (inputs, labels) = encode(m, data)?;
    inference_loss(m, &inputs, &labels)
}

/// Fine-tunes every layer with plain SGD. Deterministic for a given
/// `(model, data order, config)`.
pub fn train(mut m: ModelSpec, data: &[Sample], cfg: &TrainConfig) -> Result<(ModelSpec, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let (inputs, labels) = encode(&m, data)?;
    let mut report = TrainReport {
        initial_loss: inference_loss(&m, &inputs, &labels)?,
        ..Default::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&Tensor> = batch.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = stack(&refs)?;
            let (loss, grads, moments) = loss_and_grads(&m, &x, &ys);
            apply_step(&mut m, &grads, cfg.learning_rate, &moments);
            epoch_loss += loss;
            batches += 1;
        }
        report.epoch_losses.push(epoch_loss / batches as f64);
    }
    report.final_loss = inference_loss(&m, &inputs, &labels)?;
    Ok((m, report))
}
