//! Block-structured CNN classifier.
//!
//! The network is a stem (conv + norm + ReLU, stride 2), an ordered list
//! of blocks, and a head (global average pool + affine + softmax). A block
//! whose input and output shapes agree carries an identity skip and is the
//! unit of pruning; stride-2 or width-changing blocks are plain.

mod io;
pub(crate) mod ops;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{normalize_to_input, resize_bilinear, RasterImage, Tensor};
use ops::{Act, BN_EPS};

pub use io::{load_model, probe_parity, read_probe, save_model, write_probe, ProbeRecord, MANIFEST, PROBE_EXPECTED, PROBE_INPUT};
pub use train::{evaluate_loss, train, Sample, TrainConfig, TrainReport};
#[doc(hidden)]
pub use train::{batch_loss, batch_loss_and_grads, Gradients};

pub const BACKGROUND: &str = "background";

/// Per-channel input normalization applied before the stem.
pub const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Stride of the stem convolution. Not recorded in the manifest.
pub const STEM_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub index: usize,
    pub stage: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub prunable: bool,
}

impl BlockSpec {
    pub fn shape_preserving(&self) -> bool {
        self.in_channels == self.out_channels && self.stride == 1
    }
}

/// Convolution (no bias) followed by batch normalization and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNorm {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub stride: usize,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl ConvNorm {
    fn init(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (cin * k * k) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect();
        ConvNorm {
            weight: Tensor::new(vec![cout, cin, k, k], data).expect("dims match"),
            stride,
            scale: vec![1.0; cout],
            shift: vec![0.0; cout],
            running_mean: vec![0.0; cout],
            running_var: vec![1.0; cout],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + 4 * self.out_channels()
    }

    /// Multiply-accumulates of the conv for an `h`×`w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_size(h, w);
        conv_macs(self.kernel(), self.in_channels(), self.out_channels(), ho, wo)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (ops::out_len(h, k, self.stride), ops::out_len(w, k, self.stride))
    }

    fn check(&self, what: &str) -> Result<()> {
        let d = self.weight.dims();
        if d.len() != 4 || d[2] != d[3] || d[2] % 2 == 0 || d[0] == 0 || d[1] == 0 {
            return Err(Error::Model(format!("{what}: conv weight dims {d:?}")));
        }
        let c = d[0];
        for (name, v) in [
            ("scale", &self.scale),
            ("shift", &self.shift),
            ("mean", &self.running_mean),
            ("var", &self.running_var),
        ] {
            if v.len() != c {
                return Err(Error::Model(format!("{what}: norm {name} has {} entries, expected {c}", v.len())));
            }
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Model(format!("{what}: negative running variance")));
        }
        if self.stride == 0 {
            return Err(Error::Model(format!("{what}: stride 0")));
        }
        Ok(())
    }

    /// Inference: conv, frozen-statistics norm, ReLU.
    pub(crate) fn forward_eval(&self, x: &Act) -> Act {
        let (col, ho, wo) = ops::im2col(x, self.kernel(), self.stride);
        let co = self.out_channels();
        let rows = self.in_channels() * self.kernel() * self.kernel();
        let np = x.n * ho * wo;
        let mut z = ops::gemm_weight_col(self.weight.data(), co, rows, &col, np);
        for o in 0..co {
            let inv = 1.0 / (self.running_var[o] + BN_EPS).sqrt();
            let a = self.scale[o] * inv;
            let b = self.shift[o] - self.running_mean[o] * a;
            for v in &mut z[o * np..(o + 1) * np] {
                *v = (*v * a + b).max(0.0);
            }
        }
        Act {
            c: co,
            n: x.n,
            h: ho,
            w: wo,
            data: z,
        }
    }
}

pub fn conv_macs(k: usize, cin: usize, cout: usize, out_h: usize, out_w: usize) -> u64 {
    (k * k * cin * cout * out_h * out_w) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub spec: BlockSpec,
    pub layer: ConvNorm,
}

impl Block {
    pub(crate) fn forward_eval(&self, x: &Act) -> Act {
        let mut y = self.layer.forward_eval(x);
        if self.spec.shape_preserving() {
            for (o, i) in y.data.iter_mut().zip(&x.data) {
                *o += i;
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_size: usize,
    pub class_names: Vec<String>,
    pub stem: ConvNorm,
    pub blocks: Vec<Block>,
    /// `[classes, features]`
    pub head_weight: Tensor,
    pub head_bias: Vec<f32>,
}

/// Shape of a freshly built network.
#[derive(Clone, Debug)]
pub struct ArchConfig {
    pub input_size: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: 64,
            stem_width: 16,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: 3,
            kernel: 3,
        }
    }
}

impl ModelSpec {
    /// The default 12-block reference network with seeded He init.
    pub fn reference(class_names: Vec<String>, seed: u64) -> Result<Self> {
        Self::build(&ArchConfig::default(), class_names, seed)
    }

    pub fn build(arch: &ArchConfig, class_names: Vec<String>, seed: u64) -> Result<Self> {
        if arch.blocks_per_stage == 0 && !arch.stage_widths.is_empty() {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = arch.kernel;
        let stem = ConvNorm::init(3, arch.stem_width, k, STEM_STRIDE, &mut rng);
        let mut blocks = Vec::new();
        let mut width = arch.stem_width;
        for (stage, &sw) in arch.stage_widths.iter().enumerate() {
            for b in 0..arch.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                let spec = BlockSpec {
                    index: blocks.len(),
                    stage,
                    in_channels: width,
                    out_channels: sw,
                    stride,
                    prunable: width == sw && stride == 1,
                };
                let layer = ConvNorm::init(width, sw, k, stride, &mut rng);
                blocks.push(Block { spec, layer });
                width = sw;
            }
        }
        let classes = class_names.len();
        let normal = Normal::new(0.0f32, 0.01).expect("valid std");
        let head = (0..classes * width).map(|_| normal.sample(&mut rng)).collect();
        let m = ModelSpec {
            input_size: arch.input_size,
            class_names,
            stem,
            blocks,
            head_weight: Tensor::new(vec![classes, width], head)?,
            head_bias: vec![0.0; classes],
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn background_index(&self) -> usize {
        self.class_index(BACKGROUND).expect("validated model has a background class")
    }

    pub fn feature_width(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.spec.out_channels)
            .unwrap_or_else(|| self.stem.out_channels())
    }

    pub fn prunable_indices(&self) -> Vec<usize> {
        self.blocks.iter().filter(|b| b.spec.prunable).map(|b| b.spec.index).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::Model("input size 0".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.class_names {
            if !seen.insert(c.as_str()) {
                return Err(Error::Model(format!("duplicate class name `{c}`")));
            }
        }
        if !seen.contains(BACKGROUND) {
            return Err(Error::Model("class list lacks `background`".into()));
        }
        self.stem.check("stem")?;
        if self.stem.in_channels() != 3 {
            return Err(Error::Model(format!("stem expects {} input channels, need 3", self.stem.in_channels())));
        }
        let mut width = self.stem.out_channels();
        for (i, b) in self.blocks.iter().enumerate() {
            let s = &b.spec;
            let what = format!("block {i}");
            if s.index != i {
                return Err(Error::Model(format!("{what}: index {} out of order", s.index)));
            }
            if s.in_channels != width {
                return Err(Error::Model(format!(
                    "{what}: in_channels {} does not match previous width {width}",
                    s.in_channels
                )));
            }
            if s.stride != 1 && s.stride != 2 {
                return Err(Error::Model(format!("{what}: stride {}", s.stride)));
            }
            if s.prunable != s.shape_preserving() {
                return Err(Error::Model(format!("{what}: prunable flag disagrees with shape")));
            }
            b.layer.check(&what)?;
            if b.layer.in_channels() != s.in_channels || b.layer.out_channels() != s.out_channels || b.layer.stride != s.stride {
                return Err(Error::Model(format!("{what}: weights disagree with block spec")));
            }
            width = s.out_channels;
        }
        let hd = self.head_weight.dims();
        if hd != [self.num_classes(), width] {
            return Err(Error::Model(format!(
                "head weight dims {hd:?}, expected [{}, {width}]",
                self.num_classes()
            )));
        }
        if self.head_bias.len() != self.num_classes() {
            return Err(Error::Model("head bias length differs from class count".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.blocks.iter().map(|b| b.layer.param_count()).sum::<usize>()
            + self.head_weight.len()
            + self.head_bias.len()
    }

    /// Removes a shape-preserving block and re-indexes the rest.
    pub fn remove_block(&mut self, index: usize) -> Result<Block> {
        let b = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::Model(format!("no block {index}")))?;
        if !b.spec.prunable {
            return Err(Error::Model(format!("block {index} is not prunable")));
        }
        let removed = self.blocks.remove(index);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.spec.index = i;
        }
        Ok(removed)
    }

    /// Resizes to the model input and normalizes.
    pub fn preprocess(&self, img: &RasterImage) -> Result<Tensor> {
        let resized = resize_bilinear(img, self.input_size, self.input_size)?;
        normalize_to_input(&resized, INPUT_MEAN, INPUT_STD)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [3, self.input_size, self.input_size];
        if x.dims() != want {
            return Err(Error::shape(format!("{want:?}"), format!("{:?}", x.dims())));
        }
        Ok(())
    }

    fn trunk(&self, x: Act, mut on_block: impl FnMut(&Act)) -> Act {
        let mut a = self.stem.forward_eval(&x);
        for b in &self.blocks {
            a = b.forward_eval(&a);
            on_block(&a);
        }
        a
    }

    fn head(&self, features: &Act) -> Vec<Vec<f32>> {
        let pooled = global_pool(features);
        (0..features.n)
            .map(|s| {
                let logits = self.logits(&pooled, features.n, s);
                softmax(&logits).into_iter().map(|p| p as f32).collect()
            })
            .collect()
    }

    /// Logits for sample `s` of pooled features laid out `[F, N]`.
    pub(crate) fn logits(&self, pooled: &[f32], n: usize, s: usize) -> Vec<f64> {
        let f = self.feature_width();
        let w = self.head_weight.data();
        (0..self.num_classes())
            .map(|c| {
                let mut acc = self.head_bias[c] as f64;
                for j in 0..f {
                    acc += w[c * f + j] as f64 * pooled[j * n + s] as f64;
                }
                acc
            })
            .collect()
    }

    /// Softmax class probabilities for one preprocessed input.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Same as [`forward`](Self::forward), also returning the tensor fed
    /// to global average pooling.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Vec<f32>, Tensor)> {
        self.check_input(x)?;
        let s = self.input_size;
        let feats = self.trunk(Act::from_samples(&[x.data()], 3, s, s), |_| {});
        let probs = self.head(&feats).pop().expect("one sample");
        let pooled_input = Tensor::new(vec![feats.c, feats.h, feats.w], feats.data)?;
        Ok((probs, pooled_input))
    }

    /// Batched inference; inputs must all be preprocessed to the model size.
    pub fn forward_batch(&self, xs: &[Tensor]) -> Result<Vec<Vec<f32>>> {
        const CHUNK: usize = 32;
        let s = self.input_size;
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(CHUNK) {
            for x in chunk {
                self.check_input(x)?;
            }
            let refs: Vec<&[f32]> = chunk.iter().map(|t| t.data()).collect();
            let feats = self.trunk(Act::from_samples(&refs, 3, s, s), |_| {});
            out.extend(self.head(&feats));
        }
        Ok(out)
    }

    /// Class probabilities for raw images (resized and normalized here).
    pub fn predict(&self, images: &[&RasterImage]) -> Result<Vec<Vec<f32>>> {
        let inputs = images.iter().map(|i| self.preprocess(i)).collect::<Result<Vec<_>>>()?;
        self.forward_batch(&inputs)
    }

    /// Fraction of samples whose top-1 class matches the label.
    pub fn accuracy(&self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("accuracy dataset"));
        }
        let imgs: Vec<&RasterImage> = data.iter().map(|s| &s.image).collect();
        let probs = self.predict(&imgs)?;
        let correct = probs
            .iter()
            .zip(data)
            .filter(|(p, s)| self.class_names[argmax(p)] == s.label)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Output of every block, in block order.
    pub fn block_feature_maps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        self.block_feature_maps_any(x)
    }

    /// [`block_feature_maps`](Self::block_feature_maps) without the input
    /// size check; the trunk is fully convolutional.
    pub fn block_feature_maps_any(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (h, w) = self.check_any(x)?;
        let mut maps = Vec::with_capacity(self.blocks.len());
        self.trunk(Act::from_samples(&[x.data()], 3, h, w), |a| {
            maps.push(Tensor::new(vec![a.c, a.h, a.w], a.data.clone()).expect("dims match"));
        });
        Ok(maps)
    }

    /// Final trunk output (`[C, H', W']`) for an input of any spatial size.
    pub fn last_feature_map(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = self.check_any(x)?;
        let a = self.trunk(Act::from_samples(&[x.data()], 3, h, w), |_| {});
        Tensor::new(vec![a.c, a.h, a.w], a.data)
    }

    fn check_any(&self, x: &Tensor) -> Result<(usize, usize)> {
        match x.dims() {
            &[3, h, w] if h > 0 && w > 0 => Ok((h, w)),
            d => Err(Error::shape("[3, H, W]", format!("{d:?}"))),
        }
    }
}

/// Mean over each `(channel, sample)` plane; result is `[C, N]`.
pub(crate) fn global_pool(a: &Act) -> Vec<f32> {
    let p = a.h * a.w;
    a.data
        .chunks(p)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / p as f64) as f32)
        .collect()
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Reference net whose trunk carries the ReLU of the normalized input
/// channels through unchanged (centre-tap identity kernels, empty residual
/// branches) and whose head is all zeros.
#[cfg(test)]
pub(crate) fn passthrough_model(class_names: Vec<String>) -> ModelSpec {
    let mut m = ModelSpec::reference(class_names, 0).expect("valid classes");
    let residual: Vec<bool> = std::iter::once(false).chain(m.blocks.iter().map(|b| b.spec.shape_preserving())).collect();
    let layers = std::iter::once(&mut m.stem).chain(m.blocks.iter_mut().map(|b| &mut b.layer));
    for (layer, res) in layers.zip(residual) {
        let (co, ci, k) = (layer.out_channels(), layer.in_channels(), layer.kernel());
        let w = layer.weight.data_mut();
        w.fill(0.0);
        if !res {
            for o in 0..co.min(ci) {
                w[((o * ci + o) * k + k / 2) * k + k / 2] = 1.0;
            }
        }
        layer.scale.fill(1.0);
        layer.shift.fill(0.0);
        layer.running_mean.fill(0.0);
        layer.running_var.fill(1.0 - BN_EPS);
    }
    m.head_weight.data_mut().fill(0.0);
    m.head_bias.fill(0.0);
    m
}
