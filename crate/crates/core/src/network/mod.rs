//! Fully connected classifiers, full-precision or binarized.
//!
//! A model is a flat list of layers. Hidden blocks are
//! `dense → batchnorm → activation`; the activation is ReLU for
//! full-precision models and `sign` for binarized ones. Binarized dense
//! layers keep real-valued latent weights in `[-1, 1]` and compute with
//! `sign(W)`; gradients flow through `sign` by the straight-through rules:
//!
//! * activation: upstream gradient passes where `|pre-activation| <= 1`;
//! * weights: the gradient w.r.t. `sign(W)` is applied to the latent `W`.
//!
//! The input layer sees real-valued pixels. The output layer is dense with
//! no activation, feeding a softmax cross-entropy head; binarized models
//! add a batchnorm on the logits so the integer-valued ±1 dot products land
//! on a trainable scale.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{sgd_step, Sgd, SgdConfig};

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{gemm, sign, Rng, Tensor};

pub const MNIST_INPUT: usize = 784;
pub const FCN_DEPTH: usize = 4;
pub const FCN1_WIDTH: usize = 6144;
pub const FCN2_WIDTH: usize = 600;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Network shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// 784-6144(×4)-10
    Fcn1,
    /// 784-600(×4)-10
    Fcn2,
    Custom {
        input: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
}

impl Arch {
    /// (input width, hidden widths, classes)
    pub fn widths(&self) -> (usize, Vec<usize>, usize) {
        match self {
            Arch::Fcn1 => (MNIST_INPUT, vec![FCN1_WIDTH; FCN_DEPTH], 10),
            Arch::Fcn2 => (MNIST_INPUT, vec![FCN2_WIDTH; FCN_DEPTH], 10),
            Arch::Custom { input, hidden, classes } => (*input, hidden.clone(), *classes),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Arch::Fcn1 => "fcn1".into(),
            Arch::Fcn2 => "fcn2".into(),
            Arch::Custom { input, hidden, classes } => {
                let h: Vec<String> = hidden.iter().map(|w| w.to_string()).collect();
                format!("{input}-{}-{classes}", h.join("-"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense,
    BinaryDense,
    Relu,
    SignAct,
    Hardtanh,
    BatchNorm,
    SoftmaxXentHead,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Dense => 0,
            LayerKind::BinaryDense => 1,
            LayerKind::Relu => 2,
            LayerKind::SignAct => 3,
            LayerKind::Hardtanh => 4,
            LayerKind::BatchNorm => 5,
            LayerKind::SoftmaxXentHead => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => LayerKind::Dense,
            1 => LayerKind::BinaryDense,
            2 => LayerKind::Relu,
            3 => LayerKind::SignAct,
            4 => LayerKind::Hardtanh,
            5 => LayerKind::BatchNorm,
            6 => LayerKind::SoftmaxXentHead,
            _ => return None,
        })
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Dense => "dense",
            LayerKind::BinaryDense => "binary_dense",
            LayerKind::Relu => "relu",
            LayerKind::SignAct => "sign_act",
            LayerKind::Hardtanh => "hardtanh",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::SoftmaxXentHead => "softmax_xent_head",
        };
        f.write_str(s)
    }
}

/// Kind and widths of one layer; `fan_in == fan_out` for non-dense kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_out × fan_in`
    pub weight: Tensor,
    pub bias: Tensor,
    pub binary: bool,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    /// The weights the forward pass multiplies by.
    pub fn effective_weight(&self) -> Tensor {
        if self.binary {
            self.weight.map(sign)
        } else {
            self.weight.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full([width], 1.0),
            beta: Tensor::zeros([width]),
            running_mean: Tensor::zeros([width]),
            running_var: Tensor::full([width], 1.0),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    BatchNorm(BatchNorm),
    Relu(usize),
    SignAct(usize),
    Hardtanh(usize),
    SoftmaxXentHead(usize),
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        let (kind, fan_in, fan_out) = match self {
            Layer::Dense(d) => (
                if d.binary {
                    LayerKind::BinaryDense
                } else {
                    LayerKind::Dense
                },
                d.fan_in(),
                d.fan_out(),
            ),
            Layer::BatchNorm(bn) => (LayerKind::BatchNorm, bn.width(), bn.width()),
            Layer::Relu(w) => (LayerKind::Relu, *w, *w),
            Layer::SignAct(w) => (LayerKind::SignAct, *w, *w),
            Layer::Hardtanh(w) => (LayerKind::Hardtanh, *w, *w),
            Layer::SoftmaxXentHead(w) => (LayerKind::SoftmaxXentHead, *w, *w),
        };
        LayerSpec { kind, fan_in, fan_out }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm.
    Train,
    /// Running statistics in batchnorm; a pure function of parameters and input.
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    mean: Vec<f32>,
    var: Vec<f32>,
}

/// Per-layer state recorded by a forward pass for use by `backward`.
#[derive(Debug, Clone)]
pub struct Cache {
    mode: Mode,
    surrogate: bool,
    version: u64,
    /// `inputs[i]` is the input to layer `i`.
    inputs: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
}

impl Cache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.inputs[0].rows()
    }

    pub fn layer_input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Tensor,
    pub cache: Cache,
}

impl Forward {
    /// Output of the first dense layer (the first hidden pre-activation).
    pub fn first_hidden(&self) -> &Tensor {
        &self.cache.inputs[1]
    }
}

#[derive(Debug, Clone)]
pub enum LayerGrads {
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        /// Batch moments from a train-mode forward, used to update running statistics.
        batch_moments: Option<(Vec<f32>, Vec<f32>)>,
    },
}

/// Parameter gradients, aligned with the model's layer list.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrads>>,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.layers.iter().flatten().all(|g| match g {
            LayerGrads::Dense { weight, bias } => weight.all_finite() && bias.all_finite(),
            LayerGrads::BatchNorm { gamma, beta, .. } => gamma.all_finite() && beta.all_finite(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub grads: Gradients,
    /// Gradient of the mean loss w.r.t. the model input.
    pub grad_input: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    binarized: bool,
    version: u64,
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    crate::tensor::uniform(rng, [fan_out, fan_in], -bound, bound)
}

impl Model {
    /// Builds a freshly initialized network.
    pub fn build(arch: &Arch, binarized: bool, init_seed: u64) -> Result<Model> {
        let (input, hidden, classes) = arch.widths();
        if input == 0 || classes == 0 || hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!("layer widths must be positive: {arch:?}")));
        }
        let mut rng = Rng::new(init_seed);
        let mut layers = Vec::new();
        let mut width = input;
        for &h in &hidden {
            layers.push(Layer::Dense(Dense {
                weight: glorot(&mut rng, width, h),
                bias: Tensor::zeros([h]),
                binary: binarized,
            }));
            layers.push(Layer::BatchNorm(BatchNorm::new(h)));
            layers.push(if binarized { Layer::SignAct(h) } else { Layer::Relu(h) });
            width = h;
        }
        layers.push(Layer::Dense(Dense {
            weight: glorot(&mut rng, width, classes),
            bias: Tensor::zeros([classes]),
            binary: binarized,
        }));
        if binarized {
            layers.push(Layer::BatchNorm(BatchNorm::new(classes)));
        }
        layers.push(Layer::SoftmaxXentHead(classes));
        Model::from_layers(layers)
    }

    /// Assembles a model from explicit layers, checking shape compatibility.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Model> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            let (a, b) = (pair[0].spec(), pair[1].spec());
            if a.fan_out != b.fan_in {
                return Err(Error::ShapeMismatch {
                    op: "layer chain",
                    lhs: vec![a.fan_in, a.fan_out],
                    rhs: vec![b.fan_in, b.fan_out],
                });
            }
        }
        if let Some(Layer::BatchNorm(bn)) = layers.first() {
            if bn.width() == 0 {
                return Err(Error::InvalidArgument("zero-width batchnorm".into()));
            }
        }
        let binarized = layers.iter().any(|l| matches!(l, Layer::Dense(d) if d.binary));
        Ok(Model {
            layers,
            binarized,
            version: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers. Bumps the parameter version, so caches
    /// recorded earlier become stale.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn is_binarized(&self) -> bool {
        self.binarized
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec().fan_in
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().spec().fan_out
    }

    /// Trainable parameters (dense weights and biases, batchnorm scale and shift).
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weight.len() + d.bias.len(),
                Layer::BatchNorm(bn) => 2 * bn.width(),
                _ => 0,
            })
            .sum()
    }

    /// SHA-256 over the layer kinds and widths.
    pub fn config_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"quantguard-model-v1");
        for s in self.specs() {
            h.update([s.kind.tag()]);
            h.update((s.fan_in as u64).to_le_bytes());
            h.update((s.fan_out as u64).to_le_bytes());
        }
        h.finalize().into()
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Forward> {
        self.forward_impl(x, mode, false)
    }

    /// Forward pass of the relaxed network the straight-through rules
    /// differentiate: `sign` activations become hardtanh and binary layers
    /// multiply by their latent weights. Identical to [`Model::forward`] for
    /// full-precision models.
    pub fn forward_surrogate(&self, x: &Tensor, mode: Mode) -> Result<Forward> {
        self.forward_impl(x, mode, true)
    }

    fn forward_impl(&self, x: &Tensor, mode: Mode, surrogate: bool) -> Result<Forward> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), self.input_dim()],
            });
        }
        let batch = x.rows();
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut bn_cache = Vec::with_capacity(self.layers.len());
        inputs.push(x.clone());
        for layer in &self.layers {
            let input = inputs.last().unwrap();
            let mut cached = None;
            let out = match layer {
                Layer::Dense(d) => dense_forward(d, input, surrogate),
                Layer::BatchNorm(bn) => {
                    let (out, c) = batchnorm_forward(bn, input, mode, batch);
                    cached = c;
                    out
                }
                Layer::Relu(_) => input.map(|v| v.max(0.0)),
                Layer::SignAct(_) if surrogate => input.map(crate::tensor::hardtanh),
                Layer::SignAct(_) => input.map(sign),
                Layer::Hardtanh(_) => input.map(crate::tensor::hardtanh),
                Layer::SoftmaxXentHead(_) => input.clone(),
            };
            bn_cache.push(cached);
            inputs.push(out);
        }
        let logits = inputs.pop().unwrap();
        Ok(Forward {
            logits,
            cache: Cache {
                mode,
                surrogate,
                version: self.version,
                inputs,
                bn: bn_cache,
            },
        })
    }

    /// Mean cross-entropy, parameter gradients, and the input gradient.
    pub fn backward(&self, fwd: &Forward, labels: &[u8]) -> Result<Backward> {
        let (loss, dlogits) = softmax_xent(&fwd.logits, labels, true)?;
        let (grads, grad_input) = self.backward_from(&fwd.cache, dlogits, true)?;
        Ok(Backward {
            loss,
            grads: grads.expect("requested"),
            grad_input,
        })
    }

    /// Gradient of the summed (per-sample) loss w.r.t. the input, skipping
    /// parameter gradients. Row `i` depends only on sample `i` in eval mode.
    pub fn input_gradient(&self, fwd: &Forward, labels: &[u8]) -> Result<Tensor> {
        let (_, dlogits) = softmax_xent(&fwd.logits, labels, false)?;
        Ok(self.backward_from(&fwd.cache, dlogits, false)?.1)
    }

    /// Backpropagates `dlogits` through the cached forward pass.
    pub fn backward_from(
        &self,
        cache: &Cache,
        dlogits: Tensor,
        param_grads: bool,
    ) -> Result<(Option<Gradients>, Tensor)> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {} with {} layers, model at version {} with {} layers",
                cache.version,
                cache.inputs.len(),
                self.version,
                self.layers.len()
            )));
        }
        let batch = cache.batch();
        if dlogits.shape() != [batch, self.num_classes()] {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: dlogits.shape().to_vec(),
                rhs: vec![batch, self.num_classes()],
            });
        }
        let mut grads: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        let mut g = dlogits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            g = match layer {
                Layer::Dense(d) => {
                    let (dx, pg) = dense_backward(d, input, &g, cache.surrogate, param_grads);
                    grads[i] = pg;
                    dx
                }
                Layer::BatchNorm(bn) => {
                    let c = cache.bn[i].as_ref();
                    let (dx, pg) = batchnorm_backward(bn, input, &g, cache.mode, c, param_grads);
                    grads[i] = pg;
                    dx
                }
                Layer::Relu(_) => mask_grad(&g, input, |v| v > 0.0),
                Layer::SignAct(_) | Layer::Hardtanh(_) => mask_grad(&g, input, |v| v.abs() <= 1.0),
                Layer::SoftmaxXentHead(_) => g,
            };
        }
        let grads = param_grads.then_some(Gradients { layers: grads });
        Ok((grads, g))
    }

    /// Eval-mode class predictions.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let fwd = self.forward(x, Mode::Eval)?;
        Ok(argmax_rows(&fwd.logits))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Softmax cross-entropy. Returns the loss (mean or sum over rows) and its
/// gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[u8], mean: bool) -> Result<(f64, Tensor)> {
    let (b, k) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let scale = if mean { 1.0 / b as f64 } else { 1.0 };
    let mut grad = vec![0.0f32; b * k];
    let mut loss = 0.0f64;
    for r in 0..b {
        let row = logits.row(r);
        let y = labels[r] as usize;
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} outside {k} classes")));
        }
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        loss += (z.ln() + max - row[y] as f64) * scale;
        for j in 0..k {
            let p = (row[j] as f64 - max).exp() / z;
            let t = if j == y { 1.0 } else { 0.0 };
            grad[r * k + j] = ((p - t) * scale) as f32;
        }
    }
    Ok((loss, Tensor::new([b, k], grad)?))
}

fn dense_forward(d: &Dense, x: &Tensor, surrogate: bool) -> Tensor {
    let (b, out) = (x.rows(), d.fan_out());
    let mut y = vec![0.0f32; b * out];
    let signed;
    let w = if d.binary && !surrogate {
        signed = d.effective_weight();
        &signed
    } else {
        &d.weight
    };
    gemm(1.0, x.as_mat(), w.as_mat().t(), 0.0, &mut y);
    let bias = d.bias.data();
    for row in y.chunks_exact_mut(out) {
        row.iter_mut().zip(bias).for_each(|(v, &c)| *v += c);
    }
    Tensor::new([b, out], y).expect("dense output shape")
}

fn dense_backward(
    d: &Dense,
    x: &Tensor,
    g: &Tensor,
    surrogate: bool,
    param_grads: bool,
) -> (Tensor, Option<LayerGrads>) {
    let (b, fan_in, fan_out) = (x.rows(), d.fan_in(), d.fan_out());
    let signed;
    let w = if d.binary && !surrogate {
        signed = d.effective_weight();
        &signed
    } else {
        &d.weight
    };
    let mut dx = vec![0.0f32; b * fan_in];
    gemm(1.0, g.as_mat(), w.as_mat(), 0.0, &mut dx);
    let pg = param_grads.then(|| {
        let mut dw = vec![0.0f32; fan_out * fan_in];
        gemm(1.0, g.as_mat().t(), x.as_mat(), 0.0, &mut dw);
        let mut db = vec![0.0f32; fan_out];
        for row in g.data().chunks_exact(fan_out) {
            db.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
        }
        LayerGrads::Dense {
            weight: Tensor::new([fan_out, fan_in], dw).unwrap(),
            bias: Tensor::new([fan_out], db).unwrap(),
        }
    });
    (Tensor::new([b, fan_in], dx).unwrap(), pg)
}

fn column_moments(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (b, w) = (x.rows(), x.cols());
    let mut mean = vec![0.0f64; w];
    for row in x.data().chunks_exact(w) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut var = vec![0.0f64; w];
    for row in x.data().chunks_exact(w) {
        for j in 0..w {
            let d = row[j] as f64 - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= b as f64);
    (
        mean.into_iter().map(|v| v as f32).collect(),
        var.into_iter().map(|v| v as f32).collect(),
    )
}

fn batchnorm_forward(bn: &BatchNorm, x: &Tensor, mode: Mode, batch: usize) -> (Tensor, Option<BnCache>) {
    let w = bn.width();
    let (mean, var) = match mode {
        Mode::Train => column_moments(x),
        Mode::Eval => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec()),
    };
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (gamma, beta) = (bn.gamma.data(), bn.beta.data());
    let mut xhat = vec![0.0f32; batch * w];
    let mut y = vec![0.0f32; batch * w];
    for (r, row) in x.data().chunks_exact(w).enumerate() {
        for j in 0..w {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat[r * w + j] = h;
            y[r * w + j] = gamma[j] * h + beta[j];
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        mean,
        var,
    };
    (Tensor::new([batch, w], y).unwrap(), Some(cache))
}

fn batchnorm_backward(
    bn: &BatchNorm,
    x: &Tensor,
    g: &Tensor,
    mode: Mode,
    cache: Option<&BnCache>,
    param_grads: bool,
) -> (Tensor, Option<LayerGrads>) {
    let c = cache.expect("batchnorm forward always caches");
    let (b, w) = (x.rows(), bn.width());
    let gamma = bn.gamma.data();
    let mut dgamma = vec![0.0f64; w];
    let mut dbeta = vec![0.0f64; w];
    for (r, row) in g.data().chunks_exact(w).enumerate() {
        for j in 0..w {
            dbeta[j] += row[j] as f64;
            dgamma[j] += (row[j] * c.xhat[r * w + j]) as f64;
        }
    }
    let mut dx = vec![0.0f32; b * w];
    match mode {
        Mode::Eval => {
            for (r, row) in g.data().chunks_exact(w).enumerate() {
                for j in 0..w {
                    dx[r * w + j] = row[j] * gamma[j] * c.inv_std[j];
                }
            }
        }
        Mode::Train => {
            // dx = γ·inv_std/B · (B·dy − Σdy − x̂·Σ(dy·x̂))
            let n = b as f32;
            for (r, row) in g.data().chunks_exact(w).enumerate() {
                for j in 0..w {
                    let t = n * row[j] - dbeta[j] as f32 - c.xhat[r * w + j] * dgamma[j] as f32;
                    dx[r * w + j] = gamma[j] * c.inv_std[j] / n * t;
                }
            }
        }
    }
    let pg = param_grads.then(|| {
        let batch_moments = (mode == Mode::Train).then(|| {
            let unbiased = if b > 1 {
                c.var.iter().map(|&v| v * b as f32 / (b - 1) as f32).collect()
            } else {
                c.var.clone()
            };
            (c.mean.clone(), unbiased)
        });
        LayerGrads::BatchNorm {
            gamma: Tensor::new([w], dgamma.into_iter().map(|v| v as f32).collect()).unwrap(),
            beta: Tensor::new([w], dbeta.into_iter().map(|v| v as f32).collect()).unwrap(),
            batch_moments,
        }
    });
    (Tensor::new([b, w], dx).unwrap(), pg)
}

fn mask_grad(g: &Tensor, input: &Tensor, pass: impl Fn(f32) -> bool) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(input.data())
        .map(|(&gv, &xv)| if pass(xv) { gv } else { 0.0 })
        .collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}
