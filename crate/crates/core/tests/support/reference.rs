//! Finite-difference gradient oracle: an independent f64 reimplementation
//! of the network forward pass, differenced centrally.
//!
//! Binarized models are checked against their straight-through surrogate
//! (hardtanh activations, latent weights), which is the function whose
//! gradient the backward pass computes.

#![allow(dead_code)]

use quantguard::network::{Layer, LayerGrads, Mode, Model, BN_EPS};
use quantguard::tensor::uniform;
use quantguard::{Rng, Tensor};

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-3;
/// Numeric gradient norm below which the true gradient is taken to be zero.
/// A bias feeding a train-mode batchnorm is such a case; its analytic value
/// is then pure f32 rounding and must stay below `ZERO_ABS` per entry.
const ZERO_NORM: f64 = 1e-8;
const ZERO_ABS: f64 = 1e-5;

#[derive(Clone)]
enum RefLayer {
    Dense { w: Vec<f64>, b: Vec<f64>, fan_in: usize, fan_out: usize },
    Bn { gamma: Vec<f64>, beta: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    Relu,
    Hardtanh,
    Head,
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn reference(model: &Model) -> Vec<RefLayer> {
    model
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Dense(d) => RefLayer::Dense {
                w: f64s(&d.weight),
                b: f64s(&d.bias),
                fan_in: d.fan_in(),
                fan_out: d.fan_out(),
            },
            Layer::BatchNorm(bn) => RefLayer::Bn {
                gamma: f64s(&bn.gamma),
                beta: f64s(&bn.beta),
                mean: f64s(&bn.running_mean),
                var: f64s(&bn.running_var),
            },
            Layer::Relu(_) => RefLayer::Relu,
            Layer::SignAct(_) | Layer::Hardtanh(_) => RefLayer::Hardtanh,
            Layer::SoftmaxXentHead(_) => RefLayer::Head,
        })
        .collect()
}

/// Cross-entropy of the reference network, mean or summed over rows.
fn ref_loss(layers: &[RefLayer], x: &[f64], batch: usize, labels: &[u8], mode: Mode, mean: bool) -> f64 {
    let mut h = x.to_vec();
    let mut width = x.len() / batch;
    for l in layers {
        h = match l {
            RefLayer::Dense { w, b, fan_in, fan_out } => {
                let mut y = vec![0.0; batch * fan_out];
                for r in 0..batch {
                    for o in 0..*fan_out {
                        let mut s = b[o];
                        for i in 0..*fan_in {
                            s += h[r * fan_in + i] * w[o * fan_in + i];
                        }
                        y[r * fan_out + o] = s;
                    }
                }
                width = *fan_out;
                y
            }
            RefLayer::Bn { gamma, beta, mean: rm, var: rv } => {
                let (mu, var): (Vec<f64>, Vec<f64>) = match mode {
                    Mode::Train => (0..width)
                        .map(|j| {
                            let m = (0..batch).map(|r| h[r * width + j]).sum::<f64>() / batch as f64;
                            let v = (0..batch).map(|r| (h[r * width + j] - m).powi(2)).sum::<f64>() / batch as f64;
                            (m, v)
                        })
                        .unzip(),
                    Mode::Eval => (rm.clone(), rv.clone()),
                };
                (0..batch * width)
                    .map(|k| {
                        let j = k % width;
                        gamma[j] * (h[k] - mu[j]) / (var[j] + BN_EPS as f64).sqrt() + beta[j]
                    })
                    .collect()
            }
            RefLayer::Relu => h.iter().map(|v| v.max(0.0)).collect(),
            RefLayer::Hardtanh => h.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            RefLayer::Head => h,
        };
    }
    let mut loss = 0.0;
    for r in 0..batch {
        let row = &h[r * width..(r + 1) * width];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[labels[r] as usize];
    }
    if mean {
        loss / batch as f64
    } else {
        loss
    }
}

fn param_mut(layer: &mut RefLayer, tensor: usize) -> &mut Vec<f64> {
    match (layer, tensor) {
        (RefLayer::Dense { w, .. }, 0) => w,
        (RefLayer::Dense { b, .. }, 1) => b,
        (RefLayer::Bn { gamma, .. }, 0) => gamma,
        (RefLayer::Bn { beta, .. }, 1) => beta,
        _ => unreachable!(),
    }
}

/// Norm-wise relative error between analytic and numeric gradients. A zero
/// true gradient yields 0 if the analytic one is within `ZERO_ABS`, else ∞.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm(numeric) < ZERO_NORM {
        let worst = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        return if worst <= ZERO_ABS { 0.0 } else { f64::INFINITY };
    }
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric))
}

fn pick(rng: &mut Rng, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|_| (rng.next_u64() % len as u64) as usize).collect()
}

/// Checks up to `per_tensor` sampled entries of every parameter tensor and
/// of the input gradient. Returns the worst relative error, or a description
/// of the first tensor exceeding `TOL`.
pub fn check_model(model: &Model, batch: usize, mode: Mode, per_tensor: usize, seed: u64) -> Result<f64, String> {
    let mut rng = Rng::new(seed);
    let d = model.input_dim();
    let x = uniform(&mut rng, [batch, d], 0.0, 1.0);
    let labels: Vec<u8> = (0..batch).map(|i| (i % model.num_classes()) as u8).collect();
    let fwd = model.forward_surrogate(&x, mode).unwrap();
    let bw = model.backward(&fwd, &labels).unwrap();
    let base = reference(model);
    let xs = f64s(&x);
    let mut worst: f64 = 0.0;

    for (li, g) in bw.grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        let tensors: Vec<&Tensor> = match g {
            LayerGrads::Dense { weight, bias } => vec![weight, bias],
            LayerGrads::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
        };
        for (ti, gt) in tensors.into_iter().enumerate() {
            let idx = pick(&mut rng, gt.len(), per_tensor);
            let analytic: Vec<f64> = idx.iter().map(|&k| gt.data()[k] as f64).collect();
            let numeric: Vec<f64> = idx
                .iter()
                .map(|&k| {
                    let mut plus = base.clone();
                    param_mut(&mut plus[li], ti)[k] += H;
                    let mut minus = base.clone();
                    param_mut(&mut minus[li], ti)[k] -= H;
                    (ref_loss(&plus, &xs, batch, &labels, mode, true) - ref_loss(&minus, &xs, batch, &labels, mode, true))
                        / (2.0 * H)
                })
                .collect();
            let e = rel_err(&analytic, &numeric);
            if !(e <= TOL) {
                return Err(format!("layer {li} tensor {ti}: relative error {e:.3e}"));
            }
            worst = worst.max(e);
        }
    }

    // Input gradient of the summed loss, as used by the attacks. Eval mode
    // keeps rows independent.
    let fwd = model.forward_surrogate(&x, Mode::Eval).unwrap();
    let gx = model.input_gradient(&fwd, &labels).unwrap();
    let idx = pick(&mut rng, gx.len(), per_tensor);
    let analytic: Vec<f64> = idx.iter().map(|&k| gx.data()[k] as f64).collect();
    let numeric: Vec<f64> = idx
        .iter()
        .map(|&k| {
            let mut plus = xs.clone();
            plus[k] += H;
            let mut minus = xs.clone();
            minus[k] -= H;
            (ref_loss(&base, &plus, batch, &labels, Mode::Eval, false)
                - ref_loss(&base, &minus, batch, &labels, Mode::Eval, false))
                / (2.0 * H)
        })
        .collect();
    let e = rel_err(&analytic, &numeric);
    if !(e <= TOL) {
        return Err(format!("input gradient: relative error {e:.3e}"));
    }
    Ok(worst.max(e))
}

/// Gives batchnorm layers non-trivial running statistics and affine terms so
/// eval-mode checks exercise them.
pub fn perturb_bn(model: &mut Model, seed: u64) {
    let mut rng = Rng::new(seed);
    for l in model.layers_mut() {
        if let Layer::BatchNorm(bn) = l {
            let w = bn.width();
            bn.gamma = uniform(&mut rng, [w], 0.5, 1.5);
            bn.beta = uniform(&mut rng, [w], -0.2, 0.2);
            bn.running_mean = uniform(&mut rng, [w], -0.5, 0.5);
            bn.running_var = uniform(&mut rng, [w], 0.5, 2.0);
        }
    }
}

