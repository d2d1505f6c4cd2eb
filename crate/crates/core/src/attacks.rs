//! White-box FGSM and R-FGSM adversaries.
//!
//! Attacks operate on normalized pixels in `[0, 1]` before the victim's
//! input discretizer. The victim re-discretizes whatever it receives, so the
//! discretizer stays part of the defense. To differentiate through the
//! discretizer (which is flat almost everywhere) the attacker uses the
//! straight-through rule: the gradient w.r.t. the continuous input is taken
//! to be the gradient w.r.t. the discretized input.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sequential_batches, PipelineConfig, RawDataset};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, Mode, Model};
use crate::tensor::{sign, Rng, Tensor};

/// Rows per batch when sweeping a dataset.
pub const ATTACK_BATCH: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    None,
    Fgsm,
    Rfgsm,
}

impl AttackFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackFamily::None => "none",
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Rfgsm => "rfgsm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackFamily::None),
            "fgsm" => Ok(AttackFamily::Fgsm),
            "rfgsm" => Ok(AttackFamily::Rfgsm),
            other => Err(Error::InvalidArgument(format!(
                "unknown attack family {other:?} (expected none, fgsm or rfgsm)"
            ))),
        }
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the attacker differentiates through the victim's pixel discretizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerGradient {
    /// Identity gradient across the quantizer.
    #[default]
    StraightThrough,
}

impl fmt::Display for QuantizerGradient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("straight_through")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// L∞ budget in normalized pixel units.
    pub epsilon: f32,
    /// R-FGSM random-step size as a fraction of `epsilon`.
    pub alpha_fraction: f32,
    pub seed: u64,
    pub quantizer_gradient: QuantizerGradient,
}

impl AttackSpec {
    pub const DEFAULT_ALPHA_FRACTION: f32 = 0.5;

    pub fn new(family: AttackFamily, epsilon: f32, alpha_fraction: f32, seed: u64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if family == AttackFamily::None && epsilon != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "attack family none requires epsilon 0, got {epsilon}"
            )));
        }
        if !(0.0..1.0).contains(&alpha_fraction) {
            return Err(Error::InvalidArgument(format!(
                "alpha_fraction must lie in [0, 1), got {alpha_fraction}"
            )));
        }
        Ok(AttackSpec {
            family,
            epsilon,
            alpha_fraction,
            seed,
            quantizer_gradient: QuantizerGradient::StraightThrough,
        })
    }

    pub fn none() -> Self {
        AttackSpec::new(AttackFamily::None, 0.0, Self::DEFAULT_ALPHA_FRACTION, 0).unwrap()
    }

    pub fn fgsm(epsilon: f32) -> Result<Self> {
        AttackSpec::new(AttackFamily::Fgsm, epsilon, Self::DEFAULT_ALPHA_FRACTION, 0)
    }

    pub fn rfgsm(epsilon: f32, seed: u64) -> Result<Self> {
        AttackSpec::new(AttackFamily::Rfgsm, epsilon, Self::DEFAULT_ALPHA_FRACTION, seed)
    }

    pub fn alpha(&self) -> f32 {
        self.alpha_fraction * self.epsilon
    }
}

/// Moves `x` by `delta`, clipped to `[0, 1]`, and guarantees `|y - x| <= |budget|`
/// in `f32` arithmetic (rounding in `x + delta` can otherwise overshoot by an ulp).
#[inline]
fn step_within(x: f32, delta: f32, origin: f32, budget: f32) -> f32 {
    let mut y = (x + delta).clamp(0.0, 1.0);
    while (y - origin).abs() > budget {
        y = if y > origin { y.next_down() } else { y.next_up() };
    }
    y
}

/// Loss gradient w.r.t. the continuous input, through the discretizer by
/// the straight-through rule. Eval mode, summed loss.
pub fn input_gradient(model: &Model, pipeline: &PipelineConfig, x_raw: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let xq = pipeline.discretize(x_raw);
    let fwd = model.forward(&xq, Mode::Eval)?;
    model.input_gradient(&fwd, labels)
}

fn check_domain(x: &Tensor) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain {
            op: "attack",
            detail: format!("input pixel {v} outside [0, 1]"),
        });
    }
    Ok(())
}

/// `x_adv = clip(x + ε·sign(∇ₓL), 0, 1)`.
pub fn fgsm(model: &Model, pipeline: &PipelineConfig, x_raw: &Tensor, labels: &[u8], epsilon: f32) -> Result<Tensor> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    check_domain(x_raw)?;
    if epsilon == 0.0 {
        return Ok(x_raw.clone());
    }
    let g = input_gradient(model, pipeline, x_raw, labels)?;
    let data = x_raw
        .data()
        .iter()
        .zip(g.data())
        .map(|(&x, &gv)| step_within(x, epsilon * sign(gv), x, epsilon))
        .collect();
    Tensor::new(x_raw.shape().to_vec(), data)
}

/// Random-step FGSM: `x' = clip(x + α·sign(N(0, I)))`, then a gradient step of
/// size `ε − α` taken at `x'`.
///
/// The noise for row `i` comes from stream `sample_ids[i]` of `seed`, so a
/// sample's adversary does not depend on which batch it landed in.
#[allow(clippy::too_many_arguments)]
pub fn rfgsm(
    model: &Model,
    pipeline: &PipelineConfig,
    x_raw: &Tensor,
    labels: &[u8],
    epsilon: f32,
    alpha: f32,
    seed: u64,
    sample_ids: &[usize],
) -> Result<Tensor> {
    if !(0.0 <= alpha && alpha < epsilon && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "R-FGSM needs 0 <= alpha < epsilon, got alpha {alpha}, epsilon {epsilon}"
        )));
    }
    check_domain(x_raw)?;
    if sample_ids.len() != x_raw.rows() {
        return Err(Error::ShapeMismatch {
            op: "rfgsm",
            lhs: x_raw.shape().to_vec(),
            rhs: vec![sample_ids.len()],
        });
    }
    let cols = x_raw.cols();
    let mut x_rand = x_raw.clone();
    if alpha > 0.0 {
        for (row, &id) in x_rand.data_mut().chunks_exact_mut(cols).zip(sample_ids) {
            let mut rng = Rng::with_stream(seed, id as u64);
            for v in row {
                *v = step_within(*v, alpha * sign(rng.normal()), *v, alpha);
            }
        }
    }
    let g = input_gradient(model, pipeline, &x_rand, labels)?;
    let step = epsilon - alpha;
    let data = x_rand
        .data()
        .iter()
        .zip(x_raw.data())
        .zip(g.data())
        .map(|((&xr, &x0), &gv)| step_within(xr, step * sign(gv), x0, epsilon))
        .collect();
    Tensor::new(x_raw.shape().to_vec(), data)
}

/// Crafts adversaries for one batch according to `spec`.
pub fn perturb(
    model: &Model,
    pipeline: &PipelineConfig,
    spec: &AttackSpec,
    x_raw: &Tensor,
    labels: &[u8],
    sample_ids: &[usize],
) -> Result<Tensor> {
    match spec.family {
        AttackFamily::None => Ok(x_raw.clone()),
        AttackFamily::Fgsm => fgsm(model, pipeline, x_raw, labels, spec.epsilon),
        AttackFamily::Rfgsm if spec.epsilon == 0.0 => Ok(x_raw.clone()),
        AttackFamily::Rfgsm => rfgsm(
            model,
            pipeline,
            x_raw,
            labels,
            spec.epsilon,
            spec.alpha(),
            spec.seed,
            sample_ids,
        ),
    }
}

/// One adversary per dataset item.
#[derive(Debug, Clone)]
pub struct AdversarialSet {
    /// Perturbed normalized pixels, before the victim's discretizer.
    pub perturbed: Tensor,
    /// What the victim actually sees: `perturbed` after its discretizer.
    pub inputs: Tensor,
    pub labels: Vec<u8>,
}

impl AdversarialSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Generates the adversarial counterpart of `ds` against `model` itself.
pub fn adversarial_testset(
    model: &Model,
    pipeline: &PipelineConfig,
    ds: &RawDataset,
    spec: &AttackSpec,
) -> Result<AdversarialSet> {
    let cfg = PipelineConfig {
        batch_size: ATTACK_BATCH,
        ..*pipeline
    };
    let mut perturbed = Vec::with_capacity(ds.len() * ds.pixels());
    let mut labels = Vec::with_capacity(ds.len());
    for b in sequential_batches(ds, &cfg)? {
        let adv = perturb(model, pipeline, spec, &b.raw, &b.labels, &b.indices)?;
        perturbed.extend_from_slice(adv.data());
        labels.extend_from_slice(&b.labels);
    }
    let perturbed = Tensor::new([ds.len(), ds.pixels()], perturbed)?;
    let inputs = pipeline.discretize(&perturbed);
    Ok(AdversarialSet {
        perturbed,
        inputs,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
}

impl Evaluation {
    pub fn accuracy_pct(&self) -> f64 {
        100.0 * self.correct as f64 / self.total as f64
    }
}

/// Accuracy of `model` on adversaries crafted per `spec`, streaming in batches.
pub fn evaluate_attack(
    model: &Model,
    pipeline: &PipelineConfig,
    ds: &RawDataset,
    spec: &AttackSpec,
) -> Result<Evaluation> {
    let cfg = PipelineConfig {
        batch_size: ATTACK_BATCH,
        ..*pipeline
    };
    let mut correct = 0;
    for b in sequential_batches(ds, &cfg)? {
        let adv = perturb(model, pipeline, spec, &b.raw, &b.labels, &b.indices)?;
        let pred = model.predict(&pipeline.discretize(&adv))?;
        correct += pred.iter().zip(&b.labels).filter(|(p, &y)| **p == y as usize).count();
    }
    Ok(Evaluation {
        correct,
        total: ds.len(),
    })
}

/// Clean accuracy on already-discretized inputs.
pub fn accuracy(model: &Model, inputs: &Tensor, labels: &[u8]) -> Result<Evaluation> {
    let mut correct = 0;
    for start in (0..labels.len()).step_by(ATTACK_BATCH) {
        let end = (start + ATTACK_BATCH).min(labels.len());
        let cols = inputs.cols();
        let chunk = Tensor::new([end - start, cols], inputs.data()[start * cols..end * cols].to_vec())?;
        let fwd = model.forward(&chunk, Mode::Eval)?;
        correct += argmax_rows(&fwd.logits)
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, &y)| **p == y as usize)
            .count();
    }
    Ok(Evaluation {
        correct,
        total: labels.len(),
    })
}

pub const ADVERSARIAL_MAGIC: &[u8; 4] = b"DQA1";
pub const ADVERSARIAL_VERSION: u16 = 1;

/// Serializes an adversarial set: magic `DQA1`, version u16, 32-byte config
/// hash, count u32, width u32, labels (u8 each), then the perturbed pixels as
/// little-endian f32, row-major.
pub fn write_adversarial_set(set: &AdversarialSet, config_hash: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(46 + set.len() + 4 * set.perturbed.len());
    out.extend(ADVERSARIAL_MAGIC);
    out.extend(ADVERSARIAL_VERSION.to_le_bytes());
    out.extend(config_hash);
    out.extend((set.len() as u32).to_le_bytes());
    out.extend((set.perturbed.cols() as u32).to_le_bytes());
    out.extend(&set.labels);
    for v in set.perturbed.data() {
        out.extend(v.to_le_bytes());
    }
    out
}

/// Parses an adversarial set, returning it with the stored config hash.
/// The victim-side `inputs` view is recomputed with `pipeline`.
pub fn read_adversarial_set(bytes: &[u8], pipeline: &PipelineConfig) -> Result<(AdversarialSet, [u8; 32])> {
    let bad = |m: String| Error::Checkpoint(format!("adversarial set: {m}"));
    if bytes.len() < 46 {
        return Err(bad(format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != ADVERSARIAL_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != ADVERSARIAL_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hash: [u8; 32] = bytes[6..38].try_into().unwrap();
    let n = u32::from_le_bytes(bytes[38..42].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[42..46].try_into().unwrap()) as usize;
    let expected = 46 + n + 4 * n * d;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let labels = bytes[46..46 + n].to_vec();
    let data = bytes[46 + n..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let perturbed = Tensor::new([n, d], data).map_err(|e| bad(e.to_string()))?;
    let inputs = pipeline.discretize(&perturbed);
    Ok((
        AdversarialSet {
            perturbed,
            inputs,
            labels,
        },
        hash,
    ))
}

pub fn save_adversarial_set(set: &AdversarialSet, config_hash: &[u8; 32], path: &Path) -> Result<()> {
    fs::write(path, write_adversarial_set(set, config_hash)).map_err(|e| Error::io(path, e))
}
