use std::fmt::Write as _;

use crate::attacks::{fgsm, ATTACK_BATCH};
use crate::data::{sequential_batches, PipelineConfig, RawDataset};
use crate::error::{Error, Result};
use crate::network::{Mode, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

impl L1Summary {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// True if the closed intervals `[min, max]` intersect.
    pub fn overlaps(&self, other: &L1Summary) -> bool {
        self.min <= other.max && other.min <= self.max
    }
}

/// Width-normalized L1 norms of the first hidden layer's pre-normalization
/// activations, one per analyzed sample, for a single ε.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Profile {
    pub epsilon: f32,
    pub norms: Vec<f64>,
}

impl L1Profile {
    pub fn summary(&self) -> L1Summary {
        let n = self.norms.len() as f64;
        let mean = self.norms.iter().sum::<f64>() / n;
        L1Summary {
            min: self.norms.iter().copied().fold(f64::INFINITY, f64::min),
            max: self.norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            variance: self.norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n,
        }
    }
}

/// For each ε, crafts FGSM adversaries of `samples` against `model` and
/// records the first hidden layer's normalized L1 norm per sample.
pub fn l1_profile(
    model: &Model,
    pipeline: &PipelineConfig,
    samples: &RawDataset,
    epsilons: &[f32],
) -> Result<Vec<L1Profile>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("l1_profile needs at least one sample".into()));
    }
    let cfg = PipelineConfig {
        batch_size: ATTACK_BATCH,
        ..*pipeline
    };
    epsilons
        .iter()
        .map(|&eps| {
            let mut norms = Vec::with_capacity(samples.len());
            for b in sequential_batches(samples, &cfg)? {
                let adv = fgsm(model, pipeline, &b.raw, &b.labels, eps)?;
                let fwd = model.forward(&pipeline.discretize(&adv), Mode::Eval)?;
                let h = fwd.first_hidden();
                let width = h.cols() as f64;
                for i in 0..h.rows() {
                    norms.push(h.row(i).iter().map(|v| v.abs() as f64).sum::<f64>() / width);
                }
            }
            Ok(L1Profile { epsilon: eps, norms })
        })
        .collect()
}

/// Per-sample CSV: `model_id,epsilon,sample,l1_norm`.
pub fn profiles_csv(model_id: &str, profiles: &[L1Profile]) -> String {
    let mut out = String::from("model_id,epsilon,sample,l1_norm\n");
    for p in profiles {
        for (i, v) in p.norms.iter().enumerate() {
            let _ = writeln!(out, "{model_id},{},{i},{v}", p.epsilon);
        }
    }
    out
}

/// Summary CSV: `model_id,epsilon,n,min,max,mean,variance`.
pub fn summary_csv(model_id: &str, profiles: &[L1Profile]) -> String {
    let mut out = String::from("model_id,epsilon,n,min,max,mean,variance\n");
    for p in profiles {
        let s = p.summary();
        let _ = writeln!(
            out,
            "{model_id},{},{},{},{},{},{}",
            p.epsilon,
            p.norms.len(),
            s.min,
            s.max,
            s.mean,
            s.variance
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{InputBits, Split};
    use crate::network::{Arch, Layer};

    fn samples(n: usize) -> RawDataset {
        let images: Vec<u8> = (0..n * 784).map(|i| (i * 31 % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        RawDataset::new(images, labels, 28, 28, Split::Test).unwrap()
    }

    fn pipeline() -> PipelineConfig {
        PipelineConfig::new(InputBits::new(8).unwrap(), 0, 100).unwrap()
    }

    #[test]
    fn zero_weight_network_gives_equal_norms() {
        let arch = Arch::Custom { input: 784, hidden: vec![6], classes: 10 };
        let mut m = Model::build(&arch, false, 1).unwrap();
        for l in m.layers_mut() {
            if let Layer::Dense(d) = l {
                d.weight.data_mut().fill(0.0);
                d.bias.data_mut().fill(0.25);
            }
        }
        let p = l1_profile(&m, &pipeline(), &samples(7), &[0.0]).unwrap();
        assert!(p[0].norms.iter().all(|&v| v == 0.25));
        assert_eq!(p[0].summary().variance, 0.0);
    }

    #[test]
    fn one_norm_per_sample_and_non_negative() {
        let m = Model::build(&Arch::Custom { input: 784, hidden: vec![5], classes: 10 }, true, 3).unwrap();
        let ps = l1_profile(&m, &pipeline(), &samples(13), &[0.0, 0.1, 0.3]).unwrap();
        assert_eq!(ps.len(), 3);
        for p in &ps {
            assert_eq!(p.norms.len(), 13);
            assert!(p.norms.iter().all(|&v| v >= 0.0));
        }
        let csv = profiles_csv("m", &ps);
        assert_eq!(csv.lines().count(), 1 + 3 * 13);
        assert_eq!(summary_csv("m", &ps).lines().count(), 4);
    }

    #[test]
    fn summary_statistics() {
        let s = L1Profile { epsilon: 0.0, norms: vec![1.0, 2.0, 3.0, 4.0] }.summary();
        assert_eq!((s.min, s.max, s.mean, s.variance), (1.0, 4.0, 2.5, 1.25));
        let t = L1Summary { min: 4.0, max: 9.0, mean: 0.0, variance: 0.0 };
        assert!(s.overlaps(&t));
        assert!(!s.overlaps(&L1Summary { min: 4.5, ..t }));
    }
}
