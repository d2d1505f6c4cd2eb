use serde::{Deserialize, Serialize};

use super::{Layer, LayerGrads, Model, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f32,
    /// L2 penalty applied to dense weights (not biases or batchnorm parameters).
    pub weight_decay: f32,
    /// Learning-rate multiplier for the latent weights of binary layers.
    #[serde(default = "unit_scale")]
    pub latent_lr_scale: f32,
}

fn unit_scale() -> f32 {
    1.0
}

impl SgdConfig {
    pub fn plain(weight_decay: f32) -> Self {
        SgdConfig {
            momentum: 0.0,
            weight_decay,
            latent_lr_scale: 1.0,
        }
    }
}

/// SGD with optional heavy-ball momentum.
///
/// Update per dense weight: `v ← μ·v + (g + λ·W)`, `W ← W − lr·v`; binary
/// layers then clamp their latent weights to `[-1, 1]`. Train-mode batch
/// moments carried in the gradients refresh batchnorm running statistics.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<Vec<f32>>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    /// Applies one update. Rejects the step, leaving the model untouched,
    /// if any gradient is non-finite.
    pub fn step(&mut self, model: &mut Model, grads: &super::Gradients, lr: f32) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if grads.layers.len() != model.layers.len() {
            return Err(Error::StaleCache("gradients do not match model layers".into()));
        }
        if !grads.all_finite() {
            return Err(Error::Domain {
                op: "sgd_step",
                detail: "non-finite gradient".into(),
            });
        }
        if self.velocity.len() != model.layers.len() {
            self.velocity = vec![Vec::new(); model.layers.len()];
        }
        let SgdConfig {
            momentum,
            weight_decay,
            latent_lr_scale,
        } = self.cfg;
        for ((layer, g), vel) in model.layers.iter_mut().zip(&grads.layers).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            match (layer, g) {
                (Layer::Dense(d), LayerGrads::Dense { weight, bias }) => {
                    if vel.is_empty() {
                        *vel = vec![vec![0.0; d.weight.len()], vec![0.0; d.bias.len()]];
                    }
                    let wlr = if d.binary { lr * latent_lr_scale } else { lr };
                    update(&mut d.weight, weight, &mut vel[0], wlr, momentum, weight_decay);
                    update(&mut d.bias, bias, &mut vel[1], lr, momentum, 0.0);
                    if d.binary {
                        d.weight.data_mut().iter_mut().for_each(|w| *w = w.clamp(-1.0, 1.0));
                    }
                }
                (
                    Layer::BatchNorm(bn),
                    LayerGrads::BatchNorm {
                        gamma,
                        beta,
                        batch_moments,
                    },
                ) => {
                    if vel.is_empty() {
                        *vel = vec![vec![0.0; bn.width()], vec![0.0; bn.width()]];
                    }
                    update(&mut bn.gamma, gamma, &mut vel[0], lr, momentum, 0.0);
                    update(&mut bn.beta, beta, &mut vel[1], lr, momentum, 0.0);
                    if let Some((mean, var)) = batch_moments {
                        blend(&mut bn.running_mean, mean);
                        blend(&mut bn.running_var, var);
                    }
                }
                _ => return Err(Error::StaleCache("gradient kind does not match layer".into())),
            }
        }
        model.bump_version();
        Ok(())
    }
}

fn update(param: &mut Tensor, grad: &Tensor, vel: &mut [f32], lr: f32, momentum: f32, decay: f32) {
    for ((w, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
        let d = g + decay * *w;
        *v = momentum * *v + d;
        *w -= lr * *v;
    }
}

fn blend(running: &mut Tensor, batch: &[f32]) {
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

/// One plain SGD step: `W ← W − lr·(g + weight_decay·W)`, then clamp binary
/// layers' latent weights to `[-1, 1]`.
pub fn sgd_step(model: &mut Model, grads: &super::Gradients, lr: f32, weight_decay: f32) -> Result<()> {
    Sgd::new(SgdConfig::plain(weight_decay)).step(model, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::super::{Arch, Dense, Gradients, Mode};
    use super::*;
    use crate::tensor::{uniform, Rng};

    fn one_dense(binary: bool, w: f32) -> Model {
        Model::from_layers(vec![
            Layer::Dense(Dense {
                weight: Tensor::full([1, 1], w),
                bias: Tensor::zeros([1]),
                binary,
            }),
            Layer::SoftmaxXentHead(1),
        ])
        .unwrap()
    }

    fn dense_grad(g: f32) -> Gradients {
        Gradients {
            layers: vec![
                Some(LayerGrads::Dense {
                    weight: Tensor::full([1, 1], g),
                    bias: Tensor::zeros([1]),
                }),
                None,
            ],
        }
    }

    fn weight(m: &Model) -> f32 {
        match &m.layers()[0] {
            Layer::Dense(d) => d.weight.data()[0],
            _ => unreachable!(),
        }
    }

    #[test]
    fn binary_weight_clamped_after_step() {
        let mut m = one_dense(true, 0.99);
        sgd_step(&mut m, &dense_grad(-5.0), 0.1, 0.0).unwrap();
        assert_eq!(weight(&m), 1.0);
    }

    #[test]
    fn full_precision_weight_not_clamped() {
        let mut m = one_dense(false, 0.99);
        sgd_step(&mut m, &dense_grad(-5.0), 0.1, 0.0).unwrap();
        assert!((weight(&m) - 1.49).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut m = Model::build(&Arch::Custom { input: 4, hidden: vec![3], classes: 2 }, false, 2).unwrap();
        let before = m.clone();
        let x = uniform(&mut Rng::new(1), [3, 4], 0.0, 1.0);
        let fwd = m.forward(&x, Mode::Eval).unwrap();
        let mut bw = m.backward(&fwd, &[0, 1, 0]).unwrap();
        for g in bw.grads.layers.iter_mut().flatten() {
            match g {
                LayerGrads::Dense { weight, bias } => {
                    weight.data_mut().fill(0.0);
                    bias.data_mut().fill(0.0);
                }
                LayerGrads::BatchNorm { gamma, beta, .. } => {
                    gamma.data_mut().fill(0.0);
                    beta.data_mut().fill(0.0);
                }
            }
        }
        sgd_step(&mut m, &bw.grads, 0.5, 0.0).unwrap();
        assert_eq!(m.layers(), before.layers());
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut m = one_dense(false, 0.3);
        let err = sgd_step(&mut m, &dense_grad(f32::NAN), 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
        assert_eq!(weight(&m), 0.3);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut m = one_dense(false, 2.0);
        sgd_step(&mut m, &dense_grad(0.0), 0.1, 0.5).unwrap();
        assert!((weight(&m) - 1.9).abs() < 1e-6);
    }

    #[test]
    fn running_moments_move_only_in_train_mode() {
        let arch = Arch::Custom { input: 4, hidden: vec![3], classes: 2 };
        let x = uniform(&mut Rng::new(1), [6, 4], 0.0, 1.0);
        let labels = [0, 1, 0, 1, 1, 0];
        let running = |m: &Model| match &m.layers()[1] {
            Layer::BatchNorm(bn) => bn.running_mean.clone(),
            _ => unreachable!(),
        };

        let mut m = Model::build(&arch, false, 3).unwrap();
        let fwd = m.forward(&x, Mode::Eval).unwrap();
        let bw = m.backward(&fwd, &labels).unwrap();
        sgd_step(&mut m, &bw.grads, 0.01, 0.0).unwrap();
        assert!(running(&m).data().iter().all(|&v| v == 0.0));

        let fwd = m.forward(&x, Mode::Train).unwrap();
        let bw = m.backward(&fwd, &labels).unwrap();
        sgd_step(&mut m, &bw.grads, 0.01, 0.0).unwrap();
        assert!(running(&m).data().iter().any(|&v| v != 0.0));
    }
}
