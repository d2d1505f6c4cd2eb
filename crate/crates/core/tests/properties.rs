use proptest::prelude::*;
use quantguard::attacks::{fgsm, rfgsm};
use quantguard::data::{quantize_unit, InputBits, PipelineConfig};
use quantguard::network::{
    read_checkpoint, sgd_step, write_checkpoint, Arch, Gradients, Layer, LayerGrads, Mode, Model, Sgd, SgdConfig,
};
use quantguard::tensor::{gaussian, uniform};
use quantguard::{Rng, Tensor};

fn small_arch() -> Arch {
    Arch::Custom {
        input: 784,
        hidden: vec![16],
        classes: 10,
    }
}

fn pipeline(bits: u8) -> PipelineConfig {
    PipelineConfig::new(InputBits::new(bits).unwrap(), 0, 100).unwrap()
}

fn labels(n: usize) -> Vec<u8> {
    (0..n).map(|i| (i * 7 % 10) as u8).collect()
}

fn assert_linf(x: &Tensor, adv: &Tensor, eps: f32) {
    for (&a, &b) in x.data().iter().zip(adv.data()) {
        assert!((a - b).abs() <= eps, "|{b} - {a}| > {eps}");
        assert!((0.0..=1.0).contains(&b), "{b} outside [0, 1]");
    }
}

#[test]
fn attacks_respect_budget_on_1000_samples() {
    let mut rng = Rng::new(3);
    let x = uniform(&mut rng, [1000, 784], 0.0, 1.0);
    let y = labels(1000);
    let ids: Vec<usize> = (0..1000).collect();
    for binarized in [false, true] {
        let m = Model::build(&small_arch(), binarized, 5).unwrap();
        for bits in [2, 8] {
            for eps in [0.01f32, 0.1, 0.3, 0.7] {
                assert_linf(&x, &fgsm(&m, &pipeline(bits), &x, &y, eps).unwrap(), eps);
                let adv = rfgsm(&m, &pipeline(bits), &x, &y, eps, eps / 2.0, 9, &ids).unwrap();
                assert_linf(&x, &adv, eps);
            }
        }
    }
}

#[test]
fn binary_weights_stay_clamped_over_100_random_steps() {
    let mut m = Model::build(
        &Arch::Custom {
            input: 20,
            hidden: vec![12, 12],
            classes: 4,
        },
        true,
        8,
    )
    .unwrap();
    let mut rng = Rng::new(9);
    let mut opt = Sgd::new(SgdConfig {
        momentum: 0.9,
        weight_decay: 0.0,
        latent_lr_scale: 10.0,
    });
    for step in 0..100 {
        let scale = 10f32.powi((step % 5) as i32 - 2);
        let layers = m
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Some(LayerGrads::Dense {
                    weight: gaussian(&mut rng, d.weight.shape().to_vec()).map(|v| v * scale),
                    bias: gaussian(&mut rng, d.bias.shape().to_vec()),
                }),
                Layer::BatchNorm(bn) => Some(LayerGrads::BatchNorm {
                    gamma: gaussian(&mut rng, [bn.width()]),
                    beta: gaussian(&mut rng, [bn.width()]),
                    batch_moments: None,
                }),
                _ => None,
            })
            .collect();
        opt.step(&mut m, &Gradients { layers }, 0.1).unwrap();
        for l in m.layers() {
            if let Layer::Dense(d) = l {
                assert!(d.weight.data().iter().all(|w| (-1.0..=1.0).contains(w)), "step {step}");
            }
        }
    }
}

#[test]
fn full_batch_loss_decreases_over_50_steps() {
    let mut rng = Rng::new(12);
    let x = uniform(&mut rng, [64, 784], 0.0, 1.0);
    let y = labels(64);
    for binarized in [false, true] {
        let mut m = Model::build(&Arch::Fcn2, binarized, 13).unwrap();
        let mut losses = Vec::new();
        for _ in 0..50 {
            let fwd = m.forward(&x, Mode::Train).unwrap();
            let bw = m.backward(&fwd, &y).unwrap();
            losses.push(bw.loss);
            sgd_step(&mut m, &bw.grads, 0.01, 0.0).unwrap();
        }
        let (first, last) = (losses[0], *losses.last().unwrap());
        assert!(last < first, "binarized={binarized}: {first} -> {last}");
    }
}

#[test]
fn attacks_and_training_steps_are_deterministic() {
    let run = || {
        let mut m = Model::build(&small_arch(), false, 21).unwrap();
        let mut rng = Rng::new(22);
        let x = uniform(&mut rng, [32, 784], 0.0, 1.0);
        let y = labels(32);
        for _ in 0..3 {
            let fwd = m.forward(&x, Mode::Train).unwrap();
            let bw = m.backward(&fwd, &y).unwrap();
            sgd_step(&mut m, &bw.grads, 0.05, 1e-4).unwrap();
        }
        let ids: Vec<usize> = (0..32).collect();
        let a = fgsm(&m, &pipeline(4), &x, &y, 0.1).unwrap();
        let b = rfgsm(&m, &pipeline(4), &x, &y, 0.2, 0.1, 5, &ids).unwrap();
        (write_checkpoint(&m), a, b)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attack_budget_holds_for_any_epsilon(
        eps in 0.0f32..1.0,
        frac in 0.0f32..0.99,
        seed in any::<u64>(),
        bits in prop::sample::select(vec![2u8, 3, 4, 8]),
    ) {
        let m = Model::build(&small_arch(), seed % 2 == 0, seed).unwrap();
        let mut rng = Rng::new(seed);
        let x = uniform(&mut rng, [8, 784], 0.0, 1.0);
        let y = labels(8);
        let adv = fgsm(&m, &pipeline(bits), &x, &y, eps).unwrap();
        assert_linf(&x, &adv, eps);
        if eps > 0.0 {
            let ids: Vec<usize> = (0..8).collect();
            let adv = rfgsm(&m, &pipeline(bits), &x, &y, eps, frac * eps, seed, &ids).unwrap();
            assert_linf(&x, &adv, eps);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        hidden in prop::collection::vec(1usize..9, 1..4),
        input in 1usize..12,
        classes in 1usize..6,
        binarized in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let m = Model::build(&Arch::Custom { input, hidden, classes }, binarized, seed).unwrap();
        let bytes = write_checkpoint(&m);
        let back = read_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.layers(), m.layers());
        prop_assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn discretized_attack_inputs_take_at_most_2_pow_delta_values(
        seed in any::<u64>(),
        bits in prop::sample::select(vec![2u8, 3, 4]),
    ) {
        let m = Model::build(&small_arch(), false, seed).unwrap();
        let x = uniform(&mut Rng::new(seed), [4, 784], 0.0, 1.0);
        let p = pipeline(bits);
        let adv = p.discretize(&fgsm(&m, &p, &x, &labels(4), 0.3).unwrap());
        let mut seen: Vec<u32> = adv.data().iter().map(|v| v.to_bits()).collect();
        seen.sort_unstable();
        seen.dedup();
        prop_assert!(seen.len() <= 1 << bits);
        for v in adv.data() {
            prop_assert_eq!(quantize_unit(*v, p.input_bits), *v);
        }
    }
}
