use std::borrow::Cow;
use std::fmt::Write as _;

use super::config::ExperimentConfig;
use crate::attacks::{evaluate_attack, rfgsm, AttackSpec};
use crate::data::{batches, RawDataset};
use crate::error::{Error, Result};
use crate::network::{Mode, Model, Sgd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Clean test accuracy in percent after the epoch.
    pub test_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One `epoch=.. loss=.. test_acc=..` line per epoch.
    pub fn to_text(&self) -> String {
        self.records.iter().fold(String::new(), |mut s, r| {
            let _ = writeln!(s, "{}", format_record(r));
            s
        })
    }
}

pub fn format_record(r: &EpochRecord) -> String {
    format!("epoch={} loss={:.6} test_acc={:.2}", r.epoch, r.loss, r.test_acc)
}

/// The first `n` items of `ds`, or all of it.
pub fn limit(ds: &RawDataset, n: Option<usize>) -> Cow<'_, RawDataset> {
    match n {
        Some(n) if n < ds.len() => Cow::Owned(ds.take(n)),
        _ => Cow::Borrowed(ds),
    }
}

/// Seed for the adversaries crafted during `epoch`; each sample's noise then
/// comes from its own stream of this seed.
fn epoch_attack_seed(base: u64, epoch: usize) -> u64 {
    base ^ ((epoch as u64 + 1) << 40)
}

/// Trains a model from scratch. With `adv_train` set, the second half of
/// every minibatch is replaced by R-FGSM adversaries crafted against the
/// current parameters.
pub fn train(
    cfg: &ExperimentConfig,
    train_set: &RawDataset,
    test_set: &RawDataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let train_set = limit(train_set, cfg.train_samples);
    let test_set = limit(test_set, cfg.test_samples);
    let pipeline = cfg.pipeline();
    let mut model = Model::build(&cfg.arch_for(train_set.pixels()), cfg.binarized, cfg.seeds.init)?;
    let mut opt = Sgd::new(cfg.lr.sgd());
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.rate_at(epoch, cfg.epochs);
        let attack_seed = epoch_attack_seed(cfg.seeds.attack, epoch);
        let mut total = 0.0;
        let mut n_batches = 0;
        for (bi, b) in batches(&train_set, &pipeline, epoch)?.enumerate() {
            let x = match &cfg.adv_train {
                Some(adv) if b.labels.len() >= 2 => {
                    let half = b.labels.len() / 2;
                    let cols = b.raw.cols();
                    let tail = Tensor::new([b.labels.len() - half, cols], b.raw.data()[half * cols..].to_vec())?;
                    let eps = adv.epsilon_train;
                    let adv_rows = rfgsm(
                        &model,
                        &pipeline,
                        &tail,
                        &b.labels[half..],
                        eps,
                        adv.alpha_fraction * eps,
                        attack_seed,
                        &b.indices[half..],
                    )?;
                    let mut data = b.x.into_data();
                    data.truncate(half * cols);
                    data.extend_from_slice(pipeline.discretize(&adv_rows).data());
                    Tensor::new([b.labels.len(), cols], data)?
                }
                _ => b.x,
            };
            let fwd = model.forward(&x, Mode::Train)?;
            let bw = model.backward(&fwd, &b.labels)?;
            if !bw.loss.is_finite() {
                return Err(Error::Diverged {
                    what: "training loss",
                    epoch: epoch + 1,
                    batch: bi,
                });
            }
            if !bw.grads.all_finite() {
                return Err(Error::Diverged {
                    what: "gradient",
                    epoch: epoch + 1,
                    batch: bi,
                });
            }
            opt.step(&mut model, &bw.grads, lr)?;
            total += bw.loss;
            n_batches += 1;
        }
        let eval = evaluate_attack(&model, &pipeline, &test_set, &AttackSpec::none())?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: total / n_batches as f64,
            test_acc: eval.accuracy_pct(),
        };
        on_epoch(&rec);
        log.records.push(rec);
    }
    Ok((model, log))
}
