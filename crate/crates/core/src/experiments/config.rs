//! Experiment configuration: a TOML document whose keys mirror
//! [`ExperimentConfig`]. Unknown keys are rejected with the nearest valid key
//! as a hint; `key.path=value` overrides are applied before validation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackFamily;
use crate::data::{InputBits, PipelineConfig};
use crate::error::{Error, Result};
use crate::network::{Arch, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchName {
    Fcn1,
    Fcn2,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Multiplier on the learning rate of binary layers' latent weights.
    pub latent_lr_scale: f32,
    /// Fractions of the epoch budget at which the rate is multiplied by `gamma`.
    pub milestones: Vec<f32>,
    pub gamma: f32,
}

impl LrSchedule {
    pub fn rate_at(&self, epoch: usize, epochs: usize) -> f32 {
        let decays = self
            .milestones
            .iter()
            .filter(|&&m| epoch as f32 >= m * epochs as f32)
            .count();
        self.initial * self.gamma.powi(decays as i32)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            latent_lr_scale: self.latent_lr_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvTrain {
    pub family: AttackFamily,
    pub epsilon_train: f32,
    pub alpha_fraction: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub attack: u64,
}

impl Seeds {
    /// Seeds for repetition `k` of an experiment.
    pub fn repetition(k: u64) -> Seeds {
        Seeds {
            init: 1000 + k,
            shuffle: 2000 + k,
            attack: 3000 + k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchName,
    /// Hidden widths for `arch = "custom"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hidden_widths: Vec<usize>,
    pub binarized: bool,
    pub input_bits: InputBits,
    pub epochs: usize,
    pub batch_size: usize,
    /// Use only the first N training images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    /// Use only the first N test images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
    pub eval_attack: AttackFamily,
    pub eval_epsilons: Vec<f32>,
    pub lr: LrSchedule,
    pub seeds: Seeds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv_train: Option<AdvTrain>,
}

impl Default for ExperimentConfig {
    /// Full-precision FCN2 on 8-bit input, 10 epochs, no adversarial training.
    fn default() -> Self {
        ExperimentConfig {
            arch: ArchName::Fcn2,
            hidden_widths: Vec::new(),
            binarized: false,
            input_bits: InputBits::new(8).unwrap(),
            epochs: 10,
            batch_size: 100,
            train_samples: None,
            test_samples: None,
            eval_attack: AttackFamily::Fgsm,
            eval_epsilons: vec![0.0, 0.1, 0.2, 0.3],
            lr: LrSchedule {
                initial: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                latent_lr_scale: 1.0,
                milestones: vec![0.5, 0.75],
                gamma: 0.1,
            },
            seeds: Seeds::repetition(0),
            adv_train: None,
        }
    }
}

impl ExperimentConfig {
    /// Binarized FCN2 defaults: larger step on BN/bias parameters, a scaled
    /// step on latent weights, and no weight decay.
    pub fn binarized_default() -> Self {
        ExperimentConfig {
            binarized: true,
            lr: LrSchedule {
                initial: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                latent_lr_scale: 40.0,
                milestones: vec![0.5, 0.75],
                gamma: 0.1,
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn arch(&self) -> Arch {
        self.arch_for(crate::network::MNIST_INPUT)
    }

    /// The architecture with a custom network's input width set to `input`.
    pub fn arch_for(&self, input: usize) -> Arch {
        match self.arch {
            ArchName::Fcn1 => Arch::Fcn1,
            ArchName::Fcn2 => Arch::Fcn2,
            ArchName::Custom => Arch::Custom {
                input,
                hidden: self.hidden_widths.clone(),
                classes: 10,
            },
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            input_bits: self.input_bits,
            shuffle_seed: self.seeds.shuffle,
            batch_size: self.batch_size,
        }
    }

    /// Short human-readable model identifier, e.g. `fcn2-bnn-2b-adv0.3-s1000`.
    pub fn model_id(&self) -> String {
        // The input width is not part of the config, so custom ids list hidden widths only.
        let arch = match self.arch {
            ArchName::Custom => {
                let h: Vec<String> = self.hidden_widths.iter().map(|w| w.to_string()).collect();
                format!("mlp{}", h.join("x"))
            }
            _ => self.arch().name(),
        };
        let mut id = format!(
            "{arch}-{}-{}",
            if self.binarized { "bnn" } else { "fp" },
            self.input_bits
        );
        if let Some(adv) = &self.adv_train {
            let _ = write!(id, "-adv{}", adv.epsilon_train);
        }
        let _ = write!(id, "-s{}", self.seeds.init);
        id
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.arch == ArchName::Custom && (self.hidden_widths.is_empty() || self.hidden_widths.contains(&0)) {
            return bad("arch = \"custom\" needs non-empty positive hidden_widths".into());
        }
        if self.arch != ArchName::Custom && !self.hidden_widths.is_empty() {
            return bad("hidden_widths only applies to arch = \"custom\"".into());
        }
        if self.train_samples == Some(0) || self.test_samples == Some(0) {
            return bad("train_samples/test_samples must be positive".into());
        }
        let eps = &self.eval_epsilons;
        if eps.first() != Some(&0.0) {
            return bad(format!("eval_epsilons must start with 0, got {eps:?}"));
        }
        if eps.windows(2).any(|w| w[0] >= w[1]) || eps.iter().any(|e| !e.is_finite()) {
            return bad(format!("eval_epsilons must be strictly ascending, got {eps:?}"));
        }
        if self.eval_attack == AttackFamily::None {
            return bad("eval_attack must be fgsm or rfgsm".into());
        }
        let lr = &self.lr;
        if !(lr.initial > 0.0) || !(lr.latent_lr_scale > 0.0) || !(lr.gamma > 0.0) {
            return bad("lr.initial, lr.latent_lr_scale and lr.gamma must be positive".into());
        }
        if !(0.0..1.0).contains(&lr.momentum) || lr.weight_decay < 0.0 {
            return bad("lr.momentum must lie in [0, 1) and lr.weight_decay >= 0".into());
        }
        if lr.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr.milestones are fractions of the epoch budget in [0, 1]".into());
        }
        if let Some(adv) = &self.adv_train {
            if adv.family != AttackFamily::Rfgsm {
                return bad("adv_train.family must be rfgsm".into());
            }
            if !(adv.epsilon_train > 0.0 && adv.epsilon_train < 1.0) {
                return bad(format!("adv_train.epsilon_train must lie in (0, 1), got {}", adv.epsilon_train));
            }
            if !(0.0..1.0).contains(&adv.alpha_fraction) {
                return bad("adv_train.alpha_fraction must lie in [0, 1)".into());
            }
        }
        Ok(())
    }

    /// Canonical TOML rendering; the basis of [`ExperimentConfig::hash`].
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    /// Raw SHA-256 of the canonical rendering.
    pub fn hash_bytes(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    /// Hash of the fields that determine the trained parameters; evaluation
    /// settings are excluded.
    pub fn training_hash(&self) -> String {
        let t = ExperimentConfig {
            eval_attack: AttackFamily::Fgsm,
            eval_epsilons: vec![0.0],
            test_samples: None,
            ..self.clone()
        };
        t.hash()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key.path=value` overrides (last wins), rejects
    /// unknown keys and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        check_keys(&doc, "")?;
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// Applies overrides to an existing config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides(&self.to_toml(), overrides)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Every dotted key a config may contain.
pub fn known_keys() -> Vec<String> {
    let full = ExperimentConfig {
        arch: ArchName::Custom,
        hidden_widths: vec![1],
        train_samples: Some(1),
        test_samples: Some(1),
        adv_train: Some(AdvTrain {
            family: AttackFamily::Rfgsm,
            epsilon_train: 0.3,
            alpha_fraction: 0.5,
        }),
        ..ExperimentConfig::default()
    };
    let toml::Value::Table(t) = toml::Value::try_from(&full).expect("serializes") else {
        unreachable!()
    };
    let mut keys = Vec::new();
    collect_keys(&t, "", &mut keys);
    keys
}

fn collect_keys(t: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let path = format!("{prefix}{k}");
        if let toml::Value::Table(sub) = v {
            collect_keys(sub, &format!("{path}."), out);
        } else {
            out.push(path);
        }
    }
}

fn nearest_key(key: &str) -> String {
    known_keys()
        .into_iter()
        .min_by_key(|k| strsim::levenshtein(k, key))
        .unwrap_or_default()
}

fn unknown_key(key: &str) -> Error {
    Error::Config(format!("unknown key `{key}`; did you mean `{}`?", nearest_key(key)))
}

fn check_keys(t: &toml::Table, prefix: &str) -> Result<()> {
    let known = known_keys();
    for (k, v) in t {
        let path = format!("{prefix}{k}");
        match v {
            toml::Value::Table(sub) => {
                if !known.iter().any(|kk| kk.starts_with(&format!("{path}."))) {
                    return Err(unknown_key(&path));
                }
                check_keys(sub, &format!("{path}."))?;
            }
            _ => {
                if !known.contains(&path) {
                    return Err(unknown_key(&path));
                }
            }
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(doc: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
    let key = key.trim();
    if !known_keys().iter().any(|k| k == key) {
        return Err(unknown_key(key));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
