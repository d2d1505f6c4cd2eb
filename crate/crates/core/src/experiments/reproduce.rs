//! Canned multi-model pipelines that rerun a published MNIST measurement and
//! compare it against embedded reference values.
//!
//! Every target trains (or loads from the model cache) a fixed list of
//! configurations, sweeps each one, and evaluates its pass criteria. Cells
//! with a tolerance gate the outcome; cells without one are informational.
//! Trend checks count how many seed repetitions satisfy a claim.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{hex_digest, AdvTrain, ExperimentConfig, Seeds};
use super::l1::{l1_profile, L1Profile};
use super::sweep::{seeds_string, sweep, SweepReport, SweepRow};
use super::train::{limit, train, TrainLog};
use crate::attacks::AttackFamily;
use crate::data::{InputBits, RawDataset};
use crate::error::{Error, Result};
use crate::network::{load_checkpoint, save_checkpoint, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    /// Adversarially trained full-precision models, 8-bit vs 2-bit input.
    Table2,
    /// Binarized and full-precision FCN2 at 8-bit and 2-bit input.
    Table5Fcn2,
    /// Full-precision models without adversarial training, 8-bit vs 2-bit.
    Fig4b,
    /// First-hidden-layer L1 profiles, binarized vs full precision.
    Fig6,
    /// Binarized vs full-precision degradation at small and large ε.
    BnnSmallEps,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Target::Table2,
        Target::Table5Fcn2,
        Target::Fig4b,
        Target::Fig6,
        Target::BnnSmallEps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Table2 => "table2",
            Target::Table5Fcn2 => "table5-fcn2",
            Target::Fig4b => "fig4b",
            Target::Fig6 => "fig6",
            Target::BnnSmallEps => "bnn-small-eps",
        }
    }

    pub fn parse(s: &str) -> Result<Target> {
        Target::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Target::ALL.iter().map(|t| t.name()).collect();
            Error::InvalidArgument(format!("unknown reproduce target {s:?}; expected one of {}", names.join(", ")))
        })
    }

    /// FGSM budgets swept by this target.
    pub fn epsilons(self) -> Vec<f32> {
        match self {
            Target::Table2 | Target::Table5Fcn2 => vec![0.0, 0.1, 0.2, 0.3],
            Target::Fig4b => vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            Target::Fig6 => vec![0.0, 0.1, 0.3],
            Target::BnnSmallEps => vec![0.0, 0.05, 0.1, 0.2, 0.3],
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One published accuracy row on MNIST.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub label: &'static str,
    /// Table the values come from.
    pub source: &'static str,
    pub binarized: bool,
    pub input_bits: u8,
    pub adversarially_trained: bool,
    pub epsilons: [f32; 4],
    pub accuracy: [f64; 4],
}

const EPS4: [f32; 4] = [0.0, 0.1, 0.2, 0.3];

/// Adversarially trained (ε = 0.3) full-precision FCN2.
pub const TABLE2_MNIST: [ReferenceRow; 2] = [
    ReferenceRow {
        label: "2b",
        source: "table 2",
        binarized: false,
        input_bits: 2,
        adversarially_trained: true,
        epsilons: EPS4,
        accuracy: [98.5, 98.5, 84.7, 85.4],
    },
    ReferenceRow {
        label: "8b",
        source: "table 2",
        binarized: false,
        input_bits: 8,
        adversarially_trained: true,
        epsilons: EPS4,
        accuracy: [98.0, 84.8, 74.5, 65.9],
    },
];

/// FCN1 (6144-wide) without adversarial training.
pub const TABLE5_MNIST: [ReferenceRow; 4] = [
    ReferenceRow {
        label: "BNN-2b",
        source: "table 5",
        binarized: true,
        input_bits: 2,
        adversarially_trained: false,
        epsilons: EPS4,
        accuracy: [96.4, 96.4, 60.7, 62.3],
    },
    ReferenceRow {
        label: "Full-2b",
        source: "table 5",
        binarized: false,
        input_bits: 2,
        adversarially_trained: false,
        epsilons: EPS4,
        accuracy: [97.8, 97.4, 35.4, 35.3],
    },
    ReferenceRow {
        label: "BNN-8b",
        source: "table 5",
        binarized: true,
        input_bits: 8,
        adversarially_trained: false,
        epsilons: EPS4,
        accuracy: [97.1, 89.4, 56.1, 33.6],
    },
    ReferenceRow {
        label: "Full-8b",
        source: "table 5",
        binarized: false,
        input_bits: 8,
        adversarially_trained: false,
        epsilons: EPS4,
        accuracy: [98.2, 75.9, 38.5, 26.4],
    },
];

/// Absolute tolerance, in accuracy points, on gated table 2 cells.
pub const TABLE2_TOLERANCE: f64 = 3.0;
/// Largest clean-minus-adversarial gap accepted as "no loss" at ε = 0.1.
pub const SMALL_GAP: f64 = 2.0;
/// Adversarial training budget for table 2 models.
pub const ADV_TRAIN_EPSILON: f32 = 0.3;
/// Test samples analyzed for L1 profiles.
pub const L1_SAMPLES: usize = 1000;

/// One model role in a target, e.g. `Full-8b`, with one config per seed.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub configs: Vec<ExperimentConfig>,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub target: Target,
    pub variants: Vec<Variant>,
}

impl Plan {
    /// Distinct configs in plan order.
    pub fn configs(&self) -> Vec<&ExperimentConfig> {
        let mut seen = Vec::new();
        let mut out = Vec::new();
        for v in &self.variants {
            for c in &v.configs {
                let h = c.hash();
                if !seen.contains(&h) {
                    seen.push(h);
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn variant(&self, label: &str) -> &Variant {
        self.variants.iter().find(|v| v.label == label).expect("variant in plan")
    }

    /// Hash of every config in the plan plus the target name.
    pub fn hash(&self) -> String {
        let mut text = format!("target={}\n", self.target);
        for c in self.configs() {
            text.push_str(&c.to_toml());
            text.push('\n');
        }
        hex_digest(text.as_bytes())
    }
}

/// How a target's configs are derived from the defaults.
#[derive(Debug, Clone)]
pub struct PlanOptions {
    /// `key=value` overrides applied to every config.
    pub overrides: Vec<String>,
    /// Seed repetition of the first run.
    pub seed_base: u64,
    pub repetitions: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            overrides: Vec::new(),
            seed_base: 0,
            repetitions: 3,
        }
    }
}

fn variant_config(target: Target, binarized: bool, bits: u8, adv: bool, k: u64, opts: &PlanOptions) -> Result<ExperimentConfig> {
    let mut cfg = if binarized {
        ExperimentConfig::binarized_default()
    } else {
        ExperimentConfig::default()
    };
    cfg.input_bits = InputBits::new(bits)?;
    cfg.seeds = Seeds::repetition(k);
    cfg.eval_epsilons = target.epsilons();
    if adv {
        cfg.adv_train = Some(AdvTrain {
            family: AttackFamily::Rfgsm,
            epsilon_train: ADV_TRAIN_EPSILON,
            alpha_fraction: 0.5,
        });
    }
    cfg.with_overrides(&opts.overrides)
}

pub fn plan(target: Target, opts: &PlanOptions) -> Result<Plan> {
    if opts.repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be positive".into()));
    }
    let reps = match target {
        Target::Fig6 => 1,
        _ => opts.repetitions,
    };
    // (label, binarized, bits, adversarially trained)
    let roles: &[(&str, bool, u8, bool)] = match target {
        Target::Table2 => &[("2b", false, 2, true), ("8b", false, 8, true)],
        Target::Table5Fcn2 => &[
            ("BNN-2b", true, 2, false),
            ("Full-2b", false, 2, false),
            ("BNN-8b", true, 8, false),
            ("Full-8b", false, 8, false),
        ],
        Target::Fig4b => &[("2b", false, 2, false), ("8b", false, 8, false)],
        Target::Fig6 | Target::BnnSmallEps => &[("BNN-8b", true, 8, false), ("Full-8b", false, 8, false)],
    };
    let variants = roles
        .iter()
        .map(|&(label, bin, bits, adv)| {
            let configs = (0..reps as u64)
                .map(|r| variant_config(target, bin, bits, adv, opts.seed_base + r, opts))
                .collect::<Result<Vec<_>>>()?;
            Ok(Variant {
                label: label.to_string(),
                configs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Plan { target, variants })
}

/// On-disk checkpoints keyed by [`ExperimentConfig::training_hash`].
#[derive(Debug, Clone)]
pub struct ModelCache {
    pub dir: PathBuf,
    /// Retrain and overwrite even when an entry exists.
    pub refresh: bool,
}

impl ModelCache {
    fn paths(&self, cfg: &ExperimentConfig) -> (PathBuf, PathBuf, PathBuf) {
        let h = cfg.training_hash();
        (
            self.dir.join(format!("{h}.dqn")),
            self.dir.join(format!("{h}.log")),
            self.dir.join(format!("{h}.toml")),
        )
    }

    pub fn load(&self, cfg: &ExperimentConfig) -> Result<Option<(Model, TrainLog)>> {
        let (model_path, log_path, _) = self.paths(cfg);
        if self.refresh || !model_path.exists() {
            return Ok(None);
        }
        let model = load_checkpoint(&model_path)?;
        let log = fs::read_to_string(&log_path)
            .ok()
            .map(|t| parse_log(&t))
            .unwrap_or_default();
        Ok(Some((model, log)))
    }

    pub fn store(&self, cfg: &ExperimentConfig, model: &Model, log: &TrainLog) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let (model_path, log_path, cfg_path) = self.paths(cfg);
        fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        fs::write(&log_path, log.to_text()).map_err(|e| Error::io(&log_path, e))?;
        // Written last so a present checkpoint implies a complete entry.
        let tmp = model_path.with_extension("dqn.tmp");
        save_checkpoint(model, &tmp)?;
        fs::rename(&tmp, &model_path).map_err(|e| Error::io(&model_path, e))
    }
}

fn parse_log(text: &str) -> TrainLog {
    let records = text
        .lines()
        .filter_map(|line| {
            let mut fields = line.split_whitespace().map(|kv| kv.split_once('=').map(|(_, v)| v));
            let epoch = fields.next()??.parse().ok()?;
            let loss = fields.next()??.parse().ok()?;
            let test_acc = fields.next()??.parse().ok()?;
            Some(super::train::EpochRecord { epoch, loss, test_acc })
        })
        .collect();
    TrainLog { records }
}

/// Trains `cfg` or loads it from `cache`.
pub fn obtain_model(
    cfg: &ExperimentConfig,
    train_set: &RawDataset,
    test_set: &RawDataset,
    cache: Option<&ModelCache>,
    progress: &Progress,
) -> Result<(Model, TrainLog)> {
    if let Some(hit) = cache.map(|c| c.load(cfg)).transpose()?.flatten() {
        progress(&format!("{}: loaded from cache", cfg.model_id()));
        return Ok(hit);
    }
    let id = cfg.model_id();
    progress(&format!("{id}: training {} epochs", cfg.epochs));
    let (model, log) = train(cfg, train_set, test_set, |r| {
        progress(&format!("{id}: {}", super::train::format_record(r)));
    })?;
    if let Some(c) = cache {
        c.store(cfg, &model, &log)?;
    }
    Ok((model, log))
}

pub type Progress = dyn Fn(&str) + Sync;

pub struct RunOptions<'a> {
    pub workers: usize,
    pub cache: Option<ModelCache>,
    pub progress: &'a Progress,
}

/// Everything computed for one config.
#[derive(Debug, Clone)]
pub struct ModelResult {
    pub config: ExperimentConfig,
    pub rows: Vec<SweepRow>,
    pub log: TrainLog,
    pub l1: Vec<L1Profile>,
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

fn run_config(
    target: Target,
    cfg: &ExperimentConfig,
    train_set: &RawDataset,
    test_set: &RawDataset,
    opts: &RunOptions,
) -> Result<ModelResult> {
    let (model, log) = obtain_model(cfg, train_set, test_set, opts.cache.as_ref(), opts.progress)?;
    let test = limit(test_set, cfg.test_samples);
    (opts.progress)(&format!("{}: sweeping {:?}", cfg.model_id(), cfg.eval_epsilons));
    let rows = sweep(&model, cfg, &test, &cfg.eval_epsilons, cfg.eval_attack)?;
    let l1 = if target == Target::Fig6 {
        let samples = test.take(L1_SAMPLES.min(test.len()));
        l1_profile(&model, &cfg.pipeline(), &samples, &cfg.eval_epsilons)?
    } else {
        Vec::new()
    };
    Ok(ModelResult {
        config: cfg.clone(),
        rows,
        log,
        l1,
    })
}

/// A reference or measured accuracy cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub variant: String,
    pub input_bits: u8,
    pub epsilon: f32,
    /// Mean over seed repetitions.
    pub ours: f64,
    pub reference: Option<f64>,
    /// Gated cells carry a tolerance; the rest are informational.
    pub tolerance: Option<f64>,
}

impl Comparison {
    pub fn delta(&self) -> Option<f64> {
        self.reference.map(|r| self.ours - r)
    }

    pub fn pass(&self) -> Option<bool> {
        Some(self.delta()?.abs() <= self.tolerance?)
    }
}

/// A claim evaluated independently on each seed repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub claim: String,
    /// Outcome per repetition, with the measured quantity.
    pub per_seed: Vec<(bool, String)>,
    pub required: usize,
}

impl TrendCheck {
    pub fn passed_seeds(&self) -> usize {
        self.per_seed.iter().filter(|(ok, _)| *ok).count()
    }

    pub fn pass(&self) -> bool {
        self.passed_seeds() >= self.required
    }
}

#[derive(Debug, Clone)]
pub struct Reproduction {
    pub plan: Plan,
    pub results: Vec<ModelResult>,
    pub report: SweepReport,
    pub comparisons: Vec<Comparison>,
    pub trends: Vec<TrendCheck>,
}

impl Reproduction {
    pub fn passed(&self) -> bool {
        self.comparisons.iter().all(|c| c.pass() != Some(false)) && self.trends.iter().all(TrendCheck::pass)
    }

    pub fn result(&self, cfg: &ExperimentConfig) -> &ModelResult {
        let h = cfg.hash();
        self.results.iter().find(|r| r.config.hash() == h).expect("config in results")
    }

    /// Accuracy of one seed of `variant` at `epsilon`.
    pub fn accuracy(&self, variant: &str, seed_index: usize, epsilon: f32) -> f64 {
        let cfg = &self.plan.variant(variant).configs[seed_index];
        self.report
            .accuracy(&cfg.model_id(), epsilon)
            .unwrap_or_else(|| panic!("no row for {} at {epsilon}", cfg.model_id()))
    }

    /// Mean accuracy of `variant` over its seeds.
    pub fn mean_accuracy(&self, variant: &str, epsilon: f32) -> f64 {
        let n = self.plan.variant(variant).configs.len();
        (0..n).map(|k| self.accuracy(variant, k, epsilon)).sum::<f64>() / n as f64
    }

    /// Profiles of the single-seed `variant` (L1 targets only).
    pub fn l1(&self, variant: &str) -> &[L1Profile] {
        &self.result(&self.plan.variant(variant).configs[0]).l1
    }

    /// `kind,variant,input_bits,epsilon,ours,reference,delta,tolerance,pass`
    /// for cells, then one `trend` line per claim.
    pub fn comparison_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let mut out = String::from("kind,variant,input_bits,epsilon,ours,reference,delta,tolerance,pass\n");
        for c in &self.comparisons {
            let _ = writeln!(
                out,
                "cell,{},{},{},{:.4},{},{},{},{}",
                c.variant,
                c.input_bits,
                c.epsilon,
                c.ours,
                opt(c.reference),
                opt(c.delta()),
                opt(c.tolerance),
                c.pass().map(|p| p.to_string()).unwrap_or_else(|| "info".into())
            );
        }
        for t in &self.trends {
            let _ = writeln!(
                out,
                "trend,\"{}\",,,{},{},,,{}",
                t.claim.replace('"', "'"),
                t.passed_seeds(),
                t.required,
                t.pass()
            );
        }
        out
    }

    /// Human-readable comparison table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "reproduce {}", self.plan.target);
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>6} {:>8} {:>9} {:>8} {:>6}",
            "variant", "δ", "ε", "ours", "reference", "Δ", "pass"
        );
        for c in &self.comparisons {
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>6} {:>8.2} {:>9} {:>8} {:>6}",
                c.variant,
                format!("{}b", c.input_bits),
                c.epsilon,
                c.ours,
                fmt_opt(c.reference),
                c.delta().map(|d| format!("{d:+.1}")).unwrap_or_else(|| "-".into()),
                match c.pass() {
                    Some(true) => "PASS",
                    Some(false) => "FAIL",
                    None => "info",
                }
            );
        }
        for t in &self.trends {
            let _ = writeln!(
                out,
                "{} {} ({}/{} runs, need {})",
                if t.pass() { "PASS" } else { "FAIL" },
                t.claim,
                t.passed_seeds(),
                t.per_seed.len(),
                t.required
            );
            for (i, (ok, detail)) in t.per_seed.iter().enumerate() {
                let _ = writeln!(out, "    run {i}: {} {detail}", if *ok { "ok" } else { "no" });
            }
        }
        let _ = writeln!(out, "overall: {}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

/// Trains or loads every model of `plan`, sweeps them, and evaluates the
/// target's checks.
pub fn run_plan(plan: Plan, train_set: &RawDataset, test_set: &RawDataset, opts: &RunOptions) -> Result<Reproduction> {
    let configs: Vec<ExperimentConfig> = plan.configs().into_iter().cloned().collect();
    let results = parallel_map(&configs, opts.workers, |cfg| {
        run_config(plan.target, cfg, train_set, test_set, opts)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let rows = results.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let mut report = SweepReport::new(&plan.hash(), rows);
    report.push_meta("target", plan.target);
    report.push_meta(
        "seeds",
        configs.iter().map(seeds_string).collect::<Vec<_>>().join(";"),
    );
    let mut epochs: Vec<usize> = configs.iter().map(|c| c.epochs).collect();
    epochs.dedup();
    report.push_meta("epochs", epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","));

    let mut rep = Reproduction {
        plan,
        results,
        report,
        comparisons: Vec::new(),
        trends: Vec::new(),
    };
    evaluate(&mut rep);
    Ok(rep)
}

pub fn reproduce(
    target: Target,
    plan_opts: &PlanOptions,
    train_set: &RawDataset,
    test_set: &RawDataset,
    opts: &RunOptions,
) -> Result<Reproduction> {
    run_plan(plan(target, plan_opts)?, train_set, test_set, opts)
}

fn majority(n: usize) -> usize {
    n / 2 + 1
}

fn trend(rep: &Reproduction, claim: &str, variant: &str, check: impl Fn(usize) -> (bool, String)) -> TrendCheck {
    let n = rep.plan.variant(variant).configs.len();
    TrendCheck {
        claim: claim.to_string(),
        per_seed: (0..n).map(check).collect(),
        required: majority(n),
    }
}

fn reference_cells(rep: &Reproduction, rows: &[ReferenceRow], gated: impl Fn(&ReferenceRow, f32) -> Option<f64>) -> Vec<Comparison> {
    let mut out = Vec::new();
    for r in rows {
        for (&eps, &acc) in r.epsilons.iter().zip(&r.accuracy) {
            out.push(Comparison {
                variant: r.label.to_string(),
                input_bits: r.input_bits,
                epsilon: eps,
                ours: rep.mean_accuracy(r.label, eps),
                reference: Some(acc),
                tolerance: gated(r, eps),
            });
        }
    }
    out
}

fn measured_cells(rep: &Reproduction) -> Vec<Comparison> {
    let mut out = Vec::new();
    for v in &rep.plan.variants {
        for &eps in &rep.plan.target.epsilons() {
            out.push(Comparison {
                variant: v.label.clone(),
                input_bits: v.configs[0].input_bits.get(),
                epsilon: eps,
                ours: rep.mean_accuracy(&v.label, eps),
                reference: None,
                tolerance: None,
            });
        }
    }
    out
}

fn evaluate(rep: &mut Reproduction) {
    let (comparisons, trends) = match rep.plan.target {
        Target::Table2 => {
            let cells = reference_cells(rep, &TABLE2_MNIST, |_, eps| (eps <= 0.1).then_some(TABLE2_TOLERANCE));
            let t = trend(rep, "2b >= 8b at every ε in {0.1, 0.2, 0.3}", "2b", |k| {
                let pairs: Vec<(f64, f64)> = [0.1, 0.2, 0.3]
                    .iter()
                    .map(|&e| (rep.accuracy("2b", k, e), rep.accuracy("8b", k, e)))
                    .collect();
                let ok = pairs.iter().all(|(a, b)| a >= b);
                (ok, format!("2b vs 8b: {pairs:.2?}"))
            });
            (cells, vec![t])
        }
        Target::Table5Fcn2 => {
            let cells = reference_cells(rep, &TABLE5_MNIST, |_, _| None);
            let gap = trend(rep, "BNN-2b: clean - acc(ε=0.1) <= 2 points", "BNN-2b", |k| {
                let g = rep.accuracy("BNN-2b", k, 0.0) - rep.accuracy("BNN-2b", k, 0.1);
                (g <= SMALL_GAP, format!("gap {g:.2}"))
            });
            let order = trend(rep, "BNN-2b >= BNN-8b at every ε >= 0.1", "BNN-2b", |k| {
                let pairs: Vec<(f64, f64)> = [0.1, 0.2, 0.3]
                    .iter()
                    .map(|&e| (rep.accuracy("BNN-2b", k, e), rep.accuracy("BNN-8b", k, e)))
                    .collect();
                (pairs.iter().all(|(a, b)| a >= b), format!("BNN-2b vs BNN-8b: {pairs:.2?}"))
            });
            (cells, vec![gap, order])
        }
        Target::Fig4b => {
            let cells = measured_cells(rep);
            let eps = rep.plan.target.epsilons();
            let gap = trend(rep, "2b: clean - acc(ε=0.1) <= 2 points", "2b", |k| {
                let g = rep.accuracy("2b", k, 0.0) - rep.accuracy("2b", k, 0.1);
                (g <= SMALL_GAP, format!("gap {g:.2}"))
            });
            let low = trend(rep, "8b: acc(ε=0.3) < 50%", "8b", |k| {
                let a = rep.accuracy("8b", k, 0.3);
                (a < 50.0, format!("acc {a:.2}"))
            });
            let order = trend(rep, "2b > 8b at every ε >= 0.1", "2b", |k| {
                let pairs: Vec<(f32, f64, f64)> = eps
                    .iter()
                    .filter(|&&e| e >= 0.1)
                    .map(|&e| (e, rep.accuracy("2b", k, e), rep.accuracy("8b", k, e)))
                    .collect();
                (pairs.iter().all(|(_, a, b)| a > b), format!("(ε, 2b, 8b): {pairs:.2?}"))
            });
            (cells, vec![gap, low, order])
        }
        Target::BnnSmallEps => {
            let cells = measured_cells(rep);
            let gap = trend(rep, "BNN-8b gap at ε=0.05 <= Full-8b gap at ε=0.05", "BNN-8b", |k| {
                let bnn = rep.accuracy("BNN-8b", k, 0.0) - rep.accuracy("BNN-8b", k, 0.05);
                let fp = rep.accuracy("Full-8b", k, 0.0) - rep.accuracy("Full-8b", k, 0.05);
                (bnn <= fp, format!("gaps BNN {bnn:.2}, Full {fp:.2}"))
            });
            let large = trend(rep, "Full-8b > BNN-8b at ε=0.3", "BNN-8b", |k| {
                let bnn = rep.accuracy("BNN-8b", k, 0.3);
                let fp = rep.accuracy("Full-8b", k, 0.3);
                (fp > bnn, format!("acc BNN {bnn:.2}, Full {fp:.2}"))
            });
            (cells, vec![gap, large])
        }
        Target::Fig6 => {
            let cells = measured_cells(rep);
            let bnn: Vec<_> = rep.l1("BNN-8b").iter().map(|p| (p.epsilon, p.summary())).collect();
            let fp: Vec<_> = rep.l1("Full-8b").iter().map(|p| (p.epsilon, p.summary())).collect();
            let at = |v: &[(f32, super::l1::L1Summary)], e: f32| v.iter().find(|(x, _)| *x == e).expect("profiled ε").1;
            let single = |claim: &str, ok: bool, detail: String| TrendCheck {
                claim: claim.to_string(),
                per_seed: vec![(ok, detail)],
                required: 1,
            };
            let (b0, b1, b3, f0) = (at(&bnn, 0.0), at(&bnn, 0.1), at(&bnn, 0.3), at(&fp, 0.0));
            let trends = vec![
                single(
                    "clean L1 variance: BNN-8b > Full-8b",
                    b0.variance > f0.variance,
                    format!("BNN {:.4e}, Full {:.4e}", b0.variance, f0.variance),
                ),
                single(
                    "BNN-8b ε=0.1 range overlaps the clean range",
                    b1.overlaps(&b0),
                    format!("clean [{:.4}, {:.4}], ε=0.1 [{:.4}, {:.4}]", b0.min, b0.max, b1.min, b1.max),
                ),
                single(
                    "BNN-8b ε=0.3 range extends beyond the clean max",
                    b3.max > b0.max,
                    format!("clean max {:.4}, ε=0.3 max {:.4}", b0.max, b3.max),
                ),
            ];
            (cells, trends)
        }
    };
    rep.comparisons = comparisons;
    rep.trends = trends;
}

/// Files written by [`write_outputs`].
pub fn output_paths(dir: &Path, target: Target) -> [PathBuf; 3] {
    [
        dir.join(format!("{target}.csv")),
        dir.join(format!("{target}-comparison.csv")),
        dir.join(format!("{target}-comparison.txt")),
    ]
}

/// Writes the sweep report, the comparison table in CSV and text form, L1
/// profiles when present, and each model's effective config and log.
pub fn write_outputs(rep: &Reproduction, dir: &Path) -> Result<()> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(p, e)
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let [report, cmp_csv, cmp_txt] = output_paths(dir, rep.plan.target);
    rep.report.emit(&report, super::sweep::ReportFormat::Csv)?;
    fs::write(&cmp_csv, rep.comparison_csv()).map_err(io(&cmp_csv))?;
    fs::write(&cmp_txt, rep.table()).map_err(io(&cmp_txt))?;
    let configs = dir.join("configs");
    fs::create_dir_all(&configs).map_err(io(&configs))?;
    for r in &rep.results {
        let id = r.config.model_id();
        let p = configs.join(format!("{id}.toml"));
        fs::write(&p, r.config.to_toml()).map_err(io(&p))?;
        let p = configs.join(format!("{id}.log"));
        fs::write(&p, r.log.to_text()).map_err(io(&p))?;
        if !r.l1.is_empty() {
            let p = dir.join(format!("{}-l1.csv", id));
            fs::write(&p, super::l1::profiles_csv(&id, &r.l1)).map_err(io(&p))?;
            let p = dir.join(format!("{}-l1-summary.csv", id));
            fs::write(&p, super::l1::summary_csv(&id, &r.l1)).map_err(io(&p))?;
        }
    }
    Ok(())
}
