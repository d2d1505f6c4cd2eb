//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Needs the MNIST IDX files under `$QG_DATA_DIR` (default `data/mnist` at
//! the workspace root). Trained checkpoints are cached under the cargo
//! target directory, so later runs only retrain what the determinism gate
//! requires.

#[path = "../../core/tests/support/reference.rs"]
mod reference;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use quantguard::attacks::{fgsm, rfgsm};
use quantguard::data::{
    batches, default_data_dir, discretize_intensity, load_idx, load_mnist, quantize_unit, InputBits,
    PipelineConfig, RawDataset, Split,
};
use quantguard::experiments::reproduce::{output_paths, Reproduction};
use quantguard::experiments::{reproduce, sweep_report, ExperimentConfig, ModelCache, PlanOptions, RunOptions, Target};
use quantguard::network::{load_checkpoint, save_checkpoint, Arch, Gradients, Layer, LayerGrads, Mode, Model, Sgd, SgdConfig};
use quantguard::tensor::gaussian;
use quantguard::Rng;

struct Outcome {
    id: u8,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn progress(msg: &str) {
    say(&format!("    {msg}"));
}

struct Env {
    data_dir: PathBuf,
    train: RawDataset,
    test: RawDataset,
    cache_dir: PathBuf,
    work: PathBuf,
}

impl Env {
    fn run_opts(&self) -> RunOptions<'static> {
        RunOptions {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cache: Some(ModelCache {
                dir: self.cache_dir.clone(),
                refresh: false,
            }),
            progress: &progress,
        }
    }

    fn reproduce(&self, target: Target) -> Reproduction {
        reproduce(target, &PlanOptions::default(), &self.train, &self.test, &self.run_opts())
            .unwrap_or_else(|e| panic!("reproduce {target}: {e}"))
    }
}

/// `Ok(detail)` when every listed check holds, otherwise the failures.
fn all(checks: Vec<(bool, String)>) -> (bool, String) {
    let failed: Vec<&String> = checks.iter().filter(|(ok, _)| !ok).map(|(_, d)| d).collect();
    if failed.is_empty() {
        (true, checks.iter().map(|(_, d)| d.as_str()).collect::<Vec<_>>().join("; "))
    } else {
        (false, failed.iter().map(|d| d.as_str()).collect::<Vec<_>>().join("; "))
    }
}

fn quantizer_properties() -> (bool, String) {
    let mut rng = Rng::new(1);
    let unit: Vec<f32> = (0..20_000).map(|_| rng.uniform(0.0, 1.0)).collect();
    for bits in InputBits::SUPPORTED {
        let b = InputBits::new(bits).unwrap();
        let mut outputs = Vec::new();
        let mut prev = f32::NEG_INFINITY;
        for i in 0..=255u8 {
            let q = discretize_intensity(i as f32, b);
            if q < prev || discretize_intensity(q, b) != q {
                return (false, format!("{bits}b: intensity quantizer not monotone/idempotent at {i}"));
            }
            prev = q;
            outputs.push(q.to_bits());
        }
        outputs.dedup();
        if outputs.len() > 1 << bits {
            return (false, format!("{bits}b: {} distinct intensities", outputs.len()));
        }
        let mut sorted = unit.clone();
        sorted.sort_by(f32::total_cmp);
        let q: Vec<f32> = sorted.iter().map(|&v| quantize_unit(v, b)).collect();
        if q.windows(2).any(|w| w[0] > w[1]) || q.iter().any(|&v| quantize_unit(v, b) != v) {
            return (false, format!("{bits}b: unit quantizer not monotone/idempotent"));
        }
        let mut distinct: Vec<u32> = q.iter().map(|v| v.to_bits()).collect();
        distinct.dedup();
        if distinct.len() > 1 << bits {
            return (false, format!("{bits}b: {} distinct unit outputs", distinct.len()));
        }
    }
    (true, "quantizers idempotent, monotone, <= 2^δ outputs for δ in {2,3,4,8}".into())
}

fn attack_bounds(test: &RawDataset) -> (bool, String) {
    let ds = test.take(1000);
    let idx: Vec<usize> = (0..1000).collect();
    let x = ds.normalized(&idx);
    let y = ds.labels_at(&idx);
    let mut worst = 0.0f32;
    for binarized in [false, true] {
        let m = Model::build(&Arch::Fcn2, binarized, 7).unwrap();
        for bits in [2, 8] {
            let p = PipelineConfig::new(InputBits::new(bits).unwrap(), 0, 100).unwrap();
            for eps in [0.05f32, 0.1, 0.3] {
                for adv in [
                    fgsm(&m, &p, &x, &y, eps).unwrap(),
                    rfgsm(&m, &p, &x, &y, eps, eps / 2.0, 11, &idx).unwrap(),
                ] {
                    for (&a, &b) in x.data().iter().zip(adv.data()) {
                        if (a - b).abs() > eps || !(0.0..=1.0).contains(&b) {
                            return (false, format!("ε={eps}: {a} -> {b}"));
                        }
                        worst = worst.max((a - b).abs() / eps);
                    }
                }
            }
        }
    }
    (true, format!("FGSM/R-FGSM on 1000 test images: max |δx|/ε = {worst}, all in [0,1]"))
}

fn gradient_checks() -> (bool, String) {
    let mut details = Vec::new();
    for binarized in [false, true] {
        let mut m = Model::build(&Arch::Fcn2, binarized, 21).unwrap();
        reference::perturb_bn(&mut m, 22);
        match reference::check_model(&m, 4, Mode::Train, 12, 23) {
            Ok(worst) => details.push(format!(
                "FCN2 {} worst relative error {worst:.1e}",
                if binarized { "BNN" } else { "FP" }
            )),
            Err(e) => return (false, format!("binarized={binarized}: {e}")),
        }
    }
    (true, details.join(", "))
}

fn clamp_invariant() -> (bool, String) {
    let mut m = Model::build(&Arch::Fcn2, true, 3).unwrap();
    let mut rng = Rng::new(4);
    let mut opt = Sgd::new(SgdConfig {
        momentum: 0.9,
        weight_decay: 0.0,
        latent_lr_scale: 40.0,
    });
    for step in 0..100 {
        let layers = m
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Some(LayerGrads::Dense {
                    weight: gaussian(&mut rng, d.weight.shape().to_vec()),
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
        opt.step(&mut m, &Gradients { layers }, 0.05).unwrap();
        let ok = m.layers().iter().all(|l| match l {
            Layer::Dense(d) => d.weight.data().iter().all(|w| (-1.0..=1.0).contains(w)),
            _ => true,
        });
        if !ok {
            return (false, format!("latent weight outside [-1, 1] after step {step}"));
        }
    }
    (true, "latent weights in [-1,1] after 100 random SGD steps".into())
}

fn checkpoint_round_trip(work: &Path) -> (bool, String) {
    for binarized in [false, true] {
        let m = Model::build(&Arch::Fcn2, binarized, 5).unwrap();
        let (a, b) = (work.join("a.dqn"), work.join("b.dqn"));
        save_checkpoint(&m, &a).unwrap();
        let back = load_checkpoint(&a).unwrap();
        save_checkpoint(&back, &b).unwrap();
        if back.layers() != m.layers() || fs::read(&a).unwrap() != fs::read(&b).unwrap() {
            return (false, format!("binarized={binarized}: round trip not bit-exact"));
        }
    }
    (true, "save/load/save byte-identical for FCN2 FP and BNN".into())
}

fn seeded_determinism(env: &Env) -> (bool, String) {
    let p = PipelineConfig::new(InputBits::new(2).unwrap(), 17, 100).unwrap();
    let order = |epoch| batches(&env.train, &p, epoch).unwrap().map(|b| b.indices).collect::<Vec<_>>();
    if order(3) != order(3) || order(3) == order(4) {
        return (false, "batch order not a function of (seed, epoch)".into());
    }
    let cfg = ExperimentConfig::default()
        .with_overrides(&[
            "epochs=1".into(),
            "train_samples=2000".into(),
            "test_samples=500".into(),
            "input_bits=2".into(),
        ])
        .unwrap();
    let run = || {
        let (m, log) = quantguard::experiments::train(&cfg, &env.train, &env.test, |_| {}).unwrap();
        let report = sweep_report(&m, &cfg, &env.test).unwrap();
        let idx: Vec<usize> = (0..50).collect();
        let x = env.test.normalized(&idx);
        let adv = rfgsm(&m, &cfg.pipeline(), &x, &env.test.labels_at(&idx), 0.3, 0.15, 9, &idx).unwrap();
        (log, report.to_csv(), adv)
    };
    let (a, b) = (run(), run());
    if a != b {
        return (false, "repeated seeded train+sweep+attack differ".into());
    }
    (true, "batches, training, R-FGSM and sweep reports repeat bit-exactly".into())
}

fn criterion_1(env: &Env) -> Outcome {
    let t10k = load_idx(
        &env.data_dir.join("t10k-images-idx3-ubyte"),
        &env.data_dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    );
    let n = t10k.as_ref().map(|d| d.len()).unwrap_or(0);
    let (pass, detail) = all(vec![
        (n == 10_000, format!("t10k loads with N={n}")),
        quantizer_properties(),
        attack_bounds(&env.test),
        gradient_checks(),
        clamp_invariant(),
        checkpoint_round_trip(&env.work),
        seeded_determinism(env),
    ]);
    Outcome {
        id: 1,
        title: "unit/property suite",
        pass,
        detail,
    }
}

fn trends(rep: &Reproduction) -> Vec<(bool, String)> {
    rep.trends
        .iter()
        .map(|t| {
            let seeds: Vec<&str> = t.per_seed.iter().map(|(_, d)| d.as_str()).collect();
            (
                t.pass(),
                format!("{} [{}/{} runs: {}]", t.claim, t.passed_seeds(), t.per_seed.len(), seeds.join(" | ")),
            )
        })
        .collect()
}

fn cells(rep: &Reproduction) -> Vec<(bool, String)> {
    rep.comparisons
        .iter()
        .filter_map(|c| {
            let pass = c.pass()?;
            Some((
                pass,
                format!(
                    "{} ε={}: {:.2} vs {} (±{})",
                    c.variant,
                    c.epsilon,
                    c.ours,
                    c.reference.unwrap(),
                    c.tolerance.unwrap()
                ),
            ))
        })
        .collect()
}

fn criterion_2(env: &Env) -> Outcome {
    let rep = env.reproduce(Target::Table2);
    say(&rep.table());
    let mut checks = cells(&rep);
    checks.extend(trends(&rep));
    let (pass, detail) = all(checks);
    Outcome {
        id: 2,
        title: "adversarial training, 2b vs 8b",
        pass,
        detail,
    }
}

/// Runs `reproduce fig4b` through the binary twice from scratch and compares
/// the emitted CSVs byte for byte. The first run refreshes the shared cache.
fn criterion_7(env: &Env) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_quantguard");
    let run = |out: &Path, cache_args: &[&str]| {
        let status = Command::new(bin)
            .arg("--data-dir")
            .arg(&env.data_dir)
            .args(["reproduce", "fig4b", "--out"])
            .arg(out)
            .args(cache_args)
            .status()
            .expect("spawn quantguard");
        status.success()
    };
    let (a, b) = (env.work.join("fig4b-a"), env.work.join("fig4b-b"));
    let cache = env.cache_dir.to_string_lossy().into_owned();
    let ok_a = run(&a, &["--cache", &cache, "--refresh"]);
    let ok_b = run(&b, &["--no-cache"]);
    let mut checks = vec![(ok_a && ok_b, format!("both runs exit 0 ({ok_a}, {ok_b})"))];
    if ok_a && ok_b {
        for (pa, pb) in output_paths(&a, Target::Fig4b).iter().zip(&output_paths(&b, Target::Fig4b)) {
            if pa.extension().is_some_and(|e| e == "csv") {
                let same = fs::read(pa).ok() == fs::read(pb).ok();
                checks.push((same, format!("{} byte-identical: {same}", pa.file_name().unwrap().to_string_lossy())));
            }
        }
    }
    let (pass, detail) = all(checks);
    Outcome {
        id: 7,
        title: "reproduce fig4b determinism",
        pass,
        detail,
    }
}

fn criterion_3(env: &Env) -> Outcome {
    let rep = env.reproduce(Target::Fig4b);
    say(&rep.table());
    let cli_csv = fs::read_to_string(output_paths(&env.work.join("fig4b-a"), Target::Fig4b)[0].clone()).ok();
    let mut checks = trends(&rep);
    if let Some(csv) = cli_csv {
        let same = csv == rep.report.to_csv();
        checks.push((same, format!("library report matches CLI report: {same}")));
    }
    let (pass, detail) = all(checks);
    Outcome {
        id: 3,
        title: "discretization trend without adversarial training",
        pass,
        detail,
    }
}

fn criterion_4(env: &Env) -> Outcome {
    let rep = env.reproduce(Target::BnnSmallEps);
    say(&rep.table());
    let (pass, detail) = all(trends(&rep));
    Outcome {
        id: 4,
        title: "BNN vs full precision at small and large ε",
        pass,
        detail,
    }
}

fn criterion_5(env: &Env) -> Outcome {
    let rep = env.reproduce(Target::Table5Fcn2);
    say(&rep.table());
    let (pass, detail) = all(trends(&rep));
    Outcome {
        id: 5,
        title: "input plus parameter discretization at FCN2 scale",
        pass,
        detail,
    }
}

fn criterion_6(env: &Env) -> Outcome {
    let rep = env.reproduce(Target::Fig6);
    say(&rep.table());
    let n_ok = ["BNN-8b", "Full-8b"]
        .iter()
        .all(|v| rep.l1(v).iter().all(|p| p.norms.len() == 1000 && p.norms.iter().all(|&x| x >= 0.0)));
    let mut checks = vec![(n_ok, "1000 non-negative norms per profile".to_string())];
    checks.extend(trends(&rep));
    let (pass, detail) = all(checks);
    Outcome {
        id: 6,
        title: "first-hidden-layer L1 profiles",
        pass,
        detail,
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a filter
    // argument that does not name this suite skips it.
    if std::env::args().skip(1).any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    let data_dir = default_data_dir();
    let (train, test) = match (load_mnist(&data_dir, Split::Train), load_mnist(&data_dir, Split::Test)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            say(&format!(
                "FAIL acceptance: MNIST not found ({e}). Put the four IDX files in {} or set QG_DATA_DIR.",
                data_dir.display()
            ));
            std::process::exit(1);
        }
    };
    let target_tmp = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let work = target_tmp.join("acceptance-work");
    let _ = fs::remove_dir_all(&work);
    fs::create_dir_all(&work).unwrap();
    let env = Env {
        data_dir,
        train,
        test,
        cache_dir: target_tmp.join("model-cache"),
        work,
    };

    let mut outcomes: Vec<Outcome> = Vec::new();
    let steps: [fn(&Env) -> Outcome; 7] = [
        criterion_1,
        criterion_7,
        criterion_3,
        criterion_2,
        criterion_4,
        criterion_5,
        criterion_6,
    ];
    for step in steps {
        let started = Instant::now();
        let o = step(&env);
        say(&format!(
            "{} criterion {} ({}) in {:.0}s: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.title,
            started.elapsed().as_secs_f64(),
            o.detail
        ));
        outcomes.push(o);
    }

    outcomes.sort_by_key(|o| o.id);
    say("\nacceptance summary");
    for o in &outcomes {
        say(&format!("{} criterion {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.title));
    }
    if outcomes.iter().any(|o| !o.pass) {
        std::process::exit(1);
    }
}
