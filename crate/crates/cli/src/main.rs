//! `quantguard`: train, attack, sweep and analyze discretized and binarized
//! MNIST classifiers, or rerun a canned reproduction pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use quantguard::attacks::{accuracy, adversarial_testset, save_adversarial_set, AttackFamily, AttackSpec};
use quantguard::data::{default_data_dir, load_mnist, RawDataset, Split};
use quantguard::experiments::l1::{profiles_csv, summary_csv};
use quantguard::experiments::reproduce::{obtain_model, output_paths, write_outputs};
use quantguard::experiments::train::limit;
use quantguard::experiments::{
    l1_profile, reproduce, sweep_report, ExperimentConfig, ModelCache, PlanOptions, ReportFormat, RunOptions, Seeds,
    Target,
};
use quantguard::network::{load_checkpoint, save_checkpoint, Model};

#[derive(Parser)]
#[command(name = "quantguard", version, about)]
struct Cli {
    /// Directory holding the four uncompressed MNIST IDX files.
    /// Defaults to $QG_DATA_DIR, then data/mnist in the source tree.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.dqn, train.log and config.toml.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Craft an adversarial copy of the test set against a model.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// L∞ budget.
        #[arg(long)]
        eps: f32,
        /// fgsm or rfgsm.
        #[arg(long, default_value = "fgsm")]
        family: String,
        #[arg(long, default_value = "runs/attack")]
        out: PathBuf,
    },
    /// Accuracy under attack for each ε; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated ε list, in any order; replaces `eval_epsilons`. ε = 0 is always included.
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f32>>,
        /// Also write the report as TOML.
        #[arg(long)]
        toml: bool,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// First-hidden-layer L1 norm profiles under FGSM.
    #[command(name = "analyze-l1")]
    AnalyzeL1 {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3")]
        eps: Vec<f32>,
        /// Number of leading test images to analyze.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value = "runs/l1")]
        out: PathBuf,
    },
    /// Rerun a canned pipeline and compare against reference values.
    Reproduce {
        /// table2, table5-fcn2, fig4b, fig6 or bnn-small-eps.
        target: String,
        /// `key=value` applied to every config of the pipeline (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// First seed repetition.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Parallel training/evaluation jobs. Defaults to the machine's parallelism.
        #[arg(long)]
        workers: Option<usize>,
        /// Checkpoint cache directory.
        #[arg(long, default_value = "runs/model-cache")]
        cache: PathBuf,
        /// Train everything from scratch without touching the cache.
        #[arg(long)]
        no_cache: bool,
        /// Retrain and overwrite cache entries.
        #[arg(long)]
        refresh: bool,
        #[arg(long, default_value = "runs/reproduce")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults to full-precision FCN2.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override with a dotted key path (repeatable, last wins).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed repetition: init=1000+N, shuffle=2000+N, attack=3000+N.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(n) = self.seed {
            let s = Seeds::repetition(n);
            overrides.extend([
                format!("seeds.init={}", s.init),
                format!("seeds.shuffle={}", s.shuffle),
                format!("seeds.attack={}", s.attack),
            ]);
        }
        overrides.extend(self.overrides.iter().cloned());
        overrides.extend(extra.iter().cloned());
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, &overrides)?,
            None => ExperimentConfig::default().with_overrides(&overrides)?,
        };
        Ok(cfg)
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Trained checkpoint. Without it the model is trained from the config,
    /// reusing --cache when given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Checkpoint cache used when training is needed.
    #[arg(long)]
    cache: Option<PathBuf>,
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

struct Data {
    dir: PathBuf,
}

impl Data {
    fn load(&self, split: Split) -> Result<RawDataset> {
        load_mnist(&self.dir, split).with_context(|| {
            format!(
                "loading MNIST from {} (set --data-dir or QG_DATA_DIR)",
                self.dir.display()
            )
        })
    }
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_config(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write(&out.join("config.toml"), cfg.to_toml())
}

fn write_timing(out: &Path, started: Instant) -> Result<()> {
    write(&out.join("timing.txt"), format!("wall_clock_s={:.3}\n", started.elapsed().as_secs_f64()))
}

fn model_for(cfg: &ExperimentConfig, args: &ModelArgs, data: &Data, test: &RawDataset) -> Result<Model> {
    if let Some(p) = &args.checkpoint {
        let m = load_checkpoint(p)?;
        let expected = Model::build(&cfg.arch_for(test.pixels()), cfg.binarized, 0)?;
        if m.specs() != expected.specs() {
            bail!("checkpoint {} does not match the configured architecture", p.display());
        }
        return Ok(m);
    }
    let train = data.load(Split::Train)?;
    let cache = args.cache.as_ref().map(|dir| ModelCache {
        dir: dir.clone(),
        refresh: false,
    });
    Ok(obtain_model(cfg, &train, test, cache.as_ref(), &progress)?.0)
}

fn run(cli: Cli) -> Result<()> {
    let data = Data {
        dir: cli.data_dir.unwrap_or_else(default_data_dir),
    };
    let started = Instant::now();
    match cli.command {
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve(&[])?;
            let train = data.load(Split::Train)?;
            let test = data.load(Split::Test)?;
            create_dir(&out)?;
            write_config(&out, &cfg)?;
            let id = cfg.model_id();
            let (model, log) = quantguard::experiments::train(&cfg, &train, &test, |r| {
                progress(&format!("{id}: {}", quantguard::experiments::train::format_record(r)));
            })?;
            save_checkpoint(&model, &out.join("model.dqn"))?;
            write(&out.join("train.log"), log.to_text())?;
            write_timing(&out, started)?;
            println!("wrote {}", out.join("model.dqn").display());
        }
        Command::Attack {
            cfg,
            model,
            eps,
            family,
            out,
        } => {
            let cfg = cfg.resolve(&[])?;
            let family = AttackFamily::parse(&family)?;
            let spec = AttackSpec::new(family, eps, AttackSpec::DEFAULT_ALPHA_FRACTION, cfg.seeds.attack)?;
            let test = data.load(Split::Test)?;
            let m = model_for(&cfg, &model, &data, &test)?;
            let test = limit(&test, cfg.test_samples);
            let set = adversarial_testset(&m, &cfg.pipeline(), &test, &spec)?;
            let acc = accuracy(&m, &set.inputs, &set.labels)?;
            create_dir(&out)?;
            write_config(&out, &cfg)?;
            let path = out.join("adversarial.dqa");
            save_adversarial_set(&set, &cfg.hash_bytes(), &path)?;
            write_timing(&out, started)?;
            println!(
                "{} ε={eps}: accuracy {:.2}% on {} samples; wrote {}",
                family,
                acc.accuracy_pct(),
                acc.total,
                path.display()
            );
        }
        Command::Sweep {
            cfg,
            model,
            eps,
            toml,
            out,
        } => {
            let extra: Vec<String> = eps
                .map(|mut e| {
                    // The clean row is always reported.
                    e.push(0.0);
                    e.sort_by(f32::total_cmp);
                    e.dedup();
                    let list: Vec<String> = e.iter().map(|v| format!("{v:?}")).collect();
                    vec![format!("eval_epsilons=[{}]", list.join(", "))]
                })
                .unwrap_or_default();
            let cfg = cfg.resolve(&extra)?;
            let test = data.load(Split::Test)?;
            let m = model_for(&cfg, &model, &data, &test)?;
            let mut report = sweep_report(&m, &cfg, &test)?;
            report.wall_clock_s = Some(started.elapsed().as_secs_f64());
            create_dir(&out)?;
            write_config(&out, &cfg)?;
            report.emit(&out.join("sweep.csv"), ReportFormat::Csv)?;
            if toml {
                report.emit(&out.join("sweep.toml"), ReportFormat::Toml)?;
            }
            write_timing(&out, started)?;
            print!("{}", report.to_csv());
        }
        Command::AnalyzeL1 {
            cfg,
            model,
            eps,
            samples,
            out,
        } => {
            let cfg = cfg.resolve(&[])?;
            let test = data.load(Split::Test)?;
            let m = model_for(&cfg, &model, &data, &test)?;
            let subset = test.take(samples.min(test.len()));
            let profiles = l1_profile(&m, &cfg.pipeline(), &subset, &eps)?;
            let id = cfg.model_id();
            create_dir(&out)?;
            write_config(&out, &cfg)?;
            write(&out.join("l1.csv"), profiles_csv(&id, &profiles))?;
            let summary = summary_csv(&id, &profiles);
            write(&out.join("l1-summary.csv"), &summary)?;
            write_timing(&out, started)?;
            print!("{summary}");
        }
        Command::Reproduce {
            target,
            overrides,
            seed,
            repetitions,
            workers,
            cache,
            no_cache,
            refresh,
            out,
        } => {
            let target = Target::parse(&target)?;
            let train = data.load(Split::Train)?;
            let test = data.load(Split::Test)?;
            let plan_opts = PlanOptions {
                overrides,
                seed_base: seed,
                repetitions,
            };
            let workers = workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
                .max(1);
            let opts = RunOptions {
                workers,
                cache: (!no_cache).then_some(ModelCache { dir: cache, refresh }),
                progress: &progress,
            };
            let rep = reproduce(target, &plan_opts, &train, &test, &opts)?;
            write_outputs(&rep, &out)?;
            write_timing(&out, started)?;
            print!("{}", rep.table());
            for p in output_paths(&out, target) {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
