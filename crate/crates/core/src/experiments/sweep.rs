use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::limit;
use crate::attacks::{evaluate_attack, AttackFamily, AttackSpec, QuantizerGradient};
use crate::data::RawDataset;
use crate::error::{Error, Result};
use crate::network::Model;

/// Column order of the CSV report.
pub const CSV_HEADER: &str = "model_id,input_bits,binarized,attack,epsilon,accuracy_pct,n_samples";

/// Name recorded as `generator` in report metadata.
pub const GENERATOR: &str = concat!("quantguard ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model_id: String,
    pub input_bits: u8,
    pub binarized: bool,
    pub attack: AttackFamily,
    pub epsilon: f32,
    pub accuracy_pct: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    /// TOML with `[[metadata]]` and `[[rows]]` tables.
    Toml,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> ReportFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => ReportFormat::Toml,
            _ => ReportFormat::Csv,
        }
    }
}

/// Accuracy rows plus ordered `key=value` metadata. `config_hash` is always
/// the first metadata key.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub metadata: Vec<(String, String)>,
    pub rows: Vec<SweepRow>,
    /// Elapsed seconds. Not emitted by the deterministic formats.
    pub wall_clock_s: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct MetaEntry {
    key: String,
    value: String,
}

#[derive(Serialize, Deserialize)]
struct ReportDoc {
    metadata: Vec<MetaEntry>,
    rows: Vec<SweepRow>,
}

fn report_err(e: impl std::fmt::Display) -> Error {
    Error::Report(e.to_string())
}

impl SweepReport {
    pub fn new(config_hash: &str, rows: Vec<SweepRow>) -> Self {
        SweepReport {
            metadata: vec![
                ("config_hash".into(), config_hash.into()),
                ("generator".into(), GENERATOR.into()),
                ("quantizer_gradient".into(), QuantizerGradient::StraightThrough.to_string()),
            ],
            rows,
            wall_clock_s: None,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.push((key.into(), value.to_string()));
    }

    /// Rows of one model in ε order.
    pub fn model_rows<'a>(&'a self, model_id: &'a str) -> impl Iterator<Item = &'a SweepRow> + 'a {
        self.rows.iter().filter(move |r| r.model_id == model_id)
    }

    /// Accuracy of `model_id` at `epsilon`.
    pub fn accuracy(&self, model_id: &str, epsilon: f32) -> Option<f64> {
        self.model_rows(model_id)
            .find(|r| r.epsilon == epsilon)
            .map(|r| r.accuracy_pct)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("# {k}={v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory CSV write");
        }
        if self.rows.is_empty() {
            out.push_str(CSV_HEADER);
            out.push('\n');
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("UTF-8 CSV"));
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let metadata = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .map(|l| {
                l.trim_start_matches('#')
                    .trim_start()
                    .split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Report(format!("metadata line {l:?} is not `# key=value`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(report_err)?.iter().collect::<Vec<_>>().join(",");
        if header != CSV_HEADER {
            return Err(Error::Report(format!("unexpected CSV header {header:?}")));
        }
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>().map_err(report_err)?;
        Ok(SweepReport {
            metadata,
            rows,
            wall_clock_s: None,
        })
    }

    pub fn to_toml(&self) -> String {
        let doc = ReportDoc {
            metadata: self
                .metadata
                .iter()
                .map(|(key, value)| MetaEntry {
                    key: key.clone(),
                    value: value.clone(),
                })
                .collect(),
            rows: self.rows.clone(),
        };
        toml::to_string(&doc).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: ReportDoc = toml::from_str(text).map_err(report_err)?;
        Ok(SweepReport {
            metadata: doc.metadata.into_iter().map(|m| (m.key, m.value)).collect(),
            rows: doc.rows,
            wall_clock_s: None,
        })
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Toml => self.to_toml(),
        }
    }

    /// Writes the report to `path`.
    pub fn emit(&self, path: &Path, format: ReportFormat) -> Result<()> {
        fs::write(path, self.render(format)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match ReportFormat::from_path(path) {
            ReportFormat::Csv => Self::from_csv(&text),
            ReportFormat::Toml => Self::from_toml(&text),
        }
    }
}

/// One accuracy row per ε over the whole of `test_set`, ascending in ε.
/// The ε = 0 row is the clean evaluation and is labeled `none`.
pub fn sweep(
    model: &Model,
    cfg: &ExperimentConfig,
    test_set: &RawDataset,
    epsilons: &[f32],
    family: AttackFamily,
) -> Result<Vec<SweepRow>> {
    let mut eps = epsilons.to_vec();
    if eps.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::InvalidArgument(format!("epsilons must be finite and >= 0, got {eps:?}")));
    }
    eps.sort_by(f32::total_cmp);
    eps.dedup();
    let pipeline = cfg.pipeline();
    let model_id = cfg.model_id();
    eps.into_iter()
        .map(|e| {
            let spec = if e == 0.0 {
                AttackSpec::none()
            } else {
                AttackSpec::new(family, e, AttackSpec::DEFAULT_ALPHA_FRACTION, cfg.seeds.attack)?
            };
            let eval = evaluate_attack(model, &pipeline, test_set, &spec)?;
            Ok(SweepRow {
                model_id: model_id.clone(),
                input_bits: cfg.input_bits.get(),
                binarized: cfg.binarized,
                attack: spec.family,
                epsilon: e,
                accuracy_pct: eval.accuracy_pct(),
                n_samples: eval.total,
            })
        })
        .collect()
}

/// Sweeps `cfg.eval_epsilons` with `cfg.eval_attack` over the configured
/// test subset and wraps the rows with the run's metadata.
pub fn sweep_report(model: &Model, cfg: &ExperimentConfig, test_set: &RawDataset) -> Result<SweepReport> {
    let test_set = limit(test_set, cfg.test_samples);
    let rows = sweep(model, cfg, &test_set, &cfg.eval_epsilons, cfg.eval_attack)?;
    let mut report = SweepReport::new(&cfg.hash(), rows);
    report.push_meta("seeds", seeds_string(cfg));
    report.push_meta("epochs", cfg.epochs);
    Ok(report)
}

pub(crate) fn seeds_string(cfg: &ExperimentConfig) -> String {
    let s = cfg.seeds;
    format!("init:{}/shuffle:{}/attack:{}", s.init, s.shuffle, s.attack)
}
