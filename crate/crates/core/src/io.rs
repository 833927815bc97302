//! Text formats of the experiment harness: number lists, per-tree record
//! tables and experiment configs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::brw::{Caps, TreeRow};
use crate::model::{ModelError, ModelSpec};
use crate::oracle::{TreeFunctional, WalkFunctional};
use crate::stats::TailMode;
use crate::walk::RenewalMethod;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("bad list `{input}`: {message}")]
    List { input: String, message: String },
    #[error("record table, line {line}: {message}")]
    Record { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn list_err(input: &str, message: impl Into<String>) -> IoError {
    IoError::List { input: input.chars().take(80).collect(), message: message.into() }
}

/// Comma-separated finite reals, strictly increasing. Blank input is the empty list.
pub fn parse_levels(input: &str) -> Result<Vec<f64>, IoError> {
    let mut out: Vec<f64> = Vec::new();
    for item in input.split(',').map(str::trim) {
        if item.is_empty() {
            if input.trim().is_empty() {
                break;
            }
            return Err(list_err(input, "empty item"));
        }
        let v: f64 = item.parse().map_err(|_| list_err(input, format!("`{item}` is not a number")))?;
        if !v.is_finite() {
            return Err(list_err(input, format!("`{item}` is not finite")));
        }
        if out.last().is_some_and(|p| v <= *p) {
            return Err(list_err(input, "values must be strictly increasing"));
        }
        out.push(v);
    }
    Ok(out)
}

/// Comma-separated positive integers, strictly increasing.
pub fn parse_counts(input: &str) -> Result<Vec<u64>, IoError> {
    let mut out: Vec<u64> = Vec::new();
    for item in input.split(',').map(str::trim) {
        let v: u64 = item.parse().map_err(|_| list_err(input, format!("`{item}` is not a positive integer")))?;
        if v == 0 || out.last().is_some_and(|p| v <= *p) {
            return Err(list_err(input, "values must be positive and strictly increasing"));
        }
        out.push(v);
    }
    Ok(out)
}

/// Per-tree rows together with the probe levels they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordTable {
    pub levels: Vec<f64>,
    pub rows: Vec<TreeRow>,
}

fn level_column(l: f64) -> String {
    format!("h_{l}")
}

/// CSV with header `replica,z,leaves,h_<L>...,truncated`.
pub fn write_tree_rows<W: std::io::Write>(w: W, table: &RecordTable) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["replica".to_string(), "z".into(), "leaves".into()];
    header.extend(table.levels.iter().map(|l| level_column(*l)));
    header.push("truncated".into());
    let csv_err = |e: csv::Error| IoError::Io(std::io::Error::other(e));
    out.write_record(&header).map_err(csv_err)?;
    for r in &table.rows {
        let mut rec = vec![r.replica.to_string(), r.z.to_string(), r.leaves.to_string()];
        rec.extend(r.h.iter().map(u64::to_string));
        rec.push(if r.truncated { "1" } else { "0" }.into());
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tree_rows<R: std::io::Read>(r: R) -> Result<RecordTable, IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr.headers().map_err(|e| IoError::Record { line: 1, message: e.to_string() })?.clone();
    let k = header.len();
    let bad_header = |m: &str| IoError::Record { line: 1, message: m.to_string() };
    if k < 4 || &header[0] != "replica" || &header[1] != "z" || &header[2] != "leaves" || &header[k - 1] != "truncated"
    {
        return Err(bad_header("expected replica,z,leaves,h_<level>...,truncated"));
    }
    let mut levels = Vec::with_capacity(k - 4);
    for col in header.iter().take(k - 1).skip(3) {
        let l = col
            .strip_prefix("h_")
            .and_then(|s| s.parse::<f64>().ok())
            .filter(|l| l.is_finite())
            .ok_or_else(|| bad_header(&format!("bad level column `{col}`")))?;
        if levels.last().is_some_and(|p| l <= *p) {
            return Err(bad_header("level columns must be strictly increasing"));
        }
        levels.push(l);
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| IoError::Record { line, message: e.to_string() })?;
        let int = |j: usize| -> Result<u64, IoError> {
            rec[j].trim().parse().map_err(|_| IoError::Record {
                line,
                message: format!("column `{}`: `{}` is not a count", &header[j], &rec[j]),
            })
        };
        let truncated = match rec[k - 1].trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => return Err(IoError::Record { line, message: format!("truncated flag `{other}`") }),
        };
        let row = TreeRow {
            replica: int(0)?,
            z: int(1)?,
            leaves: int(2)?,
            h: (3..k - 1).map(int).collect::<Result<_, _>>()?,
            truncated,
        };
        if row.z == 0 {
            return Err(IoError::Record { line, message: "z must be at least 1".into() });
        }
        rows.push(row);
    }
    Ok(RecordTable { levels, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tilt {
    Star,
    Plus,
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkOp {
    Renewal,
    Cr,
    Passage,
    Tanaka,
    Overshoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpineOp {
    Eh,
    Survival,
    Many21,
    MarginalCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleTarget {
    Tree { functional: TreeFunctional },
    Walk { tilt: Tilt, functional: WalkFunctional },
}

fn default_max_steps() -> u64 {
    1_000_000
}

fn default_true() -> bool {
    true
}

fn default_depth() -> usize {
    2
}

fn default_tanaka_steps() -> usize {
    10
}

fn default_renewal_replicas() -> u64 {
    20_000
}

fn default_range() -> (f64, f64) {
    (100.0, 10_000.0)
}

/// A subcommand with its flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Command {
    AnalyzeModel,
    Simulate {
        x: f64,
        #[serde(default)]
        levels: Vec<f64>,
        replicas: u64,
        #[serde(default)]
        caps: Caps,
        #[serde(default)]
        survival_curve: Option<Vec<u64>>,
        #[serde(default = "default_true")]
        check_exploration: bool,
    },
    Walk {
        tilt: Tilt,
        op: WalkOp,
        #[serde(default)]
        x: f64,
        t: f64,
        replicas: u64,
        #[serde(default = "default_max_steps")]
        max_steps: u64,
        #[serde(default)]
        grid: Option<Vec<f64>>,
        #[serde(default)]
        method: Option<RenewalMethod>,
        #[serde(default = "default_tanaka_steps")]
        steps: usize,
    },
    Spine {
        op: SpineOp,
        x: f64,
        t: f64,
        replicas: u64,
        #[serde(default = "default_depth")]
        depth: usize,
        #[serde(default)]
        caps: Caps,
        #[serde(default = "default_renewal_replicas")]
        renewal_replicas: u64,
    },
    Estimate {
        records: PathBuf,
        #[serde(default)]
        mode: Option<TailMode>,
        #[serde(default)]
        grid: Option<Vec<u64>>,
        #[serde(default = "default_range")]
        range: (f64, f64),
        #[serde(default)]
        constants_replicas: u64,
    },
    Oracle {
        x: f64,
        target: OracleTarget,
    },
    Report {
        run_dir: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::AnalyzeModel => "analyze-model",
            Command::Simulate { .. } => "simulate",
            Command::Walk { .. } => "walk",
            Command::Spine { .. } => "spine",
            Command::Estimate { .. } => "estimate",
            Command::Oracle { .. } => "oracle",
            Command::Report { .. } => "report",
        }
    }

    pub fn needs_model(&self) -> bool {
        !matches!(self, Command::Report { .. })
    }
}

fn default_workers() -> usize {
    1
}

/// One reproducible run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: Option<ModelSpec>,
    pub command: Command,
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub output_dir: PathBuf,
}

fn prefix_model_error(e: ModelError) -> IoError {
    match e {
        ModelError::Schema { path, message } => {
            IoError::Schema { path: if path == "." { "model".into() } else { format!("model.{path}") }, message }
        }
        other => IoError::Schema { path: "model".into(), message: other.to_string() },
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    model: Option<Value>,
    command: Command,
    seed: u64,
    #[serde(default = "default_workers")]
    workers: usize,
    output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses a config document; errors carry the JSON path of the offending field.
    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| IoError::Schema { path: e.path().to_string(), message: e.inner().to_string() })?;
        let model = match raw.model {
            Some(v) => Some(ModelSpec::from_json(&v.to_string()).map_err(prefix_model_error)?),
            None => None,
        };
        let cfg = ExperimentConfig {
            model,
            command: raw.command,
            seed: raw.seed,
            workers: raw.workers,
            output_dir: raw.output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let schema = |path: &str, m: &str| IoError::Schema { path: path.into(), message: m.into() };
        if self.command.needs_model() && self.model.is_none() {
            return Err(schema("model", &format!("`{}` needs a model", self.command.name())));
        }
        match &self.command {
            Command::Simulate { levels, survival_curve, replicas, .. } => {
                if levels.windows(2).any(|w| !(w[0] < w[1])) || levels.iter().any(|l| !l.is_finite()) {
                    return Err(schema("command.levels", "levels must be finite and strictly increasing"));
                }
                if let Some(g) = survival_curve {
                    if g.is_empty() || g[0] == 0 || g.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(schema("command.survival_curve", "grid must be positive and strictly increasing"));
                    }
                }
                if *replicas == 0 {
                    return Err(schema("command.replicas", "need at least one replica"));
                }
            }
            Command::Walk { replicas, .. } | Command::Spine { replicas, .. } if *replicas == 0 => {
                return Err(schema("command.replicas", "need at least one replica"));
            }
            Command::Estimate { range, .. } if !(range.0 < range.1) => {
                return Err(schema("command.range", "need lo < hi"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical config with `workers` and `output_dir`
    /// blanked, since neither affects results.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&c).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
