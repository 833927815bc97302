use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use kbrw::brw::Caps;
use kbrw::experiment::{run_experiment, ExperimentError, Outcome};
use kbrw::io::{parse_counts, parse_levels, Command, ExperimentConfig, OracleTarget, SpineOp, Tilt, WalkOp};
use kbrw::model::ModelSpec;
use kbrw::replica::SEED_SCHEDULE;
use kbrw::stats::TailMode;
use kbrw::walk::RenewalMethod;
use serde_json::json;
use sha2::{Digest, Sha256};

const EXIT_CONFIG: u8 = 2;
const EXIT_TRUNCATED: u8 = 3;

#[derive(Parser)]
#[command(name = "kbrw", version, about = "Killed branching random walk experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// Model JSON document.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; `KBRW_WORKERS` takes precedence.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Sub {
    /// Run a saved experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Exponents and regime of a model.
    AnalyzeModel {
        #[command(flatten)]
        common: Common,
    },
    /// Forward simulation of killed trees.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        x: f64,
        #[arg(long, default_value = "", value_parser = levels)]
        levels: Levels,
        #[arg(long)]
        replicas: u64,
        /// `max_particles,max_generations`.
        #[arg(long, value_parser = caps)]
        caps: Option<Caps>,
        #[arg(long, value_parser = counts)]
        survival_curve: Option<Counts>,
        #[arg(long)]
        no_exploration_check: bool,
    },
    /// Tilted random walk functionals.
    Walk {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        tilt: TiltArg,
        #[arg(long, value_enum)]
        op: WalkOpArg,
        #[arg(long, default_value_t = 0.0)]
        x: f64,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        replicas: u64,
        #[arg(long, default_value_t = 1_000_000)]
        max_steps: u64,
        #[arg(long, value_parser = levels)]
        grid: Option<Levels>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Path length for `--op tanaka`.
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Spine estimators.
    Spine {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        op: SpineOpArg,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        replicas: u64,
        /// Generations for `many21` and `marginal-check`.
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, value_parser = caps)]
        caps: Option<Caps>,
        #[arg(long, default_value_t = 20_000)]
        renewal_replicas: u64,
    },
    /// Tail fits from a record CSV.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_parser = counts)]
        grid: Option<Counts>,
        /// `lo,hi`.
        #[arg(long, value_parser = levels, default_value = "100,10000")]
        range: Levels,
        #[arg(long, default_value_t = 0)]
        constants_replicas: u64,
    },
    /// Exact values by enumeration.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        x: f64,
        /// Tree functional JSON, e.g. `{"type":"count","n":3}`.
        #[arg(long, conflicts_with = "walk_functional")]
        tree_functional: Option<String>,
        /// Walk functional JSON, e.g. `{"type":"passage","t":10}`.
        #[arg(long, requires = "tilt")]
        walk_functional: Option<String>,
        #[arg(long, value_enum)]
        tilt: Option<TiltArg>,
    },
    /// Pass/fail table over the summaries below a run directory.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Clone)]
struct Levels(Vec<f64>);

#[derive(Clone)]
struct Counts(Vec<u64>);

fn levels(s: &str) -> Result<Levels, String> {
    parse_levels(s).map(Levels).map_err(|e| e.to_string())
}

fn counts(s: &str) -> Result<Counts, String> {
    parse_counts(s).map(Counts).map_err(|e| e.to_string())
}

fn caps(s: &str) -> Result<Caps, String> {
    let parts: Vec<u64> =
        s.split(',').map(|p| p.trim().parse::<u64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [p, g] if p > 0 && g > 0 => Ok(Caps { max_particles: p, max_generations: g }),
        _ => Err("expected max_particles,max_generations".into()),
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TiltArg {
    Star,
    Plus,
    Minus,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum WalkOpArg {
    Renewal,
    Cr,
    Passage,
    Tanaka,
    Overshoot,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SpineOpArg {
    Eh,
    Survival,
    Many21,
    MarginalCheck,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    VisitCount,
    LadderDuality,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    SubcriticalSlope,
    CriticalPlateau,
}

fn tilt(t: TiltArg) -> Tilt {
    match t {
        TiltArg::Star => Tilt::Star,
        TiltArg::Plus => Tilt::Plus,
        TiltArg::Minus => Tilt::Minus,
    }
}

/// A failure with its exit status.
struct Failure(u8, anyhow::Error);

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure(EXIT_CONFIG, e.into())
}

fn load_model(path: &Option<PathBuf>) -> Result<Option<ModelSpec>, Failure> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(config_error)?;
    ModelSpec::from_json(&text).with_context(|| format!("model {}", path.display())).map(Some).map_err(config_error)
}

fn workers(flag: usize) -> Result<usize, Failure> {
    match std::env::var("KBRW_WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|w| *w > 0)
            .ok_or_else(|| config_error(anyhow::anyhow!("KBRW_WORKERS = `{v}` is not a positive integer"))),
        Err(_) => Ok(flag.max(1)),
    }
}

fn build_config(sub: Sub) -> Result<ExperimentConfig, Failure> {
    let (common, command) = match sub {
        Sub::Run { config } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))
                .map_err(config_error)?;
            let mut cfg = ExperimentConfig::from_json(&text).map_err(config_error)?;
            cfg.workers = workers(cfg.workers)?;
            return Ok(cfg);
        }
        Sub::AnalyzeModel { common } => (common, Command::AnalyzeModel),
        Sub::Simulate { common, x, levels, replicas, caps, survival_curve, no_exploration_check } => (
            common,
            Command::Simulate {
                x,
                levels: levels.0,
                replicas,
                caps: caps.unwrap_or_default(),
                survival_curve: survival_curve.map(|c| c.0),
                check_exploration: !no_exploration_check,
            },
        ),
        Sub::Walk { common, tilt: t, op, x, t: level, replicas, max_steps, grid, method, steps } => (
            common,
            Command::Walk {
                tilt: tilt(t),
                op: match op {
                    WalkOpArg::Renewal => WalkOp::Renewal,
                    WalkOpArg::Cr => WalkOp::Cr,
                    WalkOpArg::Passage => WalkOp::Passage,
                    WalkOpArg::Tanaka => WalkOp::Tanaka,
                    WalkOpArg::Overshoot => WalkOp::Overshoot,
                },
                x,
                t: level,
                replicas,
                max_steps,
                grid: grid.map(|g| g.0),
                method: method.map(|m| match m {
                    MethodArg::VisitCount => RenewalMethod::VisitCount,
                    MethodArg::LadderDuality => RenewalMethod::LadderDuality,
                }),
                steps,
            },
        ),
        Sub::Spine { common, op, x, t, replicas, depth, caps, renewal_replicas } => (
            common,
            Command::Spine {
                op: match op {
                    SpineOpArg::Eh => SpineOp::Eh,
                    SpineOpArg::Survival => SpineOp::Survival,
                    SpineOpArg::Many21 => SpineOp::Many21,
                    SpineOpArg::MarginalCheck => SpineOp::MarginalCheck,
                },
                x,
                t,
                replicas,
                depth,
                caps: caps.unwrap_or_default(),
                renewal_replicas,
            },
        ),
        Sub::Estimate { common, records, mode, grid, range, constants_replicas } => {
            let [lo, hi] = range.0[..] else {
                return Err(config_error(anyhow::anyhow!("--range needs exactly two values lo,hi")));
            };
            (
                common,
                Command::Estimate {
                    records,
                    mode: mode.map(|m| match m {
                        ModeArg::SubcriticalSlope => TailMode::SubcriticalSlope,
                        ModeArg::CriticalPlateau => TailMode::CriticalPlateau,
                    }),
                    grid: grid.map(|g| g.0),
                    range: (lo, hi),
                    constants_replicas,
                },
            )
        }
        Sub::Oracle { common, x, tree_functional, walk_functional, tilt: t } => {
            let target = match (tree_functional, walk_functional, t) {
                (Some(f), None, _) => OracleTarget::Tree {
                    functional: serde_json::from_str(&f).context("--tree-functional").map_err(config_error)?,
                },
                (None, Some(f), Some(t)) => OracleTarget::Walk {
                    tilt: tilt(t),
                    functional: serde_json::from_str(&f).context("--walk-functional").map_err(config_error)?,
                },
                _ => {
                    return Err(config_error(anyhow::anyhow!(
                        "give --tree-functional, or --walk-functional with --tilt"
                    )))
                }
            };
            (common, Command::Oracle { x, target })
        }
        Sub::Report { common, run_dir } => (common, Command::Report { run_dir }),
    };
    let cfg = ExperimentConfig {
        model: load_model(&common.model)?,
        command,
        seed: common.seed,
        workers: workers(common.workers)?,
        output_dir: common.out,
    };
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_outputs(cfg: &ExperimentConfig, outcome: &Outcome) -> anyhow::Result<()> {
    let dir: &Path = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = serde_json::Map::new();
    let mut write = |name: &str, text: &str| -> anyhow::Result<()> {
        fs::write(dir.join(name), text).with_context(|| format!("writing {name}"))?;
        files.insert(name.to_string(), json!(sha256_hex(text.as_bytes())));
        Ok(())
    };
    write("config.json", &(cfg.to_json() + "\n"))?;
    write("summary.json", &outcome.summary_text())?;
    for (name, text) in &outcome.tables {
        write(name, text)?;
    }
    let manifest = json!({
        "config_hash": cfg.config_hash(),
        "code_version": env!("CARGO_PKG_VERSION"),
        "command": cfg.command.name(),
        "seed": cfg.seed,
        "seed_schedule": SEED_SCHEDULE,
        "workers": cfg.workers,
        "truncated_fraction": outcome.truncated_fraction,
        "truncation_policy": "capped trees are kept with partial counts, excluded from means and right-censored in tail tables",
        "files": files,
    });
    fs::write(dir.join("MANIFEST.json"), serde_json::to_string_pretty(&manifest)? + "\n")
        .context("writing MANIFEST.json")?;
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let cfg = build_config(cli.command)?;
    let outcome = run_experiment(&cfg).map_err(|e: ExperimentError| {
        let code = if e.is_config() { EXIT_CONFIG } else { 1 };
        Failure(code, e.into())
    })?;
    write_outputs(&cfg, &outcome).map_err(|e| Failure(1, e))?;
    // a closed stdout (e.g. piped into `head`) is not a failure; the files are written
    let _ = writeln!(std::io::stdout().lock(), "{}", outcome.summary_text().trim_end());
    if outcome.truncated_fraction > 0.5 {
        eprintln!(
            "warning: {:.1}% of replicas hit a cap; raise --caps or lower the budget",
            100.0 * outcome.truncated_fraction
        );
        return Ok(EXIT_TRUNCATED);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
