//! `bmpc`: posterior-sampling MPC experiments from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Errors are reported on stderr as one JSON object.

mod output;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bmpc_core::checks;
use bmpc_core::config::ExperimentConfig;
use bmpc_core::harness::{run_learning_with, run_population_with};
use bmpc_core::regret::{bound_curve, read_regret_csv, BoundParams};
use bmpc_core::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use output::{Manifest, RecordWriter};

#[derive(Debug, Parser)]
#[command(name = "bmpc", version, about = "Posterior-sampling MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a population learning experiment.
    Run(RunArgs),
    /// Run the built-in oracle and invariant checks.
    Verify(VerifyArgs),
    /// Re-run one system of a finished run and compare an episode's regret bitwise.
    Replay(ReplayArgs),
    /// Print the regret bound curve as CSV.
    Bound(BoundArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker thread count (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; defaults to `output_dir` from the config, then `bmpc-run`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-solve iteration traces under `traces/`.
    #[arg(long)]
    trace_solver: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the results as JSON instead of one line per check.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// `manifest.json` of a finished run.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    system: usize,
    #[arg(long)]
    episode: usize,
}

#[derive(Debug, Args)]
struct BoundArgs {
    /// Bound constants as a TOML table with every field of the bound.
    #[arg(long, conflicts_with = "config")]
    params: Option<PathBuf>,
    /// Take dimensions and noise levels from this experiment configuration.
    #[arg(long, required_unless_present = "params")]
    config: Option<PathBuf>,
    /// Cost-to-go regularity constant.
    #[arg(long = "l-v", default_value_t = 1.0)]
    l_v: f64,
    /// Leading constant.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 250)]
    episodes: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    manifest: Option<PathBuf>,
}

impl Failure {
    fn usage(e: impl ToString) -> Self {
        Self {
            code: 2,
            kind: "usage",
            message: e.to_string(),
            manifest: None,
        }
    }

    fn runtime(e: impl ToString) -> Self {
        Self {
            code: 1,
            kind: "runtime",
            message: e.to_string(),
            manifest: None,
        }
    }

    fn with_manifest(mut self, path: PathBuf) -> Self {
        self.manifest = Some(path);
        self
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Parse(_) => Self {
                code: 2,
                kind: "config",
                message: e.to_string(),
                manifest: None,
            },
            other => Self::runtime(other),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::runtime(e)
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::usage(format!("cannot read {}: {io}", path.display())),
        other => other.into(),
    })
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    if args.trace_solver {
        cfg.outputs.traces = true;
    }
    let dir = args
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("bmpc-run"));
    cfg.validate()?;
    fs::create_dir_all(&dir)?;
    let manifest_path = dir.join(output::MANIFEST);

    let mut manifest = Manifest::new(&cfg)?;
    manifest.write(&dir)?;
    let writer = RecordWriter::new(&dir, &cfg)?;
    let started = Instant::now();
    log::info!(
        "running {} systems x {} episodes into {}",
        cfg.systems,
        cfg.episodes,
        dir.display()
    );
    let report = run_population_with(&cfg, |s, a, b| writer.write(s, a, b))
        .map_err(|e| Failure::from(e).with_manifest(manifest_path.clone()))?;
    output::write_tables(&dir, &report)
        .map_err(|e| Failure::from(e).with_manifest(manifest_path.clone()))?;
    manifest.finish(&report);
    manifest.write(&dir)?;
    log::info!("finished in {:.1} s", started.elapsed().as_secs_f64());

    println!(
        "{}",
        json!({
            "status": if report.failures.is_empty() { "ok" } else { "partial" },
            "manifest": manifest_path,
            "systems": report.systems.len(),
            "failures": report.failures.len(),
            "episodes": cfg.episodes,
            "cumulative_regret_exponent": manifest.cumulative_regret_exponent,
        })
    );
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "{} of {} systems failed; see the manifest",
            report.failures.len(),
            cfg.systems
        ))
        .with_manifest(manifest_path))
    }
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let results = checks::run_all(args.seed)?;
    let passed = results.iter().all(|c| c.passed);
    if args.json {
        println!(
            "{}",
            json!({ "passed": passed, "seed": args.seed, "checks": results })
        );
    } else {
        for c in &results {
            println!(
                "{} {:<20} {:.3e} (tolerance {:.1e}) {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.tolerance,
                c.detail
            );
        }
        println!(
            "{} of {} checks passed in {:.1} s",
            results.iter().filter(|c| c.passed).count(),
            results.len(),
            started.elapsed().as_secs_f64()
        );
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::runtime("verification failed"))
    }
}

fn replay(args: ReplayArgs) -> Result<(), Failure> {
    let manifest = Manifest::load(&args.manifest).map_err(|e| match e {
        Error::Io(io) => Failure::usage(format!("cannot read {}: {io}", args.manifest.display())),
        other => Failure::usage(format!("{}: {other}", args.manifest.display())),
    })?;
    let cfg = manifest.config.clone();
    cfg.validate()?;
    if cfg.hash()? != manifest.config_hash {
        return Err(Failure::usage("manifest configuration does not match its hash"));
    }
    if args.system >= cfg.systems || args.episode >= cfg.episodes {
        return Err(Failure::usage(format!(
            "system {} / episode {} outside the run ({} systems, {} episodes)",
            args.system, args.episode, cfg.systems, cfg.episodes
        )));
    }
    let dir = args.manifest.parent().unwrap_or(Path::new("."));
    let rows = read_regret_csv(fs::File::open(dir.join(&manifest.regret_csv))?)?;
    let stored = rows
        .iter()
        .find(|r| r.system_id == args.system && r.episode == args.episode)
        .ok_or_else(|| {
            Failure::runtime(format!(
                "no stored row for system {} episode {}",
                args.system, args.episode
            ))
        })?;
    let report = run_learning_with(&cfg, args.system, args.episode + 1, |_, _| Ok(()))?;
    let replayed = &report.episodes[args.episode];
    let identical = replayed.sampled_regret.to_bits() == stored.sampled_regret.to_bits()
        && replayed.cumulative_regret.to_bits() == stored.cumulative_regret.to_bits()
        && replayed.seed == stored.seed
        && replayed.status_counts.to_string() == stored.solver_status_counts;
    println!(
        "{}",
        json!({
            "system": args.system,
            "episode": args.episode,
            "seed": replayed.seed,
            "stored_regret": stored.sampled_regret,
            "replayed_regret": replayed.sampled_regret,
            "identical": identical,
        })
    );
    if identical {
        Ok(())
    } else {
        Err(Failure::runtime("replayed episode differs from the stored one")
            .with_manifest(args.manifest))
    }
}

fn bound(args: BoundArgs) -> Result<(), Failure> {
    let params = match (&args.params, &args.config) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str::<BoundParams>(&text)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(path)) => {
            let cfg = load_config(path)?;
            let bench = cfg.benchmark.build()?;
            BoundParams::for_benchmark(&bench, args.l_v, args.c)
        }
        (None, None) => return Err(Failure::usage("either --params or --config is required")),
    };
    let curve = bound_curve(&params, args.episodes)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(fs::File::create(path)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["episodes", "bound"]).map_err(Failure::runtime)?;
    for (e, v) in curve.iter().enumerate() {
        w.write_record([e.to_string(), v.to_string()])
            .map_err(Failure::runtime)?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Verify(a) => verify(a),
        Command::Replay(a) => replay(a),
        Command::Bound(a) => bound(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "{}",
                json!({
                    "status": "error",
                    "kind": f.kind,
                    "message": f.message,
                    "manifest": f.manifest,
                })
            );
            ExitCode::from(f.code)
        }
    }
}
