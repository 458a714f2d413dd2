//! Run directory layout: manifest, CSV tables, optional records and traces.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use bmpc_core::config::ExperimentConfig;
use bmpc_core::harness::{system_seed, Role};
use bmpc_core::regret::{RegretReport, SystemFailure};
use bmpc_core::{EpisodeRecord, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const REGRET_CSV: &str = "regret.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const EPISODES_DIR: &str = "episodes";
pub const TRACES_DIR: &str = "traces";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub git_revision: String,
    /// SHA-256 of the effective configuration in canonical TOML.
    pub config_hash: String,
    pub master_seed: u64,
    pub system_seeds: Vec<u64>,
    /// Sampled and oracle episodes share initial state and noise.
    pub paired_noise: bool,
    pub config: ExperimentConfig,
    /// Output files relative to the manifest.
    pub regret_csv: String,
    pub summary_csv: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traces_dir: Option<String>,
    /// Set once the run has finished.
    pub complete: bool,
    pub succeeded_systems: usize,
    pub failures: Vec<SystemFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cumulative_regret_exponent: Option<f64>,
}

/// Revision of the source checkout the binary was built from, if it is
/// still reachable.
pub fn git_revision() -> String {
    Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            tool: "bmpc".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_revision: git_revision(),
            config_hash: cfg.hash()?,
            master_seed: cfg.seed,
            system_seeds: (0..cfg.systems).map(|s| system_seed(cfg.seed, s)).collect(),
            paired_noise: true,
            config: cfg.clone(),
            regret_csv: REGRET_CSV.to_string(),
            summary_csv: SUMMARY_CSV.to_string(),
            episodes_dir: cfg.outputs.episodes.then(|| EPISODES_DIR.to_string()),
            traces_dir: cfg.outputs.traces.then(|| TRACES_DIR.to_string()),
            complete: false,
            succeeded_systems: 0,
            failures: Vec::new(),
            cumulative_regret_exponent: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join(MANIFEST))?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn finish(&mut self, report: &RegretReport) {
        self.complete = true;
        self.succeeded_systems = report.systems.len();
        self.failures = report.failures.clone();
        self.cumulative_regret_exponent = report.exponent();
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Sampled => "sampled",
        Role::Oracle => "oracle",
    }
}

/// Writes per-episode records and solver traces as they arrive from the
/// worker threads, one file at a time.
pub struct RecordWriter {
    dir: PathBuf,
    episodes: bool,
    traces: bool,
    lock: Mutex<()>,
}

#[derive(Serialize)]
struct EpisodePair<'a> {
    system_id: usize,
    sampled: &'a EpisodeRecord,
    oracle: &'a EpisodeRecord,
}

impl RecordWriter {
    pub fn new(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        if cfg.outputs.episodes {
            fs::create_dir_all(dir.join(EPISODES_DIR))?;
        }
        if cfg.outputs.traces {
            fs::create_dir_all(dir.join(TRACES_DIR))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            episodes: cfg.outputs.episodes,
            traces: cfg.outputs.traces,
            lock: Mutex::new(()),
        })
    }

    pub fn write(&self, system: usize, mut sampled: EpisodeRecord, mut oracle: EpisodeRecord) -> Result<()> {
        if !self.episodes && !self.traces {
            return Ok(());
        }
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let e = sampled.episode;
        if self.traces {
            for rec in [&sampled, &oracle] {
                let name = format!("system{system:04}_episode{e:04}_{}.csv", role_name(rec.role));
                let mut w = csv::Writer::from_path(self.dir.join(TRACES_DIR).join(name))?;
                w.write_record(["step", "iteration", "merit", "kkt_residual", "regularization", "accepted"])?;
                for (step, trace) in rec.solver_traces.iter().enumerate() {
                    for row in trace {
                        w.write_record([
                            step.to_string(),
                            row.iteration.to_string(),
                            row.merit.to_string(),
                            row.kkt_residual.to_string(),
                            row.regularization.to_string(),
                            row.accepted.to_string(),
                        ])?;
                    }
                }
                w.flush()?;
            }
            // Traces live in their own files.
            sampled.solver_traces.clear();
            oracle.solver_traces.clear();
        }
        if self.episodes {
            let path = self
                .dir
                .join(EPISODES_DIR)
                .join(format!("system{system:04}_episode{e:04}.json"));
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer(
                &mut w,
                &EpisodePair {
                    system_id: system,
                    sampled: &sampled,
                    oracle: &oracle,
                },
            )?;
            w.flush()?;
        }
        Ok(())
    }
}

pub fn write_tables(dir: &Path, report: &RegretReport) -> Result<()> {
    report.write_csv(BufWriter::new(File::create(dir.join(REGRET_CSV))?))?;
    report.write_summary_csv(BufWriter::new(File::create(dir.join(SUMMARY_CSV))?))?;
    Ok(())
}
