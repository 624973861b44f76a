//! Command-line runner: resolves configuration, dispatches one pipeline
//! stage, and records a manifest that can replay it.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use doge_core::{Error, Result};

use crate::commands::{Outcome, Run};
use crate::config::RunConfig;
use crate::manifest::{unix_now, ArtifactHash, RunManifest};

/// Exit status when a rerun does not reproduce its outputs.
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "doge", version, about = "Defensive output generation lab")]
pub struct Cli {
    /// `key = value` config file, applied over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable and applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Run seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    GenCorpus,
    TrainSft,
    TrainDefense,
    Distill,
    Eval,
    GapReport,
    VerifyBounds,
    Landscape,
    /// Replay a recorded run and check its outputs bit for bit.
    Rerun { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::TrainSft => "train-sft",
            Command::TrainDefense => "train-defense",
            Command::Distill => "distill",
            Command::Eval => "eval",
            Command::GapReport => "gap-report",
            Command::VerifyBounds => "verify-bounds",
            Command::Landscape => "landscape",
            Command::Rerun { .. } => "rerun",
        }
    }
}

/// Defaults < config file < `--seed` < `--set`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.load_file(p)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    cfg.absolutize_inputs()?;
    Ok(cfg)
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{command}.manifest.json"))
}

/// Runs `command` into `out` and writes its manifest there.
pub fn execute(command: &str, cfg: &RunConfig, out: &Path) -> Result<(RunManifest, Outcome)> {
    std::fs::create_dir_all(out)?;
    let out = std::fs::canonicalize(out)?;
    let started = unix_now();
    let mut run = Run::new(cfg, &out);
    let outcome = run.dispatch(command)?;
    let inputs = run.inputs.iter().map(|p| ArtifactHash::of(p)).collect::<Result<Vec<_>>>()?;
    let outputs = run
        .outputs
        .iter()
        .map(|p| ArtifactHash::of(&out.join(p)).map(|a| ArtifactHash { path: p.clone(), ..a }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        command: command.to_string(),
        config: cfg.to_kv_text(),
        seed: cfg.seed,
        out_dir: out.clone(),
        inputs,
        outputs,
        started_unix: started,
        finished_unix: unix_now(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    manifest.save(&manifest_path(&out, command))?;
    Ok((manifest, outcome))
}

/// Replays a manifest into `out` (default: its own directory) and compares
/// every output hash with the recorded one.
pub fn rerun(manifest: &Path, out: Option<&Path>) -> Result<(Outcome, Vec<PathBuf>)> {
    let recorded = RunManifest::load(manifest)?;
    let stale = recorded.stale_inputs();
    if !stale.is_empty() {
        return Err(Error::Config(format!("inputs changed since the recorded run: {stale:?}")));
    }
    let mut cfg = RunConfig::default();
    cfg.apply_kv_text(&recorded.config)?;
    cfg.validate()?;
    let out = out.map_or_else(|| recorded.out_dir.clone(), Path::to_owned);
    let (fresh, outcome) = execute(&recorded.command, &cfg, &out)?;
    let mut mismatched = recorded.mismatched_outputs(&fresh.out_dir);
    if fresh.outputs.len() != recorded.outputs.len() {
        mismatched.push(PathBuf::from("<output list>"));
    }
    Ok((outcome, mismatched))
}

pub fn run(cli: &Cli) -> Result<i32> {
    if let Command::Rerun { manifest } = &cli.command {
        let (outcome, bad) = rerun(manifest, cli.out.as_deref())?;
        println!("{}", outcome.summary);
        if bad.is_empty() {
            println!("rerun: all outputs reproduced bit for bit");
            return Ok(outcome.status);
        }
        println!("rerun: outputs differ from the manifest: {bad:?}");
        return Ok(EXIT_MISMATCH);
    }
    let cfg = resolve_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let (_, outcome) = execute(cli.command.name(), &cfg, &out)?;
    println!("{}", outcome.summary);
    Ok(outcome.status)
}
