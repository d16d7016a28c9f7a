//! `mitodiff` command-line driver.
//!
//! Each verb resolves a [`RunConfig`], writes its outputs to `--out` (or a
//! fresh `runs/<verb>-<timestamp>-<hash>` directory) and records a
//! `run.json` manifest with the config hash, version and input checksums.
//! Exit codes: 0 success, 2 invalid input, 1 runtime failure.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::Utc;
use clap::{Args, Parser, Subcommand};

use commands::Reporter;
use config::{parse_override, Profile, RunConfig};
use error::{CliError, Result};
use manifest::{checksum, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "mitodiff", version, about = "Conditional diffusion experiments on cell patches")]
pub struct Cli {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Built-in defaults to start from.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,

    /// Override one config key, e.g. `--set dpm_steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory; defaults to a new run directory under `run_root`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    MakeToy {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        side: Option<usize>,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the conditional denoiser.
    TrainDpm {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Continue from a denoiser checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the classifier ensemble.
    TrainClf {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Comma-separated member seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Sample fixed-seed condition sweeps and score them.
    Sweep {
        #[arg(long)]
        dpm: PathBuf,
        #[arg(long)]
        clf: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        n_seeds: Option<usize>,
        #[arg(long)]
        first_seed: Option<u64>,
        /// Comma-separated conditions.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f32>>,
    },
    /// Edit real patches by partial diffusion over a grid of stop times.
    Transform {
        #[arg(long)]
        dpm: PathBuf,
        #[arg(long)]
        clf: PathBuf,
        /// Dataset directory, PNG directory or single PNG.
        #[arg(long)]
        inputs: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Comma-separated stop times.
        #[arg(long, value_delimiter = ',')]
        stops: Option<Vec<usize>>,
        #[arg(long)]
        condition: Option<f32>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the annotation HTTP service.
    Serve {
        /// Patch PNG directory or dataset directory.
        #[arg(long, env = "MITODIFF_PATCHES")]
        patches: Option<PathBuf>,
        /// Series manifest from `transform`.
        #[arg(long, env = "MITODIFF_SERIES")]
        series: Option<PathBuf>,
        /// Directory for the vote log, marks and session snapshot.
        #[arg(long, env = "MITODIFF_STATE")]
        state: PathBuf,
        #[arg(long, env = "MITODIFF_LISTEN")]
        listen: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeToy { .. } => "make-toy",
            Command::TrainDpm { .. } => "train-dpm",
            Command::TrainClf { .. } => "train-clf",
            Command::Sweep { .. } => "sweep",
            Command::Transform { .. } => "transform",
            Command::Serve { .. } => "serve",
        }
    }

    /// Dedicated flags expressed as config overrides.
    fn flag_overrides(&self) -> Vec<(String, toml::Value)> {
        fn put<T: serde::Serialize>(acc: &mut Vec<(String, toml::Value)>, key: &str, v: &Option<T>) {
            if let Some(v) = v {
                acc.push((key.into(), toml::Value::try_from(v).expect("flag value serializes")));
            }
        }
        let mut acc = Vec::new();
        match self {
            Command::MakeToy { n, seed, side, .. } => {
                put(&mut acc, "toy_n", n);
                put(&mut acc, "toy_seed", seed);
                put(&mut acc, "side", side);
            }
            Command::TrainDpm { steps, .. } => put(&mut acc, "dpm_steps", steps),
            Command::TrainClf { seeds, .. } => put(&mut acc, "clf_seeds", seeds),
            Command::Sweep { n_seeds, first_seed, grid, .. } => {
                put(&mut acc, "sweep_seeds", n_seeds);
                put(&mut acc, "sweep_first_seed", first_seed);
                put(&mut acc, "sweep_grid", grid);
            }
            Command::Transform { stops, condition, limit, .. } => {
                put(&mut acc, "transform_stops", stops);
                put(&mut acc, "transform_condition", condition);
                put(&mut acc, "transform_limit", limit);
            }
            Command::Serve { listen, .. } => put(&mut acc, "listen", listen),
        }
        acc
    }
}

impl Cli {
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        overrides.extend(self.command.flag_overrides());
        RunConfig::resolve(self.profile, self.config.as_deref(), &overrides)
    }
}

fn out_dir(explicit: &Option<PathBuf>, cfg: &RunConfig, command: &str) -> PathBuf {
    match explicit {
        Some(p) => p.clone(),
        None => {
            let stamp = Utc::now().format("%Y%m%dT%H%M%S");
            Path::new(&cfg.run_root).join(format!("{command}-{stamp}-{}", &cfg.hash()[..8]))
        }
    }
}

/// Runs one parsed invocation; returns the directory holding its outputs.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = cli.resolve_config()?;
    let log = Reporter { quiet: cli.quiet };
    let started = Utc::now();
    let name = cli.command.name();
    let mut inputs = Vec::new();

    let out = match &cli.command {
        Command::MakeToy { out, force, .. } => {
            let dir = out_dir(&out.out, &cfg, name);
            commands::make_toy(&cfg, &dir, *force, log)?;
            dir
        }
        Command::TrainDpm { data, out, resume, .. } => {
            let dir = out_dir(&out.out, &cfg, name);
            commands::create_dir(&dir)?;
            let report = commands::train_dpm(&cfg, data, &dir, resume.as_deref(), log)?;
            log.say(format!("denoiser at step {} -> {}", report.final_step, dir.display()));
            inputs.push(checksum(data)?);
            if let Some(r) = resume {
                inputs.push(checksum(r)?);
            }
            dir
        }
        Command::TrainClf { data, out, .. } => {
            let dir = out_dir(&out.out, &cfg, name);
            commands::create_dir(&dir)?;
            commands::train_clf(&cfg, data, &dir, log)?;
            inputs.push(checksum(data)?);
            dir
        }
        Command::Sweep { dpm, clf, out, .. } => {
            let dir = out_dir(&out.out, &cfg, name);
            commands::create_dir(&dir)?;
            commands::sweep(&cfg, dpm, clf, &dir, log)?;
            inputs.extend([checksum(dpm)?, checksum(clf)?]);
            dir
        }
        Command::Transform { dpm, clf, inputs: src, out, .. } => {
            let dir = out_dir(&out.out, &cfg, name);
            commands::create_dir(&dir)?;
            commands::transform(&cfg, dpm, clf, src, &dir, log)?;
            inputs.extend([checksum(dpm)?, checksum(clf)?, checksum(src)?]);
            dir
        }
        Command::Serve { patches, series, state, .. } => {
            commands::create_dir(state)?;
            let args = commands::ServeArgs {
                listen: cfg.listen.clone(),
                patches: patches.clone(),
                series: series.clone(),
                state: state.clone(),
            };
            commands::serve(&args, log)?;
            state.clone()
        }
    };

    let manifest = RunManifest {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        config: cfg,
        inputs,
        started,
        finished: Some(Utc::now()),
        outputs: commands::list_outputs(&out),
    };
    manifest.write(&out)?;
    Ok(out)
}

/// Parses arguments, runs, prints the output directory and maps errors to
/// exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(dir) => {
            if !matches!(cli.command, Command::Serve { .. }) {
                println!("{}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = match e {
                CliError::Validation(_) => "invalid input",
                CliError::Runtime(_) => "error",
            };
            eprintln!("mitodiff: {kind}: {e}");
            e.exit_code()
        }
    }
}
