mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dinterp::sampler::{GumbelMode, SamplerKind};
use dinterp::schedule::Schedule;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "dinterp",
    version,
    about = "Masked discrete interpolants on enumerable toy data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a dataset from the config and write it as JSONL.
    GenDataset,
    /// Train a predictor; writes a checkpoint and a per-step log.
    Train,
    /// Sample from a checkpoint or from the exact oracle.
    Sample,
    /// Score a samples file against a dataset.
    Eval,
    /// Sample and score every point of an ablation grid.
    Sweep,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenDataset => "gen-dataset",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
        }
    }
}

/// Flags override config-file values.
#[derive(Debug, Args)]
struct Flags {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to `$DI_RUN_DIR` (or `runs`) plus `<command>-<timestamp>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Use the exact posterior of this dataset file as the predictor.
    #[arg(long, global = true)]
    oracle: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    samples: Option<PathBuf>,
    /// Number of chains.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    class: Option<u32>,
    /// etm, itm or mgm.
    #[arg(long, global = true)]
    kind: Option<SamplerKind>,
    #[arg(long, global = true)]
    nfe: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long = "top-p", global = true)]
    top_p: Option<f64>,
    /// Guidance strength.
    #[arg(long, global = true, allow_negative_numbers = true)]
    cfg: Option<f64>,
    /// none, linear, constant or warmup.
    #[arg(long, global = true)]
    gumbel: Option<GumbelMode>,
    #[arg(long = "gumbel-temp", global = true)]
    gumbel_temp: Option<f64>,
    #[arg(long = "no-argmax-finalize", global = true)]
    no_argmax_finalize: bool,
    /// Training schedule (and sampling schedule unless overridden).
    #[arg(long, global = true)]
    schedule: Option<Schedule>,
    #[arg(long = "sample-schedule", global = true)]
    sample_schedule: Option<Schedule>,
}

impl Flags {
    fn apply(&self, config: &mut RunConfig) {
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$flag { config.$field = v.clone().into(); })*
            };
        }
        set!(
            seed => seed,
            steps => steps,
            n => chains,
            kind => kind,
            nfe => nfe,
            temperature => temperature,
            top_p => top_p,
            cfg => cfg_omega,
            gumbel => gumbel_mode,
            gumbel_temp => gumbel_temp,
            schedule => schedule,
            oracle => oracle,
            dataset => dataset,
            checkpoint => checkpoint,
            samples => samples,
            class => class,
            sample_schedule => sample_schedule,
        );
        if self.no_argmax_finalize {
            config.argmax_finalize = false;
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cli.flags.apply(&mut config);
    if let Some(jobs) = cli.flags.jobs {
        anyhow::ensure!(jobs > 0, "invalid flag `--jobs`: must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()?;
    }
    let dir = commands::prepare_run_dir(cli.command.name(), cli.flags.out.as_deref(), &config)?;
    match cli.command {
        Command::GenDataset => commands::gen_dataset(&config, &dir),
        Command::Train => commands::train(&config, &dir),
        Command::Sample => commands::sample(&config, &dir),
        Command::Eval => commands::eval(&config, &dir),
        Command::Sweep => commands::sweep(&config, &dir),
    }
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
