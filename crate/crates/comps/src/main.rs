use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use comps::config::parse_config;
use comps::error::{Error, Result};
use comps::{formats, plot, records, runner};
use comps_core::driver::{LearnerKind, Metric};
use comps_core::env::{Family, SequenceMode};

#[derive(Parser)]
#[command(name = "comps", version, about = "Continual meta-policy search experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides experiment.seeds, e.g. 0,1,2.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Overrides experiment.learners, e.g. comps,ppotl.
        #[arg(long, value_delimiter = ',')]
        learners: Option<Vec<String>>,
        /// Overrides experiment.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot a metric from a records CSV as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// episodes_to_success or mean_return.
        #[arg(long)]
        metric: String,
        #[arg(long)]
        out: PathBuf,
        /// Episodes imputed for unsolved tasks.
        #[arg(long, default_value_t = 150)]
        episode_cap: usize,
    },
    /// Print a task manifest.
    Sequences {
        #[arg(long)]
        family: String,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seeds,
            learners,
            out,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let mut cfg = parse_config(&text)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if let Some(names) = learners {
                cfg.learners = names
                    .iter()
                    .map(|n| n.parse::<LearnerKind>())
                    .collect::<std::result::Result<_, _>>()?;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let dir = cfg.output_dir.clone();
            let output = runner::run_experiment(&cfg, &dir)?;
            print!("{}", output.summary);
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::Plot {
            csv,
            metric,
            out,
            episode_cap,
        } => {
            let metric: Metric = metric.parse()?;
            let rows = records::read_csv(&csv)?;
            plot::render_curves(&rows, metric, episode_cap, &out)
        }
        Command::Sequences { family, mode, n, seed } => {
            let family: Family = family.parse()?;
            let mode: SequenceMode = mode.parse()?;
            let tasks = runner::sequence_for(family, mode, n, seed)?;
            let mut stdout = io::stdout().lock();
            formats::write_manifest(&mut stdout, mode, &tasks)?;
            stdout.flush().map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
