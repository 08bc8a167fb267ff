use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qprl::Error;
use qprl::experiment::{
    ConfigId, ExperimentConfig, compare, default_out_root, parse_noise, run, summary_csv, write_comparison,
};

#[derive(Parser)]
#[command(name = "qprl", version, about = "QP-based Q-learning experiments on the point-mass task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run {
        /// key = value configuration file; a run manifest is accepted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed_env: Option<u64>,
        #[arg(long)]
        seed_corruption: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config_id: Option<String>,
        /// gaussian or brownian.
        #[arg(long)]
        noise: Option<String>,
    },
    /// Summarize completed runs and their pairwise orderings.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Directory for summary.csv and pairwise.csv; the summary is printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(
    config: Option<PathBuf>,
    seed_env: Option<u64>,
    seed_corruption: Option<u64>,
    out: Option<PathBuf>,
    config_id: Option<String>,
    noise: Option<String>,
) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(id) = config_id {
        cfg.config_id = id.parse::<ConfigId>()?;
    }
    if let Some(n) = noise {
        cfg.noise = parse_noise(&n)?;
    }
    if let Some(s) = seed_env {
        cfg.seed_env = s;
    }
    if let Some(s) = seed_corruption {
        cfg.seed_corruption = s;
    }
    match out {
        Some(dir) => cfg.out = dir,
        None if config.is_none() => {
            let name = format!("{}_{}_s{}", cfg.config_id, qprl::experiment::noise_name(cfg.noise), cfg.seed_corruption);
            cfg.out = default_out_root().join(name);
        }
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::InvalidParams(_) | Error::Parse { .. })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed_env,
            seed_corruption,
            out,
            config_id,
            noise,
        } => match resolve(config, seed_env, seed_corruption, out, config_id, noise) {
            Ok(cfg) => run(&cfg).map(|art| println!("{}", art.dir.display())),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        Command::Compare { dirs, out } => compare(&dirs).and_then(|cmp| match out {
            Some(dir) => write_comparison(&cmp, &dir).map(|(s, p)| println!("{}\n{}", s.display(), p.display())),
            None => {
                print!("{}", summary_csv(&cmp));
                Ok(())
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage(&e) { ExitCode::from(2) } else { ExitCode::from(1) }
        }
    }
}
