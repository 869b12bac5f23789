use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use spmtl::data::write_csv_dataset;
use spmtl::experiment::{self, RunConfig};
use spmtl::Error;

#[derive(Parser)]
#[command(name = "spmtl", version, about = "Self-paced multitask learning experiments")]
struct Cli {
    /// Worker threads (overrides the config).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for `run`, output file for `gen`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Syn1,
    Syn2,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run { config: PathBuf },
    /// Check a config and report every problem found.
    Validate { config: PathBuf },
    /// Write a synthetic dataset as CSV.
    Gen { generator: Generator },
}

fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::Dimension { .. } => "dimension",
        Error::Invalid(_) => "invalid",
        Error::Singular { .. } => "singular",
        Error::NotPsd { .. } => "not_psd",
        Error::NoConvergence { .. } => "no_convergence",
        Error::Degenerate(_) => "degenerate",
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
    };
    serde_json::json!({ "error": kind, "message": e.to_string() }).to_string()
}

fn load(cli: &Cli, path: &Path) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config } => load(&cli, config).and_then(|cfg| {
            let res = experiment::run(&cfg)?;
            for a in &res.algorithms {
                println!("{:<8} {} {:.4} ± {:.4}", a.name, res.metric, a.summary.mean, a.summary.std_error);
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(true)
        }),
        Command::Validate { config } => load(&cli, config).map(|cfg| {
            let findings = cfg.findings();
            if findings.is_empty() {
                println!("ok");
            }
            for f in &findings {
                println!("{f}");
            }
            findings.is_empty()
        }),
        Command::Gen { generator } => {
            let which = match generator {
                Generator::Syn1 => "syn1",
                Generator::Syn2 => "syn2",
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("{which}.csv")));
            experiment::generate(which, cli.seed.unwrap_or(0))
                .and_then(|data| write_csv_dataset(&data, &out))
                .map(|()| {
                    println!("wrote {}", out.display());
                    true
                })
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
