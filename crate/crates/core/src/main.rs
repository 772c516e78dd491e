use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cissl::campaign::{self, CampaignOptions, RunFilter};
use cissl::config;

#[derive(Parser)]
#[command(name = "cissl", version, about = "Class-imbalanced semi-supervised learning on toy 2-D data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every dataset x algorithm x seed cell of a campaign and write the reports.
    Run {
        config: PathBuf,
        /// Restrict to `dataset/algorithm/seed`; any part may be `*`.
        #[arg(long)]
        only: Option<String>,
        /// Parallel runs (overrides CISSL_WORKERS and the config).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a campaign file and report every problem found.
    Validate { config: PathBuf },
    /// Write a built-in campaign file; `list` prints the available names.
    Preset {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf) -> Result<(config::CampaignConfig, String), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let config = config::validate_config(&text).map_err(|errs| {
        errs.0
            .iter()
            .map(|e| format!("{}: {e}", path.display()))
            .collect::<Vec<_>>()
            .join("\n")
    })?;
    Ok((config, text))
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Validate { config } => {
            let (c, _) = load(&config)?;
            let runs = c.datasets.len() * c.algorithms.len() * c.seeds.len();
            println!("{}: ok ({runs} runs)", config.display());
            Ok(true)
        }
        Command::Preset { name, out } => {
            if name == "list" {
                for (n, _) in config::PRESETS {
                    println!("{n}");
                }
                return Ok(true);
            }
            let text = config::preset_text(&name).ok_or_else(|| {
                let names: Vec<_> = config::PRESETS.iter().map(|(n, _)| *n).collect();
                format!("unknown preset {name:?}; available: {}", names.join(", "))
            })?;
            let dir = out.unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            let path = dir.join(format!("{name}.toml"));
            std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
            println!("{}", path.display());
            Ok(true)
        }
        Command::Run {
            config,
            only,
            workers,
            out,
        } => {
            let (c, text) = load(&config)?;
            let only = only
                .map(|s| RunFilter::parse(&s))
                .transpose()
                .map_err(|e| e.to_string())?;
            let options = CampaignOptions {
                output_dir: out,
                workers,
                only,
            };
            let report = campaign::run_campaign(&c, &text, &options).map_err(|e| e.to_string())?;
            for o in &report.outcomes {
                match &o.result {
                    Ok(s) => println!(
                        "{}: all {:.4} major {:.4} minor {:.4} ({:.1}s)",
                        o.key, s.student_groups.all, s.student_groups.major, s.student_groups.minor, s.wall_seconds
                    ),
                    Err(e) => eprintln!("{}: FAILED {e}", o.key),
                }
            }
            println!("reports in {}", report.output_dir.display());
            Ok(report.all_succeeded())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
