use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedplvm::config::{parse_config_str, parse_config_with};
use fedplvm::datagen::{build_federated_dataset, write_dataset_csv};
use fedplvm::experiment::{run_experiment, run_preset, PRESETS};
use fedplvm::numerics::RngStream;
use fedplvm::Result;

#[derive(Parser)]
#[command(name = "fedplvm", version, about = "Federated prototype learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a configuration and write CSVs.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override a config key, e.g. `--set loss.alpha=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a named ablation preset.
    Preset {
        /// One of: table3, table4, table5, fig4, fig5, appendixC, appendixD, appendixE, appendixF.
        name: String,
        /// Base configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Validate a configuration and print it with defaults filled in.
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write the generated dataset of `seed` as CSV.
    DumpDataset {
        config: PathBuf,
        #[arg(long, default_value = "dataset.csv")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn stem(path: &std::path::Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string()
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, set } => {
            let cfg = parse_config_with(&config, &set)?;
            let label = stem(&config);
            let res = run_experiment(&cfg, &label, Some(&out))?;
            let (m, s) = res.summary.average_accuracy;
            println!("{label}: {} seeds, final average accuracy {m:.4} ± {s:.4}", res.logs.len());
            println!("wrote {}", out.display());
        }
        Command::Preset { name, config, out, set } => {
            let cfg = match config {
                Some(path) => parse_config_with(&path, &set)?,
                None => parse_config_str("", &set)?,
            };
            if !PRESETS.contains(&name.as_str()) {
                return Err(fedplvm::Error::UnknownPreset(format!("{name} (available: {})", PRESETS.join(", "))));
            }
            for r in run_preset(&name, &cfg, Some(&out))? {
                let (m, s) = r.summary.average_accuracy;
                println!(
                    "{:<24} avg {m:.4} ± {s:.4}  variance {:.4}  downloaded {:.2}",
                    r.label, r.summary.variance_metric.0, r.summary.mean_downloaded
                );
            }
            println!("wrote {}", out.join(format!("{name}_comparison.csv")).display());
        }
        Command::Validate { config, set } => {
            let cfg = parse_config_with(&config, &set)?;
            print!("{}", cfg.to_toml()?);
        }
        Command::DumpDataset { config, out, set } => {
            let cfg = parse_config_with(&config, &set)?;
            let ds = build_federated_dataset(
                cfg.model.num_classes,
                cfg.model.input_dim,
                &cfg.domains,
                &cfg.clients_per_domain(),
                &cfg.partition,
                &RngStream::new(cfg.seed).derive(fedplvm::federation::DATA_STREAM),
            )?;
            write_dataset_csv(&ds, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
