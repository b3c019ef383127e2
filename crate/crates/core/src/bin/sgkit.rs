use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sgkit::config::ExperimentConfig;
use sgkit::experiment::{self, exit_code};
use sgkit::Result;

#[derive(Parser)]
#[command(name = "sgkit", version, about = "Surrogate-gradient training for spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set model.n_rec=128`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the initialization conditions and report per-layer values.
    InitSolve(Common),
    /// Train one network and write its history and weights.
    Train(Common),
    /// Train over a grid of values for one axis.
    Sweep(Common),
    /// Record firing, voltage and gradient statistics at initialization.
    Probe(Common),
    /// Write the configured dataset as an event file.
    Encode(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitSolve(c) => {
            let cfg = load(&c)?;
            experiment::cmd_init_solve(&cfg, &mut std::io::stdout())?;
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let h = experiment::cmd_train(&cfg)?;
            if let Some(r) = h.last() {
                println!(
                    "epochs {}: train loss {:.6}, val loss {:.6}, val mode accuracy {:.4}",
                    h.epochs.len(),
                    r.train_loss,
                    r.val_loss,
                    r.val_mode_acc
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let rows = experiment::cmd_sweep(&cfg)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} cells, {failed} failed; wrote {}", rows.len(), cfg.output_dir.display());
        }
        Command::Probe(c) => {
            let cfg = load(&c)?;
            let rows = experiment::cmd_probe(&cfg)?;
            println!("{} rows; wrote {}", rows.len(), cfg.output_dir.join("probe.csv").display());
        }
        Command::Encode(c) => {
            let cfg = load(&c)?;
            let path = experiment::cmd_encode(&cfg)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { experiment::EXIT_CONFIG } else { experiment::EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sgkit: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
