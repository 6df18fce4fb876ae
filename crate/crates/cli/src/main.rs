use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ruby_qsl_cli::commands::{self, Ctx};
use ruby_qsl_cli::config::{RunConfig, PRESETS};
use ruby_qsl_cli::CliError;

#[derive(Parser)]
#[command(name = "ruby-qsl", version, about = "Rydberg ruby-lattice dynamics: exact, t-VMC and noisy runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration, or `preset:<name>`.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the configuration, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Observables along the preparation protocol.
    Evolve,
    /// Rényi-2 entropies and the topological entanglement entropy.
    Entropy,
    /// Infidelity of variational schemes against exact evolution.
    Benchmark,
    /// Trajectory-averaged observables with decoherence and disorder.
    Noise,
    /// Geometry summary and JSON dump.
    Lattice,
    /// List the shipped presets.
    Presets,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let arg = cli.config.as_deref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(arg)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Presets = cli.command {
        for (name, _) in PRESETS {
            println!("{name}");
        }
        return Ok(());
    }
    let cfg = load(cli)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let ctx = Ctx::new(cfg)?;
    let outputs = match cli.command {
        Command::Evolve => commands::evolve(&ctx)?,
        Command::Entropy => commands::entropy(&ctx)?,
        Command::Benchmark => commands::benchmark(&ctx)?,
        Command::Noise => commands::noise(&ctx)?,
        Command::Lattice => {
            let (paths, summary) = commands::lattice(&ctx)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            paths
        }
        Command::Presets => unreachable!(),
    };
    for p in outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            // Bad arguments count as configuration errors.
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
