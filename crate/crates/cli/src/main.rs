use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use isochron::par::{init_pool, Exec};
use isochron_cli::{load_config, output_root, CliError, CliResult, Outcome, Session};

/// Phase reduction and Itô ledger checks for travelling waves.
#[derive(Parser)]
#[command(name = "isochron", version)]
struct Cli {
    /// Config file, or one of the bundled names (nagumo_wave, amari_bump, oracle_sl).
    #[arg(long, short, global = true, default_value = "nagumo_wave")]
    config: String,
    /// Output root for run folders.
    #[arg(long, global = true, env = "ISOCHRON_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (all cores when omitted).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run the sequential path.
    #[arg(long, global = true)]
    sequential: bool,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the travelling wave and write the family.
    FindWave,
    /// Phase and phase gradient of a state.
    Isochron {
        /// Whitespace or comma separated coefficients or grid values.
        #[arg(long)]
        state: PathBuf,
        /// wave.txt or a find-wave folder.
        #[arg(long)]
        wave: Option<PathBuf>,
    },
    /// Sample paths of the stochastic equation.
    Simulate,
    /// Residual sweep, martingale checks and the increment partition.
    ItoCheck,
    /// Truncated trace sums of flow and phase derivatives.
    Traces,
    /// Evaluate the standing hypotheses on the configured problem.
    Audit,
}

fn run(cli: Cli) -> CliResult<Outcome> {
    let mut cfg = load_config(&cli.config)?;
    if let Some(t) = cli.threads {
        cfg.run.threads = Some(t);
    }
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    cfg.validate().map_err(CliError::from)?;
    if let Some(t) = cfg.run.threads {
        init_pool(t);
    }
    let root = output_root(cli.out.as_deref(), &cfg);
    let mut session = Session::new(cfg, root);
    if cli.sequential {
        session.exec = Exec::Sequential;
    }
    match &cli.command {
        Command::FindWave => session.find_wave(),
        Command::Isochron { state, wave } => session.isochron(wave.as_deref(), state),
        Command::Simulate => session.simulate(),
        Command::ItoCheck => session.ito_check(),
        Command::Traces => session.traces(),
        Command::Audit => session.audit(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(o) => {
            print!("{}", o.summary);
            println!("run folder: {}", o.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("isochron: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
