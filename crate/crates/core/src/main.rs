use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pategen::run::{eval_files, generate_run, report_run, train_run};
use pategen::training::TrainConfig;

#[derive(Parser)]
#[command(name = "pategen", version, about = "Differentially private tabular data synthesis")]
struct Cli {
    /// Random seed. For `train` it overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label column of the data (default: `label` if present).
        #[arg(long)]
        label_column: Option<String>,
        /// Write every vote histogram to RUN/tally.csv.
        #[arg(long)]
        dump_tally: bool,
    },
    /// Sample records from a trained run.
    Generate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the final (ε, δ) and the per-query cost table.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Train on synthetic records, test on real ones; prints JSON.
    Eval {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        label_column: Option<String>,
    },
}

fn run(cli: Cli) -> pategen::Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            label_column,
            dump_tally,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg = TrainConfig::parse(&text)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let result = train_run(&cfg, &data, label_column.as_deref(), &out, dump_tally)?;
            let eps = result.report.final_.epsilon.unwrap_or(f64::INFINITY);
            eprintln!(
                "trained {} iterations; epsilon = {eps}, delta = {}",
                result.state.iteration, cfg.delta
            );
        }
        Command::Generate { run, count, out } => {
            generate_run(&run, count, &out, cli.seed.unwrap_or(0))?;
        }
        Command::Report { run } => {
            let text = report_run(&run)?;
            let mut out = std::io::stdout().lock();
            if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
        Command::Eval {
            synthetic,
            real,
            label_column,
        } => {
            let report = eval_files(&synthetic, &real, label_column.as_deref(), cli.seed.unwrap_or(0))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
