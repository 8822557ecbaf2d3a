use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use ata_cli::commands::{self, GenArgs, GenKind};
use ata_cli::docs::{write_bytes, RunConfig};
use ata_cli::error::{CliError, CliResult, EXIT_USAGE};
use ata_cli::fvol::Dtype;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ata", version, about = "Patch alignment, MI measurement, solver benchmarks and training")]
struct Cli {
    /// Worker threads for clip-parallel work; ATA_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic clips with sidecars and a hashed manifest.
    Gen {
        #[arg(value_enum)]
        kind: GenKind,
        #[arg(long, short = 't', default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        height: usize,
        #[arg(long, default_value_t = 4)]
        width: usize,
        #[arg(long, short = 'c', default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o')]
        out: PathBuf,
        /// Per-frame horizontal shift for `shift`.
        #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
        dx: i64,
        /// Per-frame vertical shift for `shift`.
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        dy: i64,
        /// Number of clips for the motion kinds.
        #[arg(long, default_value_t = 1000)]
        clips: usize,
        /// Store float32 instead of float64.
        #[arg(long)]
        f32: bool,
    },
    /// Align a volume, or restore one with `--dealign PLAN`.
    Align {
        input: PathBuf,
        #[arg(long, short = 'o')]
        out: PathBuf,
        /// Where to write the plan document.
        #[arg(long, required_unless_present = "dealign", conflicts_with = "dealign")]
        plan_out: Option<PathBuf>,
        #[arg(long, value_name = "PLAN")]
        dealign: Option<PathBuf>,
    },
    /// MI between adjacent frames before and after alignment, as CSV.
    Mi {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short = 'k', default_value_t = ata_core::infotheory::DEFAULT_SYMBOLS)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
        /// Exit 4 unless alignment increases MI.
        #[arg(long)]
        check: bool,
    },
    /// Time the exact and greedy assignment solvers.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = ata_core::bench::DEFAULT_SIZES)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
        /// Exit 4 unless the exact slope is in range and above the greedy slope.
        #[arg(long)]
        check: bool,
    },
    /// Train a classifier from a TOML run configuration.
    Train {
        config: PathBuf,
        /// Exit 4 if the final validation accuracy is below this value.
        #[arg(long, value_name = "MIN_VAL_ACC")]
        check: Option<f64>,
    },
}

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    match std::env::var("ATA_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::usage(format!("ATA_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => match flag {
            Some(0) => Err(CliError::usage("--threads must be positive")),
            other => Ok(other),
        },
    }
}

fn emit(out: Option<&PathBuf>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(path) => write_bytes(path, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::data(format!("stdout: {e}"))),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Gen {
            kind,
            frames,
            height,
            width,
            channels,
            seed,
            out,
            dx,
            dy,
            clips,
            f32,
        } => {
            let manifest = commands::gen(&GenArgs {
                kind,
                t: frames,
                h: height,
                w: width,
                c: channels,
                seed,
                out: out.clone(),
                dx,
                dy,
                clips,
                dtype: if f32 { Dtype::F32 } else { Dtype::F64 },
            })?;
            eprintln!("wrote {} files to {}", manifest.files.len(), out.display());
        }
        Command::Align {
            input,
            out,
            plan_out,
            dealign,
        } => match (dealign, plan_out) {
            (Some(plan), _) => commands::dealign(&input, &out, &plan)?,
            (None, Some(plan_out)) => {
                commands::align(&input, &out, &plan_out)?;
            }
            (None, None) => return Err(CliError::usage("align needs --plan-out or --dealign")),
        },
        Command::Mi {
            inputs,
            k,
            seed,
            out,
            check,
        } => {
            let rows = commands::mi(&inputs, k, seed)?;
            emit(out.as_ref(), &commands::write_csv(&rows)?)?;
            if check {
                commands::check_mi(&rows)?;
            }
        }
        Command::Bench {
            sizes,
            reps,
            seed,
            out,
            check,
        } => {
            let report = commands::bench(&sizes, reps, seed)?;
            emit(out.as_ref(), &commands::write_csv(&report.rows)?)?;
            println!("exact slope {:.3}", report.exact_slope);
            println!("greedy slope {:.3}", report.greedy_slope);
            if check {
                commands::check_bench(&report)?;
            }
        }
        Command::Train { config, check } => {
            let cfg = RunConfig::load(&config)?;
            let rows = commands::train(&cfg, |m| {
                let val = m.val_acc.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
                eprintln!("epoch {} loss {:.4} train {:.3} val {val}", m.epoch, m.loss, m.train_acc);
            })?;
            if let Some(min) = check {
                commands::check_train(&rows, min)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
