//! Argument parsing and dispatch for the `eac` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use eac_core::data::synth_stream;
use eac_core::verify::{gradcheck_suite, DEFAULT_SEEDS, GRADCHECK_TOL};

use crate::analyze::{analyze, AnalyzeRequest, What};
use crate::error::{CliError, Result};
use crate::io;
use crate::runner::{self, DataSource, RunRequest};
use crate::synth::parse_synth;

#[derive(Parser, Debug)]
#[command(name = "eac", version, about = "Continual spatio-temporal forecasting with an expanding prompt pool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate a scheme over a stream for every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stream manifest (JSON).
        #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
        data: Option<PathBuf>,
        /// Inline synthetic stream, e.g. `n0=40,growth=10,periods=3,T=2000`.
        #[arg(long)]
        synth: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Comma separated seeds, replacing those of the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Draw the few-shot subset uniformly instead of taking a prefix.
        #[arg(long)]
        few_shot_random: bool,
    },
    /// Heterogeneity, spectrum and projection analyses of pools or matrices.
    Analyze {
        #[arg(long, value_enum)]
        what: What,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Prompt matrix paired with `--matrix`.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 0.9)]
        epsilon: f64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use truncated SVD factors in place of random projections.
        #[arg(long)]
        oracle: bool,
        /// Skip the cross-term neutralized variant of `prop1`.
        #[arg(long)]
        raw_only: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive and the backbone.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
        /// Scale the gradients of one tape op, to see the check fail.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write a synthetic stream to disk.
    Synth {
        #[arg(long, default_value = "")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Run { config, data, synth, out, seeds, few_shot_random } => {
            let data = match (data, synth) {
                (Some(path), _) => DataSource::Manifest(path),
                (None, Some(spec)) => DataSource::Synth(parse_synth(&spec)?),
                (None, None) => return Err(CliError::Config("one of --data or --synth is required".into())),
            };
            let req = RunRequest { config, data, out, seeds, few_shot_random, workers: runner::workers_from_env()? };
            let (manifest, report) = runner::run(&req)?;
            print!("{}", runner::render_table(&report));
            println!("{} seed(s) in {:.1}s, reports in {}", manifest.seed_reports.len(), manifest.wall_seconds, req.out.display());
            Ok(0)
        }
        Command::Analyze { what, pool, matrix, prompt, k, epsilon, trials, seed, oracle, raw_only, out } => {
            let req = AnalyzeRequest { what, pool, matrix, prompt, k, epsilon, trials, seed, oracle, neutralize: !raw_only, out };
            let done = analyze(&req)?;
            println!("{}", done.summary);
            println!("wrote {} and {}", done.json.display(), done.csv.display());
            Ok(0)
        }
        Command::Gradcheck { seeds, corrupt } => {
            // the tape keys ops by static name; one leak per process is fine
            let corrupt: Option<&'static str> = corrupt.map(|c| &*Box::leak(c.into_boxed_str()));
            let rows = gradcheck_suite(seeds, corrupt)?;
            println!("{:<22}{:>7}{:>16}{:>8}", "check", "seeds", "max rel err", "");
            for r in &rows {
                println!("{:<22}{:>7}{:>16.3e}{:>8}", r.name, r.seeds, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if failed.is_empty() {
                Ok(0)
            } else {
                Err(CliError::Numerical(format!("gradient check above {GRADCHECK_TOL:e} for {}", failed.join(", "))))
            }
        }
        Command::Synth { spec, out } => {
            let spec = parse_synth(&spec)?;
            let stream = synth_stream(&spec)?;
            let path = io::write_stream(&out, &stream, spec.threshold)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
    }
}
