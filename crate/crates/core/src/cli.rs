//! The `deep-bayo` command line.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::autodiff::Fault;
use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::experiments::{execute, sweep, write_sweep_csv, SweepGrid};
use crate::gradcheck::{run_suite, GradcheckConfig};
use crate::io::RunDir;
use crate::problems::ProblemKind;
use crate::report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "deep-bayo", version, about = "Bayesian operator networks for PDE inverse problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and analyse one experiment into a run directory.
    Run {
        /// regression-uq, sin3, heat1d, rd2d or helmholtz3d.
        experiment: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a config key, e.g. `--set train.epochs=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Overwrite the artifacts of an existing run.
        #[arg(long)]
        force: bool,
        #[arg(long, env = "DEEP_BAYO_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference verification of all derivative routes.
    Gradcheck {
        /// MLP widths, input first, e.g. `3,8,8,1`.
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [3usize, 8, 8, 1])]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        models: usize,
        /// Negative control: corrupt the tanh derivative on the tape.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Rank candidate loss weights by short training runs.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        /// Epochs per candidate.
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "DEEP_BAYO_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Summary tables over completed runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, Error> {
    if jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))
}

fn run_command(cmd: Command) -> Result<i32, Error> {
    match cmd {
        Command::Run {
            experiment,
            config,
            out,
            seed,
            mut set,
            force,
            jobs,
        } => {
            let kind = ProblemKind::parse(&experiment)?;
            if let Some(s) = seed {
                set.push(format!("seed={s}"));
            }
            let cfg = ExperimentConfig::resolve(kind, config.as_deref(), &set)?;
            let pool = pool(jobs)?;
            let mut dir = RunDir::create(&out, force)?;
            pool.install(|| execute(&cfg, &mut dir))?;
            println!("wrote {}", out.display());
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            widths,
            seed,
            models,
            inject_fault,
        } => {
            let cfg = GradcheckConfig {
                widths,
                seed,
                n_models: models,
                fault: inject_fault.then_some(Fault::TanhDerivative),
                ..Default::default()
            };
            let r = run_suite(&cfg).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Config(m),
                e => e,
            })?;
            print!("{}", r.table());
            Ok(if r.passed() { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Sweep {
            grid,
            budget,
            out,
            seed,
            jobs,
        } => {
            if budget == 0 {
                return Err(Error::Config("--budget must be >= 1".into()));
            }
            let text = std::fs::read_to_string(&grid)
                .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", grid.display())))?;
            let g = SweepGrid::from_toml(&text)?;
            let ranked = sweep(&g, budget, seed, jobs)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join("sweep.csv");
            write_sweep_csv(&path, &ranked)?;
            for (i, r) in ranked.iter().enumerate() {
                println!("{:>3}  candidate {:>3}  score {:.6e}", i + 1, r.index, r.score);
            }
            println!("wrote {}", path.display());
            Ok(EXIT_OK)
        }
        Command::Report { runs, out } => {
            let t = report::build(&runs)?;
            t.write(&out)?;
            print!("{}", t.text());
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run_command(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
