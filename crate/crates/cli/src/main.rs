//! `netlmm`: fit, test and refine mixed-effects models of network populations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Run;
use config::{ConfigFile, FitOpts, InputOpts, RefineOpts, StudyOpts, TestOpts};

#[derive(Parser)]
#[command(name = "netlmm", version, about = "Mixed-effects models for populations of weighted networks")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "NETLMM_THREADS")]
    threads: Option<usize>,
    /// TOML file with `[input]`, `[fit]`, `[test]`, `[refine]` and `[study]`
    /// tables; flags take precedence. A `run.toml` from an earlier run works.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the inputs and report their dimensions.
    Validate {
        #[command(flatten)]
        input: InputOpts,
    },
    /// Fit the model and write a fit directory.
    Fit {
        #[command(flatten)]
        input: InputOpts,
        #[command(flatten)]
        fit: FitOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cell and edge tests from a fit directory.
    Test {
        /// Fit directory written by `fit`.
        #[arg(long = "fit")]
        fit_dir: PathBuf,
        #[command(flatten)]
        test: TestOpts,
        /// Output directory (default: `<fit>/tests`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine the partition, optionally fitting and testing on independent data.
    Refine {
        #[command(flatten)]
        input: InputOpts,
        #[command(flatten)]
        fit: FitOpts,
        #[command(flatten)]
        test: TestOpts,
        #[command(flatten)]
        refine: RefineOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimator study on data generated from a spec.
    Simulate {
        #[command(flatten)]
        input: InputOpts,
        #[command(flatten)]
        fit: FitOpts,
        #[command(flatten)]
        test: TestOpts,
        #[command(flatten)]
        study: StudyOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random-split null study on a single group.
    Nullcheck {
        #[command(flatten)]
        input: InputOpts,
        #[command(flatten)]
        fit: FitOpts,
        #[command(flatten)]
        study: StudyOpts,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(file: &ConfigFile, input: Option<InputOpts>, fit: Option<FitOpts>, test: Option<TestOpts>, refine: Option<RefineOpts>, study: Option<StudyOpts>) -> ConfigFile {
    ConfigFile {
        input: input.map(|o| o.overlay(file.input.as_ref())),
        fit: fit.map(|o| o.overlay(file.fit.as_ref())),
        test: test.map(|o| o.overlay(file.test.as_ref())),
        refine: refine.map(|o| o.overlay(file.refine.as_ref())),
        study: study.map(|o| o.overlay(file.study.as_ref())),
        run: None,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: Cli) -> netlmm::Result<()> {
    let threads = match cli.threads {
        Some(0) => return Err(netlmm::Error::Validation("--threads must be positive".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| netlmm::Error::Numerical(e.to_string()))?;
    let file = match &cli.config {
        Some(p) => ConfigFile::read(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Validate { input } => commands::validate(&input.overlay(file.input.as_ref())),
        Command::Fit { input, fit, out } => {
            let run = Run::new("fit", resolve(&file, Some(input), Some(fit), None, None, None), threads);
            commands::fit(&run, &out)
        }
        Command::Test { fit_dir, test, out } => {
            let run = Run::new("test", resolve(&file, None, None, Some(test), None, None), threads);
            let out = out.unwrap_or_else(|| fit_dir.join("tests"));
            commands::test(&run, &fit_dir, &out)
        }
        Command::Refine { input, fit, test, refine, out } => {
            let run = Run::new("refine", resolve(&file, Some(input), Some(fit), Some(test), Some(refine), None), threads);
            commands::refine(&run, &out)
        }
        Command::Simulate { input, fit, test, study, out } => {
            let run = Run::new("simulate", resolve(&file, Some(input), Some(fit), Some(test), None, Some(study)), threads);
            commands::simulate(&run, &out)
        }
        Command::Nullcheck { input, fit, study, out } => {
            let run = Run::new("nullcheck", resolve(&file, Some(input), Some(fit), None, None, Some(study)), threads);
            commands::nullcheck(&run, &out)
        }
    }
}
