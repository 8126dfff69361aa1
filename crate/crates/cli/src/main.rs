mod commands;
mod config;
mod manifest;
mod plot;
mod repro;

use std::path::PathBuf;
use std::process::ExitCode;

use camalkit::error::ErrorClass;
use clap::{Parser, Subcommand, ValueEnum};

use commands::{EvalKind, Globals, StatTest, StatsArgs};
use repro::Profile;

#[derive(Parser)]
#[command(name = "camalkit", version, about = "Attention-mask alignment training and evaluation toolkit")]
struct Cli {
    /// Seed overriding the one in the config or spec file.
    #[arg(long, global = true, env = "CAMALKIT_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "CAMALKIT_OUT", default_value = "out")]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true, env = "CAMALKIT_FORCE")]
    force: bool,
    /// Worker threads for fold-level parallelism.
    #[arg(long, global = true, env = "CAMALKIT_JOBS", default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic dataset.
    GenerateData {
        /// TOML file with synthetic dataset parameters; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Also write bounding-box pseudo-masks to this directory.
        #[arg(long)]
        pseudo_masks: Option<PathBuf>,
    },
    /// Train every selected fold of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Fold subset such as `0-2` or `0,3,5-7`.
        #[arg(long)]
        folds: Option<String>,
    },
    /// Evaluate a trained run directory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(value_enum)]
        which: Which,
    },
    /// Correlate regularizer responses with controlled mask perturbations.
    PerturbStudy {
        /// Directory of binary mask PNGs; synthetic masks are generated when omitted.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Number of synthetic masks.
        #[arg(long, default_value_t = 60)]
        n: usize,
        /// Write perturbation overlay images.
        #[arg(long)]
        overlays: bool,
    },
    /// Significance tests on result files.
    Stats {
        #[arg(value_enum)]
        test: Test,
        /// First paired result file (`wsrt`) or trial-matrix CSV (`poi`).
        #[arg(long)]
        a: Option<PathBuf>,
        /// Second file, compared against `--a`.
        #[arg(long)]
        b: Option<PathBuf>,
        /// Trial-matrix CSV for `sbci`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Value column for `wsrt`; defaults to the second column.
        #[arg(long)]
        column: Option<String>,
        /// Bootstrap resamples, at least 1000.
        #[arg(long, default_value_t = camalkit::stats::DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Time attention extraction and training steps across batch sizes.
    BenchOverhead {
        #[arg(long, value_delimiter = ',', default_value = "cnn,vit")]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,4,8,16,32")]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Regenerate the benchmark end to end and check it against the acceptance criteria.
    Repro {
        #[arg(value_enum)]
        profile: ReproProfile,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Align,
    Faith,
    Accuracy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Test {
    Wsrt,
    Sbci,
    Poi,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReproProfile {
    Smoke,
    FullDesk,
}

/// Exit status for an acceptance failure in `repro full-desk`.
const EXIT_ACCEPTANCE: u8 = 1;

fn exit_code(e: &camalkit::Error) -> u8 {
    match e.class() {
        ErrorClass::Validation => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn run(cli: Cli) -> camalkit::Result<u8> {
    let g = Globals { seed: cli.seed, out: cli.out, force: cli.force, jobs: cli.jobs };
    match cli.command {
        Command::GenerateData { spec, pseudo_masks } => {
            commands::generate_data(&g, spec.as_deref(), pseudo_masks.as_deref())?;
        }
        Command::Train { config, folds } => {
            let t = commands::train(&g, &config, folds.as_deref())?;
            println!("run directory {}: trained {:?}, skipped {:?}", t.run_dir.display(), t.trained, t.skipped);
        }
        Command::Evaluate { run, which } => {
            let kind = match which {
                Which::Align => EvalKind::Align,
                Which::Faith => EvalKind::Faith,
                Which::Accuracy => EvalKind::Accuracy,
            };
            let dir = commands::evaluate(&run, kind)?;
            println!("results in {}", dir.display());
        }
        Command::PerturbStudy { masks, n, overlays } => {
            commands::perturb_study(&g, masks.as_deref(), n, overlays)?;
        }
        Command::Stats { test, a, b, input, column, resamples, level } => {
            let test = match test {
                Test::Wsrt => StatTest::Wsrt,
                Test::Sbci => StatTest::Sbci,
                Test::Poi => StatTest::Poi,
            };
            let args = StatsArgs { a: a.as_deref(), b: b.as_deref(), input: input.as_deref(), column: column.as_deref(), resamples, level };
            commands::run_stats(&g, test, &args)?;
        }
        Command::BenchOverhead { models, batch_sizes, repeats } => {
            commands::bench_overhead(&g, &models, &batch_sizes, repeats)?;
        }
        Command::Repro { profile } => {
            let profile = match profile {
                ReproProfile::Smoke => Profile::Smoke,
                ReproProfile::FullDesk => Profile::FullDesk,
            };
            let report = repro::run(&g, profile)?;
            print!("{}", report.markdown());
            if !report.missing_artifacts.is_empty() {
                eprintln!("error: {} inventory artifact(s) missing", report.missing_artifacts.len());
                return Ok(EXIT_ACCEPTANCE);
            }
            if profile == Profile::FullDesk && !report.all_passed() {
                eprintln!("error: acceptance criteria failed; see {}", g.out.join("acceptance_report.md").display());
                return Ok(EXIT_ACCEPTANCE);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
