use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cislunar_pgm::dynamics::{SystemParams, DEFAULT_TOL};
use cislunar_pgm::harness::config::RunConfig;
use cislunar_pgm::harness::run::{compare, execute, scenario_only, write_artifacts, RunSummary};
use cislunar_pgm::hybrid::Mode;
use cislunar_pgm::scenario::{closure_error, default_nrho, nrho_jacobi, nrho_perilune_km, CLOSURE_LIMIT};

/// Exit status when the filter loses custody of the target.
const EXIT_CUSTODY_LOST: u8 = 2;

#[derive(Parser)]
#[command(
    name = "cislunar-pgm",
    version,
    about = "Hybrid PGM filter for angles-only cislunar orbit determination"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a pass and run the filter, writing CSV and JSON outputs.
    Run(RunArgs),
    /// Compare two run summaries (summary.json files or run directories).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Compare the common prefix when the step counts differ.
        #[arg(long)]
        truncate: bool,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the truth and measurement CSVs without filtering.
    ScenarioDump(RunArgs),
    /// Re-propagate the stored NRHO and report its closure and geometry.
    ValidateNrho,
    /// Print the effective configuration as TOML.
    ShowConfig(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `mode`.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `threads` (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: cislunar_pgm::Error| e.to_string())
}

impl RunArgs {
    /// File values over defaults, flags over file values.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_summary(path: &Path) -> Result<RunSummary> {
    let file = if path.is_dir() {
        path.join("summary.json")
    } else {
        path.to_path_buf()
    };
    RunSummary::load(&file).with_context(|| format!("reading {}", file.display()))
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    let out = execute(&cfg)?;
    write_artifacts(&cfg, &out, &cfg.output.dir)?;
    let s = &out.summary;
    println!(
        "mode {} seed {} steps {}/{} elapsed {:.1} s",
        s.mode, s.seed, s.steps_processed, s.pass_length, out.elapsed_s
    );
    if let Some(end) = s.final_std {
        println!(
            "final std: x {:.3} y {:.3} z {:.3} km, vx {:.5} vy {:.5} vz {:.5} km/s",
            end[0], end[1], end[2], end[3], end[4], end[5]
        );
    }
    println!("outputs in {}", cfg.output.dir.display());
    if s.custody_held {
        println!("custody held through the pass");
        return Ok(ExitCode::SUCCESS);
    }
    match (&s.divergence, s.first_inconsistent_step) {
        (Some(d), _) => println!("diverged at step {}: {}", d.step, d.reason),
        (None, Some(step)) => println!("truth inconsistent with the estimate from step {step}"),
        (None, None) => println!("run stopped before the end of the pass"),
    }
    Ok(ExitCode::from(EXIT_CUSTODY_LOST))
}

fn scenario_dump(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let data = scenario_only(&cfg)?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("truth.csv"), data.truth_csv())?;
    std::fs::write(dir.join("measurements.csv"), data.measurements_csv())?;
    println!("{} measurements written to {}", data.len(), dir.display());
    Ok(())
}

fn validate_nrho() -> Result<ExitCode> {
    let p = SystemParams::default();
    let (s, period) = default_nrho()?;
    let closure = closure_error(&s, period, &p, DEFAULT_TOL)?;
    println!("initial state (nondim): {:?}", s.0.as_slice());
    println!("period: {period:.16} nondim ({:.4} days)", period * p.t_star_s / 86_400.0);
    println!("closure error: {closure:.3e} (limit {CLOSURE_LIMIT:.0e})");
    println!("Jacobi constant: {:.12}", nrho_jacobi(&p)?);
    println!("perilune radius: {:.1} km", nrho_perilune_km(&p, 4000)?);
    Ok(if closure < CLOSURE_LIMIT {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(&args),
        Command::Compare { a, b, truncate, csv } => {
            let (sa, sb) = (load_summary(&a)?, load_summary(&b)?);
            let c = compare(&sa, &sb, truncate)?;
            print!("{}", c.to_table(&sa.mode.to_string(), &sb.mode.to_string()));
            if let Some(path) = csv {
                std::fs::write(&path, c.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ScenarioDump(args) => scenario_dump(&args).map(|_| ExitCode::SUCCESS),
        Command::ValidateNrho => validate_nrho(),
        Command::ShowConfig(args) => {
            print!("{}", args.resolve()?.to_toml());
            Ok(ExitCode::SUCCESS)
        }
    }
}
