//! `nlosimg`: design, simulate, image and estimate velocities from scenario
//! files; run parameter sweeps and oracle suites.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nlosimg::scenario::{self, OracleConfig, OracleKind, RunOptions, Scenario, Stage};

#[derive(Parser)]
#[command(name = "nlosimg", version, about = "NLOS radar imaging through a modular reflector")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image pixels per resolution cell.
    #[arg(long = "grid-oversample")]
    grid_oversample: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Codebook, reflector layout and design metrics.
    Design(RunArgs),
    /// Design plus the echo tensor.
    Simulate(RunArgs),
    /// Back-projected image and per-target metrics.
    Image {
        #[command(flatten)]
        run: RunArgs,
        /// Image saved echoes (path without the .bin extension) instead of
        /// synthesizing.
        #[arg(long)]
        echoes: Option<PathBuf>,
    },
    /// Detections and velocity fits.
    EstimateVelocity(RunArgs),
    /// Parameter sweep from a sweep file.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Oracle suite: coverage_vs_closed_form, saf_vs_closed_form,
    /// gain_bruteforce or crb_montecarlo.
    Oracle {
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Names of the bundled scenarios.
    List,
}

fn run(cli: Cli) -> nlosimg::Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 || n > 4096 {
            return Err(nlosimg::Error::InvalidParameter {
                field: "threads".into(),
                reason: "must be in 1..=4096".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| nlosimg::Error::Scenario(e.to_string()))?;
    }
    let pipeline = |args: RunArgs, stage: Stage, echoes: Option<PathBuf>| -> nlosimg::Result<ExitCode> {
        let sc = Scenario::open(&args.scenario)?;
        let echoes = echoes.map(|p| {
            let dir = p.parent().map(PathBuf::from).unwrap_or_default();
            let stem = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (dir, stem)
        });
        let opts = RunOptions {
            out_dir: args.out,
            seed: args.seed,
            grid_oversample: args.grid_oversample,
            echoes,
            dry_run: false,
        };
        let rep = scenario::run_scenario(&sc, stage, &opts)?;
        for (k, v) in &rep.metrics {
            println!("{k:>28}  {v}");
        }
        println!("wrote {} files to {}", rep.files.len(), rep.out_dir.display());
        Ok(ExitCode::SUCCESS)
    };
    match cli.command {
        Command::Design(a) => pipeline(a, Stage::Design, None),
        Command::Simulate(a) => pipeline(a, Stage::Simulate, None),
        Command::Image { run, echoes } => pipeline(run, Stage::Image, echoes),
        Command::EstimateVelocity(a) => pipeline(a, Stage::EstimateVelocity, None),
        Command::Sweep { scenario, out } => {
            let out = out.unwrap_or_else(|| PathBuf::from("out/sweep"));
            let rep = scenario::run_sweep_file(&scenario, Some(&out))?;
            print!("{}", rep.to_csv());
            let failed = rep.rows.iter().filter(|r| r.result.is_nan()).count();
            if failed > 0 {
                eprintln!("{failed} sweep rows failed; see the note column");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle {
            kind,
            out,
            seed,
            cases,
            trials,
        } => {
            let kind = OracleKind::parse(&kind)?;
            let mut cfg = OracleConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(c) = cases {
                cfg.cases = c;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let rep = scenario::run_oracle(kind, &cfg)?;
            let out = out.unwrap_or_else(|| PathBuf::from("out/oracle"));
            let path = scenario::write_oracle(&rep, &out)?;
            let failed = rep.rows.iter().filter(|r| !r.passed).count();
            println!(
                "{}: {} ({} rows, {} outside tolerance, max deviation {:.3e}) -> {}",
                kind.label(),
                if rep.passed { "PASS" } else { "FAIL" },
                rep.rows.len(),
                failed,
                rep.max_deviation(),
                path.display()
            );
            Ok(if rep.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::List => {
            for (name, _) in scenario::BUNDLED {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
