use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mecp_core::experiment::{compare_modes, run_experiment, sign_test_p, write_outputs, ExperimentError};
use mecp_core::scenario::{load_scenario, Mode};

#[derive(Parser)]
#[command(name = "mecp", version, about = "Clustering protocol simulator for mobile sensor networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a scenario and write metrics (and traces).
    Run {
        scenario: PathBuf,
        /// Comma-separated seeds replacing the scenario's list.
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        trace: Option<Switch>,
    },
    /// Paired comparison of protocol modes over the scenario's seeds.
    Compare {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<Mode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a scenario file.
    Validate { scenario: PathBuf },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_INVARIANT: u8 = 2;

fn fail(e: ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_invariant() { EXIT_INVARIANT } else { EXIT_CONFIG })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { scenario } => match load_scenario(&scenario) {
            Ok(cfg) => {
                println!("ok: {} nodes, {} rounds, {} seeds", cfg.node_count, cfg.rounds, cfg.seeds.len());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Run {
            scenario,
            seed_override,
            mode,
            out,
            trace,
        } => {
            let mut cfg = match load_scenario(&scenario) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(seeds) = seed_override {
                if seeds.is_empty() {
                    eprintln!("error: --seed-override needs at least one seed");
                    return ExitCode::from(EXIT_CONFIG);
                }
                cfg.seeds = seeds;
            }
            if let Some(m) = mode {
                cfg = cfg.with_mode(m);
            }
            if let Some(t) = trace {
                cfg.output.trace = matches!(t, Switch::On);
            }
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
            let runs = match run_experiment(&cfg) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            match write_outputs(&dir, &runs) {
                Ok(files) => {
                    for run in &runs {
                        println!(
                            "seed {}: delivery {:.4}, aggregate delivery {:.4}",
                            run.seed,
                            run.delivery_ratio(),
                            run.aggregate_delivery_ratio()
                        );
                    }
                    for f in files {
                        println!("wrote {}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Compare { scenario, modes, out } => {
            let cfg = match load_scenario(&scenario) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let cmp = match compare_modes(&cfg, &modes) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
            let path = dir.join("comparison.csv");
            let written = std::fs::create_dir_all(&dir)
                .and_then(|_| std::fs::File::create(&path))
                .and_then(|f| cmp.write_csv(std::io::BufWriter::new(f)));
            if let Err(e) = written {
                return fail(ExperimentError::Io { path, source: e });
            }
            for (i, m) in cmp.modes.iter().enumerate() {
                println!("{m}: mean delivery {:.4}", cmp.mean_delivery(i));
            }
            for i in 1..cmp.modes.len() {
                let p = sign_test_p(&cmp.paired_differences(0, i));
                println!("sign test {} > {}: p = {p:.4}", cmp.modes[0], cmp.modes[i]);
            }
            println!("wrote {}", path.display());
            ExitCode::SUCCESS
        }
    }
}
