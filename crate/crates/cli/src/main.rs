use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use netrawalm::metrics::{render_csv, Protocol};
use netrawalm::scenario::{golden, golden_names, parse_scenario, sweep_scenario, Scenario};
use netrawalm::sim::run_with;

#[derive(Parser)]
#[command(name = "netrawalm", version, about = "Resource-aware multicast overlay simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its event log, metrics and tree dump.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        /// Overrides the scenario's protocol.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run both protocols on seeded random scenarios and print a comparison table.
    Sweep {
        /// Scenario file or bundled name supplying parameters and bandwidth.
        template: String,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32, 64])]
        counts: Vec<usize>,
        /// Seeds 0..N for every node count.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a scenario without running it.
    Validate { scenario: String },
    /// List the bundled scenarios.
    Goldens,
}

enum Failure {
    Scenario(anyhow::Error),
    Runtime(anyhow::Error),
}

fn load(arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        return parse_scenario(path).map_err(|e| Failure::Scenario(anyhow!("{arg}:\n{e}")));
    }
    golden(arg).ok_or_else(|| {
        let known: Vec<&str> = golden_names().collect();
        Failure::Scenario(anyhow!("{arg}: no such file or bundled scenario (bundled: {})", known.join(", ")))
    })
}

fn runtime<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(arg: &str, protocol: Option<Protocol>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let scenario = load(arg)?;
    let protocol = protocol.unwrap_or(scenario.parameters.protocol);
    let seed = seed.unwrap_or(scenario.parameters.seed);
    let outcome = runtime(run_with(&scenario, protocol, seed).with_context(|| format!("simulating {}", scenario.name)))?;
    runtime((|| {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write(out, "events.log", &outcome.log_text())?;
        write(out, "metrics.csv", &render_csv(&[outcome.metrics.row()]))?;
        write(out, "metrics.json", &outcome.metrics.to_json())?;
        write(out, "tree.txt", &outcome.tree_dump)
    })())?;
    let row = outcome.metrics.row();
    println!("{}", row.csv_line());
    if !outcome.quiesced {
        eprintln!("note: stopped at the end time with events pending");
    }
    Ok(())
}

fn cmd_sweep(arg: &str, counts: &[usize], seeds: u64, out: Option<&Path>) -> Result<(), Failure> {
    let template = load(arg)?;
    if counts.is_empty() || counts.contains(&0) {
        return Err(Failure::Scenario(anyhow!("node counts must be positive")));
    }
    let jobs: Vec<(usize, u64, Protocol)> = counts
        .iter()
        .flat_map(|&n| (0..seeds).flat_map(move |s| [Protocol::Netrawalm, Protocol::Nice].map(|p| (n, s, p))))
        .collect();
    let rows = runtime(
        jobs.par_iter()
            .map(|&(n, seed, protocol)| {
                let s = sweep_scenario(&template, n, seed);
                run_with(&s, protocol, seed)
                    .map(|o| o.metrics.row())
                    .with_context(|| format!("simulating {} with {protocol}", s.name))
            })
            .collect::<anyhow::Result<Vec<_>>>(),
    )?;
    let table = render_csv(&rows);
    match out {
        Some(path) => runtime(fs::write(path, table).with_context(|| format!("writing {}", path.display()))),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario, protocol, seed, out } => cmd_run(scenario, *protocol, *seed, out),
        Command::Sweep { template, counts, seeds, out } => cmd_sweep(template, counts, *seeds, out.as_deref()),
        Command::Validate { scenario } => load(scenario).map(|s| {
            println!("{}: ok ({} nodes, {} script actions)", s.name, s.node_count(), s.script.len());
        }),
        Command::Goldens => {
            golden_names().for_each(|n| println!("{n}"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Scenario(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
