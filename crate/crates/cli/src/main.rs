use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fecsim::config::Config;
use fecsim::experiment::{analyze, run_sweep, run_table1, simulate, write_table1_csv, Table1Params};
use fecsim::metrics::write_stats_csv;
use fecsim::sim::{write_records_csv, Stability};

#[derive(Parser)]
#[command(name = "fecsim", version, about = "Coded-request proxy simulator and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Capacities, service delays and backlog thresholds for the configured classes.
    Analyze(Common),
    /// Run one simulation and write its delay statistics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write per-request records next to --out (`<stem>.records.csv`).
        #[arg(long, requires = "out")]
        records: bool,
    },
    /// Sweep arrival rates over schedulers and seeds.
    Sweep(Common),
    /// Relative error of the delay estimate against simulation over a grid of codes, pools and policies.
    Table1 {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Requests simulated per grid point.
        #[arg(long, default_value_t = fecsim::sim::DEFAULT_HORIZON)]
        requests: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg =
            Config::from_path(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        Ok(cfg)
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}.csv"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(common) => {
            let cfg = common.load()?;
            let report = analyze(&cfg.sim.classes, &cfg.sim.sys, cfg.sim.policy)?;
            match &common.out {
                Some(out) => {
                    let mut w = sink(Some(out))?;
                    report.write_codes_csv(&mut w)?;
                    w.flush()?;
                    if report.curve.is_ok() {
                        let mut w = sink(Some(&sibling(out, "curve")))?;
                        report.write_curve_csv(&mut w)?;
                        w.flush()?;
                    }
                }
                None => {
                    let mut w = sink(None)?;
                    report.write_codes_csv(&mut w)?;
                    if report.curve.is_ok() {
                        writeln!(w)?;
                        report.write_curve_csv(&mut w)?;
                    }
                    w.flush()?;
                }
            }
            if let Err(why) = &report.curve {
                if cfg.sim.classes.len() > 1 {
                    eprintln!("good-code curve unavailable: {why}");
                }
            }
        }
        Command::Simulate { common, records } => {
            let cfg = common.load()?;
            let report = simulate(&cfg.sim)?;
            if report.stability == Stability::Unstable {
                eprintln!("warning: request backlog kept growing; the load looks unstable");
            }
            let mut w = sink(common.out.as_deref())?;
            write_stats_csv(std::slice::from_ref(&report.row), &[], &mut w)?;
            w.flush()?;
            if records {
                let out = common.out.as_deref().expect("clap enforces --out");
                let mut w = sink(Some(&sibling(out, "records")))?;
                write_records_csv(&report.output.records, &mut w)?;
                w.flush()?;
            }
        }
        Command::Sweep(common) => {
            let cfg = common.load()?;
            let result = run_sweep(&cfg.sim, &cfg.alpha, &cfg.sweep)?;
            let mut w = sink(common.out.as_deref())?;
            result.write_csv(&mut w)?;
            w.flush()?;
        }
        Command::Table1 { out, seed, requests } => {
            if requests < 10 {
                bail!("--requests must be at least 10");
            }
            let params = Table1Params {
                requests,
                seed,
                ..Table1Params::default()
            };
            let cells = run_table1(&params)?;
            let mut w = sink(out.as_deref())?;
            write_table1_csv(&cells, &params.multipliers, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
