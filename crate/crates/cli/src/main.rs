use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use privtx_cli::{ablation_table, cmd_compare, cmd_plan, cmd_run, cmd_verify, config, plan_text, Loaded};
use privtx_core::protocol::Mode;

/// Two-party private transformer inference with modeled costs.
#[derive(Parser)]
#[command(name = "privtx", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fail on any out-of-range fixed-point value instead of saturating.
    #[arg(long)]
    strict: bool,
    /// Where to write the JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one protocol mode and print its cost table.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run all four modes on each config and print the ablation table.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Further configs to compare.
        more: Vec<PathBuf>,
    },
    /// Check reconstruction, audit and accounting; exits 1 on any failure.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Only this mode (default: all four).
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Choose a packing layout for an n x d matrix.
    Plan {
        n: usize,
        d: usize,
        #[arg(default_value_t = 4096)]
        slots: usize,
        #[arg(long)]
        json: bool,
    },
}

fn load(path: &Path, c: &Common) -> Result<Loaded> {
    let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = config::parse(path, &src)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.weights_seed.get_or_insert(s);
    }
    cfg.strict |= c.strict;
    if c.report.is_some() {
        cfg.report.clone_from(&c.report);
    }
    Ok(config::resolve(path, &src, cfg)?)
}

fn write_report(path: Option<&Path>, json: &str) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Run { common, mode } => {
            let l = load(&common.config, &common)?;
            let mode = mode.unwrap_or(l.cfg.mode);
            let r = cmd_run(&l, mode)?;
            print!("{}", r.table());
            write_report(l.cfg.report.as_deref(), &r.to_json())?;
        }
        Cmd::Compare { common, more } => {
            let mut all = Vec::new();
            for p in std::iter::once(&common.config).chain(&more) {
                let l = load(p, &common)?;
                let c = cmd_compare(&l)?;
                println!("{}", ablation_table(&c));
                all.push(c);
            }
            let json = serde_json::to_string_pretty(&all)?;
            write_report(common.report.as_deref(), &json)?;
        }
        Cmd::Verify { common, mode } => {
            let l = load(&common.config, &common)?;
            let modes = mode.map_or(Mode::ALL.to_vec(), |m| vec![m]);
            let checks = cmd_verify(&l, &modes)?;
            for c in &checks {
                println!(
                    "{} {:<4} {:<20} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.mode.name(),
                    c.name,
                    c.detail
                );
            }
            write_report(l.cfg.report.as_deref(), &serde_json::to_string_pretty(&checks)?)?;
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Plan { n, d, slots, json } => {
            let p = cmd_plan(n, d, slots)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&p)?);
            } else {
                print!("{}", plan_text(&p));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
