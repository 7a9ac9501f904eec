use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rowguard::harness::{self, HarnessError, RunOptions, ScenarioConfig};

#[derive(Parser)]
#[command(name = "rowguard", version, about = "RowHammer bit-flip attack and defense simulator")]
struct Cli {
    /// Scenario config (TOML).
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Multi-round vulnerable-bit profiling.
    Profile {
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Run the configured defender and attacker once.
    Attack,
    /// Run the `[sweep]` section.
    Sweep,
    /// Closed-form timing and security quantities.
    Analyze,
    /// Summarize the CSV reports in the output directory.
    Report,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let (config, text) = ScenarioConfig::load(&cli.config)?;
    let opts = RunOptions::new(config, text, cli.seed, cli.out);
    match cli.cmd {
        Cmd::Profile { rounds } => {
            let p = harness::cmd_profile(&opts, rounds)?;
            for (i, n) in p.round_sizes().iter().enumerate() {
                println!("round {}: {n} bits", i + 1);
            }
            println!("secured bits: {}", p.secured_bits().len());
        }
        Cmd::Attack => {
            let r = harness::cmd_attack(&opts)?.row;
            println!(
                "{} vs {}: landed {}/{} flips, accuracy {:.4} -> {:.4}, {} swaps",
                r.attacker,
                r.defender,
                r.flips_landed,
                r.flips_attempted,
                r.clean_accuracy,
                r.post_attack_accuracy,
                r.total_swaps
            );
        }
        Cmd::Sweep => {
            for p in harness::cmd_sweep(&opts)? {
                println!(
                    "{} flips to degrade {:.2} ({} censored)",
                    p.value,
                    p.flips_to_degrade(),
                    p.censored()
                );
            }
        }
        Cmd::Analyze => print!("{}", harness::cmd_analyze(&opts)?),
        Cmd::Report => print!("{}", harness::cmd_report(&opts)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rowguard: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
