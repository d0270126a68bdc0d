use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pmsfl::data::DatasetSpec;
use pmsfl::harness::{dp_calc, partition_report, run_attack, run_experiment, AttackConfig, DpCalcArgs, RunConfig};
use pmsfl::privacy::{AmplificationForm, DEFAULT_DELTA};

#[derive(Parser)]
#[command(name = "pmsfl", version, about = "Split federated learning with probabilistic masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment; writes metrics.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write every uploaded binary mask under masks/.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Reconstruction attack study; writes attack_trials.csv and attack_summary.json.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Privacy calculators.
    DpCalc {
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
        #[arg(long)]
        c: f64,
        /// Depth of the bottom model.
        #[arg(long)]
        d: u32,
        /// Local iterations per round.
        #[arg(long, default_value_t = 1)]
        iterations: u32,
        #[arg(long, default_value_t = 1.0)]
        clip: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Masked parameters for Bernoulli amplification.
        #[arg(long, default_value_t = 1)]
        mask_params: usize,
        /// Use the duplicated-term amplification formula.
        #[arg(long)]
        printed_form: bool,
        #[arg(long)]
        json: bool,
    },
    /// Class histogram per client under a Dirichlet split.
    Partition {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        clients: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 60)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

fn run(cli: Cli) -> pmsfl::Result<()> {
    match cli.command {
        Command::Run { config, out, dump_masks } => {
            let cfg = RunConfig::load(&config)?;
            let result = run_experiment(&cfg)?;
            result.write(&out, dump_masks)?;
            println!(
                "{:?}: accuracy {:.4} -> {:.4}, uplink {} bytes",
                cfg.mode, result.summary.initial_accuracy, result.summary.final_accuracy, result.summary.totals.uplink_bytes
            );
        }
        Command::Attack { config, out } => {
            let result = run_attack(&AttackConfig::load(&config)?)?;
            result.write(&out)?;
            for s in &result.summary {
                println!(
                    "seed {} {:?}: mean error {:.4}, median {:.4}, psnr {:.2}",
                    s.seed, s.defense, s.mean_error, s.median_error, s.mean_psnr
                );
            }
        }
        Command::DpCalc {
            eps,
            delta,
            c,
            d,
            iterations,
            clip,
            batch,
            mask_params,
            printed_form,
            json,
        } => {
            let report = dp_calc(&DpCalcArgs {
                epsilon: eps,
                delta,
                c,
                d,
                iterations,
                clip,
                batch,
                mask_params,
                form: if printed_form { AmplificationForm::Printed } else { AmplificationForm::Symmetric },
            })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{}", report.table());
            }
        }
        Command::Partition {
            alpha,
            clients,
            classes,
            samples,
            seed,
            json,
        } => {
            let spec = DatasetSpec {
                classes,
                samples,
                seed,
                ..DatasetSpec::default()
            };
            let report = partition_report(alpha, clients, &spec, seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for (k, h) in report.histograms.iter().enumerate() {
                    let cells: Vec<String> = h.iter().map(usize::to_string).collect();
                    println!("client {k:>3}: {}", cells.join(" "));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
