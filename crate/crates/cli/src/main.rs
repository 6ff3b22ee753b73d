use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rvisac::harness::{self, ExperimentConfig};
use rvisac::tabular::FChoice;
use rvisac::{Error, Result};

#[derive(Parser)]
#[command(name = "rvisac", version, about = "Average-reward soft actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment and write CSVs and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint with deterministic actions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Seed of the evaluation episodes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve an MDP file exactly and cross-check the two solvers.
    Oracle {
        #[arg(long)]
        mdp: PathBuf,
        /// Reference functional, e.g. `reference:S:A`, `reference_max:S`, `gain_sum:G`, `gain_max_sum:G` or `batch_mean_max`.
        #[arg(long, default_value = "reference:0:0")]
        f: FChoice,
        /// Also write q* as CSV (`state,action,q`) to this file.
        #[arg(long)]
        dump_q: Option<PathBuf>,
    },
    /// Plot mean and population std of one CSV column across runs.
    Plot {
        #[arg(long)]
        metric: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let mut exp = ExperimentConfig::from_json(&text)?;
            if let Some(seed) = seed {
                exp.seeds = vec![seed];
            }
            let out = out
                .or_else(|| exp.output_dir.clone())
                .ok_or_else(|| Error::validation("output_dir", "pass --out or set output_dir"))?;
            for path in harness::run_experiment(&exp, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let ckpt = harness::load_checkpoint(&checkpoint)?;
            let s = harness::eval_checkpoint(&ckpt, episodes, seed)?;
            println!("env: {}", ckpt.env);
            println!("episodes: {episodes}");
            println!("total_return: {}", s.total_return);
            println!("survival_steps: {}", s.survival_steps);
            println!("average_reward: {}", s.average_reward);
        }
        Command::Oracle { mdp, f, dump_q } => {
            let report = harness::oracle_file(&mdp, &f)?;
            println!("{report}");
            if let Some(path) = dump_q {
                let q = &report.q;
                let mut text = String::from("state,action,q\n");
                for s in 0..q.n_states() {
                    for a in 0..q.n_actions() {
                        text.push_str(&format!("{s},{a},{}\n", q.get(s, a)));
                    }
                }
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Plot { metric, out, csv } => {
            let band = harness::plot_files(&csv, &metric, &out)?;
            println!("wrote {} ({} points)", out.display(), band.steps.len());
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
