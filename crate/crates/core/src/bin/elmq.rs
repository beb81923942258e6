use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use elmq::config::{parse_optional_f64, Settings};
use elmq::harness::{self, Algo, Summary, BENCH_REPS};
use elmq::{oracle, Error, Result};

#[derive(Parser)]
#[command(name = "elmq", version, about = "OS-ELM Q-Network experiments on CartPole-v0")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run training trials and write one CSV per trial.
    Train(TrainArgs),
    /// Time each operation class and write a JSON report.
    Bench(BenchArgs),
    /// Check the fast paths against the reference computations.
    Oracle,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<Algo>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u32>,
    #[arg(long)]
    max_episodes: Option<u32>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    eps1: Option<f64>,
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    update_step: Option<u32>,
    /// Reward for a failing step, or `none`.
    #[arg(long, allow_hyphen_values = true)]
    terminal_reward: Option<String>,
    #[arg(long)]
    store_terminal: Option<bool>,
    #[arg(long)]
    reset_after: Option<u32>,
    #[arg(long)]
    solve_threshold: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "oselm-l2-lipschitz")]
    algo: Algo,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = BENCH_REPS)]
    reps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn settings(&self) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        let cli = Settings {
            algo: self.algo,
            hidden: self.hidden,
            seed: self.seed,
            trials: self.trials,
            max_episodes: self.max_episodes,
            delta: self.delta,
            eps1: self.eps1,
            eps2: self.eps2,
            gamma: self.gamma,
            update_step: self.update_step,
            terminal_reward: self.terminal_reward.as_deref().map(parse_optional_f64).transpose()?,
            store_terminal: self.store_terminal,
            reset_after: self.reset_after,
            solve_threshold: self.solve_threshold,
            workers: self.workers,
            out: self.out.clone(),
        };
        Ok(file.overlay(cli))
    }
}

#[derive(Serialize)]
struct TrialLine {
    seed: u64,
    episodes: usize,
    episodes_to_solve: Option<u32>,
    resets: u32,
    reset_rate: f64,
    overflows: Option<u64>,
}

#[derive(Serialize)]
struct TrainReport {
    algo: String,
    trials: Vec<TrialLine>,
    all: Summary,
    solved_only: Summary,
}

fn train(args: &TrainArgs) -> Result<()> {
    let (cfg, seed) = args.settings()?.to_run_config()?;
    let results = harness::run_trials(&cfg, seed)?;
    for r in &results {
        match r.episodes_to_solve {
            Some(e) => println!("{} seed {}: solved at episode {e}, {} resets", cfg.algo, r.seed, r.resets),
            None => println!(
                "{} seed {}: not solved in {} episodes, {} resets",
                cfg.algo,
                r.seed,
                r.episodes(),
                r.resets
            ),
        }
    }
    let (all, solved_only) = harness::summaries(&results);
    println!("solved {}/{}", all.solved, all.trials);
    if let Some(dir) = &cfg.out_dir {
        harness::write_trial_csvs(&results, dir)?;
        let report = TrainReport {
            algo: cfg.algo.name().to_string(),
            trials: results
                .iter()
                .map(|r| TrialLine {
                    seed: r.seed,
                    episodes: r.episodes(),
                    episodes_to_solve: r.episodes_to_solve,
                    resets: r.resets,
                    reset_rate: r.reset_rate(),
                    overflows: r.overflows,
                })
                .collect(),
            all,
            solved_only,
        };
        let path = dir.join("summary.json");
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let cfg = harness::RunConfig::canonical(args.algo, args.hidden);
    // Single worker: the report is produced on this thread only.
    let report = harness::benchmark_ops(&cfg, args.reps)?;
    let json = report.to_json() + "\n";
    match &args.out {
        Some(p) => std::fs::write(p, json).map_err(|e| Error::io(p, e))?,
        None => print!("{json}"),
    }
    Ok(())
}

fn run_oracle() -> Result<bool> {
    let checks = oracle::run_suite();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Bench(a) => bench(a).map(|_| true),
        Command::Oracle => run_oracle(),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
