//! Command-line driver for the replication harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use batchcond::harness::{
    bins_to_csv, check_failure_budget, conditional_bins, parse_config, records_from_csv,
    records_to_csv, replicate, summarize, summary_to_csv, RunConfig,
};
use batchcond::twobatch::{
    pivot_decompose, rao_blackwell_mse_sim, recognizable_subset_sim, TwoBatchPolicy,
};
use batchcond::stochastics::RngStream;
use batchcond::{Error, Result};

#[derive(Parser)]
#[command(
    name = "batchcond",
    version,
    about = "Batched adaptive experiments with conditionally valid inference"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run replicates of a configured experiment and write records + summary.
    Replicate {
        /// Flat `section.key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Override `run.reps` from the config.
        #[arg(long)]
        reps: Option<u64>,
        /// Override `run.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for records.csv and summary.csv.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (overrides `run.parallel`).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Summarize an existing records.csv.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Coverage conditioned on how often an arm won a non-final batch.
    Bins {
        #[arg(long = "in")]
        input: PathBuf,
        /// 1-based arm to condition on.
        #[arg(long)]
        arm: usize,
        /// Nominal level the bands are centered at.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Two-batch pivot decomposition and its simulation summaries.
    Twobatch {
        /// Second-batch arm-1 share to analyze.
        #[arg(long, conflicts_with = "grid")]
        pi: Option<f64>,
        /// Emit the coefficient table over shares 0.01..0.99.
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value_t = 20000)]
        reps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate trajectories without inference.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Print one line per batch: rep, t, then per-arm pi, pi_hat,
        /// counts, and means.
        #[arg(long)]
        dump: bool,
        #[arg(long)]
        reps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(
    path: &PathBuf,
    reps: Option<u64>,
    seed: Option<u64>,
    parallel: Option<usize>,
) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = parse_config(&text)?;
    if let Some(r) = reps {
        if r < 1 {
            return Err(Error::Config("run.reps must be at least 1".into()));
        }
        config.reps = r;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(p) = parallel {
        if p < 1 {
            return Err(Error::Config("run.parallel must be at least 1".into()));
        }
        config.parallel = p;
    }
    Ok(config)
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Replicate {
            config,
            reps,
            seed,
            out,
            parallel,
        } => {
            let cfg = load_config(&config, reps, seed, parallel)?;
            let records = replicate(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let records_csv = records_to_csv(&records, cfg.params.k());
            std::fs::write(out.join("records.csv"), &records_csv)?;
            let rows = summarize(&records);
            let summary_csv = summary_to_csv(&rows);
            std::fs::write(out.join("summary.csv"), &summary_csv)?;
            print!("{summary_csv}");
            let budget = check_failure_budget(&records)?;
            eprintln!(
                "{} rows ({} structural skips, {} abnormal failures)",
                budget.total_rows, budget.structural, budget.abnormal
            );
            Ok(())
        }
        Cmd::Summarize { input } => {
            let records = records_from_csv(&std::fs::read_to_string(&input)?)?;
            print!("{}", summary_to_csv(&summarize(&records)));
            Ok(())
        }
        Cmd::Bins { input, arm, alpha } => {
            let records = records_from_csv(&std::fs::read_to_string(&input)?)?;
            let bins = conditional_bins(&records, arm, alpha)?;
            print!("{}", bins_to_csv(&bins));
            Ok(())
        }
        Cmd::Twobatch {
            pi,
            grid,
            reps,
            seed,
        } => {
            println!("pi,a,b,c,sigma");
            if grid {
                for i in 1..100 {
                    let p = i as f64 / 100.0;
                    let c = pivot_decompose(p)?;
                    println!("{p},{},{},{},{}", c.a, c.b, c.c, c.sigma);
                }
                return Ok(());
            }
            let p = pi.ok_or_else(|| {
                Error::InvalidArgument("twobatch needs either --pi or --grid".into())
            })?;
            let c = pivot_decompose(p)?;
            println!("{p},{},{},{},{}", c.a, c.b, c.c, c.sigma);
            let policy = TwoBatchPolicy::Constant(p);
            let mse = rao_blackwell_mse_sim([0.0, 0.0], policy, reps, &mut RngStream::new(seed, 0))?;
            println!(
                "mse: pivot {} rao-blackwell {} (paired se {})",
                mse.mse_t0, mse.mse_tstar, mse.diff_se
            );
            // Widened level so the recognizable subset has usable mass.
            let alpha = 0.32;
            match recognizable_subset_sim(
                [0.0, 0.0],
                alpha,
                policy,
                reps,
                &mut RngStream::new(seed, 1),
            ) {
                Ok(sub) => println!(
                    "subset (alpha {alpha}): P(A) {} cover|A {} (se {}, {} reps in A), unconditional {}",
                    sub.p_event,
                    sub.cover_given_event,
                    sub.cover_se,
                    sub.event_reps,
                    sub.uncond_coverage
                ),
                Err(e) => println!("subset (alpha {alpha}): skipped ({e})"),
            }
            Ok(())
        }
        Cmd::Simulate {
            config,
            dump,
            reps,
            seed,
        } => {
            let cfg = load_config(&config, reps, seed, None)?;
            let text = batchcond::harness::simulate_dump(&cfg)?;
            if dump {
                print!("{text}");
            } else {
                println!(
                    "simulated {} replicates ({} arms, {} batches)",
                    cfg.reps,
                    cfg.params.k(),
                    cfg.params.horizon()
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
