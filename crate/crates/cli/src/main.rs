use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ruleground::commands::{
    cmd_audit, cmd_gen_synth, cmd_replay, cmd_report, cmd_run, CommandError, GenSynthArgs, ReplayArgs, ReportArgs,
    RunArgs,
};
use ruleground::digest::pretty_json;
use ruleground::manifest::PlannerMode;
use ruleground::par::Execution;

#[derive(Parser)]
#[command(name = "ruleground", version, about = "Replayable bi-level rule discovery over tabular evidence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerArg {
    Scripted,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort, its manifest and generator config.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        rows: usize,
        #[arg(long, default_value_t = 12)]
        features: usize,
        #[arg(long, default_value = "f02>0.5 AND f07<=0.6667")]
        planted: String,
        #[arg(long, default_value_t = 58)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        scenario: String,
    },
    /// Run discovery and write a run directory.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Frozen split file; created when absent.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long, value_enum)]
        planner: Option<PlannerArg>,
        /// Disable data-parallel evaluation.
        #[arg(long)]
        sequential: bool,
    },
    /// Replay frozen rules of one or more run directories on the holdout.
    Replay {
        /// Run directory; repeatable.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ruleground")]
        method: String,
        #[arg(long)]
        best1: bool,
        #[arg(long)]
        require_paired_splits: bool,
        #[arg(long)]
        top_k: Option<usize>,
        /// JSON list of replay records from other methods; repeatable.
        #[arg(long = "records")]
        records: Vec<PathBuf>,
    },
    /// Build knowledge cards from a run's archive.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        min_support: Option<usize>,
    },
    /// Re-verify a run directory offline.
    Audit {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn dispatch(cmd: Command) -> Result<(), CommandError> {
    match cmd {
        Command::GenSynth {
            out,
            rows,
            features,
            planted,
            seed,
            scenario,
        } => cmd_gen_synth(&GenSynthArgs {
            out,
            rows,
            features,
            planted_rule: planted,
            seed,
            scenario_id: scenario,
        }),
        Command::Run {
            manifest,
            data,
            split,
            seed,
            out,
            rounds,
            planner,
            sequential,
        } => {
            let s = cmd_run(&RunArgs {
                manifest,
                data,
                split,
                seed,
                out,
                rounds,
                planner: planner.map(|p| match p {
                    PlannerArg::Scripted => PlannerMode::Scripted,
                    PlannerArg::Remote => PlannerMode::Remote,
                }),
                exec: if sequential { Execution::Sequential } else { Execution::Auto },
            })?;
            println!(
                "{}: {} rounds, {} propositions{}",
                s.out.display(),
                s.rounds,
                s.exported,
                if s.stopped_early { " (planner exhausted)" } else { "" }
            );
            Ok(())
        }
        Command::Replay {
            runs,
            data,
            out,
            method,
            best1,
            require_paired_splits,
            top_k,
            records,
        } => {
            let r = cmd_replay(&ReplayArgs {
                runs,
                data,
                out,
                method,
                best1,
                require_paired_splits,
                top_k,
                extra_records: records,
            })?;
            println!("{} records, {} used, {} skipped", r.summary.total, r.summary.used, r.summary.skipped.len());
            Ok(())
        }
        Command::Report {
            run,
            data,
            out,
            top_k,
            min_support,
        } => {
            let cards = cmd_report(&ReportArgs {
                run,
                data,
                out,
                top_k,
                min_support,
            })?;
            println!("{} cards", cards.len());
            Ok(())
        }
        Command::Audit { run, data } => {
            let report = cmd_audit(&run, data.as_deref())?;
            println!("{}", pretty_json(&report));
            if report.pass() {
                Ok(())
            } else {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
                Err(CommandError::Validation(format!("audit failed: {}", failed.join(", "))))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
