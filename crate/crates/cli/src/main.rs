use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use trocar_core::diagnostics::self_check;
use trocar_core::harness::{ff_label, trial_file_name, write_bench_outputs, write_summary_csv, write_trial_jsonl};
use trocar_core::{run_bench, run_trial, Error, TrialConfig, TrialRecord};

const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser)]
#[command(name = "trocar-dock", version, about = "Simulated endoscope-to-trocar docking with optional force feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single trial.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        ff: Option<Toggle>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Write wall-clock solve times into summary.csv.
        #[arg(long)]
        timing: bool,
    },
    /// Run paired trials with and without force feedback.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: usize,
        /// Comma-separated seeds; defaults to 1..=trials.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
        /// Write wall-clock solve times into summary.csv.
        #[arg(long)]
        timing: bool,
    },
    /// Validate the config and run gradient and Jacobian self-tests.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) => ExitCode::from(EXIT_CONFIG),
                Error::Io(_) | Error::Csv(_) => ExitCode::FAILURE,
                _ => ExitCode::from(EXIT_ABORT),
            }
        }
    }
}

fn load_config(path: &Path) -> trocar_core::Result<TrialConfig> {
    let config = TrialConfig::from_file(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
        other => other,
    })?;
    config.resolve()?;
    Ok(config)
}

fn dispatch(command: Command) -> trocar_core::Result<ExitCode> {
    match command {
        Command::Run {
            config,
            seed,
            ff,
            out,
            timing,
        } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config = config.with_seed(seed);
            }
            if let Some(ff) = ff {
                config = config.with_ff(matches!(ff, Toggle::On));
            }
            let record = run_trial(&config)?;
            std::fs::create_dir_all(&out)?;
            write_trial_jsonl(&record, out.join(trial_file_name(record.seed, record.ff_enabled)))?;
            write_summary_csv(std::slice::from_ref(&record), out.join("summary.csv"), timing)?;
            report_trial(&record);
            Ok(trial_exit(&[record]))
        }
        Command::Bench {
            config,
            trials,
            seeds,
            out,
            timing,
        } => {
            let config = load_config(&config)?;
            if trials == 0 {
                return Err(Error::Config("--trials must be at least 1".into()));
            }
            let seeds = match seeds {
                Some(s) if s.len() != trials => {
                    return Err(Error::Config(format!("--seeds lists {} seeds but --trials is {trials}", s.len())));
                }
                Some(s) => s,
                None => (1..=trials as u64).collect(),
            };
            let (summary, records) = run_bench(&config, &seeds)?;
            write_bench_outputs(&out, &summary, &records, timing)?;
            records.iter().for_each(report_trial);
            for arm in [&summary.without_ff, &summary.with_ff] {
                info!(
                    "ff {}: {}/{} succeeded, M = {:.4} ± {:.4} N",
                    ff_label(arm.ff_enabled),
                    arm.success_count,
                    arm.trials,
                    arm.mean,
                    arm.std_dev
                );
            }
            match summary.ratio_of_means {
                Some(ratio) => info!("ratio of means (ff on / ff off): {ratio:.4}"),
                None => warn!("ratio of means undefined"),
            }
            Ok(trial_exit(&records))
        }
        Command::Check { config } => {
            let trial = load_config(&config)?.resolve()?;
            let report = self_check(&trial)?;
            for item in &report.items {
                println!(
                    "{} {}: error {:.3e} (tolerance {:.1e})",
                    if item.passed { "PASS" } else { "FAIL" },
                    item.name,
                    item.error,
                    item.tolerance
                );
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn report_trial(record: &TrialRecord) {
    let ff = ff_label(record.ff_enabled);
    match &record.abort_cause {
        Some(cause) => warn!("seed {} ff {ff}: aborted at t = {:.3} s: {cause}", record.seed, record.completion_time),
        None => info!(
            "seed {} ff {ff}: success {} T = {:.3} s M = {:.4} N mean solve {:.3} ms",
            record.seed,
            record.success,
            record.completion_time,
            record.metric_m,
            record.mean_solve_ms()
        ),
    }
}

fn trial_exit(records: &[TrialRecord]) -> ExitCode {
    if records.iter().any(TrialRecord::aborted) {
        ExitCode::from(EXIT_ABORT)
    } else {
        ExitCode::SUCCESS
    }
}
