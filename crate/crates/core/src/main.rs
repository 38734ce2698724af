use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpsmc::harness::experiment::{build_token_list, prepare_data};
use dpsmc::harness::{run_experiment, ExperimentConfig, HarnessError, Outcome};
use dpsmc::projection::{solve_sensitivity, DEFAULT_DELTA_PRIME};
use dpsmc::sampling::{amplification_csv, amplification_curve};

#[derive(Parser)]
#[command(name = "dpsmc", version, about = "DP cross-silo federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config file.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Worst-case effective sampling fractions of SWOR and Poisson batches.
    AnalyzeAmplification {
        /// Total number of samples.
        #[arg(short, long)]
        n: usize,
        /// SWOR batch size; Poisson uses `γ = b/n`.
        #[arg(short, long)]
        b: usize,
        /// Comma-separated slack values `δ'`.
        #[arg(long, value_delimiter = ',', default_value = "0,1e-6,1e-3")]
        slacks: Vec<f64>,
        /// Comma-separated fractions of data held by the adversary.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        adv_fracs: Vec<f64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sensitivity bound of a projected clipped vector.
    SolveSensitivity {
        /// Projection dimension.
        #[arg(short)]
        k: usize,
        /// Clip norm.
        #[arg(short = 'C', long = "clip-norm", default_value_t = 1.0)]
        clip_norm: f64,
        #[arg(long, default_value_t = DEFAULT_DELTA_PRIME)]
        delta_prime: f64,
    },
    /// Run the mixnet for a config's parties and write the token list file.
    MakeTokenList {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path)?;
    ExperimentConfig::from_json(&text)
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::RunExperiment { config, out } => {
            let config = load_config(&config)?;
            let result = run_experiment(&config, out.as_deref())?;
            if let Some(r) = &result.report {
                println!(
                    "steps {}  loss {:.4}  train acc {:.4}  test acc {}  epsilon {}",
                    r.steps_completed,
                    r.final_loss,
                    r.final_train_accuracy,
                    r.final_test_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                    r.epsilon.map_or("-".into(), |e| format!("{e:.4}")),
                );
            }
            match &result.outcome {
                Outcome::Completed => Ok(ExitCode::SUCCESS),
                Outcome::Aborted { phase, round, error } => {
                    let at = round.map_or(String::new(), |r| format!(" at step {r}"));
                    eprintln!("aborted in {phase}{at}: {error}");
                    Ok(ExitCode::from(2))
                }
            }
        }
        Command::AnalyzeAmplification {
            n,
            b,
            slacks,
            adv_fracs,
            out,
        } => {
            let rows = amplification_curve(n, b, &slacks, &adv_fracs)?;
            let csv = amplification_csv(&rows);
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::SolveSensitivity {
            k,
            clip_norm,
            delta_prime,
        } => {
            if k == 0 || !(clip_norm >= 0.0) || !(delta_prime > 0.0 && delta_prime < 1.0) {
                return Err(format!("need k >= 1, C >= 0 and 0 < delta' < 1 (got k = {k}, C = {clip_norm}, delta' = {delta_prime})").into());
            }
            println!("{}", solve_sensitivity(k, clip_norm, delta_prime));
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeTokenList { config, out } => {
            let config = load_config(&config)?;
            config.validate()?;
            let (_, _, partition) = prepare_data(&config)?;
            let (file, _) = build_token_list(&config, &partition.counts())?;
            file.write(&out)?;
            println!("{} tokens from {} parties -> {}", file.tokens.len(), file.parties, out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
