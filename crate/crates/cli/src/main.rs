use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use atgen_cli::{
    cmd_bon, cmd_code_reward, cmd_eval, cmd_exec, cmd_tier, cmd_train_rollouts, CliError, RunConfig,
};

#[derive(Parser)]
#[command(name = "atgen", version, about = "Adversarial test-generation environment")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// IO accuracy, attack rate and input attack rate per tier.
    Eval {
        #[arg(long)]
        attempts: Option<usize>,
    },
    /// Rank instances by baseline attack rate and assign easy/medium/hard.
    Tier {
        #[arg(long)]
        attempts: Option<usize>,
    },
    /// Collect scored rollout groups with the adversarial curriculum.
    Rollout {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Best-of-N selection with generated tests; reports pass@1.
    Bon {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k_test: Option<usize>,
    },
    /// Score code completions with format, tag-count and pass-rate rewards.
    CodeReward {
        #[arg(long)]
        completions: PathBuf,
    },
    /// Execute one program in the sandbox and print the outcome.
    Exec {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "python")]
        language: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.out);
    match cli.command {
        Command::Eval { attempts } => {
            if let Some(a) = attempts {
                cfg.eval.attempts = a;
            }
            cmd_eval(&cfg)
        }
        Command::Tier { attempts } => {
            if let Some(a) = attempts {
                cfg.eval.tier_attempts = a;
            }
            cmd_tier(&cfg)
        }
        Command::Rollout { steps } => {
            let steps = steps.unwrap_or(cfg.rollout.steps);
            cmd_train_rollouts(&cfg, steps).map(|_| ())
        }
        Command::Bon { n, k_test } => {
            let n = n.unwrap_or(cfg.eval.bon_n);
            let k = k_test.unwrap_or(cfg.eval.k_test);
            cmd_bon(&cfg, n, k).map(|_| ())
        }
        Command::CodeReward { completions } => cmd_code_reward(&cfg, &completions).map(|_| ()),
        Command::Exec {
            program,
            input,
            language,
        } => cmd_exec(&cfg, &program, input.as_deref(), &language),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("atgen: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
