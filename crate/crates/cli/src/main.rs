use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bmpc::harness::{delta_q_rows, evaluate, read_metrics, render_table, train, Checkpoint, PolicyKind, RunConfig};
use bmpc::planner::{delta_q, plan, PlannerConfig, PriorNoise};
use bmpc::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bmpc", about = "Train, evaluate and inspect model-predictive agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop and write metrics and checkpoints to a directory.
    Train {
        /// Flat `key = value` run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Environment, used only when no config file is given.
        #[arg(long, default_value = "pendulum_swingup")]
        env: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Override one config key; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint with the planner or the network policy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the environment the checkpoint was trained on.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value = "mpc")]
        policy: PolicyKind,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 1_000_000)]
        seed: u64,
        /// Planner settings; defaults to `config.txt` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Plan once from an observation and print the resulting statistics.
    Plan {
        #[arg(long)]
        ckpt: PathBuf,
        /// Whitespace-separated observation values.
        #[arg(long, allow_hyphen_values = true)]
        obs: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Summarise the value gain of every evaluation in a metrics stream.
    Diag {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bmpc::Error::Config(format!("`--set {kv}` is not of the form key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()
}

/// Run configuration for a checkpoint: an explicit file, else the
/// `config.txt` written beside it by `train`, else the desk defaults.
fn checkpoint_config(ckpt: &Path, env: &str, explicit: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let beside = ckpt.parent().map(|d| d.join("config.txt")).filter(|p| p.exists());
    let mut cfg = match explicit.or(beside.as_deref()) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(env)?,
    };
    apply_overrides(&mut cfg, overrides)?;
    Ok(cfg)
}

fn planner_for(ckpt: &Path, env: &str, config: Option<&Path>, overrides: &[String]) -> Result<PlannerConfig> {
    Ok(checkpoint_config(ckpt, env, config, overrides)?.planner)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, env, seed, out, overrides } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::desk(&env)?,
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            apply_overrides(&mut cfg, &overrides)?;
            let outcome = train(&cfg, Some(&out))?;
            for (step, report) in &outcome.evals {
                let fmt = |r: &Option<bmpc::harness::PolicyReturns>| {
                    r.as_ref().map_or("-".into(), |r| format!("{:.2}", r.mean))
                };
                println!("step={step} mpc={} network={}", fmt(&report.mpc), fmt(&report.network));
            }
            println!("env_steps={} updates={} out={}", outcome.env_steps, outcome.updates, out.display());
        }
        Command::Eval { ckpt, env, policy, episodes, seed, config, overrides } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let env = env.unwrap_or_else(|| checkpoint.env.clone());
            let planner = planner_for(&ckpt, &env, config.as_deref(), &overrides)?;
            let model = checkpoint.model()?;
            let report = evaluate(&model, &checkpoint.params, &env, episodes, &[policy], &planner, seed)?;
            let returns = match policy {
                PolicyKind::Mpc => report.mpc.as_ref(),
                PolicyKind::Network => report.network.as_ref(),
            }
            .expect("requested policy was evaluated");
            println!("env={env}");
            println!("policy={policy}");
            println!("episodes={episodes}");
            println!("mean_return={:.4}", returns.mean);
            println!("std_return={:.4}", returns.std);
            if let Some(dq) = &report.delta_q {
                println!("delta_q_mean={:.6}", dq.mean);
            }
        }
        Command::Plan { ckpt, obs, seed, config, overrides } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let planner = planner_for(&ckpt, &checkpoint.env, config.as_deref(), &overrides)?;
            let obs = obs
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| bmpc::Error::Config(format!("observation value `{t}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            let model = checkpoint.model()?;
            let z = model.encode_obs(&checkpoint.params, &obs)?;
            let r = plan(&model, &checkpoint.params, &z, PriorNoise::Policy, None, &planner, seed)?;
            let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
            println!("mu={}", join(&r.first.mean));
            println!("sigma={}", join(&r.first.std()));
            println!("q_hat={:.6}", r.value);
            match delta_q(&r) {
                Ok(dq) => println!("delta_q={dq:.6}"),
                Err(_) => println!("delta_q=-"),
            }
        }
        Command::Diag { metrics } => {
            let events = read_metrics(&metrics)?;
            let rows = delta_q_rows(&events);
            if rows.is_empty() {
                return Err(bmpc::Error::Config(format!("{} has no evaluation events", metrics.display())));
            }
            print!("{}", render_table(&rows));
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
