use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use swarm::config::RunConfig;
use swarm::harness::{self, all_pass, Check, FaultKind, LIVENESS_EXIT};
use swarm::roles::{self, RoleArgs};
use swarm::Error;

#[derive(Parser)]
#[command(name = "swarm", about = "Decentralized asynchronous RL on a desk-scale swarm")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment from a TOML config.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare asynchrony levels on a shared seed and dataset.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 400)]
        steps: u64,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
        levels: Vec<u64>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Run a scripted fault scenario.
    Fault {
        kind: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One role of a networked run; started by `swarm run`.
    #[command(hide = true)]
    Node {
        role: NodeRole,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long)]
        orchestrator: Option<String>,
        #[arg(long)]
        trainer: Option<String>,
        #[arg(long)]
        relays: Vec<String>,
        #[arg(long)]
        attack: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NodeRole {
    Relay,
    Orchestrator,
    Trainer,
    Worker,
    Validator,
}

fn load(config: Option<&PathBuf>) -> swarm::Result<RunConfig> {
    config.map(|p| RunConfig::load(p)).unwrap_or_else(|| Ok(RunConfig::default()))
}

fn report(checks: &[Check]) -> ExitCode {
    for c in checks {
        println!("{}", c.line());
    }
    if all_pass(checks) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> swarm::Result<ExitCode> {
    match cli.command {
        Cmd::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(stem));
            let exe = std::env::current_exe()?;
            let (_, checks) = harness::run_experiment(&cfg, &out, &exe)?;
            println!("outputs in {}", out.display());
            Ok(report(&checks))
        }
        Cmd::Ablation { config, steps, levels, out } => {
            let mut cfg = load(config.as_ref())?;
            cfg.run.steps = steps;
            let ab = harness::run_ablation(&cfg, &levels, Some(&out))?;
            println!("outputs in {}", out.display());
            Ok(report(&ab.checks(0.05, Duration::from_secs(15 * 60))))
        }
        Cmd::Fault { kind, config, out } => {
            let k = FaultKind::parse(&kind).ok_or_else(|| {
                let known: Vec<&str> = FaultKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!("unknown fault {kind:?}; expected one of {}", known.join(", ")))
            })?;
            let cfg = load(config.as_ref())?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("fault-{kind}")));
            let (_, checks) = harness::inject_fault(&cfg, k, Some(&out))?;
            Ok(report(&checks))
        }
        Cmd::Node { role, run_dir, index, orchestrator, trainer, relays, attack } => {
            let args = RoleArgs { run_dir, index, orchestrator, trainer, relays, attack };
            match role {
                NodeRole::Relay => roles::servers::run_relay(&args)?,
                NodeRole::Orchestrator => roles::servers::run_orchestrator(&args)?,
                NodeRole::Trainer => roles::trainer::run_trainer(&args)?,
                NodeRole::Worker => roles::worker::run_worker(&args)?,
                NodeRole::Validator => roles::validator::run_validator(&args)?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Liveness(_) => ExitCode::from(LIVENESS_EXIT as u8),
                _ => ExitCode::from(2),
            }
        }
    }
}
