use std::path::PathBuf;
use std::process::ExitCode;

use beliefplan::commands::{self, AblationAxis, Dumps};
use beliefplan::simulator::ScenarioKind;
use beliefplan::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "beliefplan", version, about = "Belief-space planning for interactive driving scenarios")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; written with defaults if missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenario files.
    Generate {
        /// intersection, merge, lane-follow or mixed.
        #[arg(long, default_value = "mixed")]
        kind: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Train encoder and decoder on expert replays.
    TrainOffline {
        /// Directory of scenario files; a generated pool otherwise.
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
    /// Train belief update, decoder and Q-network in closed loop.
    TrainOnline {
        /// Offline checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
    /// Run closed-loop episodes and report metrics.
    Evaluate {
        /// One checkpoint per training seed.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long)]
        dump_tree: bool,
        #[arg(long)]
        dump_predictions: bool,
    },
    /// Compare planner settings on shared scenarios and seeds.
    Ablate {
        /// option-length or threshold.
        #[arg(long)]
        axis: String,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
    /// Tabulate evaluation directories.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = commands::resolve_config(cli.common.config.as_deref())?;
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    let out = &cli.common.out;
    match cli.command {
        Command::Generate { kind, count } => {
            let kind = if kind == "mixed" { None } else { Some(ScenarioKind::parse(&kind)?) };
            let paths = commands::cmd_generate(&cfg, kind, count, seed, out)?;
            println!("wrote {} scenarios to {}", paths.len(), out.display());
        }
        Command::TrainOffline { scenarios } => {
            let r = commands::cmd_train_offline(&cfg, seed, scenarios.as_deref(), out)?;
            println!("final offline loss {:.4}", r.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainOnline { checkpoint, scenarios } => {
            let r = commands::cmd_train_online(&cfg, seed, &checkpoint, scenarios.as_deref(), out)?;
            println!("{} episodes, {} evaluation rows", r.episodes, r.rows.len());
        }
        Command::Evaluate { checkpoints, scenarios, dump_tree, dump_predictions } => {
            let dumps = Dumps { trees: dump_tree, predictions: dump_predictions };
            let s = commands::cmd_evaluate(&cfg, &checkpoints, scenarios.as_deref(), out, dumps)?;
            for (k, v) in &s.mean_std {
                println!("{k}: {v}");
            }
        }
        Command::Ablate { axis, checkpoints, scenarios } => {
            let axis = AblationAxis::parse(&axis)?;
            commands::cmd_ablate(&cfg, axis, &checkpoints, scenarios.as_deref(), out)?;
            print!("{}", std::fs::read_to_string(out.join("ablation_timing.md"))?);
        }
        Command::Report { inputs } => {
            commands::cmd_report(&inputs, out)?;
            print!("{}", std::fs::read_to_string(out.join("report.md"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
