use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use keec::bundle::{write_atomic, Bundle};
use keec::config::RunConfig;
use keec::data::{load_trajectories, save_trajectories, TrajectorySet};
use keec::envs::State;
use keec::pipeline;
use keec::{KeecError, Result};

#[derive(Parser)]
#[command(name = "keec", version, about = "Latent Koopman embedding, value learning and greedy control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (flat `key = value` file). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random-control trajectory dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder/decoder and identify the latent operators.
    TrainEmbedding {
        #[command(flatten)]
        common: Common,
        /// Dataset file; overrides the config's `data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Bundle to write; per-epoch losses go to `<out>.epochs.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn the latent value function and add it to a bundle.
    TrainValue {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        /// Output bundle; the input bundle is updated in place when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop evaluation from the standard initial-state region.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        /// Per-episode report CSV; the summary goes to `<out>.summary`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one controlled episode and write its trajectory.
    Control {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        /// Initial state as comma-separated values; evaluation episode 0 when omitted.
        #[arg(long)]
        initial: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the isometry weight and latent dimension.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_env(keec::envs::EnvKind::Pendulum),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<TrajectorySet> {
    let path = flag
        .as_ref()
        .or(cfg.data_path.as_ref())
        .ok_or_else(|| KeecError::Config("no dataset given (use --data or the `data` key)".into()))?;
    load_trajectories(path).map_err(|e| match e {
        KeecError::Io(io) => KeecError::Config(format!("cannot read dataset {}: {io}", path.display())),
        other => other,
    })
}

fn load_bundle(path: &Path) -> Result<Bundle> {
    Bundle::load(path).map_err(|e| match e {
        KeecError::Io(io) => KeecError::Config(format!("cannot read bundle {}: {io}", path.display())),
        other => other,
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_state(text: &str) -> Result<State> {
    let vals: std::result::Result<Vec<f64>, _> = text.split(',').map(|p| p.trim().parse::<f64>()).collect();
    vals.map(State::from_vec)
        .map_err(|_| KeecError::Config(format!("cannot parse initial state `{text}`")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = load_config(&common)?;
            let ts = pipeline::generate(&cfg)?;
            save_trajectories(&out, &ts)?;
            println!(
                "generated {} trajectories x {} steps for {} ({} transitions, {} regenerated) -> {}",
                ts.len(),
                ts.steps,
                ts.env_name,
                ts.transitions(),
                ts.regenerated,
                out.display()
            );
        }
        Command::TrainEmbedding { common, data, out } => {
            let cfg = load_config(&common)?;
            let ts = dataset(&cfg, &data)?;
            let (bundle, log) = pipeline::train_embedding_stage(&cfg, &ts)?;
            write_atomic(&sibling(&out, ".epochs.csv"), pipeline::epoch_log_csv(&log).as_bytes())?;
            bundle.save(&out)?;
            if let Some(last) = log.last() {
                println!(
                    "trained embedding: {} epochs, final total loss {:.5} (forward {:.5}, isometry {:.5}) -> {}",
                    log.len(),
                    last.total,
                    last.forward,
                    last.isometry,
                    out.display()
                );
            }
        }
        Command::TrainValue { common, bundle, out } => {
            let cfg = load_config(&common)?;
            let b = load_bundle(&bundle)?;
            let (b, log) = pipeline::train_value_stage(&cfg, b)?;
            let out = out.unwrap_or(bundle);
            write_atomic(&sibling(&out, ".value.csv"), pipeline::value_log_csv(&log).as_bytes())?;
            b.save(&out)?;
            let truncated = log.iter().filter(|l| l.truncated).count();
            println!(
                "trained value: {} episodes ({truncated} truncated) -> {}",
                log.len(),
                out.display()
            );
        }
        Command::Evaluate { common, bundle, out } => {
            let cfg = load_config(&common)?;
            let b = load_bundle(&bundle)?;
            let start = Instant::now();
            let (mut report, _) = pipeline::evaluate(&cfg, &b)?;
            let steps: usize = report.lengths.iter().sum();
            if steps > 0 {
                report.seconds_per_step = Some(start.elapsed().as_secs_f64() / steps as f64);
            }
            write_atomic(&out, report.csv().as_bytes())?;
            let summary = report.summary();
            write_atomic(&sibling(&out, ".summary"), summary.as_bytes())?;
            print!("{summary}");
        }
        Command::Control { common, bundle, initial, out } => {
            let cfg = load_config(&common)?;
            let b = load_bundle(&bundle)?;
            let env = cfg.env_spec()?;
            let s0 = match initial {
                Some(text) => parse_state(&text)?,
                None => pipeline::eval_initial(&env, cfg.eval_seed(), 0),
            };
            if s0.len() != env.state_dim() {
                return Err(KeecError::Config(format!(
                    "initial state needs {} values, got {}",
                    env.state_dim(),
                    s0.len()
                )));
            }
            let outcome = pipeline::control(&cfg, &b, &s0)?;
            write_atomic(&out, pipeline::trajectory_csv(&outcome).as_bytes())?;
            println!(
                "episode reward {:.3} over {} steps{} -> {}",
                outcome.total_reward,
                outcome.actions.len(),
                if outcome.diverged { " (diverged)" } else { "" },
                out.display()
            );
        }
        Command::Ablate { common, data, out } => {
            let cfg = load_config(&common)?;
            let ts = dataset(&cfg, &data)?;
            let rows = pipeline::ablate(&cfg, &ts, |w| eprintln!("warning: {w}"))?;
            write_atomic(&out, pipeline::ablation_csv(&rows).as_bytes())?;
            println!("{} sweep settings -> {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
