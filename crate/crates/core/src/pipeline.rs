//! End-to-end stages shared by the command line and the tests: dataset
//! generation, embedding training, value training, evaluation and sweeps.

use std::fmt::Write as _;

use crate::bundle::Bundle;
use crate::config::{OperatorChoice, RunConfig};
use crate::data::{generate_random_trajectories, slice_windows, TrajectorySet, WindowDataset};
use crate::envs::{Action, EnvSpec, State};
use crate::error::{KeecError, Result};
use crate::koopman::{distortion, train_embedding, EpochLog};
use crate::seed;
use crate::valuectl::{rollout_with, run_control, train_value, ControlOutcome, PolicyConfig, ValueEpisodeLog};

pub fn generate(cfg: &RunConfig) -> Result<TrajectorySet> {
    let env = cfg.env_spec()?;
    generate_random_trajectories(&env, cfg.trajectories, cfg.steps, cfg.data_seed())
}

/// Windows for training, shuffled with a seed derived from the root.
pub fn windows(cfg: &RunConfig, ts: &TrajectorySet) -> WindowDataset {
    slice_windows(ts, cfg.window, Some(seed::derive(cfg.seed, "windows", 0)))
}

/// Independent trajectories used for held-out statistics.
pub fn held_out(cfg: &RunConfig, count: usize) -> Result<WindowDataset> {
    let env = cfg.env_spec()?;
    let ts = generate_random_trajectories(&env, count, cfg.steps.min(50), seed::derive(cfg.seed, "held-out", 0))?;
    Ok(slice_windows(&ts, cfg.window.min(cfg.steps.min(50)), None))
}

pub fn check_dataset(cfg: &RunConfig, ts: &TrajectorySet) -> Result<()> {
    let env = cfg.env_spec()?;
    if ts.env_name != env.name() {
        return Err(KeecError::State(format!(
            "dataset was generated for {}, config selects {}",
            ts.env_name,
            env.name()
        )));
    }
    if ts.state_dim != env.state_dim() || ts.action_dim != env.action_dim() {
        return Err(KeecError::State("dataset dimensions do not match the environment".into()));
    }
    Ok(())
}

/// Trains the embedding and returns a bundle without a value function.
pub fn train_embedding_stage(cfg: &RunConfig, ts: &TrajectorySet) -> Result<(Bundle, Vec<EpochLog>)> {
    check_dataset(cfg, ts)?;
    let env = cfg.env_spec()?;
    let wd = windows(cfg, ts);
    let trained = train_embedding(&wd, &env, &cfg.embedding_config())?;
    let operators = match cfg.operators {
        OperatorChoice::Average => trained.operators,
        OperatorChoice::Ema => trained.ema_operators,
    };
    let bundle = Bundle { env_name: env.name().into(), model: trained.model, operators, value: None };
    Ok((bundle, trained.log))
}

/// Trains the value function on top of `bundle`'s embedding.
pub fn train_value_stage(cfg: &RunConfig, mut bundle: Bundle) -> Result<(Bundle, Vec<ValueEpisodeLog>)> {
    let env = cfg.env_spec()?;
    bundle.require_env(env.name())?;
    check_dt(&env, &bundle)?;
    let trained = train_value(&bundle.model, &bundle.operators, &env, &cfg.value_config())?;
    bundle.value = Some(trained.value);
    Ok((bundle, trained.log))
}

fn check_dt(env: &EnvSpec, bundle: &Bundle) -> Result<()> {
    if (bundle.operators.dt() - env.dt).abs() > 1e-12 * env.dt {
        return Err(KeecError::State(format!(
            "bundle operators use dt = {}, environment uses {}",
            bundle.operators.dt(),
            env.dt
        )));
    }
    Ok(())
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,total,forward,isometry\n");
    for l in log {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e}", l.epoch, l.lr, l.total, l.forward, l.isometry);
    }
    s
}

pub fn value_log_csv(log: &[ValueEpisodeLog]) -> String {
    let mut s = String::from("episode,model_reward,steps,td_loss,truncated\n");
    for l in log {
        let _ = writeln!(
            s,
            "{},{:e},{},{:e},{}",
            l.episode, l.model_reward, l.steps, l.td_loss, l.truncated as u8
        );
    }
    s
}

/// `t, s..., a..., r` for one controlled episode; the final row carries the
/// terminal state with empty action and reward fields.
pub fn trajectory_csv(out: &ControlOutcome) -> String {
    let m = out.states.first().map_or(0, |s| s.len());
    let d = out.actions.first().map_or(0, |a| a.len());
    let mut s = String::from("t");
    for i in 0..m {
        let _ = write!(s, ",s{i}");
    }
    for k in 0..d {
        let _ = write!(s, ",a{k}");
    }
    s.push_str(",r\n");
    for (t, st) in out.states.iter().enumerate() {
        let _ = write!(s, "{t}");
        for v in st.iter() {
            let _ = write!(s, ",{v:e}");
        }
        match (out.actions.get(t), out.rewards.get(t)) {
            (Some(a), Some(r)) => {
                for v in a.iter() {
                    let _ = write!(s, ",{v:e}");
                }
                let _ = write!(s, ",{r:e}");
            }
            _ => s.push_str(&",".repeat(d + 1)),
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rewards: Vec<f64>,
    pub lengths: Vec<usize>,
    pub diverged: Vec<bool>,
    pub config_hash: u64,
    /// Mean wall-clock per control step, when measured.
    pub seconds_per_step: Option<f64>,
}

impl EvalReport {
    pub fn mean(&self) -> f64 {
        mean_std(&self.rewards).0
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        mean_std(&self.rewards).1
    }

    pub fn episodes(&self) -> usize {
        self.rewards.len()
    }

    /// Per-episode table; contains nothing time-dependent.
    pub fn csv(&self) -> String {
        let mut s = String::from("episode,reward,length,diverged\n");
        for (i, ((r, l), d)) in self.rewards.iter().zip(&self.lengths).zip(&self.diverged).enumerate() {
            let _ = writeln!(s, "{i},{r:e},{l},{}", *d as u8);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"episodes\": {},", self.episodes());
        let _ = writeln!(s, "  \"mean\": {:e},", self.mean());
        let _ = writeln!(s, "  \"std\": {:e},", self.std());
        let _ = writeln!(s, "  \"diverged\": {},", self.diverged.iter().filter(|d| **d).count());
        let _ = writeln!(s, "  \"config_hash\": \"{:016x}\",", self.config_hash);
        match self.seconds_per_step {
            Some(t) => {
                let _ = writeln!(s, "  \"seconds_per_step\": {t:e}");
            }
            None => s.push_str("  \"seconds_per_step\": null\n"),
        }
        s.push('}');
        s.push('\n');
        s
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Initial state of evaluation episode `i`.
pub fn eval_initial(env: &EnvSpec, eval_seed: u64, i: usize) -> State {
    env.sample_initial(&mut seed::rng_for(eval_seed, "episode", i as u64))
}

/// Runs `episodes` closed-loop episodes of `policy` from evaluation initials.
pub fn evaluate_policy(
    env: &EnvSpec,
    episodes: usize,
    horizon: usize,
    eval_seed: u64,
    mut policy: impl FnMut(&State) -> Result<Action>,
) -> Result<(EvalReport, Vec<ControlOutcome>)> {
    let mut outcomes = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let s0 = eval_initial(env, eval_seed, i);
        outcomes.push(rollout_with(env, &s0, horizon, &mut policy)?);
    }
    let report = EvalReport {
        rewards: outcomes.iter().map(|o| o.total_reward).collect(),
        lengths: outcomes.iter().map(|o| o.actions.len()).collect(),
        diverged: outcomes.iter().map(|o| o.diverged).collect(),
        config_hash: 0,
        seconds_per_step: None,
    };
    Ok((report, outcomes))
}

/// Greedy control with a complete bundle.
pub fn evaluate(cfg: &RunConfig, bundle: &Bundle) -> Result<(EvalReport, Vec<ControlOutcome>)> {
    let env = cfg.env_spec()?;
    bundle.require_env(env.name())?;
    check_dt(&env, bundle)?;
    let value = bundle.require_value()?;
    let policy = PolicyConfig::for_env(&env, value.gamma)?;
    let horizon = cfg.eval_horizon.unwrap_or(env.horizon);
    let (mut report, outcomes) = evaluate_policy(&env, cfg.eval_episodes, horizon, cfg.eval_seed(), |s| {
        let z = bundle.model.encode_one(s)?;
        crate::valuectl::greedy_action(&bundle.operators, value, &z, &policy)
    })?;
    report.config_hash = cfg.hash();
    Ok((report, outcomes))
}

/// One closed-loop episode from a given initial state.
pub fn control(cfg: &RunConfig, bundle: &Bundle, s0: &State) -> Result<ControlOutcome> {
    let env = cfg.env_spec()?;
    bundle.require_env(env.name())?;
    check_dt(&env, bundle)?;
    let value = bundle.require_value()?;
    let policy = PolicyConfig::for_env(&env, value.gamma)?;
    let horizon = cfg.eval_horizon.unwrap_or(env.horizon);
    run_control(&env, &bundle.model, &bundle.operators, value, &policy, s0, horizon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub lambda_met: f64,
    pub latent_dim: usize,
    pub result: std::result::Result<AblationResult, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationResult {
    pub mean: f64,
    pub std: f64,
    pub distortion: f64,
}

/// The sweep settings: every `ablate_lambdas` entry at the base latent
/// dimension, then every latent dimension (default n/2, n, 2n) at the base
/// λ. Repeated settings are dropped, each reported through `warn`.
pub fn ablation_grid(cfg: &RunConfig, mut warn: impl FnMut(String)) -> Vec<(f64, usize)> {
    let n = cfg.latent_dim;
    let dims = if cfg.ablate_dims.is_empty() {
        let half = if (n / 2).is_multiple_of(2) && n / 2 >= 2 { n / 2 } else { n };
        vec![half, n, 2 * n]
    } else {
        cfg.ablate_dims.clone()
    };
    let mut grid: Vec<(f64, usize)> = Vec::new();
    let candidates = cfg
        .ablate_lambdas
        .iter()
        .map(|&l| (l, n))
        .chain(dims.into_iter().map(|d| (cfg.lambda_met, d)));
    for setting in candidates {
        if grid.iter().any(|g| g.0.to_bits() == setting.0.to_bits() && g.1 == setting.1) {
            warn(format!("duplicate sweep setting lambda_met = {}, n = {} ignored", setting.0, setting.1));
        } else {
            grid.push(setting);
        }
    }
    grid
}

/// Trains and evaluates one full pipeline per grid setting; a failing
/// setting is recorded and the sweep continues.
pub fn ablate(cfg: &RunConfig, ts: &TrajectorySet, warn: impl FnMut(String)) -> Result<Vec<AblationRow>> {
    check_dataset(cfg, ts)?;
    let held = held_out(cfg, 100)?;
    let mut rows = Vec::new();
    for (lambda_met, latent_dim) in ablation_grid(cfg, warn) {
        let mut c = cfg.clone();
        c.lambda_met = lambda_met;
        c.latent_dim = latent_dim;
        let run = || -> Result<AblationResult> {
            let (bundle, _) = train_embedding_stage(&c, ts)?;
            let d = distortion(&bundle.model, &held)?;
            let (bundle, _) = train_value_stage(&c, bundle)?;
            let (report, _) = evaluate(&c, &bundle)?;
            Ok(AblationResult { mean: report.mean(), std: report.std(), distortion: d })
        };
        rows.push(AblationRow { lambda_met, latent_dim, result: run().map_err(|e| e.to_string()) });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("lambda_met,latent_dim,mean_reward,std_reward,distortion,status\n");
    for r in rows {
        match &r.result {
            Ok(a) => {
                let _ = writeln!(s, "{},{},{:e},{:e},{:e},ok", r.lambda_met, r.latent_dim, a.mean, a.std, a.distortion);
            }
            Err(e) => {
                let msg = e.replace([',', '\n'], ";");
                let _ = writeln!(s, "{},{},,,,failed: {msg}", r.lambda_met, r.latent_dim);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;

    #[test]
    fn report_statistics_recompute_from_rows() {
        let report = EvalReport {
            rewards: vec![-1.0, -3.0, -5.0, -7.0],
            lengths: vec![10; 4],
            diverged: vec![false; 4],
            config_hash: 7,
            seconds_per_step: None,
        };
        assert_eq!(report.mean(), -4.0);
        assert!((report.std() - 5f64.sqrt()).abs() < 1e-15);
        let rows: Vec<f64> = report
            .csv()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(mean_std(&rows), (report.mean(), report.std()));
    }

    #[test]
    fn grid_deduplicates_base_setting() {
        let cfg = RunConfig::for_env(EnvKind::Pendulum);
        let mut warnings = Vec::new();
        let grid = ablation_grid(&cfg, |w| warnings.push(w));
        // five lambdas plus n/2 and 2n; (0.3, 8) appears in both sweeps
        assert_eq!(grid.len(), 7);
        assert_eq!(warnings.len(), 1);
        let mut cfg = cfg;
        cfg.ablate_lambdas = vec![0.1, 0.1, 0.3];
        cfg.ablate_dims = vec![8];
        let mut warnings = Vec::new();
        assert_eq!(ablation_grid(&cfg, |w| warnings.push(w)).len(), 2);
        assert_eq!(warnings.len(), 2);
    }

    #[test]
    fn uncontrolled_evaluation_is_seeded() {
        let env = EnvSpec::pendulum();
        let zero = |_: &State| Ok(Action::zeros(1));
        let (a, _) = evaluate_policy(&env, 5, 20, 3, zero).unwrap();
        let (b, _) = evaluate_policy(&env, 5, 20, 3, zero).unwrap();
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.episodes(), 5);
        assert!(a.lengths.iter().all(|&l| l == 20));
    }

    #[test]
    fn trajectory_csv_shape() {
        let env = EnvSpec::pendulum();
        let out = rollout_with(&env, &State::from_vec(vec![1.0, 0.0]), 3, |_| Ok(Action::zeros(1))).unwrap();
        let csv = trajectory_csv(&out);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,s0,s1,a0,r");
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
    }
}
