//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key must be
//! known; values are parsed by type. Keys not given take per-environment
//! defaults, so a file containing only `env = lorenz63` is a complete config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;

use crate::envs::{EnvKind, EnvSpec, Physics};
use crate::error::{KeecError, Result};
use crate::koopman::EmbeddingConfig;
use crate::numkit::Matrix;
use crate::seed;
use crate::valuectl::{InitRegion, ValueConfig, ValueVariant};

/// Which identified operators the controller uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorChoice {
    /// Mean of the per-batch solutions of the last epoch.
    Average,
    /// Exponential moving average over all of training.
    Ema,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub dt: Option<f64>,
    pub action_bound: Option<f64>,
    pub r1_diag: Option<Vec<f64>>,
    pub r2_diag: Option<Vec<f64>>,
    pub wave_actuators: usize,
    pub wave_noise_std: f64,
    pub substeps: usize,

    pub trajectories: usize,
    pub steps: usize,
    pub window: usize,

    pub latent_dim: usize,
    pub lambda_met: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub ridge_eps: f64,
    pub ema_momentum: f64,
    pub embed_width: Option<usize>,
    pub operators: OperatorChoice,

    pub value_variant: ValueVariant,
    pub value_episodes: usize,
    pub value_horizon: Option<usize>,
    pub value_batch: usize,
    pub gamma: f64,
    pub value_lr: f64,
    pub value_updates: usize,
    pub target_refresh: usize,
    pub buffer_capacity: usize,
    pub value_scale: Option<f64>,
    pub value_width: Option<usize>,
    pub explore: f64,
    pub value_init: InitRegion,
    pub reencode: bool,

    pub eval_episodes: usize,
    pub eval_horizon: Option<usize>,

    pub ablate_lambdas: Vec<f64>,
    pub ablate_dims: Vec<usize>,

    pub seed: u64,
    pub data_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn for_env(env: EnvKind) -> Self {
        let (trajectories, steps, latent_dim) = match env {
            EnvKind::Pendulum => (1000, 50, 8),
            EnvKind::Lorenz63 => (1000, 500, 16),
            EnvKind::Wave => (5000, 100, 64),
        };
        let (substeps, value_init) = match env {
            EnvKind::Lorenz63 => (2, InitRegion::Evaluation),
            _ => (1, InitRegion::Mixed(0.5)),
        };
        RunConfig {
            env,
            dt: None,
            action_bound: None,
            r1_diag: None,
            r2_diag: None,
            wave_actuators: 10,
            wave_noise_std: 0.0,
            substeps,
            trajectories,
            steps,
            window: 8,
            latent_dim,
            lambda_met: 0.3,
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            lr_decay: 0.99,
            ridge_eps: 1e-3,
            ema_momentum: 0.99,
            embed_width: None,
            operators: OperatorChoice::Average,
            value_variant: ValueVariant::Mlp,
            value_episodes: 1000,
            value_horizon: None,
            value_batch: 256,
            gamma: 0.99,
            value_lr: 1e-3,
            value_updates: 50,
            target_refresh: 100,
            buffer_capacity: 100_000,
            value_scale: None,
            value_width: None,
            explore: 0.1,
            value_init,
            reencode: true,
            eval_episodes: 100,
            eval_horizon: None,
            ablate_lambdas: vec![0.0, 0.1, 0.2, 0.3, 0.5],
            ablate_dims: Vec::new(),
            seed: 0,
            data_path: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                KeecError::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            pairs.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let env = match pairs.iter().find(|(_, k, _)| k == "env") {
            Some((_, _, v)) => v.parse()?,
            None => EnvKind::Pendulum,
        };
        let mut cfg = RunConfig::for_env(env);
        let mut seen = std::collections::HashSet::new();
        for (lineno, k, v) in &pairs {
            if !seen.insert(k.clone()) {
                return Err(KeecError::Config(format!("line {lineno}: duplicate key `{k}`")));
            }
            cfg.set(k, v).map_err(|e| match e {
                KeecError::Config(msg) => KeecError::Config(format!("line {lineno}: {msg}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KeecError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env" => self.env = value.parse()?,
            "dt" => self.dt = Some(num(key, value)?),
            "action_bound" => self.action_bound = Some(num(key, value)?),
            "r1_diag" => self.r1_diag = Some(list(key, value)?),
            "r2_diag" => self.r2_diag = Some(list(key, value)?),
            "wave_actuators" => self.wave_actuators = num(key, value)?,
            "wave_noise_std" => self.wave_noise_std = num(key, value)?,
            "substeps" => self.substeps = num(key, value)?,
            "trajectories" => self.trajectories = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "lambda_met" => self.lambda_met = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "ridge_eps" => self.ridge_eps = num(key, value)?,
            "ema_momentum" => self.ema_momentum = num(key, value)?,
            "embed_width" => {
                self.embed_width = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "operators" => {
                self.operators = match value {
                    "average" => OperatorChoice::Average,
                    "ema" => OperatorChoice::Ema,
                    _ => return Err(bad(key, value, "average | ema")),
                }
            }
            "value_variant" => {
                self.value_variant = match value {
                    "mlp" => ValueVariant::Mlp,
                    "quadratic" => ValueVariant::Quadratic,
                    _ => return Err(bad(key, value, "mlp | quadratic")),
                }
            }
            "value_episodes" => self.value_episodes = num(key, value)?,
            "value_horizon" => self.value_horizon = Some(num(key, value)?),
            "value_batch" => self.value_batch = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "value_lr" => self.value_lr = num(key, value)?,
            "value_updates" => self.value_updates = num(key, value)?,
            "target_refresh" => self.target_refresh = num(key, value)?,
            "buffer_capacity" => self.buffer_capacity = num(key, value)?,
            "value_scale" => {
                self.value_scale = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "value_width" => {
                self.value_width = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "explore" => self.explore = num(key, value)?,
            "value_init" => self.value_init = parse_region(key, value)?,
            "reencode" => self.reencode = num(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            "eval_horizon" => self.eval_horizon = Some(num(key, value)?),
            "ablate_lambdas" => self.ablate_lambdas = list(key, value)?,
            "ablate_dims" => self.ablate_dims = list(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data" => self.data_path = Some(PathBuf::from(value)),
            _ => return Err(KeecError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(KeecError::Config(m));
        if self.window == 0 {
            return fail("window must be at least 1".into());
        }
        if self.latent_dim < 2 || !self.latent_dim.is_multiple_of(2) {
            return fail(format!("latent_dim must be even and >= 2, got {}", self.latent_dim));
        }
        if !(0.0..=1.0).contains(&self.lambda_met) {
            return fail(format!("lambda_met must lie in [0, 1], got {}", self.lambda_met));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 || self.value_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.value_lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("learning rates must be positive and lr_decay in (0, 1]".into());
        }
        if !(self.ridge_eps >= 0.0) {
            return fail("ridge_eps must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.explore) || !(0.0..1.0).contains(&self.ema_momentum) {
            return fail("explore must lie in [0, 1] and ema_momentum in [0, 1)".into());
        }
        if let Some(s) = self.value_scale {
            if !(s > 0.0 && s.is_finite()) {
                return fail(format!("value_scale must be positive, got {s}"));
            }
        }
        if self.embed_width == Some(0) {
            return fail("embed_width must be positive".into());
        }
        if self.value_width == Some(0) {
            return fail("value_width must be positive".into());
        }
        if self.buffer_capacity == 0 || self.target_refresh == 0 {
            return fail("buffer_capacity and target_refresh must be positive".into());
        }
        if self.ablate_lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return fail("ablate_lambdas entries must lie in [0, 1]".into());
        }
        if self.ablate_dims.iter().any(|&d| d < 2 || d % 2 != 0) {
            return fail("ablate_dims entries must be even and >= 2".into());
        }
        self.env_spec()?;
        Ok(())
    }

    /// Environment with overrides applied and validated.
    pub fn env_spec(&self) -> Result<EnvSpec> {
        let mut env = match self.env {
            EnvKind::Wave => EnvSpec::wave_with(self.wave_actuators),
            k => EnvSpec::by_kind(k),
        };
        if let Some(dt) = self.dt {
            env.dt = dt;
        }
        if let Some(b) = self.action_bound {
            if !(b > 0.0) {
                return Err(KeecError::Config(format!("action_bound must be positive, got {b}")));
            }
            let d = env.action_dim();
            env.action_low = DVector::from_element(d, -b);
            env.action_high = DVector::from_element(d, b);
        }
        if let Some(r1) = &self.r1_diag {
            env.r1 = diag_matrix("r1_diag", r1, env.action_dim())?;
        }
        if let Some(r2) = &self.r2_diag {
            env.r2 = diag_matrix("r2_diag", r2, env.state_dim())?;
        }
        if self.wave_noise_std < 0.0 {
            return Err(KeecError::Config("wave_noise_std must be non-negative".into()));
        }
        if matches!(env.physics, Physics::Wave { .. }) {
            env.init_noise_std = self.wave_noise_std;
        }
        env.substeps = self.substeps;
        env.validate()?;
        Ok(env)
    }

    pub fn data_seed(&self) -> u64 {
        seed::derive(self.seed, "dataset", 0)
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            n: self.latent_dim,
            lambda_met: self.lambda_met,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay,
            eps: self.ridge_eps,
            ema_momentum: self.ema_momentum,
            narrow: self.embed_width,
            seed: seed::derive(self.seed, "embedding", 0),
        }
    }

    pub fn value_config(&self) -> ValueConfig {
        ValueConfig {
            variant: self.value_variant,
            episodes: self.value_episodes,
            horizon: self.value_horizon,
            batch_size: self.value_batch,
            gamma: self.gamma,
            lr: self.value_lr,
            updates_per_episode: self.value_updates,
            target_refresh: self.target_refresh,
            buffer_capacity: self.buffer_capacity,
            scale: self.value_scale,
            width: self.value_width,
            explore: self.explore,
            init_region: self.value_init,
            reencode: self.reencode,
            seed: seed::derive(self.seed, "value", 0),
        }
    }

    pub fn eval_seed(&self) -> u64 {
        seed::derive(self.seed, "evaluate", 0)
    }

    /// Canonical text form: every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("env", self.env.name().into());
        if let Some(v) = self.dt {
            put("dt", fmt_f(v));
        }
        if let Some(v) = self.action_bound {
            put("action_bound", fmt_f(v));
        }
        if let Some(v) = &self.r1_diag {
            put("r1_diag", join(v.iter().map(|x| fmt_f(*x))));
        }
        if let Some(v) = &self.r2_diag {
            put("r2_diag", join(v.iter().map(|x| fmt_f(*x))));
        }
        put("wave_actuators", self.wave_actuators.to_string());
        put("wave_noise_std", fmt_f(self.wave_noise_std));
        put("substeps", self.substeps.to_string());
        put("trajectories", self.trajectories.to_string());
        put("steps", self.steps.to_string());
        put("window", self.window.to_string());
        put("latent_dim", self.latent_dim.to_string());
        put("lambda_met", fmt_f(self.lambda_met));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", fmt_f(self.lr));
        put("lr_decay", fmt_f(self.lr_decay));
        put("ridge_eps", fmt_f(self.ridge_eps));
        put("ema_momentum", fmt_f(self.ema_momentum));
        put("embed_width", self.embed_width.map_or("auto".into(), |w| w.to_string()));
        put(
            "operators",
            match self.operators {
                OperatorChoice::Average => "average",
                OperatorChoice::Ema => "ema",
            }
            .into(),
        );
        put(
            "value_variant",
            match self.value_variant {
                ValueVariant::Mlp => "mlp",
                ValueVariant::Quadratic => "quadratic",
            }
            .into(),
        );
        put("value_episodes", self.value_episodes.to_string());
        if let Some(v) = self.value_horizon {
            put("value_horizon", v.to_string());
        }
        put("value_batch", self.value_batch.to_string());
        put("gamma", fmt_f(self.gamma));
        put("value_lr", fmt_f(self.value_lr));
        put("value_updates", self.value_updates.to_string());
        put("target_refresh", self.target_refresh.to_string());
        put("buffer_capacity", self.buffer_capacity.to_string());
        put("value_scale", self.value_scale.map_or("auto".into(), fmt_f));
        put("value_width", self.value_width.map_or("auto".into(), |w| w.to_string()));
        put("explore", fmt_f(self.explore));
        put("value_init", region_text(self.value_init));
        put("reencode", self.reencode.to_string());
        put("eval_episodes", self.eval_episodes.to_string());
        if let Some(v) = self.eval_horizon {
            put("eval_horizon", v.to_string());
        }
        put("ablate_lambdas", join(self.ablate_lambdas.iter().map(|x| fmt_f(*x))));
        put("ablate_dims", join(self.ablate_dims.iter().map(|x| x.to_string())));
        put("seed", self.seed.to_string());
        if let Some(p) = &self.data_path {
            put("data", p.display().to_string());
        }
        s
    }

    /// FNV-1a hash of the canonical text.
    pub fn hash(&self) -> u64 {
        seed::fnv1a(self.to_text().as_bytes())
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(", ")
}

fn region_text(r: InitRegion) -> String {
    match r {
        InitRegion::Evaluation => "evaluation".into(),
        InitRegion::Collection => "collection".into(),
        InitRegion::Mixed(p) => format!("mixed:{}", fmt_f(p)),
    }
}

fn parse_region(key: &str, value: &str) -> Result<InitRegion> {
    match value {
        "evaluation" => Ok(InitRegion::Evaluation),
        "collection" => Ok(InitRegion::Collection),
        v => {
            let p: f64 = v
                .strip_prefix("mixed:")
                .and_then(|p| p.trim().parse().ok())
                .ok_or_else(|| bad(key, value, "evaluation | collection | mixed:<p>"))?;
            if (0.0..=1.0).contains(&p) {
                Ok(InitRegion::Mixed(p))
            } else {
                Err(bad(key, value, "mixed probability in [0, 1]"))
            }
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> KeecError {
    KeecError::Config(format!("`{key}`: cannot parse `{value}` (expected {expected})"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, std::any::type_name::<T>()))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| num(key, p.trim())).collect()
}

fn diag_matrix(key: &str, diag: &[f64], dim: usize) -> Result<Matrix> {
    let v: Vec<f64> = match diag.len() {
        1 => vec![diag[0]; dim],
        l if l == dim => diag.to_vec(),
        l => return Err(KeecError::Config(format!("`{key}` needs 1 or {dim} entries, got {l}"))),
    };
    Ok(Matrix::from_diagonal(&DVector::from_vec(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_only_config_uses_defaults() {
        let cfg = RunConfig::parse("env = lorenz63\n").unwrap();
        assert_eq!(cfg.latent_dim, 16);
        assert_eq!(cfg, RunConfig::for_env(EnvKind::Lorenz63));
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = RunConfig::parse("# pendulum\n\nepochs = 3 \n  lambda_met=0.1\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lambda_met, 0.1);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("epochz = 3").unwrap_err();
        assert!(matches!(err, KeecError::Config(ref m) if m.contains("epochz")));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "epochs = many",
            "lambda_met = 1.5",
            "latent_dim = 7",
            "gamma = 1",
            "r1_diag = -1",
            "env = cartpole",
            "value_init = mixed:2",
            "epochs = 1\nepochs = 2",
            "no equals sign",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn overrides_reach_the_environment() {
        let cfg = RunConfig::parse("dt = 0.02\naction_bound = 1\nr1_diag = 0.5").unwrap();
        let env = cfg.env_spec().unwrap();
        assert_eq!(env.dt, 0.02);
        assert_eq!(env.action_high[0], 1.0);
        assert_eq!(env.r1[(0, 0)], 0.5);
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::parse(
            "env = wave\nlatent_dim = 32\nvalue_scale = 12.5\nvalue_init = mixed:0.25\nablate_dims = 16, 64",
        )
        .unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::for_env(EnvKind::Wave).hash(), cfg.hash());
    }
}
