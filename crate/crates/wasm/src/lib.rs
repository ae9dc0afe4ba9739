//! Pendulum demo for the browser. The plain methods return library errors
//! and are usable natively; the exported wrappers convert them for JS.

use keec::bundle::Bundle;
use keec::config::RunConfig;
use keec::envs::{Action, EnvKind, EnvSpec, State};
use keec::pipeline;
use keec::{KeecError, Result};
use wasm_bindgen::prelude::*;

/// Columns per step in the arrays returned by [`Demo::control_rows`].
pub const CONTROL_COLUMNS: usize = 4;
/// Columns per step in the arrays returned by [`Demo::predict_rows`].
pub const PREDICT_COLUMNS: usize = 4;

#[wasm_bindgen]
pub struct Demo {
    cfg: RunConfig,
    env: EnvSpec,
    bundle: Option<Bundle>,
}

/// Final statistics of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_forward: f64,
    pub final_isometry: f64,
    pub mean_model_reward: f64,
}

impl Default for Demo {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl Demo {
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = RunConfig::for_env(EnvKind::Pendulum);
        cfg.seed = seed;
        let env = cfg.env_spec().expect("default pendulum config is valid");
        Demo { cfg, env, bundle: None }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn bundle(&self) -> Option<&Bundle> {
        self.bundle.as_ref()
    }

    /// Generates data, trains the embedding and then the value function.
    pub fn train_model(
        &mut self,
        trajectories: usize,
        epochs: usize,
        lambda_met: f64,
        value_episodes: usize,
    ) -> Result<TrainSummary> {
        let mut cfg = self.cfg.clone();
        cfg.trajectories = trajectories;
        cfg.epochs = epochs;
        cfg.lambda_met = lambda_met;
        cfg.value_episodes = value_episodes;
        cfg.validate()?;
        let ts = pipeline::generate(&cfg)?;
        let (bundle, log) = pipeline::train_embedding_stage(&cfg, &ts)?;
        let (bundle, value_log) = pipeline::train_value_stage(&cfg, bundle)?;
        let last = log.last().ok_or_else(|| KeecError::State("training produced no epochs".into()))?;
        let tail = &value_log[value_log.len().saturating_sub(50)..];
        let mean_model_reward = if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(|l| l.model_reward).sum::<f64>() / tail.len() as f64
        };
        let summary = TrainSummary {
            epochs: log.len(),
            final_loss: last.total,
            final_forward: last.forward,
            final_isometry: last.isometry,
            mean_model_reward,
        };
        self.cfg = cfg;
        self.bundle = Some(bundle);
        Ok(summary)
    }

    /// Replaces the model with a bundle produced by the command-line tool.
    pub fn load_bundle_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let bundle = Bundle::decode(bytes)?;
        bundle.require_env(self.env.name())?;
        bundle.require_value()?;
        if (bundle.operators.dt() - self.env.dt).abs() > 1e-12 * self.env.dt {
            return Err(KeecError::State(format!("bundle uses dt = {}", bundle.operators.dt())));
        }
        self.bundle = Some(bundle);
        Ok(())
    }

    fn trained(&self) -> Result<&Bundle> {
        self.bundle.as_ref().ok_or_else(|| KeecError::State("no model yet: train or load one first".into()))
    }

    /// Closed-loop episode from `(θ, ω)`; rows are `θ, ω, torque, reward`.
    pub fn control_rows(&self, theta: f64, omega: f64, steps: usize) -> Result<Vec<f64>> {
        let bundle = self.trained()?;
        let mut cfg = self.cfg.clone();
        cfg.eval_horizon = Some(steps);
        let out = pipeline::control(&cfg, bundle, &State::from_vec(vec![theta, omega]))?;
        let mut rows = Vec::with_capacity(out.actions.len() * CONTROL_COLUMNS);
        for (t, a) in out.actions.iter().enumerate() {
            rows.extend([out.states[t][0], out.states[t][1], a[0], out.rewards[t]]);
        }
        Ok(rows)
    }

    /// Open-loop rollout under a constant torque; rows are the true `θ, ω`
    /// followed by the decoded latent prediction.
    pub fn predict_rows(&self, theta: f64, omega: f64, torque: f64, steps: usize) -> Result<Vec<f64>> {
        let bundle = self.trained()?;
        let a = self.env.clip_action(&Action::from_vec(vec![torque]));
        let mut s = State::from_vec(vec![theta, omega]);
        let mut z = bundle.model.encode_one(&s)?;
        let mut rows = Vec::with_capacity((steps + 1) * PREDICT_COLUMNS);
        for t in 0..=steps {
            let decoded = bundle.model.decode_one(&z)?;
            rows.extend([s[0], s[1], decoded[0], decoded[1]]);
            if t < steps {
                s = self.env.step_rk4(&s, &a)?;
                z = bundle.operators.predict_flow(&z, &a)?;
            }
        }
        Ok(rows)
    }
}

fn js(e: KeecError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Demo {
        Demo::with_seed(seed.into())
    }

    /// Trains from scratch and returns a one-line summary.
    pub fn train(
        &mut self,
        trajectories: u32,
        epochs: u32,
        lambda_met: f64,
        value_episodes: u32,
    ) -> std::result::Result<String, JsError> {
        let s = self
            .train_model(trajectories as usize, epochs as usize, lambda_met, value_episodes as usize)
            .map_err(js)?;
        Ok(format!(
            "{} epochs: loss {:.4} (forward {:.4}, isometry {:.4}); mean model reward over the last value episodes {:.1}",
            s.epochs, s.final_loss, s.final_forward, s.final_isometry, s.mean_model_reward
        ))
    }

    #[wasm_bindgen(js_name = loadBundle)]
    pub fn load_bundle(&mut self, bytes: &[u8]) -> std::result::Result<(), JsError> {
        self.load_bundle_bytes(bytes).map_err(js)
    }

    #[wasm_bindgen(js_name = bundleBytes)]
    pub fn bundle_bytes(&self) -> Option<Vec<u8>> {
        self.bundle.as_ref().map(Bundle::encode)
    }

    #[wasm_bindgen(getter, js_name = hasModel)]
    pub fn has_model(&self) -> bool {
        self.bundle.is_some()
    }

    pub fn control(&self, theta: f64, omega: f64, steps: u32) -> std::result::Result<Vec<f64>, JsError> {
        self.control_rows(theta, omega, steps as usize).map_err(js)
    }

    pub fn predict(&self, theta: f64, omega: f64, torque: f64, steps: u32) -> std::result::Result<Vec<f64>, JsError> {
        self.predict_rows(theta, omega, torque, steps as usize).map_err(js)
    }
}
