//! Latent value learning and the analytic greedy controller.
//!
//! Under the quadratic reward `r = −(‖s − s*‖²_{R2} + ‖a‖²_{R1})` the action
//! maximising `r + γ·∇V·(P z + (U z) a)` has the closed form
//! `a* = (γ/2)·R1⁻¹·(U z)ᵀ·∇V(z)`, clipped to the action box. The value `V`
//! is learned by TD(0) on transitions generated entirely inside the latent
//! model.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DVector, Dyn};
use rand::Rng as _;

use crate::binio::{ByteReader, ByteWriter};
use crate::envs::{Action, EnvSpec, State};
use crate::error::{dim_err, KeecError, Result};
use crate::koopman::{EmbeddingModel, LatentOperators, LatentState};
use crate::nn::{adam_update, Activation, AdamState, ForwardCache, Mlp};
use crate::numkit::Matrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueVariant {
    Mlp,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValueNet {
    /// `n → n → n/2 → n/2 → 1`, ReLU hidden layers.
    Mlp(Mlp),
    /// `−(z − z*)ᵀ W(z) (z − z*) + b` with `W = HᵀH`, `H` the row-major
    /// reshape of an `n → n²` linear map.
    Quadratic { w_net: Mlp, z_star: LatentState, b: f64 },
}

/// A latent value function `V(z) = scale · net(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub net: ValueNet,
    pub gamma: f64,
    /// Output scale; keeps the network's raw output near unit magnitude.
    pub scale: f64,
}

struct ValueCache {
    net: ForwardCache,
    /// Per-sample `z − z*` and `H(z)(z − z*)` for the quadratic head.
    quad: Option<(Matrix, Matrix)>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(KeecError::Config(format!("discount must lie in (0, 1), got {gamma}")))
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(KeecError::Config(format!("value scale must be positive, got {scale}")))
    }
}

impl ValueModel {
    pub fn mlp(n: usize, gamma: f64, scale: f64, rng: &mut seed::Rng) -> Result<Self> {
        Self::mlp_with_width(n, n, gamma, scale, rng)
    }

    /// `n → width → width/2 → width/2 → 1`.
    pub fn mlp_with_width(
        n: usize,
        width: usize,
        gamma: f64,
        scale: f64,
        rng: &mut seed::Rng,
    ) -> Result<Self> {
        check_gamma(gamma)?;
        check_scale(scale)?;
        if width == 0 {
            return Err(KeecError::Config("value width must be positive".into()));
        }
        let half = (width / 2).max(1);
        let r = Activation::Relu;
        let net = Mlp::init(&[n, width, half, half, 1], &[r, r, r, Activation::None], rng)?;
        Ok(ValueModel { net: ValueNet::Mlp(net), gamma, scale })
    }

    pub fn quadratic(z_star: LatentState, gamma: f64, scale: f64, rng: &mut seed::Rng) -> Result<Self> {
        check_gamma(gamma)?;
        check_scale(scale)?;
        let n = z_star.len();
        let w_net = Mlp::init(&[n, n * n], &[Activation::None], rng)?;
        Ok(ValueModel { net: ValueNet::Quadratic { w_net, z_star, b: 0.0 }, gamma, scale })
    }

    pub fn new(
        variant: ValueVariant,
        z_star: LatentState,
        gamma: f64,
        scale: f64,
        rng: &mut seed::Rng,
    ) -> Result<Self> {
        match variant {
            ValueVariant::Mlp => Self::mlp(z_star.len(), gamma, scale, rng),
            ValueVariant::Quadratic => Self::quadratic(z_star, gamma, scale, rng),
        }
    }

    pub fn variant(&self) -> ValueVariant {
        match self.net {
            ValueNet::Mlp(_) => ValueVariant::Mlp,
            ValueNet::Quadratic { .. } => ValueVariant::Quadratic,
        }
    }

    pub fn n(&self) -> usize {
        match &self.net {
            ValueNet::Mlp(m) => m.in_dim(),
            ValueNet::Quadratic { z_star, .. } => z_star.len(),
        }
    }

    pub fn num_params(&self) -> usize {
        match &self.net {
            ValueNet::Mlp(m) => m.num_params(),
            ValueNet::Quadratic { w_net, .. } => w_net.num_params() + 1,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match &self.net {
            ValueNet::Mlp(m) => m.params().copied().collect(),
            ValueNet::Quadratic { w_net, b, .. } => {
                w_net.params().copied().chain(std::iter::once(*b)).collect()
            }
        }
    }

    pub fn params_mut(&mut self) -> Box<dyn Iterator<Item = &mut f64> + '_> {
        match &mut self.net {
            ValueNet::Mlp(m) => Box::new(m.params_mut()),
            ValueNet::Quadratic { w_net, b, .. } => {
                Box::new(w_net.params_mut().chain(std::iter::once(b)))
            }
        }
    }

    fn forward(&self, zs: &Matrix) -> Result<(DVector<f64>, ValueCache)> {
        if zs.ncols() != self.n() {
            return Err(dim_err(format!("value expects {}-dim latents, got {}", self.n(), zs.ncols())));
        }
        match &self.net {
            ValueNet::Mlp(m) => {
                let (y, cache) = m.forward(zs)?;
                Ok((y.column(0) * self.scale, ValueCache { net: cache, quad: None }))
            }
            ValueNet::Quadratic { w_net, z_star, b } => {
                let n = z_star.len();
                let (h, cache) = w_net.forward(zs)?;
                let mut es = Matrix::zeros(zs.nrows(), n);
                let mut hes = Matrix::zeros(zs.nrows(), n);
                let mut v = DVector::zeros(zs.nrows());
                for i in 0..zs.nrows() {
                    let e = zs.row(i).transpose() - z_star;
                    let he = square_head(&h, i, n) * &e;
                    v[i] = self.scale * (b - he.norm_squared());
                    es.set_row(i, &e.transpose());
                    hes.set_row(i, &he.transpose());
                }
                Ok((v, ValueCache { net: cache, quad: Some((es, hes)) }))
            }
        }
    }

    /// Parameter gradient of Σ_i dv_i·V(z_i) and the input gradient rows.
    fn backward(&self, cache: &ValueCache, dv: &DVector<f64>) -> Result<(Vec<f64>, Matrix)> {
        match (&self.net, &cache.quad) {
            (ValueNet::Mlp(m), None) => {
                let dy = Matrix::from_column_slice(dv.len(), 1, (dv * self.scale).as_slice());
                let (dx, g) = m.backward(&cache.net, &dy)?;
                Ok((g.params().copied().collect(), dx))
            }
            (ValueNet::Quadratic { w_net, .. }, Some((es, hes))) => {
                let n = es.ncols();
                let rows = es.nrows();
                let mut dh = Matrix::zeros(rows, n * n);
                let mut dx_direct = Matrix::zeros(rows, n);
                let mut db = 0.0;
                for i in 0..rows {
                    let s = dv[i] * self.scale;
                    db += s;
                    for r in 0..n {
                        for c in 0..n {
                            dh[(i, r * n + c)] = -2.0 * s * hes[(i, r)] * es[(i, c)];
                        }
                    }
                    // −2 Hᵀ H e through e
                    let he = hes.row(i).transpose();
                    let d = square_head(cache.net.output(), i, n).transpose() * he * (-2.0 * s);
                    dx_direct.set_row(i, &d.transpose());
                }
                let (dx_w, g) = w_net.backward(&cache.net, &dh)?;
                let mut grads: Vec<f64> = g.params().copied().collect();
                grads.push(db);
                Ok((grads, dx_w + dx_direct))
            }
            _ => Err(dim_err("value cache does not match the model variant")),
        }
    }

    pub fn values(&self, zs: &Matrix) -> Result<DVector<f64>> {
        self.forward(zs).map(|(v, _)| v)
    }

    pub fn value(&self, z: &LatentState) -> Result<f64> {
        Ok(self.values(&row_matrix(z))?[0])
    }

    /// ∇_z V at one point.
    pub fn value_grad(&self, z: &LatentState) -> Result<LatentState> {
        let (_, cache) = self.forward(&row_matrix(z))?;
        let (_, dx) = self.backward(&cache, &DVector::from_element(1, 1.0))?;
        Ok(dx.row(0).transpose())
    }

    /// Parameter gradient of Σ_i dv_i·V(z_i).
    pub fn param_grad(&self, zs: &Matrix, dv: &DVector<f64>) -> Result<Vec<f64>> {
        let (_, cache) = self.forward(zs)?;
        Ok(self.backward(&cache, dv)?.0)
    }

    /// `scale·H(z)ᵀH(z)` for the quadratic head.
    pub fn weight_matrix(&self, z: &LatentState) -> Result<Matrix> {
        let ValueNet::Quadratic { w_net, .. } = &self.net else {
            return Err(KeecError::Config("W(z) requested from an MLP value".into()));
        };
        let n = z.len();
        let h = w_net.predict(&row_matrix(z))?;
        let h = square_head(&h, 0, n);
        Ok(h.transpose() * h * self.scale)
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.f64(self.gamma);
        w.f64(self.scale);
        match &self.net {
            ValueNet::Mlp(m) => {
                w.u8(0);
                m.write(w);
            }
            ValueNet::Quadratic { w_net, z_star, b } => {
                w.u8(1);
                w.u64(z_star.len() as u64);
                w.f64s(z_star.iter());
                w.f64(*b);
                w_net.write(w);
            }
        }
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let gamma = r.f64()?;
        let scale = r.f64()?;
        check_gamma(gamma).map_err(|e| KeecError::Format(e.to_string()))?;
        check_scale(scale).map_err(|e| KeecError::Format(e.to_string()))?;
        let net = match r.u8()? {
            0 => ValueNet::Mlp(Mlp::read(r)?),
            1 => {
                let n = r.len(1 << 12)?;
                let z_star = DVector::from_vec(r.f64_vec(n)?);
                let b = r.f64()?;
                let w_net = Mlp::read(r)?;
                if w_net.in_dim() != n || w_net.out_dim() != n * n {
                    return Err(KeecError::Format("quadratic head has wrong shape".into()));
                }
                ValueNet::Quadratic { w_net, z_star, b }
            }
            t => return Err(KeecError::Format(format!("unknown value variant {t}"))),
        };
        if let ValueNet::Mlp(m) = &net {
            if m.out_dim() != 1 {
                return Err(KeecError::Format("value network must have one output".into()));
            }
        }
        Ok(ValueModel { net, gamma, scale })
    }
}

fn row_matrix(z: &DVector<f64>) -> Matrix {
    Matrix::from_row_slice(1, z.len(), z.as_slice())
}

fn square_head(flat: &Matrix, row: usize, n: usize) -> Matrix {
    Matrix::from_fn(n, n, |r, c| flat[(row, r * n + c)])
}

/// Policy constants: discount, action cost and the action box.
#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub gamma: f64,
    pub r1: Matrix,
    r1_chol: Cholesky<f64, Dyn>,
    pub dt: f64,
    pub action_low: DVector<f64>,
    pub action_high: DVector<f64>,
}

impl PolicyConfig {
    pub fn new(gamma: f64, r1: Matrix, dt: f64, low: DVector<f64>, high: DVector<f64>) -> Result<Self> {
        check_gamma(gamma)?;
        let d = r1.nrows();
        if r1.ncols() != d || low.len() != d || high.len() != d {
            return Err(dim_err("policy: R1 and the action box must share the action dimension"));
        }
        if (&r1 - r1.transpose()).amax() > 1e-12 * r1.amax().max(1.0) {
            return Err(KeecError::Config("R1 must be symmetric".into()));
        }
        let r1_chol = Cholesky::new(r1.clone())
            .ok_or_else(|| KeecError::Config("R1 must be positive definite".into()))?;
        if low.iter().zip(high.iter()).any(|(l, h)| !(l <= h)) {
            return Err(KeecError::Config("action box has low > high".into()));
        }
        if !(dt > 0.0) {
            return Err(KeecError::Config(format!("dt must be positive, got {dt}")));
        }
        Ok(PolicyConfig { gamma, r1, r1_chol, dt, action_low: low, action_high: high })
    }

    pub fn for_env(env: &EnvSpec, gamma: f64) -> Result<Self> {
        Self::new(gamma, env.r1.clone(), env.dt, env.action_low.clone(), env.action_high.clone())
    }

    pub fn action_dim(&self) -> usize {
        self.r1.nrows()
    }

    pub fn solve_r1(&self, x: &DVector<f64>) -> DVector<f64> {
        self.r1_chol.solve(x)
    }

    pub fn clip(&self, a: &Action) -> Action {
        DVector::from_fn(a.len(), |i, _| a[i].clamp(self.action_low[i], self.action_high[i]))
    }

    fn check(&self, ops: &LatentOperators) -> Result<()> {
        if ops.d() != self.action_dim() {
            return Err(dim_err(format!(
                "operators have {} inputs, policy has {}",
                ops.d(),
                self.action_dim()
            )));
        }
        if (ops.dt() - self.dt).abs() > 1e-12 * self.dt {
            return Err(KeecError::Config(format!(
                "policy dt {} differs from operator dt {}",
                self.dt,
                ops.dt()
            )));
        }
        Ok(())
    }
}

/// `(γ/2)·R1⁻¹·(U z)ᵀ·∇V(z)` before clipping.
pub fn greedy_action_unclipped(
    ops: &LatentOperators,
    vm: &ValueModel,
    z: &LatentState,
    cfg: &PolicyConfig,
) -> Result<Action> {
    cfg.check(ops)?;
    let g = vm.value_grad(z)?;
    let uz = ops.actuation(z);
    Ok(cfg.solve_r1(&(uz.transpose() * g)) * (0.5 * cfg.gamma))
}

pub fn greedy_action(
    ops: &LatentOperators,
    vm: &ValueModel,
    z: &LatentState,
    cfg: &PolicyConfig,
) -> Result<Action> {
    let a = greedy_action_unclipped(ops, vm, z, cfg)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(KeecError::Numeric("greedy action is not finite".into()));
    }
    Ok(cfg.clip(&a))
}

/// Which state multiplies `W(z)` in the first bracket term of the quadratic policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadraticMode {
    /// `zᵀW(z)`.
    Verbatim,
    /// `(z − z*)ᵀW(z)`, the exact maximiser for the quadratic value.
    Centered,
}

/// `−γ·R1⁻¹·(U z)ᵀ·[W e' + ½·eᵀ(∂W/∂z)e]` with `e = z − z*` and `e'` per `mode`,
/// before clipping.
pub fn quadratic_greedy_action_unclipped(
    ops: &LatentOperators,
    vm: &ValueModel,
    z: &LatentState,
    cfg: &PolicyConfig,
    mode: QuadraticMode,
) -> Result<Action> {
    cfg.check(ops)?;
    let ValueNet::Quadratic { w_net, z_star, .. } = &vm.net else {
        return Err(KeecError::Config("quadratic policy needs a quadratic value".into()));
    };
    let n = z_star.len();
    if z.len() != n {
        return Err(dim_err("latent dimension mismatch"));
    }
    let zb = row_matrix(z);
    let (hflat, cache) = w_net.forward(&zb)?;
    let h = square_head(&hflat, 0, n);
    let e = z - z_star;
    let w = h.transpose() * &h * vm.scale;
    let lead = match mode {
        QuadraticMode::Verbatim => &w * z,
        QuadraticMode::Centered => &w * &e,
    };
    // ½ eᵀ(∂W/∂z_l)e for every l, through the head's input Jacobian
    let he = &h * &e;
    let dh = Matrix::from_fn(1, n * n, |_, k| vm.scale * he[k / n] * e[k % n]);
    let (jac_term, _) = w_net.backward(&cache, &dh)?;
    let bracket = lead + jac_term.row(0).transpose();
    let uz = ops.actuation(z);
    Ok(cfg.solve_r1(&(uz.transpose() * bracket)) * (-vm.gamma))
}

pub fn quadratic_greedy_action(
    ops: &LatentOperators,
    vm: &ValueModel,
    z: &LatentState,
    cfg: &PolicyConfig,
    mode: QuadraticMode,
) -> Result<Action> {
    let a = quadratic_greedy_action_unclipped(ops, vm, z, cfg, mode)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(KeecError::Numeric("quadratic greedy action is not finite".into()));
    }
    Ok(cfg.clip(&a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub z: LatentState,
    pub a: Action,
    pub z_next: LatentState,
    pub r: f64,
}

/// Fixed-capacity FIFO store of latent transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(KeecError::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 20)) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Uniform draw with replacement.
    pub fn sample<'a>(&'a self, count: usize, rng: &mut seed::Rng) -> Vec<&'a Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..count).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// Mean of `((r + γ·V_target(z') − V(z)) / scale)²` and its gradient with
/// respect to the parameters of `vm`.
pub fn td_loss(vm: &ValueModel, target: &ValueModel, batch: &[&Transition]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(KeecError::State("empty TD batch".into()));
    }
    let n = vm.n();
    let zs = Matrix::from_fn(batch.len(), n, |i, j| batch[i].z[j]);
    let zn = Matrix::from_fn(batch.len(), n, |i, j| batch[i].z_next[j]);
    let next = target.values(&zn)?;
    let (v, cache) = vm.forward(&zs)?;
    let scale = vm.scale;
    let count = batch.len() as f64;
    let mut loss = 0.0;
    let mut dv = DVector::zeros(batch.len());
    for (i, t) in batch.iter().enumerate() {
        let delta = (t.r + vm.gamma * next[i] - v[i]) / scale;
        loss += delta * delta;
        dv[i] = -2.0 * delta / (scale * count);
    }
    let (grads, _) = vm.backward(&cache, &dv)?;
    Ok((loss / count, grads))
}

/// TD(0) optimiser state: online value, frozen target and Adam moments.
#[derive(Debug, Clone)]
pub struct TdTrainer {
    pub value: ValueModel,
    pub target: ValueModel,
    adam: AdamState,
    pub lr: f64,
    pub target_refresh: usize,
    pub updates: usize,
}

impl TdTrainer {
    pub fn new(value: ValueModel, lr: f64, target_refresh: usize) -> Self {
        let adam = AdamState::new(value.num_params());
        TdTrainer { target: value.clone(), value, adam, lr, target_refresh: target_refresh.max(1), updates: 0 }
    }

    pub fn update(&mut self, batch: &[&Transition]) -> Result<f64> {
        let (loss, grads) = td_loss(&self.value, &self.target, batch)?;
        if !loss.is_finite() {
            return Err(KeecError::Divergence(format!("TD loss became {loss} after {} updates", self.updates)));
        }
        adam_update(self.value.params_mut(), &grads, &mut self.adam, self.lr)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.target_refresh) {
            self.target = self.value.clone();
        }
        Ok(loss)
    }
}

/// Where latent rollouts for value learning start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitRegion {
    Evaluation,
    Collection,
    /// Collection region with the given probability, evaluation region otherwise.
    Mixed(f64),
}

impl InitRegion {
    fn sample(self, env: &EnvSpec, rng: &mut seed::Rng) -> State {
        match self {
            InitRegion::Evaluation => env.sample_initial(rng),
            InitRegion::Collection => env.sample_collection(rng),
            InitRegion::Mixed(p) => {
                if rng.random::<f64>() < p {
                    env.sample_collection(rng)
                } else {
                    env.sample_initial(rng)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueConfig {
    pub variant: ValueVariant,
    pub episodes: usize,
    /// Rollout length; the environment horizon when `None`.
    pub horizon: Option<usize>,
    pub batch_size: usize,
    pub gamma: f64,
    pub lr: f64,
    pub updates_per_episode: usize,
    pub target_refresh: usize,
    pub buffer_capacity: usize,
    /// Output scale; estimated from initial-region rewards when `None`.
    pub scale: Option<f64>,
    /// First hidden width of the MLP value; the latent dimension when `None`.
    pub width: Option<usize>,
    /// Probability of replacing the greedy action by a uniform random one.
    pub explore: f64,
    pub init_region: InitRegion,
    /// Project every predicted latent back onto the embedded manifold
    /// through `encode(decode(ẑ))`.
    pub reencode: bool,
    pub seed: u64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        ValueConfig {
            variant: ValueVariant::Mlp,
            episodes: 1000,
            horizon: None,
            batch_size: 256,
            gamma: 0.99,
            lr: 1e-3,
            updates_per_episode: 50,
            target_refresh: 100,
            buffer_capacity: 100_000,
            scale: None,
            width: None,
            explore: 0.1,
            init_region: InitRegion::Mixed(0.5),
            reencode: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEpisodeLog {
    pub episode: usize,
    /// Undiscounted model-predicted reward of the rollout.
    pub model_reward: f64,
    pub steps: usize,
    pub td_loss: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedValue {
    pub value: ValueModel,
    pub log: Vec<ValueEpisodeLog>,
    pub truncated_episodes: usize,
}

/// Reward of the decoded latent state.
pub fn latent_reward(model: &EmbeddingModel, env: &EnvSpec, z: &LatentState, a: &Action) -> Result<f64> {
    Ok(env.reward(&model.decode_one(z)?, a))
}

/// `mean |r| / (1 − γ)` over decoded initial-region states with zero action.
pub fn estimate_value_scale(
    model: &EmbeddingModel,
    env: &EnvSpec,
    region: InitRegion,
    gamma: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = seed::rng_for(seed, "value-scale", 0);
    let zero = DVector::zeros(env.action_dim());
    let samples = 256;
    let mut sum = 0.0;
    for _ in 0..samples {
        let s = region.sample(env, &mut rng);
        let z = model.encode_one(&s)?;
        sum += latent_reward(model, env, &z, &zero)?.abs();
    }
    let scale = sum / samples as f64 / (1.0 - gamma);
    Ok(if scale.is_finite() && scale > 0.0 { scale } else { 1.0 })
}

/// Model-based TD(0): greedy rollouts in the latent flow, rewards from the
/// decoded state, minibatch updates after every episode.
pub fn train_value(
    model: &EmbeddingModel,
    ops: &LatentOperators,
    env: &EnvSpec,
    cfg: &ValueConfig,
) -> Result<TrainedValue> {
    if ops.n() != model.n || ops.d() != env.action_dim() {
        return Err(dim_err("operators do not match the embedding / environment"));
    }
    if cfg.batch_size == 0 {
        return Err(KeecError::Config("value batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.explore) {
        return Err(KeecError::Config(format!("explore must lie in [0, 1], got {}", cfg.explore)));
    }
    let policy = PolicyConfig::for_env(env, cfg.gamma)?;
    let scale = match cfg.scale {
        Some(s) => s,
        None => estimate_value_scale(model, env, cfg.init_region, cfg.gamma, cfg.seed)?,
    };
    let z_star = model.encode_one(&env.goal)?;
    let mut init_rng = seed::rng_for(cfg.seed, "value-init", 0);
    let vm = match cfg.variant {
        ValueVariant::Mlp => {
            let width = cfg.width.unwrap_or(model.n);
            ValueModel::mlp_with_width(model.n, width, cfg.gamma, scale, &mut init_rng)?
        }
        ValueVariant::Quadratic => ValueModel::quadratic(z_star, cfg.gamma, scale, &mut init_rng)?,
    };
    let mut trainer = TdTrainer::new(vm, cfg.lr, cfg.target_refresh);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let horizon = cfg.horizon.unwrap_or(env.horizon);
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut truncated_episodes = 0;

    for episode in 0..cfg.episodes {
        let mut rng = seed::rng_for(cfg.seed, "value-episode", episode as u64);
        let s0 = cfg.init_region.sample(env, &mut rng);
        let mut z = model.encode_one(&s0)?;
        let mut model_reward = 0.0;
        let mut steps = 0;
        let mut truncated = false;
        for _ in 0..horizon {
            let a = if rng.random::<f64>() < cfg.explore {
                env.sample_action(&mut rng)
            } else {
                match greedy_action(ops, &trainer.value, &z, &policy) {
                    Ok(a) => a,
                    Err(KeecError::Numeric(_)) => {
                        truncated = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            };
            let r = latent_reward(model, env, &z, &a)?;
            let mut z_next = ops.predict_flow(&z, &a)?;
            if cfg.reencode && z_next.iter().all(|v| v.is_finite()) {
                z_next = model.encode_one(&model.decode_one(&z_next)?)?;
            }
            if !r.is_finite() || z_next.iter().any(|v| !v.is_finite()) {
                truncated = true;
                break;
            }
            model_reward += r;
            steps += 1;
            buffer.push(Transition { z: z.clone(), a, z_next: z_next.clone(), r });
            z = z_next;
        }
        if truncated {
            truncated_episodes += 1;
        }
        let mut loss_sum = 0.0;
        let mut sample_rng = seed::rng_for(cfg.seed, "value-batch", episode as u64);
        let updates = if buffer.is_empty() { 0 } else { cfg.updates_per_episode };
        for _ in 0..updates {
            let batch = buffer.sample(cfg.batch_size, &mut sample_rng);
            loss_sum += trainer.update(&batch)?;
        }
        log.push(ValueEpisodeLog {
            episode,
            model_reward,
            steps,
            td_loss: if updates > 0 { loss_sum / updates as f64 } else { 0.0 },
            truncated,
        });
    }
    Ok(TrainedValue { value: trainer.value, log, truncated_episodes })
}

/// One closed-loop episode on the true environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutcome {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub total_reward: f64,
    pub diverged: bool,
}

/// Runs `policy` on the true dynamics, summing undiscounted rewards.
/// A diverged step ends the episode and is scored as-is.
pub fn rollout_with(
    env: &EnvSpec,
    s0: &State,
    t_max: usize,
    mut policy: impl FnMut(&State) -> Result<Action>,
) -> Result<ControlOutcome> {
    let mut states = vec![s0.clone()];
    let mut actions = Vec::with_capacity(t_max);
    let mut rewards = Vec::with_capacity(t_max);
    let mut diverged = false;
    let mut s = s0.clone();
    for _ in 0..t_max {
        let a = env.clip_action(&policy(&s)?);
        let r = env.reward(&s, &a);
        let next = match env.step_rk4(&s, &a) {
            Ok(next) => next,
            Err(KeecError::Divergence(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        actions.push(a);
        rewards.push(r);
        states.push(next.clone());
        s = next;
    }
    let total_reward = rewards.iter().sum();
    Ok(ControlOutcome { states, actions, rewards, total_reward, diverged })
}

/// Closed loop: encode the observed state, act greedily, step the true system.
pub fn run_control(
    env: &EnvSpec,
    model: &EmbeddingModel,
    ops: &LatentOperators,
    vm: &ValueModel,
    cfg: &PolicyConfig,
    s0: &State,
    t_max: usize,
) -> Result<ControlOutcome> {
    rollout_with(env, s0, t_max, |s| {
        let z = model.encode_one(s)?;
        greedy_action(ops, vm, &z, cfg)
    })
}
