//! The embedding learner.
//!
//! An encoder/decoder pair maps (lifted) states to an `n`-dimensional latent
//! space in which the controlled dynamics are modelled as
//! `ż = P z + (U z) a`. The generator `P` and the actuation tensor `U` are
//! never trained by gradient descent: for every batch they are solved in
//! closed form from Koopman differencing, `(z⁺ − z)/Δt ≈ Λ C` with
//! `Λ = [z, z ⊗ a]`, and then used as constants while the autoencoder is
//! updated on the forward (equivariance) and isometry losses.
//!
//! One step of the latent flow under a held action is
//! `ẑ = exp(PΔt) z + Δt·φ1(PΔt)·(U z) a`.

use nalgebra::DVector;
use rand::seq::SliceRandom;

use crate::binio::{ByteReader, ByteWriter};
use crate::data::{Window, WindowDataset};
use crate::envs::{wrap_angle, EnvKind, EnvSpec, State};
use crate::error::{dim_err, KeecError, Result};
use crate::nn::{adam_step, Activation, AdamState, ForwardCache, Mlp};
use crate::numkit::{colwise_kron, exp_and_phi1_times, ridge_lstsq, Matrix};
use crate::seed;

pub type LatentState = DVector<f64>;

/// How one state component is presented to the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LiftKind {
    /// An angle, fed as (cos θ, sin θ).
    Angle,
    /// `(x − center) · scale`.
    Affine { center: f64, scale: f64 },
}

/// Fixed preprocessing between raw states and network features.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLift {
    pub kinds: Vec<LiftKind>,
}

impl StateLift {
    pub fn identity(m: usize) -> Self {
        StateLift { kinds: vec![LiftKind::Affine { center: 0.0, scale: 1.0 }; m] }
    }

    pub fn for_env(env: &EnvSpec) -> Self {
        match env.kind {
            EnvKind::Pendulum => StateLift {
                kinds: vec![LiftKind::Angle, LiftKind::Affine { center: 0.0, scale: 1.0 / 8.0 }],
            },
            EnvKind::Lorenz63 => StateLift {
                kinds: [0.0, 0.0, 25.0]
                    .iter()
                    .map(|&center| LiftKind::Affine { center, scale: 0.1 })
                    .collect(),
            },
            EnvKind::Wave => StateLift::identity(env.state_dim()),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.kinds.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.kinds
            .iter()
            .map(|k| match k {
                LiftKind::Angle => 2,
                LiftKind::Affine { .. } => 1,
            })
            .sum()
    }

    pub fn lift_into(&self, s: &State, out: &mut [f64]) {
        let mut j = 0;
        for (k, v) in self.kinds.iter().zip(s.iter()) {
            match *k {
                LiftKind::Angle => {
                    out[j] = v.cos();
                    out[j + 1] = v.sin();
                    j += 2;
                }
                LiftKind::Affine { center, scale } => {
                    out[j] = (v - center) * scale;
                    j += 1;
                }
            }
        }
    }

    pub fn lift_batch<'a>(&self, states: impl ExactSizeIterator<Item = &'a State>) -> Matrix {
        let f = self.feature_dim();
        let mut out = Matrix::zeros(states.len(), f);
        let mut row = vec![0.0; f];
        for (i, s) in states.enumerate() {
            self.lift_into(s, &mut row);
            for (j, v) in row.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        out
    }

    pub fn unlift(&self, features: &[f64]) -> State {
        let mut s = DVector::zeros(self.kinds.len());
        let mut j = 0;
        for (i, k) in self.kinds.iter().enumerate() {
            match *k {
                LiftKind::Angle => {
                    s[i] = wrap_angle(features[j + 1].atan2(features[j]));
                    j += 2;
                }
                LiftKind::Affine { center, scale } => {
                    s[i] = features[j] / scale + center;
                    j += 1;
                }
            }
        }
        s
    }

    fn write(&self, w: &mut ByteWriter) {
        w.u64(self.kinds.len() as u64);
        for k in &self.kinds {
            match *k {
                LiftKind::Angle => {
                    w.u8(1);
                    w.f64(0.0);
                    w.f64(0.0);
                }
                LiftKind::Affine { center, scale } => {
                    w.u8(0);
                    w.f64(center);
                    w.f64(scale);
                }
            }
        }
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let n = r.len(1 << 20)?;
        let mut kinds = Vec::with_capacity(n);
        for _ in 0..n {
            let tag = r.u8()?;
            let (center, scale) = (r.f64()?, r.f64()?);
            kinds.push(match tag {
                1 => LiftKind::Angle,
                0 => LiftKind::Affine { center, scale },
                t => return Err(KeecError::Format(format!("unknown lift tag {t}"))),
            });
        }
        Ok(StateLift { kinds })
    }
}

/// Encoder/decoder pair and the isometry weight.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub lift: StateLift,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub n: usize,
    pub lambda_met: f64,
}

impl EmbeddingModel {
    /// Encoder `f → n/2 → n → n → n` (tanh, tanh, tanh, linear) and decoder
    /// `n → n → n/2 → n/2 → f` (tanh, tanh, tanh, linear), `f` the lifted width.
    pub fn new(lift: StateLift, n: usize, lambda_met: f64, rng: &mut seed::Rng) -> Result<Self> {
        Self::with_width(lift, n, n / 2, lambda_met, rng)
    }

    /// Like [`EmbeddingModel::new`] with `narrow` replacing the `n/2` layers.
    pub fn with_width(
        lift: StateLift,
        n: usize,
        narrow: usize,
        lambda_met: f64,
        rng: &mut seed::Rng,
    ) -> Result<Self> {
        if narrow == 0 {
            return Err(KeecError::Config("embedding width must be positive".into()));
        }
        if n < 2 || !n.is_multiple_of(2) {
            return Err(KeecError::Config(format!("latent dimension must be even and >= 2, got {n}")));
        }
        if !(0.0..=1.0).contains(&lambda_met) {
            return Err(KeecError::Config(format!("lambda_met must lie in [0, 1], got {lambda_met}")));
        }
        let f = lift.feature_dim();
        let t = Activation::Tanh;
        let encoder = Mlp::init(&[f, narrow, n, n, n], &[t, t, t, Activation::None], rng)?;
        let decoder = Mlp::init(&[n, n, narrow, narrow, f], &[t, t, t, Activation::None], rng)?;
        Ok(EmbeddingModel { lift, encoder, decoder, n, lambda_met })
    }

    pub fn for_env(env: &EnvSpec, n: usize, lambda_met: f64, rng: &mut seed::Rng) -> Result<Self> {
        Self::new(StateLift::for_env(env), n, lambda_met, rng)
    }

    /// Batch encode; row i of the result is the latent state of `states[i]`.
    pub fn encode(&self, states: &[State]) -> Result<Matrix> {
        self.check_states(states)?;
        self.encoder.predict(&self.lift.lift_batch(states.iter()))
    }

    pub fn encode_one(&self, s: &State) -> Result<LatentState> {
        let z = self.encode(std::slice::from_ref(s))?;
        Ok(z.row(0).transpose())
    }

    pub fn decode(&self, z: &Matrix) -> Result<Vec<State>> {
        let feats = self.decoder.predict(z)?;
        Ok(feats
            .row_iter()
            .map(|row| {
                let v: Vec<f64> = row.iter().copied().collect();
                self.lift.unlift(&v)
            })
            .collect())
    }

    pub fn decode_one(&self, z: &LatentState) -> Result<State> {
        let zb = Matrix::from_row_slice(1, z.len(), z.as_slice());
        Ok(self.decode(&zb)?.remove(0))
    }

    fn check_states(&self, states: &[State]) -> Result<()> {
        let m = self.lift.state_dim();
        if let Some(s) = states.iter().find(|s| s.len() != m) {
            return Err(dim_err(format!("encoder expects {m}-dim states, got {}", s.len())));
        }
        Ok(())
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.u64(self.n as u64);
        w.f64(self.lambda_met);
        self.lift.write(w);
        self.encoder.write(w);
        self.decoder.write(w);
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let n = r.len(1 << 16)?;
        let lambda_met = r.f64()?;
        let lift = StateLift::read(r)?;
        let encoder = Mlp::read(r)?;
        let decoder = Mlp::read(r)?;
        let f = lift.feature_dim();
        if encoder.in_dim() != f || encoder.out_dim() != n || decoder.in_dim() != n || decoder.out_dim() != f {
            return Err(KeecError::Format("encoder/decoder widths do not mirror".into()));
        }
        Ok(EmbeddingModel { lift, encoder, decoder, n, lambda_met })
    }
}

/// Latent generator `P` (n×n) and actuation tensor `U` (n×d×n), with the
/// one-step flow matrices cached for a fixed Δt.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentOperators {
    p: Matrix,
    /// `u[k][(i, j)] = U[i, k, j]`, so `(U z)[:, k] = u[k] · z`.
    u: Vec<Matrix>,
    dt: f64,
    exp_p: Matrix,
    dt_phi1: Matrix,
}

impl LatentOperators {
    pub fn new(p: Matrix, u: Vec<Matrix>, dt: f64) -> Result<Self> {
        let n = p.nrows();
        if p.ncols() != n || u.iter().any(|m| m.shape() != (n, n)) {
            return Err(dim_err("operator blocks must all be n x n"));
        }
        if !(dt > 0.0) {
            return Err(KeecError::Config(format!("dt must be positive, got {dt}")));
        }
        if u.iter().flat_map(|m| m.iter()).any(|v| !v.is_finite()) {
            return Err(KeecError::Numeric("actuation tensor has non-finite entries".into()));
        }
        let (exp_p, dt_phi1) = exp_and_phi1_times(&(&p * dt), &(Matrix::identity(n, n) * dt))?;
        Ok(LatentOperators { p, u, dt, exp_p, dt_phi1 })
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn d(&self) -> usize {
        self.u.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn generator(&self) -> &Matrix {
        &self.p
    }

    pub fn actuation_blocks(&self) -> &[Matrix] {
        &self.u
    }

    pub fn exp_p_dt(&self) -> &Matrix {
        &self.exp_p
    }

    /// Δt·φ1(PΔt) = P⁻¹(exp(PΔt) − I) wherever P is invertible.
    pub fn dt_phi1(&self) -> &Matrix {
        &self.dt_phi1
    }

    /// Same operators, caches rebuilt for another step length.
    pub fn with_dt(&self, dt: f64) -> Result<Self> {
        Self::new(self.p.clone(), self.u.clone(), dt)
    }

    /// (U z) as an n×d matrix.
    pub fn actuation(&self, z: &LatentState) -> Matrix {
        let n = self.n();
        let mut out = Matrix::zeros(n, self.d());
        for (k, uk) in self.u.iter().enumerate() {
            out.set_column(k, &(uk * z));
        }
        out
    }

    /// Σ_k a_k U_k, the z-Jacobian of (U z) a.
    pub fn actuation_jacobian(&self, a: &DVector<f64>) -> Matrix {
        let n = self.n();
        let mut g = Matrix::zeros(n, n);
        for (uk, ak) in self.u.iter().zip(a.iter()) {
            g += uk * *ak;
        }
        g
    }

    /// Latent vector field P z + (U z) a.
    pub fn vector_field(&self, z: &LatentState, a: &DVector<f64>) -> LatentState {
        &self.p * z + self.actuation(z) * a
    }

    /// The linear map z ↦ ẑ for a held action: exp(PΔt) + Δt·φ1(PΔt)·Σ a_k U_k.
    pub fn transition_matrix(&self, a: &DVector<f64>) -> Matrix {
        &self.exp_p + &self.dt_phi1 * self.actuation_jacobian(a)
    }

    /// One step of the equivariant flow.
    pub fn predict_flow(&self, z: &LatentState, a: &DVector<f64>) -> Result<LatentState> {
        if z.len() != self.n() || a.len() != self.d() {
            return Err(dim_err(format!(
                "predict_flow: operators are n={} d={}, got z {} a {}",
                self.n(),
                self.d(),
                z.len(),
                a.len()
            )));
        }
        Ok(&self.exp_p * z + &self.dt_phi1 * (self.actuation(z) * a))
    }

    /// The regression coefficients laid out as in the closed-form solve:
    /// rows `0..n` hold Pᵀ, row `n + j·d + k` holds U[:, k, j].
    pub fn coefficient_matrix(&self) -> Matrix {
        let (n, d) = (self.n(), self.d());
        let mut c = Matrix::zeros(n + n * d, n);
        c.view_mut((0, 0), (n, n)).copy_from(&self.p.transpose());
        for j in 0..n {
            for k in 0..d {
                for i in 0..n {
                    c[(n + j * d + k, i)] = self.u[k][(i, j)];
                }
            }
        }
        c
    }

    fn from_coefficients(c: &Matrix, n: usize, d: usize, dt: f64) -> Result<Self> {
        let p = c.view((0, 0), (n, n)).transpose();
        let mut u = vec![Matrix::zeros(n, n); d];
        for j in 0..n {
            for (k, uk) in u.iter_mut().enumerate() {
                for i in 0..n {
                    uk[(i, j)] = c[(n + j * d + k, i)];
                }
            }
        }
        Self::new(p, u, dt)
    }

    /// Entry-wise mean of several operator estimates.
    pub fn average(ops: &[LatentOperators]) -> Result<Self> {
        let first = ops.first().ok_or_else(|| KeecError::State("no operators to average".into()))?;
        let mut c = Matrix::zeros(first.n() + first.n() * first.d(), first.n());
        for o in ops {
            c += o.coefficient_matrix();
        }
        c /= ops.len() as f64;
        Self::from_coefficients(&c, first.n(), first.d(), first.dt)
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.u64(self.n() as u64);
        w.u64(self.d() as u64);
        w.f64(self.dt);
        w.matrix_rows(&self.p);
        // tensor in [i][k][j] order
        for i in 0..self.n() {
            for uk in &self.u {
                for j in 0..self.n() {
                    w.f64(uk[(i, j)]);
                }
            }
        }
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let n = r.len(1 << 16)?;
        let d = r.len(1 << 16)?;
        let dt = r.f64()?;
        let p = r.matrix_rows(n, n)?;
        let mut u = vec![Matrix::zeros(n, n); d];
        for i in 0..n {
            for uk in u.iter_mut() {
                for j in 0..n {
                    uk[(i, j)] = r.f64()?;
                }
            }
        }
        Self::new(p, u, dt)
    }
}

/// Least-squares generator and actuation from latent transitions.
///
/// Rows of `z`, `z_plus` and `a` are paired samples `(z_t, z_{t+Δt}, a_t)`.
pub fn identify_operators(
    z: &Matrix,
    z_plus: &Matrix,
    a: &Matrix,
    dt: f64,
    eps: f64,
) -> Result<LatentOperators> {
    if z.shape() != z_plus.shape() || a.nrows() != z.nrows() {
        return Err(dim_err(format!(
            "identify_operators: z {:?}, z_plus {:?}, a {:?}",
            z.shape(),
            z_plus.shape(),
            a.shape()
        )));
    }
    if !(dt > 0.0) {
        return Err(KeecError::Config(format!("dt must be positive, got {dt}")));
    }
    let (rows, n, d) = (z.nrows(), z.ncols(), a.ncols());
    let kron = colwise_kron(z, a)?;
    let mut lambda = Matrix::zeros(rows, n + n * d);
    lambda.view_mut((0, 0), (rows, n)).copy_from(z);
    lambda.view_mut((0, n), (rows, n * d)).copy_from(&kron);
    let target = (z_plus - z) / dt;
    let c = ridge_lstsq(&lambda, &target, eps)?;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(KeecError::Numeric("operator solve produced non-finite values".into()));
    }
    LatentOperators::from_coefficients(&c, n, d, dt)
}

/// Encoder and decoder gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Loss components for one batch of windows, averaged over batch and window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    /// One-step prediction term of the forward loss.
    pub prediction: f64,
    /// Autoencoder identity term of the forward loss.
    pub reconstruction: f64,
    pub isometry: f64,
}

impl LossParts {
    pub fn forward(&self) -> f64 {
        self.prediction + self.reconstruction
    }

    pub fn total(&self, lambda_met: f64) -> f64 {
        (1.0 - lambda_met) * self.forward() + lambda_met * self.isometry
    }
}

/// Encoded batch: features, latents and the encoder cache.
struct EncodedBatch {
    features: Matrix,
    latents: Matrix,
    cache: ForwardCache,
    /// Windows in the batch and their length.
    count: usize,
    len: usize,
}

impl EncodedBatch {
    fn new(model: &EmbeddingModel, windows: &[Window<'_>]) -> Result<Self> {
        let len = windows.first().map_or(0, |w| w.len());
        if len == 0 || windows.iter().any(|w| w.len() != len) {
            return Err(dim_err("windows must be non-empty and of equal length"));
        }
        let states: Vec<&State> = windows.iter().flat_map(|w| w.states.iter()).collect();
        if let Some(s) = states.iter().find(|s| s.len() != model.lift.state_dim()) {
            return Err(dim_err(format!(
                "encoder expects {}-dim states, got {}",
                model.lift.state_dim(),
                s.len()
            )));
        }
        let features = model.lift.lift_batch(states.into_iter());
        let (latents, cache) = model.encoder.forward(&features)?;
        Ok(EncodedBatch { features, latents, cache, count: windows.len(), len })
    }

    fn row(&self, b: usize, t: usize) -> usize {
        b * (self.len + 1) + t
    }

    /// (z_t, z_{t+1}, a_t) rows for identification.
    fn transition_rows(&self, windows: &[Window<'_>]) -> (Matrix, Matrix, Matrix) {
        let n = self.latents.ncols();
        let d = windows[0].actions[0].len();
        let rows = self.count * self.len;
        let mut z = Matrix::zeros(rows, n);
        let mut zp = Matrix::zeros(rows, n);
        let mut a = Matrix::zeros(rows, d);
        for (b, w) in windows.iter().enumerate() {
            for t in 0..self.len {
                let r = b * self.len + t;
                z.set_row(r, &self.latents.row(self.row(b, t)));
                zp.set_row(r, &self.latents.row(self.row(b, t + 1)));
                for k in 0..d {
                    a[(r, k)] = w.actions[t][k];
                }
            }
        }
        (z, zp, a)
    }
}

#[inline]
fn unit_or_zero(v: &DVector<f64>) -> (f64, DVector<f64>) {
    let norm = v.norm();
    if norm > 0.0 {
        (norm, v / norm)
    } else {
        (0.0, DVector::zeros(v.len()))
    }
}

fn row_vec(m: &Matrix, r: usize) -> DVector<f64> {
    m.row(r).transpose()
}

fn add_row(m: &mut Matrix, r: usize, v: &DVector<f64>, scale: f64) {
    let mut row = m.fixed_rows_mut::<1>(r);
    for (j, x) in v.iter().enumerate() {
        row[j] += scale * x;
    }
}

/// Loss parts and the gradients of `w_fwd·E_fwd + w_met·E_met`.
///
/// Gradients reach the encoder through z_t inside the flow prediction but the
/// operators themselves are held constant.
fn weighted_loss(
    model: &EmbeddingModel,
    ops: &LatentOperators,
    windows: &[Window<'_>],
    batch: &EncodedBatch,
    w_fwd: f64,
    w_met: f64,
) -> Result<(LossParts, EmbeddingGrads)> {
    let n = model.n;
    let (count, len) = (batch.count, batch.len);
    if ops.n() != n || windows[0].actions[0].len() != ops.d() {
        return Err(dim_err("operators do not match the model / action dimension"));
    }
    let z = &batch.latents;
    let feats = &batch.features;
    let all_rows = count * (len + 1);
    let step_rows = count * len;
    let mut dz = Matrix::zeros(all_rows, n);

    // reconstruction over every state of every window
    let (recon, rcache) = model.decoder.forward(z)?;
    let mut d_recon = Matrix::zeros(all_rows, feats.ncols());
    let mut recon_sum = 0.0;
    for r in 0..all_rows {
        let e = row_vec(&recon, r) - row_vec(feats, r);
        let (norm, unit) = unit_or_zero(&e);
        recon_sum += norm;
        add_row(&mut d_recon, r, &unit, w_fwd / all_rows as f64);
    }
    let (dz_recon, g_dec_recon) = model.decoder.backward(&rcache, &d_recon)?;
    dz += dz_recon;

    // one-step flow prediction
    let mut zhat = Matrix::zeros(step_rows, n);
    let mut transitions = Vec::with_capacity(step_rows);
    for (b, w) in windows.iter().enumerate() {
        for t in 0..len {
            let m = ops.transition_matrix(&w.actions[t]);
            let zt = row_vec(z, batch.row(b, t));
            zhat.set_row(b * len + t, &(&m * zt).transpose());
            transitions.push(m);
        }
    }
    let (pred, pcache) = model.decoder.forward(&zhat)?;
    let mut d_pred = Matrix::zeros(step_rows, feats.ncols());
    let mut pred_sum = 0.0;
    let mut iso_sum = 0.0;
    for b in 0..count {
        for t in 0..len {
            let r = b * len + t;
            let next = batch.row(b, t + 1);
            let e = row_vec(&pred, r) - row_vec(feats, next);
            let (norm, unit) = unit_or_zero(&e);
            pred_sum += norm;
            add_row(&mut d_pred, r, &unit, w_fwd / step_rows as f64);

            let cur = batch.row(b, t);
            let dlat = row_vec(z, next) - row_vec(z, cur);
            let dobs = row_vec(feats, next) - row_vec(feats, cur);
            let (lat_norm, lat_unit) = unit_or_zero(&dlat);
            let gap = lat_norm - dobs.norm();
            iso_sum += gap.abs();
            let g = w_met * gap.signum() / step_rows as f64;
            if gap != 0.0 {
                add_row(&mut dz, next, &lat_unit, g);
                add_row(&mut dz, cur, &lat_unit, -g);
            }
        }
    }
    let (dzhat, g_dec_pred) = model.decoder.backward(&pcache, &d_pred)?;
    for (b, _) in windows.iter().enumerate() {
        for t in 0..len {
            let r = b * len + t;
            let back = transitions[r].transpose() * row_vec(&dzhat, r);
            add_row(&mut dz, batch.row(b, t), &back, 1.0);
        }
    }

    let (_, g_enc) = model.encoder.backward(&batch.cache, &dz)?;
    let mut g_dec = g_dec_recon;
    g_dec.add_scaled(&g_dec_pred, 1.0);
    let parts = LossParts {
        prediction: pred_sum / step_rows as f64,
        reconstruction: recon_sum / all_rows as f64,
        isometry: iso_sum / step_rows as f64,
    };
    Ok((parts, EmbeddingGrads { encoder: g_enc, decoder: g_dec }))
}

/// Forward (equivariance) loss: one-step prediction error of the decoded
/// flow plus the autoencoder identity error, each averaged.
pub fn forward_loss(
    model: &EmbeddingModel,
    ops: &LatentOperators,
    windows: &[Window<'_>],
) -> Result<(f64, EmbeddingGrads)> {
    let batch = EncodedBatch::new(model, windows)?;
    let (parts, g) = weighted_loss(model, ops, windows, &batch, 1.0, 0.0)?;
    Ok((parts.forward(), g))
}

/// Isometry loss: mean |‖z_{t+1} − z_t‖ − ‖s_{t+1} − s_t‖| in lifted coordinates.
pub fn isometry_loss(model: &EmbeddingModel, windows: &[Window<'_>]) -> Result<(f64, EmbeddingGrads)> {
    let batch = EncodedBatch::new(model, windows)?;
    let d = windows[0].actions[0].len();
    let ops = LatentOperators::new(Matrix::zeros(model.n, model.n), vec![Matrix::zeros(model.n, model.n); d], 1.0)?;
    let (parts, g) = weighted_loss(model, &ops, windows, &batch, 0.0, 1.0)?;
    Ok((parts.isometry, g))
}

/// (1 − λ)·E_fwd + λ·E_met with λ = `model.lambda_met`.
pub fn total_loss(
    model: &EmbeddingModel,
    ops: &LatentOperators,
    windows: &[Window<'_>],
) -> Result<(f64, LossParts, EmbeddingGrads)> {
    let batch = EncodedBatch::new(model, windows)?;
    let lam = model.lambda_met;
    let (parts, g) = weighted_loss(model, ops, windows, &batch, 1.0 - lam, lam)?;
    Ok((parts.total(lam), parts, g))
}

/// Mean |‖Δz‖ − ‖Δs‖| over a set of windows, the embedding's distortion statistic.
pub fn distortion(model: &EmbeddingModel, data: &WindowDataset) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let chunk: Vec<usize> = (0..data.len()).collect();
    for idx in chunk.chunks(512) {
        let windows: Vec<Window<'_>> = idx.iter().map(|&i| data.window(i)).collect();
        let batch = EncodedBatch::new(model, &windows)?;
        for b in 0..batch.count {
            for t in 0..batch.len {
                let (cur, next) = (batch.row(b, t), batch.row(b, t + 1));
                let dl = (row_vec(&batch.latents, next) - row_vec(&batch.latents, cur)).norm();
                let ds = (row_vec(&batch.features, next) - row_vec(&batch.features, cur)).norm();
                sum += (dl - ds).abs();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean ‖decode(encode(s)) − s‖ in lifted coordinates.
pub fn reconstruction_error(model: &EmbeddingModel, states: &[State]) -> Result<f64> {
    if states.is_empty() {
        return Ok(0.0);
    }
    let feats = model.lift.lift_batch(states.iter());
    let z = model.encoder.predict(&feats)?;
    let back = model.decoder.predict(&z)?;
    Ok((back - &feats).row_iter().map(|r| r.norm()).sum::<f64>() / states.len() as f64)
}

/// Mean latent one-step error ‖ẑ_{t+1} − encode(s_{t+1})‖ over windows.
pub fn latent_prediction_error(
    model: &EmbeddingModel,
    ops: &LatentOperators,
    data: &WindowDataset,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for w in data.windows() {
        let z = model.encode(w.states)?;
        for t in 0..w.len() {
            let pred = ops.predict_flow(&row_vec(&z, t), &w.actions[t])?;
            sum += (pred - row_vec(&z, t + 1)).norm();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingConfig {
    pub n: usize,
    pub lambda_met: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub eps: f64,
    pub ema_momentum: f64,
    /// Width of the narrow encoder/decoder layers; `n/2` when `None`.
    pub narrow: Option<usize>,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            n: 8,
            lambda_met: 0.3,
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            lr_decay: 0.99,
            eps: 1e-3,
            ema_momentum: 0.99,
            narrow: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub forward: f64,
    pub isometry: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedEmbedding {
    pub model: EmbeddingModel,
    /// Plain average of the per-batch solutions of the final epoch.
    pub operators: LatentOperators,
    /// Exponential moving average of the per-batch solutions across training.
    pub ema_operators: LatentOperators,
    pub log: Vec<EpochLog>,
}

fn lerp_ops(ema: &LatentOperators, new: &LatentOperators, momentum: f64) -> Result<LatentOperators> {
    let c = ema.coefficient_matrix() * momentum + new.coefficient_matrix() * (1.0 - momentum);
    LatentOperators::from_coefficients(&c, ema.n(), ema.d(), ema.dt)
}

/// Alternates closed-form operator identification with Adam steps on the
/// autoencoder, one batch of windows at a time. Each batch's loss uses the
/// moving average of the per-batch solutions, current batch included.
pub fn train_embedding(
    data: &WindowDataset,
    env: &EnvSpec,
    cfg: &EmbeddingConfig,
) -> Result<TrainedEmbedding> {
    if data.source.state_dim != env.state_dim() || data.source.action_dim != env.action_dim() {
        return Err(dim_err("dataset dimensions do not match the environment"));
    }
    train_embedding_lifted(data, StateLift::for_env(env), env.dt, cfg)
}

/// [`train_embedding`] with an explicit state lift and step length.
pub fn train_embedding_lifted(
    data: &WindowDataset,
    lift: StateLift,
    dt: f64,
    cfg: &EmbeddingConfig,
) -> Result<TrainedEmbedding> {
    if data.is_empty() {
        return Err(KeecError::State("training set has no windows".into()));
    }
    if cfg.batch_size == 0 {
        return Err(KeecError::Config("batch size must be positive".into()));
    }
    if data.source.state_dim != lift.state_dim() {
        return Err(dim_err("dataset state dimension does not match the lift"));
    }
    let mut init_rng = seed::rng_for(cfg.seed, "embedding-init", 0);
    let narrow = cfg.narrow.unwrap_or(cfg.n / 2);
    let mut model = EmbeddingModel::with_width(lift, cfg.n, narrow, cfg.lambda_met, &mut init_rng)?;
    let mut adam_enc = AdamState::for_net(&model.encoder);
    let mut adam_dec = AdamState::for_net(&model.decoder);
    let mut lr = cfg.lr;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut ema: Option<LatentOperators> = None;
    let mut last_epoch_ops: Vec<LatentOperators> = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs.max(1) {
        let training = epoch < cfg.epochs;
        order.shuffle(&mut seed::rng_for(cfg.seed, "embedding-epoch", epoch as u64));
        let mut sums = LossParts::default();
        let mut seen = 0usize;
        let final_epoch = epoch + 1 >= cfg.epochs;
        if final_epoch {
            last_epoch_ops.clear();
        }
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let windows: Vec<Window<'_>> = idx.iter().map(|&i| data.window(i)).collect();
            let batch = EncodedBatch::new(&model, &windows)?;
            let (zs, zp, acts) = batch.transition_rows(&windows);
            let ops = identify_operators(&zs, &zp, &acts, dt, cfg.eps)?;
            let smoothed = match &ema {
                None => ops.clone(),
                Some(e) => lerp_ops(e, &ops, cfg.ema_momentum)?,
            };
            let lam = model.lambda_met;
            let (parts, grads) = weighted_loss(&model, &smoothed, &windows, &batch, 1.0 - lam, lam)?;
            let total = parts.total(lam);
            if !total.is_finite() {
                return Err(KeecError::Divergence(format!(
                    "embedding loss became {total} at epoch {epoch}, batch {bi} \
                     (prediction {}, reconstruction {}, isometry {})",
                    parts.prediction, parts.reconstruction, parts.isometry
                )));
            }
            if training {
                adam_step(&mut model.encoder, &grads.encoder, &mut adam_enc, lr)?;
                adam_step(&mut model.decoder, &grads.decoder, &mut adam_dec, lr)?;
            }
            let w = idx.len() as f64;
            sums.prediction += parts.prediction * w;
            sums.reconstruction += parts.reconstruction * w;
            sums.isometry += parts.isometry * w;
            seen += idx.len();
            ema = Some(smoothed);
            if final_epoch {
                last_epoch_ops.push(ops);
            }
        }
        let s = seen as f64;
        let mean = LossParts {
            prediction: sums.prediction / s,
            reconstruction: sums.reconstruction / s,
            isometry: sums.isometry / s,
        };
        if training {
            log.push(EpochLog {
                epoch,
                lr,
                total: mean.total(model.lambda_met),
                forward: mean.forward(),
                isometry: mean.isometry,
            });
            lr *= cfg.lr_decay;
        }
    }
    let operators = LatentOperators::average(&last_epoch_ops)?;
    let ema_operators = ema.expect("at least one batch was processed");
    Ok(TrainedEmbedding { model, operators, ema_operators, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_random_trajectories, slice_windows};
    use rand::{Rng as _, SeedableRng};

    fn rng(seed: u64) -> seed::Rng {
        seed::Rng::seed_from_u64(seed)
    }

    fn rand_mat(r: &mut seed::Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| scale * r.random_range(-1.0..1.0))
    }

    fn random_ops(r: &mut seed::Rng, n: usize, d: usize, dt: f64) -> LatentOperators {
        let p = rand_mat(r, n, n, 0.5);
        let u = (0..d).map(|_| rand_mat(r, n, n, 0.5)).collect();
        LatentOperators::new(p, u, dt).unwrap()
    }

    #[test]
    fn lift_round_trip() {
        let lift = StateLift::for_env(&EnvSpec::pendulum());
        assert_eq!(lift.feature_dim(), 3);
        let s = DVector::from_vec(vec![-3.0, 5.0]);
        let mut f = vec![0.0; 3];
        lift.lift_into(&s, &mut f);
        let back = lift.unlift(&f);
        assert!((back - s).amax() < 1e-12);
    }

    #[test]
    fn zero_weight_encoder_outputs_bias() {
        let env = EnvSpec::lorenz63();
        let mut model = EmbeddingModel::for_env(&env, 4, 0.3, &mut rng(0)).unwrap();
        let last = model.encoder.layers.len() - 1;
        for l in &mut model.encoder.layers {
            l.weight.fill(0.0);
        }
        model.encoder.layers[last].bias = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let states: Vec<State> = (0..3).map(|i| DVector::from_element(3, i as f64)).collect();
        let z = model.encode(&states).unwrap();
        for row in z.row_iter() {
            assert_eq!(row.iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn batch_encoding_is_consistent() {
        let env = EnvSpec::pendulum();
        let model = EmbeddingModel::for_env(&env, 8, 0.3, &mut rng(1)).unwrap();
        let mut r = rng(2);
        let states: Vec<State> = (0..5).map(|_| env.sample_collection(&mut r)).collect();
        let z = model.encode(&states).unwrap();
        for (i, s) in states.iter().enumerate() {
            let single = model.encode_one(s).unwrap();
            assert!((single - z.row(i).transpose()).amax() < 1e-15);
        }
        assert!(model.encode(&[DVector::zeros(3)]).is_err());
    }

    #[test]
    fn identify_zero_difference_without_actions() {
        let mut r = rng(3);
        let z = rand_mat(&mut r, 20, 3, 1.0);
        let ops = identify_operators(&z, &z, &Matrix::zeros(20, 0), 0.1, 1e-3).unwrap();
        assert_eq!(ops.d(), 0);
        assert!(ops.generator().amax() < 1e-15);
    }

    #[test]
    fn identify_is_row_permutation_invariant() {
        let mut r = rng(4);
        let z = rand_mat(&mut r, 30, 2, 1.0);
        let zp = rand_mat(&mut r, 30, 2, 1.0);
        let a = rand_mat(&mut r, 30, 1, 1.0);
        let ops = identify_operators(&z, &zp, &a, 0.1, 1e-3).unwrap();
        let perm: Vec<usize> = (0..30).rev().collect();
        let pick = |m: &Matrix| Matrix::from_fn(30, m.ncols(), |i, j| m[(perm[i], j)]);
        let ops2 = identify_operators(&pick(&z), &pick(&zp), &pick(&a), 0.1, 1e-3).unwrap();
        assert!((ops.coefficient_matrix() - ops2.coefficient_matrix()).amax() < 1e-10);
    }

    #[test]
    fn identify_recovers_linear_generator() {
        let mut r = rng(5);
        let n = 4;
        let p0 = Matrix::from_row_slice(
            4,
            4,
            &[-0.5, 1.0, 0.0, 0.0, -1.0, -0.5, 0.0, 0.0, 0.0, 0.0, -0.2, 0.3, 0.0, 0.0, 0.0, -1.0],
        );
        let dt = 1e-3;
        // exact one-step map from a 40-term series, independent of mat_exp
        let mut step = Matrix::identity(n, n);
        let mut term = Matrix::identity(n, n);
        for k in 1..40 {
            term = &term * (&p0 * dt) / k as f64;
            step += &term;
        }
        let z = rand_mat(&mut r, 2000, n, 1.0);
        let zp = &z * step.transpose();
        let ops = identify_operators(&z, &zp, &Matrix::zeros(2000, 0), dt, 1e-3).unwrap();
        let rel = (ops.generator() - &p0).norm() / p0.norm();
        assert!(rel < 1e-2, "relative error {rel}");
    }

    #[test]
    fn flow_without_action_is_homogeneous() {
        let mut r = rng(6);
        let ops = random_ops(&mut r, 4, 2, 0.1);
        let z = DVector::from_fn(4, |_, _| r.random_range(-1.0..1.0));
        let pred = ops.predict_flow(&z, &DVector::zeros(2)).unwrap();
        assert!((pred - ops.exp_p_dt() * &z).amax() < 1e-15);
    }

    #[test]
    fn flow_with_zero_generator() {
        let mut r = rng(7);
        let u: Vec<Matrix> = (0..2).map(|_| rand_mat(&mut r, 3, 3, 1.0)).collect();
        let ops = LatentOperators::new(Matrix::zeros(3, 3), u, 0.05).unwrap();
        let z = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        let a = DVector::from_vec(vec![0.7, -1.1]);
        let pred = ops.predict_flow(&z, &a).unwrap();
        let expected = &z + ops.actuation(&z) * &a * 0.05;
        assert!((pred - expected).amax() < 1e-14);
    }

    /// ż = P z + (U z) a with a frozen is linear; integrate it finely with RK4.
    fn rk4_latent(ops: &LatentOperators, z: &LatentState, a: &DVector<f64>, t: f64) -> LatentState {
        let steps = 2000;
        let h = t / steps as f64;
        let mut y = z.clone();
        for _ in 0..steps {
            let k1 = ops.vector_field(&y, a);
            let k2 = ops.vector_field(&(&y + &k1 * (h / 2.0)), a);
            let k3 = ops.vector_field(&(&y + &k2 * (h / 2.0)), a);
            let k4 = ops.vector_field(&(&y + &k3 * h), a);
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        y
    }

    #[test]
    fn flow_error_is_second_order_in_dt() {
        let mut r = rng(8);
        let ops = random_ops(&mut r, 4, 2, 0.2);
        let z = DVector::from_fn(4, |_, _| r.random_range(-1.0..1.0));
        let a = DVector::from_vec(vec![0.8, -0.4]);
        let mut errors = Vec::new();
        for dt in [0.2, 0.1, 0.05] {
            let o = ops.with_dt(dt).unwrap();
            let err = (o.predict_flow(&z, &a).unwrap() - rk4_latent(&o, &z, &a, dt)).norm();
            errors.push(err);
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 3.0 && ratio < 5.0, "halving ratio {ratio}");
        }
    }

    #[test]
    fn two_half_steps_agree_to_second_order() {
        let mut r = rng(9);
        let base = random_ops(&mut r, 3, 1, 0.1);
        let z = DVector::from_fn(3, |_, _| r.random_range(-1.0..1.0));
        let a = DVector::from_element(1, 0.5);
        let mut gaps = Vec::new();
        for dt in [0.1, 0.05, 0.025] {
            let full = base.with_dt(dt).unwrap();
            let half = base.with_dt(dt / 2.0).unwrap();
            let one = full.predict_flow(&z, &a).unwrap();
            let two = half.predict_flow(&half.predict_flow(&z, &a).unwrap(), &a).unwrap();
            gaps.push((one - two).norm());
        }
        assert!(gaps[0] / gaps[1] > 3.0 && gaps[1] / gaps[2] > 3.0, "{gaps:?}");
    }

    #[test]
    fn operator_serialisation_round_trip() {
        let ops = random_ops(&mut rng(10), 3, 2, 0.1);
        let mut w = ByteWriter::new();
        ops.write(&mut w);
        let back = LatentOperators::read(&mut ByteReader::new(&w.buf)).unwrap();
        assert_eq!(back, ops);
    }

    #[test]
    fn total_loss_mixes_components() {
        let parts = LossParts { prediction: 1.5, reconstruction: 0.5, isometry: 1.0 };
        assert!((parts.total(0.3) - 1.7).abs() < 1e-15);
        assert_eq!(parts.total(0.0), parts.forward());
        assert_eq!(parts.total(1.0), parts.isometry);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let env = EnvSpec::pendulum();
        let ts = generate_random_trajectories(&env, 3, 12, 21).unwrap();
        let wd = slice_windows(&ts, 4, None);
        let windows: Vec<Window<'_>> = (0..4).map(|i| wd.window(i)).collect();
        let model = EmbeddingModel::for_env(&env, 4, 0.4, &mut rng(22)).unwrap();
        let ops = random_ops(&mut rng(23), 4, 1, env.dt);
        let (_, _, grads) = total_loss(&model, &ops, &windows).unwrap();
        let loss = |m: &EmbeddingModel| total_loss(m, &ops, &windows).unwrap().0;
        let h = 1e-6;
        for net in 0..2 {
            let analytic: Vec<f64> = if net == 0 {
                grads.encoder.params().copied().collect()
            } else {
                grads.decoder.params().copied().collect()
            };
            for idx in (0..analytic.len()).step_by(7) {
                let mut plus = model.clone();
                let mut minus = model.clone();
                {
                    let (p, m) = if net == 0 {
                        (&mut plus.encoder, &mut minus.encoder)
                    } else {
                        (&mut plus.decoder, &mut minus.decoder)
                    };
                    *p.params_mut().nth(idx).unwrap() += h;
                    *m.params_mut().nth(idx).unwrap() -= h;
                }
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let err = (numeric - analytic[idx]).abs();
                assert!(err < 1e-5 * (1.0 + numeric.abs()), "net {net} param {idx}: {numeric} vs {}", analytic[idx]);
            }
        }
    }

    #[test]
    fn short_training_run_is_deterministic() {
        let env = EnvSpec::pendulum();
        let ts = generate_random_trajectories(&env, 20, 20, 3).unwrap();
        let wd = slice_windows(&ts, 8, Some(3));
        let cfg = EmbeddingConfig { epochs: 2, batch_size: 32, seed: 11, ..Default::default() };
        let a = train_embedding(&wd, &env, &cfg).unwrap();
        let b = train_embedding(&wd, &env, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.len(), 2);
        assert!(a.log[1].lr < a.log[0].lr);
    }

    #[test]
    fn training_rejects_empty_dataset() {
        let env = EnvSpec::pendulum();
        let ts = generate_random_trajectories(&env, 0, 20, 3).unwrap();
        let wd = slice_windows(&ts, 8, None);
        assert!(matches!(
            train_embedding(&wd, &env, &EmbeddingConfig::default()),
            Err(KeecError::State(_))
        ));
    }
}
