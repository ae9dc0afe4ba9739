//! Ground-truth simulated environments: the Gym pendulum, a forced
//! Lorenz-63 system and a periodic 1-D wave equation with distributed
//! actuation. All three are control-affine and integrated with classical
//! RK4 under a zero-order hold on the action.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{dim_err, KeecError, Result};
use crate::numkit::Matrix;
use crate::seed::Rng;

pub type State = DVector<f64>;
pub type Action = DVector<f64>;

/// States whose magnitude exceeds this are treated as a blown-up integration.
const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Pendulum,
    Lorenz63,
    Wave,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::Lorenz63 => "lorenz63",
            EnvKind::Wave => "wave",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = KeecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvKind::Pendulum),
            "lorenz63" | "lorenz" => Ok(EnvKind::Lorenz63),
            "wave" => Ok(EnvKind::Wave),
            other => Err(KeecError::Config(format!("unknown environment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Physics {
    Pendulum {
        mass: f64,
        length: f64,
        gravity: f64,
        max_speed: f64,
    },
    Lorenz {
        sigma: f64,
        rho: f64,
        beta: f64,
    },
    Wave {
        c: f64,
        dx: f64,
        points: usize,
        /// Grid index ranges `[start, end)` covered by each actuator.
        supports: Vec<(usize, usize)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub physics: Physics,
    pub dt: f64,
    pub action_low: DVector<f64>,
    pub action_high: DVector<f64>,
    pub goal: State,
    /// Action cost.
    pub r1: Matrix,
    /// State cost.
    pub r2: Matrix,
    pub horizon: usize,
    /// Standard deviation of the Gaussian perturbation added to wave initial states.
    pub init_noise_std: f64,
    /// RK4 sub-steps per control step.
    pub substeps: usize,
}

fn wave_supports(points: usize, n_a: usize) -> Vec<(usize, usize)> {
    // actuator j covers x in [j/n_a, (j+1)/n_a)
    (0..n_a)
        .map(|j| {
            let start = (j * points).div_ceil(n_a);
            let end = ((j + 1) * points).div_ceil(n_a);
            (start, end)
        })
        .collect()
}

impl EnvSpec {
    pub fn pendulum() -> Self {
        EnvSpec {
            kind: EnvKind::Pendulum,
            physics: Physics::Pendulum { mass: 1.0, length: 1.0, gravity: 10.0, max_speed: 8.0 },
            dt: 0.05,
            action_low: DVector::from_element(1, -2.0),
            action_high: DVector::from_element(1, 2.0),
            goal: DVector::zeros(2),
            r1: Matrix::from_element(1, 1, 0.001),
            r2: Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1])),
            horizon: 100,
            init_noise_std: 0.0,
            substeps: 1,
        }
    }

    pub fn lorenz63() -> Self {
        EnvSpec {
            kind: EnvKind::Lorenz63,
            physics: Physics::Lorenz { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 },
            dt: 0.1,
            action_low: DVector::from_element(3, -3.0),
            action_high: DVector::from_element(3, 3.0),
            goal: DVector::from_vec(vec![-8.0, -8.0, 27.0]),
            r1: Matrix::identity(3, 3) * 0.01,
            r2: Matrix::identity(3, 3),
            horizon: 500,
            init_noise_std: 0.0,
            substeps: 1,
        }
    }

    pub fn wave() -> Self {
        Self::wave_with(10)
    }

    /// Wave equation on [0, 1) with `n_a` equal-width actuators.
    pub fn wave_with(n_a: usize) -> Self {
        let dx = 0.02;
        let points = 50;
        EnvSpec {
            kind: EnvKind::Wave,
            physics: Physics::Wave { c: 0.1, dx, points, supports: wave_supports(points, n_a) },
            dt: 0.1,
            action_low: DVector::from_element(n_a, -1.0),
            action_high: DVector::from_element(n_a, 1.0),
            goal: DVector::zeros(2 * points),
            r1: Matrix::identity(n_a, n_a) * 0.01,
            r2: Matrix::identity(2 * points, 2 * points) * dx,
            horizon: 200,
            init_noise_std: 0.0,
            substeps: 1,
        }
    }

    pub fn by_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Pendulum => Self::pendulum(),
            EnvKind::Lorenz63 => Self::lorenz63(),
            EnvKind::Wave => Self::wave(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn state_dim(&self) -> usize {
        self.goal.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    /// Components of the state that are angles (wrapped to (−π, π]).
    pub fn angle_mask(&self) -> Vec<bool> {
        match self.kind {
            EnvKind::Pendulum => vec![true, false],
            _ => vec![false; self.state_dim()],
        }
    }

    /// Checks the structural invariants: SPD costs, a non-empty action box, dt > 0.
    pub fn validate(&self) -> Result<()> {
        let (m, d) = (self.state_dim(), self.action_dim());
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(KeecError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 {
            return Err(KeecError::Config("substeps must be at least 1".into()));
        }
        if self.action_high.len() != d {
            return Err(KeecError::Config("action bounds have different lengths".into()));
        }
        if self.action_low.iter().zip(self.action_high.iter()).any(|(l, h)| !(l < h)) {
            return Err(KeecError::Config("action_low must be < action_high elementwise".into()));
        }
        check_spd(&self.r1, d, "r1")?;
        check_spd(&self.r2, m, "r2")?;
        if let Physics::Wave { points, supports, .. } = &self.physics {
            if 2 * points != m || supports.len() != d {
                return Err(KeecError::Config("wave grid and actuator count disagree".into()));
            }
        }
        Ok(())
    }

    pub fn clip_action(&self, a: &Action) -> Action {
        Action::from_iterator(
            a.len(),
            a.iter()
                .zip(self.action_low.iter().zip(self.action_high.iter()))
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
        )
    }

    fn check_shapes(&self, s: &State, a: &Action) -> Result<()> {
        if s.len() != self.state_dim() || a.len() != self.action_dim() {
            return Err(dim_err(format!(
                "{}: expected state {} / action {}, got {} / {}",
                self.name(),
                self.state_dim(),
                self.action_dim(),
                s.len(),
                a.len()
            )));
        }
        Ok(())
    }

    /// Time derivative ṡ = f(s) + B(s)a.
    pub fn vector_field(&self, s: &State, a: &Action) -> Result<State> {
        self.check_shapes(s, a)?;
        Ok(self.field(s, a))
    }

    fn field(&self, s: &State, a: &Action) -> State {
        match &self.physics {
            Physics::Pendulum { mass, length, gravity, .. } => {
                let acc = 3.0 * gravity / (2.0 * length) * s[0].sin()
                    + 3.0 / (mass * length * length) * a[0];
                DVector::from_vec(vec![s[1], acc])
            }
            Physics::Lorenz { sigma, rho, beta } => {
                let (x, y, z) = (s[0], s[1], s[2]);
                DVector::from_vec(vec![
                    sigma * (y - x) + a[0],
                    x * (rho - z) - y + a[1],
                    x * y - beta * z + a[2],
                ])
            }
            Physics::Wave { c, dx, points, supports } => {
                let n = *points;
                let k = c * c / (dx * dx);
                let mut out = DVector::zeros(2 * n);
                for i in 0..n {
                    out[i] = s[n + i];
                    let left = s[(i + n - 1) % n];
                    let right = s[(i + 1) % n];
                    out[n + i] = k * (right - 2.0 * s[i] + left);
                }
                for (j, &(lo, hi)) in supports.iter().enumerate() {
                    for i in lo..hi {
                        out[n + i] += a[j];
                    }
                }
                out
            }
        }
    }

    /// Wraps angles and applies the pendulum speed limit.
    pub fn wrap_state(&self, s: &mut State) {
        if let Physics::Pendulum { max_speed, .. } = &self.physics {
            s[0] = wrap_angle(s[0]);
            s[1] = s[1].clamp(-max_speed, *max_speed);
        }
    }

    /// One RK4 step of length `dt` with the (clipped) action held constant.
    pub fn step_rk4(&self, s: &State, a: &Action) -> Result<State> {
        self.check_shapes(s, a)?;
        let a = self.clip_action(a);
        let m = self.substeps.max(1);
        let h = self.dt / m as f64;
        let mut next = s.clone();
        for _ in 0..m {
            let k1 = self.field(&next, &a);
            let k2 = self.field(&(&next + &k1 * (h / 2.0)), &a);
            let k3 = self.field(&(&next + &k2 * (h / 2.0)), &a);
            let k4 = self.field(&(&next + &k3 * h), &a);
            next += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(KeecError::Divergence(format!(
                "{} state left the finite range after an RK4 step",
                self.name()
            )));
        }
        self.wrap_state(&mut next);
        Ok(next)
    }

    /// s − s*, with angle components wrapped.
    pub fn state_error(&self, s: &State) -> State {
        let mut e = s - &self.goal;
        for (i, is_angle) in self.angle_mask().into_iter().enumerate() {
            if is_angle {
                e[i] = wrap_angle(e[i]);
            }
        }
        e
    }

    /// r(s, a) = −(‖s − s*‖²_{R2} + ‖a‖²_{R1}).
    pub fn reward(&self, s: &State, a: &Action) -> f64 {
        let e = self.state_error(s);
        -((&self.r2 * &e).dot(&e) + (&self.r1 * a).dot(a))
    }

    fn wave_profile(&self) -> State {
        let Physics::Wave { dx, points, .. } = &self.physics else {
            unreachable!("wave profile requested for {}", self.name())
        };
        let mut s = DVector::zeros(2 * points);
        for i in 0..*points {
            let x = i as f64 * dx;
            s[i] = 1.0 / (10.0 * x - 5.0).cosh();
        }
        s
    }

    fn add_noise(&self, s: &mut State, rng: &mut Rng) {
        if self.init_noise_std > 0.0 {
            for v in s.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v += self.init_noise_std * g;
            }
        }
    }

    /// Initial state drawn from the evaluation region.
    pub fn sample_initial(&self, rng: &mut Rng) -> State {
        let mut s = match self.kind {
            EnvKind::Pendulum => DVector::from_vec(vec![
                rng.random_range(-PI..=-2.9),
                rng.random_range(-8.0..=8.0),
            ]),
            EnvKind::Lorenz63 => DVector::from_vec(vec![
                -1.0 + rng.random_range(-1.0..=1.0),
                -17.0 + rng.random_range(-1.0..=1.0),
                -20.0 + rng.random_range(-1.0..=1.0),
            ]),
            EnvKind::Wave => {
                let mut s = self.wave_profile();
                self.add_noise(&mut s, rng);
                s
            }
        };
        self.wrap_state(&mut s);
        s
    }

    /// Initial state for offline data collection: the whole state box.
    pub fn sample_collection(&self, rng: &mut Rng) -> State {
        let mut s = match self.kind {
            EnvKind::Pendulum => DVector::from_vec(vec![
                rng.random_range(-PI..=PI),
                rng.random_range(-8.0..=8.0),
            ]),
            EnvKind::Lorenz63 => {
                DVector::from_fn(3, |_, _| rng.random_range(-30.0..=30.0))
            }
            EnvKind::Wave => return self.sample_initial(rng),
        };
        self.wrap_state(&mut s);
        s
    }

    pub fn sample_action(&self, rng: &mut Rng) -> Action {
        DVector::from_fn(self.action_dim(), |i, _| {
            rng.random_range(self.action_low[i]..=self.action_high[i])
        })
    }

    /// Discrete wave energy Σ(ψ² + c²(D⁺u)²)Δx, conserved by the unforced
    /// semi-discrete system.
    pub fn wave_energy(&self, s: &State) -> Option<f64> {
        let Physics::Wave { c, dx, points, .. } = &self.physics else {
            return None;
        };
        let n = *points;
        let e = (0..n)
            .map(|i| {
                let du = (s[(i + 1) % n] - s[i]) / dx;
                s[n + i] * s[n + i] + c * c * du * du
            })
            .sum::<f64>();
        Some(e * dx)
    }
}

fn check_spd(m: &Matrix, dim: usize, name: &str) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(KeecError::Config(format!(
            "{name} must be {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(KeecError::Config(format!("{name} is not symmetric")));
    }
    if Cholesky::new(m.clone()).is_none() {
        return Err(KeecError::Config(format!("{name} is not positive definite")));
    }
    Ok(())
}

/// Wraps to (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    theta - two_pi * ((theta - PI) / two_pi).ceil()
}
