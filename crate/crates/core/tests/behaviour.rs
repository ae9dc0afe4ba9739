use nalgebra::{DVector, Matrix2};
use rand::{Rng, SeedableRng};

use keec::data::{slice_windows, Trajectory, TrajectorySet, Window};
use keec::envs::EnvSpec;
use keec::koopman::{
    forward_loss, identify_operators, isometry_loss, latent_prediction_error, train_embedding_lifted,
    EmbeddingConfig, EmbeddingModel, LatentOperators, StateLift,
};
use keec::nn::{Activation, Layer, Mlp};
use keec::numkit::Matrix;
use keec::seed;
use keec::valuectl::{
    greedy_action, train_value, InitRegion, PolicyConfig, TdTrainer, Transition, ValueConfig, ValueModel,
};

fn rng(s: u64) -> seed::Rng {
    seed::Rng::seed_from_u64(s)
}

fn trajectory_set(trajectories: Vec<Trajectory>, seed: u64) -> TrajectorySet {
    let steps = trajectories[0].actions.len();
    let state_dim = trajectories[0].states[0].len();
    let action_dim = trajectories[0].actions[0].len();
    TrajectorySet { env_name: "synthetic".into(), steps, state_dim, action_dim, seed, trajectories, regenerated: 0 }
}

/// Exact samples of `x' = −x + a` with piecewise-constant actions.
fn scalar_linear_data(count: usize, steps: usize, dt: f64, seed: u64) -> TrajectorySet {
    let mut r = rng(seed);
    let decay = (-dt).exp();
    let trajectories = (0..count)
        .map(|_| {
            let mut x = r.random_range(-1.0..1.0);
            let mut states = vec![DVector::from_element(1, x)];
            let mut actions = Vec::new();
            for _ in 0..steps {
                let a: f64 = r.random_range(-1.0..1.0);
                x = decay * x + (1.0 - decay) * a;
                states.push(DVector::from_element(1, x));
                actions.push(DVector::from_element(1, a));
            }
            Trajectory { states, actions, rewards: vec![0.0; steps] }
        })
        .collect();
    trajectory_set(trajectories, seed)
}

fn linear_layer(weight: Matrix) -> Layer {
    let rows = weight.nrows();
    Layer { weight, bias: DVector::zeros(rows), activation: Activation::None }
}

fn linear_model(encoder: Matrix, decoder: Matrix, lift_dim: usize) -> EmbeddingModel {
    EmbeddingModel {
        lift: StateLift::identity(lift_dim),
        n: encoder.nrows(),
        encoder: Mlp { layers: vec![linear_layer(encoder)] },
        decoder: Mlp { layers: vec![linear_layer(decoder)] },
        lambda_met: 0.0,
    }
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

fn linear_embedding_config(epochs: usize) -> EmbeddingConfig {
    EmbeddingConfig { n: 2, lambda_met: 0.3, epochs, batch_size: 64, lr: 3e-3, seed: 11, ..Default::default() }
}

#[test]
fn scalar_linear_system_is_predicted_in_latent_space() {
    let dt = 0.1;
    let train = slice_windows(&scalar_linear_data(200, 20, dt, 1), 4, Some(2));
    let held = slice_windows(&scalar_linear_data(50, 20, dt, 99), 1, None);
    let fit = train_embedding_lifted(&train, StateLift::identity(1), dt, &linear_embedding_config(60)).unwrap();
    let err = latent_prediction_error(&fit.model, &fit.operators, &held).unwrap();
    assert!(err <= 1e-3, "held-out latent error {err}");
}

#[test]
fn latent_error_tracks_training_loss() {
    let dt = 0.1;
    let train = slice_windows(&scalar_linear_data(200, 20, dt, 1), 4, Some(2));
    let held = slice_windows(&scalar_linear_data(50, 20, dt, 99), 1, None);
    let mut losses = Vec::new();
    let mut errors = Vec::new();
    for epochs in [1, 2, 3, 5, 8, 12, 20] {
        let fit = train_embedding_lifted(&train, StateLift::identity(1), dt, &linear_embedding_config(epochs)).unwrap();
        losses.push(fit.log.last().unwrap().total);
        errors.push(latent_prediction_error(&fit.model, &fit.operators, &held).unwrap());
    }
    let rho = spearman(&losses, &errors);
    assert!(rho > 0.9, "spearman {rho}; losses {losses:?}; errors {errors:?}");
}

#[test]
fn identity_encoder_on_bilinear_system_has_tiny_forward_loss() {
    let dt = 1e-3;
    let p = Matrix::from_row_slice(2, 2, &[-0.3, 0.5, -0.4, -0.2]);
    let u = Matrix::from_row_slice(2, 2, &[0.2, -0.1, 0.3, 0.1]);
    let field = |z: &DVector<f64>, a: f64| &p * z + (&u * z) * a;
    let mut r = rng(5);
    let trajectories = (0..40)
        .map(|_| {
            let mut z = DVector::from_fn(2, |_, _| r.random_range(-1.0..1.0));
            let mut states = vec![z.clone()];
            let mut actions = Vec::new();
            for _ in 0..30 {
                let a: f64 = r.random_range(-1.0..1.0);
                let h = dt / 50.0;
                for _ in 0..50 {
                    let k1 = field(&z, a);
                    let k2 = field(&(&z + &k1 * (h / 2.0)), a);
                    let k3 = field(&(&z + &k2 * (h / 2.0)), a);
                    let k4 = field(&(&z + &k3 * h), a);
                    z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                }
                states.push(z.clone());
                actions.push(DVector::from_element(1, a));
            }
            Trajectory { states, actions, rewards: vec![0.0; 30] }
        })
        .collect();
    let ts = trajectory_set(trajectories, 5);
    let model = linear_model(Matrix::identity(2, 2), Matrix::identity(2, 2), 2);

    let pairs: Vec<(DVector<f64>, DVector<f64>, f64)> = ts
        .trajectories
        .iter()
        .flat_map(|t| (0..t.actions.len()).map(move |i| (t.states[i].clone(), t.states[i + 1].clone(), t.actions[i][0])))
        .collect();
    let z = Matrix::from_fn(pairs.len(), 2, |i, j| pairs[i].0[j]);
    let zp = Matrix::from_fn(pairs.len(), 2, |i, j| pairs[i].1[j]);
    let a = Matrix::from_fn(pairs.len(), 1, |i, _| pairs[i].2);
    let ops = identify_operators(&z, &zp, &a, dt, 1e-3).unwrap();

    let wd = slice_windows(&ts, 3, None);
    let windows: Vec<Window<'_>> = wd.windows().collect();
    let (loss, _) = forward_loss(&model, &ops, &windows).unwrap();
    assert!(loss < 1e-6, "forward loss {loss}");
}

#[test]
fn exact_model_has_zero_forward_loss() {
    let dt = 0.1;
    let ops = LatentOperators::new(
        Matrix::from_row_slice(2, 2, &[-0.5, 1.0, -1.0, -0.5]),
        vec![Matrix::from_row_slice(2, 2, &[0.0, 0.3, 0.2, 0.0])],
        dt,
    )
    .unwrap();
    let mut r = rng(3);
    let trajectories = (0..5)
        .map(|_| {
            let mut z = DVector::from_fn(2, |_, _| r.random_range(-1.0..1.0));
            let mut states = vec![z.clone()];
            let mut actions = Vec::new();
            for _ in 0..6 {
                let a = DVector::from_element(1, r.random_range(-1.0..1.0));
                z = ops.predict_flow(&z, &a).unwrap();
                states.push(z.clone());
                actions.push(a);
            }
            Trajectory { states, actions, rewards: vec![0.0; 6] }
        })
        .collect();
    let ts = trajectory_set(trajectories, 3);
    let model = linear_model(Matrix::identity(2, 2), Matrix::identity(2, 2), 2);
    let wd = slice_windows(&ts, 4, None);
    let windows: Vec<Window<'_>> = wd.windows().collect();
    let (loss, _) = forward_loss(&model, &ops, &windows).unwrap();
    assert!(loss < 1e-14, "forward loss {loss}");
}

#[test]
fn orthogonal_encoder_is_an_exact_isometry() {
    let ts = scalar_linear_data(4, 10, 0.1, 8);
    let planar: Vec<Trajectory> = ts
        .trajectories
        .iter()
        .map(|t| Trajectory {
            states: t.states.iter().map(|s| DVector::from_vec(vec![s[0], 0.5 * s[0] * s[0]])).collect(),
            actions: t.actions.clone(),
            rewards: t.rewards.clone(),
        })
        .collect();
    let ts = trajectory_set(planar, 8);
    let angle: f64 = 0.7;
    let rot = Matrix2::new(angle.cos(), -angle.sin(), angle.sin(), angle.cos());
    let rot = Matrix::from_fn(2, 2, |i, j| rot[(i, j)]);
    let model = linear_model(rot.clone(), rot.transpose(), 2);
    let wd = slice_windows(&ts, 3, None);
    let windows: Vec<Window<'_>> = wd.windows().collect();
    let (loss, _) = isometry_loss(&model, &windows).unwrap();
    assert!(loss < 1e-14, "isometry loss {loss}");
}

#[test]
fn doubling_encoder_distorts_by_mean_step() {
    let ts = scalar_linear_data(4, 10, 0.1, 9);
    let model = linear_model(Matrix::from_column_slice(2, 1, &[2.0, 0.0]), Matrix::from_row_slice(1, 2, &[0.5, 0.0]), 1);
    let wd = slice_windows(&ts, 3, None);
    let windows: Vec<Window<'_>> = wd.windows().collect();
    let (loss, _) = isometry_loss(&model, &windows).unwrap();
    let mut sum = 0.0;
    let mut count = 0.0;
    for w in &windows {
        for t in 0..w.len() {
            sum += (w.states[t + 1][0] - w.states[t][0]).abs();
            count += 1.0;
        }
    }
    let expected = sum / count;
    assert!((loss - expected).abs() <= 1e-12 * expected, "loss {loss}, expected {expected}");
}

#[test]
fn td_learns_discounted_sums_on_a_chain() {
    let gamma = 0.5;
    let e = |i: usize| DVector::from_fn(3, |j, _| if i == j { 1.0 } else { 0.0 });
    let rewards = [-1.0, -0.5, -0.2];
    let chain: Vec<Transition> = (0..3)
        .map(|i| Transition { z: e(i), a: DVector::zeros(1), z_next: e((i + 1).min(2)), r: rewards[i] })
        .collect();
    let v2 = rewards[2] / (1.0 - gamma);
    let v1 = rewards[1] + gamma * v2;
    let v0 = rewards[0] + gamma * v1;
    let exact = [v0, v1, v2];

    let vm = ValueModel::mlp_with_width(3, 8, gamma, 1.0, &mut rng(4)).unwrap();
    let mut trainer = TdTrainer::new(vm, 1e-3, 100);
    let batch: Vec<&Transition> = chain.iter().collect();
    for lr in [1e-2, 1e-3, 1e-4] {
        trainer.lr = lr;
        for _ in 0..5000 {
            trainer.update(&batch).unwrap();
        }
    }
    for (i, v) in exact.iter().enumerate() {
        let got = trainer.value.value(&e(i)).unwrap();
        assert!((got - v).abs() <= 1e-3, "state {i}: {got} vs {v}");
    }
}

#[test]
fn zero_reward_drives_value_to_zero() {
    let mut env = EnvSpec::pendulum();
    env.r2 = Matrix::zeros(2, 2);
    let n = 4;
    let model = EmbeddingModel::for_env(&env, n, 0.3, &mut rng(6)).unwrap();
    let ops = LatentOperators::new(-Matrix::identity(n, n), vec![Matrix::zeros(n, n)], env.dt).unwrap();
    let cfg = ValueConfig {
        horizon: Some(100),
        scale: Some(1.0),
        explore: 0.0,
        init_region: InitRegion::Evaluation,
        seed: 2,
        ..Default::default()
    };
    let trained = train_value(&model, &ops, &env, &cfg).unwrap();
    let mut r = rng(7);
    for _ in 0..200 {
        let z = model.encode_one(&env.sample_initial(&mut r)).unwrap() * r.random_range(0.0..1.0);
        let v = trained.value.value(&z).unwrap();
        assert!(v.abs() <= 1e-3, "V({z:?}) = {v}");
    }
}

/// Fixed point of `K = q·dt + γ(α − βg)²K + ρ dt·g²` for the linear policy `a = −g x`.
fn policy_value(alpha: f64, beta: f64, g: f64, q: f64, rho: f64, dt: f64, gamma: f64) -> f64 {
    (q * dt + rho * dt * g * g) / (1.0 - gamma * (alpha - beta * g).powi(2))
}

#[test]
fn value_learning_matches_discounted_lqr() {
    let (dt, p, b, q, rho, gamma): (f64, f64, f64, f64, f64, f64) = (0.05, 0.5, 1.0, 1.0, 0.1, 0.9);
    let alpha = (p * dt).exp();
    let beta = b * (alpha - 1.0) / p;

    let mut k = q * dt;
    for _ in 0..100_000 {
        k = q * dt + gamma * alpha * alpha * k - (gamma * alpha * beta * k).powi(2) / (rho * dt + gamma * beta * beta * k);
    }
    let g_opt = gamma * alpha * beta * k / (rho * dt + gamma * beta * beta * k);
    assert!((policy_value(alpha, beta, g_opt, q, rho, dt, gamma) - k).abs() <= 1e-9 * k);

    // Latent (x, 1) carries the additive input through the bilinear term.
    let ops = LatentOperators::new(
        Matrix::from_row_slice(2, 2, &[p, 0.0, 0.0, 0.0]),
        vec![Matrix::from_row_slice(2, 2, &[0.0, b, 0.0, 0.0])],
        dt,
    )
    .unwrap();
    let policy = PolicyConfig::new(
        gamma,
        Matrix::from_element(1, 1, rho),
        dt,
        DVector::from_element(1, -50.0),
        DVector::from_element(1, 50.0),
    )
    .unwrap();
    let z_star = DVector::from_vec(vec![0.0, 1.0]);
    let vm = ValueModel::quadratic(z_star, gamma, k, &mut rng(12)).unwrap();
    let mut trainer = TdTrainer::new(vm, 1e-3, 100);
    let mut r = rng(13);
    let mut buffer: Vec<Transition> = Vec::new();
    for episode in 0..1500 {
        let mut z = DVector::from_vec(vec![r.random_range(-1.0..1.0), 1.0]);
        for _ in 0..10 {
            let a = greedy_action(&ops, &trainer.value, &z, &policy).unwrap();
            let z_next = ops.predict_flow(&z, &a).unwrap();
            let reward = -(q * z[0] * z[0] + rho * a[0] * a[0]) * dt;
            buffer.push(Transition { z: z.clone(), a, z_next: z_next.clone(), r: reward });
            z = z_next;
        }
        trainer.lr = match episode {
            0..1000 => 1e-3,
            _ => 1e-4,
        };
        for _ in 0..50 {
            let batch: Vec<&Transition> = (0..256).map(|_| &buffer[r.random_range(0..buffer.len())]).collect();
            trainer.update(&batch).unwrap();
        }
    }
    for x in [-1.0, -0.5, 0.5, 1.0] {
        let v = trainer.value.value(&DVector::from_vec(vec![x, 1.0])).unwrap();
        let exact = -k * x * x;
        assert!((v - exact).abs() <= 0.05 * exact.abs(), "V({x}) = {v}, LQR {exact}");
    }
}
